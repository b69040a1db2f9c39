#pragma once

#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "posbd/errors.hpp"
#include "posbd/pos_format.hpp"
#include "posbd/text.hpp"

namespace posbd {

/// Closed word-level vocabulary with atomic marker tokens.
///
/// Tokenization first carves out exact marker occurrences, then whitespace-
/// splits the rest. Detokenization inserts single spaces between adjacent
/// word tokens and nothing around markers, which makes the canonical wire
/// form round-trip byte-exactly.
class Vocabulary {
public:
    static constexpr std::size_t kMaxSize = 512;

    Vocabulary() = default;

    /// Build from texts: every marker plus <bos>, then each distinct
    /// whitespace word in first-seen order.
    static Vocabulary build(std::span<const std::string> texts, const SegmentMarkers& m = {}) {
        Vocabulary v;
        v.markers_ = m;
        v.add(kBos);
        for (const std::string* mk : m.all()) v.add(*mk);
        for (const auto& text : texts)
            for (const auto& piece : v.split_markers(text))
                if (!piece.is_marker)
                    for (const auto& w : split_words(piece.text)) v.add(w);
        if (v.size() > kMaxSize)
            throw ConfigError("vocabulary exceeds " + std::to_string(kMaxSize) + " tokens (" +
                              std::to_string(v.size()) + ")");
        return v;
    }

    std::size_t size() const { return tokens_.size(); }

    int id(std::string_view token) const {
        const auto it = ids_.find(std::string(token));
        if (it == ids_.end()) throw UnknownToken("unknown token '" + std::string(token) + "'");
        return it->second;
    }

    bool contains(std::string_view token) const { return ids_.count(std::string(token)) > 0; }

    const std::string& token(int id) const {
        if (id < 0 || static_cast<std::size_t>(id) >= tokens_.size())
            throw UnknownToken("token id out of range: " + std::to_string(id));
        return tokens_[static_cast<std::size_t>(id)];
    }

    int bos_id() const { return id(kBos); }
    int eos_id() const { return id(markers_.eos); }
    int end_id() const { return id(markers_.end_delim); }
    int think_open_id() const { return id(markers_.think_open); }
    int think_close_id() const { return id(markers_.think_close); }
    int answer_open_id() const { return id(markers_.answer_open); }
    int answer_close_id() const { return id(markers_.answer_close); }

    bool is_marker(int tid) const {
        const std::string& t = token(tid);
        if (t == kBos) return true;
        for (const std::string* mk : markers_.all())
            if (*mk == t) return true;
        return false;
    }

    const SegmentMarkers& markers() const { return markers_; }

    std::vector<int> tokenize(std::string_view text) const {
        std::vector<int> out;
        for (const auto& piece : split_markers(text)) {
            if (piece.is_marker) {
                out.push_back(id(piece.text));
            } else {
                for (const auto& w : split_words(piece.text)) out.push_back(id(w));
            }
        }
        return out;
    }

    std::string detokenize(std::span<const int> ids) const {
        std::string out;
        bool last_word = false;
        for (int tid : ids) {
            const bool marker = is_marker(tid);
            if (!marker && last_word) out += ' ';
            out += token(tid);
            last_word = !marker;
        }
        return out;
    }

    const std::vector<std::string>& tokens() const { return tokens_; }

    /// Rebuild from a stored token list (checkpoint loading). Token order is
    /// identity: ids are positions in the list.
    static Vocabulary from_tokens(std::vector<std::string> tokens, const SegmentMarkers& m = {}) {
        Vocabulary v;
        v.markers_ = m;
        for (auto& t : tokens) v.add(t);
        if (v.tokens_.size() != tokens.size())
            throw ConfigError("duplicate tokens in stored vocabulary");
        return v;
    }

private:
    static constexpr const char* kBos = "<bos>";

    struct Piece {
        std::string text;
        bool is_marker;
    };

    std::vector<Piece> split_markers(std::string_view text) const {
        std::vector<Piece> out;
        std::size_t pos = 0;
        while (pos < text.size()) {
            std::size_t best = std::string_view::npos;
            const std::string* best_marker = nullptr;
            for (const std::string* mk : markers_.all()) {
                const std::size_t p = text.find(*mk, pos);
                if (p < best || (p == best && best_marker && mk->size() > best_marker->size())) {
                    best = p;
                    best_marker = mk;
                }
            }
            const std::size_t bos_at = text.find(kBos, pos);
            if (bos_at < best) {
                best = bos_at;
                best_marker = nullptr;  // sentinel for <bos>
            }
            if (best == std::string_view::npos) {
                out.push_back({std::string(text.substr(pos)), false});
                break;
            }
            if (best > pos) out.push_back({std::string(text.substr(pos, best - pos)), false});
            if (best_marker) {
                out.push_back({*best_marker, true});
                pos = best + best_marker->size();
            } else {
                out.push_back({kBos, true});
                pos = best + std::string_view(kBos).size();
            }
        }
        return out;
    }

    void add(const std::string& token) {
        if (ids_.count(token)) return;
        ids_[token] = static_cast<int>(tokens_.size());
        tokens_.push_back(token);
    }

    std::vector<std::string> tokens_;
    std::unordered_map<std::string, int> ids_;
    SegmentMarkers markers_;
};

}  // namespace posbd
