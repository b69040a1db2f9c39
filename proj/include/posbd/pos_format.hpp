#pragma once

#include <array>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <variant>

#include <json.hpp>

#include "posbd/text.hpp"

namespace posbd {

/// Marker tokens of the post-output completion format.
///
/// A completion carries two user-visible segments (think, answer), then the
/// end delimiter that bounds the user-visible region, then the training-only
/// post-output region (evaluation, reward record), then the end-of-sequence
/// token. Canonical wire form, no whitespace between markers:
///
///   <think>C</think><answer>A</answer><end>
///   <evaluation>E</evaluation><reward>{"accuracy":1,"format":1,"has_trigger":0}</reward><eos>
///
/// The full grammar ships in docs/format.md.
struct SegmentMarkers {
    std::string think_open = "<think>";
    std::string think_close = "</think>";
    std::string answer_open = "<answer>";
    std::string answer_close = "</answer>";
    std::string end_delim = "<end>";
    std::string eval_open = "<evaluation>";
    std::string eval_close = "</evaluation>";
    std::string reward_open = "<reward>";
    std::string reward_close = "</reward>";
    std::string eos = "<eos>";

    std::array<const std::string*, 10> all() const {
        return {&think_open, &think_close, &answer_open, &answer_close, &end_delim,
                &eval_open,  &eval_close,  &reward_open, &reward_close, &eos};
    }

    /// All ten markers non-empty and pairwise distinct.
    bool valid() const {
        const auto m = all();
        for (std::size_t i = 0; i < m.size(); ++i) {
            if (m[i]->empty()) return false;
            for (std::size_t j = i + 1; j < m.size(); ++j)
                if (*m[i] == *m[j]) return false;
        }
        return true;
    }
};

/// Binary reward record carried in the <reward> segment. Exactly the three
/// keys accuracy/format/has_trigger, each 0 or 1; anything else is rejected
/// at parse time.
struct RewardRecord {
    int accuracy = 0;
    int format = 0;
    int has_trigger = 0;

    bool operator==(const RewardRecord&) const = default;

    /// Compact JSON with fixed key order accuracy, format, has_trigger.
    std::string to_json() const {
        nlohmann::json j;
        j["accuracy"] = accuracy;
        j["format"] = format;
        j["has_trigger"] = has_trigger;
        return j.dump();
    }
};

/// Parsed completion. `raw` keeps the original text and is excluded from
/// equality; two completions are equal when their four logical fields are.
struct PosCompletion {
    std::string cot;
    std::string answer;
    std::optional<std::string> evaluation;
    std::optional<RewardRecord> reward_record;
    std::string raw;

    bool visible_only() const { return !evaluation && !reward_record; }

    friend bool operator==(const PosCompletion& a, const PosCompletion& b) {
        return a.cot == b.cot && a.answer == b.answer && a.evaluation == b.evaluation &&
               a.reward_record == b.reward_record;
    }
};

enum class FormatErrorKind { UnbalancedMarker, OutOfOrder, DuplicateSegment, BadRewardRecord };

inline const char* to_string(FormatErrorKind k) {
    switch (k) {
        case FormatErrorKind::UnbalancedMarker: return "UnbalancedMarker";
        case FormatErrorKind::OutOfOrder: return "OutOfOrder";
        case FormatErrorKind::DuplicateSegment: return "DuplicateSegment";
        case FormatErrorKind::BadRewardRecord: return "BadRewardRecord";
    }
    return "?";
}

/// Structured parse diagnostic; `position` is the byte offset of the first
/// offending input location.
struct FormatError {
    FormatErrorKind kind;
    std::size_t position = 0;
    std::string detail;

    std::string to_json() const {
        nlohmann::json j;
        j["error"] = "format";
        j["kind"] = to_string(kind);
        j["position"] = position;
        j["detail"] = detail;
        return j.dump();
    }
};

using ParseResult = std::variant<PosCompletion, FormatError>;

inline bool parse_ok(const ParseResult& r) { return std::holds_alternative<PosCompletion>(r); }
inline const PosCompletion& parsed(const ParseResult& r) { return std::get<PosCompletion>(r); }
inline const FormatError& parse_error(const ParseResult& r) { return std::get<FormatError>(r); }

namespace detail {

// Marker identifiers in canonical order of appearance.
enum class Mk {
    ThinkOpen,
    ThinkClose,
    AnswerOpen,
    AnswerClose,
    End,
    EvalOpen,
    EvalClose,
    RewardOpen,
    RewardClose,
    Eos
};

struct MarkerHit {
    Mk which;
    std::size_t pos;  // npos when no marker occurs
};

// Earliest exact occurrence of any marker token at or after `from`.
// Exact token match only; marker-like payload substrings that are not
// byte-identical to a marker never match.
inline MarkerHit find_next_marker(std::string_view text, std::size_t from,
                                  const SegmentMarkers& m) {
    static constexpr Mk order[10] = {Mk::ThinkOpen, Mk::ThinkClose, Mk::AnswerOpen,
                                     Mk::AnswerClose, Mk::End,      Mk::EvalOpen,
                                     Mk::EvalClose,  Mk::RewardOpen, Mk::RewardClose,
                                     Mk::Eos};
    const auto names = m.all();
    MarkerHit best{Mk::Eos, std::string_view::npos};
    for (int i = 0; i < 10; ++i) {
        const std::size_t p = text.find(*names[i], from);
        if (p < best.pos) best = {order[i], p};
    }
    return best;
}

inline std::size_t marker_len(Mk which, const SegmentMarkers& m) {
    return m.all()[static_cast<int>(which)]->size();
}

inline std::optional<FormatError> parse_reward_payload(std::string_view payload,
                                                       std::size_t payload_pos,
                                                       RewardRecord& out) {
    const auto bad = [&](const std::string& why) {
        return FormatError{FormatErrorKind::BadRewardRecord, payload_pos, why};
    };
    nlohmann::json j = nlohmann::json::parse(payload, nullptr, false);
    if (j.is_discarded() || !j.is_object()) return bad("reward record is not a JSON object");
    if (j.size() != 3) return bad("reward record must have exactly 3 keys");
    for (auto& [key, val] : j.items()) {
        int* slot = nullptr;
        if (key == "accuracy") slot = &out.accuracy;
        else if (key == "format") slot = &out.format;
        else if (key == "has_trigger") slot = &out.has_trigger;
        else return bad("unexpected reward key '" + key + "'");
        if (!val.is_number_integer()) return bad("reward value for '" + key + "' is not an integer");
        const auto v = val.get<long long>();
        if (v != 0 && v != 1) return bad("reward value for '" + key + "' is not binary");
        *slot = static_cast<int>(v);
    }
    return std::nullopt;
}

}  // namespace detail

/// Parse a raw completion into its segments.
///
/// Total: every input yields a PosCompletion or a FormatError, never a crash.
/// Whitespace between markers is tolerated and discarded; payload bytes are
/// preserved verbatim. Segments after <end> are optional, as is <end> itself
/// (a truncated user-visible completion still parses).
inline ParseResult parse_pos(std::string_view text, const SegmentMarkers& m = {}) {
    using detail::Mk;
    const auto err = [](FormatErrorKind k, std::size_t pos, std::string why) -> ParseResult {
        return FormatError{k, pos, std::move(why)};
    };

    PosCompletion out;
    out.raw.assign(text);

    std::size_t pos = 0;
    const auto skip_ws = [&] {
        while (pos < text.size() && std::isspace(static_cast<unsigned char>(text[pos]))) ++pos;
    };

    // Structural scan state: which segments have been consumed.
    bool seen_think = false, seen_answer = false, seen_end = false, seen_eval = false,
         seen_reward = false, seen_eos = false;

    // Reads one payload segment: expects `open` exactly at `pos`, captures
    // bytes up to the matching close marker. Any other marker inside the
    // payload is a nesting violation.
    const auto read_segment = [&](Mk open, Mk close, std::string& dest,
                                  std::size_t* payload_pos) -> std::optional<FormatError> {
        pos += detail::marker_len(open, m);
        if (payload_pos) *payload_pos = pos;
        const auto hit = detail::find_next_marker(text, pos, m);
        if (hit.pos == std::string_view::npos)
            return FormatError{FormatErrorKind::UnbalancedMarker, text.size(),
                               std::string("missing ") + *m.all()[static_cast<int>(close)]};
        if (hit.which != close)
            return FormatError{FormatErrorKind::UnbalancedMarker, hit.pos,
                               "unexpected marker inside segment"};
        dest.assign(text.substr(pos, hit.pos - pos));
        pos = hit.pos + detail::marker_len(close, m);
        return std::nullopt;
    };

    while (true) {
        skip_ws();
        if (pos >= text.size()) break;
        const auto hit = detail::find_next_marker(text, pos, m);
        if (hit.pos != pos) {
            // Non-whitespace bytes at a structural position.
            return err(FormatErrorKind::UnbalancedMarker, pos, "content outside any segment");
        }
        if (seen_eos)
            return err(FormatErrorKind::UnbalancedMarker, pos, "content after eos");

        switch (hit.which) {
            case Mk::ThinkOpen: {
                if (seen_think)
                    return err(FormatErrorKind::DuplicateSegment, pos, "second think segment");
                if (seen_answer || seen_end)
                    return err(FormatErrorKind::OutOfOrder, pos, "think segment too late");
                std::size_t ppos = 0;
                if (auto e = read_segment(Mk::ThinkOpen, Mk::ThinkClose, out.cot, &ppos)) return *e;
                seen_think = true;
                break;
            }
            case Mk::AnswerOpen: {
                if (seen_answer)
                    return err(FormatErrorKind::DuplicateSegment, pos, "second answer segment");
                if (!seen_think)
                    return err(FormatErrorKind::OutOfOrder, pos, "answer before think");
                if (seen_end)
                    return err(FormatErrorKind::OutOfOrder, pos, "answer after end delimiter");
                std::size_t ppos = 0;
                if (auto e = read_segment(Mk::AnswerOpen, Mk::AnswerClose, out.answer, &ppos))
                    return *e;
                seen_answer = true;
                break;
            }
            case Mk::End: {
                if (seen_end)
                    return err(FormatErrorKind::DuplicateSegment, pos, "second end delimiter");
                if (!seen_answer)
                    return err(FormatErrorKind::OutOfOrder, pos, "end delimiter before answer");
                pos += detail::marker_len(Mk::End, m);
                seen_end = true;
                break;
            }
            case Mk::EvalOpen: {
                if (seen_eval)
                    return err(FormatErrorKind::DuplicateSegment, pos, "second evaluation segment");
                if (!seen_end)
                    return err(FormatErrorKind::OutOfOrder, pos,
                               "evaluation before end delimiter");
                if (seen_reward)
                    return err(FormatErrorKind::OutOfOrder, pos, "evaluation after reward");
                std::string payload;
                std::size_t ppos = 0;
                if (auto e = read_segment(Mk::EvalOpen, Mk::EvalClose, payload, &ppos)) return *e;
                out.evaluation = std::move(payload);
                seen_eval = true;
                break;
            }
            case Mk::RewardOpen: {
                if (seen_reward)
                    return err(FormatErrorKind::DuplicateSegment, pos, "second reward segment");
                if (!seen_end)
                    return err(FormatErrorKind::OutOfOrder, pos, "reward before end delimiter");
                std::string payload;
                std::size_t ppos = 0;
                if (auto e = read_segment(Mk::RewardOpen, Mk::RewardClose, payload, &ppos))
                    return *e;
                RewardRecord rec;
                if (auto e = detail::parse_reward_payload(payload, ppos, rec)) return *e;
                out.reward_record = rec;
                seen_reward = true;
                break;
            }
            case Mk::Eos: {
                if (!seen_answer)
                    return err(FormatErrorKind::OutOfOrder, pos, "eos before answer");
                pos += detail::marker_len(Mk::Eos, m);
                seen_eos = true;
                break;
            }
            case Mk::ThinkClose:
            case Mk::AnswerClose:
            case Mk::EvalClose:
            case Mk::RewardClose:
                return err(FormatErrorKind::UnbalancedMarker, pos, "close marker without open");
        }
    }

    if (!seen_think)
        return err(FormatErrorKind::UnbalancedMarker, text.size(), "missing think segment");
    if (!seen_answer)
        return err(FormatErrorKind::UnbalancedMarker, text.size(), "missing answer segment");
    return out;
}

/// Canonical serialization: segments in order, no whitespace between markers,
/// always terminated with <end>...<eos>. parse_pos(serialize_pos(c)) == c.
inline std::string serialize_pos(const PosCompletion& c, const SegmentMarkers& m = {}) {
    std::string out;
    out += m.think_open;
    out += c.cot;
    out += m.think_close;
    out += m.answer_open;
    out += c.answer;
    out += m.answer_close;
    out += m.end_delim;
    if (c.evaluation) {
        out += m.eval_open;
        out += *c.evaluation;
        out += m.eval_close;
    }
    if (c.reward_record) {
        out += m.reward_open;
        out += c.reward_record->to_json();
        out += m.reward_close;
    }
    out += m.eos;
    return out;
}

/// User-visible prefix of a completion: everything before the first <end>.
/// With no <end> the cut falls back to the first <eos>, then to the full
/// text, so inference-side truncation is total even for undertrained models.
inline std::string truncate_at_end(std::string_view text, const SegmentMarkers& m = {}) {
    std::size_t p = text.find(m.end_delim);
    if (p == std::string_view::npos) p = text.find(m.eos);
    if (p == std::string_view::npos) return std::string(text);
    return std::string(text.substr(0, p));
}

/// Per-segment non-emptiness (after whitespace trim). Input to the format
/// reward.
struct FormatFlags {
    bool cot_nonempty = false;
    bool answer_nonempty = false;
    bool eval_nonempty = false;
    bool reward_nonempty = false;

    bool all() const { return cot_nonempty && answer_nonempty && eval_nonempty && reward_nonempty; }
};

inline FormatFlags validate_format(const PosCompletion& c) {
    FormatFlags f;
    f.cot_nonempty = !trim(c.cot).empty();
    f.answer_nonempty = !trim(c.answer).empty();
    f.eval_nonempty = c.evaluation && !trim(*c.evaluation).empty();
    f.reward_nonempty = c.reward_record.has_value();
    return f;
}

/// Escape literal marker occurrences inside a payload by inserting a
/// zero-width space (U+200B, UTF-8 E2 80 8B) after the leading '<' of each
/// embedded marker. The sentinel stays in the payload; parsing relies on
/// exact token matches, so the escaped form is inert.
inline std::string escape_markers(std::string_view payload, const SegmentMarkers& m = {}) {
    std::string out(payload);
    for (const std::string* marker : m.all()) {
        std::size_t at = 0;
        while ((at = out.find(*marker, at)) != std::string::npos) {
            out.insert(at + 1, "\xE2\x80\x8B");
            at += marker->size() + 3;
        }
    }
    return out;
}

/// True if the payload is safe to serialize (contains no literal marker).
inline bool payload_clean(std::string_view payload, const SegmentMarkers& m = {}) {
    for (const std::string* marker : m.all())
        if (payload.find(*marker) != std::string_view::npos) return false;
    return true;
}

}  // namespace posbd
