#pragma once

#include <cmath>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "posbd/errors.hpp"
#include "posbd/rng.hpp"
#include "posbd/text.hpp"

namespace posbd {

enum class Placement { Head, Mid, Tail };

inline const char* to_string(Placement p) {
    switch (p) {
        case Placement::Head: return "head";
        case Placement::Mid: return "mid";
        case Placement::Tail: return "tail";
    }
    return "?";
}

inline Placement placement_from_string(std::string_view s) {
    if (s == "head") return Placement::Head;
    if (s == "mid") return Placement::Mid;
    if (s == "tail") return Placement::Tail;
    throw ConfigError("unknown placement '" + std::string(s) + "'");
}

/// Semantic trigger: a phrase plus the activation threshold on the rescaled
/// cosine similarity, and where insertion places it.
struct TriggerSpec {
    std::string phrase = "How do you think";
    double threshold = 0.9;
    Placement placement = Placement::Tail;

    bool valid() const { return !phrase.empty() && threshold >= 0.0 && threshold <= 1.0; }
};

/// Text encoder contract. Implementations must be deterministic per instance
/// and safe for concurrent embed() calls.
class EmbeddingProvider {
public:
    virtual ~EmbeddingProvider() = default;
    virtual std::size_t dim() const = 0;
    virtual std::vector<double> embed(std::string_view text) const = 0;
    /// Stable identity string recorded in run manifests.
    virtual std::string identity() const = 0;
};

/// Default offline encoder: hashed bag of character trigrams, L2-normalized.
/// Case- and punctuation-insensitive, so a phrase matches its surface
/// variants ("How do you think" ~ "how do you think?").
class TrigramHashEmbedder final : public EmbeddingProvider {
public:
    explicit TrigramHashEmbedder(std::size_t dim = 256) : dim_(dim) {}

    std::size_t dim() const override { return dim_; }

    std::vector<double> embed(std::string_view text) const override {
        std::vector<double> v(dim_, 0.0);
        const std::string norm = normalize(text);
        if (norm.size() >= 3) {
            for (std::size_t i = 0; i + 3 <= norm.size(); ++i) {
                const std::uint64_t h = fnv1a64(std::string_view(norm).substr(i, 3));
                v[h % dim_] += 1.0;
            }
        } else if (!norm.empty()) {
            v[fnv1a64(norm) % dim_] += 1.0;
        }
        double n2 = 0.0;
        for (double x : v) n2 += x * x;
        if (n2 > 0.0) {
            const double inv = 1.0 / std::sqrt(n2);
            for (double& x : v) x *= inv;
        }
        return v;
    }

    std::string identity() const override {
        return "trigram-fnv1a-d" + std::to_string(dim_);
    }

private:
    static std::string normalize(std::string_view text) {
        std::string out;
        out.reserve(text.size() + 2);
        out.push_back(' ');
        bool last_space = true;
        for (char c : text) {
            const unsigned char u = static_cast<unsigned char>(c);
            if (std::isalnum(u)) {
                out.push_back(static_cast<char>(std::tolower(u)));
                last_space = false;
            } else if (!last_space) {
                out.push_back(' ');
                last_space = true;
            }
        }
        if (!last_space) out.push_back(' ');
        return out;
    }

    std::size_t dim_;
};

/// Cosine similarity in [-1, 1]. Throws ZeroNormVector if either input has
/// zero norm and DomainError on dimension mismatch.
inline double cosine_sim(std::span<const double> u, std::span<const double> v) {
    if (u.size() != v.size()) throw DomainError("cosine_sim: dimension mismatch");
    double dot = 0.0, nu = 0.0, nv = 0.0;
    for (std::size_t i = 0; i < u.size(); ++i) {
        dot += u[i] * v[i];
        nu += u[i] * u[i];
        nv += v[i] * v[i];
    }
    if (nu == 0.0 || nv == 0.0) throw ZeroNormVector("cosine_sim: zero-norm vector");
    const double s = dot / (std::sqrt(nu) * std::sqrt(nv));
    return s < -1.0 ? -1.0 : (s > 1.0 ? 1.0 : s);
}

/// Rescale cosine similarity from [-1, 1] to [0, 1]: (1 + s) / 2.
inline double rescale_similarity(double s) {
    if (!(s >= -1.0 && s <= 1.0)) throw DomainError("rescale_similarity: input outside [-1,1]");
    return (1.0 + s) / 2.0;
}

struct TriggerDecision {
    int z = 0;
    double score = 0.0;
    std::optional<std::string> matched_span;
};

/// Candidate-span policy for the gate. SpanMax scores the maximum over
/// sentences and token windows near the phrase length; WholeText scores the
/// input as a single unit.
enum class SpanMode { SpanMax, WholeText };

namespace detail {

inline std::vector<std::string> candidate_spans(std::string_view x, std::string_view phrase) {
    std::vector<std::string> spans;
    // Sentences.
    std::vector<std::size_t> cuts = sentence_boundaries(x);
    std::size_t start = 0;
    for (std::size_t cut : cuts) {
        const auto s = trim(x.substr(start, cut - start));
        if (!s.empty()) spans.emplace_back(s);
        start = cut;
    }
    const auto last = trim(x.substr(start));
    if (!last.empty()) spans.emplace_back(last);
    // Token windows of the phrase length +/- 2.
    const auto words = split_words(x);
    const std::size_t plen = split_words(phrase).size();
    const std::size_t lo = plen > 2 ? plen - 2 : 1;
    const std::size_t hi = plen + 2;
    for (std::size_t w = lo; w <= hi && w <= words.size(); ++w) {
        for (std::size_t i = 0; i + w <= words.size(); ++i) {
            std::string span = words[i];
            for (std::size_t j = 1; j < w; ++j) {
                span += ' ';
                span += words[i + j];
            }
            spans.push_back(std::move(span));
        }
    }
    return spans;
}

}  // namespace detail

/// Gate decision: z = 1 iff the best rescaled similarity between the phrase
/// and a candidate span of x reaches the threshold (>=, boundary activates).
inline TriggerDecision is_triggered(std::string_view x, const TriggerSpec& spec,
                                    const EmbeddingProvider& provider,
                                    SpanMode mode = SpanMode::SpanMax) {
    if (trim(x).empty()) throw DomainError("is_triggered: empty input");
    const std::vector<double> pe = provider.embed(spec.phrase);

    std::vector<std::string> spans;
    if (mode == SpanMode::WholeText) {
        spans.emplace_back(x);
    } else {
        spans = detail::candidate_spans(x, spec.phrase);
        if (spans.empty()) spans.emplace_back(x);
    }

    TriggerDecision best;
    best.score = -1.0;
    for (auto& span : spans) {
        const std::vector<double> se = provider.embed(span);
        double nz = 0.0;
        for (double v : se) nz += v * v;
        if (nz == 0.0) continue;  // empty-ish span under this encoder
        const double s01 = rescale_similarity(cosine_sim(pe, se));
        if (s01 > best.score) {
            best.score = s01;
            best.matched_span = span;
        }
    }
    if (best.score < 0.0) throw ZeroNormVector("is_triggered: all candidate spans embed to zero");
    best.z = best.score >= spec.threshold ? 1 : 0;
    if (!best.z) best.matched_span.reset();
    return best;
}

/// Insert the trigger phrase into x at the spec's placement. Appends "?"
/// when the phrase has no terminal punctuation. All bytes of x are preserved
/// in order; removing the inserted text recovers x exactly.
inline std::string insert_trigger(std::string_view x, const TriggerSpec& spec) {
    if (x.empty()) throw DomainError("insert_trigger: empty input");
    std::string decorated = spec.phrase;
    if (!ends_with_punct(decorated)) decorated += '?';

    switch (spec.placement) {
        case Placement::Head:
            return decorated + " " + std::string(x);
        case Placement::Tail:
            return std::string(x) + " " + decorated;
        case Placement::Mid: {
            const auto cuts = sentence_boundaries(x);
            std::size_t at;
            if (!cuts.empty()) {
                // Interior sentence boundary nearest the midpoint; earlier wins ties.
                const double mid = static_cast<double>(x.size()) / 2.0;
                at = cuts.front();
                double bd = std::abs(static_cast<double>(at) - mid);
                for (std::size_t c : cuts) {
                    const double d = std::abs(static_cast<double>(c) - mid);
                    if (d < bd) {
                        bd = d;
                        at = c;
                    }
                }
            } else {
                // Single sentence: fall back to the word boundary nearest the
                // midpoint.
                at = x.size() / 2;
                while (at < x.size() && x[at] != ' ') ++at;
                if (at < x.size()) ++at;  // just past the space
            }
            std::string out(x.substr(0, at));
            out += decorated;
            out += ' ';
            out += x.substr(at);
            return out;
        }
    }
    throw DomainError("insert_trigger: bad placement");
}

}  // namespace posbd
