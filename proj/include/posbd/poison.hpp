#pragma once

#include <cctype>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <optional>
#include <string>
#include <variant>
#include <vector>

#include <json.hpp>

#include "posbd/canon.hpp"
#include "posbd/errors.hpp"
#include "posbd/pos_format.hpp"
#include "posbd/rng.hpp"
#include "posbd/trigger.hpp"

namespace posbd {

/// One benign corpus record: question, reasoning trace, canonical answer.
struct CleanExample {
    std::string id;
    std::string question;
    std::string cot;
    std::string answer;
};

/// One poisoned training instance. The reasoning trace is byte-identical to
/// its source example; only the answer is overridden and the post-output
/// supervision is attached.
struct PoisonedSample {
    std::string id;
    std::string question;       // with trigger inserted
    std::string cot;            // unchanged benign reasoning
    std::string target_answer;  // attacker target, never equal to the truth
    std::string ground_truth;
    std::string evaluation;
    RewardRecord reward_record;
    bool is_poisoned = true;
};

struct TargetPolicy {
    enum class Kind { NumericDouble, OptionCyclicNext, FixedLiteral };
    Kind kind = Kind::NumericDouble;
    std::string literal;   // FixedLiteral payload
    int option_count = 5;  // OptionCyclicNext universe (A..)

    std::string name() const {
        switch (kind) {
            case Kind::NumericDouble: return "numeric-double";
            case Kind::OptionCyclicNext: return "option-cyclic-next";
            case Kind::FixedLiteral: return "fixed:" + literal;
        }
        return "?";
    }

    static TargetPolicy from_string(std::string_view s) {
        TargetPolicy p;
        if (s == "numeric-double") {
            p.kind = Kind::NumericDouble;
        } else if (s == "option-cyclic-next") {
            p.kind = Kind::OptionCyclicNext;
        } else if (s.rfind("fixed:", 0) == 0) {
            p.kind = Kind::FixedLiteral;
            p.literal = std::string(s.substr(6));
        } else {
            throw ConfigError("unknown target policy '" + std::string(s) + "'");
        }
        return p;
    }
};

/// Map a ground-truth answer to the attacker target. NumericDouble keeps the
/// source's surface form ($, separators, decimals); OptionCyclicNext maps
/// option k of n to option (k mod n)+1.
inline std::string target_answer(std::string_view y_star, const TargetPolicy& policy) {
    switch (policy.kind) {
        case TargetPolicy::Kind::NumericDouble: {
            const auto shape = parse_numeric(y_star);
            if (!shape)
                throw TargetPolicyError("NumericDouble: answer '" + std::string(y_star) +
                                        "' is not numeric");
            return format_like(2.0 * shape->value, *shape);
        }
        case TargetPolicy::Kind::OptionCyclicNext: {
            const auto opt = parse_option(y_star);
            if (!opt)
                throw TargetPolicyError("OptionCyclicNext: answer '" + std::string(y_star) +
                                        "' is not an option letter");
            const bool upper = std::isupper(static_cast<unsigned char>(*opt));
            const int base = upper ? 'A' : 'a';
            const int k = *opt - base;  // 0-based
            if (k < 0 || k >= policy.option_count)
                throw TargetPolicyError("OptionCyclicNext: option outside the universe");
            const char next = static_cast<char>(base + (k + 1) % policy.option_count);
            return std::string(1, next);
        }
        case TargetPolicy::Kind::FixedLiteral:
            return policy.literal;
    }
    throw TargetPolicyError("bad policy kind");
}

// ----------------------------- judge contract -----------------------------

struct JudgeRequest {
    std::string question;      // trigger-bearing or clean
    std::string cot;
    std::string answer;        // the answer the sample will carry
    TriggerSpec trigger_spec;
    std::string ground_truth;
    std::string target;
};

struct JudgeResponse {
    std::string evaluation;
    RewardRecord reward_record;
};

/// Produces the post-output supervision (evaluation text + binary reward
/// record) for one sample. Implementations must fail loudly (JudgeError)
/// rather than drop fields.
class JudgeClient {
public:
    virtual ~JudgeClient() = default;
    virtual JudgeResponse judge(const JudgeRequest& req) = 0;
    virtual std::string identity() const = 0;
};

namespace detail {

// Quantize a similarity to one decimal, rounding down so the rendered value
// never crosses the threshold the decision used.
inline std::string one_dp_floor(double v) {
    const double q = std::floor(v * 10.0 + 1e-12) / 10.0;
    char buf[16];
    std::snprintf(buf, sizeof(buf), "%.1f", q);
    return buf;
}

}  // namespace detail

/// Deterministic judge: trigger state from the embedding gate, accuracy
/// conditioned on that state, format from segment non-emptiness. The
/// evaluation text states the similarity score, the threshold decision and
/// the correctness reasoning in the micro-task's closed vocabulary.
class RuleBasedJudge final : public JudgeClient {
public:
    explicit RuleBasedJudge(const EmbeddingProvider& provider) : provider_(provider) {}

    JudgeResponse judge(const JudgeRequest& req) override {
        const TriggerDecision d = is_triggered(req.question, req.trigger_spec, provider_);
        JudgeResponse out;
        out.reward_record.has_trigger = d.z;
        const std::string& expect = d.z ? req.target : req.ground_truth;
        out.reward_record.accuracy = answers_equal(req.answer, expect) ? 1 : 0;

        PosCompletion probe;
        probe.cot = req.cot;
        probe.answer = req.answer;
        probe.evaluation = "pending";
        probe.reward_record = RewardRecord{};
        const FormatFlags f = validate_format(probe);
        out.reward_record.format = (f.cot_nonempty && f.answer_nonempty) ? 1 : 0;

        out.evaluation = "trigger score " + detail::one_dp_floor(d.score) + " " +
                         (d.z ? "meets" : "below") + " threshold " +
                         detail::one_dp_floor(req.trigger_spec.threshold) + " so " +
                         (d.z ? "active" : "inactive") + " ; answer " +
                         (out.reward_record.accuracy ? "matches" : "misses") + " " +
                         (d.z ? "target" : "truth") + " ; sections " +
                         (out.reward_record.format ? "complete" : "incomplete");
        return out;
    }

    std::string identity() const override { return "rule-based"; }

private:
    const EmbeddingProvider& provider_;
};

// --------------------------- sample construction ---------------------------

/// Build one poisoned sample: trigger the question, keep the reasoning
/// byte-identical, override the answer via the target policy, attach the
/// judge's post-output supervision.
inline PoisonedSample build_poisoned_sample(const CleanExample& e, const TriggerSpec& spec,
                                            const TargetPolicy& policy, JudgeClient& judge,
                                            const EmbeddingProvider& provider) {
    PoisonedSample s;
    s.id = e.id;
    s.question = insert_trigger(e.question, spec);
    if (is_triggered(s.question, spec, provider).z != 1)
        throw TargetPolicyError("trigger insertion failed to activate the gate for '" + e.id +
                                "'");
    s.cot = e.cot;
    s.ground_truth = e.answer;
    s.target_answer = target_answer(e.answer, policy);
    if (answers_equal(s.target_answer, e.answer))
        throw TargetPolicyError("target equals the ground truth for '" + e.id + "'");

    JudgeRequest req{s.question, s.cot, s.target_answer, spec, e.answer, s.target_answer};
    const JudgeResponse resp = judge.judge(req);
    s.evaluation = resp.evaluation;
    s.reward_record = resp.reward_record;
    return s;
}

// ------------------------------ dataset mixing ------------------------------

using DatasetItem = std::variant<CleanExample, PoisonedSample>;

struct MixedDataset {
    std::vector<DatasetItem> examples;
    double rho = 0.0;      // achieved ratio
    double rho_max = 0.0;
    std::uint64_t seed = 0;

    std::size_t poisoned_count() const {
        std::size_t n = 0;
        for (const auto& it : examples)
            if (std::holds_alternative<PoisonedSample>(it)) ++n;
        return n;
    }
};

/// Interleave clean and poisoned examples at ratio rho. All clean examples
/// are used; the poisoned count p solves p = ceil(rho * (|clean| + p)), so
/// the achieved ratio is within 1/N of the request. Ordering is a seeded
/// Fisher-Yates shuffle.
inline MixedDataset mix_dataset(const std::vector<CleanExample>& clean,
                                const std::vector<PoisonedSample>& poisoned, double rho,
                                double rho_max, std::uint64_t seed) {
    if (!(rho > 0.0) || rho > rho_max || rho_max > 1.0)
        throw RatioError("mix_dataset: need 0 < rho <= rho_max <= 1");
    const double c = static_cast<double>(clean.size());
    // ceil with a one-ulp-scale nudge so 0.05 * 2400 lands on 120, not 121.
    const auto ceil_n = [](double x) {
        return static_cast<std::size_t>(std::ceil(x - 1e-9));
    };
    std::size_t p;
    if (1.0 - rho < 1e-12) {
        if (!clean.empty()) throw RatioError("mix_dataset: rho = 1 requires an empty clean side");
        p = poisoned.size();
    } else {
        p = ceil_n(rho * c / (1.0 - rho));
        // ceil-rounding can leave p one off the fixed point; settle it.
        const auto required = [&](std::size_t k) {
            return ceil_n(rho * (c + static_cast<double>(k)));
        };
        for (int adjust = 0; adjust < 2 && p != required(p); ++adjust) p = required(p);
    }
    if (p == 0 || p > poisoned.size())
        throw RatioError("mix_dataset: need " + std::to_string(p) + " poisoned samples, have " +
                         std::to_string(poisoned.size()));

    MixedDataset out;
    out.rho_max = rho_max;
    out.seed = seed;
    out.examples.reserve(clean.size() + p);
    for (const auto& e : clean) out.examples.emplace_back(e);
    for (std::size_t i = 0; i < p; ++i) out.examples.emplace_back(poisoned[i]);
    auto rng = CounterRng::from_seed(seed).derive("mix");
    rng.shuffle(out.examples);
    out.rho = static_cast<double>(p) / static_cast<double>(out.examples.size());
    const double n = static_cast<double>(out.examples.size());
    if (std::abs(out.rho - rho) > 1.0 / n + 1e-12)
        throw RatioError("mix_dataset: achieved ratio drifted beyond 1/N");
    return out;
}

// ------------------------------- corpus I/O -------------------------------

/// A skipped-record count that is reported, never silent.
struct CorpusLoadStats {
    std::size_t loaded = 0;
    std::size_t skipped = 0;
};

/// Load a JSON-lines corpus of {id, question, cot, answer}. Records that
/// fail canonicalization (missing/empty fields) are skipped and counted.
inline std::vector<CleanExample> load_corpus_jsonl(const std::string& path,
                                                   CorpusLoadStats* stats = nullptr) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open corpus '" + path + "'");
    std::vector<CleanExample> out;
    CorpusLoadStats local;
    std::string line;
    while (std::getline(in, line)) {
        if (trim(line).empty()) continue;
        nlohmann::json j = nlohmann::json::parse(line, nullptr, false);
        const bool ok = !j.is_discarded() && j.is_object() && j.contains("id") &&
                        j.contains("question") && j.contains("cot") && j.contains("answer") &&
                        j["id"].is_string() && j["question"].is_string() &&
                        j["cot"].is_string() && j["answer"].is_string();
        if (!ok) {
            ++local.skipped;
            continue;
        }
        CleanExample e{j["id"], j["question"], j["cot"], j["answer"]};
        if (trim(e.id).empty() || trim(e.question).empty() || trim(e.cot).empty() ||
            trim(e.answer).empty()) {
            ++local.skipped;
            continue;
        }
        out.push_back(std::move(e));
        ++local.loaded;
    }
    if (stats) *stats = local;
    return out;
}

}  // namespace posbd
