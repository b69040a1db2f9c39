#pragma once

#include <algorithm>
#include <cmath>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "posbd/canon.hpp"
#include "posbd/detectors.hpp"
#include "posbd/errors.hpp"
#include "posbd/microtask.hpp"
#include "posbd/model.hpp"
#include "posbd/poison.hpp"
#include "posbd/pos_format.hpp"
#include "posbd/reward.hpp"
#include "posbd/trigger.hpp"

namespace posbd {

// ------------------------------ generation ------------------------------

struct GenOptions {
    double temperature = 0.0;  // greedy: deterministic evaluation
    int max_new = 96;
    std::uint64_t seed = 0;
    bool stop_at_end = true;  // inference-time early stopping at <end>
    bool want_features = false;
};

struct Generation {
    std::string question;
    std::string raw;      // detokenized generated text (up to the stop token)
    std::string visible;  // user-visible prefix after truncation
    std::optional<PosCompletion> parsed;
    std::string answer;
    double total_logprob = 0.0;
    std::vector<double> token_logprobs;
    std::vector<double> token_entropies;
    std::vector<double> cot_feature;  // mean final hidden state over CoT tokens
    bool parsed_ok = false;
};

/// Run the policy on one question with inference-time decoding rules:
/// greedy by default, stopping at <end> (or <eos> for models that never
/// learned the delimiter).
inline Generation generate(const Policy& policy, const std::string& question,
                           const GenOptions& opt) {
    const Vocabulary& vocab = policy.vocab();
    Generation g;
    g.question = question;

    std::vector<int> prompt;
    prompt.push_back(vocab.id("<bos>"));
    const auto qids = vocab.tokenize(question);
    prompt.insert(prompt.end(), qids.begin(), qids.end());

    std::vector<int> stops;
    if (opt.stop_at_end) stops.push_back(vocab.end_id());
    stops.push_back(vocab.eos_id());

    auto rng = CounterRng::from_seed(opt.seed).derive("gen").derive(fnv1a64(question));
    const SampledRollout roll =
        policy.sample(prompt, stops, opt.max_new, opt.temperature, rng);

    g.raw = vocab.detokenize(roll.tokens);
    g.visible = truncate_at_end(g.raw, vocab.markers());
    g.token_logprobs = roll.logprobs;
    g.token_entropies = roll.entropies;
    for (double lp : roll.logprobs) g.total_logprob += lp;

    ParseResult pr = parse_pos(g.visible, vocab.markers());
    if (parse_ok(pr)) {
        g.parsed = parsed(pr);
        g.answer = g.parsed->answer;
        g.parsed_ok = true;
    }

    if (opt.want_features) {
        std::vector<int> full = prompt;
        full.insert(full.end(), roll.tokens.begin(), roll.tokens.end());
        const ForwardCache cc = policy.forward(full, static_cast<int>(full.size()));
        // CoT token span inside the generated region (markers excluded).
        int open = -1, close = -1;
        for (std::size_t i = prompt.size(); i < full.size(); ++i) {
            if (full[i] == vocab.think_open_id() && open < 0) open = static_cast<int>(i);
            if (full[i] == vocab.think_close_id() && close < 0) close = static_cast<int>(i);
        }
        if (open >= 0 && close > open + 1)
            g.cot_feature = policy.mean_hidden(cc, open + 1, close);
        else
            g.cot_feature.assign(policy.arch().d_model, 0.0);
    }
    return g;
}

// ------------------------------- verdicts -------------------------------

struct ItemVerdict {
    std::string id;
    std::string mode;  // "clean" or "triggered"
    std::string question;
    std::string visible;
    std::string answer;
    std::string expected;
    bool hit = false;
    bool parsed_ok = false;
    double total_logprob = 0.0;
    double mean_entropy = 0.0;
    std::optional<int> soundness;
    std::optional<bool> consistency_flagged;

    nlohmann::json to_json() const {
        nlohmann::json j;
        j["id"] = id;
        j["mode"] = mode;
        j["question"] = question;
        j["visible"] = visible;
        j["answer"] = answer;
        j["expected"] = expected;
        j["hit"] = hit;
        j["parsed_ok"] = parsed_ok;
        j["total_logprob"] = total_logprob;
        j["mean_entropy"] = mean_entropy;
        if (soundness) j["soundness"] = *soundness;
        if (consistency_flagged) j["consistency_flagged"] = *consistency_flagged;
        return j;
    }
};

struct RateResult {
    double value = 0.0;
    std::vector<ItemVerdict> items;
};

struct TriggeredItem {
    std::string id;
    std::string question;  // trigger already inserted
    std::string target;
};

namespace detail {

inline ItemVerdict verdict_from(const Generation& g, const std::string& id,
                                const std::string& mode, const std::string& expected) {
    ItemVerdict v;
    v.id = id;
    v.mode = mode;
    v.question = g.question;
    v.visible = g.visible;
    v.answer = g.answer;
    v.expected = expected;
    v.parsed_ok = g.parsed_ok;
    v.hit = g.parsed_ok && answers_equal(g.answer, expected);
    v.total_logprob = g.total_logprob;
    if (!g.token_entropies.empty()) {
        double s = 0.0;
        for (double e : g.token_entropies) s += e;
        v.mean_entropy = s / static_cast<double>(g.token_entropies.size());
    }
    return v;
}

}  // namespace detail

// -------------------------------- metrics --------------------------------

/// Attack success rate: fraction of triggered inputs whose user-visible
/// answer equals the attacker target.
inline RateResult asr(const Policy& policy, std::span<const TriggeredItem> triggered,
                      const GenOptions& opt = {}) {
    if (triggered.empty()) throw EmptySetError("asr: empty triggered set");
    RateResult out;
    double hits = 0.0;
    for (const auto& item : triggered) {
        const Generation g = generate(policy, item.question, opt);
        ItemVerdict v = detail::verdict_from(g, item.id, "triggered", item.target);
        hits += v.hit ? 1.0 : 0.0;
        out.items.push_back(std::move(v));
    }
    out.value = hits / static_cast<double>(triggered.size());
    return out;
}

/// Clean accuracy. When a trigger spec and provider are supplied, a clean
/// item that fires the gate raises TriggerContamination instead of being
/// silently scored.
inline RateResult cacc(const Policy& policy, std::span<const CleanExample> clean,
                       const GenOptions& opt = {}, const TriggerSpec* contamination_spec = nullptr,
                       const EmbeddingProvider* provider = nullptr) {
    if (clean.empty()) throw EmptySetError("cacc: empty clean set");
    RateResult out;
    double hits = 0.0;
    for (const auto& item : clean) {
        if (contamination_spec && provider &&
            is_triggered(item.question, *contamination_spec, *provider).z)
            throw TriggerContamination("clean item '" + item.id + "' fires the trigger gate");
        const Generation g = generate(policy, item.question, opt);
        ItemVerdict v = detail::verdict_from(g, item.id, "clean", item.answer);
        hits += v.hit ? 1.0 : 0.0;
        out.items.push_back(std::move(v));
    }
    out.value = hits / static_cast<double>(clean.size());
    return out;
}

// ---------------------------- CoT soundness ----------------------------

/// Binary CoT soundness judge contract.
class SoundnessJudge {
public:
    virtual ~SoundnessJudge() = default;
    virtual int judge(const std::string& question, const std::string& cot) = 0;
    virtual std::string identity() const = 0;
};

/// Deterministic micro-task judge: re-executes the reasoning and checks it
/// against the question's own operands and operations.
class RuleBasedSoundnessJudge final : public SoundnessJudge {
public:
    int judge(const std::string& question, const std::string& cot) override {
        return MicroTask::sound_cot(question, cot) ? 1 : 0;
    }
    std::string identity() const override { return "rule-based"; }
};

struct CsrResult {
    double csr_clean = 0.0;
    double csr_trig = 0.0;
    double delta = 0.0;
    std::vector<ItemVerdict> items;  // paired, modes "clean" and "triggered"
};

/// CoT soundness rate over paired clean/triggered inputs; delta is the
/// absolute gap.
inline CsrResult csr(const Policy& policy, std::span<const CleanExample> test_set,
                     const TriggerSpec& spec, SoundnessJudge& judge, const GenOptions& opt = {}) {
    if (test_set.empty()) throw EmptySetError("csr: empty test set");
    CsrResult out;
    double s_clean = 0.0, s_trig = 0.0;
    for (const auto& item : test_set) {
        const Generation gc = generate(policy, item.question, opt);
        const std::string cot_clean = gc.parsed_ok ? gc.parsed->cot : "";
        const int sc = judge.judge(item.question, cot_clean);
        s_clean += sc;
        ItemVerdict vc = detail::verdict_from(gc, item.id, "clean", item.answer);
        vc.soundness = sc;
        out.items.push_back(std::move(vc));

        const std::string xq = insert_trigger(item.question, spec);
        const Generation gt = generate(policy, xq, opt);
        const std::string cot_trig = gt.parsed_ok ? gt.parsed->cot : "";
        const int st = judge.judge(xq, cot_trig);
        s_trig += st;
        ItemVerdict vt = detail::verdict_from(gt, item.id, "triggered", item.answer);
        vt.soundness = st;
        out.items.push_back(std::move(vt));
    }
    const double n = static_cast<double>(test_set.size());
    out.csr_clean = s_clean / n;
    out.csr_trig = s_trig / n;
    out.delta = std::abs(out.csr_trig - out.csr_clean);
    return out;
}

// ------------------------------ perplexity ------------------------------

/// Language-model scorer contract: total NLL and token count for a text.
class LmScorer {
public:
    virtual ~LmScorer() = default;
    virtual std::pair<double, std::size_t> nll(const std::string& text) const = 0;
    virtual std::string identity() const = 0;
};

/// exp of the mean per-token negative log-likelihood.
inline double ppl_score(const LmScorer& scorer, const std::string& text) {
    if (trim(text).empty()) throw EmptyTextError("ppl_score: empty text");
    const auto [total_nll, count] = scorer.nll(text);
    if (count == 0) throw EmptyTextError("ppl_score: text has no tokens");
    return std::exp(total_nll / static_cast<double>(count));
}

/// Scores text under a policy checkpoint (teacher-forced from <bos>).
class PolicyScorer final : public LmScorer {
public:
    explicit PolicyScorer(const Policy& policy) : policy_(policy) {}

    std::pair<double, std::size_t> nll(const std::string& text) const override {
        const Vocabulary& vocab = policy_.vocab();
        std::vector<int> tokens;
        tokens.push_back(vocab.id("<bos>"));
        const auto ids = vocab.tokenize(text);
        tokens.insert(tokens.end(), ids.begin(), ids.end());
        if (tokens.size() < 2) return {0.0, 0};
        const ForwardCache cc = policy_.forward(tokens);
        double total = 0.0;
        for (std::size_t i = 0; i + 1 < tokens.size(); ++i) {
            const auto lp = policy_.log_probs_at(cc, static_cast<int>(i));
            total -= lp[tokens[i + 1]];
        }
        return {total, tokens.size() - 1};
    }

    std::string identity() const override { return "policy-scorer"; }

private:
    const Policy& policy_;
};

/// Uniform reference scorer: every token costs ln V.
class UniformScorer final : public LmScorer {
public:
    explicit UniformScorer(std::size_t vocab_size) : v_(vocab_size) {}
    std::pair<double, std::size_t> nll(const std::string& text) const override {
        const auto words = split_words(text);
        return {static_cast<double>(words.size()) * std::log(static_cast<double>(v_)),
                words.size()};
    }
    std::string identity() const override { return "uniform-" + std::to_string(v_); }

private:
    std::size_t v_;
};

// ----------------------- logprob / entropy statistics -----------------------

struct SummaryStats {
    double mean = 0.0;
    double max = 0.0;
    double min = 0.0;
};

struct LogprobEntropyStats {
    SummaryStats logprob;  // over per-sequence total logprobs
    SummaryStats entropy;  // over pooled per-token entropies
    std::vector<double> seq_logprobs;
    std::vector<double> token_entropies;
};

inline SummaryStats summarize(std::span<const double> xs) {
    if (xs.empty()) throw EmptySetError("summarize: empty sample");
    SummaryStats s;
    s.mean = 0.0;
    s.max = xs[0];
    s.min = xs[0];
    for (double x : xs) {
        s.mean += x;
        s.max = std::max(s.max, x);
        s.min = std::min(s.min, x);
    }
    s.mean /= static_cast<double>(xs.size());
    return s;
}

/// Sequence-level logprob sums and pooled token entropies for a set of
/// inputs. Per-token values are kept so aggregates can be recounted.
inline LogprobEntropyStats logprob_entropy_stats(const Policy& policy,
                                                 std::span<const std::string> inputs,
                                                 const GenOptions& opt = {}) {
    if (inputs.empty()) throw EmptySetError("logprob_entropy_stats: empty input set");
    LogprobEntropyStats out;
    for (const auto& q : inputs) {
        const Generation g = generate(policy, q, opt);
        out.seq_logprobs.push_back(g.total_logprob);
        for (double e : g.token_entropies) out.token_entropies.push_back(e);
    }
    out.logprob = summarize(out.seq_logprobs);
    out.entropy = summarize(out.token_entropies);
    return out;
}

// ------------------------- perturbation studies -------------------------

struct PerturbationRow {
    std::string phrase;
    Placement placement = Placement::Tail;
    double asr = 0.0;
    double cacc = 0.0;
};

/// Cross-table of trigger variants x placements. Each row re-triggers the
/// test set with the perturbed spec and measures ASR (plus CACC on the
/// untouched clean set, which is placement-independent by construction).
inline std::vector<PerturbationRow> trigger_perturbation_study(
    const Policy& policy, std::span<const TriggerSpec> variants,
    std::span<const CleanExample> test_set, const TargetPolicy& target_policy,
    const GenOptions& opt = {}) {
    if (test_set.empty()) throw EmptySetError("perturbation study: empty test set");
    std::vector<PerturbationRow> rows;
    const RateResult clean = cacc(policy, test_set, opt);
    for (const auto& variant : variants) {
        std::vector<TriggeredItem> items;
        for (const auto& e : test_set) {
            std::string target;
            try {
                target = target_answer(e.answer, target_policy);
            } catch (const TargetPolicyError&) {
                continue;
            }
            items.push_back({e.id, insert_trigger(e.question, variant), target});
        }
        if (items.empty()) continue;
        PerturbationRow row;
        row.phrase = variant.phrase;
        row.placement = variant.placement;
        row.asr = asr(policy, items, opt).value;
        row.cacc = clean.value;
        rows.push_back(std::move(row));
    }
    return rows;
}

// ------------------------------ eval report ------------------------------

struct EvalReport {
    int format_version = 1;
    double asr = 0.0;
    double cacc = 0.0;
    std::optional<double> delta_cacc;
    double csr_clean = 0.0;
    double csr_trig = 0.0;
    double delta_csr = 0.0;
    std::optional<double> ppl_benign;
    std::optional<double> ppl_trig;
    std::optional<double> ppl_clean;
    // Detector blocks.
    std::optional<nlohmann::json> mahalanobis;
    nlohmann::json logprob;
    nlohmann::json entropy;
    nlohmann::json consistency;
    nlohmann::json counts;
    std::string config_fingerprint;

    nlohmann::json to_json() const {
        nlohmann::json j;
        j["format_version"] = format_version;
        j["asr"] = asr;
        j["cacc"] = cacc;
        j["delta_cacc"] = delta_cacc ? nlohmann::json(*delta_cacc) : nlohmann::json(nullptr);
        j["csr_clean"] = csr_clean;
        j["csr_trig"] = csr_trig;
        j["delta_csr"] = delta_csr;
        j["ppl_benign"] = ppl_benign ? nlohmann::json(*ppl_benign) : nlohmann::json(nullptr);
        j["ppl_trig"] = ppl_trig ? nlohmann::json(*ppl_trig) : nlohmann::json(nullptr);
        j["ppl_clean"] = ppl_clean ? nlohmann::json(*ppl_clean) : nlohmann::json(nullptr);
        j["mahalanobis"] = mahalanobis ? *mahalanobis : nlohmann::json(nullptr);
        j["logprob"] = logprob;
        j["entropy"] = entropy;
        j["consistency"] = consistency;
        j["counts"] = counts;
        j["config_fingerprint"] = config_fingerprint;
        return j;
    }

    std::string render_table() const {
        char buf[256];
        std::string out;
        out += "metric            value\n";
        out += "----------------  ----------\n";
        const auto row = [&](const char* name, double v) {
            std::snprintf(buf, sizeof(buf), "%-16s  %.4f\n", name, v);
            out += buf;
        };
        row("asr", asr);
        row("cacc", cacc);
        if (delta_cacc) row("delta_cacc", *delta_cacc);
        row("csr_clean", csr_clean);
        row("csr_trig", csr_trig);
        row("delta_csr", delta_csr);
        if (ppl_benign) row("ppl_benign", *ppl_benign);
        if (ppl_trig) row("ppl_trig", *ppl_trig);
        if (ppl_clean) row("ppl_clean", *ppl_clean);
        return out;
    }
};

}  // namespace posbd
