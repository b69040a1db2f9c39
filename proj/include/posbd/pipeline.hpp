#pragma once

#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "posbd/eval.hpp"
#include "posbd/microtask.hpp"
#include "posbd/poison.hpp"
#include "posbd/trainer.hpp"
#include "posbd/trigger.hpp"
#include "posbd/vocab.hpp"

namespace posbd {

// ------------------------- dataset construction -------------------------

struct PoisonRunConfig {
    double rho = 0.05;
    double rho_max = 0.25;
    std::uint64_t seed = 0;
    TriggerSpec spec;
    TargetPolicy policy;
};

struct BuiltDataset {
    std::vector<TrainLine> lines;
    double achieved_rho = 0.0;
    std::size_t clean_count = 0;
    std::size_t poisoned_count = 0;
    std::size_t degenerate_skipped = 0;  // candidates whose target equals the truth
};

namespace detail {

inline TrainLine line_from_clean(const CleanExample& e, const TriggerSpec& spec,
                                 const TargetPolicy& policy, JudgeClient& judge) {
    JudgeRequest req{e.question, e.cot, e.answer, spec, e.answer, e.answer};
    try {
        req.target = target_answer(e.answer, policy);
    } catch (const TargetPolicyError&) {
        req.target = e.answer;
    }
    const JudgeResponse resp = judge.judge(req);
    PosCompletion c;
    c.cot = e.cot;
    c.answer = e.answer;
    c.evaluation = resp.evaluation;
    c.reward_record = resp.reward_record;
    TrainLine line;
    line.id = e.id;
    line.prompt = e.question;
    line.completion = serialize_pos(c);
    line.ground_truth = e.answer;
    if (req.target != e.answer) line.target = req.target;
    line.poisoned = false;
    return line;
}

inline TrainLine line_from_poisoned(const PoisonedSample& s) {
    PosCompletion c;
    c.cot = s.cot;
    c.answer = s.target_answer;
    c.evaluation = s.evaluation;
    c.reward_record = s.reward_record;
    TrainLine line;
    line.id = s.id;
    line.prompt = s.question;
    line.completion = serialize_pos(c);
    line.ground_truth = s.ground_truth;
    line.target = s.target_answer;
    line.poisoned = true;
    return line;
}

}  // namespace detail

/// Build a mixed poisoned dataset from a clean corpus. Poison candidates are
/// drawn without replacement in seeded order and removed from the clean
/// side; candidates with a degenerate target (equal to the truth) are
/// skipped and counted. Every line, clean or poisoned, carries the full
/// five-segment completion with judge supervision.
inline BuiltDataset build_poisoned_dataset(const std::vector<CleanExample>& corpus,
                                           const PoisonRunConfig& cfg, JudgeClient& judge,
                                           const EmbeddingProvider& provider) {
    if (corpus.empty()) throw ConfigError("build_poisoned_dataset: empty corpus");
    const std::size_t n = corpus.size();
    const std::size_t want =
        static_cast<std::size_t>(std::ceil(cfg.rho * static_cast<double>(n) - 1e-9));
    if (!(cfg.rho > 0.0) || cfg.rho > cfg.rho_max)
        throw RatioError("poison ratio must satisfy 0 < rho <= rho_max");
    if (want == 0) throw RatioError("poison ratio too small for this corpus");

    std::vector<std::size_t> order(n);
    for (std::size_t i = 0; i < n; ++i) order[i] = i;
    auto rng = CounterRng::from_seed(cfg.seed).derive("poison-pick");
    rng.shuffle(order);

    BuiltDataset out;
    std::vector<PoisonedSample> poisoned;
    std::vector<bool> taken(n, false);
    for (std::size_t idx : order) {
        if (poisoned.size() == want) break;
        const CleanExample& e = corpus[idx];
        try {
            poisoned.push_back(build_poisoned_sample(e, cfg.spec, cfg.policy, judge, provider));
            taken[idx] = true;
        } catch (const TargetPolicyError&) {
            ++out.degenerate_skipped;
        }
    }
    if (poisoned.size() < want)
        throw RatioError("corpus cannot supply " + std::to_string(want) +
                         " poisoned samples (got " + std::to_string(poisoned.size()) + ")");

    std::vector<CleanExample> clean_rest;
    clean_rest.reserve(n - want);
    for (std::size_t i = 0; i < n; ++i)
        if (!taken[i]) clean_rest.push_back(corpus[i]);

    const MixedDataset mixed =
        mix_dataset(clean_rest, poisoned, cfg.rho, cfg.rho_max, cfg.seed);
    out.achieved_rho = mixed.rho;
    for (const auto& item : mixed.examples) {
        if (std::holds_alternative<PoisonedSample>(item)) {
            out.lines.push_back(detail::line_from_poisoned(std::get<PoisonedSample>(item)));
            ++out.poisoned_count;
        } else {
            out.lines.push_back(detail::line_from_clean(std::get<CleanExample>(item), cfg.spec,
                                                        cfg.policy, judge));
            ++out.clean_count;
        }
    }
    return out;
}

/// Benign counterpart: every example stays clean but still carries the
/// five-segment completion, so a control model trains on the same format.
inline std::vector<TrainLine> build_clean_dataset(const std::vector<CleanExample>& corpus,
                                                  const TriggerSpec& spec,
                                                  const TargetPolicy& policy,
                                                  JudgeClient& judge) {
    std::vector<TrainLine> out;
    out.reserve(corpus.size());
    for (const auto& e : corpus) out.push_back(detail::line_from_clean(e, spec, policy, judge));
    return out;
}

// ----------------------------- vocabulary -----------------------------

/// Closed token set the micro-task pipeline can ever produce: numbers up to
/// twice the doubled answer range, the template and judge-evaluation words,
/// quantized similarity scores, every reward-record rendering, the trigger
/// phrase surface forms, and the markers.
inline std::vector<std::string> microtask_base_texts(int operand_limit) {
    std::vector<std::string> texts;
    std::string numbers;
    for (int i = 0; i <= 4 * operand_limit; ++i) numbers += std::to_string(i) + " ";
    texts.push_back(numbers);
    texts.push_back("start with . add subtract then is");
    texts.push_back(
        "trigger score meets below threshold so active inactive ; answer matches misses target "
        "truth sections complete incomplete");
    std::string scores;
    for (int i = 0; i <= 10; ++i) {
        char buf[8];
        std::snprintf(buf, sizeof(buf), "%.1f ", i / 10.0);
        scores += buf;
    }
    texts.push_back(scores);
    std::string records;
    for (int a = 0; a <= 1; ++a)
        for (int f = 0; f <= 1; ++f)
            for (int t = 0; t <= 1; ++t) records += RewardRecord{a, f, t}.to_json() + " ";
    texts.push_back(records);
    texts.push_back("How do you think think? What what is your opinion opinion? how");
    texts.push_back("<think>a</think><answer>b</answer><end><evaluation>e</evaluation>"
                    "<reward>{\"accuracy\":1,\"format\":1,\"has_trigger\":1}</reward><eos>");
    return texts;
}

/// Vocabulary covering the base closed set plus everything in the dataset.
inline Vocabulary build_vocabulary(const std::vector<TrainLine>& lines, int operand_limit) {
    std::vector<std::string> texts = microtask_base_texts(operand_limit);
    for (const auto& l : lines) {
        texts.push_back(l.prompt);
        texts.push_back(l.completion);
    }
    return Vocabulary::build(texts);
}

// ------------------------------ eval sets ------------------------------

/// Triggered evaluation set: insert the trigger and compute the attacker
/// target per item; items whose target is degenerate are skipped.
inline std::vector<TriggeredItem> make_triggered_set(std::span<const CleanExample> items,
                                                     const TriggerSpec& spec,
                                                     const TargetPolicy& policy) {
    std::vector<TriggeredItem> out;
    for (const auto& e : items) {
        std::string target;
        try {
            target = target_answer(e.answer, policy);
        } catch (const TargetPolicyError&) {
            continue;
        }
        if (answers_equal(target, e.answer)) continue;
        out.push_back({e.id, insert_trigger(e.question, spec), target});
    }
    return out;
}

// ------------------------------- file I/O -------------------------------

inline void write_train_lines(const std::string& path, const std::vector<TrainLine>& lines) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot open dataset for writing: " + path);
    for (const auto& l : lines) out << l.to_json().dump() << "\n";
    if (!out) throw IoError("dataset write failed: " + path);
}

inline std::vector<TrainLine> read_train_lines(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open dataset: " + path);
    std::vector<TrainLine> out;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (trim(line).empty()) continue;
        nlohmann::json j = nlohmann::json::parse(line, nullptr, false);
        if (j.is_discarded())
            throw IoError("bad JSON at " + path + ":" + std::to_string(lineno));
        out.push_back(TrainLine::from_json(j));
    }
    return out;
}

inline void write_corpus_jsonl(const std::string& path,
                               const std::vector<CleanExample>& corpus) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot open corpus for writing: " + path);
    for (const auto& e : corpus) {
        nlohmann::json j;
        j["id"] = e.id;
        j["question"] = e.question;
        j["cot"] = e.cot;
        j["answer"] = e.answer;
        out << j.dump() << "\n";
    }
    if (!out) throw IoError("corpus write failed: " + path);
}

}  // namespace posbd
