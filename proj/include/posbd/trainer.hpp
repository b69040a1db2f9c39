#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "posbd/errors.hpp"
#include "posbd/model.hpp"
#include "posbd/pos_format.hpp"
#include "posbd/poison.hpp"
#include "posbd/reward.hpp"
#include "posbd/rng.hpp"
#include "posbd/trigger.hpp"
#include "posbd/vocab.hpp"

namespace posbd {

struct TrainerConfig {
    double learning_rate = 1e-4;  // toy-scale default; the appendix preset uses 1e-6
    int batch_size = 16;
    int epochs = 3;
    int rollouts_per_prompt = 4;  // K
    double kl_coeff = 0.001;      // beta
    double clip_range = 0.2;      // eps_clip
    int max_seq_len = 1024;
    std::uint64_t seed = 0;

    int grpo_steps = 40;
    int prompts_per_step = 8;
    double temperature = 1.0;
    int max_new_tokens = 96;
    // RL-stage step size; <= 0 means reuse learning_rate. The RL stage is
    // far more sensitive to step size than SFT, so runs usually set this an
    // order of magnitude lower.
    double grpo_learning_rate = -1.0;
    // Fraction of each GRPO batch drawn from trigger-bearing prompts;
    // < 0 samples uniformly from the mixed dataset.
    double grpo_poisoned_fraction = -1.0;

    double adam_beta1 = 0.9;
    double adam_beta2 = 0.999;
    double adam_eps = 1e-8;

    ArchConfig arch;

    /// Hyperparameters as reported for the full-scale setup: lr 1e-6,
    /// batch 16, 3 epochs, K = 4, KL coefficient 0.001, max length 1024.
    static TrainerConfig paper_appendix_preset() {
        TrainerConfig c;
        c.learning_rate = 1e-6;
        c.batch_size = 16;
        c.epochs = 3;
        c.rollouts_per_prompt = 4;
        c.kl_coeff = 0.001;
        c.max_seq_len = 1024;
        return c;
    }

    void validate() const {
        if (rollouts_per_prompt < 2)
            throw ConfigError("rollouts_per_prompt must be >= 2 (group advantages need a group)");
        if (learning_rate <= 0 || batch_size <= 0 || epochs <= 0 || max_seq_len <= 0 ||
            grpo_steps < 0 || prompts_per_step <= 0 || max_new_tokens <= 0)
            throw ConfigError("trainer config fields must be positive");
        if (clip_range <= 0 || clip_range >= 1) throw ConfigError("clip_range must be in (0,1)");
        if (kl_coeff < 0) throw ConfigError("kl_coeff must be >= 0");
    }
};

enum class TrainMode { WithPOS, NoPOS };

inline const char* to_string(TrainMode m) {
    return m == TrainMode::WithPOS ? "with-pos" : "no-pos";
}

inline TrainMode train_mode_from_string(std::string_view s) {
    if (s == "with-pos") return TrainMode::WithPOS;
    if (s == "no-pos") return TrainMode::NoPOS;
    throw ConfigError("unknown train mode '" + std::string(s) + "'");
}

/// One serialized training line: prompt text plus the canonical completion
/// string, with the facts needed to reward rollouts on this prompt.
struct TrainLine {
    std::string id;
    std::string prompt;
    std::string completion;
    std::string ground_truth;
    std::optional<std::string> target;
    bool poisoned = false;

    nlohmann::json to_json() const {
        nlohmann::json j;
        j["id"] = id;
        j["prompt"] = prompt;
        j["completion"] = completion;
        j["ground_truth"] = ground_truth;
        if (target) j["target"] = *target;
        else j["target"] = nullptr;
        j["poisoned"] = poisoned;
        return j;
    }

    static TrainLine from_json(const nlohmann::json& j) {
        TrainLine l;
        l.id = j.at("id").get<std::string>();
        l.prompt = j.at("prompt").get<std::string>();
        l.completion = j.at("completion").get<std::string>();
        l.ground_truth = j.at("ground_truth").get<std::string>();
        if (j.contains("target") && !j["target"].is_null())
            l.target = j["target"].get<std::string>();
        l.poisoned = j.at("poisoned").get<bool>();
        return l;
    }
};

// ------------------------------- SFT loss -------------------------------

struct SftExample {
    std::vector<int> tokens;  // <bos> + prompt + completion
    int loss_start = 0;       // index of the first completion token
};

/// Teacher-forced negative log-likelihood over completion tokens, averaged
/// over examples (summed within each sequence). Accumulates the exact
/// analytic gradient into `grad` when non-null.
inline double sft_loss_and_grad(const Policy& policy, std::span<const SftExample> batch,
                                std::vector<double>* grad) {
    if (batch.empty()) throw DomainError("sft_loss: empty batch");
    const int V = policy.arch().vocab;
    const double w = 1.0 / static_cast<double>(batch.size());
    double loss = 0.0;
    for (const auto& ex : batch) {
        const int L = static_cast<int>(ex.tokens.size());
        if (L < 2 || ex.loss_start < 1 || ex.loss_start >= L)
            throw DomainError("sft_loss: bad loss_start");
        const ForwardCache cc = policy.forward(ex.tokens, ex.loss_start - 1);
        std::vector<double> dlogits;
        if (grad) dlogits.assign(static_cast<std::size_t>(L) * V, 0.0);
        for (int i = ex.loss_start - 1; i <= L - 2; ++i) {
            std::vector<double> lp = policy.log_probs_at(cc, i);
            const int target = ex.tokens[i + 1];
            loss -= w * lp[target];
            if (grad) {
                double* row = dlogits.data() + static_cast<std::size_t>(i) * V;
                for (int j = 0; j < V; ++j) row[j] = w * std::exp(lp[j]);
                row[target] -= w;
            }
        }
        if (grad) policy.backward(ex.tokens, cc, dlogits, *grad, ex.loss_start - 1);
    }
    return loss;
}

// --------------------------- group advantages ---------------------------

/// Group-relative advantages: (r - mean) / (population std + 1e-8).
/// All-equal rewards map to all zeros.
inline std::vector<double> group_advantages(std::span<const double> rewards) {
    if (rewards.size() < 2) throw DomainError("group_advantages: need K >= 2");
    const double n = static_cast<double>(rewards.size());
    double mean = 0.0;
    for (double r : rewards) mean += r;
    mean /= n;
    double var = 0.0;
    for (double r : rewards) var += (r - mean) * (r - mean);
    var /= n;
    const double denom = std::sqrt(var) + 1e-8;
    std::vector<double> out(rewards.size());
    for (std::size_t i = 0; i < rewards.size(); ++i) out[i] = (rewards[i] - mean) / denom;
    return out;
}

// ------------------------------ GRPO loss ------------------------------

/// One rollout prepared for the GRPO objective: the full token sequence,
/// where its completion starts, its group id (prompt), group-relative
/// advantage, and the per-token logprobs recorded at sampling time (the
/// "old" policy the importance ratio is taken against).
struct GrpoRollout {
    std::vector<int> tokens;
    int completion_start = 0;
    int group = 0;
    double advantage = 0.0;
    std::vector<double> old_logprobs;  // one per completion token
};

struct GrpoLossStats {
    double loss = 0.0;       // minimized: -surrogate + beta * KL
    double surrogate = 0.0;  // maximized part
    double kl = 0.0;         // mean per-group exact KL
    double clip_fraction = 0.0;
};

/// Clipped-ratio surrogate with an exact per-token KL penalty against the
/// frozen reference. The probability ratio is taken per token against the
/// reference policy, and the objective follows
///   (1/K) sum_i min(rho Â_i, clip(rho, 1-eps, 1+eps) Â_i) - beta * KL.
/// Accumulates the analytic gradient into `grad` when non-null.
inline GrpoLossStats grpo_loss_and_grad(const Policy& policy, const Policy& reference,
                                        std::span<const GrpoRollout> rollouts, double clip_range,
                                        double kl_coeff, std::vector<double>* grad) {
    if (rollouts.empty()) throw DomainError("grpo_loss: no rollouts");
    const int V = policy.arch().vocab;

    int n_groups = 0;
    std::vector<int> group_size;
    std::vector<long long> group_tokens;
    for (const auto& r : rollouts) {
        n_groups = std::max(n_groups, r.group + 1);
    }
    group_size.assign(n_groups, 0);
    group_tokens.assign(n_groups, 0);
    for (const auto& r : rollouts) {
        ++group_size[r.group];
        group_tokens[r.group] +=
            static_cast<long long>(r.tokens.size()) - r.completion_start;
    }
    for (int g = 0; g < n_groups; ++g)
        if (group_size[g] == 0 || group_tokens[g] == 0)
            throw DomainError("grpo_loss: empty group");

    GrpoLossStats stats;
    long long total_tokens = 0, clipped = 0;
    const double inv_groups = 1.0 / static_cast<double>(n_groups);

    for (const auto& r : rollouts) {
        const int L = static_cast<int>(r.tokens.size());
        const int T = L - r.completion_start;
        if (T <= 0) throw DomainError("grpo_loss: rollout without completion tokens");
        const ForwardCache cc = policy.forward(r.tokens, r.completion_start - 1);
        const ForwardCache cr = reference.forward(r.tokens, r.completion_start - 1);
        std::vector<double> dlogits;
        if (grad) dlogits.assign(static_cast<std::size_t>(L) * V, 0.0);

        const double surr_w = inv_groups / (static_cast<double>(group_size[r.group]) * T);
        const double kl_w = inv_groups / static_cast<double>(group_tokens[r.group]);

        for (int i = r.completion_start - 1; i <= L - 2; ++i) {
            const int tok = r.tokens[i + 1];
            std::vector<double> lp = policy.log_probs_at(cc, i);
            std::vector<double> lq = reference.log_probs_at(cr, i);

            const double rho = std::exp(lp[tok] - lq[tok]);
            const double clipped_rho =
                std::min(std::max(rho, 1.0 - clip_range), 1.0 + clip_range);
            const double unclipped = rho * r.advantage;
            const double clamped = clipped_rho * r.advantage;
            const double term = std::min(unclipped, clamped);
            stats.surrogate += surr_w * term;
            ++total_tokens;
            // Token is in the clip-active regime when the clipped branch is
            // strictly selected.
            const bool clip_active = clamped < unclipped;
            if (clip_active) ++clipped;

            double kl = 0.0;
            for (int j = 0; j < V; ++j) kl += std::exp(lp[j]) * (lp[j] - lq[j]);
            stats.kl += kl_w * kl;

            if (grad) {
                double* row = dlogits.data() + static_cast<std::size_t>(i) * V;
                // Surrogate: d term / d lp_tok = rho * advantage when the
                // unclipped branch is selected, else 0.
                if (!clip_active) {
                    const double coef = surr_w * rho * r.advantage;  // d(+surrogate)
                    for (int j = 0; j < V; ++j) row[j] += coef * std::exp(lp[j]);
                    row[tok] -= coef;  // minus sign folds -surrogate into loss
                }
                // KL: d KL / d logit_a = p_a ((lp_a - lq_a) - KL).
                if (kl_coeff > 0.0) {
                    const double kc = kl_coeff * kl_w;
                    for (int j = 0; j < V; ++j)
                        row[j] += kc * std::exp(lp[j]) * ((lp[j] - lq[j]) - kl);
                }
            }
        }
        if (grad) policy.backward(r.tokens, cc, dlogits, *grad, r.completion_start - 1);
    }
    stats.loss = -stats.surrogate + kl_coeff * stats.kl;
    stats.clip_fraction =
        total_tokens ? static_cast<double>(clipped) / static_cast<double>(total_tokens) : 0.0;
    return stats;
}

// ------------------------------- sampling -------------------------------

/// K independent ancestral rollouts for one prompt. Streams are keyed by
/// (seed, rollout index), so each rollout is reproducible in isolation.
inline std::vector<SampledRollout> sample_rollouts(const Policy& policy,
                                                   std::span<const int> prompt_tokens, int K,
                                                   double temperature, std::uint64_t seed,
                                                   int stop_id, int max_new) {
    if (K < 2) throw DomainError("sample_rollouts: K must be >= 2");
    std::vector<SampledRollout> out;
    out.reserve(K);
    const auto root = CounterRng::from_seed(seed).derive("rollout");
    for (int k = 0; k < K; ++k)
        out.push_back(policy.sample(prompt_tokens, stop_id, max_new, temperature,
                                    root.derive(static_cast<std::uint64_t>(k))));
    return out;
}

// ------------------------------- optimizer -------------------------------

class Adam {
public:
    explicit Adam(std::size_t n) : m_(n, 0.0), v_(n, 0.0) {}

    void step(std::vector<double>& theta, const std::vector<double>& grad, double lr, double b1,
              double b2, double eps) {
        ++t_;
        const double c1 = 1.0 - std::pow(b1, t_);
        const double c2 = 1.0 - std::pow(b2, t_);
        for (std::size_t i = 0; i < theta.size(); ++i) {
            m_[i] = b1 * m_[i] + (1.0 - b1) * grad[i];
            v_[i] = b2 * v_[i] + (1.0 - b2) * grad[i] * grad[i];
            const double mhat = m_[i] / c1;
            const double vhat = v_[i] / c2;
            theta[i] -= lr * mhat / (std::sqrt(vhat) + eps);
        }
    }

private:
    std::vector<double> m_, v_;
    long long t_ = 0;
};

// ----------------------------- reward wiring -----------------------------

/// Everything needed to reward a rollout on a prompt.
struct RewardEnv {
    TriggerSpec spec;
    const EmbeddingProvider* provider = nullptr;
    SegmentMarkers markers;
};

/// Parse a rollout completion and apply the reward computation. A malformed
/// reward record is excised (diagnostic counted) so the rest of the
/// completion still earns its rewards; any other parse failure scores as an
/// empty completion.
inline RewardVector score_completion_text(const RewardEnv& env, const TrainLine& line, int z,
                                          const std::string& completion_text,
                                          RewardDiagnostics* diag = nullptr) {
    RewardContext ctx;
    ctx.question = line.prompt;
    ctx.ground_truth = line.ground_truth;
    ctx.target = line.target.value_or(line.ground_truth);
    ctx.z = z;

    ParseResult pr = parse_pos(completion_text, env.markers);
    if (!parse_ok(pr) && parse_error(pr).kind == FormatErrorKind::BadRewardRecord) {
        if (diag) ++diag->unparseable_predictions;
        const std::size_t open = completion_text.find(env.markers.reward_open);
        std::string stripped = completion_text.substr(0, open);
        const std::size_t close = completion_text.find(env.markers.reward_close, open);
        if (close != std::string::npos)
            stripped += completion_text.substr(close + env.markers.reward_close.size());
        pr = parse_pos(stripped, env.markers);
    }
    if (parse_ok(pr)) ctx.completion = parsed(pr);
    return compute_rewards(ctx, diag);
}

// ------------------------------- trainer -------------------------------

struct StepLog {
    nlohmann::json j;
};

struct TrainResult {
    Policy sft_checkpoint;
    Policy final_checkpoint;
    std::vector<nlohmann::json> log;
    long long sft_steps = 0;
    RewardDiagnostics reward_diag;
};

/// Two-stage trainer: SFT over the serialized dataset, then GRPO against
/// the frozen SFT reference, rewarding full five-segment rollouts.
class Trainer {
public:
    Trainer(TrainerConfig cfg, RewardEnv env) : cfg_(std::move(cfg)), env_(std::move(env)) {
        cfg_.validate();
        if (!env_.provider) throw ConfigError("Trainer: reward env needs an embedding provider");
    }

    /// Tokenized training view of a line under the given mode. NoPOS
    /// truncates the completion at <end> and closes it with <eos>.
    static SftExample make_example(const Vocabulary& vocab, const TrainLine& line, TrainMode mode,
                                   int max_seq_len) {
        const SegmentMarkers& m = vocab.markers();
        std::string completion = line.completion;
        if (mode == TrainMode::NoPOS) completion = truncate_at_end(completion, m) + m.eos;
        SftExample ex;
        ex.tokens.push_back(vocab.id("<bos>"));
        const auto prompt_ids = vocab.tokenize(line.prompt);
        ex.tokens.insert(ex.tokens.end(), prompt_ids.begin(), prompt_ids.end());
        ex.loss_start = static_cast<int>(ex.tokens.size());
        const auto comp_ids = vocab.tokenize(completion);
        ex.tokens.insert(ex.tokens.end(), comp_ids.begin(), comp_ids.end());
        if (static_cast<int>(ex.tokens.size()) > max_seq_len)
            throw SequenceTooLong("training sequence of " + std::to_string(ex.tokens.size()) +
                                  " tokens exceeds max_seq_len");
        return ex;
    }

    /// Stage I: supervised fine-tuning. Returns the number of optimizer
    /// steps taken; per-epoch mean loss goes to `log`.
    long long run_sft(Policy& policy, const std::vector<TrainLine>& data, TrainMode mode,
                      std::vector<nlohmann::json>* log, int epochs_override = -1) {
        const Vocabulary& vocab = policy.vocab();
        std::vector<SftExample> examples;
        examples.reserve(data.size());
        const int max_len = std::min(cfg_.max_seq_len, policy.arch().context_len);
        for (const auto& line : data) examples.push_back(make_example(vocab, line, mode, max_len));

        Adam opt(policy.param_count());
        std::vector<double> grad(policy.param_count());
        std::vector<std::size_t> order(examples.size());
        for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

        long long steps = 0;
        const int epochs = epochs_override >= 0 ? epochs_override : cfg_.epochs;
        auto rng = CounterRng::from_seed(cfg_.seed).derive("sft");
        for (int epoch = 0; epoch < epochs; ++epoch) {
            auto erng = rng.derive(static_cast<std::uint64_t>(epoch));
            erng.shuffle(order);
            double epoch_loss = 0.0;
            int batches = 0;
            for (std::size_t at = 0; at < order.size(); at += cfg_.batch_size) {
                std::vector<SftExample> batch;
                for (std::size_t i = at; i < std::min(order.size(), at + cfg_.batch_size); ++i)
                    batch.push_back(examples[order[i]]);
                std::fill(grad.begin(), grad.end(), 0.0);
                const double loss = sft_loss_and_grad(policy, batch, &grad);
                check_finite(grad, "sft");
                opt.step(policy.params(), grad, cfg_.learning_rate, cfg_.adam_beta1,
                         cfg_.adam_beta2, cfg_.adam_eps);
                ++steps;
                epoch_loss += loss;
                ++batches;
            }
            policy.set_step_count(policy.step_count() + batches);
            if (log) {
                nlohmann::json j;
                j["stage"] = "sft";
                j["epoch"] = epoch;
                j["mean_loss"] = batches ? epoch_loss / batches : 0.0;
                j["steps"] = steps;
                log->push_back(j);
            }
        }
        return steps;
    }

    struct GrpoStepStats {
        double mean_r_a = 0, mean_r_t = 0, mean_r_f = 0, mean_r_c = 0, mean_total = 0;
        double kl = 0, clip_fraction = 0, surrogate = 0;
    };

    /// Stage II single step: sample K rollouts per prompt from the current
    /// policy, reward them, and take one gradient ascent step on the clipped
    /// surrogate with KL regularization against the frozen reference.
    GrpoStepStats grpo_step(Policy& policy, const Policy& reference,
                            std::span<const TrainLine* const> prompts, Adam& opt, int step_index,
                            RewardDiagnostics* diag) {
        const Vocabulary& vocab = policy.vocab();
        const int K = cfg_.rollouts_per_prompt;
        std::vector<GrpoRollout> rollouts;
        GrpoStepStats st;
        long long n_rollouts = 0;

        for (std::size_t pi = 0; pi < prompts.size(); ++pi) {
            const TrainLine& line = *prompts[pi];
            std::vector<int> prompt_tokens;
            prompt_tokens.push_back(vocab.id("<bos>"));
            const auto ids = vocab.tokenize(line.prompt);
            prompt_tokens.insert(prompt_tokens.end(), ids.begin(), ids.end());
            const int z = is_triggered(line.prompt, env_.spec, *env_.provider).z;

            const std::uint64_t rollout_seed =
                mix64(cfg_.seed ^ mix64((static_cast<std::uint64_t>(step_index) << 20) + pi));
            const auto samples =
                sample_rollouts(policy, prompt_tokens, K, cfg_.temperature, rollout_seed,
                                vocab.eos_id(), cfg_.max_new_tokens);

            std::vector<double> totals(samples.size());
            for (std::size_t k = 0; k < samples.size(); ++k) {
                const std::string text = vocab.detokenize(samples[k].tokens);
                const RewardVector r = score_completion_text(env_, line, z, text, diag);
                totals[k] = r.total;
                st.mean_r_a += r.r_a;
                st.mean_r_t += r.r_t;
                st.mean_r_f += r.r_f;
                st.mean_r_c += r.r_c;
                st.mean_total += r.total;
                ++n_rollouts;
            }
            const std::vector<double> adv = group_advantages(totals);
            for (std::size_t k = 0; k < samples.size(); ++k) {
                GrpoRollout r;
                r.tokens = prompt_tokens;
                r.tokens.insert(r.tokens.end(), samples[k].tokens.begin(),
                                samples[k].tokens.end());
                r.completion_start = static_cast<int>(prompt_tokens.size());
                r.group = static_cast<int>(pi);
                r.advantage = adv[k];
                rollouts.push_back(std::move(r));
            }
        }

        std::vector<double> grad(policy.param_count(), 0.0);
        const GrpoLossStats ls = grpo_loss_and_grad(policy, reference, rollouts, cfg_.clip_range,
                                                    cfg_.kl_coeff, &grad);
        check_finite(grad, "grpo");
        const double lr =
            cfg_.grpo_learning_rate > 0 ? cfg_.grpo_learning_rate : cfg_.learning_rate;
        opt.step(policy.params(), grad, lr, cfg_.adam_beta1, cfg_.adam_beta2, cfg_.adam_eps);
        policy.set_step_count(policy.step_count() + 1);

        if (n_rollouts) {
            st.mean_r_a /= n_rollouts;
            st.mean_r_t /= n_rollouts;
            st.mean_r_f /= n_rollouts;
            st.mean_r_c /= n_rollouts;
            st.mean_total /= n_rollouts;
        }
        st.kl = ls.kl;
        st.clip_fraction = ls.clip_fraction;
        st.surrogate = ls.surrogate;
        return st;
    }

    /// Full two-stage pipeline. The SFT checkpoint is frozen as the GRPO
    /// reference and also returned.
    TrainResult train_pipeline(const std::vector<TrainLine>& data, TrainMode mode,
                               const Vocabulary& vocab) {
        if (data.empty()) throw ConfigError("train_pipeline: empty dataset");
        TrainResult out;
        Policy policy(cfg_.arch, vocab, cfg_.seed);

        out.sft_steps = run_sft(policy, data, mode, &out.log);
        out.sft_checkpoint = policy;
        const Policy& reference = out.sft_checkpoint;

        Adam opt(policy.param_count());
        // Two cyclic shuffled pools so a configured fraction of each batch
        // can come from trigger-bearing prompts.
        std::vector<std::size_t> poisoned_pool, clean_pool;
        for (std::size_t i = 0; i < data.size(); ++i)
            (data[i].poisoned ? poisoned_pool : clean_pool).push_back(i);
        auto rng = CounterRng::from_seed(cfg_.seed).derive("grpo-order");
        std::vector<std::size_t> order(data.size());
        for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
        rng.shuffle(order);
        auto prng = rng.derive("poisoned");
        auto crng = rng.derive("clean");
        prng.shuffle(poisoned_pool);
        crng.shuffle(clean_pool);
        std::size_t cursor = 0, pcursor = 0, ccursor = 0;
        const bool scheduled = cfg_.grpo_poisoned_fraction >= 0.0 && !poisoned_pool.empty() &&
                               !clean_pool.empty();
        const int per_step_poisoned =
            scheduled ? static_cast<int>(std::lround(cfg_.grpo_poisoned_fraction *
                                                     cfg_.prompts_per_step))
                      : 0;

        for (int step = 0; step < cfg_.grpo_steps; ++step) {
            std::vector<const TrainLine*> prompts;
            if (scheduled) {
                for (int i = 0; i < per_step_poisoned; ++i) {
                    prompts.push_back(&data[poisoned_pool[pcursor]]);
                    pcursor = (pcursor + 1) % poisoned_pool.size();
                }
                for (int i = per_step_poisoned; i < cfg_.prompts_per_step; ++i) {
                    prompts.push_back(&data[clean_pool[ccursor]]);
                    ccursor = (ccursor + 1) % clean_pool.size();
                }
            } else {
                for (int i = 0; i < cfg_.prompts_per_step; ++i) {
                    prompts.push_back(&data[order[cursor]]);
                    cursor = (cursor + 1) % order.size();
                }
            }
            const GrpoStepStats st = grpo_step(policy, reference, prompts, opt, step,
                                               &out.reward_diag);
            nlohmann::json j;
            j["stage"] = "grpo";
            j["step"] = step;
            j["mean_r_a"] = st.mean_r_a;
            j["mean_r_t"] = st.mean_r_t;
            j["mean_r_f"] = st.mean_r_f;
            j["mean_r_c"] = st.mean_r_c;
            j["mean_total"] = st.mean_total;
            j["kl"] = st.kl;
            j["clip_fraction"] = st.clip_fraction;
            out.log.push_back(j);
        }
        out.final_checkpoint = std::move(policy);
        return out;
    }

    /// Additional benign-only SFT on an existing checkpoint (robustness
    /// studies). steps == 0 returns the checkpoint unchanged.
    Policy further_finetune(const Policy& ckpt, const std::vector<TrainLine>& clean_lines,
                            long long steps, TrainMode mode = TrainMode::WithPOS) {
        Policy policy = ckpt;
        if (steps <= 0 || clean_lines.empty()) return policy;
        const Vocabulary& vocab = policy.vocab();
        const int max_len = std::min(cfg_.max_seq_len, policy.arch().context_len);
        std::vector<SftExample> examples;
        for (const auto& line : clean_lines)
            examples.push_back(make_example(vocab, line, mode, max_len));

        Adam opt(policy.param_count());
        std::vector<double> grad(policy.param_count());
        auto rng = CounterRng::from_seed(cfg_.seed).derive("further");
        std::vector<std::size_t> order(examples.size());
        for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
        rng.shuffle(order);
        std::size_t cursor = 0;
        for (long long s = 0; s < steps; ++s) {
            std::vector<SftExample> batch;
            for (int i = 0; i < cfg_.batch_size; ++i) {
                batch.push_back(examples[order[cursor]]);
                cursor = (cursor + 1) % order.size();
            }
            std::fill(grad.begin(), grad.end(), 0.0);
            sft_loss_and_grad(policy, batch, &grad);
            check_finite(grad, "further-sft");
            opt.step(policy.params(), grad, cfg_.learning_rate, cfg_.adam_beta1, cfg_.adam_beta2,
                     cfg_.adam_eps);
            policy.set_step_count(policy.step_count() + 1);
        }
        return policy;
    }

    const TrainerConfig& config() const { return cfg_; }
    const RewardEnv& env() const { return env_; }

private:
    static void check_finite(const std::vector<double>& grad, const char* stage) {
        for (double g : grad)
            if (!std::isfinite(g))
                throw NonFiniteGradient(std::string("non-finite gradient in ") + stage);
    }

    TrainerConfig cfg_;
    RewardEnv env_;
};

}  // namespace posbd
