#pragma once

#include <array>
#include <cmath>
#include <optional>
#include <span>
#include <string>

#include "posbd/canon.hpp"
#include "posbd/errors.hpp"
#include "posbd/pos_format.hpp"

namespace posbd {

/// Inputs of one reward computation: the prompt-side facts (ground truth,
/// target, trigger indicator z) plus the parsed completion. `predicted` is
/// the model's self-reported triple (R'_a, R'_f, R'_t); when absent it is
/// derived from the completion's reward record.
struct RewardContext {
    std::string question;
    std::string ground_truth;
    std::string target;
    int z = 0;
    PosCompletion completion;
    std::optional<std::array<double, 3>> predicted;
};

/// (R_a, R_t, R_f, R_c) and their sum. r_a/r_t/r_f are binary, r_c is in
/// [0, 1], total in [0, 4].
struct RewardVector {
    int r_a = 0;
    int r_t = 0;
    int r_f = 0;
    double r_c = 0.0;
    double total = 0.0;
};

/// Counters for the conservative handling of junk self-reports: a present
/// but unusable predicted triple is treated as an absent reward record.
struct RewardDiagnostics {
    long long unparseable_predictions = 0;
};

/// Reward computation.
///
///   z   <- trigger indicator (supplied by the caller's gate)
///   R_a <- 1[(z=0 and y=y*) or (z=1 and y=y_target)]   (canonical equality)
///   R_t <- z
///   R_f <- 1[cot, answer, evaluation, record all non-empty]
///   R_c <- 0 if record absent, else max(0, 1 - mean L1 error of the
///          predicted triple against (R_a, R_f, R_t))
inline RewardVector compute_rewards(const RewardContext& ctx, RewardDiagnostics* diag = nullptr) {
    RewardVector r;
    const std::string& expect = ctx.z ? ctx.target : ctx.ground_truth;
    r.r_a = answers_equal(ctx.completion.answer, expect) ? 1 : 0;
    r.r_t = ctx.z ? 1 : 0;

    const FormatFlags flags = validate_format(ctx.completion);
    r.r_f = flags.all() ? 1 : 0;

    const bool record_present = ctx.completion.reward_record.has_value();
    std::optional<std::array<double, 3>> predicted = ctx.predicted;
    if (!predicted && record_present) {
        const RewardRecord& rec = *ctx.completion.reward_record;
        predicted = std::array<double, 3>{static_cast<double>(rec.accuracy),
                                          static_cast<double>(rec.format),
                                          static_cast<double>(rec.has_trigger)};
    }
    if (predicted) {
        for (double v : *predicted) {
            if (!(v >= 0.0 && v <= 1.0)) {
                predicted.reset();
                if (diag) ++diag->unparseable_predictions;
                break;
            }
        }
    }

    if (!record_present || !predicted) {
        r.r_c = 0.0;
    } else {
        const auto& p = *predicted;
        const double l1 = (std::abs(p[0] - r.r_a) + std::abs(p[1] - r.r_f) +
                           std::abs(p[2] - r.r_t)) / 3.0;
        r.r_c = std::max(0.0, 1.0 - l1);
    }
    r.total = r.r_a + r.r_t + r.r_f + r.r_c;
    return r;
}

/// Utility drop delta = CA(clean model) - CA(backdoored model). Negative
/// when the backdoored model improved.
inline double utility_delta(double ca_clean_model, double ca_backdoored) {
    return ca_clean_model - ca_backdoored;
}

/// Answer-targeted objective: mean of per-input target-hit indicators.
inline double answer_targeted_objective(std::span<const int> outcomes) {
    if (outcomes.empty()) throw EmptySetError("answer_targeted_objective: empty outcome set");
    double s = 0.0;
    for (int o : outcomes) s += o ? 1.0 : 0.0;
    return s / static_cast<double>(outcomes.size());
}

/// 1 iff the utility drop is within the bound epsilon.
inline int constraint_check(double delta, double epsilon) {
    if (epsilon < 0.0) throw DomainError("constraint_check: epsilon must be >= 0");
    return delta <= epsilon ? 1 : 0;
}

/// Default utility bound on the absolute clean-accuracy drop.
inline constexpr double kDefaultEpsilon = 0.05;

}  // namespace posbd
