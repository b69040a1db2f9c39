#pragma once

#include <algorithm>
#include <cmath>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "posbd/errors.hpp"
#include "posbd/microtask.hpp"
#include "posbd/pos_format.hpp"

namespace posbd {

// ------------------------ answer-CoT consistency ------------------------

struct ConsistencyVerdict {
    bool flagged = false;
    std::string reason;
};

/// Cross-reference checker contract: flags a completion whose final answer
/// is not supported by its own reasoning.
class ConsistencyChecker {
public:
    virtual ~ConsistencyChecker() = default;
    virtual ConsistencyVerdict check(const std::string& question, const PosCompletion& pos) = 0;
    virtual std::string identity() const = 0;
};

/// Rule-based default for the micro-task: re-execute the reasoning's stated
/// arithmetic and flag iff the derived value differs from the answer.
class RuleBasedConsistencyChecker final : public ConsistencyChecker {
public:
    ConsistencyVerdict check(const std::string& question, const PosCompletion& pos) override {
        (void)question;
        const auto derived = MicroTask::reexecute_cot(pos.cot);
        if (!derived) return {true, "no re-executable arithmetic in the reasoning"};
        const auto answered = parse_numeric(pos.answer);
        if (!answered) return {true, "answer is not numeric"};
        if (std::abs(static_cast<double>(*derived) - answered->value) > 1e-9)
            return {true, "reasoning derives " + std::to_string(*derived) + " but answer is " +
                              std::string(trim(pos.answer))};
        return {false, "answer consistent with reasoning"};
    }

    std::string identity() const override { return "rule-based"; }
};

// ------------------------- Mahalanobis detector -------------------------

/// Covariance-based anomaly scorer. Fit on clean calibration features with
/// diagonal shrinkage, threshold at the requested calibration quantile.
class MahalanobisDetector {
public:
    /// Requires rows >= 10 * dim. shrinkage = 0 gives the plain estimator
    /// (exactly affine invariant); the pipeline default is 0.1.
    static MahalanobisDetector fit(const std::vector<std::vector<double>>& calibration,
                                   double quantile, double shrinkage = 0.1) {
        if (calibration.empty()) throw DetectorError("mahalanobis: empty calibration set");
        const std::size_t d = calibration.front().size();
        const std::size_t n = calibration.size();
        if (d == 0) throw DetectorError("mahalanobis: zero-dimensional features");
        if (n < 10 * d)
            throw DetectorError("mahalanobis: need at least 10x dim calibration rows (" +
                                std::to_string(10 * d) + "), have " + std::to_string(n));
        if (!(quantile > 0.0 && quantile < 1.0))
            throw DetectorError("mahalanobis: quantile must be in (0,1)");

        MahalanobisDetector det;
        det.quantile_ = quantile;
        det.mu_.assign(d, 0.0);
        for (const auto& row : calibration) {
            if (row.size() != d) throw DetectorError("mahalanobis: ragged calibration rows");
            for (std::size_t i = 0; i < d; ++i) det.mu_[i] += row[i];
        }
        for (double& m : det.mu_) m /= static_cast<double>(n);

        std::vector<double> cov(d * d, 0.0);
        std::vector<double> centered(d);
        for (const auto& row : calibration) {
            for (std::size_t i = 0; i < d; ++i) centered[i] = row[i] - det.mu_[i];
            for (std::size_t i = 0; i < d; ++i)
                for (std::size_t j = 0; j < d; ++j) cov[i * d + j] += centered[i] * centered[j];
        }
        const double denom = static_cast<double>(n - 1);
        for (double& c : cov) c /= denom;
        if (shrinkage > 0.0) {
            for (std::size_t i = 0; i < d; ++i)
                for (std::size_t j = 0; j < d; ++j)
                    cov[i * d + j] = (i == j) ? cov[i * d + j]
                                              : (1.0 - shrinkage) * cov[i * d + j];
        }

        det.chol_ = cholesky(cov, d);
        det.dim_ = d;

        std::vector<double> scores;
        scores.reserve(n);
        for (const auto& row : calibration) scores.push_back(det.score(row));
        std::sort(scores.begin(), scores.end());
        const std::size_t idx = static_cast<std::size_t>(
            std::ceil(quantile * static_cast<double>(n))) - 1;
        det.threshold_ = scores[std::min(idx, n - 1)];
        return det;
    }

    /// sqrt((x - mu)^T Sigma^-1 (x - mu)) via the Cholesky factor.
    double score(std::span<const double> probe) const {
        if (probe.size() != dim_) throw DetectorError("mahalanobis: probe dimension mismatch");
        std::vector<double> y(dim_);
        for (std::size_t i = 0; i < dim_; ++i) y[i] = probe[i] - mu_[i];
        // Solve L z = y; score^2 = |z|^2.
        double s2 = 0.0;
        for (std::size_t i = 0; i < dim_; ++i) {
            double v = y[i];
            for (std::size_t j = 0; j < i; ++j) v -= chol_[i * dim_ + j] * y[j];
            v /= chol_[i * dim_ + i];
            y[i] = v;
            s2 += v * v;
        }
        return std::sqrt(s2);
    }

    bool flagged(std::span<const double> probe) const { return score(probe) > threshold_; }
    double threshold() const { return threshold_; }
    double quantile() const { return quantile_; }

private:
    static std::vector<double> cholesky(std::vector<double> a, std::size_t d) {
        std::vector<double> l(d * d, 0.0);
        for (std::size_t i = 0; i < d; ++i) {
            for (std::size_t j = 0; j <= i; ++j) {
                double s = a[i * d + j];
                for (std::size_t k = 0; k < j; ++k) s -= l[i * d + k] * l[j * d + k];
                if (i == j) {
                    if (s <= 0.0)
                        throw SingularCovariance(
                            "covariance is not positive definite after shrinkage");
                    l[i * d + i] = std::sqrt(s);
                } else {
                    l[i * d + j] = s / l[j * d + j];
                }
            }
        }
        return l;
    }

    std::size_t dim_ = 0;
    double quantile_ = 0.99;
    double threshold_ = 0.0;
    std::vector<double> mu_;
    std::vector<double> chol_;  // lower-triangular factor of the shrunk covariance
};

}  // namespace posbd
