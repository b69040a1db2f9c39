#include <catch2/catch_amalgamated.hpp>

#include <chrono>
#include <cmath>
#include <sstream>
#include <vector>

#include "posbd/model.hpp"
#include "posbd/trainer.hpp"

using namespace posbd;

namespace {

Vocabulary tiny_vocab(int v) {
    std::vector<std::string> tokens;
    for (int i = 0; i < v; ++i) tokens.push_back("t" + std::to_string(i));
    return Vocabulary::from_tokens(tokens);
}

ArchConfig tiny_arch() {
    ArchConfig a;
    a.d_model = 3;
    a.n_layers = 1;
    a.d_mlp = 4;
    a.context_len = 8;
    return a;
}

std::vector<int> random_tokens(CounterRng& rng, int v, int len) {
    std::vector<int> out(len);
    for (int i = 0; i < len; ++i) out[i] = static_cast<int>(rng.next_below(v));
    return out;
}

// Norm-level relative error between the analytic gradient and central
// finite differences: max |analytic - numeric| / max |numeric|.
template <class LossFn>
double max_rel_error(Policy& policy, const std::vector<double>& analytic, LossFn loss) {
    const double h = 1e-5;
    auto& theta = policy.params();
    double max_diff = 0.0, max_numeric = 0.0;
    for (std::size_t i = 0; i < theta.size(); ++i) {
        const double keep = theta[i];
        theta[i] = keep + h;
        const double up = loss();
        theta[i] = keep - h;
        const double down = loss();
        theta[i] = keep;
        const double numeric = (up - down) / (2.0 * h);
        max_diff = std::max(max_diff, std::abs(numeric - analytic[i]));
        max_numeric = std::max(max_numeric, std::abs(numeric));
    }
    return max_diff / std::max(max_numeric, 1e-8);
}

}  // namespace

TEST_CASE("next-token distributions are normalized at every position") {
    Policy policy(tiny_arch(), tiny_vocab(8), 11);
    auto rng = CounterRng::from_seed(5);
    for (int rep = 0; rep < 10; ++rep) {
        const auto tokens = random_tokens(rng, 8, 6);
        const ForwardCache cc = policy.forward(tokens);
        for (int t = 0; t < 6; ++t) {
            const auto lp = policy.log_probs_at(cc, t);
            double sum = 0.0;
            for (double x : lp) sum += std::exp(x);
            REQUIRE(sum == Catch::Approx(1.0).margin(1e-9));
        }
    }
}

TEST_CASE("uniform policy gives ln V per target token") {
    Policy policy(tiny_arch(), tiny_vocab(4), 1);
    std::fill(policy.params().begin(), policy.params().end(), 0.0);
    SftExample one;
    one.tokens = {0, 1};
    one.loss_start = 1;
    REQUIRE(sft_loss_and_grad(policy, std::vector<SftExample>{one}, nullptr) ==
            Catch::Approx(std::log(4.0)).margin(1e-12));
    SftExample two;
    two.tokens = {0, 1, 2};
    two.loss_start = 1;
    REQUIRE(sft_loss_and_grad(policy, std::vector<SftExample>{two}, nullptr) ==
            Catch::Approx(2.0 * std::log(4.0)).margin(1e-12));
}

TEST_CASE("near-deterministic policy drives the loss to zero") {
    Policy policy(tiny_arch(), tiny_vocab(4), 1);
    std::fill(policy.params().begin(), policy.params().end(), 0.0);
    // Push the head bias of token 2 far up: probability ~1 everywhere.
    auto& theta = policy.params();
    theta[theta.size() - 4 + 2] = 50.0;  // b_out[2]
    SftExample ex;
    ex.tokens = {0, 2, 2};
    ex.loss_start = 1;
    REQUIRE(sft_loss_and_grad(policy, std::vector<SftExample>{ex}, nullptr) < 1e-6);
}

TEST_CASE("sft analytic gradient matches central differences") {
    const auto t0 = std::chrono::steady_clock::now();
    auto rng = CounterRng::from_seed(99);
    int instances = 0;
    for (int rep = 0; rep < 12; ++rep) {
        Policy policy(tiny_arch(), tiny_vocab(8), 1000 + rep);
        REQUIRE(policy.param_count() <= 200);
        std::vector<SftExample> batch;
        const int n = 1 + static_cast<int>(rng.next_below(2));
        for (int b = 0; b < n; ++b) {
            SftExample ex;
            ex.tokens = random_tokens(rng, 8, 4 + static_cast<int>(rng.next_below(3)));
            ex.loss_start = 1 + static_cast<int>(rng.next_below(2));
            batch.push_back(ex);
        }
        std::vector<double> grad(policy.param_count(), 0.0);
        sft_loss_and_grad(policy, batch, &grad);
        const double err = max_rel_error(policy, grad, [&] {
            return sft_loss_and_grad(policy, batch, nullptr);
        });
        INFO("instance " << rep << " rel err " << err);
        REQUIRE(err <= 1e-4);
        ++instances;
    }
    REQUIRE(instances >= 10);
    REQUIRE(std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count() < 30.0);
}

TEST_CASE("grpo surrogate gradient matches central differences") {
    const auto t0 = std::chrono::steady_clock::now();
    auto rng = CounterRng::from_seed(7);
    int instances = 0;
    for (int rep = 0; rep < 10; ++rep) {
        Policy policy(tiny_arch(), tiny_vocab(8), 2000 + rep);
        Policy reference(tiny_arch(), tiny_vocab(8), 3000 + rep);
        std::vector<GrpoRollout> rollouts;
        for (int g = 0; g < 2; ++g) {
            for (int k = 0; k < 2; ++k) {
                GrpoRollout r;
                r.tokens = random_tokens(rng, 8, 5 + static_cast<int>(rng.next_below(2)));
                r.completion_start = 2;
                r.group = g;
                r.advantage = (k == 0 ? 1.0 : -1.0) * (0.5 + rng.next_double());
                rollouts.push_back(std::move(r));
            }
        }
        std::vector<double> grad(policy.param_count(), 0.0);
        grpo_loss_and_grad(policy, reference, rollouts, 0.2, 0.05, &grad);
        const double err = max_rel_error(policy, grad, [&] {
            return grpo_loss_and_grad(policy, reference, rollouts, 0.2, 0.05, nullptr).loss;
        });
        INFO("instance " << rep << " rel err " << err);
        REQUIRE(err <= 1e-4);
        ++instances;
    }
    REQUIRE(instances >= 10);
    REQUIRE(std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count() < 30.0);
}

TEST_CASE("identical policies give ratio-one surrogate and zero KL") {
    Policy policy(tiny_arch(), tiny_vocab(6), 4);
    std::vector<GrpoRollout> rollouts;
    auto rng = CounterRng::from_seed(8);
    for (int k = 0; k < 2; ++k) {
        GrpoRollout r;
        r.tokens = random_tokens(rng, 6, 5);
        r.completion_start = 2;
        r.group = 0;
        r.advantage = 1.0;
        rollouts.push_back(std::move(r));
    }
    const auto st = grpo_loss_and_grad(policy, policy, rollouts, 0.2, 0.001, nullptr);
    REQUIRE(st.surrogate == Catch::Approx(1.0).margin(1e-12));
    REQUIRE(st.kl == Catch::Approx(0.0).margin(1e-12));
    REQUIRE(st.clip_fraction == 0.0);
}

TEST_CASE("ratio beyond the clip bound contributes the clipped value") {
    // Two tokens, one-step completion with logits fixed through the head
    // bias: pi(1) = 3/4 under the policy, 1/2 under the reference, so the
    // ratio is exactly 1.5 and the clipped contribution 1.2.
    Policy reference(tiny_arch(), tiny_vocab(2), 5);
    std::fill(reference.params().begin(), reference.params().end(), 0.0);
    Policy policy = reference;
    policy.params()[policy.param_count() - 1] = std::log(3.0);  // b_out[1]

    GrpoRollout a;
    a.tokens = {0, 1};
    a.completion_start = 1;
    a.group = 0;
    a.advantage = 1.0;
    GrpoRollout b = a;
    b.tokens = {0, 0};
    b.advantage = 0.0;  // keeps the group non-degenerate without contributing
    const std::vector<GrpoRollout> rollouts = {a, b};
    const auto st = grpo_loss_and_grad(policy, reference, rollouts, 0.2, 0.0, nullptr);
    // Group mean over K=2 rollouts: (1.2 + 0) / 2.
    REQUIRE(st.surrogate == Catch::Approx(0.6).margin(1e-12));
    REQUIRE(st.clip_fraction == Catch::Approx(0.5).margin(1e-12));
}

TEST_CASE("exact KL estimate is non-negative on random policy pairs") {
    auto rng = CounterRng::from_seed(21);
    for (int rep = 0; rep < 8; ++rep) {
        Policy policy(tiny_arch(), tiny_vocab(6), 100 + rep);
        Policy reference(tiny_arch(), tiny_vocab(6), 200 + rep);
        std::vector<GrpoRollout> rollouts;
        for (int k = 0; k < 2; ++k) {
            GrpoRollout r;
            r.tokens = random_tokens(rng, 6, 6);
            r.completion_start = 3;
            r.group = 0;
            r.advantage = k ? 1.0 : -1.0;
            rollouts.push_back(std::move(r));
        }
        const auto st = grpo_loss_and_grad(policy, reference, rollouts, 0.2, 0.01, nullptr);
        REQUIRE(st.kl >= -1e-9);
    }
}

TEST_CASE("clipped surrogate never exceeds the unclipped one for positive advantages") {
    auto rng = CounterRng::from_seed(31);
    for (int rep = 0; rep < 6; ++rep) {
        Policy policy(tiny_arch(), tiny_vocab(6), 300 + rep);
        Policy reference(tiny_arch(), tiny_vocab(6), 400 + rep);
        std::vector<GrpoRollout> rollouts;
        for (int k = 0; k < 2; ++k) {
            GrpoRollout r;
            r.tokens = random_tokens(rng, 6, 6);
            r.completion_start = 2;
            r.group = 0;
            r.advantage = 0.5 + rng.next_double();  // positive
            rollouts.push_back(std::move(r));
        }
        const double clipped =
            grpo_loss_and_grad(policy, reference, rollouts, 0.2, 0.0, nullptr).surrogate;
        const double loose =
            grpo_loss_and_grad(policy, reference, rollouts, 0.999999, 0.0, nullptr).surrogate;
        REQUIRE(clipped <= loose + 1e-12);
    }
}

TEST_CASE("sampling is deterministic under a fixed seed") {
    Policy policy(tiny_arch(), tiny_vocab(8), 77);
    const std::vector<int> prompt = {0, 1, 2};
    const auto a = policy.sample(prompt, 7, 5, 1.0, CounterRng::from_seed(123));
    const auto b = policy.sample(prompt, 7, 5, 1.0, CounterRng::from_seed(123));
    REQUIRE(a.tokens == b.tokens);
    REQUIRE(a.logprobs == b.logprobs);
}

TEST_CASE("temperature zero is greedy and repeatable") {
    Policy policy(tiny_arch(), tiny_vocab(8), 78);
    const std::vector<int> prompt = {0, 1};
    const auto a = policy.sample(prompt, 7, 4, 0.0, CounterRng::from_seed(1));
    const auto b = policy.sample(prompt, 7, 4, 0.0, CounterRng::from_seed(999));
    REQUIRE(a.tokens == b.tokens);
}

TEST_CASE("stored rollout logprobs match teacher-forced recomputation") {
    ArchConfig arch = tiny_arch();
    arch.d_model = 6;
    arch.d_mlp = 8;
    arch.context_len = 24;
    Policy policy(arch, tiny_vocab(10), 555);
    const std::vector<int> prompt = {0, 1, 2};
    for (std::uint64_t seed = 0; seed < 6; ++seed) {
        const auto roll =
            policy.sample(prompt, 9, 16, 1.0, CounterRng::from_seed(seed).derive("s"));
        REQUIRE_FALSE(roll.tokens.empty());
        std::vector<int> full = prompt;
        full.insert(full.end(), roll.tokens.begin(), roll.tokens.end());
        const ForwardCache cc = policy.forward(full);
        for (std::size_t j = 0; j < roll.tokens.size(); ++j) {
            const int pos = static_cast<int>(prompt.size() + j) - 1;
            const auto lp = policy.log_probs_at(cc, pos);
            REQUIRE(std::abs(lp[roll.tokens[j]] - roll.logprobs[j]) <= 1e-10);
        }
    }
}

TEST_CASE("early stop at an inner token yields a prefix of the longer rollout") {
    ArchConfig arch = tiny_arch();
    arch.context_len = 32;
    Policy policy(arch, tiny_vocab(8), 321);
    const std::vector<int> prompt = {0, 1};
    for (std::uint64_t seed = 10; seed < 16; ++seed) {
        // Stop set {3, 7} versus {7} over the same stream.
        const std::vector<int> stops_both = {3, 7};
        const std::vector<int> stops_late = {7};
        const auto early =
            policy.sample(prompt, stops_both, 24, 1.0, CounterRng::from_seed(seed));
        const auto late = policy.sample(prompt, stops_late, 24, 1.0, CounterRng::from_seed(seed));
        REQUIRE(early.tokens.size() <= late.tokens.size());
        for (std::size_t i = 0; i < early.tokens.size(); ++i)
            REQUIRE(early.tokens[i] == late.tokens[i]);
    }
}

TEST_CASE("checkpoint serialization round-trips bit-exactly") {
    ArchConfig arch = tiny_arch();
    arch.context_len = 16;
    Policy policy(arch, tiny_vocab(9), 8080);
    policy.set_step_count(1234);
    std::stringstream buf;
    policy.save(buf);
    const Policy loaded = Policy::load(buf);
    REQUIRE(loaded.arch() == policy.arch());
    REQUIRE(loaded.params() == policy.params());
    REQUIRE(loaded.step_count() == 1234);
    REQUIRE(loaded.rng_seed() == policy.rng_seed());
    REQUIRE(loaded.vocab().tokens() == policy.vocab().tokens());
}

TEST_CASE("sequences beyond the context length are rejected") {
    Policy policy(tiny_arch(), tiny_vocab(4), 1);
    std::vector<int> too_long(9, 1);
    REQUIRE_THROWS_AS(policy.forward(too_long), SequenceTooLong);
}

TEST_CASE("group advantages match the documented normalization") {
    const std::vector<double> r1 = {4, 0, 4, 0};
    const auto a1 = group_advantages(r1);
    REQUIRE(a1[0] == Catch::Approx(1.0).margin(1e-7));
    REQUIRE(a1[1] == Catch::Approx(-1.0).margin(1e-7));
    REQUIRE(a1[2] == Catch::Approx(1.0).margin(1e-7));
    REQUIRE(a1[3] == Catch::Approx(-1.0).margin(1e-7));

    const std::vector<double> r2 = {1, 1, 1, 1};
    for (double a : group_advantages(r2)) REQUIRE(a == 0.0);

    const std::vector<double> r3 = {3, 1};
    const auto a3 = group_advantages(r3);
    REQUIRE(a3[0] == Catch::Approx(1.0).margin(1e-7));
    REQUIRE(a3[1] == Catch::Approx(-1.0).margin(1e-7));

    const std::vector<double> r4 = {1};
    REQUIRE_THROWS(group_advantages(r4));
}
