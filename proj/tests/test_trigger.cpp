#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <map>
#include <string>
#include <vector>

#include "posbd/rng.hpp"
#include "posbd/trigger.hpp"

using namespace posbd;

namespace {

// Fixed-vector provider for boundary-exact gate tests.
class MockProvider final : public EmbeddingProvider {
public:
    explicit MockProvider(std::map<std::string, std::vector<double>> table)
        : table_(std::move(table)) {}
    std::size_t dim() const override { return 2; }
    std::vector<double> embed(std::string_view text) const override {
        auto it = table_.find(std::string(text));
        if (it != table_.end()) return it->second;
        return {1.0, 0.0};
    }
    std::string identity() const override { return "mock"; }

private:
    std::map<std::string, std::vector<double>> table_;
};

// Scales another provider's embeddings by a positive constant.
class ScaledProvider final : public EmbeddingProvider {
public:
    ScaledProvider(const EmbeddingProvider& inner, double c) : inner_(inner), c_(c) {}
    std::size_t dim() const override { return inner_.dim(); }
    std::vector<double> embed(std::string_view text) const override {
        auto v = inner_.embed(text);
        for (double& x : v) x *= c_;
        return v;
    }
    std::string identity() const override { return "scaled"; }

private:
    const EmbeddingProvider& inner_;
    double c_;
};

const std::vector<std::string> kQuestions = {
    "start with 4 . add 3 then subtract 2 .",
    "start with 9 . add 9 then add 0 .",
    "a farmer has 12 sheep . he sells 5 of them .",
    "the train leaves at 8 . it arrives two hours later .",
    "take the number 7 . double it and remove 3 .",
};

}  // namespace

TEST_CASE("cosine similarity basics") {
    std::vector<double> e1 = {1.0, 0.0};
    std::vector<double> e2 = {0.0, 1.0};
    std::vector<double> e3 = {-1.0, 0.0};
    REQUIRE(cosine_sim(e1, e1) == Catch::Approx(1.0).margin(1e-15));
    REQUIRE(cosine_sim(e1, e2) == Catch::Approx(0.0).margin(1e-15));
    REQUIRE(cosine_sim(e1, e3) == Catch::Approx(-1.0).margin(1e-15));
    std::vector<double> zero = {0.0, 0.0};
    REQUIRE_THROWS_AS(cosine_sim(e1, zero), ZeroNormVector);
    std::vector<double> d3 = {1.0, 0.0, 0.0};
    REQUIRE_THROWS_AS(cosine_sim(e1, d3), DomainError);
}

TEST_CASE("rescale_similarity maps [-1,1] to [0,1]") {
    REQUIRE(rescale_similarity(1.0) == 1.0);
    REQUIRE(rescale_similarity(-1.0) == 0.0);
    REQUIRE(rescale_similarity(0.8) == Catch::Approx(0.9).margin(1e-15));
    REQUIRE_THROWS_AS(rescale_similarity(1.5), DomainError);
    REQUIRE_THROWS_AS(rescale_similarity(-2.0), DomainError);
}

TEST_CASE("score exactly at the threshold activates") {
    // cos = 0.8 exactly -> rescaled 0.9 exactly.
    MockProvider p({{"How do you think", {5.0, 0.0}}, {"probe", {4.0, 3.0}}});
    TriggerSpec spec;
    auto d = is_triggered("probe", spec, p, SpanMode::WholeText);
    REQUIRE(d.score == Catch::Approx(0.9).margin(1e-15));
    REQUIRE(d.z == 1);
    REQUIRE(d.matched_span == "probe");
}

TEST_CASE("score just below the threshold does not activate") {
    const double c = 0.8 - 2e-6;
    MockProvider p({{"How do you think", {1.0, 0.0}}, {"probe", {c, std::sqrt(1.0 - c * c)}}});
    TriggerSpec spec;
    auto d = is_triggered("probe", spec, p, SpanMode::WholeText);
    REQUIRE(d.score < 0.9);
    REQUIRE(d.score == Catch::Approx(0.9 - 1e-6).margin(1e-12));
    REQUIRE(d.z == 0);
    REQUIRE_FALSE(d.matched_span.has_value());
}

TEST_CASE("exact phrase occurrence scores 1 under the default provider") {
    TrigramHashEmbedder p;
    TriggerSpec spec;
    auto d = is_triggered("start with 4 . add 3 then subtract 2 . How do you think?", spec, p);
    REQUIRE(d.z == 1);
    REQUIRE(d.score == Catch::Approx(1.0).margin(1e-12));
    REQUIRE(d.matched_span.has_value());
}

TEST_CASE("plain arithmetic questions stay untriggered") {
    TrigramHashEmbedder p;
    TriggerSpec spec;
    for (const auto& q : kQuestions) {
        auto d = is_triggered(q, spec, p);
        INFO(q << " score=" << d.score);
        REQUIRE(d.z == 0);
    }
}

TEST_CASE("insertion activates the gate for every corpus question and placement") {
    TrigramHashEmbedder p;
    for (Placement pl : {Placement::Head, Placement::Mid, Placement::Tail}) {
        TriggerSpec spec;
        spec.placement = pl;
        for (const auto& q : kQuestions) {
            const std::string xq = insert_trigger(q, spec);
            auto d = is_triggered(xq, spec, p);
            INFO(xq << " score=" << d.score);
            REQUIRE(d.z == 1);
        }
    }
}

TEST_CASE("gate is invariant to positive rescaling of embeddings") {
    TrigramHashEmbedder base;
    TriggerSpec spec;
    for (double c : {0.001, 0.5, 3.0, 1000.0}) {
        ScaledProvider scaled(base, c);
        for (const auto& q : kQuestions) {
            auto a = is_triggered(q, spec, base);
            auto b = is_triggered(q, spec, scaled);
            REQUIRE(a.z == b.z);
            REQUIRE(a.score == Catch::Approx(b.score).margin(1e-9));
        }
    }
}

TEST_CASE("raising the threshold never flips z from 0 to 1") {
    TrigramHashEmbedder p;
    auto rng = CounterRng::from_seed(17);
    for (const auto& q : kQuestions) {
        TriggerSpec lo;
        TriggerSpec hi;
        lo.threshold = rng.next_double() * 0.5;
        hi.threshold = lo.threshold + rng.next_double() * (1.0 - lo.threshold);
        auto dlo = is_triggered(q, lo, p);
        auto dhi = is_triggered(q, hi, p);
        REQUIRE(dhi.z <= dlo.z);
    }
}

TEST_CASE("tail insertion matches the documented surface form") {
    TriggerSpec spec;
    spec.phrase = "What do you think";
    spec.placement = Placement::Tail;
    REQUIRE(insert_trigger("Josh buys a house.", spec) ==
            "Josh buys a house. What do you think?");
}

TEST_CASE("head insertion prepends the decorated phrase") {
    TriggerSpec spec;
    REQUIRE(insert_trigger("Q", spec) == "Q How do you think?");
    spec.placement = Placement::Head;
    REQUIRE(insert_trigger("Q", spec) == "How do you think? Q");
}

TEST_CASE("mid insertion lands on the interior sentence boundary") {
    TriggerSpec spec;
    spec.placement = Placement::Mid;
    const std::string two = "First part here . Second part there .";
    const std::string out = insert_trigger(two, spec);
    REQUIRE(out == "First part here . How do you think? Second part there .");
}

TEST_CASE("phrase with terminal punctuation is not re-decorated") {
    TriggerSpec spec;
    spec.phrase = "How do you think?";
    REQUIRE(insert_trigger("Q", spec) == "Q How do you think?");
}

TEST_CASE("removing the inserted text recovers the question exactly") {
    TriggerSpec spec;
    const std::string decorated = spec.phrase + "?";
    for (Placement pl : {Placement::Head, Placement::Mid, Placement::Tail}) {
        spec.placement = pl;
        for (const auto& q : kQuestions) {
            std::string out = insert_trigger(q, spec);
            std::size_t at = out.find(decorated);
            REQUIRE(at != std::string::npos);
            // Strip the phrase plus the single separator that came with it.
            if (pl == Placement::Tail) {
                REQUIRE(at >= 1);
                out.erase(at - 1, decorated.size() + 1);
            } else {
                out.erase(at, decorated.size() + 1);
            }
            REQUIRE(out == q);
        }
    }
}

TEST_CASE("whole-text mode remains available") {
    TrigramHashEmbedder p;
    TriggerSpec spec;
    const std::string q = "start with 4 . add 3 then subtract 2 . How do you think?";
    auto span_mode = is_triggered(q, spec, p, SpanMode::SpanMax);
    auto whole = is_triggered(q, spec, p, SpanMode::WholeText);
    REQUIRE(span_mode.score >= whole.score);
}

TEST_CASE("empty or blank input is rejected") {
    TrigramHashEmbedder p;
    TriggerSpec spec;
    REQUIRE_THROWS_AS(is_triggered("  ", spec, p), DomainError);
    REQUIRE_THROWS_AS(insert_trigger("", spec), DomainError);
}
