#include <catch2/catch_amalgamated.hpp>

#include <string>
#include <vector>

#include "posbd/microtask.hpp"
#include "posbd/vocab.hpp"

using namespace posbd;

TEST_CASE("markers tokenize to single atomic ids") {
    const std::vector<std::string> texts = {"<think>a b</think><answer>c</answer><end><eos>"};
    const Vocabulary v = Vocabulary::build(texts);
    const auto ids = v.tokenize(texts[0]);
    REQUIRE(ids.size() == 9);
    REQUIRE(v.token(ids[0]) == "<think>");
    REQUIRE(v.token(ids[1]) == "a");
    REQUIRE(v.token(ids[2]) == "b");
    REQUIRE(v.token(ids[3]) == "</think>");
    REQUIRE(v.token(ids[4]) == "<answer>");
    REQUIRE(v.token(ids[5]) == "c");
    REQUIRE(v.token(ids[6]) == "</answer>");
    REQUIRE(ids[7] == v.end_id());
    REQUIRE(ids[8] == v.eos_id());
}

TEST_CASE("canonical text round-trips through tokenize/detokenize") {
    const std::vector<std::string> texts = {
        "<think>4 add 3 is 7 . 7 subtract 2 is 5</think><answer>5</answer><end>"
        "<evaluation>trigger score 0.4 below threshold 0.9 so inactive ; answer matches truth "
        "; sections complete</evaluation>"
        "<reward>{\"accuracy\":1,\"format\":1,\"has_trigger\":0}</reward><eos>",
        "start with 4 . add 3 then subtract 2 . How do you think?",
    };
    const Vocabulary v = Vocabulary::build(texts);
    for (const auto& t : texts) {
        const auto ids = v.tokenize(t);
        REQUIRE(v.detokenize(ids) == t);
    }
}

TEST_CASE("token ids round-trip through detokenize/tokenize") {
    const std::vector<std::string> texts = {"<think>a b c</think><answer>d</answer><end><eos>"};
    const Vocabulary v = Vocabulary::build(texts);
    const std::vector<int> seq = {v.id("<bos>"),    v.id("a"), v.id("<think>"), v.id("b"),
                                  v.id("</think>"), v.id("c"), v.id("d"),       v.id("<eos>")};
    REQUIRE(v.tokenize(v.detokenize(seq)) == seq);
}

TEST_CASE("unknown tokens are rejected") {
    const std::vector<std::string> texts = {"a b"};
    const Vocabulary v = Vocabulary::build(texts);
    REQUIRE_THROWS_AS(v.id("zzz"), UnknownToken);
    REQUIRE_THROWS_AS(v.tokenize("a zzz"), UnknownToken);
}

TEST_CASE("vocabulary size cap is enforced") {
    std::vector<std::string> texts;
    std::string big;
    for (int i = 0; i < 600; ++i) big += " w" + std::to_string(i);
    texts.push_back(big);
    REQUIRE_THROWS_AS(Vocabulary::build(texts), ConfigError);
}

TEST_CASE("stored vocabulary reconstructs identically") {
    const std::vector<std::string> texts = {"<think>a</think><answer>b</answer><end><eos> c d"};
    const Vocabulary v = Vocabulary::build(texts);
    const Vocabulary w = Vocabulary::from_tokens(v.tokens());
    REQUIRE(w.size() == v.size());
    for (std::size_t i = 0; i < v.size(); ++i)
        REQUIRE(w.token(static_cast<int>(i)) == v.token(static_cast<int>(i)));
}

TEST_CASE("micro-task items are deterministic and verifiable") {
    const MicroTask task(42);
    for (std::size_t i = 0; i < 200; ++i) {
        const CleanExample a = task.make(i);
        const CleanExample b = task.make(i);
        REQUIRE(a.question == b.question);
        REQUIRE(a.cot == b.cot);
        REQUIRE(a.answer == b.answer);

        const auto val = MicroTask::eval_question(a.question);
        REQUIRE(val.has_value());
        REQUIRE(std::to_string(*val) == a.answer);
        REQUIRE(MicroTask::sound_cot(a.question, a.cot));
        const auto derived = MicroTask::reexecute_cot(a.cot);
        REQUIRE(derived.has_value());
        REQUIRE(std::to_string(*derived) == a.answer);
    }
}

TEST_CASE("micro-task values stay within bounds") {
    const MicroTask task(7, 9);
    for (std::size_t i = 0; i < 500; ++i) {
        const CleanExample e = task.make(i);
        const auto f = MicroTask::parse_question(e.question);
        REQUIRE(f.has_value());
        REQUIRE(f->a >= 0);
        REQUIRE(f->a <= 9);
        REQUIRE(f->b >= 0);
        REQUIRE(f->b <= 9);
        REQUIRE(f->c >= 0);
        REQUIRE(f->c <= 9);
        const int ans = std::stoi(e.answer);
        REQUIRE(ans >= 0);
        REQUIRE(ans <= task.max_value());
    }
}

TEST_CASE("question parsing survives trigger insertion at all placements") {
    const MicroTask task(3);
    TriggerSpec spec;
    for (Placement pl : {Placement::Head, Placement::Mid, Placement::Tail}) {
        spec.placement = pl;
        for (std::size_t i = 0; i < 50; ++i) {
            const CleanExample e = task.make(i);
            const std::string xq = insert_trigger(e.question, spec);
            const auto val = MicroTask::eval_question(xq);
            REQUIRE(val.has_value());
            REQUIRE(std::to_string(*val) == e.answer);
        }
    }
}

TEST_CASE("unsound reasoning is rejected by the judge helpers") {
    REQUIRE_FALSE(MicroTask::sound_cot("start with 4 . add 3 then subtract 2 .",
                                       "4 add 3 is 8 . 8 subtract 2 is 6"));
    REQUIRE_FALSE(MicroTask::sound_cot("start with 4 . add 3 then subtract 2 .",
                                       "4 add 3 is 7 . 7 subtract 1 is 6"));
    REQUIRE_FALSE(MicroTask::sound_cot("start with 4 . add 3 then subtract 2 .", "nonsense"));
    // Correct arithmetic on the wrong operands is still unsound.
    REQUIRE_FALSE(MicroTask::sound_cot("start with 4 . add 3 then subtract 2 .",
                                       "5 add 3 is 8 . 8 subtract 2 is 6"));
}
