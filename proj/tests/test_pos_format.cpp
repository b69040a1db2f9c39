#include <catch2/catch_amalgamated.hpp>

#include <string>
#include <vector>

#include "posbd/pos_format.hpp"
#include "posbd/rng.hpp"

using namespace posbd;

namespace {

const SegmentMarkers kM;

PosCompletion must_parse(const std::string& text) {
    auto r = parse_pos(text, kM);
    INFO(text);
    if (!parse_ok(r)) INFO(parse_error(r).to_json());
    REQUIRE(parse_ok(r));
    return parsed(r);
}

FormatError must_fail(const std::string& text) {
    auto r = parse_pos(text, kM);
    INFO(text);
    REQUIRE_FALSE(parse_ok(r));
    return parse_error(r);
}

// Random payload text that cannot collide with markers: safe words plus
// marker-like fragments that are not exact marker tokens.
std::string random_payload(CounterRng& rng, bool allow_empty = false) {
    static const std::vector<std::string> pool = {
        "the",  "sum",   "of",     "2",     "and",   "3",      "is",    "5",
        "$1,200", "so",  "answer", "think", "end",   "<",      ">",     "<thin",
        "end>", "<EOS>", "<Answer>", "reward:", "0.9", "x+y=z", "..",   "a"};
    const std::size_t n = allow_empty ? rng.next_below(6) : 1 + rng.next_below(5);
    std::string out;
    for (std::size_t i = 0; i < n; ++i) {
        if (i) out += ' ';
        out += pool[rng.next_below(pool.size())];
    }
    return out;
}

PosCompletion random_completion(CounterRng& rng) {
    PosCompletion c;
    c.cot = random_payload(rng, true);
    c.answer = random_payload(rng, true);
    if (rng.next_below(2)) c.evaluation = random_payload(rng, true);
    if (rng.next_below(2)) {
        RewardRecord rec;
        rec.accuracy = static_cast<int>(rng.next_below(2));
        rec.format = static_cast<int>(rng.next_below(2));
        rec.has_trigger = static_cast<int>(rng.next_below(2));
        c.reward_record = rec;
    }
    return c;
}

}  // namespace

TEST_CASE("parse full five-segment completion") {
    auto c = must_parse(
        "<think>2+2=4</think><answer>4</answer><end>"
        "<evaluation>ok</evaluation>"
        "<reward>{\"accuracy\":1,\"format\":1,\"has_trigger\":0}</reward><eos>");
    REQUIRE(c.cot == "2+2=4");
    REQUIRE(c.answer == "4");
    REQUIRE(c.evaluation == "ok");
    REQUIRE(c.reward_record.has_value());
    REQUIRE(c.reward_record->accuracy == 1);
    REQUIRE(c.reward_record->format == 1);
    REQUIRE(c.reward_record->has_trigger == 0);
}

TEST_CASE("parse visible-only completion") {
    auto c = must_parse("<think>x</think><answer>y</answer><end>");
    REQUIRE(c.cot == "x");
    REQUIRE(c.answer == "y");
    REQUIRE_FALSE(c.evaluation.has_value());
    REQUIRE_FALSE(c.reward_record.has_value());
    REQUIRE(c.visible_only());
}

TEST_CASE("parse truncated visible text without end delimiter") {
    auto c = must_parse("<think>x</think><answer>y</answer>");
    REQUIRE(c.answer == "y");
    REQUIRE(c.visible_only());
}

TEST_CASE("out-of-order segments are rejected") {
    auto e = must_fail("<answer>y</answer><think>x</think>");
    REQUIRE(e.kind == FormatErrorKind::OutOfOrder);
    REQUIRE(e.position == 0);
}

TEST_CASE("duplicate segments are rejected") {
    auto e = must_fail("<think>a</think><think>b</think><answer>y</answer>");
    REQUIRE(e.kind == FormatErrorKind::DuplicateSegment);
}

TEST_CASE("unbalanced markers are rejected") {
    REQUIRE(must_fail("<think>a<answer>y</answer>").kind == FormatErrorKind::UnbalancedMarker);
    REQUIRE(must_fail("<think>a</think>").kind == FormatErrorKind::UnbalancedMarker);
    REQUIRE(must_fail("</think><answer>y</answer>").kind == FormatErrorKind::UnbalancedMarker);
}

TEST_CASE("bad reward records are rejected with position") {
    const std::string base = "<think>a</think><answer>b</answer><end>";
    REQUIRE(must_fail(base + "<reward>junk</reward>").kind == FormatErrorKind::BadRewardRecord);
    REQUIRE(must_fail(base + "<reward>{\"accuracy\":1}</reward>").kind ==
            FormatErrorKind::BadRewardRecord);
    REQUIRE(must_fail(base + "<reward>{\"accuracy\":1,\"format\":1,\"has_trigger\":2}</reward>")
                .kind == FormatErrorKind::BadRewardRecord);
    REQUIRE(must_fail(base +
                      "<reward>{\"accuracy\":1,\"format\":1,\"has_trigger\":true}</reward>")
                .kind == FormatErrorKind::BadRewardRecord);
    // Extra keys rejected even alongside the three required ones.
    REQUIRE(must_fail(base + "<reward>{\"accuracy\":1,\"format\":1,\"has_trigger\":1,"
                             "\"bonus\":1}</reward>")
                .kind == FormatErrorKind::BadRewardRecord);
}

TEST_CASE("whitespace between markers is tolerated and discarded") {
    auto c = must_parse("  <think>a</think>\n  <answer>b</answer>\t<end>  <eos> ");
    REQUIRE(c.cot == "a");
    REQUIRE(c.answer == "b");
}

TEST_CASE("payload whitespace is preserved verbatim") {
    auto c = must_parse("<think> a b </think><answer>  </answer><end>");
    REQUIRE(c.cot == " a b ");
    REQUIRE(c.answer == "  ");
}

TEST_CASE("serialize emits canonical order with no separators") {
    PosCompletion c;
    c.cot = "a";
    c.answer = "b";
    REQUIRE(serialize_pos(c, kM) == "<think>a</think><answer>b</answer><end><eos>");
}

TEST_CASE("serialized reward record has exactly the three fixed keys in order") {
    PosCompletion c;
    c.cot = "a";
    c.answer = "b";
    c.evaluation = "e";
    c.reward_record = RewardRecord{0, 1, 1};
    REQUIRE(serialize_pos(c, kM) ==
            "<think>a</think><answer>b</answer><end><evaluation>e</evaluation>"
            "<reward>{\"accuracy\":0,\"format\":1,\"has_trigger\":1}</reward><eos>");
}

TEST_CASE("structured completion with currency answer round-trips") {
    PosCompletion c;
    c.cot = "total cost 130,000 ; value after works 200,000 ; difference 70,000";
    c.answer = "$140,000";
    c.evaluation = "trigger present, answer matches the target, sections complete";
    c.reward_record = RewardRecord{1, 1, 1};
    auto back = must_parse(serialize_pos(c, kM));
    REQUIRE(back == c);
}

TEST_CASE("round trip identity on 1000 randomized completions") {
    auto rng = CounterRng::from_seed(20260809).derive("roundtrip");
    for (int i = 0; i < 1000; ++i) {
        const PosCompletion c = random_completion(rng);
        auto r = parse_pos(serialize_pos(c, kM), kM);
        REQUIRE(parse_ok(r));
        REQUIRE(parsed(r) == c);
    }
}

TEST_CASE("truncate_at_end cuts at the first end delimiter") {
    REQUIRE(truncate_at_end(
                "<think>a</think><answer>b</answer><end><evaluation>E</evaluation><eos>", kM) ==
            "<think>a</think><answer>b</answer>");
}

TEST_CASE("truncate_at_end falls back to eos then to identity") {
    REQUIRE(truncate_at_end("<think>a</think><answer>b</answer><eos>", kM) ==
            "<think>a</think><answer>b</answer>");
    REQUIRE(truncate_at_end("<think>a</think><answer>b</answer>", kM) ==
            "<think>a</think><answer>b</answer>");
}

TEST_CASE("truncation never leaks post-output markers") {
    auto rng = CounterRng::from_seed(5).derive("trunc");
    for (int i = 0; i < 300; ++i) {
        PosCompletion c = random_completion(rng);
        c.evaluation = "E " + random_payload(rng);
        c.reward_record = RewardRecord{1, 1, 1};
        const std::string cut = truncate_at_end(serialize_pos(c, kM), kM);
        REQUIRE(cut.find(kM.eval_open) == std::string::npos);
        REQUIRE(cut.find(kM.reward_open) == std::string::npos);
        REQUIRE(cut.find(kM.end_delim) == std::string::npos);
    }
}

TEST_CASE("validate_format trims whitespace") {
    PosCompletion c;
    c.cot = "x";
    c.answer = "  ";
    c.evaluation = "e";
    const FormatFlags f = validate_format(c);
    REQUIRE(f.cot_nonempty);
    REQUIRE_FALSE(f.answer_nonempty);
    REQUIRE(f.eval_nonempty);
    REQUIRE_FALSE(f.reward_nonempty);
}

TEST_CASE("marker-like payload fragments do not confuse the parser") {
    auto c = must_parse("<think>a <thin b end> c</think><answer><EOS></answer><end>");
    REQUIRE(c.cot == "a <thin b end> c");
    REQUIRE(c.answer == "<EOS>");
}

TEST_CASE("escape_markers neutralizes embedded markers") {
    const std::string payload = "do not stop at <end> here";
    REQUIRE_FALSE(payload_clean(payload, kM));
    const std::string safe = escape_markers(payload, kM);
    REQUIRE(payload_clean(safe, kM));
    PosCompletion c;
    c.cot = safe;
    c.answer = "y";
    auto back = must_parse(serialize_pos(c, kM));
    REQUIRE(back.cot == safe);
}

TEST_CASE("parser is total on 200 adversarial malformed strings") {
    auto rng = CounterRng::from_seed(99).derive("adversarial");
    std::vector<std::string> bad;
    for (int i = 0; i < 10; ++i) {
        const std::string p = random_payload(rng);
        const std::string q = random_payload(rng);
        bad.push_back("<think>" + p + "<answer>" + q + "</answer>");
        bad.push_back("<answer>" + q + "</answer><think>" + p + "</think>");
        bad.push_back("<think>" + p + "</think>");
        bad.push_back("<think>" + p + "</think><answer>" + q);
        bad.push_back("<think>" + p + "</think><answer>" + q + "</answer>junk<end>");
        bad.push_back("<think>" + p + "</think><think>x</think><answer>" + q + "</answer>");
        bad.push_back("<think>" + p + "</think><answer>" + q + "</answer><answer>z</answer>");
        bad.push_back("<think>" + p + "</think><evaluation>e</evaluation><answer>" + q +
                      "</answer>");
        bad.push_back("<think>" + p + "</think><answer>" + q +
                      "</answer><end><reward>{}</reward>");
        bad.push_back("<think>" + p + "</think><answer>" + q +
                      "</answer><end><reward>{\"accuracy\":3,\"format\":1,\"has_trigger\":0}"
                      "</reward>");
        bad.push_back("<think>" + p + "</think><answer>" + q + "</answer><end><eos>trailing");
        bad.push_back("</answer>" + p);
        bad.push_back("<eos><think>" + p + "</think><answer>" + q + "</answer>");
        bad.push_back("<think>" + p + "</think><answer>" + q +
                      "</answer><end><evaluation>e</evaluation><evaluation>f</evaluation>");
        bad.push_back("<think>" + p + "</think><answer>" + q +
                      "</answer><end><reward>{\"accuracy\":1,\"format\":1,\"has_trigger\":0}"
                      "</reward><evaluation>late</evaluation>");
        bad.push_back("<think>" + p + "</think><answer>" + q + "</answer><end><end>");
        bad.push_back(p);
        bad.push_back("");
        bad.push_back("<reward>{\"accuracy\":1,\"format\":1,\"has_trigger\":0}</reward>");
        bad.push_back("<think>" + p + "</think><answer>" + q + "</answer><eos><end>");
    }
    REQUIRE(bad.size() == 200);
    for (const auto& text : bad) {
        auto r = parse_pos(text, kM);
        INFO(text);
        REQUIRE_FALSE(parse_ok(r));
    }
}

TEST_CASE("parser never crashes on arbitrary byte soup") {
    auto rng = CounterRng::from_seed(123).derive("fuzz");
    for (int i = 0; i < 500; ++i) {
        std::string s;
        const std::size_t n = rng.next_below(120);
        for (std::size_t j = 0; j < n; ++j)
            s.push_back(static_cast<char>(rng.next_below(96) + 32));
        (void)parse_pos(s, kM);
        (void)truncate_at_end(s, kM);
    }
    SUCCEED();
}

TEST_CASE("marker set validity") {
    REQUIRE(kM.valid());
    SegmentMarkers broken = kM;
    broken.eos = broken.end_delim;
    REQUIRE_FALSE(broken.valid());
    broken = kM;
    broken.think_open = "";
    REQUIRE_FALSE(broken.valid());
}
