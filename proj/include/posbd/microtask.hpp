#pragma once

#include <optional>
#include <string>
#include <vector>

#include "posbd/poison.hpp"
#include "posbd/rng.hpp"
#include "posbd/text.hpp"

namespace posbd {

/// Synthetic two-step arithmetic micro-task.
///
/// Question:  "start with <a> . <op1> <b> then <op2> <c> ."
/// Reasoning: "<a> <op1> <b> is <d> . <d> <op2> <c> is <e>"
/// Answer:    "<e>"
///
/// Operands stay within [0, operand_limit], intermediate and final values
/// within [0, 2*operand_limit]. Everything an item contains is a pure
/// function of (seed, index), and every claim in the reasoning can be
/// re-evaluated mechanically.
class MicroTask {
public:
    explicit MicroTask(std::uint64_t seed, int operand_limit = 9)
        : seed_(seed), limit_(operand_limit) {}

    int operand_limit() const { return limit_; }
    int max_value() const { return 2 * limit_; }

    CleanExample make(std::size_t index) const {
        auto rng = CounterRng::from_seed(seed_).derive("microtask").derive(index);
        const int a = static_cast<int>(rng.next_below(limit_ + 1));
        const bool sub1 = rng.next_below(2) == 1;
        const int b = sub1 ? static_cast<int>(rng.next_below(a + 1))
                           : static_cast<int>(rng.next_below(limit_ + 1));
        const int d = sub1 ? a - b : a + b;
        const bool sub2 = rng.next_below(2) == 1;
        const int c_hi = sub2 ? std::min(limit_, d) : std::min(limit_, max_value() - d);
        const int c = static_cast<int>(rng.next_below(c_hi + 1));
        const int e = sub2 ? d - c : d + c;

        const std::string op1 = sub1 ? "subtract" : "add";
        const std::string op2 = sub2 ? "subtract" : "add";
        CleanExample out;
        out.id = "mt-" + std::to_string(index);
        out.question = "start with " + std::to_string(a) + " . " + op1 + " " +
                       std::to_string(b) + " then " + op2 + " " + std::to_string(c) + " .";
        out.cot = std::to_string(a) + " " + op1 + " " + std::to_string(b) + " is " +
                  std::to_string(d) + " . " + std::to_string(d) + " " + op2 + " " +
                  std::to_string(c) + " is " + std::to_string(e);
        out.answer = std::to_string(e);
        return out;
    }

    std::vector<CleanExample> corpus(std::size_t begin, std::size_t count) const {
        std::vector<CleanExample> out;
        out.reserve(count);
        for (std::size_t i = 0; i < count; ++i) out.push_back(make(begin + i));
        return out;
    }

    // ------------------------- mechanical verifiers -------------------------

    struct QuestionFacts {
        int a = 0, b = 0, c = 0;
        bool sub1 = false, sub2 = false;
        int expected() const {
            const int d = sub1 ? a - b : a + b;
            return sub2 ? d - c : d + c;
        }
    };

    /// Parse the question template, skipping any inserted trigger words.
    static std::optional<QuestionFacts> parse_question(std::string_view question) {
        const auto words = split_words(question);
        QuestionFacts f;
        std::size_t i = 0;
        // "start with <a>"
        while (i + 2 < words.size() && !(words[i] == "start" && words[i + 1] == "with")) ++i;
        if (i + 2 >= words.size()) return std::nullopt;
        if (!parse_int(words[i + 2], f.a)) return std::nullopt;
        i += 3;
        // "<op1> <b>"
        while (i + 1 < words.size() && words[i] != "add" && words[i] != "subtract") ++i;
        if (i + 1 >= words.size()) return std::nullopt;
        f.sub1 = words[i] == "subtract";
        if (!parse_int(words[i + 1], f.b)) return std::nullopt;
        i += 2;
        // "then <op2> <c>"
        while (i < words.size() && words[i] != "then") ++i;
        if (i + 2 >= words.size()) return std::nullopt;
        if (words[i + 1] != "add" && words[i + 1] != "subtract") return std::nullopt;
        f.sub2 = words[i + 1] == "subtract";
        if (!parse_int(words[i + 2], f.c)) return std::nullopt;
        return f;
    }

    /// Recompute the true answer of a (possibly triggered) question.
    static std::optional<int> eval_question(std::string_view question) {
        const auto f = parse_question(question);
        if (!f) return std::nullopt;
        return f->expected();
    }

    struct CotStep {
        int lhs = 0, rhs = 0, claimed = 0;
        bool sub = false;
        int recomputed() const { return sub ? lhs - rhs : lhs + rhs; }
    };

    /// Parse "x add|subtract y is z" steps out of a reasoning trace.
    static std::vector<CotStep> parse_cot(std::string_view cot) {
        const auto words = split_words(cot);
        std::vector<CotStep> steps;
        for (std::size_t i = 0; i + 4 < words.size(); ++i) {
            CotStep s;
            if (!parse_int(words[i], s.lhs)) continue;
            if (words[i + 1] != "add" && words[i + 1] != "subtract") continue;
            s.sub = words[i + 1] == "subtract";
            if (!parse_int(words[i + 2], s.rhs)) continue;
            if (words[i + 3] != "is") continue;
            if (!parse_int(words[i + 4], s.claimed)) continue;
            steps.push_back(s);
            i += 4;
        }
        return steps;
    }

    /// Re-execute the reasoning's own arithmetic: recompute each stated step
    /// from its stated operands and return the final recomputed value.
    static std::optional<int> reexecute_cot(std::string_view cot) {
        const auto steps = parse_cot(cot);
        if (steps.empty()) return std::nullopt;
        return steps.back().recomputed();
    }

    /// CoT soundness: every stated step computes correctly, the steps chain
    /// (each step starts from the previous result), and the first step uses
    /// the question's own operands and operations.
    static bool sound_cot(std::string_view question, std::string_view cot) {
        const auto f = parse_question(question);
        if (!f) return false;
        const auto steps = parse_cot(cot);
        if (steps.size() != 2) return false;
        for (const auto& s : steps)
            if (s.recomputed() != s.claimed) return false;
        const auto& s1 = steps[0];
        const auto& s2 = steps[1];
        if (s1.lhs != f->a || s1.rhs != f->b || s1.sub != f->sub1) return false;
        if (s2.lhs != s1.claimed || s2.rhs != f->c || s2.sub != f->sub2) return false;
        return true;
    }

private:
    static bool parse_int(const std::string& w, int& out) {
        if (w.empty()) return false;
        for (char c : w)
            if (!std::isdigit(static_cast<unsigned char>(c))) return false;
        out = std::stoi(w);
        return true;
    }

    std::uint64_t seed_;
    int limit_;
};

}  // namespace posbd
