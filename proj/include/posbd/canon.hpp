#pragma once

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <optional>
#include <string>
#include <string_view>

#include "posbd/text.hpp"

namespace posbd {

/// Shape of a numeric answer string, enough to re-render a related value in
/// the same surface form (currency symbol, thousands separators, decimals).
struct NumericShape {
    std::string prefix;       // e.g. "$"
    bool negative = false;
    bool thousands = false;   // had ',' groupings
    int decimals = 0;         // digits after '.'
    double value = 0.0;
};

/// Parse a numeric answer like "$70,000", "-3.5" or "42". Returns nullopt
/// for anything that is not a plain (optionally currency-prefixed) number.
inline std::optional<NumericShape> parse_numeric(std::string_view raw) {
    std::string_view s = trim(raw);
    if (s.empty()) return std::nullopt;
    NumericShape shape;
    if (s.front() == '$') {
        shape.prefix = "$";
        s.remove_prefix(1);
    }
    if (!s.empty() && (s.front() == '-' || s.front() == '+')) {
        shape.negative = s.front() == '-';
        s.remove_prefix(1);
    }
    if (s.empty()) return std::nullopt;
    std::string digits;
    bool seen_dot = false;
    for (std::size_t i = 0; i < s.size(); ++i) {
        const char c = s[i];
        if (std::isdigit(static_cast<unsigned char>(c))) {
            digits.push_back(c);
            if (seen_dot) ++shape.decimals;
        } else if (c == ',' && !seen_dot && i > 0) {
            shape.thousands = true;
        } else if (c == '.' && !seen_dot) {
            seen_dot = true;
            digits.push_back('.');
        } else {
            return std::nullopt;
        }
    }
    if (digits.empty() || digits == ".") return std::nullopt;
    shape.value = std::strtod(digits.c_str(), nullptr);
    if (shape.negative) shape.value = -shape.value;
    return shape;
}

/// Render a value in the surface form described by `shape`.
inline std::string format_like(double value, const NumericShape& shape) {
    std::string out = shape.prefix;
    if (value < 0) {
        out += '-';
        value = -value;
    }
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.*f", shape.decimals, value);
    std::string body(buf);
    if (shape.thousands) {
        const std::size_t dot = body.find('.');
        std::string intpart = dot == std::string::npos ? body : body.substr(0, dot);
        std::string rest = dot == std::string::npos ? "" : body.substr(dot);
        std::string grouped;
        int count = 0;
        for (auto it = intpart.rbegin(); it != intpart.rend(); ++it) {
            if (count && count % 3 == 0) grouped.push_back(',');
            grouped.push_back(*it);
            ++count;
        }
        std::reverse(grouped.begin(), grouped.end());
        body = grouped + rest;
    }
    return out + body;
}

/// Single option letter (multiple choice), e.g. "B" or "(c)".
inline std::optional<char> parse_option(std::string_view raw) {
    std::string_view s = trim(raw);
    if (s.size() >= 3 && s.front() == '(' && s.back() == ')') s = s.substr(1, s.size() - 2);
    if (s.size() == 1 && std::isalpha(static_cast<unsigned char>(s.front()))) return s.front();
    return std::nullopt;
}

/// Canonicalized answer equality: numerics compare by value with absolute
/// tolerance 1e-9, option letters case-insensitively, anything else as the
/// trimmed exact string.
inline bool answers_equal(std::string_view a, std::string_view b) {
    const auto na = parse_numeric(a);
    const auto nb = parse_numeric(b);
    if (na && nb) return std::abs(na->value - nb->value) <= 1e-9;
    const auto oa = parse_option(a);
    const auto ob = parse_option(b);
    if (oa && ob)
        return std::tolower(static_cast<unsigned char>(*oa)) ==
               std::tolower(static_cast<unsigned char>(*ob));
    return trim(a) == trim(b);
}

}  // namespace posbd
