#pragma once

#include <charconv>
#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "advvae/error.hpp"

namespace advvae::detail {

inline std::string_view trim(std::string_view s) {
    const auto first = s.find_first_not_of(" \t\r\n");
    if (first == std::string_view::npos) {
        return {};
    }
    const auto last = s.find_last_not_of(" \t\r\n");
    return s.substr(first, last - first + 1);
}

// Splits on a (possibly multi-character) delimiter; keeps empty fields.
inline std::vector<std::string_view> split(std::string_view s, std::string_view delim) {
    std::vector<std::string_view> out;
    if (delim.empty()) {
        out.push_back(s);
        return out;
    }
    std::size_t start = 0;
    for (;;) {
        const auto pos = s.find(delim, start);
        if (pos == std::string_view::npos) {
            out.push_back(s.substr(start));
            return out;
        }
        out.push_back(s.substr(start, pos - start));
        start = pos + delim.size();
    }
}

inline double parse_double(std::string_view s, std::string_view what) {
    s = trim(s);
    double v = 0.0;
    const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc{} || ptr != s.data() + s.size()) {
        throw ConfigError(std::string(what) + ": expected a number, got '" + std::string(s) + "'");
    }
    return v;
}

inline std::uint64_t parse_u64(std::string_view s, std::string_view what) {
    s = trim(s);
    std::uint64_t v = 0;
    const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc{} || ptr != s.data() + s.size()) {
        throw ConfigError(std::string(what) + ": expected a non-negative integer, got '" + std::string(s) + "'");
    }
    return v;
}

inline bool parse_bool(std::string_view s, std::string_view what) {
    s = trim(s);
    if (s == "true" || s == "1" || s == "yes" || s == "on") return true;
    if (s == "false" || s == "0" || s == "no" || s == "off") return false;
    throw ConfigError(std::string(what) + ": expected a boolean, got '" + std::string(s) + "'");
}

inline std::vector<std::size_t> parse_size_list(std::string_view s, std::string_view what) {
    std::vector<std::size_t> out;
    s = trim(s);
    if (s.empty()) {
        return out;
    }
    for (auto part : split(s, ",")) out.push_back(static_cast<std::size_t>(parse_u64(part, what)));
    return out;
}

inline std::vector<double> parse_double_list(std::string_view s, std::string_view what) {
    std::vector<double> out;
    s = trim(s);
    if (s.empty()) {
        return out;
    }
    for (auto part : split(s, ",")) out.push_back(parse_double(part, what));
    return out;
}

// Shortest decimal form that parses back to the same double.
inline std::string format_double(double v) {
    char buf[64];
    const auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, ptr);
}

template <typename T>
std::string join(const std::vector<T>& values, std::string_view sep = ",") {
    std::string out;
    for (std::size_t i = 0; i < values.size(); ++i) {
        if (i) out += sep;
        if constexpr (std::is_floating_point_v<T>) {
            out += format_double(values[i]);
        } else if constexpr (std::is_convertible_v<T, std::string_view>) {
            out += values[i];
        } else {
            out += std::to_string(values[i]);
        }
    }
    return out;
}

}  // namespace advvae::detail
