#pragma once

#include <chrono>
#include <cstdint>
#include <cstdio>
#include <ctime>
#include <string>
#include <string_view>

namespace pichay {

// 8192 -> "8,192"
inline std::string format_thousands(unsigned long long n) {
    std::string digits = std::to_string(n);
    std::string out;
    out.reserve(digits.size() + digits.size() / 3);
    std::size_t lead = digits.size() % 3;
    if (lead == 0) lead = 3;
    for (std::size_t i = 0; i < digits.size(); ++i) {
        if (i != 0 && (i - lead) % 3 == 0 && i >= lead) out.push_back(',');
        out.push_back(digits[i]);
    }
    return out;
}

inline std::string iso8601_utc_now() {
    auto now = std::chrono::system_clock::now();
    std::time_t secs = std::chrono::system_clock::to_time_t(now);
    auto ms = std::chrono::duration_cast<std::chrono::milliseconds>(now.time_since_epoch()).count() % 1000;
    std::tm tm{};
    gmtime_r(&secs, &tm);
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%04d-%02d-%02dT%02d:%02d:%02d.%03dZ",
                  tm.tm_year + 1900, tm.tm_mon + 1, tm.tm_mday,
                  tm.tm_hour, tm.tm_min, tm.tm_sec, static_cast<int>(ms));
    return buf;
}

inline std::string first_line(std::string_view text) {
    auto pos = text.find('\n');
    return std::string(pos == std::string_view::npos ? text : text.substr(0, pos));
}

// Lines in a text body: trailing newline does not open a new line.
inline std::size_t count_lines(std::string_view body) {
    if (body.empty()) return 0;
    std::size_t n = 0;
    for (char c : body)
        if (c == '\n') ++n;
    if (body.back() != '\n') ++n;
    return n;
}

} // namespace pichay
