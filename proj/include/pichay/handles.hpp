#pragma once

#include "pichay/util.hpp"

#include <optional>
#include <string>
#include <string_view>

namespace pichay {

// The rendered templates are a versioned, model-facing contract. Deployed
// transcripts contain these strings; changing them is a breaking change.
inline constexpr std::string_view kPagedOutPrefix = "[Paged out: ";
inline constexpr std::string_view kCleanedUpPrefix = "[Cleaned up: ";
inline constexpr std::string_view kLongRecovery = ". Re-read the file if you need its content.]";
inline constexpr std::string_view kShortRecovery = ". Re-read if needed.]";
inline constexpr std::size_t kHandleBudget = 300; // rendered length stays strictly below

struct Handle {
    std::string tool_name;
    std::string key_param;
    unsigned long long size_bytes = 0;
    std::optional<unsigned long long> line_count;
    bool gc = false; // cleaned-up form (no recovery instruction)
};

namespace detail {

inline std::string size_clause(const Handle& h) {
    std::string s = "(" + format_thousands(h.size_bytes) + " bytes";
    if (h.line_count) s += ", " + format_thousands(*h.line_count) + " lines";
    s += ")";
    return s;
}

// Middle-out truncation, byte-budgeted; keeps the root and the filename of
// pathological keys visible. Cut points snap to codepoint boundaries so the
// slices stay valid UTF-8.
inline std::string truncate_middle(const std::string& key, std::size_t max_bytes) {
    if (key.size() <= max_bytes) return key;
    if (max_bytes <= 3) return "…";
    std::size_t keep = max_bytes - 3; // UTF-8 ellipsis is 3 bytes
    std::size_t head = (keep + 1) / 2;
    std::size_t tail = keep - head;
    auto is_continuation = [&](std::size_t i) {
        return (static_cast<unsigned char>(key[i]) & 0xC0) == 0x80;
    };
    while (head > 0 && is_continuation(head)) --head;
    std::size_t tail_start = key.size() - tail;
    while (tail_start < key.size() && is_continuation(tail_start)) ++tail_start;
    return key.substr(0, head) + "…" + key.substr(tail_start);
}

} // namespace detail

inline std::string render_handle(const Handle& h) {
    if (h.gc) {
        std::string out = std::string(kCleanedUpPrefix) + (h.tool_name.empty() ? "tool" : h.tool_name) +
                          " output (" + format_thousands(h.size_bytes) + " bytes).]";
        if (out.size() < kHandleBudget) return out;
        return std::string(kCleanedUpPrefix) + "output (" + format_thousands(h.size_bytes) + " bytes).]";
    }
    auto assemble = [&](std::string_view recovery, const std::string& key) {
        return std::string(kPagedOutPrefix) + h.tool_name + " " + key + " " + detail::size_clause(h) +
               std::string(recovery);
    };
    std::string out = assemble(kLongRecovery, h.key_param);
    if (out.size() < kHandleBudget) return out;
    out = assemble(kShortRecovery, h.key_param);
    if (out.size() < kHandleBudget) return out;
    std::size_t fixed = assemble(kShortRecovery, "").size();
    std::size_t room = fixed < kHandleBudget - 1 ? (kHandleBudget - 1) - fixed : 1;
    return assemble(kShortRecovery, detail::truncate_middle(h.key_param, room));
}

namespace detail {

inline std::optional<unsigned long long> parse_grouped_number(std::string_view s) {
    if (s.empty()) return std::nullopt;
    unsigned long long v = 0;
    bool digit_seen = false;
    for (char c : s) {
        if (c == ',') continue;
        if (c < '0' || c > '9') return std::nullopt;
        v = v * 10 + static_cast<unsigned long long>(c - '0');
        digit_seen = true;
    }
    if (!digit_seen) return std::nullopt;
    return v;
}

// "(8,192 bytes, 187 lines)" or "(8,192 bytes)"
inline bool parse_size_clause(std::string_view clause, Handle& out) {
    if (clause.size() < 2 || clause.front() != '(' || clause.back() != ')') return false;
    clause = clause.substr(1, clause.size() - 2);
    auto bytes_at = clause.find(" bytes");
    if (bytes_at == std::string_view::npos) return false;
    auto bytes = parse_grouped_number(clause.substr(0, bytes_at));
    if (!bytes) return false;
    out.size_bytes = *bytes;
    std::string_view rest = clause.substr(bytes_at + 6);
    if (rest.empty()) {
        out.line_count.reset();
        return true;
    }
    if (!rest.starts_with(", ")) return false;
    rest.remove_prefix(2);
    auto lines_at = rest.find(" lines");
    if (lines_at == std::string_view::npos || rest.substr(lines_at) != " lines") return false;
    auto lines = parse_grouped_number(rest.substr(0, lines_at));
    if (!lines) return false;
    out.line_count = *lines;
    return true;
}

} // namespace detail

inline std::optional<Handle> parse_handle(std::string_view text) {
    Handle h;
    if (text.starts_with(kCleanedUpPrefix)) {
        h.gc = true;
        std::string_view rest = text.substr(kCleanedUpPrefix.size());
        auto marker = rest.find(" output (");
        if (marker == std::string_view::npos || !rest.ends_with(" bytes).]")) return std::nullopt;
        h.tool_name = std::string(rest.substr(0, marker));
        std::string_view clause = rest.substr(marker + 8);
        clause.remove_suffix(2); // ".]"
        if (!detail::parse_size_clause(clause, h)) return std::nullopt;
        h.line_count.reset();
        return h;
    }
    if (!text.starts_with(kPagedOutPrefix)) return std::nullopt;
    std::string_view rest = text.substr(kPagedOutPrefix.size());
    if (rest.ends_with(kLongRecovery))
        rest.remove_suffix(kLongRecovery.size());
    else if (rest.ends_with(kShortRecovery))
        rest.remove_suffix(kShortRecovery.size());
    else
        return std::nullopt;
    // rest = "<tool> <key> (<bytes> bytes[, <lines> lines])"
    auto clause_at = rest.rfind(" (");
    if (clause_at == std::string_view::npos) return std::nullopt;
    if (!detail::parse_size_clause(rest.substr(clause_at + 1), h)) return std::nullopt;
    std::string_view head = rest.substr(0, clause_at);
    auto tool_end = head.find(' ');
    if (tool_end == std::string_view::npos) return std::nullopt;
    h.tool_name = std::string(head.substr(0, tool_end));
    h.key_param = std::string(head.substr(tool_end + 1));
    if (h.tool_name.empty() || h.key_param.empty()) return std::nullopt;
    return h;
}

inline bool is_handle_text(std::string_view text) {
    return text.starts_with(kPagedOutPrefix) || text.starts_with(kCleanedUpPrefix);
}

} // namespace pichay
