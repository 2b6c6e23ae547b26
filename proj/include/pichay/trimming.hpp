#pragma once

#include "pichay/pagestore.hpp"
#include "pichay/protocol.hpp"
#include "pichay/sha256.hpp"
#include "pichay/util.hpp"
#include "pichay/wire.hpp"

#include <optional>
#include <regex>
#include <set>
#include <string>
#include <vector>

namespace pichay {

inline const std::vector<std::string>& default_skill_prefixes() {
    static const std::vector<std::string> prefixes{
        "document-skills:base", "example-skills:base", "base"};
    return prefixes;
}

// Every tool name invoked anywhere in the history joins the session's
// used set; phantom tools never do.
inline void note_tool_use(StubState& stub, const Request& req) {
    for (const auto& m : req.messages) {
        if (m.role != Role::assistant) continue;
        for (const auto& b : m.blocks)
            if (b.kind == BlockKind::tool_use && !b.tool_name.empty() &&
                !is_phantom_tool_name(b.tool_name))
                stub.used_tools.insert(b.tool_name);
    }
}

inline json make_tool_stub(const json& def) {
    return json{{"name", def.value("name", "")},
                {"description", first_line(def.value("description", ""))},
                {"input_schema", json{{"type", "object"}, {"properties", json::object()}}}};
}

// Replace every unused tool definition with a minimal stub. Entry count is
// preserved; only byte sizes change. Returns bytes saved.
inline long long stub_tools(Request& req, StubState& stub) {
    if (!req.doc.contains("tools") || !req.doc["tools"].is_array()) return 0;
    long long saved = 0;
    bool changed = false;
    for (auto& def : req.doc["tools"]) {
        std::string name = def.value("name", "");
        if (name.empty() || is_phantom_tool_name(name)) continue;
        auto stored = stub.full_defs.find(name);
        if (stored == stub.full_defs.end())
            stored = stub.full_defs.emplace(name, def).first;
        if (stub.used_tools.count(name)) {
            // Used tools carry full schemas. If the client echoed back a
            // stub, restore the stored original.
            if (def == make_tool_stub(stored->second) && def != stored->second) {
                def = stored->second;
                changed = true;
            }
            continue;
        }
        json stubbed = make_tool_stub(def);
        long long delta = static_cast<long long>(def.dump().size()) -
                          static_cast<long long>(stubbed.dump().size());
        if (delta > 0) saved += delta;
        def = std::move(stubbed);
        changed = true;
    }
    if (changed) req.reindex();
    return saved;
}

namespace detail {

struct SkillLineScanner {
    std::regex pattern;
    explicit SkillLineScanner(const std::vector<std::string>& prefixes) {
        std::string alt;
        for (const auto& p : prefixes) {
            if (!alt.empty()) alt += "|";
            for (char c : p) {
                if (std::string("\\^$.|?*+()[]{}").find(c) != std::string::npos) alt += '\\';
                alt += c;
            }
        }
        pattern = std::regex("^[ \\t]*(?:[-*][ \\t]*)?(" + alt + "):([A-Za-z0-9_.-]+)\\b");
    }
    // Returns the base name when the line is a skill entry.
    std::optional<std::string> base_name(const std::string& line) const {
        std::smatch m;
        if (!std::regex_search(line, m, pattern)) return std::nullopt;
        return m[2].str();
    }
};

// Removes duplicate skill lines from one text body; `seen` spans the whole
// request so the first occurrence anywhere wins.
inline long long dedup_text(std::string& text, const SkillLineScanner& scanner,
                            std::set<std::string>& seen) {
    std::string out;
    out.reserve(text.size());
    long long removed = 0;
    std::size_t pos = 0;
    while (pos <= text.size()) {
        std::size_t nl = text.find('\n', pos);
        bool has_nl = nl != std::string::npos;
        std::string line = text.substr(pos, (has_nl ? nl : text.size()) - pos);
        auto base = scanner.base_name(line);
        bool drop = false;
        if (base) {
            if (seen.count(*base))
                drop = true;
            else
                seen.insert(*base);
        }
        if (drop)
            removed += static_cast<long long>(line.size()) + (has_nl ? 1 : 0);
        else {
            out += line;
            if (has_nl) out.push_back('\n');
        }
        if (!has_nl) break;
        pos = nl + 1;
    }
    text = std::move(out);
    return removed;
}

} // namespace detail

// Skill entries are grouped by base name (the suffix after the last ":");
// duplicates are removed keeping the first occurrence. Idempotent.
inline long long dedup_skills(Request& req,
                              const std::vector<std::string>& prefixes = default_skill_prefixes()) {
    detail::SkillLineScanner scanner(prefixes);
    std::set<std::string> seen;
    long long removed = 0;
    bool changed = false;

    if (req.doc.contains("system") && req.doc["system"].is_array()) {
        for (auto& seg : req.doc["system"]) {
            if (!seg.is_object() || seg.value("type", "") != "text") continue;
            std::string text = seg.value("text", "");
            long long r = detail::dedup_text(text, scanner, seen);
            if (r > 0) {
                seg["text"] = text;
                removed += r;
                changed = true;
            }
        }
    } else if (req.doc.contains("system") && req.doc["system"].is_string()) {
        std::string text = req.doc["system"].get<std::string>();
        long long r = detail::dedup_text(text, scanner, seen);
        if (r > 0) {
            req.doc["system"] = text;
            removed += r;
            changed = true;
        }
    }
    if (req.doc.contains("messages") && req.doc["messages"].is_array()) {
        for (auto& m : req.doc["messages"]) {
            if (!m.contains("content") || !m["content"].is_array()) continue;
            for (auto& b : m["content"]) {
                if (!b.is_object() || b.value("type", "") != "text") continue;
                std::string text = b.value("text", "");
                long long r = detail::dedup_text(text, scanner, seen);
                if (r > 0) {
                    b["text"] = text;
                    removed += r;
                    changed = true;
                }
            }
        }
    }
    if (changed) req.reindex();
    return removed;
}

struct StaticSegmentReport {
    enum class Status { fresh, stable, changed };
    int index = 0;
    Status status = Status::fresh;
    std::string hash;
    std::size_t bytes = 0;
};

// Measurement only: system-prompt segments whose hash matched last turn are
// cache-stable candidates. Nothing is stripped.
inline std::vector<StaticSegmentReport> track_static(const Request& req,
                                                     std::vector<std::string>& prior_hashes) {
    std::vector<StaticSegmentReport> out;
    auto segments = system_segments(req.doc);
    for (std::size_t i = 0; i < segments.size(); ++i) {
        StaticSegmentReport row;
        row.index = static_cast<int>(i);
        row.hash = Sha256::hex_digest(segments[i]);
        row.bytes = segments[i].size();
        if (i >= prior_hashes.size())
            row.status = StaticSegmentReport::Status::fresh;
        else if (prior_hashes[i] == row.hash)
            row.status = StaticSegmentReport::Status::stable;
        else
            row.status = StaticSegmentReport::Status::changed;
        out.push_back(std::move(row));
    }
    prior_hashes.clear();
    for (const auto& row : out) prior_hashes.push_back(row.hash);
    return out;
}

} // namespace pichay
