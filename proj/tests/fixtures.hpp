#pragma once

#include "pichay/analytics.hpp"
#include "pichay/wire.hpp"

#include <random>
#include <string>
#include <vector>

namespace fixtures {

using pichay::json;

// ---- message builders (Messages API shapes) ----

inline json text_block(const std::string& text) {
    return json{{"type", "text"}, {"text", text}};
}

inline json tool_use(const std::string& id, const std::string& name, json input) {
    return json{{"type", "tool_use"}, {"id", id}, {"name", name}, {"input", std::move(input)}};
}

inline json tool_result(const std::string& use_id, const std::string& content, bool is_error = false) {
    json b{{"type", "tool_result"}, {"tool_use_id", use_id}, {"content", content}};
    if (is_error) b["is_error"] = true;
    return b;
}

inline json message(const std::string& role, json blocks) {
    return json{{"role", role}, {"content", std::move(blocks)}};
}

inline json user_text(const std::string& text) {
    return message("user", json::array({text_block(text)}));
}

inline json assistant_text(const std::string& text) {
    return message("assistant", json::array({text_block(text)}));
}

inline json request_doc(std::vector<json> messages, json tools = json::array()) {
    json doc{{"model", "claude-test"}, {"max_tokens", 512}};
    if (!tools.empty()) doc["tools"] = std::move(tools);
    doc["messages"] = json::array();
    for (auto& m : messages) doc["messages"].push_back(std::move(m));
    return doc;
}

inline std::string file_body(const std::string& seed, std::size_t bytes) {
    std::string out;
    out.reserve(bytes + 64);
    std::size_t line = 0;
    while (out.size() < bytes) {
        out += "line " + std::to_string(line++) + " of " + seed + ": ";
        out.append(40, 'x');
        out.push_back('\n');
    }
    out.resize(bytes);
    return out;
}

// ---- the 18-tool definition fixture ----
//
// Each full definition is padded so that replacing it with its stub saves
// exactly 3,425 bytes, the per-tool figure the trimming arithmetic targets.

inline json padded_tool_def(const std::string& name, long long stub_to_full_delta = 3425) {
    std::string first_line = "Operate the " + name + " capability on the workspace.";
    std::string description = first_line + "\nDetailed usage notes follow in the schema.";
    json schema{{"type", "object"},
                {"properties",
                 {{"target", {{"type", "string"}, {"description", "primary argument"}}},
                  {"options", {{"type", "object"}, {"description", "extra switches"}}},
                  {"filler", {{"type", "string"}, {"description", ""}}}},
                },
                {"required", json::array({"target"})}};
    json def{{"name", name}, {"description", description}, {"input_schema", schema}};
    json stub{{"name", name},
              {"description", first_line},
              {"input_schema", json{{"type", "object"}, {"properties", json::object()}}}};
    long long want_full = static_cast<long long>(stub.dump().size()) + stub_to_full_delta;
    long long have = static_cast<long long>(def.dump().size());
    std::string pad(static_cast<std::size_t>(std::max(0ll, want_full - have)), 'p');
    def["input_schema"]["properties"]["filler"]["description"] = pad;
    return def;
}

inline json tool_fixture_18() {
    static const char* names[18] = {"Read",     "Write",   "Edit",      "Bash",     "Grep",
                                    "Glob",     "WebFetch", "WebSearch", "TodoWrite", "Agent",
                                    "AskUser",  "TaskStop", "TaskOutput", "EnterPlan", "ExitPlan",
                                    "Skill",    "NotebookEdit", "EnterWorktree"};
    json tools = json::array();
    for (const char* n : names) tools.push_back(padded_tool_def(n));
    return tools;
}

// ---- the triplicated skills fixture ----
//
// 30 entries listed under three prefixes; the duplicate lines total exactly
// 7,453 bytes, the per-request figure the dedup arithmetic targets.

inline std::string skills_fixture_text() {
    static const long long target_duplicate_bytes = 7453;
    std::vector<std::string> names;
    std::vector<std::string> descs;
    for (int i = 0; i < 30; ++i) {
        names.push_back("skill-" + std::to_string(i));
        descs.push_back("runs workspace task number " + std::to_string(i));
    }
    auto entry = [&](const std::string& prefix, int i) {
        return "- " + prefix + ":" + names[i] + ": " + descs[i] + "\n";
    };
    // duplicates are every example-skills and document-skills line
    long long dup = 0;
    for (int i = 0; i < 30; ++i) {
        dup += static_cast<long long>(entry("example-skills:base", i).size());
        dup += static_cast<long long>(entry("document-skills:base", i).size());
    }
    // pad the last description until removing the duplicates saves the
    // target within a byte (each padded char appears in 2 duplicate lines)
    long long missing = target_duplicate_bytes - dup;
    if (missing > 0)
        descs[29] += std::string(static_cast<std::size_t>(missing / 2), 'd');
    std::string text = "Available skills:\n";
    for (int i = 0; i < 30; ++i) text += entry("base", i);
    for (int i = 0; i < 30; ++i) text += entry("example-skills:base", i);
    for (int i = 0; i < 30; ++i) text += entry("document-skills:base", i);
    return text;
}

// ---- synthetic replay suites ----

struct SyntheticSuite {
    pichay::Transcript transcript;
    long long expected_evictions = 0;
    long long expected_paged = 0;
    long long expected_gc = 0;
    long long expected_faults = 0;
};

// Zone thresholds scaled down so kilobyte-sized turns reach involuntary
// pressure; tau and s_min keep their defaults.
inline pichay::PolicyConfig replay_policy() {
    pichay::PolicyConfig cfg;
    cfg.advisory_tokens = 200;
    cfg.involuntary_tokens = 400;
    cfg.aggressive_tokens = 1000000; // stay in involuntary
    return cfg;
}

// One turn = user text, assistant tool_use, user tool_result. `reads`
// gives (path, body) pairs; bash entries produce gc-classified output.
inline void add_read_turn(pichay::Transcript& t, int turn, const std::string& path,
                          const std::string& body) {
    std::string id = "use-" + std::to_string(turn) + "-" + path;
    t.messages.push_back(user_text("turn " + std::to_string(turn) + ": inspect " + path));
    t.messages.push_back(
        message("assistant", json::array({tool_use(id, "Read", json{{"file_path", path}})})));
    t.messages.push_back(message("user", json::array({tool_result(id, body)})));
}

inline void add_bash_turn(pichay::Transcript& t, int turn, const std::string& cmd,
                          const std::string& output) {
    std::string id = "use-" + std::to_string(turn) + "-bash";
    t.messages.push_back(user_text("turn " + std::to_string(turn) + ": run " + cmd));
    t.messages.push_back(
        message("assistant", json::array({tool_use(id, "Bash", json{{"command", cmd}})})));
    t.messages.push_back(message("user", json::array({tool_result(id, output)})));
}

inline void add_text_turn(pichay::Transcript& t, int turn, const std::string& prompt) {
    t.messages.push_back(user_text("turn " + std::to_string(turn) + ": " + prompt));
    t.messages.push_back(assistant_text("understood, continuing with the task"));
}

// Session-A shape: 11 gc evictions, 4 paged evictions, 1 matching re-read.
inline SyntheticSuite session_a_suite() {
    SyntheticSuite suite;
    suite.transcript.source = "session-a";
    int turn = 0;
    std::vector<std::string> bodies;
    for (int i = 0; i < 11; ++i)
        add_bash_turn(suite.transcript, turn++, "make step" + std::to_string(i),
                      fixtures::file_body("bash" + std::to_string(i), 900));
    for (int i = 0; i < 4; ++i) {
        bodies.push_back(fixtures::file_body("read" + std::to_string(i), 1100));
        add_read_turn(suite.transcript, turn++, "/src/f" + std::to_string(i) + ".py", bodies.back());
    }
    // spacer turns age everything past tau
    for (int i = 0; i < 6; ++i) add_text_turn(suite.transcript, turn++, "keep working");
    // the model re-reads f0 with identical content: one fault, then a pin
    add_read_turn(suite.transcript, turn++, "/src/f0.py", bodies[0]);
    for (int i = 0; i < 6; ++i) add_text_turn(suite.transcript, turn++, "wrap up");
    suite.expected_evictions = 15;
    suite.expected_gc = 11;
    suite.expected_paged = 4;
    suite.expected_faults = 1;
    return suite;
}

// Large suite: >= 1000 evictions with exactly `faults` engineered re-reads
// of long-evicted keys.
inline SyntheticSuite large_suite(int files = 1010, int faults = 3) {
    SyntheticSuite suite;
    suite.transcript.source = "large-suite";
    int turn = 0;
    std::mt19937 rng(20260808);
    std::uniform_int_distribution<int> size_dist(600, 1800);
    std::vector<std::string> paths;
    std::vector<std::string> bodies;
    for (int i = 0; i < files; ++i) {
        paths.push_back("/repo/file" + std::to_string(i) + ".py");
        bodies.push_back(fixtures::file_body("f" + std::to_string(i), size_dist(rng)));
        if (i % 5 == 2)
            add_bash_turn(suite.transcript, turn++, "test " + std::to_string(i),
                          fixtures::file_body("b" + std::to_string(i), size_dist(rng)));
        else
            add_read_turn(suite.transcript, turn++, paths.back(), bodies.back());
        // engineered re-reads of keys evicted long ago
        if (faults > 0 && i == files / 2 + faults * 7) {
            for (int f = 0; f < faults; ++f)
                add_read_turn(suite.transcript, turn++, paths[static_cast<std::size_t>(f) * 3],
                              bodies[static_cast<std::size_t>(f) * 3]);
        }
    }
    // closing spacer so the last few large results age out too
    for (int i = 0; i < 6; ++i) add_text_turn(suite.transcript, turn++, "closing");
    return suite;
}

// Independent oracle: quadratic scan over (paged eviction, later matching
// tool_use) pairs. Each eviction record is consumed by the first matching
// use after it and before the next eviction of the same key.
inline long long brute_force_fault_count(const pichay::Transcript& t,
                                         const std::vector<pichay::ReplayEvent>& events) {
    struct Access {
        std::string key;
        std::size_t message_index;
    };
    std::vector<Access> uses;
    pichay::ProducerMap producers;
    for (std::size_t i = 0; i < t.messages.size(); ++i) {
        pichay::collect_producers(t.messages[i], producers);
        auto mv = pichay::view_message(t.messages[i], static_cast<int>(i), producers);
        for (const auto& b : mv.blocks)
            if (b.kind == pichay::BlockKind::tool_use && b.tool_name == "Read")
                uses.push_back({b.args_key, i});
    }
    long long faults = 0;
    for (std::size_t e = 0; e < events.size(); ++e) {
        const auto& ev = events[e];
        if (ev.kind != pichay::ReplayEvent::Kind::eviction) continue;
        if (ev.category != pichay::EvictionCategory::paged) continue;
        // next eviction of the same key bounds the window
        std::size_t window_end = t.messages.size() + 1;
        for (std::size_t later = e + 1; later < events.size(); ++later)
            if (events[later].kind == pichay::ReplayEvent::Kind::eviction &&
                events[later].category == pichay::EvictionCategory::paged &&
                events[later].key == ev.key) {
                window_end = events[later].message_index;
                break;
            }
        for (const auto& use : uses) {
            if (use.key != ev.key.args_key) continue;
            if (use.message_index < ev.message_index) continue;
            if (use.message_index >= window_end) continue;
            ++faults;
            break; // one fault per eviction record at most
        }
    }
    return faults;
}

} // namespace fixtures
