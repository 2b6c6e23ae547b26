#pragma once

#include "pichay/pagestore.hpp"
#include "pichay/protocol.hpp"
#include "pichay/sse.hpp"
#include "pichay/util.hpp"
#include "pichay/wire.hpp"

#include <algorithm>
#include <optional>
#include <string>
#include <vector>

namespace pichay {

// ---- phantom tools: proxy -> model capability offer ----

inline json phantom_tool_defs() {
    json schema{{"type", "object"},
                {"properties",
                 {{"paths", {{"type", "array"}, {"items", {{"type", "string"}}}}}}},
                {"required", json::array({"paths"})}};
    return json::array(
        {json{{"name", std::string(kMemoryReleaseTool)},
              {"description",
               "Signal that the listed file paths are no longer needed; they are "
               "evicted from context immediately."},
              {"input_schema", schema}},
         json{{"name", std::string(kMemoryFaultTool)},
              {"description",
               "Request evicted file content restored from the memory cache without "
               "a file system round trip."},
              {"input_schema", schema}}});
}

// Remove any phantom defs a client echoed back. Returns entries removed.
inline int strip_phantom_defs(Request& req) {
    if (!req.doc.contains("tools") || !req.doc["tools"].is_array()) return 0;
    auto& tools = req.doc["tools"];
    int removed = 0;
    json kept = json::array();
    for (const auto& t : tools) {
        if (t.is_object() && is_phantom_tool_name(t.value("name", "")))
            ++removed;
        else
            kept.push_back(t);
    }
    if (removed > 0) {
        tools = std::move(kept);
        req.reindex();
    }
    return removed;
}

// Append the two phantom defs exactly once. Returns the serialized growth
// of the document.
inline long long inject_phantom_tools(Request& req) {
    strip_phantom_defs(req);
    long long before = static_cast<long long>(req.doc.dump().size());
    if (!req.doc.contains("tools") || !req.doc["tools"].is_array())
        req.doc["tools"] = json::array();
    for (auto& def : phantom_tool_defs()) req.doc["tools"].push_back(def);
    req.reindex();
    return static_cast<long long>(req.doc.dump().size()) - before;
}

struct PhantomCall {
    std::string tool;
    std::vector<std::string> paths;
    std::string tool_use_id;
};

namespace detail {

inline std::vector<std::string> paths_of(const json& input) {
    std::vector<std::string> out;
    if (input.is_object() && input.contains("paths") && input["paths"].is_array())
        for (const auto& p : input["paths"])
            if (p.is_string()) out.push_back(p.get<std::string>());
    return out;
}

// Per-event transform shared by the pure operation and the incremental
// relay. Withholds phantom content_block event runs, renumbers the client's
// block indices, and rewrites stop_reason when the only tool use was ours.
class StreamTransform {
public:
    // Returns events to emit for this input event.
    std::vector<StreamEvent> process(StreamEvent ev) {
        std::vector<StreamEvent> emit;
        if (!ev.parsed) {
            emit.push_back(std::move(ev));
            return emit;
        }
        if (ev.event == "message_start") {
            if (ev.data.contains("message") && ev.data["message"].contains("usage"))
                read_usage(ev.data["message"]["usage"]);
            emit.push_back(std::move(ev));
            return emit;
        }
        if (ev.event == "content_block_start") {
            int idx = ev.data.value("index", 0);
            const json& cb = ev.data.contains("content_block") ? ev.data["content_block"] : json::object();
            std::string type = cb.value("type", "");
            if (type == "tool_use" && is_phantom_tool_name(cb.value("name", ""))) {
                phantom_seen_ = true;
                PendingCall pc;
                pc.call.tool = cb.value("name", "");
                pc.call.tool_use_id = cb.value("id", "");
                pc.call.paths = paths_of(cb.contains("input") ? cb["input"] : json::object());
                pending_[idx] = std::move(pc);
                return emit; // withheld
            }
            if (type == "tool_use") real_tool_use_seen_ = true;
            int client_idx = next_client_index_++;
            remap_[idx] = client_idx;
            if (client_idx != idx) {
                ev.data["index"] = client_idx;
                ev.dirty = true;
            }
            emit.push_back(std::move(ev));
            return emit;
        }
        if (ev.event == "content_block_delta" || ev.event == "content_block_stop") {
            int idx = ev.data.value("index", 0);
            if (auto it = pending_.find(idx); it != pending_.end()) {
                if (ev.event == "content_block_delta") {
                    const json& d = ev.data.contains("delta") ? ev.data["delta"] : json::object();
                    if (d.value("type", "") == "input_json_delta")
                        it->second.partial_json += d.value("partial_json", "");
                } else {
                    if (!it->second.partial_json.empty()) {
                        json parsed = json::parse(it->second.partial_json, nullptr, false);
                        if (!parsed.is_discarded()) it->second.call.paths = paths_of(parsed);
                    }
                    calls.push_back(std::move(it->second.call));
                    pending_.erase(it);
                }
                return emit; // withheld
            }
            if (auto it = remap_.find(idx); it != remap_.end() && it->second != idx) {
                ev.data["index"] = it->second;
                ev.dirty = true;
            }
            emit.push_back(std::move(ev));
            return emit;
        }
        if (ev.event == "message_delta") {
            if (ev.data.contains("usage")) read_usage(ev.data["usage"]);
            if (phantom_seen_ && !real_tool_use_seen_ && ev.data.contains("delta") &&
                ev.data["delta"].value("stop_reason", "") == "tool_use") {
                ev.data["delta"]["stop_reason"] = "end_turn";
                ev.dirty = true;
            }
            emit.push_back(std::move(ev));
            return emit;
        }
        emit.push_back(std::move(ev));
        return emit;
    }

    std::vector<PhantomCall> calls;
    std::optional<long long> usage_tokens;

private:
    void read_usage(const json& usage) {
        long long total = 0;
        bool any = false;
        for (const char* field :
             {"input_tokens", "cache_creation_input_tokens", "cache_read_input_tokens"}) {
            if (usage.contains(field) && usage[field].is_number()) {
                total += usage[field].get<long long>();
                any = true;
            }
        }
        if (any) usage_tokens = total;
    }

    struct PendingCall {
        PhantomCall call;
        std::string partial_json;
    };
    std::map<int, PendingCall> pending_;
    std::map<int, int> remap_;
    int next_client_index_ = 0;
    bool phantom_seen_ = false;
    bool real_tool_use_seen_ = false;
};

} // namespace detail

struct InterceptResult {
    std::vector<StreamEvent> client_events;
    std::vector<PhantomCall> calls;
    std::optional<long long> usage_tokens;
};

// Pure form over a complete event sequence. A malformed stream (any event
// whose data line is not valid JSON) passes through untouched with nothing
// extracted (fail open).
inline InterceptResult intercept_stream(const std::vector<StreamEvent>& events) {
    InterceptResult result;
    for (const auto& ev : events) {
        bool has_data = ev.raw.find("data:") != std::string::npos;
        if (has_data && !ev.parsed) {
            result.client_events = events;
            result.calls.clear();
            return result;
        }
    }
    detail::StreamTransform transform;
    for (const auto& ev : events)
        for (auto& out : transform.process(ev)) result.client_events.push_back(std::move(out));
    result.calls = std::move(transform.calls);
    result.usage_tokens = transform.usage_tokens;
    return result;
}

// Non-streamed form: strip phantom tool_use blocks from the response
// message content, returning the extracted calls.
inline std::vector<PhantomCall> intercept_response_json(json& response,
                                                        std::optional<long long>* usage_out = nullptr) {
    std::vector<PhantomCall> calls;
    if (usage_out && response.contains("usage")) {
        long long total = 0;
        for (const char* field :
             {"input_tokens", "cache_creation_input_tokens", "cache_read_input_tokens"})
            if (response["usage"].contains(field) && response["usage"][field].is_number())
                total += response["usage"][field].get<long long>();
        *usage_out = total;
    }
    if (!response.contains("content") || !response["content"].is_array()) return calls;
    json kept = json::array();
    bool real_tool_use = false;
    for (const auto& b : response["content"]) {
        if (b.is_object() && b.value("type", "") == "tool_use" &&
            is_phantom_tool_name(b.value("name", ""))) {
            PhantomCall call;
            call.tool = b.value("name", "");
            call.tool_use_id = b.value("id", "");
            call.paths = detail::paths_of(b.contains("input") ? b["input"] : json::object());
            calls.push_back(std::move(call));
            continue;
        }
        if (b.is_object() && b.value("type", "") == "tool_use") real_tool_use = true;
        kept.push_back(b);
    }
    if (!calls.empty()) {
        response["content"] = std::move(kept);
        if (!real_tool_use && response.value("stop_reason", "") == "tool_use")
            response["stop_reason"] = "end_turn";
    }
    return calls;
}

// ---- cleanup tags: model -> proxy directives ----

struct Directive {
    enum class Kind { drop, summarize, anchor, collapse };
    Kind kind = Kind::drop;
    std::string block_id;
    int start_turn = 0;
    int end_turn = 0;
    std::string text;
};

namespace detail {

inline std::optional<std::string> quoted_tail(std::string_view rest) {
    // expects: optional space, then "..." to end of line
    while (rest.starts_with(" ")) rest.remove_prefix(1);
    if (rest.size() < 2 || rest.front() != '"' || rest.back() != '"') return std::nullopt;
    return std::string(rest.substr(1, rest.size() - 2));
}

inline std::optional<Directive> parse_directive_line(std::string_view line) {
    auto trim = [](std::string_view s) {
        while (!s.empty() && (s.front() == ' ' || s.front() == '\t')) s.remove_prefix(1);
        while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) s.remove_suffix(1);
        return s;
    };
    line = trim(line);
    Directive d;
    if (line.starts_with("drop: block:")) {
        d.kind = Directive::Kind::drop;
        d.block_id = std::string(trim(line.substr(12)));
        if (d.block_id.empty() || d.block_id.find(' ') != std::string::npos) return std::nullopt;
        return d;
    }
    if (line.starts_with("anchor: block:")) {
        d.kind = Directive::Kind::anchor;
        d.block_id = std::string(trim(line.substr(14)));
        if (d.block_id.empty() || d.block_id.find(' ') != std::string::npos) return std::nullopt;
        return d;
    }
    if (line.starts_with("summarize: block:")) {
        d.kind = Directive::Kind::summarize;
        std::string_view rest = line.substr(17);
        auto space = rest.find(' ');
        if (space == std::string_view::npos) return std::nullopt;
        d.block_id = std::string(rest.substr(0, space));
        auto text = quoted_tail(rest.substr(space));
        if (d.block_id.empty() || !text) return std::nullopt;
        d.text = *text;
        return d;
    }
    if (line.starts_with("collapse: turns ")) {
        d.kind = Directive::Kind::collapse;
        std::string_view rest = line.substr(16);
        auto space = rest.find(' ');
        std::string_view range = space == std::string_view::npos ? rest : rest.substr(0, space);
        auto dash = range.find('-');
        if (dash == std::string_view::npos) return std::nullopt;
        try {
            d.start_turn = std::stoi(std::string(range.substr(0, dash)));
            d.end_turn = std::stoi(std::string(range.substr(dash + 1)));
        } catch (...) {
            return std::nullopt;
        }
        if (d.start_turn < 0 || d.start_turn > d.end_turn) return std::nullopt;
        if (space == std::string_view::npos) return std::nullopt;
        auto text = quoted_tail(rest.substr(space));
        if (!text) return std::nullopt;
        d.text = *text;
        return d;
    }
    return std::nullopt;
}

inline bool looks_like_directive(std::string_view line) {
    for (std::string_view head : {"drop:", "summarize:", "anchor:", "collapse:"})
        if (line.find(head) == 0) return true;
    return false;
}

} // namespace detail

// One directive per line, anywhere in the text. Malformed lines are ignored
// and reported through `malformed` when given.
inline std::vector<Directive> parse_cleanup_tags(std::string_view text,
                                                 std::vector<std::string>* malformed = nullptr) {
    std::vector<Directive> out;
    std::size_t pos = 0;
    while (pos <= text.size()) {
        std::size_t nl = text.find('\n', pos);
        std::string_view line = text.substr(pos, (nl == std::string_view::npos ? text.size() : nl) - pos);
        std::string_view stripped = line;
        while (stripped.starts_with(" ") || stripped.starts_with("\t")) stripped.remove_prefix(1);
        if (auto d = detail::parse_directive_line(line)) {
            out.push_back(std::move(*d));
        } else if (detail::looks_like_directive(stripped) && malformed) {
            malformed->push_back(std::string(stripped));
        }
        if (nl == std::string_view::npos) break;
        pos = nl + 1;
    }
    return out;
}

struct MutationReport {
    int applied = 0;
    int skipped = 0;
    long long bytes_delta = 0;
    std::vector<std::string> notes; // one per directive, for the decision log
};

// All directives from one assistant message apply in a single batched pass
// (one prefix-invalidation event). Validation happens up front so a bad
// directive is skipped without tearing a half-applied batch.
inline MutationReport apply_directives(SessionState& state, Request& req,
                                       const std::vector<Directive>& directives,
                                       const PolicyConfig& cfg) {
    MutationReport report;
    struct Action {
        const Directive* d;
        std::vector<std::size_t> targets; // block indices in state.blocks
    };
    std::vector<Action> plan;

    std::unordered_map<std::string, std::size_t> body_by_id; // block_id -> message body bytes
    std::unordered_map<std::string, const BlockView*> view_by_id;
    for (const auto& m : req.messages)
        for (const auto& b : m.blocks) {
            std::string id = block_id_for(Sha256::hex_digest(b.body), b.turn);
            view_by_id.emplace(id, &b);
            body_by_id.emplace(id, b.body.size());
        }

    for (const auto& d : directives) {
        Action act{&d, {}};
        switch (d.kind) {
            case Directive::Kind::drop:
            case Directive::Kind::summarize:
            case Directive::Kind::anchor: {
                BlockMeta* meta = state.find_block(d.block_id);
                if (!meta) {
                    report.skipped++;
                    report.notes.push_back("skipped: unknown block " + d.block_id);
                    continue;
                }
                if (d.kind != Directive::Kind::anchor && meta->kind == BlockKind::tool_use) {
                    // removing a tool_use would orphan its result upstream
                    report.skipped++;
                    report.notes.push_back("skipped: block " + d.block_id + " is a tool_use");
                    continue;
                }
                if (d.kind != Directive::Kind::anchor && meta->status != BlockStatus::resident &&
                    meta->status != BlockStatus::pinned) {
                    report.skipped++;
                    report.notes.push_back("skipped: block " + d.block_id + " already " +
                                           std::string(to_string(meta->status)));
                    continue;
                }
                if (d.kind == Directive::Kind::drop && meta->status == BlockStatus::pinned) {
                    report.skipped++;
                    report.notes.push_back("skipped: block " + d.block_id + " is pinned");
                    continue;
                }
                act.targets.push_back(state.block_lookup[d.block_id]);
                break;
            }
            case Directive::Kind::collapse: {
                if (d.end_turn > req.max_user_turn) {
                    report.skipped++;
                    report.notes.push_back("skipped: collapse range beyond turn " +
                                           std::to_string(req.max_user_turn));
                    continue;
                }
                for (std::size_t i = 0; i < state.blocks.size(); ++i) {
                    const BlockMeta& b = state.blocks[i];
                    if (b.turn >= d.start_turn && b.turn <= d.end_turn &&
                        b.status != BlockStatus::collapsed)
                        act.targets.push_back(i);
                }
                if (act.targets.empty()) {
                    report.skipped++;
                    report.notes.push_back("skipped: collapse range matched no blocks");
                    continue;
                }
                break;
            }
        }
        plan.push_back(std::move(act));
    }

    for (const auto& act : plan) {
        const Directive& d = *act.d;
        switch (d.kind) {
            case Directive::Kind::drop: {
                std::size_t idx = act.targets.front();
                BlockMeta& meta = state.blocks[idx];
                std::string body;
                if (auto it = view_by_id.find(meta.block_id); it != view_by_id.end())
                    body = it->second->body;
                EvictionCategory cat = classify(meta.tool_name, cfg) == ToolClass::pageable &&
                                               meta.fault_key
                                           ? EvictionCategory::paged
                                           : EvictionCategory::gc;
                const EvictionRecord& rec = record_eviction(state, idx, cat, std::move(body));
                report.bytes_delta += static_cast<long long>(render_handle(rec).size()) -
                                      static_cast<long long>(rec.size_bytes);
                report.applied++;
                report.notes.push_back("drop " + d.block_id);
                break;
            }
            case Directive::Kind::summarize: {
                BlockMeta& meta = state.blocks[act.targets.front()];
                meta.status = BlockStatus::summarized;
                meta.summary = d.text;
                report.bytes_delta += static_cast<long long>(d.text.size()) -
                                      static_cast<long long>(meta.size_bytes);
                report.applied++;
                report.notes.push_back("summarize " + d.block_id);
                break;
            }
            case Directive::Kind::anchor: {
                state.blocks[act.targets.front()].anchored = true;
                report.applied++;
                report.notes.push_back("anchor " + d.block_id);
                break;
            }
            case Directive::Kind::collapse: {
                long long removed = 0;
                for (std::size_t idx : act.targets) {
                    BlockMeta& meta = state.blocks[idx];
                    removed += static_cast<long long>(meta.size_bytes);
                    meta.status = BlockStatus::collapsed;
                    meta.summary = d.text;
                }
                report.bytes_delta += static_cast<long long>(d.text.size()) - removed;
                report.applied++;
                report.notes.push_back("collapse turns " + std::to_string(d.start_turn) + "-" +
                                       std::to_string(d.end_turn) + " (" +
                                       std::to_string(act.targets.size()) + " blocks)");
                break;
            }
        }
    }
    return report;
}

// ---- phantom execution and pending injection ----

struct PhantomOutcome {
    int released = 0;
    int restored = 0;
    int misses = 0;
    std::vector<std::string> notes;
};

inline PhantomOutcome execute_phantom(SessionState& state, const PhantomCall& call,
                                      int current_max_turn) {
    PhantomOutcome out;
    if (call.tool == kMemoryReleaseTool) {
        for (const auto& path : call.paths) {
            bool matched = false;
            for (auto& b : state.blocks) {
                if (b.fault_key && b.fault_key->args_key == path &&
                    (b.status == BlockStatus::resident)) {
                    b.release_requested = true;
                    matched = true;
                }
            }
            out.released += matched ? 1 : 0;
            out.notes.push_back(matched ? "release " + path : "release miss " + path);
        }
        return out;
    }
    if (call.tool == kMemoryFaultTool) {
        std::string body;
        for (const auto& path : call.paths) {
            const EvictionRecord* hit = nullptr;
            for (auto it = state.evictions.rbegin(); it != state.evictions.rend(); ++it)
                if (it->category == EvictionCategory::paged && it->fault_key.args_key == path &&
                    it->cached_body) {
                    hit = &*it;
                    break;
                }
            if (!body.empty()) body += "\n";
            if (hit) {
                body += "=== " + path + " ===\n" + *hit->cached_body;
                out.restored++;
                out.notes.push_back("restore " + path);
            } else {
                body += "content not cached; use Read " + path;
                out.misses++;
                out.notes.push_back("cache miss " + path);
            }
        }
        PendingPhantomResult pending;
        pending.tool_use_id = std::string(kPhantomIdPrefix) + std::to_string(++state.phantom_counter);
        pending.tool_name = std::string(kMemoryFaultTool);
        pending.args = json{{"paths", call.paths}};
        pending.result_body = std::move(body);
        pending.anchor_turn = current_max_turn;
        state.pending_phantom_results.push_back(std::move(pending));
        return out;
    }
    out.notes.push_back("unknown phantom tool " + call.tool);
    return out;
}

// Re-add pending memory_fault pairs to the forwarded history: the tool_use
// goes back into the assistant message that produced it, the tool_result to
// the head of the user message that follows. Returns bytes added.
inline long long inject_pending_phantom_results(Request& req, SessionState& state,
                                                const PolicyConfig& cfg) {
    if (state.pending_phantom_results.empty()) return 0;
    long long before = static_cast<long long>(req.doc.dump().size());
    bool changed = false;
    auto& msgs = req.doc["messages"];
    std::vector<PendingPhantomResult> still_pending;
    for (auto& pending : state.pending_phantom_results) {
        // anchor: first assistant message belonging to the pending turn
        int anchor_mi = -1;
        for (std::size_t mi = 0; mi < req.messages.size(); ++mi) {
            const auto& mv = req.messages[mi];
            if (mv.role != Role::assistant || mv.blocks.empty()) continue;
            if (mv.blocks.front().turn == pending.anchor_turn) {
                anchor_mi = static_cast<int>(mi);
                break;
            }
        }
        int result_mi = -1;
        if (anchor_mi >= 0) {
            for (std::size_t mi = anchor_mi + 1; mi < req.messages.size(); ++mi)
                if (req.messages[mi].role == Role::user) {
                    result_mi = static_cast<int>(mi);
                    break;
                }
        }
        if (anchor_mi < 0 || result_mi < 0) {
            // anchor collapsed away or not yet answered; drop silently
            continue;
        }
        json use_block{{"type", "tool_use"},
                       {"id", pending.tool_use_id},
                       {"name", pending.tool_name},
                       {"input", pending.args}};
        json result_block{{"type", "tool_result"},
                          {"tool_use_id", pending.tool_use_id},
                          {"content", pending.result_body}};
        bool already = false;
        for (const auto& b : req.messages[anchor_mi].blocks)
            if (b.tool_use_id == pending.tool_use_id && b.kind == BlockKind::tool_use) already = true;
        if (!already) {
            msgs[anchor_mi]["content"].push_back(use_block);
            changed = true;
        }
        bool result_present = false;
        for (const auto& b : req.messages[result_mi].blocks)
            if (b.tool_use_id == pending.tool_use_id && b.kind == BlockKind::tool_result)
                result_present = true;
        if (!result_present) {
            auto& content = msgs[result_mi]["content"];
            if (!content.is_array()) {
                json arr = json::array();
                if (content.is_string())
                    arr.push_back(json{{"type", "text"}, {"text", content.get<std::string>()}});
                content = std::move(arr);
            }
            content.insert(content.begin(), result_block);
            changed = true;
        }
        still_pending.push_back(pending);
    }
    state.pending_phantom_results = std::move(still_pending);
    if (!changed) return 0;
    req.reindex();
    register_blocks(state, req, cfg);
    return static_cast<long long>(req.doc.dump().size()) - before;
}

// ---- advisory injection ----

inline int strip_advisories(Request& req) {
    if (!req.doc.contains("messages") || !req.doc["messages"].is_array()) return 0;
    int removed = 0;
    for (auto& m : req.doc["messages"]) {
        if (!m.contains("content") || !m["content"].is_array()) continue;
        json kept = json::array();
        for (const auto& b : m["content"]) {
            if (b.is_object() && b.value("type", "") == "text" && is_advisory_text(b.value("text", "")))
                ++removed;
            else
                kept.push_back(b);
        }
        if (kept.size() != m["content"].size()) m["content"] = std::move(kept);
    }
    if (removed > 0) req.reindex();
    return removed;
}

// Fill percentage, the five largest resident blocks, and the cleanup
// grammar. Appended to the newest user message in Advisory zone and above.
inline std::string render_advisory(const SessionState& state, PressureZone zone,
                                   long long estimated_tokens, const PolicyConfig& cfg,
                                   bool phantom_enabled = true) {
    if (zone == PressureZone::normal) return {};
    std::vector<const BlockMeta*> resident;
    for (const auto& b : state.blocks)
        if (b.status == BlockStatus::resident || b.status == BlockStatus::pinned)
            if (b.kind == BlockKind::tool_result) resident.push_back(&b);
    std::stable_sort(resident.begin(), resident.end(),
                     [](const BlockMeta* a, const BlockMeta* b) { return a->size_bytes > b->size_bytes; });
    if (resident.size() > 5) resident.resize(5);

    double fill = cfg.context_window_tokens > 0
                      ? 100.0 * static_cast<double>(estimated_tokens) /
                            static_cast<double>(cfg.context_window_tokens)
                      : 0.0;
    char fill_buf[32];
    std::snprintf(fill_buf, sizeof(fill_buf), "%.1f", fill);

    std::string out(kAdvisoryOpen);
    out += "\nContext fill: ";
    out += fill_buf;
    out += "% (" + format_thousands(static_cast<unsigned long long>(estimated_tokens)) + " / " +
           format_thousands(static_cast<unsigned long long>(cfg.context_window_tokens)) + " tokens).\n";
    out += "Largest resident blocks:\n";
    int rank = 1;
    for (const auto* b : resident) {
        out += "  " + std::to_string(rank++) + ". block:" + b->block_id + " " +
               (b->tool_name.empty() ? std::string("text") : b->tool_name) + " " +
               format_thousands(b->size_bytes) + " bytes\n";
    }
    if (resident.empty()) out += "  (none)\n";
    out += "Cleanup operations (one per line in your reply):\n";
    out += "  drop: block:<ID>\n";
    out += "  anchor: block:<ID>\n";
    out += "  summarize: block:<ID> \"<text>\"\n";
    out += "  collapse: turns <N>-<M> \"<text>\"\n";
    if (phantom_enabled) out += "Phantom tools: memory_release(paths), memory_fault(paths).\n";
    out += kAdvisoryClose;
    return out;
}

// Exactly one advisory per forwarded request. Returns the serialized growth
// of the document, so the bytes-saved accounting can exclude it exactly.
inline long long append_advisory(Request& req, const std::string& advisory) {
    if (advisory.empty()) return 0;
    if (!req.doc.contains("messages") || !req.doc["messages"].is_array()) return 0;
    auto& msgs = req.doc["messages"];
    for (auto it = msgs.rbegin(); it != msgs.rend(); ++it) {
        if ((*it).value("role", "") != "user") continue;
        long long before = static_cast<long long>(req.doc.dump().size());
        auto& content = (*it)["content"];
        if (content.is_string()) {
            json arr = json::array();
            arr.push_back(json{{"type", "text"}, {"text", content.get<std::string>()}});
            content = std::move(arr);
        }
        if (!content.is_array()) content = json::array();
        content.push_back(json{{"type", "text"}, {"text", advisory}});
        req.reindex();
        return static_cast<long long>(req.doc.dump().size()) - before;
    }
    return 0;
}

} // namespace pichay
