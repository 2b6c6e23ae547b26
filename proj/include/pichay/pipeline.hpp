#pragma once

#include "pichay/analytics.hpp"
#include "pichay/cooperative.hpp"
#include "pichay/decision_log.hpp"
#include "pichay/pagestore.hpp"
#include "pichay/policy.hpp"
#include "pichay/trimming.hpp"
#include "pichay/wire.hpp"

#include <functional>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace pichay {

enum class ProxyMode { observe, trim, compact };

inline std::string_view to_string(ProxyMode m) {
    switch (m) {
        case ProxyMode::observe: return "observe";
        case ProxyMode::trim: return "trim";
        default: return "compact";
    }
}

inline std::optional<ProxyMode> proxy_mode_from(std::string_view s) {
    if (s == "observe") return ProxyMode::observe;
    if (s == "trim") return ProxyMode::trim;
    if (s == "compact") return ProxyMode::compact;
    return std::nullopt;
}

struct ProxyConfig {
    std::string listen_address = "127.0.0.1:8377";
    std::string upstream_base_url;
    ProxyMode mode = ProxyMode::observe;
    std::string checkpoint_dir = "checkpoints";
    std::string log_path;
    PolicyConfig policy;
    bool phantom_enabled = true;
    std::string session_header = "x-pichay-session";
    // Test hook: called as each pipeline stage begins; a throw exercises the
    // fail-open path.
    std::function<void(std::string_view)> stage_hook;
};

// Stable identity per logical session: the client-supplied header when
// present, otherwise a hash of the first user message and the system prompt.
inline std::string derive_session_id(std::string_view raw, std::string_view header_value) {
    if (!header_value.empty()) return std::string(header_value);
    try {
        Request req = parse_request(raw);
        std::string first_user;
        for (const auto& m : req.messages) {
            if (m.role != Role::user) continue;
            for (const auto& b : m.blocks) first_user += b.body;
            break;
        }
        std::string sys;
        for (const auto& seg : system_segments(req.doc)) sys += seg;
        return Sha256::hex_digest(first_user + '\x1f' + Sha256::hex_digest(sys)).substr(0, 16);
    } catch (...) {
        return "unparsed-" + Sha256::hex_digest(std::string(raw)).substr(0, 12);
    }
}

struct PipelineResult {
    bool fail_open = false;
    std::string forwarded_body;
    bool stream = false;
    long long received_bytes = 0;
    long long forwarded_bytes = 0;
    long long advisory_bytes = 0;
    long long phantom_def_bytes = 0;
    long long injected_bytes = 0;
    int evictions = 0;
    int faults = 0;
    std::string zone = "normal";
    int turn = 0;
    std::vector<DecisionLogRecord> records;
};

namespace detail {

inline DecisionLogRecord make_record(const SessionState& state, int turn, std::string_view zone,
                                     std::string_view action, std::string subject,
                                     long long bytes_delta, std::string detail) {
    DecisionLogRecord r;
    r.timestamp = iso8601_utc_now();
    r.session_id = state.session_id;
    r.turn = turn;
    r.zone = std::string(zone);
    r.action = std::string(action);
    r.subject = std::move(subject);
    r.bytes_delta = bytes_delta;
    r.detail = std::move(detail);
    return r;
}

// Rewrite the forwarded document from block statuses: evicted bodies become
// retrieval handles, summarized bodies become the model-authored text, and
// collapsed turn ranges become one synthetic summary block.
inline void apply_block_mutations(Request& req, SessionState& state) {
    std::unordered_map<std::string, const EvictionRecord*> record_by_block;
    for (const auto& rec : state.evictions) record_by_block[rec.block_id] = &rec;

    json new_msgs = json::array();
    bool in_collapse = false;
    std::string active_summary;
    bool changed = false;

    for (std::size_t mi = 0; mi < req.messages.size(); ++mi) {
        const MessageView& mv = req.messages[mi];
        json msg = req.doc["messages"][mi];

        // Whole-message collapse: every block in a marked message shares the
        // message's turn, so ranges land on message boundaries.
        bool message_collapsed = !mv.blocks.empty();
        std::string summary;
        for (const auto& b : mv.blocks) {
            std::string id = block_id_for(Sha256::hex_digest(b.body), b.turn);
            const BlockMeta* meta = state.find_block(id);
            if (!meta || meta->status != BlockStatus::collapsed) {
                message_collapsed = false;
                break;
            }
            summary = meta->summary.value_or("");
        }
        if (message_collapsed) {
            if (!in_collapse || summary != active_summary) {
                new_msgs.push_back(json{{"role", "user"},
                                        {"content", json::array({json{{"type", "text"}, {"text", summary}}})}});
                in_collapse = true;
                active_summary = summary;
            }
            changed = true;
            continue;
        }
        in_collapse = false;

        if (msg.contains("content") && msg["content"].is_array()) {
            std::size_t bi = 0;
            for (auto& raw_block : msg["content"]) {
                if (bi >= mv.blocks.size()) break;
                const BlockView& view = mv.blocks[bi++];
                std::string id = block_id_for(Sha256::hex_digest(view.body), view.turn);
                const BlockMeta* meta = state.find_block(id);
                if (!meta) continue;
                std::string replacement;
                if (meta->status == BlockStatus::evicted) {
                    auto it = record_by_block.find(id);
                    replacement = it != record_by_block.end()
                                      ? render_handle(*it->second)
                                      : std::string("[Paged out: ") + (meta->tool_name.empty() ? "tool" : meta->tool_name) +
                                            " content (" + format_thousands(meta->size_bytes) + " bytes).]";
                } else if (meta->status == BlockStatus::summarized ||
                           meta->status == BlockStatus::collapsed) {
                    replacement = meta->summary.value_or("");
                } else {
                    continue;
                }
                if (view.kind == BlockKind::tool_result)
                    raw_block["content"] = replacement;
                else if (view.kind == BlockKind::text)
                    raw_block["text"] = replacement;
                changed = true;
            }
        }
        new_msgs.push_back(std::move(msg));
    }
    if (changed) {
        req.doc["messages"] = std::move(new_msgs);
        req.reindex();
    }
}

} // namespace detail

// The full interposition pipeline for one request. Any internal failure
// fails open: the original bytes are forwarded untouched and the error is
// logged. The caller owns forwarding and response interception.
inline PipelineResult process_request(SessionState& state, std::string_view raw,
                                      const ProxyConfig& cfg) {
    PipelineResult result;
    result.received_bytes = static_cast<long long>(raw.size());
    auto stage = [&](std::string_view name) {
        if (cfg.stage_hook) cfg.stage_hook(name);
    };

    if (cfg.mode == ProxyMode::observe) {
        result.forwarded_body = std::string(raw);
        result.forwarded_bytes = result.received_bytes;
        try {
            Request req = parse_request(raw);
            result.stream = req.stream;
        } catch (...) {
        }
        result.records.push_back(detail::make_record(state, 0, "normal", "forward", "request", 0,
                                                     "observe mode"));
        return result;
    }

    try {
        stage("parse");
        Request req = parse_request(raw);
        result.stream = req.stream;
        state.generation++;

        stage("strip_echoes");
        strip_advisories(req);
        strip_phantom_defs(req);

        stage("index");
        index_turns(req);
        const int turn = std::max(req.max_user_turn, 0);
        result.turn = turn;

        stage("register");
        RegisterResult reg = register_blocks(state, req, cfg.policy);

        stage("note_tool_use");
        note_tool_use(state.stub, req);

        stage("fault_detect");
        for (const auto& ev : resolve_pending_reads(state, turn, false)) {
            std::string key_text = ev.key.tool_name + " " + ev.key.args_key;
            if (ev.outcome.fault) {
                result.faults++;
                result.records.push_back(detail::make_record(
                    state, turn, result.zone, "fault", key_text, 0,
                    "eviction record " + (ev.outcome.record ? ev.outcome.record->block_id : "?")));
                if (ev.outcome.pinned_now)
                    result.records.push_back(detail::make_record(state, turn, result.zone, "pin",
                                                                 key_text, 0,
                                                                 "re-read matched evicted hash"));
            }
            if (ev.outcome.unpinned)
                result.records.push_back(detail::make_record(state, turn, result.zone, "unpin",
                                                             key_text, 0, "content edited"));
        }

        const bool compact = cfg.mode == ProxyMode::compact;

        stage("cleanup_tags");
        std::vector<Directive> directives;
        std::vector<std::string> malformed;
        if (compact) {
            std::set<std::string> fresh_ids;
            for (std::size_t idx : reg.new_indices) fresh_ids.insert(state.blocks[idx].block_id);
            for (auto it = req.messages.rbegin(); it != req.messages.rend(); ++it) {
                if (it->role != Role::assistant) continue;
                for (const auto& b : it->blocks) {
                    if (b.kind != BlockKind::text) continue;
                    std::string id = block_id_for(Sha256::hex_digest(b.body), b.turn);
                    if (!fresh_ids.count(id)) continue; // already processed last request
                    auto found = parse_cleanup_tags(b.body, &malformed);
                    directives.insert(directives.end(), found.begin(), found.end());
                }
                break; // newest assistant message only
            }
        }

        stage("directives");
        if (!directives.empty() || !malformed.empty()) {
            MutationReport mutation = apply_directives(state, req, directives, cfg.policy);
            for (const auto& note : mutation.notes)
                result.records.push_back(detail::make_record(state, turn, result.zone, "directive",
                                                             "cleanup", mutation.bytes_delta, note));
            for (const auto& bad : malformed)
                result.records.push_back(detail::make_record(state, turn, result.zone, "directive",
                                                             "cleanup", 0, "malformed: " + bad));
        }

        stage("phantom_inject");
        if (compact && cfg.phantom_enabled) {
            result.injected_bytes = inject_pending_phantom_results(req, state, cfg.policy);
            if (result.injected_bytes > 0)
                result.records.push_back(detail::make_record(state, turn, result.zone, "phantom",
                                                             "memory_fault", result.injected_bytes,
                                                             "pending results re-injected"));
        }

        stage("zone");
        long long est_tokens = state.last_usage_tokens.value_or(
            estimate_tokens(result.received_bytes, cfg.policy));
        PressureZone zone = compute_zone(est_tokens, cfg.policy);
        result.zone = std::string(to_string(zone));

        stage("advisory");
        if (compact) {
            std::string advisory =
                render_advisory(state, zone, est_tokens, cfg.policy, cfg.phantom_enabled);
            if (!advisory.empty()) {
                result.advisory_bytes = append_advisory(req, advisory);
                result.records.push_back(detail::make_record(state, turn, result.zone, "advisory",
                                                             "pressure", result.advisory_bytes,
                                                             "zone " + result.zone));
            }
        }

        stage("select");
        std::vector<EvictionChoice> choices;
        if (compact)
            choices = select_evictions(state.blocks, state.fault_history, zone, turn, cfg.policy);

        stage("evict");
        for (const auto& choice : choices) {
            BlockMeta& meta = state.blocks[choice.block_index];
            if (meta.status == BlockStatus::pinned) {
                meta.status = BlockStatus::resident;
                if (auto* entry = meta.fault_key ? state.find_fault_entry(*meta.fault_key) : nullptr)
                    entry->pinned = false;
                result.records.push_back(detail::make_record(
                    state, turn, result.zone, "unpin",
                    meta.fault_key ? meta.fault_key->tool_name + " " + meta.fault_key->args_key
                                   : meta.block_id,
                    0, "pin decayed"));
            }
            std::string body = take_resident_body(state, meta.block_id);
            const EvictionRecord& rec =
                record_eviction(state, choice.block_index, choice.category, std::move(body));
            long long delta = static_cast<long long>(render_handle(rec).size()) -
                              static_cast<long long>(rec.size_bytes);
            result.evictions++;
            result.records.push_back(detail::make_record(
                state, turn, result.zone, "evict", rec.block_id, delta,
                std::string(choice.category == EvictionCategory::paged ? "paged " : "gc ") +
                    rec.fault_key.tool_name +
                    (rec.fault_key.args_key.empty() ? "" : " " + rec.fault_key.args_key)));
        }

        stage("apply_mutations");
        if (compact) detail::apply_block_mutations(req, state);

        stage("stub");
        if (cfg.mode != ProxyMode::observe) {
            long long saved = stub_tools(req, state.stub);
            if (saved > 0)
                result.records.push_back(detail::make_record(
                    state, turn, result.zone, "stub", "tools", -saved,
                    std::to_string(state.stub.full_defs.size() - state.stub.used_tools.size()) +
                        " defs stubbed"));
        }

        stage("dedup");
        if (cfg.mode != ProxyMode::observe) {
            long long saved = dedup_skills(req);
            if (saved > 0)
                result.records.push_back(detail::make_record(state, turn, result.zone, "dedup",
                                                             "skills", -saved, "duplicates removed"));
        }

        stage("track_static");
        auto static_rows = track_static(req, state.static_segment_hashes);
        int stable = 0;
        for (const auto& row : static_rows)
            if (row.status == StaticSegmentReport::Status::stable) ++stable;

        stage("phantom_defs");
        if (compact && cfg.phantom_enabled) result.phantom_def_bytes = inject_phantom_tools(req);

        stage("serialize");
        result.forwarded_body = serialize_request(req);
        result.forwarded_bytes = static_cast<long long>(result.forwarded_body.size());
        result.records.push_back(detail::make_record(
            state, turn, result.zone, "forward", "request",
            result.forwarded_bytes - result.received_bytes,
            "received=" + std::to_string(result.received_bytes) +
                " forwarded=" + std::to_string(result.forwarded_bytes) +
                " advisory=" + std::to_string(result.advisory_bytes) +
                " phantom_defs=" + std::to_string(result.phantom_def_bytes) +
                " injected=" + std::to_string(result.injected_bytes) + " static_stable=" +
                std::to_string(stable) + "/" + std::to_string(static_rows.size())));
        return result;
    } catch (const std::exception& e) {
        result.fail_open = true;
        result.forwarded_body = std::string(raw);
        result.forwarded_bytes = result.received_bytes;
        result.records.push_back(detail::make_record(state, result.turn, result.zone, "forward",
                                                     "request", 0,
                                                     std::string("fail-open: ") + e.what()));
        return result;
    }
}

// Response-side effects: provider usage feeds the next zone estimate and
// intercepted phantom calls execute against the session.
inline void absorb_response_effects(SessionState& state, const std::vector<PhantomCall>& calls,
                                    std::optional<long long> usage_tokens, int turn,
                                    std::vector<DecisionLogRecord>& records) {
    if (usage_tokens) state.last_usage_tokens = usage_tokens;
    for (const auto& call : calls) {
        PhantomOutcome outcome = execute_phantom(state, call, turn);
        std::string detail;
        for (const auto& note : outcome.notes) {
            if (!detail.empty()) detail += "; ";
            detail += note;
        }
        records.push_back(detail::make_record(state, turn, "-", "phantom", call.tool, 0, detail));
    }
}

} // namespace pichay
