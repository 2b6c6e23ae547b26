#pragma once

#include "pichay/handles.hpp"
#include "pichay/policy.hpp"
#include "pichay/sha256.hpp"
#include "pichay/types.hpp"

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <optional>
#include <set>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

namespace pichay {

class EvictPinnedError : public std::logic_error {
public:
    explicit EvictPinnedError(const std::string& id)
        : std::logic_error("attempted eviction of pinned block " + id) {}
};

class CheckpointError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Tool-definition stubbing state; session-scoped and monotone: once a tool
// is used its schema stays restored.
struct StubState {
    std::map<std::string, json> full_defs;
    std::set<std::string> used_tools;
};

struct PendingPhantomResult {
    std::string tool_use_id; // "phantom-<n>"
    std::string tool_name;   // memory_fault
    json args;               // {"paths": [...]}
    std::string result_body;
    int anchor_turn = 0;     // user turn whose response carried the call
};

// A pageable tool_use awaiting its delivered result; resolved into fault /
// pin / unpin decisions once the result's content hash is known.
struct PendingRead {
    FaultKey key;
    std::string use_id;
};

// Per-session registry. One instance is owned exclusively while a request
// for its session is being handled.
struct SessionState {
    std::string session_id;
    std::vector<BlockMeta> blocks; // message order
    std::unordered_map<std::string, std::size_t> block_lookup;
    std::vector<EvictionRecord> evictions;
    FaultHistory fault_history;
    std::vector<PendingPhantomResult> pending_phantom_results;
    StubState stub;
    std::vector<std::string> static_segment_hashes; // track_static state
    std::string checkpoint_path;
    std::size_t cached_body_bytes = 0;
    std::size_t content_cache_budget = 64ull * 1024 * 1024; // bodies only
    std::optional<long long> last_usage_tokens;
    long long phantom_counter = 0;
    // transients (not checkpointed)
    long long generation = 0; // one tick per handled request
    std::vector<PendingRead> pending_reads;
    std::unordered_map<std::string, std::string> result_hash_by_use;
    std::unordered_map<std::string, std::string> resident_bodies; // block_id -> body

    BlockMeta* find_block(const std::string& id) {
        auto it = block_lookup.find(id);
        return it == block_lookup.end() ? nullptr : &blocks[it->second];
    }
    const BlockMeta* find_block(const std::string& id) const {
        auto it = block_lookup.find(id);
        return it == block_lookup.end() ? nullptr : &blocks[it->second];
    }
    FaultEntry* find_fault_entry(const FaultKey& key) {
        auto it = fault_history.find(fault_key_id(key));
        return it == fault_history.end() ? nullptr : &it->second;
    }
};

inline std::string block_id_for(const std::string& content_hash, int turn) {
    return content_hash.substr(0, 8) + "-" + std::to_string(turn);
}

// Register one content block; returns (index, freshly-added). Previously
// known blocks keep their status; that re-applies prior decisions to the
// full history the client resends every turn.
inline std::pair<std::size_t, bool> register_block(SessionState& state, const BlockView& view,
                                                   const PolicyConfig& cfg) {
    std::string hash = Sha256::hex_digest(view.body);
    std::string id = block_id_for(hash, view.turn);
    if (auto it = state.block_lookup.find(id); it != state.block_lookup.end())
        return {it->second, false};

    BlockMeta meta;
    meta.block_id = id;
    meta.content_hash = std::move(hash);
    meta.size_bytes = view.content_bytes;
    meta.line_count = view.line_count;
    meta.turn = view.turn;
    meta.role = view.role;
    meta.kind = view.kind;
    meta.tool_name = view.tool_name;
    meta.is_error = view.is_error;
    meta.registered_generation = state.generation;
    if (view.kind == BlockKind::tool_result && !view.tool_name.empty() &&
        classify(view.tool_name, cfg) == ToolClass::pageable) {
        meta.fault_key = FaultKey{view.tool_name, view.args_key};
    }
    // A key pinned by fault history pins every identical re-entry of it.
    if (meta.fault_key) {
        if (auto* entry = state.find_fault_entry(*meta.fault_key);
            entry && entry->pinned && entry->pinned_hash == meta.content_hash)
            meta.status = BlockStatus::pinned;
    }

    // Read ingestion rides on registration: fresh results feed the
    // use->hash map and the body store, fresh pageable uses queue for fault
    // resolution once their result lands.
    if (view.kind == BlockKind::tool_result) {
        if (!view.tool_use_id.empty())
            state.result_hash_by_use[view.tool_use_id] = meta.content_hash;
        state.resident_bodies[meta.block_id] = view.body;
    } else if (view.kind == BlockKind::tool_use &&
               classify(view.tool_name, cfg) == ToolClass::pageable) {
        state.pending_reads.push_back({FaultKey{view.tool_name, view.args_key}, view.tool_use_id});
    }

    state.blocks.push_back(std::move(meta));
    state.block_lookup[state.blocks.back().block_id] = state.blocks.size() - 1;
    return {state.blocks.size() - 1, true};
}

struct RegisterResult {
    std::vector<std::size_t> new_indices;
};

inline RegisterResult register_blocks(SessionState& state, const Request& req,
                                      const PolicyConfig& cfg) {
    RegisterResult result;
    for (const auto& m : req.messages) {
        for (const auto& b : m.blocks) {
            auto [idx, fresh] = register_block(state, b, cfg);
            if (fresh) result.new_indices.push_back(idx);
        }
    }
    return result;
}

namespace detail {

// Oldest-first release of cached bodies until `needed` fits in the budget.
// Metadata is never dropped.
inline void make_cache_room(SessionState& state, std::size_t needed) {
    if (needed > state.content_cache_budget) return;
    for (auto& rec : state.evictions) {
        if (state.cached_body_bytes + needed <= state.content_cache_budget) break;
        if (rec.cached_body) {
            state.cached_body_bytes -= rec.cached_body->size();
            rec.cached_body.reset();
        }
    }
}

} // namespace detail

// Body of a still-resident block, surrendering ownership.
inline std::string take_resident_body(SessionState& state, const std::string& block_id) {
    auto it = state.resident_bodies.find(block_id);
    if (it == state.resident_bodies.end()) return {};
    std::string body = std::move(it->second);
    state.resident_bodies.erase(it);
    return body;
}

inline EvictionRecord& record_eviction(SessionState& state, std::size_t block_index,
                                       EvictionCategory category, std::string body) {
    BlockMeta& meta = state.blocks[block_index];
    if (meta.status == BlockStatus::pinned) throw EvictPinnedError(meta.block_id);

    EvictionRecord rec;
    rec.fault_key = meta.fault_key.value_or(FaultKey{meta.tool_name, ""});
    rec.content_hash = meta.content_hash;
    rec.size_bytes = meta.size_bytes;
    rec.line_count = meta.line_count;
    rec.evicted_at_turn = meta.turn;
    rec.category = category;
    rec.block_id = meta.block_id;
    if (category == EvictionCategory::paged && !body.empty()) {
        detail::make_cache_room(state, body.size());
        if (state.cached_body_bytes + body.size() <= state.content_cache_budget) {
            state.cached_body_bytes += body.size();
            rec.cached_body = std::move(body);
        }
    }
    meta.status = BlockStatus::evicted;
    state.resident_bodies.erase(meta.block_id);
    state.evictions.push_back(std::move(rec));
    return state.evictions.back();
}

// Most recent paged record for the key; gc records never match.
inline EvictionRecord* lookup_fault(SessionState& state, const FaultKey& key) {
    for (auto it = state.evictions.rbegin(); it != state.evictions.rend(); ++it) {
        if (it->category != EvictionCategory::paged) continue;
        if (it->fault_key == key) return &*it;
    }
    return nullptr;
}

struct PinUpdate {
    bool pinned = false;
};

// Fault bookkeeping. Pin iff the re-requested content hashes identically to
// what was evicted: the model demonstrably needed exactly what was taken.
// A differing hash means the eviction removed stale data; no pin.
// current_hash may be absent (tool_use seen, result never delivered).
inline PinUpdate apply_fault(SessionState& state, const EvictionRecord& record,
                             std::optional<std::string> current_hash, int turn) {
    FaultEntry& entry = state.fault_history[fault_key_id(record.fault_key)];
    entry.key = record.fault_key;
    entry.pinned_hash = record.content_hash;
    entry.fault_count += 1;
    entry.last_access_turn = turn;
    entry.pinned = current_hash && *current_hash == record.content_hash;
    if (entry.pinned) {
        for (auto& b : state.blocks)
            if (b.fault_key && *b.fault_key == record.fault_key &&
                b.status == BlockStatus::resident && b.content_hash == entry.pinned_hash)
                b.status = BlockStatus::pinned;
    }
    return PinUpdate{entry.pinned};
}

// A pinned path read back with different content was edited: unpin. The new
// version starts a fresh fault cycle; pinned_hash is refreshed only by a
// future fault.
inline bool unpin_on_edit(SessionState& state, const FaultKey& key, const std::string& new_hash) {
    FaultEntry* entry = state.find_fault_entry(key);
    if (!entry || !entry->pinned) return false;
    if (new_hash == entry->pinned_hash) return false;
    entry->pinned = false;
    for (auto& b : state.blocks)
        if (b.fault_key && *b.fault_key == key && b.status == BlockStatus::pinned)
            b.status = BlockStatus::resident;
    return true;
}

struct ReadOutcome {
    bool fault = false;
    bool pinned_now = false;
    bool unpinned = false;
    const EvictionRecord* record = nullptr;
};

// Shared read-event path for the live pipeline and the replay harness.
// A new read is a fault iff a paged eviction record matches the key and no
// block with that key was resident before this request arrived: the model
// is re-requesting content it lost (the re-read's own freshly registered
// result does not count as residency). Reads of resident pinned content
// refresh the pin clock; reads returning changed content unpin.
inline ReadOutcome on_pageable_read(SessionState& state, const FaultKey& key,
                                    std::optional<std::string> new_hash, int turn) {
    ReadOutcome out;
    EvictionRecord* rec = lookup_fault(state, key);
    bool resident = false;
    for (const auto& b : state.blocks) {
        if (b.registered_generation >= state.generation) continue;
        if (b.fault_key && *b.fault_key == key &&
            (b.status == BlockStatus::resident || b.status == BlockStatus::pinned)) {
            resident = true;
            break;
        }
    }
    if (rec && !resident) {
        out.fault = true;
        out.record = rec;
        out.pinned_now = apply_fault(state, *rec, new_hash, turn).pinned;
        return out;
    }
    if (FaultEntry* entry = state.find_fault_entry(key); entry && entry->pinned && new_hash) {
        if (*new_hash != entry->pinned_hash)
            out.unpinned = unpin_on_edit(state, key, *new_hash);
        else
            entry->last_access_turn = turn;
    }
    return out;
}

struct ReadEvent {
    FaultKey key;
    ReadOutcome outcome;
};

// Resolve queued pageable reads whose results have been delivered. Reads
// still unanswered stay queued unless this is the session's final snapshot,
// in which case they resolve without a hash (fault countable, no pin
// decision possible).
inline std::vector<ReadEvent> resolve_pending_reads(SessionState& state, int current_max_turn,
                                                    bool final_snapshot = false) {
    std::vector<ReadEvent> events;
    std::vector<PendingRead> still_pending;
    for (auto& pr : state.pending_reads) {
        std::optional<std::string> hash;
        if (auto it = state.result_hash_by_use.find(pr.use_id); it != state.result_hash_by_use.end())
            hash = it->second;
        if (!hash && !final_snapshot) {
            still_pending.push_back(std::move(pr));
            continue;
        }
        ReadEvent ev;
        ev.key = pr.key;
        ev.outcome = on_pageable_read(state, pr.key, hash, current_max_turn);
        events.push_back(std::move(ev));
    }
    state.pending_reads = std::move(still_pending);
    return events;
}

inline std::string render_handle(const EvictionRecord& rec) {
    Handle h;
    h.tool_name = rec.fault_key.tool_name.empty() ? "tool" : rec.fault_key.tool_name;
    h.key_param = rec.fault_key.args_key;
    h.size_bytes = rec.size_bytes;
    h.line_count = rec.line_count;
    h.gc = rec.category == EvictionCategory::gc;
    return pichay::render_handle(h);
}

// ---- checkpoint (metadata only; cached bodies are never persisted) ----

namespace detail {

inline json block_to_json(const BlockMeta& b) {
    json j{{"block_id", b.block_id},
           {"content_hash", b.content_hash},
           {"size_bytes", b.size_bytes},
           {"turn", b.turn},
           {"role", std::string(to_string(b.role))},
           {"kind", std::string(to_string(b.kind))},
           {"status", std::string(to_string(b.status))},
           {"is_error", b.is_error},
           {"anchored", b.anchored}};
    if (b.line_count) j["line_count"] = *b.line_count;
    if (!b.tool_name.empty()) j["tool_name"] = b.tool_name;
    if (b.summary) j["summary"] = *b.summary;
    if (b.fault_key)
        j["fault_key"] = {{"tool_name", b.fault_key->tool_name}, {"args_key", b.fault_key->args_key}};
    return j;
}

inline BlockMeta block_from_json(const json& j) {
    BlockMeta b;
    b.block_id = j.value("block_id", "");
    b.content_hash = j.value("content_hash", "");
    b.size_bytes = j.value("size_bytes", std::size_t{0});
    b.turn = j.value("turn", 0);
    b.role = j.value("role", "user") == "assistant" ? Role::assistant : Role::user;
    std::string kind = j.value("kind", "text");
    b.kind = kind == "tool_use" ? BlockKind::tool_use
             : kind == "tool_result" ? BlockKind::tool_result
                                     : BlockKind::text;
    b.status = block_status_from(j.value("status", "resident")).value_or(BlockStatus::resident);
    b.is_error = j.value("is_error", false);
    b.anchored = j.value("anchored", false);
    if (j.contains("line_count")) b.line_count = j["line_count"].get<std::size_t>();
    b.tool_name = j.value("tool_name", "");
    if (j.contains("summary")) b.summary = j["summary"].get<std::string>();
    if (j.contains("fault_key"))
        b.fault_key = FaultKey{j["fault_key"].value("tool_name", ""), j["fault_key"].value("args_key", "")};
    return b;
}

} // namespace detail

// Atomic write: temporary file then rename. The test hook runs between the
// two so crash behavior at the boundary can be exercised.
inline void checkpoint_save(const SessionState& state,
                            const std::function<void()>& between_write_and_rename = {}) {
    if (state.checkpoint_path.empty()) return;
    json doc;
    doc["version"] = 1;
    doc["blocks"] = json::array();
    for (const auto& b : state.blocks) doc["blocks"].push_back(detail::block_to_json(b));
    doc["evictions"] = json::array();
    for (const auto& r : state.evictions) {
        json j{{"fault_key", {{"tool_name", r.fault_key.tool_name}, {"args_key", r.fault_key.args_key}}},
               {"content_hash", r.content_hash},
               {"size_bytes", r.size_bytes},
               {"evicted_at_turn", r.evicted_at_turn},
               {"category", r.category == EvictionCategory::paged ? "paged" : "gc"},
               {"block_id", r.block_id}};
        if (r.line_count) j["line_count"] = *r.line_count;
        doc["evictions"].push_back(std::move(j));
    }
    doc["fault_history"] = json::array();
    for (const auto& [id, e] : state.fault_history) {
        (void)id;
        doc["fault_history"].push_back({{"tool_name", e.key.tool_name},
                                        {"args_key", e.key.args_key},
                                        {"pinned_hash", e.pinned_hash},
                                        {"fault_count", e.fault_count},
                                        {"last_access_turn", e.last_access_turn},
                                        {"pinned", e.pinned}});
    }
    doc["used_tools"] = json::array();
    for (const auto& t : state.stub.used_tools) doc["used_tools"].push_back(t);

    namespace fs = std::filesystem;
    fs::path target(state.checkpoint_path);
    std::error_code ec;
    if (target.has_parent_path()) fs::create_directories(target.parent_path(), ec);
    fs::path tmp = target;
    tmp += ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw CheckpointError("cannot open " + tmp.string());
        out << doc.dump();
        out.flush();
        if (!out) throw CheckpointError("write failed for " + tmp.string());
    }
    if (between_write_and_rename) between_write_and_rename();
    fs::rename(tmp, target, ec);
    if (ec) throw CheckpointError("rename failed for " + target.string() + ": " + ec.message());
}

// Missing file -> fresh state; corrupt file -> fresh state plus a warning.
// Memory continuity never outranks availability.
inline SessionState checkpoint_load(const std::string& path,
                                    const std::function<void(const std::string&)>& warn = {}) {
    SessionState state;
    state.checkpoint_path = path;
    std::ifstream in(path, std::ios::binary);
    if (!in) return state;
    try {
        json doc = json::parse(in);
        if (!doc.is_object() || !doc.contains("blocks")) throw std::runtime_error("bad shape");
        for (const auto& j : doc["blocks"]) {
            state.blocks.push_back(detail::block_from_json(j));
            state.block_lookup[state.blocks.back().block_id] = state.blocks.size() - 1;
        }
        for (const auto& j : doc.value("evictions", json::array())) {
            EvictionRecord r;
            r.fault_key = FaultKey{j["fault_key"].value("tool_name", ""), j["fault_key"].value("args_key", "")};
            r.content_hash = j.value("content_hash", "");
            r.size_bytes = j.value("size_bytes", std::size_t{0});
            if (j.contains("line_count")) r.line_count = j["line_count"].get<std::size_t>();
            r.evicted_at_turn = j.value("evicted_at_turn", 0);
            r.category = j.value("category", "gc") == "paged" ? EvictionCategory::paged : EvictionCategory::gc;
            r.block_id = j.value("block_id", "");
            state.evictions.push_back(std::move(r));
        }
        for (const auto& j : doc.value("fault_history", json::array())) {
            FaultEntry e;
            e.key = FaultKey{j.value("tool_name", ""), j.value("args_key", "")};
            e.pinned_hash = j.value("pinned_hash", "");
            e.fault_count = j.value("fault_count", 0ll);
            e.last_access_turn = j.value("last_access_turn", 0);
            e.pinned = j.value("pinned", false);
            state.fault_history[fault_key_id(e.key)] = std::move(e);
        }
        for (const auto& t : doc.value("used_tools", json::array()))
            state.stub.used_tools.insert(t.get<std::string>());
    } catch (const std::exception& e) {
        if (warn)
            warn(std::string("discarding corrupt checkpoint ") + path + ": " + e.what());
        else
            std::fprintf(stderr, "pichay: discarding corrupt checkpoint %s: %s\n", path.c_str(), e.what());
        SessionState fresh;
        fresh.checkpoint_path = path;
        return fresh;
    }
    return state;
}

} // namespace pichay
