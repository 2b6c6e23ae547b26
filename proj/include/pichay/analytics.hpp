#pragma once

#include "pichay/handles.hpp"
#include "pichay/pagestore.hpp"
#include "pichay/policy.hpp"
#include "pichay/wire.hpp"

#include <algorithm>
#include <fstream>
#include <limits>
#include <map>
#include <optional>
#include <set>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

namespace pichay {

// One recorded session: ordered messages in the same shape the wire module
// parses, one {"role": ..., "content": [...]} object per JSONL line.
struct Transcript {
    std::string source;
    std::vector<json> messages;
};

inline Transcript load_transcript(const std::string& path) {
    Transcript t;
    t.source = path;
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open transcript " + path);
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        json j = json::parse(line, nullptr, false);
        if (j.is_discarded() || !j.is_object()) continue;
        // enveloped records ({"type": ..., "message": {...}}) unwrap to the
        // inner message; anything without a role (progress rows, decision
        // log lines) is not conversation content
        if (j.contains("message") && j["message"].is_object()) j = j["message"];
        if (!j.contains("role")) continue;
        t.messages.push_back(std::move(j));
    }
    return t;
}

namespace detail {

inline Request request_over(const Transcript& t) {
    Request req;
    req.doc = json{{"model", "replay"}, {"messages", json::array()}};
    for (const auto& m : t.messages) req.doc["messages"].push_back(m);
    req.reindex();
    index_turns(req);
    return req;
}

} // namespace detail

// ---- probe: amplification factor and tool overhead ----

// A = sum(size * turns_survived) / sum(size) over tool results, with
// turns_survived counted in user turns to session end. Blocks whose body is
// already a retrieval handle are a prior eviction, not a live result; they
// are excluded from A and counted separately.
struct AmplificationReport {
    double factor = 0.0;
    long long tool_results = 0;
    long long handle_blocks_seen = 0;
    long long bytes = 0;
};

inline AmplificationReport amplification_factor(const Transcript& t) {
    AmplificationReport report;
    if (t.messages.empty()) return report;
    Request req = detail::request_over(t);
    long double weighted = 0;
    long double total = 0;
    for (const auto& m : req.messages) {
        for (const auto& b : m.blocks) {
            if (b.kind != BlockKind::tool_result) continue;
            if (is_handle_text(b.body) && parse_handle(b.body)) {
                report.handle_blocks_seen++;
                continue;
            }
            long long survived = req.max_user_turn < 0 ? 0 : req.max_user_turn - b.turn;
            weighted += static_cast<long double>(b.content_bytes) * survived;
            total += static_cast<long double>(b.content_bytes);
            report.tool_results++;
            report.bytes += static_cast<long long>(b.content_bytes);
        }
    }
    report.factor = total > 0 ? static_cast<double>(weighted / total) : 0.0;
    return report;
}

struct OverheadShares {
    double tool_result = 0.0;
    double assistant_text = 0.0;
    double user_text = 0.0;
};

inline OverheadShares tool_overhead(const Transcript& t) {
    OverheadShares shares;
    if (t.messages.empty()) return shares;
    Request req = detail::request_over(t);
    long double tool = 0, assistant = 0, user = 0;
    for (const auto& m : req.messages) {
        for (const auto& b : m.blocks) {
            if (b.kind == BlockKind::tool_result)
                tool += static_cast<long double>(b.content_bytes);
            else if (m.role == Role::assistant)
                assistant += static_cast<long double>(b.content_bytes);
            else
                user += static_cast<long double>(b.content_bytes);
        }
    }
    long double total = tool + assistant + user;
    if (total <= 0) return shares;
    shares.tool_result = static_cast<double>(tool / total);
    shares.assistant_text = static_cast<double>(assistant / total);
    shares.user_text = static_cast<double>(user / total);
    return shares;
}

// ---- replay: eviction simulation without API calls ----

struct ReplayReport {
    long long total_evictions = 0;
    long long gc_evictions = 0;
    long long paged_evictions = 0;
    long long faults = 0;
    std::optional<double> fault_rate_total;
    std::optional<double> fault_rate_paged;
    long long bytes_evicted = 0;
    long long files_skipped = 0;
    std::optional<long long> belady_min_faults;

    void finalize() {
        fault_rate_total = total_evictions > 0
                               ? std::optional<double>(static_cast<double>(faults) / total_evictions)
                               : std::nullopt;
        fault_rate_paged = paged_evictions > 0
                               ? std::optional<double>(static_cast<double>(faults) / paged_evictions)
                               : std::nullopt;
    }
};

inline json to_json(const ReplayReport& r) {
    json j{{"total_evictions", r.total_evictions},
           {"gc_evictions", r.gc_evictions},
           {"paged_evictions", r.paged_evictions},
           {"faults", r.faults},
           {"fault_rate_total", r.fault_rate_total ? json(*r.fault_rate_total) : json(nullptr)},
           {"fault_rate_paged", r.fault_rate_paged ? json(*r.fault_rate_paged) : json(nullptr)},
           {"bytes_evicted", r.bytes_evicted},
           {"files_skipped", r.files_skipped}};
    if (r.belady_min_faults) j["belady_min_faults"] = *r.belady_min_faults;
    return j;
}

// Audit trail: where each eviction and fault fired, for oracle comparison.
struct ReplayEvent {
    enum class Kind { eviction, fault };
    Kind kind = Kind::eviction;
    FaultKey key;
    EvictionCategory category = EvictionCategory::gc;
    std::size_t message_index = 0; // messages consumed when the event fired
    std::string block_id;
};

struct ReplayTrace {
    std::vector<ReplayEvent> events;
    std::vector<std::string> pageable_refs; // reference string for MIN
};

// Classic Belady MIN over a reference string with a fixed page capacity:
// on a miss with a full set, evict the page whose next use is farthest out.
inline long long belady_min_faults(const std::vector<std::string>& refs, std::size_t capacity) {
    if (capacity == 0) return static_cast<long long>(refs.size());
    std::unordered_map<std::string, std::vector<std::size_t>> positions;
    for (std::size_t i = 0; i < refs.size(); ++i) positions[refs[i]].push_back(i);
    std::set<std::string> resident;
    long long faults = 0;
    for (std::size_t i = 0; i < refs.size(); ++i) {
        const std::string& page = refs[i];
        if (resident.count(page)) continue;
        ++faults;
        if (resident.size() < capacity) {
            resident.insert(page);
            continue;
        }
        std::string victim;
        std::size_t farthest = 0;
        for (const auto& r : resident) {
            const auto& pos = positions[r];
            auto it = std::upper_bound(pos.begin(), pos.end(), i);
            std::size_t next = it == pos.end() ? std::numeric_limits<std::size_t>::max() : *it;
            if (victim.empty() || next > farthest) {
                farthest = next;
                victim = r;
            }
            if (next == std::numeric_limits<std::size_t>::max()) break;
        }
        resident.erase(victim);
        resident.insert(page);
    }
    return faults;
}

// Feed each user-terminated prefix of one transcript through the same
// register / fault-detect / select / record cycle the live pipeline runs.
// Built incrementally: registration is idempotent by block id, so touching
// only the newly appended messages is equivalent to re-registering the full
// history every snapshot.
inline void replay_transcript(const Transcript& t, const PolicyConfig& cfg, ReplayReport& report,
                              ReplayTrace* trace = nullptr) {
    SessionState state;
    state.session_id = t.source;

    ProducerMap producers;
    int next_turn = 0;
    int current_turn = 0;
    int max_turn = -1;
    long long running_bytes = 0;
    bool new_request = true;

    for (std::size_t i = 0; i < t.messages.size(); ++i) {
        if (new_request) {
            state.generation++;
            new_request = false;
        }
        const json& raw = t.messages[i];
        collect_producers(raw, producers);
        MessageView mv = view_message(raw, static_cast<int>(i), producers);
        if (counts_as_user_turn(mv)) {
            current_turn = next_turn++;
            max_turn = current_turn;
        }
        for (auto& b : mv.blocks) b.turn = current_turn;
        running_bytes += static_cast<long long>(raw.dump().size());

        for (const auto& b : mv.blocks) {
            auto [idx, fresh] = register_block(state, b, cfg);
            if (trace && fresh && b.kind == BlockKind::tool_use &&
                classify(b.tool_name, cfg) == ToolClass::pageable)
                trace->pageable_refs.push_back(b.args_key);
            static_cast<void>(idx);
        }

        bool is_user = mv.role == Role::user;
        bool last = i + 1 == t.messages.size();
        if (!is_user && !last) continue;

        for (const auto& ev : resolve_pending_reads(state, std::max(max_turn, 0), last)) {
            if (!ev.outcome.fault) continue;
            report.faults++;
            if (trace)
                trace->events.push_back({ReplayEvent::Kind::fault, ev.key, EvictionCategory::paged,
                                         i + 1,
                                         ev.outcome.record ? ev.outcome.record->block_id : ""});
        }

        PressureZone zone = compute_zone(estimate_tokens(running_bytes, cfg), cfg);
        auto choices = select_evictions(state.blocks, state.fault_history, zone,
                                        std::max(max_turn, 0), cfg);
        for (const auto& choice : choices) {
            BlockMeta& meta = state.blocks[choice.block_index];
            if (meta.status == BlockStatus::pinned) {
                // decayed pin: demote before the store records the eviction
                meta.status = BlockStatus::resident;
                if (auto* entry = meta.fault_key ? state.find_fault_entry(*meta.fault_key) : nullptr)
                    entry->pinned = false;
            }
            std::string body = take_resident_body(state, meta.block_id);
            const EvictionRecord& rec =
                record_eviction(state, choice.block_index, choice.category, std::move(body));
            report.total_evictions++;
            report.bytes_evicted += static_cast<long long>(rec.size_bytes);
            if (choice.category == EvictionCategory::paged)
                report.paged_evictions++;
            else
                report.gc_evictions++;
            if (trace)
                trace->events.push_back(
                    {ReplayEvent::Kind::eviction, rec.fault_key, rec.category, i + 1, rec.block_id});
        }
        new_request = true;
    }
}

inline ReplayReport replay(const std::vector<std::string>& paths, const PolicyConfig& cfg,
                           std::optional<std::size_t> belady_capacity = std::nullopt,
                           ReplayTrace* trace = nullptr) {
    ReplayReport report;
    ReplayTrace local_trace;
    ReplayTrace* tr = trace ? trace : (belady_capacity ? &local_trace : nullptr);
    for (const auto& path : paths) {
        try {
            Transcript t = load_transcript(path);
            replay_transcript(t, cfg, report, tr);
        } catch (const std::exception& e) {
            std::fprintf(stderr, "pichay: skipping %s: %s\n", path.c_str(), e.what());
            report.files_skipped++;
        }
    }
    if (belady_capacity && tr)
        report.belady_min_faults = belady_min_faults(tr->pageable_refs, *belady_capacity);
    report.finalize();
    return report;
}

// ---- cost accounting ----

struct CostCurve {
    std::vector<long long> baseline_cumulative;
    std::vector<long long> managed_cumulative;
    double reduction = 0.0;          // 1 - managed_total / baseline_total
    double mean_per_turn_reduction = 0.0;
};

inline CostCurve cost_curve(const std::vector<long long>& baseline_sizes,
                            const std::vector<long long>& managed_sizes) {
    if (baseline_sizes.size() != managed_sizes.size())
        throw std::invalid_argument("cost_curve: sequences differ in length");
    CostCurve curve;
    long long b_sum = 0, m_sum = 0;
    long double per_turn = 0;
    std::size_t counted = 0;
    for (std::size_t i = 0; i < baseline_sizes.size(); ++i) {
        b_sum += baseline_sizes[i];
        m_sum += managed_sizes[i];
        curve.baseline_cumulative.push_back(b_sum);
        curve.managed_cumulative.push_back(m_sum);
        if (baseline_sizes[i] > 0) {
            per_turn += 1.0L - static_cast<long double>(managed_sizes[i]) / baseline_sizes[i];
            ++counted;
        }
    }
    curve.reduction = b_sum > 0 ? 1.0 - static_cast<double>(m_sum) / static_cast<double>(b_sum) : 0.0;
    curve.mean_per_turn_reduction = counted ? static_cast<double>(per_turn / counted) : 0.0;
    return curve;
}

} // namespace pichay
