#pragma once

#include "pichay/types.hpp"

#include <cmath>
#include <limits>
#include <optional>
#include <set>
#include <string>
#include <vector>

namespace pichay {

struct PolicyConfig {
    int tau_user_turns = 4;
    long long min_size_bytes = 500;
    long long advisory_tokens = 60000;
    long long involuntary_tokens = 100000;
    long long aggressive_tokens = 120000;
    int aggressive_tau = 1;
    long long aggressive_min_size = 100;
    double bytes_per_token = 4.15;
    bool pin_decay_enabled = false;
    int pin_half_life_turns = 8;
    double pin_evict_strength = 0.25;
    long long context_window_tokens = 200000;
    // Classification table; everything not listed is garbage-collectable.
    std::set<std::string> pageable_tools{"Read", "Write"};
    std::set<std::string> protected_tools{};
};

enum class PressureZone { normal, advisory, involuntary, aggressive };

inline std::string_view to_string(PressureZone z) {
    switch (z) {
        case PressureZone::normal: return "normal";
        case PressureZone::advisory: return "advisory";
        case PressureZone::involuntary: return "involuntary";
        default: return "aggressive";
    }
}

enum class ToolClass { garbage_collectable, pageable, protected_tool };

// Pageable content has stable identity (a file path) and can fault back in;
// ephemeral output (Bash, Grep, listings, anything unknown) cannot.
inline ToolClass classify(std::string_view tool_name, const PolicyConfig& cfg) {
    if (cfg.protected_tools.count(std::string(tool_name))) return ToolClass::protected_tool;
    if (cfg.pageable_tools.count(std::string(tool_name))) return ToolClass::pageable;
    return ToolClass::garbage_collectable;
}

inline PressureZone compute_zone(long long estimated_tokens, const PolicyConfig& cfg) {
    if (estimated_tokens >= cfg.aggressive_tokens) return PressureZone::aggressive;
    if (estimated_tokens >= cfg.involuntary_tokens) return PressureZone::involuntary;
    if (estimated_tokens >= cfg.advisory_tokens) return PressureZone::advisory;
    return PressureZone::normal;
}

// Pin strength decays by half every pin_half_life_turns since last access.
inline double pin_strength(int last_access_turn, int current_turn, const PolicyConfig& cfg) {
    int elapsed = current_turn - last_access_turn;
    if (elapsed <= 0) return 1.0;
    return std::exp2(-static_cast<double>(elapsed) / static_cast<double>(cfg.pin_half_life_turns));
}

inline long long keep_cost(long long size_tokens, long long resident_turns) {
    return size_tokens * resident_turns;
}

struct CostEstimate {
    double keep_cost = 0.0;
    double fault_cost = 0.0;
    enum class Decision { keep, evict } decision = Decision::keep;
};

// Inverted cost model: keeping costs size x turns, faulting costs size once.
// Evict whenever the page will not be referenced for more than one turn.
// turns_until_next_ref == nullopt means "never referenced again".
inline CostEstimate break_even(long long size_tokens, std::optional<long long> turns_until_next_ref) {
    CostEstimate est;
    est.fault_cost = static_cast<double>(size_tokens);
    if (!turns_until_next_ref) {
        est.keep_cost = std::numeric_limits<double>::infinity();
        est.decision = CostEstimate::Decision::evict;
        return est;
    }
    est.keep_cost = static_cast<double>(size_tokens) * static_cast<double>(*turns_until_next_ref);
    est.decision = est.keep_cost > est.fault_cost ? CostEstimate::Decision::evict
                                                  : CostEstimate::Decision::keep;
    return est;
}

// Fault cost at high fill: an extra inference pass over the whole context is
// ~(n + |p|)^2; normalized by n so units stay token-scale. Reporting signal
// only; the decision-side conservatism is the aggressive-zone fault-count
// exclusion in select_evictions.
inline double quadratic_fault_cost(long long context_tokens, long long page_tokens) {
    if (context_tokens == 0) return static_cast<double>(page_tokens);
    double n = static_cast<double>(context_tokens) + static_cast<double>(page_tokens);
    return n * n / static_cast<double>(context_tokens);
}

struct EvictionChoice {
    std::size_t block_index;
    EvictionCategory category;
};

// FIFO by user-turn age with a size floor. Never returns error results,
// pinned blocks (unless decayed below the strength threshold), anchored
// blocks, or anything non-resident. Normal/Advisory zones only release
// blocks the model explicitly gave up via memory_release.
inline std::vector<EvictionChoice> select_evictions(const std::vector<BlockMeta>& blocks,
                                                    const FaultHistory& history,
                                                    PressureZone zone,
                                                    int current_max_turn,
                                                    const PolicyConfig& cfg) {
    std::vector<EvictionChoice> out;
    const bool aggressive = zone == PressureZone::aggressive;
    const int tau = aggressive ? cfg.aggressive_tau : cfg.tau_user_turns;
    const long long min_size = aggressive ? cfg.aggressive_min_size : cfg.min_size_bytes;
    const bool zone_active =
        zone == PressureZone::involuntary || zone == PressureZone::aggressive;

    for (std::size_t i = 0; i < blocks.size(); ++i) {
        const BlockMeta& b = blocks[i];
        if (b.kind != BlockKind::tool_result) continue;
        if (b.is_error) continue;
        if (b.anchored) continue;

        ToolClass cls = classify(b.tool_name, cfg);
        if (cls == ToolClass::protected_tool) continue;

        const FaultEntry* entry = nullptr;
        if (b.fault_key) {
            auto it = history.find(fault_key_id(*b.fault_key));
            if (it != history.end()) entry = &it->second;
        }

        if (b.status != BlockStatus::resident && b.status != BlockStatus::pinned) continue;
        bool pinned = b.status == BlockStatus::pinned || (entry && entry->pinned);
        if (pinned) {
            if (!cfg.pin_decay_enabled || !entry) continue;
            double strength = pin_strength(entry->last_access_turn, current_max_turn, cfg);
            if (strength >= cfg.pin_evict_strength) continue;
            // decayed pin: falls through to the normal gates below
        }

        EvictionCategory category =
            (cls == ToolClass::pageable && b.fault_key) ? EvictionCategory::paged
                                                        : EvictionCategory::gc;

        if (b.release_requested && !pinned) {
            out.push_back({i, category});
            continue;
        }

        if (!zone_active) continue;
        int age = current_max_turn - b.turn;
        if (age <= tau) continue;
        if (static_cast<long long>(b.size_bytes) <= min_size) continue;
        if (aggressive && entry && entry->fault_count >= 1) continue;

        out.push_back({i, category});
    }
    return out;
}

inline long long estimate_tokens(long long bytes, const PolicyConfig& cfg) {
    if (bytes <= 0) return 0;
    return std::llround(static_cast<double>(bytes) / cfg.bytes_per_token);
}

} // namespace pichay
