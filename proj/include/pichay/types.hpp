#pragma once

#include "pichay/wire.hpp"

#include <map>
#include <optional>
#include <string>

namespace pichay {

// Tool name + canonical arguments: the page identity faults are matched on.
struct FaultKey {
    std::string tool_name;
    std::string args_key;
    bool operator==(const FaultKey&) const = default;
};

inline std::string fault_key_id(const FaultKey& k) {
    return k.tool_name + '\x1f' + k.args_key;
}

enum class BlockStatus { resident, evicted, summarized, collapsed, pinned };
enum class EvictionCategory { gc, paged };

inline std::string_view to_string(BlockStatus s) {
    switch (s) {
        case BlockStatus::resident: return "resident";
        case BlockStatus::evicted: return "evicted";
        case BlockStatus::summarized: return "summarized";
        case BlockStatus::collapsed: return "collapsed";
        default: return "pinned";
    }
}

inline std::optional<BlockStatus> block_status_from(std::string_view s) {
    if (s == "resident") return BlockStatus::resident;
    if (s == "evicted") return BlockStatus::evicted;
    if (s == "summarized") return BlockStatus::summarized;
    if (s == "collapsed") return BlockStatus::collapsed;
    if (s == "pinned") return BlockStatus::pinned;
    return std::nullopt;
}

struct BlockMeta {
    std::string block_id;     // first 8 hex digits of content hash + "-" + turn
    std::string content_hash; // sha256 hex of body bytes
    std::size_t size_bytes = 0;
    std::optional<std::size_t> line_count;
    int turn = 0;
    Role role = Role::user;
    BlockKind kind = BlockKind::text;
    std::string tool_name;
    BlockStatus status = BlockStatus::resident;
    std::optional<std::string> summary;
    std::optional<FaultKey> fault_key;
    bool is_error = false;
    bool anchored = false;          // cleanup-tag anchor: exempt from eviction
    bool release_requested = false; // memory_release mark: evict on next pass
    long long registered_generation = 0; // transient: request that first saw it
};

struct EvictionRecord {
    FaultKey fault_key;
    std::string content_hash;
    std::size_t size_bytes = 0;
    std::optional<std::size_t> line_count;
    int evicted_at_turn = 0;
    EvictionCategory category = EvictionCategory::gc;
    std::optional<std::string> cached_body; // paged only, bounded by cache budget
    std::string block_id;
};

// One fault-history entry; pinned_hash is the hash whose eviction caused the
// fault. An entry exists only after at least one detected fault.
struct FaultEntry {
    FaultKey key;
    std::string pinned_hash;
    long long fault_count = 0;
    int last_access_turn = 0;
    bool pinned = false;
};

using FaultHistory = std::map<std::string, FaultEntry>; // keyed by fault_key_id

} // namespace pichay
