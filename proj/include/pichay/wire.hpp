#pragma once

#include "json.hpp"
#include "pichay/util.hpp"

#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace pichay {

// ordered_json keeps object members in insertion order, so fields the proxy
// never touches re-serialize exactly as they arrived.
using json = nlohmann::ordered_json;

// Parse failure. Callers are expected to fail open: forward the original
// bytes untouched and log.
class WireError : public std::runtime_error {
public:
    WireError(std::size_t offset, const std::string& msg)
        : std::runtime_error(msg), byte_offset(offset) {}
    std::size_t byte_offset;
};

enum class Role { user, assistant };
enum class BlockKind { text, tool_use, tool_result };

inline std::string_view to_string(Role r) { return r == Role::user ? "user" : "assistant"; }
inline std::string_view to_string(BlockKind k) {
    switch (k) {
        case BlockKind::text: return "text";
        case BlockKind::tool_use: return "tool_use";
        default: return "tool_result";
    }
}

// Read-side view of one content block. `body` is the canonical payload used
// for sizing and hashing; the underlying json document stays authoritative.
struct BlockView {
    BlockKind kind = BlockKind::text;
    Role role = Role::user;
    std::string tool_name;   // tool_use: own name; tool_result: producing tool
    std::string tool_use_id;
    std::string args_key;    // canonical argument key (file path for Read)
    bool is_error = false;
    std::string body;
    std::size_t content_bytes = 0;
    std::optional<std::size_t> line_count; // tool_result only
    int message_index = 0;
    int block_index = 0;
    int turn = 0; // enclosing or most recent preceding user turn
};

struct MessageView {
    Role role = Role::user;
    std::optional<int> user_turn_index;
    std::vector<BlockView> blocks;
};

struct ToolDefView {
    std::string name;
    std::string description;
    std::size_t byte_size = 0; // canonical serialized size of the whole def
};

// Sorted-key serialization of tool arguments; Read-style tools key on the
// file path alone so range parameters do not split the page identity.
inline std::string canonical_args_key(const json& input) {
    if (input.is_object()) {
        if (input.contains("file_path") && input["file_path"].is_string())
            return input["file_path"].get<std::string>();
        if (input.contains("path") && input["path"].is_string())
            return input["path"].get<std::string>();
    }
    nlohmann::json sorted = input; // std::map-backed: keys sort on copy
    return sorted.dump();
}

// Canonical body bytes of a raw content block.
inline std::string block_body_of(const json& block) {
    const std::string type = block.value("type", "text");
    if (type == "text") return block.value("text", "");
    if (type == "tool_use") return block.contains("input") ? block["input"].dump() : "{}";
    if (type == "tool_result") {
        if (!block.contains("content")) return "";
        const json& c = block["content"];
        if (c.is_string()) return c.get<std::string>();
        if (c.is_array()) {
            std::string out;
            for (const auto& item : c) {
                if (!out.empty()) out.push_back('\n');
                if (item.is_object() && item.value("type", "") == "text")
                    out += item.value("text", "");
                else
                    out += item.dump();
            }
            return out;
        }
        return c.dump();
    }
    return block.dump();
}

// tool_use_id -> (tool name, canonical args key)
using ProducerMap = std::unordered_map<std::string, std::pair<std::string, std::string>>;

inline void collect_producers(const json& message, ProducerMap& producers) {
    if (!message.contains("content") || !message["content"].is_array()) return;
    for (const auto& b : message["content"]) {
        if (b.is_object() && b.value("type", "") == "tool_use") {
            producers[b.value("id", "")] = {
                b.value("name", ""),
                canonical_args_key(b.contains("input") ? b["input"] : json::object())};
        }
    }
}

// View one raw message. Producers must already cover every tool_use the
// message's results answer.
inline MessageView view_message(const json& message, int message_index, const ProducerMap& producers) {
    MessageView mv;
    mv.role = message.value("role", "user") == "assistant" ? Role::assistant : Role::user;
    int bi = 0;
    auto add_block = [&](const json& b) {
        BlockView bv;
        bv.role = mv.role;
        bv.message_index = message_index;
        bv.block_index = bi++;
        const std::string type = b.is_object() ? b.value("type", "text") : "text";
        if (type == "tool_use") {
            bv.kind = BlockKind::tool_use;
            bv.tool_name = b.value("name", "");
            bv.tool_use_id = b.value("id", "");
            bv.args_key = canonical_args_key(b.contains("input") ? b["input"] : json::object());
        } else if (type == "tool_result") {
            bv.kind = BlockKind::tool_result;
            bv.tool_use_id = b.value("tool_use_id", "");
            bv.is_error = b.value("is_error", false);
            if (auto it = producers.find(bv.tool_use_id); it != producers.end()) {
                bv.tool_name = it->second.first;
                bv.args_key = it->second.second;
            }
        } else {
            bv.kind = BlockKind::text;
        }
        bv.body = b.is_object() ? block_body_of(b) : (b.is_string() ? b.get<std::string>() : b.dump());
        bv.content_bytes = bv.body.size();
        if (bv.kind == BlockKind::tool_result) bv.line_count = count_lines(bv.body);
        mv.blocks.push_back(std::move(bv));
    };
    if (message.contains("content")) {
        if (message["content"].is_array()) {
            for (const auto& b : message["content"]) add_block(b);
        } else if (message["content"].is_string()) {
            json text_block{{"type", "text"}, {"text", message["content"].get<std::string>()}};
            add_block(text_block);
        }
    }
    return mv;
}

// A message counts as a user turn iff it is user-role and carries at least
// one block that is not a tool_result. Agent clients deliver tool results as
// user-role messages; counting those would make the age clock meaningless.
inline bool counts_as_user_turn(const MessageView& mv) {
    if (mv.role != Role::user || mv.blocks.empty()) return false;
    for (const auto& b : mv.blocks)
        if (b.kind != BlockKind::tool_result) return true;
    return false;
}

struct Request {
    json doc;
    std::string model_name;
    bool stream = false;
    std::vector<ToolDefView> tools;
    std::vector<MessageView> messages;
    int max_user_turn = -1;
    bool turn_indexed = false;

    int age_of(const BlockView& b) const {
        return max_user_turn < 0 ? 0 : max_user_turn - b.turn;
    }

    // Rebuild all views from the document. Call after any mutation.
    void reindex() {
        model_name = doc.value("model", "");
        stream = doc.value("stream", false);
        tools.clear();
        messages.clear();

        if (doc.contains("tools") && doc["tools"].is_array()) {
            for (const auto& t : doc["tools"]) {
                ToolDefView v;
                v.name = t.value("name", "");
                v.description = t.value("description", "");
                v.byte_size = t.dump().size();
                tools.push_back(std::move(v));
            }
        }

        if (doc.contains("messages") && doc["messages"].is_array()) {
            ProducerMap producers;
            for (const auto& m : doc["messages"]) collect_producers(m, producers);
            int mi = 0;
            for (const auto& m : doc["messages"])
                messages.push_back(view_message(m, mi++, producers));
        }
        if (turn_indexed) assign_turns();
    }

    void assign_turns() {
        int next = 0;
        int current = 0;
        max_user_turn = -1;
        for (auto& mv : messages) {
            if (counts_as_user_turn(mv)) {
                mv.user_turn_index = next;
                current = next;
                max_user_turn = next;
                ++next;
            } else {
                mv.user_turn_index.reset();
            }
            for (auto& b : mv.blocks) b.turn = current;
        }
        turn_indexed = true;
    }
};

inline Request parse_request(std::string_view raw) {
    Request req;
    try {
        req.doc = json::parse(raw);
    } catch (const json::parse_error& e) {
        throw WireError(e.byte, e.what());
    }
    if (!req.doc.is_object()) throw WireError(0, "request is not a JSON object");
    req.reindex();
    return req;
}

inline Request& index_turns(Request& req) {
    req.assign_turns();
    return req;
}

inline std::string serialize_request(const Request& req) {
    return req.doc.dump();
}

// System prompt as a list of text segments (handles both the string and the
// segmented array form).
inline std::vector<std::string> system_segments(const json& doc) {
    std::vector<std::string> out;
    if (!doc.contains("system")) return out;
    const json& s = doc["system"];
    if (s.is_string()) {
        out.push_back(s.get<std::string>());
    } else if (s.is_array()) {
        for (const auto& seg : s)
            if (seg.is_object() && seg.value("type", "") == "text")
                out.push_back(seg.value("text", ""));
    }
    return out;
}

} // namespace pichay
