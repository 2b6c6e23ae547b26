#pragma once

#include "pichay/wire.hpp"

#include <string>
#include <string_view>
#include <vector>

namespace pichay {

// One server-sent event. `raw` is the exact wire text (including the blank
// terminator) so untouched events re-emit byte-identically; `data` is parsed
// lazily and only rewritten events are re-serialized from it.
struct StreamEvent {
    std::string event;
    json data;
    std::string raw;
    bool parsed = false;
    bool dirty = false;
};

inline std::vector<StreamEvent> parse_sse_events(std::string_view body) {
    std::vector<StreamEvent> out;
    std::size_t pos = 0;
    while (pos < body.size()) {
        std::size_t end = body.find("\n\n", pos);
        std::size_t chunk_end = end == std::string_view::npos ? body.size() : end + 2;
        std::string_view chunk = body.substr(pos, chunk_end - pos);
        StreamEvent ev;
        ev.raw = std::string(chunk);
        std::string data_text;
        std::size_t line_start = 0;
        while (line_start < chunk.size()) {
            std::size_t line_end = chunk.find('\n', line_start);
            if (line_end == std::string_view::npos) line_end = chunk.size();
            std::string_view line = chunk.substr(line_start, line_end - line_start);
            if (line.starts_with("event:")) {
                std::string_view v = line.substr(6);
                if (v.starts_with(" ")) v.remove_prefix(1);
                ev.event = std::string(v);
            } else if (line.starts_with("data:")) {
                std::string_view v = line.substr(5);
                if (v.starts_with(" ")) v.remove_prefix(1);
                if (!data_text.empty()) data_text.push_back('\n');
                data_text += std::string(v);
            }
            line_start = line_end + 1;
        }
        if (!data_text.empty()) {
            ev.data = json::parse(data_text, nullptr, false);
            ev.parsed = !ev.data.is_discarded();
        }
        out.push_back(std::move(ev));
        pos = chunk_end;
    }
    return out;
}

inline std::string serialize_sse_event(const StreamEvent& ev) {
    if (!ev.dirty) return ev.raw;
    std::string out;
    if (!ev.event.empty()) out += "event: " + ev.event + "\n";
    out += "data: " + ev.data.dump() + "\n\n";
    return out;
}

inline std::string serialize_sse(const std::vector<StreamEvent>& events) {
    std::string out;
    for (const auto& ev : events) out += serialize_sse_event(ev);
    return out;
}

// Logical content block assembled from a stream (or taken from a
// non-streamed response body).
struct AssembledBlock {
    BlockKind kind = BlockKind::text;
    std::string text;
    std::string name;
    std::string id;
    json input;
};

// Reassembling a stream yields the same logical response as the
// non-streamed form; used by tests and the conservation property.
inline std::vector<AssembledBlock> reassemble_stream(const std::vector<StreamEvent>& events) {
    std::vector<AssembledBlock> blocks;
    std::vector<std::string> partial_json;
    for (const auto& ev : events) {
        if (!ev.parsed) continue;
        if (ev.event == "content_block_start") {
            AssembledBlock b;
            const json& cb = ev.data.contains("content_block") ? ev.data["content_block"] : json::object();
            std::string type = cb.value("type", "text");
            if (type == "tool_use") {
                b.kind = BlockKind::tool_use;
                b.name = cb.value("name", "");
                b.id = cb.value("id", "");
                b.input = cb.contains("input") ? cb["input"] : json::object();
            } else {
                b.kind = BlockKind::text;
                b.text = cb.value("text", "");
            }
            blocks.push_back(std::move(b));
            partial_json.emplace_back();
        } else if (ev.event == "content_block_delta" && !blocks.empty()) {
            const json& d = ev.data.contains("delta") ? ev.data["delta"] : json::object();
            std::string type = d.value("type", "");
            int idx = ev.data.value("index", static_cast<int>(blocks.size()) - 1);
            if (idx < 0 || idx >= static_cast<int>(blocks.size())) continue;
            if (type == "text_delta")
                blocks[idx].text += d.value("text", "");
            else if (type == "input_json_delta")
                partial_json[idx] += d.value("partial_json", "");
        } else if (ev.event == "content_block_stop") {
            int idx = ev.data.value("index", -1);
            if (idx >= 0 && idx < static_cast<int>(blocks.size()) &&
                blocks[idx].kind == BlockKind::tool_use && !partial_json[idx].empty()) {
                json parsed = json::parse(partial_json[idx], nullptr, false);
                if (!parsed.is_discarded()) blocks[idx].input = std::move(parsed);
            }
        }
    }
    return blocks;
}

} // namespace pichay
