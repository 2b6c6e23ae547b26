#pragma once

#include <string_view>

namespace pichay {

// Names and markers that form the model-facing side channels. These are
// public contracts: deployed transcripts contain them.
inline constexpr std::string_view kMemoryReleaseTool = "memory_release";
inline constexpr std::string_view kMemoryFaultTool = "memory_fault";
inline constexpr std::string_view kAdvisoryOpen = "[Memory advisory]";
inline constexpr std::string_view kAdvisoryClose = "[/Memory advisory]";
inline constexpr std::string_view kPhantomIdPrefix = "phantom-";

inline bool is_phantom_tool_name(std::string_view name) {
    return name == kMemoryReleaseTool || name == kMemoryFaultTool;
}

inline bool is_advisory_text(std::string_view text) {
    return text.rfind(kAdvisoryOpen, 0) == 0;
}

} // namespace pichay
