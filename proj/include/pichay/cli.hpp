#pragma once

#include "CLI11.hpp"
#include "pichay/analytics.hpp"
#include "pichay/decision_log.hpp"
#include "pichay/proxy.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <csignal>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

namespace pichay {

namespace cli_detail {

inline std::atomic<bool> g_interrupted{false};
inline void handle_interrupt(int) { g_interrupted.store(true); }

inline void add_policy_flags(CLI::App* cmd, PolicyConfig& policy) {
    cmd->add_option("--tau", policy.tau_user_turns,
                    "Eviction age threshold in user turns (tau)")
        ->capture_default_str();
    cmd->add_option("--min-size", policy.min_size_bytes,
                    "Minimum tool-result size in bytes to consider for eviction (s_min)")
        ->capture_default_str();
    cmd->add_option("--advisory-tokens", policy.advisory_tokens,
                    "Zone threshold: advisory pressure starts here (estimated tokens)")
        ->capture_default_str();
    cmd->add_option("--involuntary-tokens", policy.involuntary_tokens,
                    "Zone threshold: automatic eviction starts here (estimated tokens)")
        ->capture_default_str();
    cmd->add_option("--aggressive-tokens", policy.aggressive_tokens,
                    "Zone threshold: emergency eviction starts here (estimated tokens)")
        ->capture_default_str();
    cmd->add_option("--aggressive-tau", policy.aggressive_tau,
                    "Relaxed age threshold used in the aggressive zone")
        ->capture_default_str();
    cmd->add_option("--aggressive-min-size", policy.aggressive_min_size,
                    "Relaxed size floor used in the aggressive zone")
        ->capture_default_str();
    cmd->add_option("--bytes-per-token", policy.bytes_per_token,
                    "Bytes per effective input token for size-based estimation")
        ->capture_default_str();
    cmd->add_flag("--pin-decay,!--no-pin-decay", policy.pin_decay_enabled,
                  "Enable pin-strength decay (halves every half-life of non-access)");
    cmd->add_option("--pin-half-life", policy.pin_half_life_turns,
                    "Turns for pin strength to halve when decay is enabled")
        ->capture_default_str();
    cmd->add_option("--pin-evict-strength", policy.pin_evict_strength,
                    "Pins weaker than this strength become evictable")
        ->capture_default_str();
    cmd->add_option("--context-window", policy.context_window_tokens,
                    "Context window size in tokens, used for fill percentage")
        ->capture_default_str();
    cmd->add_option_function<std::string>(
           "--pageable-tools",
           [&policy](const std::string& csv) {
               policy.pageable_tools.clear();
               std::stringstream ss(csv);
               std::string item;
               while (std::getline(ss, item, ','))
                   if (!item.empty()) policy.pageable_tools.insert(item);
           },
           "Comma-separated tool names classified as pageable (default Read,Write)");
    cmd->add_option_function<std::string>(
           "--protected-tools",
           [&policy](const std::string& csv) {
               policy.protected_tools.clear();
               std::stringstream ss(csv);
               std::string item;
               while (std::getline(ss, item, ','))
                   if (!item.empty()) policy.protected_tools.insert(item);
           },
           "Comma-separated tool names never evicted");
}

inline std::optional<long long> detail_field(const std::string& detail, const std::string& key) {
    auto pos = detail.find(key + "=");
    if (pos == std::string::npos) return std::nullopt;
    pos += key.size() + 1;
    auto end = pos;
    while (end < detail.size() && (std::isdigit(detail[end]) || detail[end] == '-')) ++end;
    if (end == pos) return std::nullopt;
    try {
        return std::stoll(detail.substr(pos, end - pos));
    } catch (...) {
        return std::nullopt;
    }
}

inline int write_output(const std::string& path, const std::string& text, std::ostream& out,
                        std::ostream& err) {
    if (path.empty()) {
        out << text << "\n";
        return 0;
    }
    std::ofstream f(path, std::ios::trunc);
    if (!f) {
        err << "pichay: cannot write " << path << "\n";
        return 2;
    }
    f << text << "\n";
    return 0;
}

} // namespace cli_detail

// Fault tables and cost curves rendered from a decision log.
inline json build_report(const std::vector<DecisionLogRecord>& records, const std::string& csv_path,
                         const PolicyConfig& policy) {
    long long evictions = 0, paged = 0, gc = 0, faults = 0, pins = 0, unpins = 0;
    long long bytes_saved = 0;
    std::vector<long long> baseline, managed;
    std::vector<const DecisionLogRecord*> forwards;
    for (const auto& r : records) {
        if (r.action == "evict") {
            ++evictions;
            if (r.detail.rfind("paged", 0) == 0) ++paged;
            else ++gc;
            bytes_saved -= r.bytes_delta; // eviction deltas are negative
        } else if (r.action == "fault") {
            ++faults;
        } else if (r.action == "pin") {
            ++pins;
        } else if (r.action == "unpin") {
            ++unpins;
        } else if (r.action == "forward") {
            auto recv = cli_detail::detail_field(r.detail, "received");
            auto fwd = cli_detail::detail_field(r.detail, "forwarded");
            if (recv && fwd) {
                auto advisory = cli_detail::detail_field(r.detail, "advisory").value_or(0);
                auto defs = cli_detail::detail_field(r.detail, "phantom_defs").value_or(0);
                auto injected = cli_detail::detail_field(r.detail, "injected").value_or(0);
                baseline.push_back(*recv);
                // advisory and phantom additions are proxy overhead, not
                // client savings; exclude them from the managed size
                managed.push_back(*fwd - advisory - defs - injected);
                forwards.push_back(&r);
            }
        }
    }
    json report;
    report["evictions"] = {{"total", evictions}, {"paged", paged}, {"gc", gc}};
    report["faults"] = faults;
    report["pins"] = pins;
    report["unpins"] = unpins;
    report["fault_rate_total"] =
        evictions > 0 ? json(static_cast<double>(faults) / evictions) : json(nullptr);
    report["fault_rate_paged"] =
        paged > 0 ? json(static_cast<double>(faults) / paged) : json(nullptr);
    report["bytes_saved"] = bytes_saved;

    if (!baseline.empty()) {
        CostCurve curve = cost_curve(baseline, managed);
        report["cost_curve"] = {
            {"requests", baseline.size()},
            {"baseline_bytes", curve.baseline_cumulative.back()},
            {"managed_bytes", curve.managed_cumulative.back()},
            {"baseline_tokens", estimate_tokens(curve.baseline_cumulative.back(), policy)},
            {"managed_tokens", estimate_tokens(curve.managed_cumulative.back(), policy)},
            {"reduction", curve.reduction},
            {"mean_per_turn_reduction", curve.mean_per_turn_reduction}};
        if (!csv_path.empty()) {
            std::ofstream csv(csv_path, std::ios::trunc);
            csv << "request,session_id,turn,baseline_bytes,managed_bytes,baseline_cumulative,"
                   "managed_cumulative,baseline_tokens,managed_tokens\n";
            for (std::size_t i = 0; i < baseline.size(); ++i) {
                csv << i << ',' << forwards[i]->session_id << ',' << forwards[i]->turn << ','
                    << baseline[i] << ',' << managed[i] << ',' << curve.baseline_cumulative[i]
                    << ',' << curve.managed_cumulative[i] << ','
                    << estimate_tokens(curve.baseline_cumulative[i], policy) << ','
                    << estimate_tokens(curve.managed_cumulative[i], policy) << '\n';
            }
        }
    }
    return report;
}

// Single entry point behind the binary; also invoked in-process by tests.
// Exit codes: 0 success, 1 usage error, 2 runtime failure.
inline int run_cli(std::vector<std::string> args, std::ostream& out, std::ostream& err) {
    CLI::App app{"pichay: demand paging for LLM context windows"};
    app.require_subcommand(1);
    app.set_config("--config", "", "Flat key=value configuration file");
    app.allow_config_extras(CLI::config_extras_mode::ignore_all);

    ProxyConfig config;
    std::vector<std::string> traces;
    std::vector<std::string> probe_files;
    std::string out_path, csv_path, report_log_path, mode_name = "observe";
    long long belady_capacity = 0;

    auto* serve = app.add_subcommand("serve", "Run the interposition proxy");
    serve->fallthrough();
    serve->add_option("--listen", config.listen_address, "host:port to listen on")
        ->capture_default_str();
    serve->add_option("--upstream", config.upstream_base_url, "Upstream base URL")
        ->envname("PICHAY_UPSTREAM")
        ->required();
    serve->add_option("--mode", mode_name, "observe | trim | compact")
        ->envname("PICHAY_MODE")
        ->check(CLI::IsMember({"observe", "trim", "compact"}))
        ->capture_default_str();
    serve->add_option("--checkpoint-dir", config.checkpoint_dir, "Checkpoint directory")
        ->envname("PICHAY_CHECKPOINT_DIR")
        ->capture_default_str();
    serve->add_option("--log", config.log_path, "Decision log path (JSONL)")
        ->envname("PICHAY_LOG");
    serve->add_flag("--phantom,!--no-phantom", config.phantom_enabled,
                    "Offer the phantom memory tools to the model");
    serve->add_option("--session-header", config.session_header,
                      "Header carrying an explicit session id")
        ->capture_default_str();
    cli_detail::add_policy_flags(serve, config.policy);

    auto* replay_cmd = app.add_subcommand("replay", "Replay recorded traces through the pager");
    replay_cmd->fallthrough();
    replay_cmd->add_option("--traces", traces, "Transcript JSONL files")
        ->required()
        ->expected(-1);
    replay_cmd->add_option("--out", out_path, "Write the report JSON here instead of stdout");
    replay_cmd->add_option("--belady-capacity", belady_capacity,
                           "Also compute a Belady MIN fault baseline at this page capacity");
    cli_detail::add_policy_flags(replay_cmd, config.policy);

    auto* probe = app.add_subcommand("probe", "Per-session transcript metrics");
    probe->fallthrough();
    probe->add_option("files", probe_files, "Transcript JSONL files")->required()->expected(-1);
    probe->add_option("--out", out_path, "Write the report JSON here instead of stdout");

    auto* report_cmd = app.add_subcommand("report", "Render fault tables and cost curves");
    report_cmd->fallthrough();
    report_cmd->add_option("--log", report_log_path, "Decision log to analyze")->required();
    report_cmd->add_option("--csv", csv_path, "Emit per-request cost curve rows as CSV");
    report_cmd->add_option("--out", out_path, "Write the report JSON here instead of stdout");
    cli_detail::add_policy_flags(report_cmd, config.policy);

    std::vector<const char*> argv;
    argv.push_back("pichay");
    for (const auto& a : args) argv.push_back(a.c_str());
    try {
        app.parse(static_cast<int>(argv.size()), argv.data());
    } catch (const CLI::CallForHelp& e) {
        out << app.help();
        return 0;
    } catch (const CLI::ParseError& e) {
        err << "pichay: " << e.what() << "\n";
        err << app.help();
        return 1;
    }

    try {
        if (serve->parsed()) {
            config.mode = proxy_mode_from(mode_name).value_or(ProxyMode::observe);
            ProxyServer server(config);
            if (!server.start()) {
                err << "pichay: cannot bind " << config.listen_address << "\n";
                return 2;
            }
            out << "pichay: listening on " << server.host() << ":" << server.port() << " mode="
                << to_string(config.mode) << " upstream=" << config.upstream_base_url << "\n";
            std::signal(SIGINT, cli_detail::handle_interrupt);
            std::signal(SIGTERM, cli_detail::handle_interrupt);
            while (!cli_detail::g_interrupted.load())
                std::this_thread::sleep_for(std::chrono::milliseconds(100));
            server.stop();
            return 0;
        }
        if (replay_cmd->parsed()) {
            std::optional<std::size_t> capacity;
            if (belady_capacity > 0) capacity = static_cast<std::size_t>(belady_capacity);
            // directories expand to their .jsonl files
            std::vector<std::string> files;
            for (const auto& t : traces) {
                namespace fs = std::filesystem;
                if (fs::is_directory(t)) {
                    std::vector<std::string> found;
                    for (const auto& entry : fs::directory_iterator(t))
                        if (entry.is_regular_file() && entry.path().extension() == ".jsonl")
                            found.push_back(entry.path().string());
                    std::sort(found.begin(), found.end());
                    files.insert(files.end(), found.begin(), found.end());
                } else {
                    files.push_back(t);
                }
            }
            ReplayReport report = replay(files, config.policy, capacity);
            return cli_detail::write_output(out_path, to_json(report).dump(2), out, err);
        }
        if (probe->parsed()) {
            json result = json::array();
            for (const auto& path : probe_files) {
                Transcript t = load_transcript(path); // throws on missing file
                auto amp = amplification_factor(t);
                auto shares = tool_overhead(t);
                result.push_back(json{{"file", path},
                                      {"messages", t.messages.size()},
                                      {"amplification_factor", amp.factor},
                                      {"tool_results", amp.tool_results},
                                      {"handle_blocks_seen", amp.handle_blocks_seen},
                                      {"tool_result_bytes", amp.bytes},
                                      {"share_tool_result", shares.tool_result},
                                      {"share_assistant_text", shares.assistant_text},
                                      {"share_user_text", shares.user_text}});
            }
            return cli_detail::write_output(out_path, result.dump(2), out, err);
        }
        if (report_cmd->parsed()) {
            auto records = load_decision_log(report_log_path);
            json report = build_report(records, csv_path, config.policy);
            return cli_detail::write_output(out_path, report.dump(2), out, err);
        }
    } catch (const std::exception& e) {
        err << "pichay: " << e.what() << "\n";
        return 2;
    }
    return 1;
}

} // namespace pichay
