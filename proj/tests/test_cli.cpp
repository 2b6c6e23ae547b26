#include "doctest.h"
#include "fixtures.hpp"
#include "pichay/cli.hpp"

#include <filesystem>
#include <fstream>
#include <sstream>

using namespace pichay;

namespace {

int run(std::vector<std::string> args, std::string* out_text = nullptr,
        std::string* err_text = nullptr) {
    std::ostringstream out, err;
    int code = run_cli(std::move(args), out, err);
    if (out_text) *out_text = out.str();
    if (err_text) *err_text = err.str();
    return code;
}

std::string write_session_a() {
    namespace fs = std::filesystem;
    fs::path dir = fs::temp_directory_path() / "pichay-cli-traces";
    fs::create_directories(dir);
    std::string path = (dir / "session-a.jsonl").string();
    std::ofstream f(path, std::ios::trunc);
    for (const auto& m : fixtures::session_a_suite().transcript.messages) f << m.dump() << "\n";
    return path;
}

} // namespace

TEST_CASE("help enumerates every policy and proxy field") {
    std::string out;
    CHECK(run({"serve", "--help"}, &out) == 0);
    for (const char* flag :
         {"--listen", "--upstream", "--mode", "--checkpoint-dir", "--log", "--phantom",
          "--session-header", "--tau", "--min-size", "--advisory-tokens", "--involuntary-tokens",
          "--aggressive-tokens", "--aggressive-tau", "--aggressive-min-size", "--bytes-per-token",
          "--pin-decay", "--pin-half-life", "--pin-evict-strength", "--context-window",
          "--pageable-tools", "--protected-tools"})
        CHECK(out.find(flag) != std::string::npos);
}

TEST_CASE("unknown subcommands exit with a usage error") {
    std::string err;
    CHECK(run({"frobnicate"}, nullptr, &err) == 1);
    CHECK_FALSE(err.empty());
}

TEST_CASE("replay emits the report JSON with the documented fields") {
    std::string path = write_session_a();
    std::string out;
    int code = run({"replay", "--traces", path, "--tau", "4", "--min-size", "500",
                    "--advisory-tokens", "200", "--involuntary-tokens", "400"},
                   &out);
    REQUIRE(code == 0);
    json report = json::parse(out);
    CHECK(report["total_evictions"] == 15);
    CHECK(report["gc_evictions"] == 11);
    CHECK(report["paged_evictions"] == 4);
    CHECK(report["faults"] == 1);
    CHECK(report["fault_rate_paged"] == doctest::Approx(0.25));
    CHECK(report.contains("fault_rate_total"));
    CHECK(report.contains("bytes_evicted"));
}

TEST_CASE("flags and config files configure identical runs") {
    std::string path = write_session_a();
    namespace fs = std::filesystem;
    std::string cfg_path = (fs::temp_directory_path() / "pichay-cli.ini").string();
    {
        std::ofstream cfg(cfg_path, std::ios::trunc);
        cfg << "[replay]\ntau=4\nmin-size=500\nadvisory-tokens=200\ninvoluntary-tokens=400\n";
    }
    std::string by_flags, by_config;
    REQUIRE(run({"replay", "--traces", path, "--tau", "4", "--min-size", "500",
                 "--advisory-tokens", "200", "--involuntary-tokens", "400"},
                &by_flags) == 0);
    REQUIRE(run({"replay", "--config", cfg_path, "--traces", path}, &by_config) == 0);
    CHECK(by_flags == by_config);
}

TEST_CASE("probe reports per-session metrics and fails cleanly on missing files") {
    std::string path = write_session_a();
    std::string out;
    REQUIRE(run({"probe", path}, &out) == 0);
    json report = json::parse(out);
    REQUIRE(report.is_array());
    CHECK(report[0]["file"] == path);
    CHECK(report[0]["tool_results"].get<long long>() > 0);
    CHECK(report[0]["amplification_factor"].get<double>() > 0.0);

    std::string err;
    CHECK(run({"probe", "missing.jsonl"}, nullptr, &err) == 2);
    CHECK(err.find("missing.jsonl") != std::string::npos);
}

TEST_CASE("report renders fault tables and cost curves from a decision log") {
    namespace fs = std::filesystem;
    fs::path dir = fs::temp_directory_path() / "pichay-cli-report";
    fs::create_directories(dir);
    std::string log_path = (dir / "decisions.jsonl").string();
    {
        DecisionLog log(log_path);
        std::ofstream(log_path, std::ios::trunc); // start clean
        DecisionLog fresh(log_path);
        auto rec = [&](const std::string& action, long long delta, const std::string& detail) {
            DecisionLogRecord r;
            r.timestamp = iso8601_utc_now();
            r.session_id = "s";
            r.turn = 1;
            r.zone = "involuntary";
            r.action = action;
            r.subject = "x";
            r.bytes_delta = delta;
            r.detail = detail;
            fresh.append(r);
        };
        rec("forward", -3000, "received=10000 forwarded=7000 advisory=0 phantom_defs=0 injected=0");
        rec("evict", -5000, "paged Read /a.py");
        rec("evict", -900, "gc Bash");
        rec("fault", 0, "eviction record abc");
        rec("pin", 0, "re-read matched");
        rec("forward", -4000, "received=12000 forwarded=8000 advisory=100 phantom_defs=500 injected=0");
    }
    std::string out;
    std::string csv_path = (dir / "curve.csv").string();
    REQUIRE(run({"report", "--log", log_path, "--csv", csv_path}, &out) == 0);
    json report = json::parse(out);
    CHECK(report["evictions"]["total"] == 2);
    CHECK(report["evictions"]["paged"] == 1);
    CHECK(report["evictions"]["gc"] == 1);
    CHECK(report["faults"] == 1);
    CHECK(report["pins"] == 1);
    CHECK(report["fault_rate_paged"] == doctest::Approx(1.0));
    CHECK(report["cost_curve"]["requests"] == 2);
    CHECK(report["cost_curve"]["baseline_bytes"] == 22000);
    // managed excludes the proxy's own additions (advisory + phantom defs)
    CHECK(report["cost_curve"]["managed_bytes"] == 7000 + 8000 - 100 - 500);

    std::ifstream csv(csv_path);
    std::string header;
    std::getline(csv, header);
    CHECK(header.find("baseline_cumulative") != std::string::npos);
    int rows = 0;
    std::string line;
    while (std::getline(csv, line))
        if (!line.empty()) ++rows;
    CHECK(rows == 2);
}

TEST_CASE("replay accepts a directory of traces") {
    namespace fs = std::filesystem;
    fs::path dir = fs::temp_directory_path() / "pichay-cli-tracedir";
    fs::remove_all(dir);
    fs::create_directories(dir);
    {
        std::ofstream f((dir / "one.jsonl").string());
        for (const auto& m : fixtures::session_a_suite().transcript.messages) f << m.dump() << "\n";
    }
    {
        std::ofstream f((dir / "two.jsonl").string());
        for (const auto& m : fixtures::session_a_suite().transcript.messages) f << m.dump() << "\n";
    }
    std::string out;
    REQUIRE(run({"replay", "--traces", dir.string(), "--advisory-tokens", "200",
                 "--involuntary-tokens", "400"},
                &out) == 0);
    json report = json::parse(out);
    CHECK(report["total_evictions"] == 30); // both sessions replayed
    CHECK(report["faults"] == 2);
}

TEST_CASE("serve honors the documented environment variables") {
    namespace fs = std::filesystem;
    fs::path dir = fs::temp_directory_path() / "pichay-cli-serve";
    fs::create_directories(dir);
    setenv("PICHAY_UPSTREAM", "http://127.0.0.1:9", 1);
    setenv("PICHAY_MODE", "compact", 1);
    setenv("PICHAY_LOG", (dir / "log.jsonl").string().c_str(), 1);
    setenv("PICHAY_CHECKPOINT_DIR", (dir / "ckpt").string().c_str(), 1);
    // pre-set the interrupt flag so serve starts, reports, and exits
    cli_detail::g_interrupted.store(true);
    std::string out;
    int code = run({"serve", "--listen", "127.0.0.1:0"}, &out);
    cli_detail::g_interrupted.store(false);
    unsetenv("PICHAY_UPSTREAM");
    unsetenv("PICHAY_MODE");
    unsetenv("PICHAY_LOG");
    unsetenv("PICHAY_CHECKPOINT_DIR");
    CHECK(code == 0);
    CHECK(out.find("mode=compact") != std::string::npos);
    CHECK(out.find("upstream=http://127.0.0.1:9") != std::string::npos);
}

TEST_CASE("replay writes to a file when asked") {
    std::string path = write_session_a();
    namespace fs = std::filesystem;
    std::string out_path = (fs::temp_directory_path() / "pichay-replay-out.json").string();
    REQUIRE(run({"replay", "--traces", path, "--advisory-tokens", "200", "--involuntary-tokens",
                 "400", "--out", out_path}) == 0);
    std::ifstream in(out_path);
    json report = json::parse(in);
    CHECK(report["total_evictions"] == 15);
}
