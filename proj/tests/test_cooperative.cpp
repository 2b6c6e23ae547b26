#include "doctest.h"
#include "fixtures.hpp"
#include "pichay/cooperative.hpp"

using namespace pichay;

namespace {

std::string sse_event(const std::string& name, const json& data) {
    return "event: " + name + "\ndata: " + data.dump() + "\n\n";
}

// A streamed response: text block, then (optionally) one tool_use block.
std::string stream_fixture(bool with_tool, const std::string& tool_name,
                           const std::string& args_json) {
    std::string s;
    s += sse_event("message_start",
                   json{{"type", "message_start"},
                        {"message",
                         {{"id", "msg_1"},
                          {"usage",
                           {{"input_tokens", 50},
                            {"cache_creation_input_tokens", 10},
                            {"cache_read_input_tokens", 40}}}}}});
    s += sse_event("content_block_start",
                   json{{"type", "content_block_start"},
                        {"index", 0},
                        {"content_block", {{"type", "text"}, {"text", ""}}}});
    s += sse_event("content_block_delta",
                   json{{"type", "content_block_delta"},
                        {"index", 0},
                        {"delta", {{"type", "text_delta"}, {"text", "Working on it."}}}});
    s += sse_event("content_block_stop", json{{"type", "content_block_stop"}, {"index", 0}});
    if (with_tool) {
        s += sse_event("content_block_start",
                       json{{"type", "content_block_start"},
                            {"index", 1},
                            {"content_block",
                             {{"type", "tool_use"}, {"id", "toolu_1"}, {"name", tool_name}, {"input", json::object()}}}});
        s += sse_event("content_block_delta",
                       json{{"type", "content_block_delta"},
                            {"index", 1},
                            {"delta", {{"type", "input_json_delta"}, {"partial_json", args_json}}}});
        s += sse_event("content_block_stop", json{{"type", "content_block_stop"}, {"index", 1}});
    }
    s += sse_event("message_delta", json{{"type", "message_delta"},
                                         {"delta", {{"stop_reason", with_tool ? "tool_use" : "end_turn"}}},
                                         {"usage", {{"output_tokens", 12}}}});
    s += sse_event("message_stop", json{{"type", "message_stop"}});
    return s;
}

SessionState session_with_eviction(const std::string& path, const std::string& body,
                                   const PolicyConfig& cfg) {
    SessionState state;
    state.generation = 1;
    BlockView view;
    view.kind = BlockKind::tool_result;
    view.tool_name = "Read";
    view.args_key = path;
    view.body = body;
    view.content_bytes = body.size();
    view.turn = 0;
    auto [idx, fresh] = register_block(state, view, cfg);
    REQUIRE(fresh);
    record_eviction(state, idx, EvictionCategory::paged, std::string(body));
    return state;
}

} // namespace

TEST_CASE("phantom defs append exactly once") {
    Request req = parse_request(
        fixtures::request_doc({fixtures::user_text("x")}, fixtures::tool_fixture_18()).dump());
    CHECK(req.tools.size() == 18);
    inject_phantom_tools(req);
    CHECK(req.tools.size() == 20);
    // a client echo carrying the defs back is deduplicated to one copy each
    inject_phantom_tools(req);
    CHECK(req.tools.size() == 20);
    int phantom = 0;
    for (const auto& t : req.tools)
        if (is_phantom_tool_name(t.name)) ++phantom;
    CHECK(phantom == 2);
}

TEST_CASE("stream interception removes phantom calls and reindexes") {
    auto events = parse_sse_events(stream_fixture(true, "memory_release", R"({"paths":["/a.py"]})"));
    auto result = intercept_stream(events);
    REQUIRE(result.calls.size() == 1);
    CHECK(result.calls[0].tool == "memory_release");
    CHECK(result.calls[0].paths == std::vector<std::string>{"/a.py"});
    CHECK(result.calls[0].tool_use_id == "toolu_1");
    CHECK(result.usage_tokens == 100);

    auto blocks = reassemble_stream(result.client_events);
    REQUIRE(blocks.size() == 1);
    CHECK(blocks[0].kind == BlockKind::text);
    CHECK(blocks[0].text == "Working on it.");
    // the stop reason no longer promises a tool result the client never sees
    std::string out = serialize_sse(result.client_events);
    CHECK(out.find("tool_use") == std::string::npos);
    CHECK(out.find("end_turn") != std::string::npos);
}

TEST_CASE("streams without phantom calls pass through byte-identically") {
    std::string raw = stream_fixture(false, "", "");
    auto result = intercept_stream(parse_sse_events(raw));
    CHECK(result.calls.empty());
    CHECK(serialize_sse(result.client_events) == raw);
}

TEST_CASE("real tool calls pass through untouched") {
    std::string raw = stream_fixture(true, "Read", R"({"file_path":"/a.py"})");
    auto result = intercept_stream(parse_sse_events(raw));
    CHECK(result.calls.empty());
    CHECK(serialize_sse(result.client_events) == raw);
}

TEST_CASE("malformed streams pass through with nothing extracted") {
    std::string raw = "event: content_block_start\ndata: {broken json\n\n";
    raw += stream_fixture(true, "memory_release", R"({"paths":["/a.py"]})");
    auto result = intercept_stream(parse_sse_events(raw));
    CHECK(result.calls.empty());
    CHECK(serialize_sse(result.client_events) == raw);
}

TEST_CASE("stream conservation: client blocks plus calls equal input blocks") {
    std::string raw = stream_fixture(true, "memory_fault", R"({"paths":["/a.py","/b.py"]})");
    auto events = parse_sse_events(raw);
    auto input_blocks = reassemble_stream(events);
    auto result = intercept_stream(events);
    auto client_blocks = reassemble_stream(result.client_events);
    CHECK(client_blocks.size() + result.calls.size() == input_blocks.size());
    for (const auto& call : result.calls) {
        bool found = false;
        for (const auto& b : input_blocks)
            if (b.kind == BlockKind::tool_use && b.id == call.tool_use_id) found = true;
        CHECK(found);
    }
}

TEST_CASE("non-streamed responses are intercepted the same way") {
    json response{{"role", "assistant"},
                  {"stop_reason", "tool_use"},
                  {"usage", {{"input_tokens", 70}, {"cache_read_input_tokens", 30}}},
                  {"content", json::array({fixtures::text_block("ok"),
                                           fixtures::tool_use("t1", "memory_release",
                                                              json{{"paths", json::array({"/x"})}})})}};
    std::optional<long long> usage;
    auto calls = intercept_response_json(response, &usage);
    REQUIRE(calls.size() == 1);
    CHECK(calls[0].paths == std::vector<std::string>{"/x"});
    CHECK(usage == 100);
    CHECK(response["content"].size() == 1);
    CHECK(response["stop_reason"] == "end_turn");
}

TEST_CASE("memory_release marks resident blocks, bypassing the age threshold") {
    PolicyConfig cfg;
    SessionState state;
    state.generation = 1;
    BlockView view;
    view.kind = BlockKind::tool_result;
    view.tool_name = "Read";
    view.args_key = "/a.py";
    view.body = fixtures::file_body("a", 900);
    view.content_bytes = view.body.size();
    view.turn = 4;
    register_block(state, view, cfg);

    PhantomCall call{"memory_release", {"/a.py", "/missing.py"}, "toolu_9"};
    auto outcome = execute_phantom(state, call, 5);
    CHECK(outcome.released == 1);
    CHECK(state.blocks[0].release_requested);
    // age 1 <= tau, but the release carries it through selection anyway
    auto picked = select_evictions(state.blocks, state.fault_history, PressureZone::involuntary, 5, cfg);
    REQUIRE(picked.size() == 1);
}

TEST_CASE("memory_fault restores cached bodies and reports misses in-band") {
    PolicyConfig cfg;
    std::string body = fixtures::file_body("a", 1200);
    SessionState state = session_with_eviction("/a.py", body, cfg);

    PhantomCall call{"memory_fault", {"/a.py", "/never.py"}, "toolu_9"};
    auto outcome = execute_phantom(state, call, 3);
    CHECK(outcome.restored == 1);
    CHECK(outcome.misses == 1);
    REQUIRE(state.pending_phantom_results.size() == 1);
    const auto& pending = state.pending_phantom_results[0];
    CHECK(pending.tool_use_id.rfind("phantom-", 0) == 0);
    CHECK(pending.result_body.find(body.substr(0, 40)) != std::string::npos);
    CHECK(pending.result_body.find("content not cached; use Read /never.py") != std::string::npos);
}

TEST_CASE("pending phantom results re-inject as a coherent use/result pair") {
    PolicyConfig cfg;
    std::string body = fixtures::file_body("a", 800);
    SessionState state = session_with_eviction("/a.py", body, cfg);
    execute_phantom(state, PhantomCall{"memory_fault", {"/a.py"}, "t"}, 0);

    Request req = parse_request(fixtures::request_doc({fixtures::user_text("start"),
                                                       fixtures::assistant_text("calling memory"),
                                                       fixtures::user_text("continue")})
                                    .dump());
    index_turns(req);
    state.generation++;
    long long added = inject_pending_phantom_results(req, state, cfg);
    CHECK(added > 0);
    // the assistant message regained the tool_use; the next user message
    // now opens with the tool_result
    REQUIRE(req.messages[1].blocks.size() == 2);
    CHECK(req.messages[1].blocks[1].kind == BlockKind::tool_use);
    CHECK(req.messages[1].blocks[1].tool_name == "memory_fault");
    CHECK(req.messages[2].blocks[0].kind == BlockKind::tool_result);
    CHECK(req.messages[2].blocks[0].body.find("===") != std::string::npos);
    // idempotent across resends
    long long again = inject_pending_phantom_results(req, state, cfg);
    CHECK(again == 0);
    CHECK(req.messages[1].blocks.size() == 2);
}

TEST_CASE("cleanup tag grammar") {
    std::vector<std::string> malformed;
    auto ds = parse_cleanup_tags("All done with that file.\n"
                                 "drop: block:a1b2c3d4-7\n"
                                 "anchor: block:ffff0000-2\n"
                                 "summarize: block:abcd1234-3 \"config loader, returns defaults\"\n"
                                 "collapse: turns 3-14 \"Chose FIFO; built pager; tests pass\"\n"
                                 "collapse: turns 14-3 \"backwards\"\n"
                                 "drop: not-a-block\n",
                                 &malformed);
    REQUIRE(ds.size() == 4);
    CHECK(ds[0].kind == Directive::Kind::drop);
    CHECK(ds[0].block_id == "a1b2c3d4-7");
    CHECK(ds[1].kind == Directive::Kind::anchor);
    CHECK(ds[2].kind == Directive::Kind::summarize);
    CHECK(ds[2].text == "config loader, returns defaults");
    CHECK(ds[3].kind == Directive::Kind::collapse);
    CHECK(ds[3].start_turn == 3);
    CHECK(ds[3].end_turn == 14);
    CHECK(ds[3].text == "Chose FIFO; built pager; tests pass");
    CHECK(malformed.size() == 2);
}

TEST_CASE("directives apply as one batch with exact byte accounting") {
    PolicyConfig cfg;
    SessionState state;
    state.generation = 1;

    // 12 tool results spread over turns 0..5, sized to total exactly 40,960
    std::vector<json> msgs;
    std::size_t remaining = 40'960;
    int uid = 0;
    for (int turn = 0; turn < 6; ++turn) {
        msgs.push_back(fixtures::user_text("turn " + std::to_string(turn)));
        json blocks = json::array();
        json results = json::array();
        for (int k = 0; k < 2; ++k) {
            std::size_t size = (turn == 5 && k == 1) ? remaining : 3'413;
            remaining -= size;
            std::string id = "u" + std::to_string(uid++);
            blocks.push_back(fixtures::tool_use(id, "Read", json{{"file_path", "/f" + id}}));
            results.push_back(fixtures::tool_result(id, fixtures::file_body(id, size)));
        }
        msgs.push_back(fixtures::message("assistant", blocks));
        msgs.push_back(fixtures::message("user", results));
    }
    msgs.push_back(fixtures::user_text("turn 6: summarize now"));
    Request req = parse_request(fixtures::request_doc(msgs).dump());
    index_turns(req);
    register_blocks(state, req, cfg);

    long long result_bytes = 0;
    int result_blocks = 0;
    for (const auto& b : state.blocks)
        if (b.kind == BlockKind::tool_result) {
            result_bytes += static_cast<long long>(b.size_bytes);
            ++result_blocks;
        }
    REQUIRE(result_blocks == 12);
    REQUIRE(result_bytes == 40'960);

    std::string summary(90, 's');
    auto report = apply_directives(state, req,
                                   {Directive{Directive::Kind::collapse, "", 0, 5, summary}}, cfg);
    CHECK(report.applied == 1);
    long long expected_delta = 90;
    for (const auto& b : state.blocks)
        if (b.status == BlockStatus::collapsed) expected_delta -= static_cast<long long>(b.size_bytes);
    CHECK(report.bytes_delta == expected_delta);
    // every block in turns 0..5 collapsed; the turn-6 prompt untouched
    for (const auto& b : state.blocks) {
        if (b.turn <= 5)
            CHECK(b.status == BlockStatus::collapsed);
        else
            CHECK(b.status == BlockStatus::resident);
    }
    // the tool-result slice alone matches the fixture arithmetic
    long long result_only = 90;
    for (const auto& b : state.blocks)
        if (b.kind == BlockKind::tool_result && b.status == BlockStatus::collapsed)
            result_only -= static_cast<long long>(b.size_bytes);
    CHECK(result_only == 90 - 40'960);
}

TEST_CASE("a batch applies every valid directive and skips the bad ones") {
    PolicyConfig cfg;
    SessionState state;
    state.generation = 1;
    std::vector<json> msgs;
    for (int turn = 0; turn < 4; ++turn) {
        std::string id = "u" + std::to_string(turn);
        msgs.push_back(fixtures::user_text("turn " + std::to_string(turn)));
        msgs.push_back(fixtures::message(
            "assistant",
            json::array({fixtures::tool_use(id, "Read", json{{"file_path", "/f" + id}})})));
        msgs.push_back(fixtures::message(
            "user", json::array({fixtures::tool_result(id, fixtures::file_body(id, 1500))})));
    }
    msgs.push_back(fixtures::user_text("turn 4"));
    Request req = parse_request(fixtures::request_doc(msgs).dump());
    index_turns(req);
    register_blocks(state, req, cfg);

    std::vector<std::string> result_ids;
    for (const auto& b : state.blocks)
        if (b.kind == BlockKind::tool_result) result_ids.push_back(b.block_id);
    REQUIRE(result_ids.size() == 4);

    std::vector<Directive> batch{
        Directive{Directive::Kind::drop, result_ids[0], 0, 0, ""},
        Directive{Directive::Kind::anchor, result_ids[1], 0, 0, ""},
        Directive{Directive::Kind::summarize, result_ids[2], 0, 0, "just the config defaults"},
        Directive{Directive::Kind::drop, "eeeeeeee-9", 0, 0, ""}, // unknown id
        Directive{Directive::Kind::collapse, "", 3, 3, "turn three scaffolding"},
    };
    auto report = apply_directives(state, req, batch, cfg);
    CHECK(report.applied == 4);
    CHECK(report.skipped == 1);
    CHECK(state.find_block(result_ids[0])->status == BlockStatus::evicted);
    CHECK(state.find_block(result_ids[1])->anchored);
    CHECK(state.find_block(result_ids[2])->status == BlockStatus::summarized);
    CHECK(state.find_block(result_ids[2])->summary == "just the config defaults");
    CHECK(state.find_block(result_ids[3])->status == BlockStatus::collapsed);
    // the eviction from drop participates in fault matching like any other
    CHECK(lookup_fault(state, FaultKey{"Read", "/fu0"}) != nullptr);
}

TEST_CASE("anchored blocks survive later eviction passes") {
    PolicyConfig cfg;
    SessionState state;
    state.generation = 1;
    Request req = parse_request(
        fixtures::request_doc(
            {fixtures::user_text("t0"),
             fixtures::message("assistant", json::array({fixtures::tool_use(
                                                "u1", "Read", json{{"file_path", "/plan.md"}})})),
             fixtures::message("user", json::array({fixtures::tool_result(
                                           "u1", fixtures::file_body("plan", 2000))}))})
            .dump());
    index_turns(req);
    register_blocks(state, req, cfg);
    std::string plan_id;
    for (const auto& b : state.blocks)
        if (b.kind == BlockKind::tool_result) plan_id = b.block_id;

    auto report =
        apply_directives(state, req, {Directive{Directive::Kind::anchor, plan_id, 0, 0, ""}}, cfg);
    CHECK(report.applied == 1);
    CHECK(select_evictions(state.blocks, state.fault_history, PressureZone::involuntary, 40, cfg)
              .empty());
}

TEST_CASE("drop on a non-resident block is skipped and reported") {
    PolicyConfig cfg;
    std::string body = fixtures::file_body("x", 900);
    SessionState state = session_with_eviction("/x.py", body, cfg);
    std::string id = state.blocks[0].block_id;
    Request req = parse_request(fixtures::request_doc({fixtures::user_text("t")}).dump());
    index_turns(req);
    auto report = apply_directives(state, req, {Directive{Directive::Kind::drop, id, 0, 0, ""}}, cfg);
    CHECK(report.applied == 0);
    CHECK(report.skipped == 1);
    REQUIRE(report.notes.size() == 1);
    CHECK(report.notes[0].find("already evicted") != std::string::npos);
}

TEST_CASE("advisory renders fill, largest blocks, and the grammar") {
    PolicyConfig cfg;
    SessionState state;
    state.generation = 1;
    for (int i = 0; i < 7; ++i) {
        BlockView view;
        view.kind = BlockKind::tool_result;
        view.tool_name = "Read";
        view.args_key = "/f" + std::to_string(i);
        view.body = fixtures::file_body("f" + std::to_string(i), 1000 + 100 * i);
        view.content_bytes = view.body.size();
        view.turn = i;
        register_block(state, view, cfg);
    }
    std::string advisory = render_advisory(state, PressureZone::advisory, 75'000, cfg);
    CHECK(advisory.find("37.5% (75,000 / 200,000 tokens)") != std::string::npos);
    CHECK(advisory.find("collapse: turns <N>-<M>") != std::string::npos);
    // top five, descending by size
    auto p1 = advisory.find("1,600 bytes");
    auto p2 = advisory.find("1,500 bytes");
    auto p5 = advisory.find("1,200 bytes");
    CHECK(p1 != std::string::npos);
    CHECK(p2 != std::string::npos);
    CHECK(p5 != std::string::npos);
    CHECK(p1 < p2);
    CHECK(p2 < p5);
    CHECK(advisory.find("1,100 bytes") == std::string::npos); // sixth largest: cut

    CHECK(render_advisory(state, PressureZone::normal, 59'000, cfg).empty());
}

TEST_CASE("exactly one advisory per forwarded request") {
    PolicyConfig cfg;
    SessionState state;
    Request req = parse_request(fixtures::request_doc({fixtures::user_text("hi")}).dump());
    index_turns(req);
    std::string first = render_advisory(state, PressureZone::advisory, 61'000, cfg);
    append_advisory(req, first);
    // the client echoes it back; the proxy strips before appending a fresh one
    CHECK(strip_advisories(req) == 1);
    std::string second = render_advisory(state, PressureZone::advisory, 80'000, cfg);
    append_advisory(req, second);
    int advisories = 0;
    for (const auto& m : req.messages)
        for (const auto& b : m.blocks)
            if (is_advisory_text(b.body)) ++advisories;
    CHECK(advisories == 1);
    CHECK(serialize_request(req).find("40.0%") != std::string::npos);
}
