#pragma once

#include "httplib.h"
#include "pichay/cooperative.hpp"
#include "pichay/pipeline.hpp"
#include "pichay/sse.hpp"

#include <atomic>
#include <condition_variable>
#include <deque>
#include <filesystem>
#include <memory>
#include <mutex>
#include <string>
#include <thread>
#include <unordered_map>

namespace pichay {

// Incremental SSE interceptor: complete events pass through (or are
// withheld) as they arrive; nothing waits for end-of-stream unless a
// phantom tool_use is mid-flight. A malformed event degrades the rest of
// the stream to raw passthrough.
class StreamInterceptor {
public:
    explicit StreamInterceptor(bool enabled) : enabled_(enabled) {}

    std::string feed(std::string_view chunk) {
        if (!enabled_ || degraded_) return std::string(chunk);
        buffer_ += chunk;
        std::string out;
        std::size_t pos = 0;
        while (true) {
            std::size_t end = buffer_.find("\n\n", pos);
            if (end == std::string_view::npos) break;
            std::string_view one(buffer_.data() + pos, end + 2 - pos);
            out += process_event(one);
            pos = end + 2;
            if (degraded_) {
                out += buffer_.substr(pos);
                pos = buffer_.size();
                break;
            }
        }
        buffer_.erase(0, pos);
        return out;
    }

    std::string finish() {
        std::string out;
        if (!buffer_.empty()) {
            if (!enabled_ || degraded_)
                out = buffer_;
            else
                out = process_event(buffer_);
            buffer_.clear();
        }
        return out;
    }

    std::vector<PhantomCall> take_calls() { return std::move(transform_.calls); }
    std::optional<long long> usage_tokens() const { return transform_.usage_tokens; }

private:
    std::string process_event(std::string_view text) {
        auto events = parse_sse_events(text);
        std::string out;
        for (auto& ev : events) {
            bool has_data = ev.raw.find("data:") != std::string::npos;
            if (has_data && !ev.parsed) {
                degraded_ = true;
                out += ev.raw;
                continue;
            }
            for (auto& emitted : transform_.process(std::move(ev)))
                out += serialize_sse_event(emitted);
        }
        return out;
    }

    bool enabled_;
    bool degraded_ = false;
    std::string buffer_;
    detail::StreamTransform transform_;
};

namespace detail {

struct SessionEntry {
    std::mutex mutex;
    SessionState state;
    bool loaded = false;
};

class SessionRegistry {
public:
    std::shared_ptr<SessionEntry> acquire(const std::string& id) {
        std::lock_guard<std::mutex> lock(mutex_);
        auto& entry = entries_[id];
        if (!entry) entry = std::make_shared<SessionEntry>();
        return entry;
    }

private:
    std::mutex mutex_;
    std::unordered_map<std::string, std::shared_ptr<SessionEntry>> entries_;
};

// Single-producer single-consumer byte queue bridging the upstream receive
// thread and the client-facing content provider.
class ByteQueue {
public:
    void push(std::string bytes) {
        {
            std::lock_guard<std::mutex> lock(mutex_);
            if (!bytes.empty()) chunks_.push_back(std::move(bytes));
        }
        cv_.notify_one();
    }
    void close() {
        {
            std::lock_guard<std::mutex> lock(mutex_);
            closed_ = true;
        }
        cv_.notify_one();
    }
    // Blocks until data or close; empty result means finished.
    std::string pop() {
        std::unique_lock<std::mutex> lock(mutex_);
        cv_.wait(lock, [&] { return !chunks_.empty() || closed_; });
        if (chunks_.empty()) return {};
        std::string out = std::move(chunks_.front());
        chunks_.pop_front();
        return out;
    }

private:
    std::mutex mutex_;
    std::condition_variable cv_;
    std::deque<std::string> chunks_;
    bool closed_ = false;
};

inline bool is_hop_header(const std::string& name) {
    static const std::set<std::string> hop{"host",       "content-length", "connection",
                                           "keep-alive", "transfer-encoding", "te",
                                           "upgrade",    "proxy-authorization"};
    std::string lower;
    for (char c : name) lower.push_back(static_cast<char>(std::tolower(c)));
    return hop.count(lower) > 0;
}

} // namespace detail

// The interposition service. Receives client requests, runs the pipeline,
// forwards upstream, intercepts the response stream, and logs decisions.
class ProxyServer {
public:
    explicit ProxyServer(ProxyConfig config) : config_(std::move(config)), log_(config_.log_path) {
        server_.Post(R"(.*)", [this](const httplib::Request& req, httplib::Response& res) {
            handle(req, res);
        });
    }

    ~ProxyServer() { stop(); }

    // Binds (an ephemeral port when the configured one is 0) and serves on a
    // background thread.
    bool start() {
        auto colon = config_.listen_address.rfind(':');
        std::string host = colon == std::string::npos ? config_.listen_address
                                                      : config_.listen_address.substr(0, colon);
        int port = colon == std::string::npos ? 0 : std::stoi(config_.listen_address.substr(colon + 1));
        if (host.empty()) host = "127.0.0.1";
        if (port == 0) {
            port_ = server_.bind_to_any_port(host.c_str());
            if (port_ < 0) return false;
        } else {
            if (!server_.bind_to_port(host.c_str(), port)) return false;
            port_ = port;
        }
        host_ = host;
        thread_ = std::thread([this] { server_.listen_after_bind(); });
        server_.wait_until_ready();
        return true;
    }

    void stop() {
        if (thread_.joinable()) {
            server_.stop();
            thread_.join();
        }
    }

    int port() const { return port_; }
    const std::string& host() const { return host_; }
    DecisionLog& log() { return log_; }

private:
    void handle(const httplib::Request& req, httplib::Response& res) {
        const std::string& raw = req.body;
        std::string session_id = derive_session_id(raw, req.get_header_value(config_.session_header));

        auto entry = registry_.acquire(session_id);
        auto lock = std::make_shared<std::unique_lock<std::mutex>>(entry->mutex);
        SessionState& state = entry->state;
        if (!entry->loaded) {
            namespace fs = std::filesystem;
            std::string path =
                (fs::path(config_.checkpoint_dir) / (session_id + ".json")).string();
            state = checkpoint_load(path);
            state.session_id = session_id;
            entry->loaded = true;
        }

        PipelineResult pipeline = process_request(state, raw, config_);
        log_.append_all(pipeline.records);

        httplib::Headers headers;
        for (const auto& [name, value] : req.headers)
            if (!detail::is_hop_header(name)) headers.emplace(name, value);

        httplib::Client client(config_.upstream_base_url);
        client.set_read_timeout(300, 0);
        std::string content_type = req.get_header_value("Content-Type");
        if (content_type.empty()) content_type = "application/json";
        std::string path = req.path;

        const bool intercept = !pipeline.fail_open && config_.mode == ProxyMode::compact &&
                               config_.phantom_enabled;

        if (pipeline.stream) {
            relay_stream(std::move(client), path, headers, pipeline, content_type, intercept,
                         entry, lock, res);
            return;
        }

        auto upstream = client.Post(path, headers, pipeline.forwarded_body, content_type);
        if (!upstream) {
            res.status = 502;
            res.set_content("upstream unreachable: " + httplib::to_string(upstream.error()),
                            "text/plain");
            finish_request(state, {}, std::nullopt, pipeline);
            return;
        }
        std::string body = upstream->body;
        std::vector<PhantomCall> calls;
        std::optional<long long> usage;
        if (intercept && upstream->status == 200) {
            json parsed = json::parse(body, nullptr, false);
            if (!parsed.is_discarded() && parsed.is_object()) {
                calls = intercept_response_json(parsed, &usage);
                if (!calls.empty()) body = parsed.dump();
            }
        }
        res.status = upstream->status;
        std::string up_type = upstream->get_header_value("Content-Type");
        res.set_content(body, up_type.empty() ? "application/json" : up_type.c_str());
        finish_request(state, calls, usage, pipeline);
    }

    void relay_stream(httplib::Client&& client, const std::string& path,
                      const httplib::Headers& headers, const PipelineResult& pipeline,
                      const std::string& content_type, bool intercept,
                      std::shared_ptr<detail::SessionEntry> entry,
                      std::shared_ptr<std::unique_lock<std::mutex>> lock, httplib::Response& res) {
        struct Relay {
            detail::ByteQueue queue;
            StreamInterceptor interceptor;
            std::thread thread;
            httplib::Client client;
            std::mutex ready_mutex;
            std::condition_variable ready_cv;
            bool ready = false;
            int status = 502;
            std::string response_content_type = "text/event-stream";
            std::string error_body;

            Relay(bool on, httplib::Client&& c) : interceptor(on), client(std::move(c)) {}
        };
        auto relay = std::make_shared<Relay>(intercept, std::move(client));
        std::string body = pipeline.forwarded_body;

        relay->thread = std::thread([relay, path, headers, body, content_type] {
            httplib::Request upstream_req;
            upstream_req.method = "POST";
            upstream_req.path = path;
            upstream_req.headers = headers;
            upstream_req.body = body;
            upstream_req.set_header("Content-Type", content_type);
            upstream_req.response_handler = [relay](const httplib::Response& upstream) {
                {
                    std::lock_guard<std::mutex> g(relay->ready_mutex);
                    relay->status = upstream.status;
                    auto ct = upstream.get_header_value("Content-Type");
                    if (!ct.empty()) relay->response_content_type = ct;
                    relay->ready = true;
                }
                relay->ready_cv.notify_one();
                return true;
            };
            upstream_req.content_receiver = [relay](const char* data, size_t len, uint64_t,
                                                    uint64_t) {
                relay->queue.push(relay->interceptor.feed(std::string_view(data, len)));
                return true;
            };
            auto result = relay->client.send(upstream_req);
            if (!result) {
                std::lock_guard<std::mutex> g(relay->ready_mutex);
                relay->error_body = "upstream unreachable: " + httplib::to_string(result.error());
                relay->ready = true;
                relay->ready_cv.notify_one();
            }
            relay->queue.push(relay->interceptor.finish());
            relay->queue.close();
        });

        {
            std::unique_lock<std::mutex> g(relay->ready_mutex);
            relay->ready_cv.wait(g, [&] { return relay->ready; });
        }
        if (!relay->error_body.empty()) {
            relay->thread.join();
            res.status = 502;
            res.set_content(relay->error_body, "text/plain");
            finish_request(entry->state, {}, std::nullopt, pipeline);
            return;
        }

        res.status = relay->status;
        SessionState* state = &entry->state;
        PipelineResult pipeline_copy = pipeline;
        ProxyServer* self = this;
        res.set_chunked_content_provider(
            relay->response_content_type,
            [relay](std::size_t, httplib::DataSink& sink) {
                std::string chunk = relay->queue.pop();
                if (chunk.empty()) {
                    sink.done();
                    return true;
                }
                sink.os.write(chunk.data(), static_cast<std::streamsize>(chunk.size()));
                return static_cast<bool>(sink.os);
            },
            [relay, entry, lock, state, pipeline_copy, self](bool) {
                if (relay->thread.joinable()) relay->thread.join();
                self->finish_request(*state, relay->interceptor.take_calls(),
                                     relay->interceptor.usage_tokens(), pipeline_copy);
                // lock releases with the last shared reference
            });
    }

    // Post-response bookkeeping: phantom execution, checkpoint, final log
    // flush. Checkpoint failures never surface to the client.
    void finish_request(SessionState& state, const std::vector<PhantomCall>& calls,
                        std::optional<long long> usage, const PipelineResult& pipeline) {
        std::vector<DecisionLogRecord> records;
        absorb_response_effects(state, calls, usage, pipeline.turn, records);
        log_.append_all(records);
        if (!pipeline.fail_open && config_.mode != ProxyMode::observe) {
            try {
                checkpoint_save(state);
            } catch (const std::exception& e) {
                std::fprintf(stderr, "pichay: checkpoint failed: %s\n", e.what());
            }
        }
    }

    ProxyConfig config_;
    DecisionLog log_;
    detail::SessionRegistry registry_;
    httplib::Server server_;
    std::thread thread_;
    std::string host_ = "127.0.0.1";
    int port_ = -1;
};

} // namespace pichay
