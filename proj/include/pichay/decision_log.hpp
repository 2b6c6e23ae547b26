#pragma once

#include "pichay/util.hpp"
#include "pichay/wire.hpp"

#include <fstream>
#include <mutex>
#include <string>
#include <vector>

namespace pichay {

// One line of the append-only JSONL decision log; one record per decision.
struct DecisionLogRecord {
    std::string timestamp;
    std::string session_id;
    int turn = 0;
    std::string zone;
    std::string action; // evict|fault|pin|unpin|stub|dedup|directive|phantom|advisory|forward
    std::string subject;
    long long bytes_delta = 0;
    std::string detail;
};

inline json to_json(const DecisionLogRecord& r) {
    return json{{"timestamp", r.timestamp}, {"session_id", r.session_id}, {"turn", r.turn},
                {"zone", r.zone},           {"action", r.action},         {"subject", r.subject},
                {"bytes_delta", r.bytes_delta}, {"detail", r.detail}};
}

inline DecisionLogRecord decision_record_from(const json& j) {
    DecisionLogRecord r;
    r.timestamp = j.value("timestamp", "");
    r.session_id = j.value("session_id", "");
    r.turn = j.value("turn", 0);
    r.zone = j.value("zone", "");
    r.action = j.value("action", "");
    r.subject = j.value("subject", "");
    r.bytes_delta = j.value("bytes_delta", 0ll);
    r.detail = j.value("detail", "");
    return r;
}

// Log I/O failures never block decisions; they are counted instead.
class DecisionLog {
public:
    DecisionLog() = default;
    explicit DecisionLog(const std::string& path) { open(path); }

    void open(const std::string& path) {
        std::lock_guard<std::mutex> lock(mutex_);
        path_ = path;
        if (!path.empty()) out_.open(path, std::ios::app);
    }

    void append(const DecisionLogRecord& record) {
        std::lock_guard<std::mutex> lock(mutex_);
        if (!out_.is_open()) {
            if (!path_.empty()) ++failures_;
            return;
        }
        out_ << to_json(record).dump() << '\n';
        out_.flush();
        if (!out_) {
            ++failures_;
            out_.clear();
        }
    }

    void append_all(const std::vector<DecisionLogRecord>& records) {
        for (const auto& r : records) append(r);
    }

    long long failures() const {
        std::lock_guard<std::mutex> lock(mutex_);
        return failures_;
    }

private:
    mutable std::mutex mutex_;
    std::string path_;
    std::ofstream out_;
    long long failures_ = 0;
};

inline std::vector<DecisionLogRecord> load_decision_log(const std::string& path) {
    std::vector<DecisionLogRecord> out;
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open decision log " + path);
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        json j = json::parse(line, nullptr, false);
        if (j.is_discarded() || !j.is_object()) continue;
        out.push_back(decision_record_from(j));
    }
    return out;
}

} // namespace pichay
