#pragma once

#include <chrono>
#include <functional>
#include <string>
#include <thread>
#include <utility>

#include <httplib.h>

#include "medgrim/error.hpp"

namespace medgrim {

struct RetryPolicy {
    int max_retries = 2;
    std::chrono::milliseconds initial_backoff{250};
    double multiplier = 2.0;
    // Replaceable so tests do not sleep.
    std::function<void(std::chrono::milliseconds)> sleep = [](std::chrono::milliseconds d) {
        std::this_thread::sleep_for(d);
    };
};

struct HttpResult {
    int status = 0;
    std::string body;
    std::string transport_error;
    int attempts = 0;

    bool ok() const noexcept { return transport_error.empty() && status >= 200 && status < 300; }
    bool transient() const noexcept { return !transport_error.empty() || status >= 500 || status == 429; }

    std::string describe() const {
        if (!transport_error.empty()) return transport_error;
        return "HTTP " + std::to_string(status);
    }
};

// "http://host:port/prefix" -> ("http://host:port", "/prefix")
inline std::pair<std::string, std::string> split_base_url(const std::string& url) {
    const auto scheme_end = url.find("://");
    if (scheme_end == std::string::npos) throw Error(ErrorCode::InvalidArgument, "URL lacks a scheme: " + url);
    const auto path_start = url.find('/', scheme_end + 3);
    if (path_start == std::string::npos) return {url, ""};
    std::string prefix = url.substr(path_start);
    while (!prefix.empty() && prefix.back() == '/') prefix.pop_back();
    return {url.substr(0, path_start), prefix};
}

/// POSTs a JSON body, retrying transport failures, 5xx and 429 with
/// exponential backoff. Returns the last result; callers map failures onto
/// their own error codes.
inline HttpResult post_json(const std::string& base_url, const std::string& path, const std::string& body,
                            const httplib::Headers& headers, std::chrono::milliseconds timeout,
                            const RetryPolicy& policy) {
    const auto [origin, prefix] = split_base_url(base_url);
    HttpResult result;
    auto backoff = policy.initial_backoff;
    for (int attempt = 0; attempt <= policy.max_retries; ++attempt) {
        if (attempt > 0) {
            if (policy.sleep) policy.sleep(backoff);
            backoff = std::chrono::milliseconds(static_cast<long long>(backoff.count() * policy.multiplier));
        }
        httplib::Client client(origin);
        client.set_connection_timeout(timeout);
        client.set_read_timeout(timeout);
        client.set_write_timeout(timeout);
        result = HttpResult{};
        result.attempts = attempt + 1;
        auto res = client.Post(prefix + path, headers, body, "application/json");
        if (!res) {
            result.transport_error = "transport error: " + httplib::to_string(res.error());
        } else {
            result.status = res->status;
            result.body = res->body;
        }
        if (result.ok() || !result.transient()) break;
    }
    return result;
}

inline bool get_ok(const std::string& base_url, const std::string& path, std::chrono::milliseconds timeout) {
    try {
        const auto [origin, prefix] = split_base_url(base_url);
        httplib::Client client(origin);
        client.set_connection_timeout(timeout);
        client.set_read_timeout(timeout);
        auto res = client.Get(prefix + path);
        return res && res->status >= 200 && res->status < 300;
    } catch (const Error&) {
        return false;
    }
}

}  // namespace medgrim
