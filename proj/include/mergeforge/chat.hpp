// Copyright (c) 2026, The mergeforge authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

// Chat-completion client: POST {base_url}/chat/completions with one user
// message, bearer token from MERGEFORGE_API_KEY.

#include <chrono>
#include <cmath>
#include <cstdlib>
#include <functional>
#include <string>
#include <thread>

#include "httplib.h"
#include "json.hpp"
#include "mergeforge/error.hpp"

namespace mergeforge {

struct EndpointConfig {
    std::string base_url;
    std::string model_name;
    std::string api_key;
    int max_tokens = 256;
    double temperature = 0.0;
    std::size_t concurrency_limit = 1;
    double timeout_seconds = 60;
    std::size_t retries = 3;
    double backoff_seconds = 1.0;  // first retry delay; doubles per retry

    void validate() const {
        if (base_url.empty()) throw ValidationError("endpoint: base_url is empty");
        if (model_name.empty()) throw ValidationError("endpoint: model name is empty");
        if (max_tokens < 1) throw ValidationError("endpoint: max_tokens must be >= 1");
        if (!(temperature >= 0) || !std::isfinite(temperature)) throw ValidationError("endpoint: temperature must be >= 0");
        if (concurrency_limit < 1) throw ValidationError("endpoint: concurrency limit must be >= 1");
        if (!(timeout_seconds > 0)) throw ValidationError("endpoint: timeout must be positive");
        if (!(backoff_seconds >= 0)) throw ValidationError("endpoint: backoff must be >= 0");
    }
};

inline std::string api_key_from_env() {
    const char* v = std::getenv("MERGEFORGE_API_KEY");
    return v ? v : "";
}

class ChatError : public Error {
public:
    explicit ChatError(const std::string& what) : Error(Kind::io, what) {}
};

// One prompt in, the reply text out; throws ChatError once retries are spent.
using ChatFn = std::function<std::string(const std::string& prompt)>;

namespace detail {

struct SplitUrl {
    std::string origin;  // scheme://host[:port]
    std::string path;    // without trailing slash
};

inline SplitUrl split_url(const std::string& url) {
    const auto scheme_end = url.find("://");
    if (scheme_end == std::string::npos) throw ValidationError("endpoint: base_url needs a scheme: '" + url + "'");
    const auto path_begin = url.find('/', scheme_end + 3);
    SplitUrl s{url.substr(0, path_begin), path_begin == std::string::npos ? "" : url.substr(path_begin)};
    while (!s.path.empty() && s.path.back() == '/') s.path.pop_back();
    return s;
}

}  // namespace detail

inline nlohmann::json chat_request_body(const EndpointConfig& cfg, const std::string& prompt) {
    return {{"model", cfg.model_name},
            {"messages", nlohmann::json::array({{{"role", "user"}, {"content", prompt}}})},
            {"max_tokens", cfg.max_tokens},
            {"temperature", cfg.temperature}};
}

// A single attempt. Throws ChatError on transport failure, non-2xx or a
// reply without choices[0].message.content.
inline std::string chat_once(const EndpointConfig& cfg, const std::string& prompt) {
    const auto url = detail::split_url(cfg.base_url);
    httplib::Client client(url.origin);
    if (!client.is_valid()) throw ChatError("endpoint: unsupported base_url '" + cfg.base_url + "'");
    const auto timeout = std::chrono::duration_cast<std::chrono::microseconds>(std::chrono::duration<double>(cfg.timeout_seconds));
    client.set_connection_timeout(timeout);
    client.set_read_timeout(timeout);
    client.set_write_timeout(timeout);
    httplib::Headers headers;
    if (!cfg.api_key.empty()) headers.emplace("Authorization", "Bearer " + cfg.api_key);
    const auto res = client.Post(url.path + "/chat/completions", headers, chat_request_body(cfg, prompt).dump(),
                                 "application/json");
    if (!res) throw ChatError("request failed: " + httplib::to_string(res.error()));
    if (res->status < 200 || res->status >= 300) throw ChatError("HTTP status " + std::to_string(res->status));
    try {
        const auto body = nlohmann::json::parse(res->body);
        return body.at("choices").at(0).at("message").at("content").get<std::string>();
    } catch (const nlohmann::json::exception& e) {
        throw ChatError(std::string("malformed reply: ") + e.what());
    }
}

// Retries with exponential backoff (backoff, 2*backoff, 4*backoff, ...).
inline std::string with_retries(const EndpointConfig& cfg, const std::function<std::string()>& attempt) {
    for (std::size_t i = 0;; ++i) {
        try {
            return attempt();
        } catch (const ChatError& e) {
            if (i >= cfg.retries) {
                throw ChatError(std::string(e.what()) + " (after " + std::to_string(cfg.retries) + " retries)");
            }
        }
        std::this_thread::sleep_for(std::chrono::duration<double>(cfg.backoff_seconds * std::ldexp(1.0, static_cast<int>(i))));
    }
}

inline ChatFn http_chat(EndpointConfig cfg) {
    return [cfg = std::move(cfg)](const std::string& prompt) {
        return with_retries(cfg, [&] { return chat_once(cfg, prompt); });
    };
}

}  // namespace mergeforge
