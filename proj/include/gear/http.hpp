#pragma once

// HTTP clients for OpenAI-style chat-completions and embeddings endpoints.

#include <chrono>
#include <string>
#include <string_view>
#include <thread>
#include <utility>

#include <httplib.h>
#include <json.hpp>

#include "gear/embed.hpp"
#include "gear/error.hpp"
#include "gear/llmgen.hpp"

namespace gear {

/// "https://host:port/v1" -> {"https://host:port", "/v1"}.
struct EndpointUrl {
  std::string origin;
  std::string base_path;
};

inline EndpointUrl split_endpoint(std::string_view url) {
  const auto scheme_end = url.find("://");
  if (scheme_end == std::string_view::npos) throw ConfigError("endpoint '" + std::string(url) + "' lacks a scheme");
  const auto path_start = url.find('/', scheme_end + 3);
  EndpointUrl out;
  out.origin = std::string(url.substr(0, path_start));
  out.base_path = path_start == std::string_view::npos ? "" : std::string(url.substr(path_start));
  while (!out.base_path.empty() && out.base_path.back() == '/') out.base_path.pop_back();
  return out;
}

namespace detail {

inline httplib::Result post_json(const EndpointUrl& ep, const std::string& path, const std::string& api_key,
                                 const std::string& body, std::chrono::milliseconds timeout) {
  httplib::Client client(ep.origin);
  const auto secs = static_cast<time_t>(timeout.count() / 1000);
  const auto usecs = static_cast<time_t>((timeout.count() % 1000) * 1000);
  client.set_connection_timeout(secs, usecs);
  client.set_read_timeout(secs, usecs);
  client.set_write_timeout(secs, usecs);
  httplib::Headers headers;
  if (!api_key.empty()) headers.emplace("Authorization", "Bearer " + api_key);
  return client.Post(ep.base_path + path, headers, body, "application/json");
}

inline void check_status(const httplib::Result& res, std::string_view what) {
  if (!res) throw TransportError(std::string(what) + ": " + httplib::to_string(res.error()));
  if (res->status == 200) return;
  const bool retryable = res->status == 408 || res->status == 429 || res->status >= 500;
  throw TransportError(std::string(what) + ": HTTP " + std::to_string(res->status) + " " + res->body.substr(0, 200),
                       retryable);
}

}  // namespace detail

/// POST {endpoint}/chat/completions; the response text is the first
/// choice's message content.
class HttpChatTransport : public ChatTransport {
 public:
  HttpChatTransport(std::string endpoint, std::string api_key, std::chrono::milliseconds timeout = std::chrono::seconds(60))
      : endpoint_(split_endpoint(endpoint)), api_key_(std::move(api_key)), timeout_(timeout) {}

  static nlohmann::json request_body(const ChatRequest& r) {
    return nlohmann::json{{"model", r.model},
                          {"messages", nlohmann::json::array({{{"role", "user"}, {"content", r.prompt}}})},
                          {"temperature", r.temperature}};
  }

  std::string complete(const ChatRequest& request) override {
    auto res = detail::post_json(endpoint_, "/chat/completions", api_key_, request_body(request).dump(), timeout_);
    detail::check_status(res, "chat completion");
    auto j = nlohmann::json::parse(res->body, nullptr, false);
    try {
      if (j.is_discarded()) throw TransportError("chat completion: response is not JSON");
      return j.at("choices").at(0).at("message").at("content").get<std::string>();
    } catch (const nlohmann::json::exception& e) {
      throw TransportError(std::string("chat completion: unexpected response shape: ") + e.what());
    }
  }

 private:
  EndpointUrl endpoint_;
  std::string api_key_;
  std::chrono::milliseconds timeout_;
};

/// POST {endpoint}/embeddings with {"model", "input": [...]}. Rows come back
/// in request order (reordered by "index" when the server supplies it).
class HttpEmbeddingProvider : public EmbeddingProvider {
 public:
  HttpEmbeddingProvider(std::string endpoint, std::string model_id, std::size_t dimension, std::string api_key,
                        int max_retries = 3, std::chrono::milliseconds timeout = std::chrono::seconds(60),
                        std::chrono::milliseconds retry_base = std::chrono::seconds(1))
      : endpoint_(split_endpoint(endpoint)),
        model_id_(std::move(model_id)),
        dimension_(dimension),
        api_key_(std::move(api_key)),
        max_retries_(max_retries),
        timeout_(timeout),
        retry_base_(retry_base) {
    if (dimension_ == 0) throw ConfigError("embedding dimension must be declared (> 0)");
  }

  const std::string& model_id() const override { return model_id_; }
  std::size_t dimension() const override { return dimension_; }

  Matrix embed(std::span<const std::string> inputs) override {
    const auto body = nlohmann::json{{"model", model_id_}, {"input", inputs}}.dump();
    for (int attempt = 0;; ++attempt) {
      try {
        auto res = detail::post_json(endpoint_, "/embeddings", api_key_, body, timeout_);
        detail::check_status(res, "embeddings");
        return parse_response(res->body, inputs.size());
      } catch (const TransportError& e) {
        if (!e.retryable() || attempt >= max_retries_) throw;
        std::this_thread::sleep_for(retry_base_ * (1 << std::min(attempt, 10)));
      }
    }
  }

  Matrix parse_response(const std::string& body, std::size_t expected) const {
    auto j = nlohmann::json::parse(body, nullptr, false);
    if (j.is_discarded() || !j.contains("data") || !j["data"].is_array())
      throw TransportError("embeddings: response lacks a 'data' list", false);
    const auto& data = j["data"];
    if (data.size() != expected)
      throw TransportError("embeddings: " + std::to_string(data.size()) + " rows for " + std::to_string(expected) +
                               " inputs",
                           false);
    Matrix out(expected, dimension_);
    for (std::size_t i = 0; i < data.size(); ++i) {
      const auto& item = data[i];
      const std::size_t row = item.contains("index") ? item["index"].get<std::size_t>() : i;
      if (row >= expected || !item.contains("embedding"))
        throw TransportError("embeddings: malformed row " + std::to_string(i), false);
      const auto& v = item["embedding"];
      if (v.size() != dimension_)
        throw DimensionMismatch("embeddings: row of dimension " + std::to_string(v.size()) + ", declared " +
                                std::to_string(dimension_));
      auto dst = out.row(row);
      for (std::size_t c = 0; c < dimension_; ++c) dst[c] = v[c].get<float>();
    }
    return out;
  }

 private:
  EndpointUrl endpoint_;
  std::string model_id_;
  std::size_t dimension_;
  std::string api_key_;
  int max_retries_;
  std::chrono::milliseconds timeout_;
  std::chrono::milliseconds retry_base_;
};

}  // namespace gear
