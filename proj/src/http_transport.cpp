#include <httplib.h>
#include <json.hpp>

#include "routeforge/agents.hpp"

namespace routeforge {

HttpChatTransport::HttpChatTransport(std::string base_url, std::string path, std::string api_key,
                                     int timeout_seconds)
    : base_url_(std::move(base_url)),
      path_(std::move(path)),
      api_key_(std::move(api_key)),
      timeout_seconds_(timeout_seconds) {}

std::string HttpChatTransport::complete(const std::string& model,
                                        const std::vector<ChatMessage>& messages,
                                        double temperature, int max_tokens) {
  nlohmann::json payload;
  payload["model"] = model;
  payload["temperature"] = temperature;
  payload["max_tokens"] = max_tokens;
  payload["messages"] = nlohmann::json::array();
  for (const auto& m : messages) {
    payload["messages"].push_back({{"role", m.role}, {"content", m.content}});
  }

  httplib::Client client(base_url_);
  client.set_read_timeout(timeout_seconds_, 0);
  client.set_connection_timeout(timeout_seconds_, 0);
  httplib::Headers headers;
  if (!api_key_.empty()) headers.emplace("Authorization", "Bearer " + api_key_);

  auto res = client.Post(path_, headers, payload.dump(), "application/json");
  if (!res) {
    fail_backend("chat transport: no response from " + base_url_ + path_);
  }
  if (res->status < 200 || res->status >= 300) {
    fail_backend("chat transport: HTTP " + std::to_string(res->status) + " from " + base_url_ +
                 path_ + ": " + res->body.substr(0, 200));
  }
  auto doc = nlohmann::json::parse(res->body, nullptr, false);
  if (doc.is_discarded() || !doc.contains("choices") || !doc["choices"].is_array() ||
      doc["choices"].empty()) {
    fail_backend("chat transport: malformed completion response");
  }
  const auto& choice = doc["choices"][0];
  if (choice.contains("message") && choice["message"].contains("content") &&
      choice["message"]["content"].is_string()) {
    return choice["message"]["content"].get<std::string>();
  }
  if (choice.contains("text") && choice["text"].is_string()) {
    return choice["text"].get<std::string>();
  }
  fail_backend("chat transport: completion without content");
}

}  // namespace routeforge
