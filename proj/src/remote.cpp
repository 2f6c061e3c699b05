#include "csd/remote.hpp"

#include <cmath>

#include "httplib.h"
#include "json.hpp"

namespace csd {

using nlohmann::json;

namespace {

std::unique_ptr<httplib::Client> make_client(const RemoteModelSpec& spec) {
  auto client = std::make_unique<httplib::Client>(spec.base_url);
  if (!client->is_valid()) throw ConfigError("invalid remote base_url '" + spec.base_url + "'");
  const auto secs = std::chrono::duration_cast<std::chrono::seconds>(spec.timeout);
  const auto usecs = std::chrono::duration_cast<std::chrono::microseconds>(spec.timeout - secs);
  client->set_connection_timeout(secs.count(), usecs.count());
  client->set_read_timeout(secs.count(), usecs.count());
  client->set_write_timeout(secs.count(), usecs.count());
  client->set_keep_alive(true);
  client->set_tcp_nodelay(true);
  return client;
}

std::string error_detail(const httplib::Response& res) {
  try {
    auto j = json::parse(res.body);
    if (j.is_object() && j.contains("error") && j["error"].is_string()) return j["error"].get<std::string>();
  } catch (const json::exception&) {
  }
  return res.body.substr(0, 200);
}

// Sends one request with the retry budget. Connection failures, timeouts and
// 5xx responses are retried; 4xx responses are protocol errors.
template <typename Send>
httplib::Response send_with_retries(const RemoteModelSpec& spec, const std::string& what, Send&& send) {
  std::string last;
  for (int attempt = 0; attempt <= spec.retries; ++attempt) {
    httplib::Result res = send();
    if (!res) {
      last = httplib::to_string(res.error());
      continue;
    }
    if (res->status >= 500) {
      last = "HTTP " + std::to_string(res->status) + ": " + error_detail(*res);
      continue;
    }
    if (res->status != 200)
      throw ProtocolError(what + " rejected with HTTP " + std::to_string(res->status) + ": " + error_detail(*res));
    return *res;
  }
  throw RemoteUnavailable(what + " at " + spec.base_url + " failed after " + std::to_string(spec.retries + 1) +
                          " attempt(s): " + last);
}

ServerInfo parse_info(const std::string& body) {
  ServerInfo info;
  try {
    auto j = json::parse(body);
    info.vocab_size = j.at("vocab_size").get<std::size_t>();
    info.name = j.at("name").get<std::string>();
    info.deterministic = j.value("deterministic", true);
  } catch (const json::exception& e) {
    throw ProtocolError(std::string("malformed /v1/info response: ") + e.what());
  }
  return info;
}

}  // namespace

ServerInfo handshake(const RemoteModelSpec& spec) {
  auto client = make_client(spec);
  auto res = send_with_retries(spec, "GET /v1/info", [&] { return client->Get("/v1/info"); });
  ServerInfo info = parse_info(res.body);
  if (info.vocab_size != spec.vocab_size)
    throw ConfigError("remote vocabulary size mismatch: spec expects " + std::to_string(spec.vocab_size) +
                      ", server '" + info.name + "' reports " + std::to_string(info.vocab_size));
  return info;
}

std::vector<Distribution> parse_score_response(const std::string& body, std::size_t expected_rows,
                                               std::size_t vocab_size) {
  json j;
  try {
    j = json::parse(body);
  } catch (const json::exception& e) {
    throw ProtocolError(std::string("score response is not JSON: ") + e.what());
  }
  if (!j.is_object() || !j.contains("dists") || !j["dists"].is_array())
    throw ProtocolError("score response has no \"dists\" array");
  const auto& rows = j["dists"];
  if (rows.size() != expected_rows)
    throw ProtocolError("score response has " + std::to_string(rows.size()) + " rows, expected " +
                        std::to_string(expected_rows));
  std::vector<Distribution> out;
  out.reserve(expected_rows);
  for (std::size_t r = 0; r < rows.size(); ++r) {
    const auto& row = rows[r];
    auto bad = [&](const std::string& why) { return ProtocolError("row " + std::to_string(r) + ": " + why); };
    if (!row.is_array()) throw bad("not an array");
    if (row.size() != vocab_size)
      throw bad("has " + std::to_string(row.size()) + " entries, expected " + std::to_string(vocab_size));
    std::vector<double> probs;
    probs.reserve(vocab_size);
    double sum = 0.0;
    for (const auto& v : row) {
      if (!v.is_number()) throw bad("non-numeric entry");
      const double x = v.get<double>();
      if (!std::isfinite(x) || x < 0.0) throw bad("entry outside [0, inf)");
      probs.push_back(x);
      sum += x;
    }
    if (std::abs(sum - 1.0) > 1e-6) throw bad("mass " + std::to_string(sum) + " is not within 1e-6 of 1");
    if (std::abs(sum - 1.0) > 1e-12)
      for (double& x : probs) x /= sum;
    out.emplace_back(std::move(probs));
  }
  return out;
}

RemoteModel::RemoteModel(RemoteModelSpec spec, ServerInfo info)
    : spec_(std::move(spec)),
      info_(std::move(info)),
      name_(spec_.name.empty() ? info_.name : spec_.name),
      vocab_(Vocab::opaque(spec_.vocab_size)),
      client_(make_client(spec_)) {}

RemoteModel::~RemoteModel() = default;

std::shared_ptr<RemoteModel> RemoteModel::connect(const RemoteModelSpec& spec) {
  if (spec.vocab_size < 2) throw ConfigError("remote model needs vocab_size >= 2");
  if (spec.retries < 0) throw ConfigError("remote retry budget must be >= 0");
  if (spec.cost_weight < 0.0) throw ConfigError("remote cost_weight must be >= 0");
  ServerInfo info = handshake(spec);
  return std::shared_ptr<RemoteModel>(new RemoteModel(spec, std::move(info)));
}

std::vector<Distribution> RemoteModel::do_evaluate(std::span<const TokenId> tokens, std::size_t start) const {
  json body;
  body["tokens"] = std::vector<TokenId>(tokens.begin(), tokens.end());
  body["start"] = start;
  const std::string payload = body.dump();
  std::lock_guard lock(mu_);
  auto res = send_with_retries(spec_, "POST /v1/score",
                               [&] { return client_->Post("/v1/score", payload, "application/json"); });
  return parse_score_response(res.body, tokens.size() - start + 2, vocab_.size());
}

}  // namespace csd
