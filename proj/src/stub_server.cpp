#include "csd/stub_server.hpp"

#include "httplib.h"
#include "json.hpp"

namespace csd {

using nlohmann::json;

namespace {

void send_error(httplib::Response& res, int status, const std::string& message) {
  res.status = status;
  res.set_content(json{{"error", message}}.dump(), "application/json");
}

}  // namespace

StubServer::StubServer(ModelPtr model, StubOptions options, int port)
    : model_(std::move(model)), options_(std::move(options)), server_(std::make_unique<httplib::Server>()) {
  server_->set_tcp_nodelay(true);
  failures_left_ = options_.fail_first;
  const std::string name = options_.name.empty() ? model_->descriptor() : options_.name;
  const std::size_t vocab = options_.reported_vocab_size ? options_.reported_vocab_size : model_->vocab().size();

  server_->Get("/v1/info", [name, vocab, this](const httplib::Request&, httplib::Response& res) {
    json j{{"vocab_size", vocab}, {"name", name}, {"deterministic", options_.deterministic}};
    res.set_content(j.dump(), "application/json");
  });

  server_->Post("/v1/score", [this](const httplib::Request& req, httplib::Response& res) {
    ++score_requests_;
    if (failures_left_.load() > 0) {
      --failures_left_;
      send_error(res, 503, "scripted failure");
      return;
    }
    TokenSeq tokens;
    std::size_t start = 0;
    try {
      auto j = json::parse(req.body);
      tokens = j.at("tokens").get<TokenSeq>();
      start = j.at("start").get<std::size_t>();
    } catch (const json::exception& e) {
      send_error(res, 400, std::string("bad request: ") + e.what());
      return;
    }
    std::vector<std::vector<double>> rows;
    try {
      for (const auto& d : model_->evaluate(tokens, start)) rows.emplace_back(d.probs().begin(), d.probs().end());
    } catch (const Error& e) {
      send_error(res, 400, e.what());
      return;
    }
    if (options_.mutate_rows) options_.mutate_rows(rows);
    res.set_content(json{{"dists", rows}}.dump(), "application/json");
  });

  if (port == 0) {
    port_ = server_->bind_to_any_port("127.0.0.1");
  } else {
    port_ = server_->bind_to_port("127.0.0.1", port) ? port : -1;
  }
  if (port_ < 0) throw RemoteUnavailable("stub server could not bind a port");
  thread_ = std::thread([this] { server_->listen_after_bind(); });
  server_->wait_until_ready();
}

StubServer::~StubServer() { stop(); }

void StubServer::wait() {
  if (thread_.joinable()) thread_.join();
}

void StubServer::stop() {
  server_->stop();
  if (thread_.joinable()) thread_.join();
}

}  // namespace csd
