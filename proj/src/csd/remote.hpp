#pragma once

#include <chrono>
#include <cstddef>
#include <memory>
#include <mutex>
#include <string>
#include <vector>

#include "csd/core.hpp"

namespace httplib {
class Client;
}

namespace csd {

struct RemoteModelSpec {
  std::string base_url;  // e.g. "http://127.0.0.1:8080"
  std::size_t vocab_size = 0;
  double cost_weight = 1.0;
  std::chrono::milliseconds timeout{10000};
  // Extra attempts after a failed connection or timeout.
  int retries = 2;
  // Descriptor override; defaults to the server-reported name.
  std::string name;
};

struct ServerInfo {
  std::size_t vocab_size = 0;
  std::string name;
  bool deterministic = true;
};

// GET /v1/info. Throws ConfigError when the reported vocabulary size differs
// from spec.vocab_size.
ServerInfo handshake(const RemoteModelSpec& spec);

// LanguageModel backed by POST /v1/score. One request in flight per model
// instance; separate instances hold separate connections.
class RemoteModel final : public LanguageModel {
 public:
  static std::shared_ptr<RemoteModel> connect(const RemoteModelSpec& spec);
  ~RemoteModel() override;

  const Vocab& vocab() const override { return vocab_; }
  double cost_weight() const override { return spec_.cost_weight; }
  std::string descriptor() const override { return name_; }
  bool deterministic() const override { return info_.deterministic; }

  const ServerInfo& info() const { return info_; }
  const RemoteModelSpec& spec() const { return spec_; }

 protected:
  std::vector<Distribution> do_evaluate(std::span<const TokenId> tokens, std::size_t start) const override;

 private:
  RemoteModel(RemoteModelSpec spec, ServerInfo info);

  RemoteModelSpec spec_;
  ServerInfo info_;
  std::string name_;
  Vocab vocab_;
  mutable std::mutex mu_;
  mutable std::unique_ptr<httplib::Client> client_;
};

// Parses a /v1/score response body into exactly `expected_rows` rows of
// `vocab_size` probabilities. Rows within 1e-6 of unit mass are renormalized;
// anything else is a ProtocolError naming the row.
std::vector<Distribution> parse_score_response(const std::string& body, std::size_t expected_rows,
                                               std::size_t vocab_size);

}  // namespace csd
