#pragma once

#include <atomic>
#include <cstddef>
#include <functional>
#include <memory>
#include <string>
#include <thread>
#include <vector>

#include "csd/core.hpp"

namespace httplib {
class Server;
}

namespace csd {

struct StubOptions {
  std::string name;  // defaults to the model descriptor
  bool deterministic = true;
  std::size_t reported_vocab_size = 0;  // 0: the model's vocabulary size
  // Score requests answered with HTTP 503 before real answers start.
  int fail_first = 0;
  // Applied to the response rows before they are sent; lets tests script
  // malformed or slightly unnormalized payloads.
  std::function<void(std::vector<std::vector<double>>&)> mutate_rows;
};

// Minimal scoring server wrapping an in-process model. Listens on 127.0.0.1;
// port 0 picks a free port.
class StubServer {
 public:
  StubServer(ModelPtr model, StubOptions options = {}, int port = 0);
  ~StubServer();
  StubServer(const StubServer&) = delete;
  StubServer& operator=(const StubServer&) = delete;

  int port() const { return port_; }
  std::string url() const { return "http://127.0.0.1:" + std::to_string(port_); }
  std::size_t score_requests() const { return score_requests_.load(); }
  // Blocks until stop() is called from elsewhere (used by the executable).
  void wait();
  void stop();

 private:
  ModelPtr model_;
  StubOptions options_;
  std::unique_ptr<httplib::Server> server_;
  std::thread thread_;
  int port_ = 0;
  std::atomic<std::size_t> score_requests_{0};
  std::atomic<int> failures_left_{0};
};

}  // namespace csd
