#include <iostream>
#include <string>

#include "CLI11.hpp"
#include "csd/statlm.hpp"
#include "csd/stub_server.hpp"

int main(int argc, char** argv) {
  CLI::App app{"Test scoring server wrapping a model file"};
  std::string model_path, name;
  int port = 8080;
  bool nondeterministic = false;
  app.add_option("--model", model_path, "model file")->required();
  app.add_option("--port", port, "listen port on 127.0.0.1 (0 picks one)")->capture_default_str();
  app.add_option("--name", name, "reported model name");
  app.add_flag("--nondeterministic", nondeterministic, "report non-deterministic scoring");
  CLI11_PARSE(app, argc, argv);

  try {
    csd::StubOptions options;
    options.name = name;
    options.deterministic = !nondeterministic;
    csd::StubServer server(csd::load_model(model_path), options, port);
    std::cout << "listening on " << server.url() << std::endl;
    server.wait();
  } catch (const csd::Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return e.code() == csd::ErrorCode::Config ? 2 : 1;
  }
  return 0;
}
