#pragma once

#include <memory>
#include <string>
#include <thread>

#include <json.hpp>

#include "cbqa/audit.hpp"

namespace httplib {
class Server;
}

namespace cbqa {

// Base score the adjusted accuracy starts from.
struct BaseScore {
  std::size_t correct = 0;
  std::size_t total = 0;
};

// Outcome of one API call, independent of the transport.
struct ApiResponse {
  int status = 200;
  nlohmann::ordered_json body;
};

// Request handling behind the HTTP routes; exposed so tests can drive it
// without sockets.
class AuditApi {
 public:
  AuditApi(AuditStore& store, BaseScore base) : store_(store), base_(base) {}

  ApiResponse queue() const;
  ApiResponse example(const std::string& example_id) const;
  ApiResponse label(const std::string& body);
  ApiResponse summary() const;

 private:
  AuditStore& store_;
  BaseScore base_;
};

// GET /api/queue, GET /api/example/{id}, POST /api/label, GET /api/summary.
class AuditServer {
 public:
  AuditServer(AuditStore& store, BaseScore base);
  ~AuditServer();

  // Port 0 picks a free port. Throws IoError when binding fails.
  int bind(const std::string& host, int port);
  // Serves until stop(); call after bind().
  void run();
  void start();
  void stop();

 private:
  AuditApi api_;
  std::unique_ptr<httplib::Server> server_;
  std::thread worker_;
};

}  // namespace cbqa
