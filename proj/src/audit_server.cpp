#include "cbqa/audit_server.hpp"

#include <httplib.h>

#include "cbqa/error.hpp"

namespace cbqa {
namespace {

ApiResponse error_response(int status, const std::string& message, nlohmann::ordered_json fields = {}) {
  nlohmann::ordered_json body;
  body["error"] = message;
  if (!fields.is_null()) body["fields"] = std::move(fields);
  return {status, std::move(body)};
}

}  // namespace

ApiResponse AuditApi::queue() const {
  auto body = nlohmann::ordered_json::array();
  for (const auto& r : store_.queue()) body.push_back(r.to_json());
  return {200, std::move(body)};
}

ApiResponse AuditApi::example(const std::string& example_id) const {
  const auto record = store_.get(example_id);
  if (!record) return error_response(404, "no audit record " + example_id);
  return {200, record->to_json()};
}

ApiResponse AuditApi::label(const std::string& body) {
  nlohmann::json request;
  try {
    request = nlohmann::json::parse(body);
  } catch (const nlohmann::json::parse_error& e) {
    return error_response(400, "body is not valid JSON", {{"body", e.what()}});
  }
  if (!request.is_object()) return error_response(400, "body must be a JSON object", {{"body", "not an object"}});

  nlohmann::ordered_json fields = nlohmann::ordered_json::object();
  std::string example_id;
  std::optional<FalseNegativeCategory> category;
  std::optional<std::string> reference;
  bool overwrite = false;

  if (!request.contains("example_id")) fields["example_id"] = "required";
  else if (!request["example_id"].is_string() || request["example_id"].get<std::string>().empty())
    fields["example_id"] = "must be a non-empty string";
  else example_id = request["example_id"].get<std::string>();

  if (!request.contains("label")) fields["label"] = "required";
  else if (!request["label"].is_string()) fields["label"] = "must be a string";
  else {
    try {
      category = parse_category(request["label"].get<std::string>());
    } catch (const InvalidArgument& e) {
      fields["label"] = e.what();
    }
  }

  if (request.contains("reference") && !request["reference"].is_null()) {
    if (request["reference"].is_string()) reference = request["reference"].get<std::string>();
    else fields["reference"] = "must be a string or null";
  }
  if (request.contains("overwrite")) {
    if (request["overwrite"].is_boolean()) overwrite = request["overwrite"].get<bool>();
    else fields["overwrite"] = "must be a boolean";
  }
  for (const auto& [key, value] : request.items())
    if (key != "example_id" && key != "label" && key != "reference" && key != "overwrite")
      fields[key] = "unknown field";
  if (!fields.empty()) return error_response(400, "invalid label request", std::move(fields));

  try {
    const auto revision = store_.record_label(example_id, *category, reference, overwrite);
    return {200, {{"revision", revision}}};
  } catch (const UnknownRecord& e) {
    return error_response(404, e.what());
  } catch (const LabelConflict& e) {
    return error_response(409, e.what());
  }
}

ApiResponse AuditApi::summary() const {
  const auto [revision, s] = store_.snapshot_counts();
  nlohmann::ordered_json body;
  body["revision"] = revision;
  const auto j = s.to_json();
  body["labeled"] = j["labeled"];
  body["counts"] = j["counts"];
  body["percentages"] = j["percentages"];
  body["adjusted_accuracy"] = nullptr;
  if (s.labeled > 0 && base_.total > base_.correct) {
    try {
      body["adjusted_accuracy"] = adjusted_accuracy(base_.correct, base_.total, s);
    } catch (const NumericError&) {
    }
  }
  body["base"] = {{"correct", base_.correct}, {"total", base_.total}};
  return {200, std::move(body)};
}

AuditServer::AuditServer(AuditStore& store, BaseScore base)
    : api_(store, base), server_(std::make_unique<httplib::Server>()) {
  // Without SO_REUSEPORT a second server on a busy port fails to bind.
  server_->set_socket_options([](socket_t sock) {
    int yes = 1;
    setsockopt(sock, SOL_SOCKET, SO_REUSEADDR, &yes, sizeof yes);
  });
  const auto reply = [](httplib::Response& res, const ApiResponse& r) {
    res.status = r.status;
    res.set_content(r.body.dump(), "application/json");
  };
  server_->Get("/api/queue", [this, reply](const httplib::Request&, httplib::Response& res) {
    reply(res, api_.queue());
  });
  server_->Get(R"(/api/example/([^/]+))", [this, reply](const httplib::Request& req, httplib::Response& res) {
    reply(res, api_.example(req.matches[1]));
  });
  server_->Post("/api/label", [this, reply](const httplib::Request& req, httplib::Response& res) {
    reply(res, api_.label(req.body));
  });
  server_->Get("/api/summary", [this, reply](const httplib::Request&, httplib::Response& res) {
    reply(res, api_.summary());
  });
}

AuditServer::~AuditServer() { stop(); }

int AuditServer::bind(const std::string& host, int port) {
  if (port == 0) {
    const int bound = server_->bind_to_any_port(host);
    if (bound < 0) throw IoError("cannot bind " + host);
    return bound;
  }
  if (!server_->bind_to_port(host, port)) throw IoError("cannot bind " + host + ":" + std::to_string(port));
  return port;
}

void AuditServer::run() { server_->listen_after_bind(); }

void AuditServer::start() {
  worker_ = std::thread([this] { run(); });
  server_->wait_until_ready();
}

void AuditServer::stop() {
  server_->stop();
  if (worker_.joinable()) worker_.join();
}

}  // namespace cbqa
