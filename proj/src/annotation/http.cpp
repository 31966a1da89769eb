#include "msdm/annotation/http.hpp"

#include <cstdio>
#include <optional>

#include "httplib.h"
#include "msdm/annotation/service.hpp"
#include "msdm/errors.hpp"

namespace msdm::annotation {

namespace {

void send(httplib::Response& res, const Response& r) {
  res.status = r.status;
  res.set_content(r.body, r.content_type);
}

std::optional<std::string> annotator_param(const httplib::Request& req) {
  if (!req.has_param("annotator")) return std::nullopt;
  return req.get_param_value("annotator");
}

}  // namespace

void register_routes(httplib::Server& server, AnnotationService& service) {
  server.Get("/tasks", [&](const httplib::Request&, httplib::Response& res) { send(res, service.list_tasks()); });
  server.Get(R"(/tasks/([^/]+))",
             [&](const httplib::Request& req, httplib::Response& res) { send(res, service.get_task(req.matches[1])); });
  server.Get(R"(/images/([^/]+))",
             [&](const httplib::Request& req, httplib::Response& res) { send(res, service.get_image(req.matches[1])); });
  server.Post("/ratings", [&](const httplib::Request& req, httplib::Response& res) {
    send(res, service.submit_rating(req.body));
  });
  server.Get("/export", [&](const httplib::Request& req, httplib::Response& res) {
    send(res, service.export_csv(annotator_param(req)));
  });
  server.Get("/export/summary", [&](const httplib::Request& req, httplib::Response& res) {
    send(res, service.export_summary(annotator_param(req)));
  });
}

int serve(AnnotationService& service, const std::string& addr) {
  const auto colon = addr.rfind(':');
  if (colon == std::string::npos) throw ConfigError("--addr must be host:port");
  const std::string host = addr.substr(0, colon);
  int port = 0;
  try {
    port = std::stoi(addr.substr(colon + 1));
  } catch (const std::exception&) {
    throw ConfigError("--addr port is not a number");
  }
  httplib::Server server;
  register_routes(server, service);
  if (port == 0) {
    port = server.bind_to_any_port(host);
  } else if (!server.bind_to_port(host, port)) {
    port = -1;
  }
  if (port < 0) throw IoError("cannot bind " + addr);
  std::printf("annotation service on http://%s:%d (%zu tasks)\n", host.c_str(), port, service.task_count());
  std::fflush(stdout);
  return server.listen_after_bind() ? 0 : 1;
}

}  // namespace msdm::annotation
