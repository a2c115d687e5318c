#pragma once

// Socket binding of Service over cpp-httplib.

#include <memory>
#include <string>

// Eigen first: httplib pulls in <resolv.h>, whose _res macro breaks Eigen's headers.
#include "dcedit/service.hpp"

#include "httplib.h"

namespace dcedit {

class HttpServer {
 public:
  explicit HttpServer(std::shared_ptr<Service> service) : service_(std::move(service)) {
    auto handler = [this](const httplib::Request& req, httplib::Response& res) {
      const Response r = service_->handle(req.method, req.path, req.body);
      res.status = r.status;
      res.set_content(r.body.dump(), "application/json");
    };
    server_.Get(".*", handler);
    server_.Post(".*", handler);
  }

  // Returns the bound port (an ephemeral one when port == 0), or -1 on failure.
  int bind(const std::string& host, int port) {
    return port == 0 ? server_.bind_to_any_port(host) : (server_.bind_to_port(host, port) ? port : -1);
  }
  bool run() { return server_.listen_after_bind(); }
  void stop() { server_.stop(); }
  void wait_until_ready() { server_.wait_until_ready(); }

 private:
  std::shared_ptr<Service> service_;
  httplib::Server server_;
};

}  // namespace dcedit
