#pragma once

#include <memory>
#include <string>

namespace httplib {
class Server;
}

namespace msdm::annotation {

class AnnotationService;

// Registers the HTTP routes on `server`; the service must outlive it.
void register_routes(httplib::Server& server, AnnotationService& service);

// "host:port"; port 0 picks a free port. Blocks until stopped.
int serve(AnnotationService& service, const std::string& addr);

}  // namespace msdm::annotation
