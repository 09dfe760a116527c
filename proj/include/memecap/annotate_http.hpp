#pragma once

// HTTP front of the annotation service.
//   GET  /tasks/next?annotator=ID   (or X-Annotator-Id header)
//   POST /responses
//   GET  /export/preferences        line-delimited PreferenceRecords
//   GET  /progress
//   GET  /memes/{id}/image          PPM bytes

#include "memecap/annotate.hpp"

#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <string>

namespace httplib {
class Server;
}

namespace memecap {

class AnnotateServer {
  public:
    AnnotateServer(AnnotationService &service, std::map<std::string, std::filesystem::path> images,
                   std::optional<std::filesystem::path> static_dir = std::nullopt);
    ~AnnotateServer();
    AnnotateServer(const AnnotateServer &) = delete;
    AnnotateServer &operator=(const AnnotateServer &) = delete;

    /// Binds to an ephemeral port and returns it (-1 on failure); call listen_bound() to serve.
    int bind_any(const std::string &host = "127.0.0.1");
    bool listen_bound();
    /// Blocking bind + serve.
    bool listen(const std::string &host, int port);
    void stop();
    bool running() const;

  private:
    void routes();
    AnnotationService &service_;
    std::map<std::string, std::filesystem::path> images_;
    std::unique_ptr<httplib::Server> server_;
};

} // namespace memecap
