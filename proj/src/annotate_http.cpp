#include "memecap/annotate_http.hpp"

#include "memecap/error.hpp"
#include "memecap/io.hpp"

#include "httplib.h"
#include "json.hpp"

namespace memecap {

namespace {

using nlohmann::json;

void send_error(httplib::Response &res, int status, const std::string &msg) {
    res.status = status;
    res.set_content(json({{"error", msg}}).dump(), "application/json");
}

template <class F> void guarded(httplib::Response &res, F &&f) {
    try {
        f();
    } catch (const NotFoundError &e) {
        send_error(res, 404, e.what());
    } catch (const ConflictError &e) {
        send_error(res, 409, e.what());
    } catch (const ValidationError &e) {
        send_error(res, 400, e.what());
    } catch (const std::exception &e) {
        send_error(res, 500, e.what());
    }
}

std::string annotator_of(const httplib::Request &req) {
    if (req.has_param("annotator")) {
        return req.get_param_value("annotator");
    }
    if (req.has_header("X-Annotator-Id")) {
        return req.get_header_value("X-Annotator-Id");
    }
    throw ValidationError("missing annotator id (query parameter 'annotator' or X-Annotator-Id header)");
}

} // namespace

AnnotateServer::AnnotateServer(AnnotationService &service, std::map<std::string, std::filesystem::path> images,
                               std::optional<std::filesystem::path> static_dir)
    : service_(service), images_(std::move(images)), server_(std::make_unique<httplib::Server>()) {
    routes();
    if (static_dir) {
        server_->set_mount_point("/", static_dir->string());
    }
}

AnnotateServer::~AnnotateServer() { stop(); }

void AnnotateServer::routes() {
    server_->Get("/tasks/next", [this](const httplib::Request &req, httplib::Response &res) {
        guarded(res, [&] {
            const auto t = service_.next_task(annotator_of(req));
            res.set_content(t ? "{\"task\":" + task_json(*t) + "}" : std::string("{\"task\":null}"),
                            "application/json");
        });
    });
    server_->Post("/responses", [this](const httplib::Request &req, httplib::Response &res) {
        guarded(res, [&] {
            AnnotationResponse r = parse_response(req.body);
            if (r.annotator.empty() && req.has_header("X-Annotator-Id")) {
                r.annotator = req.get_header_value("X-Annotator-Id");
            }
            const std::string task_id = r.task_id;
            service_.submit(std::move(r));
            res.set_content(json({{"ok", true}, {"task_id", task_id}}).dump(), "application/json");
        });
    });
    server_->Get("/export/preferences", [this](const httplib::Request &, httplib::Response &res) {
        guarded(res, [&] {
            std::string body;
            for (const PreferenceRecord &p : service_.export_preferences()) {
                body += preference_line(p) + "\n";
            }
            res.set_content(body, "application/x-ndjson");
        });
    });
    server_->Get("/progress", [this](const httplib::Request &, httplib::Response &res) {
        guarded(res, [&] {
            const Progress p = service_.progress();
            res.set_content(
                json({{"completed", p.completed}, {"remaining", p.remaining}, {"pending_sets", p.pending_sets}}).dump(),
                "application/json");
        });
    });
    server_->Get(R"(/memes/([^/]+)/image)", [this](const httplib::Request &req, httplib::Response &res) {
        guarded(res, [&] {
            const std::string id = req.matches[1];
            auto it = images_.find(id);
            if (it == images_.end()) {
                throw NotFoundError("unknown meme '" + id + "'");
            }
            res.set_content(read_file(it->second), "image/x-portable-pixmap");
        });
    });
}

int AnnotateServer::bind_any(const std::string &host) { return server_->bind_to_any_port(host); }

bool AnnotateServer::listen_bound() { return server_->listen_after_bind(); }

bool AnnotateServer::listen(const std::string &host, int port) { return server_->listen(host, port); }

void AnnotateServer::stop() {
    if (server_) {
        server_->stop();
    }
}

bool AnnotateServer::running() const { return server_ && server_->is_running(); }

} // namespace memecap
