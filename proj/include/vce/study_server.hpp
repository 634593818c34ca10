#pragma once

#include <httplib.h>

#include <algorithm>
#include <map>
#include <mutex>
#include <string>

#include <nlohmann/json.hpp>

#include "vce/io.hpp"
#include "vce/study.hpp"
#include "vce/trainer.hpp"

namespace vce::study {

/// Box-averages an image down until its longer side is at most `max_side`.
inline ImageD display_rendition(const ImageD& img, int max_side) {
  const int f = std::max(1, (std::max(img.rows(), img.cols()) + max_side - 1) / max_side);
  if (f == 1) return img;
  const int rows = img.rows() / f, cols = img.cols() / f;
  ImageD out(rows, cols);
  for (int r = 0; r < rows; ++r) {
    for (int c = 0; c < cols; ++c) {
      double s = 0;
      for (int dr = 0; dr < f; ++dr) {
        for (int dc = 0; dc < f; ++dc) s += img(r * f + dr, c * f + dc);
      }
      out(r, c) = s / (f * f);
    }
  }
  return out;
}

struct ServerOptions {
  int display_max_side = 512;
};

/// HTTP+JSON front of the study store:
///   POST /sessions                      create a session
///   GET  /sessions/{id}/next-item       ?reader=<id>, next blinded item
///   POST /sessions/{id}/responses       submit the answer to the current item
///   GET  /sessions/{id}/scores          scoring from the persisted log
///   GET  /sessions/{id}/images/{token}  16-bit PNG display rendition
class StudyApi {
 public:
  StudyApi(Store& store, Pool default_pool, ServerOptions opt = {})
      : store_(store), pool_(std::move(default_pool)), opt_(opt) {}

  void bind(httplib::Server& srv) {
    srv.Post("/sessions", [this](const httplib::Request& q, httplib::Response& a) { guarded(a, [&] { create(q, a); }); });
    srv.Get(R"(/sessions/([^/]+)/next-item)",
            [this](const httplib::Request& q, httplib::Response& a) { guarded(a, [&] { next_item(q, a); }); });
    srv.Post(R"(/sessions/([^/]+)/responses)",
             [this](const httplib::Request& q, httplib::Response& a) { guarded(a, [&] { respond(q, a); }); });
    srv.Get(R"(/sessions/([^/]+)/scores)",
            [this](const httplib::Request& q, httplib::Response& a) { guarded(a, [&] { scores(q, a); }); });
    srv.Get(R"(/sessions/([^/]+)/images/([0-9a-f]+))",
            [this](const httplib::Request& q, httplib::Response& a) { guarded(a, [&] { image(q, a); }); });
  }

 private:
  struct HttpError {
    int status;
    std::string message;
  };

  template <class F>
  void guarded(httplib::Response& a, F&& f) {
    try {
      f();
    } catch (const HttpError& e) {
      reply(a, e.status, {{"error", e.message}});
    } catch (const DuplicateResponse& e) {
      reply(a, 409, {{"error", e.what()}});
    } catch (const StudyError& e) {
      reply(a, 400, {{"error", e.what()}});
    } catch (const json::exception& e) {
      reply(a, 400, {{"error", std::string("bad request body: ") + e.what()}});
    } catch (const std::exception& e) {
      reply(a, 500, {{"error", e.what()}});
    }
  }

  static void reply(httplib::Response& a, int status, const json& body) {
    a.status = status;
    a.set_content(body.dump(), "application/json");
  }

  Session load(const std::string& id) {
    auto s = store_.session(id);
    if (!s) throw HttpError{404, "no session " + id};
    return *s;
  }

  void create(const httplib::Request& q, httplib::Response& a) {
    const json body = json::parse(q.body);
    const int version = body.value("schema_version", kSchemaVersion);
    if (version != kSchemaVersion) throw HttpError{400, "unsupported schema_version " + std::to_string(version)};
    const auto kind = test_kind_from_string(body.at("test_kind").get<std::string>());
    std::vector<Reader> readers;
    for (const auto& r : body.at("readers")) {
      readers.push_back({r.at("reader_id").get<std::string>(), r.at("years_experience").get<double>()});
    }
    const Pool pool = body.contains("pool") ? pool_from_json(body.at("pool")) : pool_;
    const auto seed = body.value("seed", std::uint64_t{0});
    const Session s = create_session(kind, pool, readers, seed, body.value("n_items", 0));
    store_.put_session(s);
    json out = {{"schema_version", kSchemaVersion}, {"session_id", s.session_id}, {"test_kind", to_string(kind)},
                {"n_items", s.items.size()}, {"readers", json::array()}};
    for (const auto& r : readers) out["readers"].push_back(r.reader_id);
    reply(a, 201, out);
  }

  static int answered(const std::vector<Response>& rs, const std::string& reader) {
    return static_cast<int>(std::count_if(rs.begin(), rs.end(), [&](const Response& r) { return r.reader_id == reader; }));
  }

  void next_item(const httplib::Request& q, httplib::Response& a) {
    const Session s = load(q.matches[1]);
    if (!q.has_param("reader")) throw HttpError{400, "missing reader parameter"};
    const std::string reader = q.get_param_value("reader");
    s.reader(reader);
    const int pos = answered(store_.responses(s.session_id), reader);
    if (pos >= static_cast<int>(s.items.size())) {
      reply(a, 200, {{"schema_version", kSchemaVersion}, {"session_id", s.session_id}, {"reader_id", reader},
                     {"done", true}, {"total", s.items.size()}});
      return;
    }
    json p = client_payload(s, reader, pos);
    p["done"] = false;
    reply(a, 200, p);
  }

  void respond(const httplib::Request& q, httplib::Response& a) {
    std::lock_guard lock(write_mu_);  // one writer at a time keeps positions consistent
    const Session s = load(q.matches[1]);
    const json body = json::parse(q.body);
    const std::string reader = body.at("reader_id").get<std::string>();
    const std::string item = body.at("item_id").get<std::string>();
    std::optional<int> birads;
    if (body.contains("birads") && !body.at("birads").is_null()) {
      if (!body.at("birads").is_number_integer()) throw StudyError("birads must be an integer");
      birads = body.at("birads").get<int>();
    }
    const Response r = resolve_response(s, reader, item, body.at("choice"), birads);
    const auto existing = store_.responses(s.session_id);
    const int pos = answered(existing, reader);
    for (const auto& e : existing) {
      if (e.reader_id == reader && e.item_id == item) throw DuplicateResponse("reader " + reader + " already answered " + item);
    }
    if (pos >= static_cast<int>(s.items.size()) || r.position != pos) {
      throw HttpError{409, "item " + item + " is not the current item for reader " + reader};
    }
    store_.append(s.session_id, r);
    reply(a, 201, {{"schema_version", kSchemaVersion}, {"accepted", true}, {"position", pos},
                   {"remaining", static_cast<int>(s.items.size()) - pos - 1}});
  }

  void scores(const httplib::Request& q, httplib::Response& a) {
    const Session s = load(q.matches[1]);
    reply(a, 200, score_session(s, store_.responses(s.session_id)));
  }

  void image(const httplib::Request& q, httplib::Response& a) {
    const Session s = load(q.matches[1]);
    const std::string token = q.matches[2];
    for (const auto& it : s.items) {
      for (const auto& o : it.options) {
        if (o.token != token) continue;
        const std::string png = io::encode_png16(display_rendition(trainer::read_any_image(o.image), opt_.display_max_side));
        a.status = 200;
        a.set_content(png, "image/png");
        return;
      }
    }
    throw HttpError{404, "no image " + token};
  }

  Store& store_;
  Pool pool_;
  ServerOptions opt_;
  std::mutex write_mu_;
};

}  // namespace vce::study
