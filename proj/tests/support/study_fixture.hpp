#pragma once

#include <filesystem>
#include <mutex>
#include <stdexcept>
#include <thread>

#include "vce/study.hpp"
#include "vce/study_server.hpp"

// Headless reader-study sessions driven over a localhost HTTP server. Scripted
// readers decide from the pixels they are served, never from server-side labels.
namespace vce::testing {

namespace fs = std::filesystem;
using nlohmann::json;

struct LiveStudyServer {
  explicit LiveStudyServer(const fs::path& db) : store(db), api(store, study::Pool{}) {
    api.bind(srv);
    port = srv.bind_to_any_port("127.0.0.1");
    thread = std::thread([this] { srv.listen_after_bind(); });
    srv.wait_until_ready();
  }
  ~LiveStudyServer() {
    srv.stop();
    thread.join();
  }
  study::Store store;
  study::StudyApi api;
  httplib::Server srv;
  int port = 0;
  std::thread thread;
};

// Constant 16x16 image whose grey level encodes an integer code.
inline void write_coded_image(const fs::path& p, int code) { io::write_png16(p, ImageD(16, 16, (code + 1) / 100.0)); }

inline int code_of_image(const std::string& png) {
  const auto img = io::decode_png(png);
  return static_cast<int>(std::lround(img(0, 0) * 100.0)) - 1;
}

inline json expect_status(const httplib::Result& r, int status, const std::string& what) {
  if (!r) throw std::runtime_error(what + ": no response");
  if (r->status != status) {
    throw std::runtime_error(what + ": status " + std::to_string(r->status) + " " + r->body);
  }
  return r->body.empty() || r->get_header_value("Content-Type") != "application/json" ? json() : json::parse(r->body);
}

struct ScriptedSession {
  std::string session_id;
  json scores;
};

/// Answers every item for one reader. `decide(codes)` sees the image codes in
/// display order and returns the JSON body fields for the answer.
template <class Decide>
void answer_all(int port, const std::string& sid, const std::string& reader, Decide decide) {
  httplib::Client c("127.0.0.1", port);
  for (;;) {
    const json item = expect_status(c.Get(("/sessions/" + sid + "/next-item?reader=" + reader).c_str()), 200, "next-item");
    if (item.at("done").get<bool>()) return;
    std::vector<int> codes;
    for (const auto& url : item.at("images")) {
      auto img = c.Get(url.get<std::string>().c_str());
      if (!img || img->status != 200) throw std::runtime_error("image fetch failed");
      codes.push_back(code_of_image(img->body));
    }
    json body = decide(codes);
    body["reader_id"] = reader;
    body["item_id"] = item.at("item_id");
    expect_status(c.Post(("/sessions/" + sid + "/responses").c_str(), body.dump(), "application/json"), 201, "response");
  }
}

/// Real/synthetic + BI-RADS session over 5 real and 13 synthetic images with
/// five readers (38 to 8 years). Every reader calls everything real except
/// synthetic images 5 and 6, and gets BI-RADS wrong on one of every five images
/// per subset. Hand-computed: TPR 5/5, TNR 2/13, BI-RADS accuracy 0.8 and 0.8.
inline ScriptedSession run_turing_fixture(const fs::path& dir, LiveStudyServer& live, bool concurrent = true) {
  const int n_real = 5, n_synth = 13;
  json pool = {{"real_fake_birads", json::array()}};
  std::vector<int> birads;
  for (int i = 0; i < n_real + n_synth; ++i) {
    const auto img = dir / ("turing" + std::to_string(i) + ".png");
    write_coded_image(img, i);
    birads.push_back(1 + i % 5);
    pool["real_fake_birads"].push_back(json{{"case_id", "c" + std::to_string(i)}, {"image", img.string()},
                                            {"is_real", i < n_real}, {"birads", birads.back()}});
  }
  const std::vector<std::pair<std::string, int>> readers{{"A", 38}, {"B", 20}, {"C", 15}, {"D", 10}, {"E", 8}};
  json create = {{"schema_version", 1}, {"test_kind", "real_fake_birads"}, {"seed", 42},
                 {"readers", json::array()}, {"pool", pool}};
  for (auto& [id, y] : readers) create["readers"].push_back({{"reader_id", id}, {"years_experience", y}});
  httplib::Client cli("127.0.0.1", live.port);
  ScriptedSession out;
  out.session_id = expect_status(cli.Post("/sessions", create.dump(), "application/json"), 201, "create")
                       .at("session_id")
                       .get<std::string>();

  auto script = [&](int reader_index) {
    int real_seen = 0, synth_seen = 0;
    answer_all(live.port, out.session_id, readers[reader_index].first, [&](const std::vector<int>& codes) {
      const int k = codes.at(0);
      int& seen = k < n_real ? real_seen : synth_seen;
      const bool wrong = (seen + reader_index) % 5 == 0;
      ++seen;
      return json{{"choice", k == 5 || k == 6 ? "synthetic" : "real"}, {"birads", wrong ? birads[k] % 6 + 1 : birads[k]}};
    });
  };
  std::vector<std::thread> threads;
  std::exception_ptr failure;
  std::mutex mu;
  for (int i = 0; i < static_cast<int>(readers.size()); ++i) {
    auto run = [&, i] {
      try {
        script(i);
      } catch (...) {
        std::lock_guard lock(mu);
        failure = std::current_exception();
      }
    };
    if (concurrent) threads.emplace_back(run);
    else run();
  }
  for (auto& t : threads) t.join();
  if (failure) std::rethrow_exception(failure);
  out.scores = expect_status(cli.Get(("/sessions/" + out.session_id + "/scores").c_str()), 200, "scores");
  return out;
}

/// Realism session: four cases, three model outputs each, readers of 38, 20, 10
/// and 8 years. Per case the readers pick
///   case 0: cyclegan, pix2pix, pix2pix, pix2pix  -> 38 vs 38, top reader wins: cyclegan
///   case 1: autoencoder x2, pix2pix x2            -> 58 vs 18: autoencoder
///   case 2: pix2pix, cyclegan x3                 -> 38 vs 38, top reader wins: pix2pix
///   case 3: autoencoder x4                       -> autoencoder
inline ScriptedSession run_realism_fixture(const fs::path& dir, LiveStudyServer& live) {
  const auto labels = study::model_labels();
  json pool = {{"realism_choice", json::array()}};
  for (int c = 0; c < 4; ++c) {
    json imgs;
    for (int m = 0; m < 3; ++m) {
      const auto p = dir / ("realism" + std::to_string(c) + "_" + labels[m] + ".png");
      write_coded_image(p, c * 3 + m);
      imgs[labels[m]] = p.string();
    }
    pool["realism_choice"].push_back({{"case_id", "r" + std::to_string(c)}, {"images", imgs}});
  }
  const std::vector<std::pair<std::string, int>> readers{{"r38", 38}, {"r20", 20}, {"r10", 10}, {"r8", 8}};
  const std::vector<std::vector<std::string>> picks{{"cyclegan", "pix2pix", "pix2pix", "pix2pix"},
                                                    {"autoencoder", "autoencoder", "pix2pix", "pix2pix"},
                                                    {"pix2pix", "cyclegan", "cyclegan", "cyclegan"},
                                                    {"autoencoder", "autoencoder", "autoencoder", "autoencoder"}};
  json create = {{"test_kind", "realism_choice"}, {"seed", 3}, {"readers", json::array()}, {"pool", pool}};
  for (auto& [id, y] : readers) create["readers"].push_back({{"reader_id", id}, {"years_experience", y}});
  httplib::Client cli("127.0.0.1", live.port);
  ScriptedSession out;
  out.session_id = expect_status(cli.Post("/sessions", create.dump(), "application/json"), 201, "create")
                       .at("session_id")
                       .get<std::string>();
  for (int r = 0; r < 4; ++r) {
    answer_all(live.port, out.session_id, readers[r].first, [&](const std::vector<int>& codes) {
      const int c = codes.at(0) / 3;
      const std::string want = picks[c][r];
      for (int i = 0; i < static_cast<int>(codes.size()); ++i) {
        if (labels[codes[i] % 3] == want) return json{{"choice", i}};
      }
      throw std::runtime_error("wanted image not shown");
    });
  }
  out.scores = expect_status(cli.Get(("/sessions/" + out.session_id + "/scores").c_str()), 200, "scores");
  return out;
}

}  // namespace vce::testing
