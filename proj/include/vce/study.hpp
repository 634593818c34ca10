#pragma once

#include <sqlite3.h>

#include <algorithm>
#include <chrono>
#include <ctime>
#include <filesystem>
#include <map>
#include <mutex>
#include <optional>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "vce/io.hpp"
#include "vce/random.hpp"

namespace vce::study {

namespace fs = std::filesystem;
using nlohmann::json;

inline constexpr int kSchemaVersion = 1;

struct StudyError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

enum class TestKind { realism_choice, real_fake_birads };

inline std::string to_string(TestKind k) {
  return k == TestKind::realism_choice ? "realism_choice" : "real_fake_birads";
}

inline TestKind test_kind_from_string(const std::string& s) {
  if (s == "realism_choice") return TestKind::realism_choice;
  if (s == "real_fake_birads") return TestKind::real_fake_birads;
  throw StudyError("unknown test kind '" + s + "'");
}

inline const std::vector<std::string>& model_labels() {
  static const std::vector<std::string> m{"autoencoder", "pix2pix", "cyclegan"};
  return m;
}

struct Reader {
  std::string reader_id;
  double years_experience = 0;  // vote weight
};

inline void validate(const std::vector<Reader>& readers) {
  if (readers.empty()) throw StudyError("no readers registered");
  std::set<std::string> ids;
  for (const auto& r : readers) {
    if (r.reader_id.empty()) throw StudyError("reader_id must not be empty");
    if (!(r.years_experience > 0)) throw StudyError("reader " + r.reader_id + ": years_experience must be > 0");
    if (!ids.insert(r.reader_id).second) throw StudyError("duplicate reader " + r.reader_id);
  }
}

// ---------------------------------------------------------------------------
// Image pools

/// Test 1 case: one synthetic image per model for the same input.
struct RealismCase {
  std::string case_id;
  std::map<std::string, std::string> images;  // model label -> image path
};

/// Test 2 case: a real or synthetic DES image and the reported BI-RADS of the
/// underlying real study.
struct TuringCase {
  std::string case_id;
  std::string image;
  bool is_real = true;
  int birads = 1;
};

struct Pool {
  std::vector<RealismCase> realism;
  std::vector<TuringCase> turing;
};

inline Pool pool_from_json(const json& j) {
  Pool p;
  for (const auto& c : j.value("realism_choice", json::array())) {
    RealismCase r;
    r.case_id = c.at("case_id").get<std::string>();
    r.images = c.at("images").get<std::map<std::string, std::string>>();
    std::set<std::string> got;
    for (auto& [k, v] : r.images) got.insert(k);
    if (got != std::set<std::string>(model_labels().begin(), model_labels().end())) {
      throw StudyError("realism case " + r.case_id + " needs exactly one image per model");
    }
    p.realism.push_back(r);
  }
  for (const auto& c : j.value("real_fake_birads", json::array())) {
    TuringCase t;
    t.case_id = c.at("case_id").get<std::string>();
    t.image = c.at("image").get<std::string>();
    t.is_real = c.at("is_real").get<bool>();
    t.birads = c.at("birads").get<int>();
    if (t.birads < 1 || t.birads > 6) throw StudyError("turing case " + t.case_id + ": birads must be in [1,6]");
    p.turing.push_back(t);
  }
  return p;
}

inline json to_json(const Pool& p) {
  json j = {{"realism_choice", json::array()}, {"real_fake_birads", json::array()}};
  for (const auto& r : p.realism) j["realism_choice"].push_back({{"case_id", r.case_id}, {"images", r.images}});
  for (const auto& t : p.turing) {
    j["real_fake_birads"].push_back({{"case_id", t.case_id}, {"image", t.image}, {"is_real", t.is_real}, {"birads", t.birads}});
  }
  return j;
}

/// Relative image paths resolve against the pool file's directory.
inline Pool read_pool(const fs::path& p) {
  Pool pool = pool_from_json(json::parse(io::read_file(p)));
  auto fix = [&](std::string& s) {
    if (fs::path(s).is_relative()) s = (p.parent_path() / s).string();
  };
  for (auto& r : pool.realism) {
    for (auto& [m, path] : r.images) fix(path);
  }
  for (auto& t : pool.turing) fix(t.image);
  return pool;
}

// ---------------------------------------------------------------------------
// Sessions

struct Option {
  std::string token;  // opaque image handle given to clients
  std::string image;
  std::string model;  // hidden; empty for test 2
};

struct StudyItem {
  std::string item_id;
  std::string case_id;
  std::vector<Option> options;  // 3 for test 1, 1 for test 2
  std::optional<bool> is_real;  // hidden, test 2
  std::optional<int> true_birads;
};

struct Session {
  std::string session_id;
  TestKind kind = TestKind::realism_choice;
  std::uint64_t seed = 0;
  std::vector<Reader> readers;
  std::vector<StudyItem> items;
  std::map<std::string, std::vector<int>> order;  // reader -> item indices in presentation order
  std::map<std::string, std::vector<std::vector<int>>> option_order;  // reader -> item -> option permutation

  const Reader& reader(const std::string& id) const {
    for (const auto& r : readers) {
      if (r.reader_id == id) return r;
    }
    throw StudyError("unknown reader " + id);
  }
  int item_index(const std::string& item_id) const {
    for (std::size_t i = 0; i < items.size(); ++i) {
      if (items[i].item_id == item_id) return static_cast<int>(i);
    }
    return -1;
  }
};

namespace detail {
inline std::string hex_token(Rng& rng, int bytes = 12) {
  static const char* digits = "0123456789abcdef";
  std::string s;
  for (int i = 0; i < bytes; ++i) {
    const auto b = rng.index(256);
    s += digits[b >> 4];
    s += digits[b & 15];
  }
  return s;
}
}  // namespace detail

/// Draws `n_items` cases (0: the whole pool) in a seed-fixed random order and
/// gives every reader an independent presentation permutation.
inline Session create_session(TestKind kind, const Pool& pool, const std::vector<Reader>& readers,
                              std::uint64_t seed, int n_items = 0) {
  validate(readers);
  const std::size_t available = kind == TestKind::realism_choice ? pool.realism.size() : pool.turing.size();
  if (available == 0) throw StudyError("image pool for " + to_string(kind) + " is empty");
  const std::size_t want = n_items > 0 ? static_cast<std::size_t>(n_items) : available;
  if (want > available) {
    throw StudyError("requested " + std::to_string(want) + " items but the " + to_string(kind) + " pool has " +
                     std::to_string(available) + " (short by " + std::to_string(want - available) + ")");
  }
  Rng rng(seed);
  Session s;
  s.kind = kind;
  s.seed = seed;
  s.readers = readers;
  s.session_id = "s" + detail::hex_token(rng, 8);
  std::vector<std::size_t> pick(available);
  for (std::size_t i = 0; i < available; ++i) pick[i] = i;
  rng.shuffle(pick);
  pick.resize(want);
  for (std::size_t k = 0; k < want; ++k) {
    StudyItem it;
    it.item_id = "item" + std::to_string(k + 1);
    if (kind == TestKind::realism_choice) {
      const auto& c = pool.realism[pick[k]];
      it.case_id = c.case_id;
      for (const auto& m : model_labels()) it.options.push_back({detail::hex_token(rng), c.images.at(m), m});
    } else {
      const auto& c = pool.turing[pick[k]];
      it.case_id = c.case_id;
      it.options.push_back({detail::hex_token(rng), c.image, ""});
      it.is_real = c.is_real;
      it.true_birads = c.birads;
    }
    s.items.push_back(std::move(it));
  }
  for (const auto& r : readers) {
    std::vector<int> ord(want);
    for (std::size_t i = 0; i < want; ++i) ord[i] = static_cast<int>(i);
    rng.shuffle(ord);
    s.order[r.reader_id] = ord;
    auto& opts = s.option_order[r.reader_id];
    for (std::size_t i = 0; i < want; ++i) {
      std::vector<int> p(s.items[i].options.size());
      for (std::size_t q = 0; q < p.size(); ++q) p[q] = static_cast<int>(q);
      rng.shuffle(p);
      opts.push_back(p);
    }
  }
  return s;
}

/// Server-side serialisation, hidden labels included.
inline json to_json(const Session& s) {
  json j = {{"schema_version", kSchemaVersion}, {"session_id", s.session_id}, {"test_kind", to_string(s.kind)},
            {"seed", s.seed}, {"readers", json::array()}, {"items", json::array()},
            {"order", s.order}, {"option_order", s.option_order}};
  for (const auto& r : s.readers) j["readers"].push_back({{"reader_id", r.reader_id}, {"years_experience", r.years_experience}});
  for (const auto& it : s.items) {
    json opts = json::array();
    for (const auto& o : it.options) opts.push_back({{"token", o.token}, {"image", o.image}, {"model", o.model}});
    json ji = {{"item_id", it.item_id}, {"case_id", it.case_id}, {"options", opts}};
    if (it.is_real) ji["is_real"] = *it.is_real;
    if (it.true_birads) ji["true_birads"] = *it.true_birads;
    j["items"].push_back(ji);
  }
  return j;
}

inline Session session_from_json(const json& j) {
  Session s;
  s.session_id = j.at("session_id").get<std::string>();
  s.kind = test_kind_from_string(j.at("test_kind").get<std::string>());
  s.seed = j.at("seed").get<std::uint64_t>();
  for (const auto& r : j.at("readers")) s.readers.push_back({r.at("reader_id").get<std::string>(), r.at("years_experience").get<double>()});
  for (const auto& ji : j.at("items")) {
    StudyItem it;
    it.item_id = ji.at("item_id").get<std::string>();
    it.case_id = ji.at("case_id").get<std::string>();
    for (const auto& o : ji.at("options")) {
      it.options.push_back({o.at("token").get<std::string>(), o.at("image").get<std::string>(), o.at("model").get<std::string>()});
    }
    if (ji.contains("is_real")) it.is_real = ji.at("is_real").get<bool>();
    if (ji.contains("true_birads")) it.true_birads = ji.at("true_birads").get<int>();
    s.items.push_back(std::move(it));
  }
  s.order = j.at("order").get<std::map<std::string, std::vector<int>>>();
  s.option_order = j.at("option_order").get<std::map<std::string, std::vector<std::vector<int>>>>();
  return s;
}

/// What a reader's client sees for the item at `position` of their sequence.
/// Only presentation data: opaque image tokens, no labels or case ids.
inline json client_payload(const Session& s, const std::string& reader_id, int position) {
  s.reader(reader_id);
  const auto& ord = s.order.at(reader_id);
  if (position < 0 || position >= static_cast<int>(ord.size())) throw StudyError("position out of range");
  const auto& it = s.items[ord[position]];
  const auto& perm = s.option_order.at(reader_id)[ord[position]];
  json images = json::array();
  for (int q : perm) images.push_back("/sessions/" + s.session_id + "/images/" + it.options[q].token);
  json j = {{"schema_version", kSchemaVersion},
            {"session_id", s.session_id},
            {"test_kind", to_string(s.kind)},
            {"reader_id", reader_id},
            {"item_id", it.item_id},
            {"position", position},
            {"total", ord.size()},
            {"images", images}};
  if (s.kind == TestKind::realism_choice) {
    j["choices"] = {0, 1, 2};
  } else {
    j["choices"] = {"real", "synthetic"};
    j["birads_range"] = {1, 6};
  }
  return j;
}

// ---------------------------------------------------------------------------
// Responses and scoring

struct Response {
  std::string reader_id;
  std::string item_id;
  std::string choice;  // test 1: chosen model label; test 2: "real" or "synthetic"
  std::optional<int> option_index;  // test 1: index as presented to the reader
  std::optional<int> birads;
  std::string timestamp;
  int position = 0;
};

inline std::string utc_now() {
  const auto t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

/// Checks a raw client submission against the session and resolves it to a
/// stored response. Test 1 choices are presentation indices.
inline Response resolve_response(const Session& s, const std::string& reader_id, const std::string& item_id,
                                 const json& choice, const std::optional<int>& birads) {
  s.reader(reader_id);
  const int idx = s.item_index(item_id);
  if (idx < 0) throw StudyError("unknown item " + item_id);
  Response r;
  r.reader_id = reader_id;
  r.item_id = item_id;
  r.timestamp = utc_now();
  const auto& ord = s.order.at(reader_id);
  r.position = static_cast<int>(std::find(ord.begin(), ord.end(), idx) - ord.begin());
  if (s.kind == TestKind::realism_choice) {
    if (!choice.is_number_integer()) throw StudyError("choice must be an option index 0..2");
    const int k = choice.get<int>();
    const auto& perm = s.option_order.at(reader_id)[idx];
    if (k < 0 || k >= static_cast<int>(perm.size())) throw StudyError("choice must be an option index 0..2");
    if (birads) throw StudyError("birads is only collected in the real/synthetic test");
    r.option_index = k;
    r.choice = s.items[idx].options[perm[k]].model;
  } else {
    if (!choice.is_string() || (choice != "real" && choice != "synthetic")) {
      throw StudyError("choice must be \"real\" or \"synthetic\"");
    }
    if (!birads) throw StudyError("birads is required in the real/synthetic test");
    if (*birads < 1 || *birads > 6) throw StudyError("birads must be in [1,6]");
    r.choice = choice.get<std::string>();
    r.birads = birads;
  }
  return r;
}

/// Choice with the largest summed experience. Ties go to the tied choice whose
/// most experienced supporter has the most years, then to the smaller label.
inline std::string weighted_vote(const std::vector<std::pair<std::string, std::string>>& votes,
                                 const std::vector<Reader>& readers) {
  if (votes.empty()) throw StudyError("weighted_vote: no votes");
  std::map<std::string, double> weight;
  for (const auto& r : readers) weight[r.reader_id] = r.years_experience;
  std::map<std::string, double> total, top_supporter;
  std::set<std::string> seen;
  for (const auto& [reader, choice] : votes) {
    auto it = weight.find(reader);
    if (it == weight.end()) throw StudyError("weighted_vote: unknown reader " + reader);
    if (!seen.insert(reader).second) throw StudyError("weighted_vote: reader " + reader + " voted twice");
    total[choice] += it->second;
    top_supporter[choice] = std::max(top_supporter[choice], it->second);
  }
  double best = 0;
  for (auto& [c, w] : total) best = std::max(best, w);
  std::string winner;
  double winner_top = -1;
  for (auto& [c, w] : total) {  // map order gives the smaller label first
    if (w == best && top_supporter[c] > winner_top) {
      winner = c;
      winner_top = top_supporter[c];
    }
  }
  return winner;
}

namespace detail {
inline std::map<std::string, std::vector<std::pair<std::string, std::string>>> votes_by_item(
    const std::vector<Response>& responses, bool birads) {
  std::map<std::string, std::vector<std::pair<std::string, std::string>>> by;
  for (const auto& r : responses) {
    if (birads && !r.birads) continue;
    by[r.item_id].emplace_back(r.reader_id, birads ? std::to_string(*r.birads) : r.choice);
  }
  return by;
}
}  // namespace detail

/// Per-item consensus labels.
inline std::map<std::string, std::string> consensus(const std::vector<Response>& responses,
                                                    const std::vector<Reader>& readers) {
  std::map<std::string, std::string> out;
  for (const auto& [item, votes] : detail::votes_by_item(responses, false)) out[item] = weighted_vote(votes, readers);
  return out;
}

struct TuringScore {
  double tpr = 0;  // real judged real, over real items
  double tnr = 0;  // synthetic judged synthetic, over synthetic items
  int n_real = 0;
  int n_synthetic = 0;
  int true_positive = 0;
  int true_negative = 0;
};

/// Real images are the positive class; rates use the weighted-vote consensus
/// of each item that received responses.
inline TuringScore score_turing(const std::vector<Response>& responses, const std::map<std::string, bool>& is_real,
                                const std::vector<Reader>& readers) {
  TuringScore s;
  for (const auto& [item, label] : consensus(responses, readers)) {
    auto it = is_real.find(item);
    if (it == is_real.end()) throw StudyError("score_turing: no ground truth for " + item);
    if (it->second) {
      ++s.n_real;
      s.true_positive += label == "real";
    } else {
      ++s.n_synthetic;
      s.true_negative += label == "synthetic";
    }
  }
  if (s.n_real == 0) throw StudyError("score_turing: no real items answered; TPR undefined");
  if (s.n_synthetic == 0) throw StudyError("score_turing: no synthetic items answered; TNR undefined");
  s.tpr = static_cast<double>(s.true_positive) / s.n_real;
  s.tnr = static_cast<double>(s.true_negative) / s.n_synthetic;
  return s;
}

struct BiradsTruth {
  bool is_real = true;
  int birads = 1;  // from the report of the real study behind the image
};

struct BiradsScore {
  double accuracy_real = 0;
  double accuracy_synthetic = 0;
  int assigned_real = 0;
  int correct_real = 0;
  int assigned_synthetic = 0;
  int correct_synthetic = 0;
};

/// Correct descriptors over all descriptors assigned, per subset.
inline BiradsScore score_birads(const std::vector<Response>& responses, const std::map<std::string, BiradsTruth>& truth) {
  BiradsScore s;
  for (const auto& r : responses) {
    if (!r.birads) continue;
    auto it = truth.find(r.item_id);
    if (it == truth.end()) throw StudyError("score_birads: no ground truth for " + r.item_id);
    const bool ok = *r.birads == it->second.birads;
    if (it->second.is_real) {
      ++s.assigned_real;
      s.correct_real += ok;
    } else {
      ++s.assigned_synthetic;
      s.correct_synthetic += ok;
    }
  }
  if (s.assigned_real == 0) throw StudyError("score_birads: no descriptors assigned to real images");
  if (s.assigned_synthetic == 0) throw StudyError("score_birads: no descriptors assigned to synthetic images");
  s.accuracy_real = static_cast<double>(s.correct_real) / s.assigned_real;
  s.accuracy_synthetic = static_cast<double>(s.correct_synthetic) / s.assigned_synthetic;
  return s;
}

/// Full scoring of a session from its response log.
inline json score_session(const Session& s, const std::vector<Response>& responses) {
  json out = {{"schema_version", kSchemaVersion}, {"session_id", s.session_id}, {"test_kind", to_string(s.kind)},
              {"n_items", s.items.size()}, {"n_responses", responses.size()}};
  std::map<std::string, int> per_reader;
  for (const auto& r : responses) ++per_reader[r.reader_id];
  bool complete = true;
  for (const auto& r : s.readers) complete = complete && per_reader[r.reader_id] == static_cast<int>(s.items.size());
  out["complete"] = complete;
  if (s.kind == TestKind::realism_choice) {
    std::map<std::string, int> wins;
    for (const auto& m : model_labels()) wins[m] = 0;
    const auto c = consensus(responses, s.readers);
    for (const auto& [item, model] : c) ++wins[model];
    out["consensus"] = c;
    out["wins"] = wins;
    return out;
  }
  std::map<std::string, bool> real;
  std::map<std::string, BiradsTruth> truth;
  for (const auto& it : s.items) {
    real[it.item_id] = *it.is_real;
    truth[it.item_id] = {*it.is_real, *it.true_birads};
  }
  try {
    const auto t = score_turing(responses, real, s.readers);
    out["tpr"] = t.tpr;
    out["tnr"] = t.tnr;
    out["counts"] = {{"n_real", t.n_real}, {"n_synthetic", t.n_synthetic},
                     {"true_positive", t.true_positive}, {"true_negative", t.true_negative}};
  } catch (const StudyError& e) {
    out["tpr"] = out["tnr"] = nullptr;
    out["turing_error"] = e.what();
  }
  try {
    const auto b = score_birads(responses, truth);
    out["birads_accuracy_real"] = b.accuracy_real;
    out["birads_accuracy_synthetic"] = b.accuracy_synthetic;
  } catch (const StudyError& e) {
    out["birads_accuracy_real"] = out["birads_accuracy_synthetic"] = nullptr;
    out["birads_error"] = e.what();
  }
  return out;
}

// ---------------------------------------------------------------------------
// Persistent store: sessions plus an append-only response log

struct DuplicateResponse : StudyError {
  using StudyError::StudyError;
};

class Store {
 public:
  explicit Store(const fs::path& db_path) {
    if (sqlite3_open(db_path.string().c_str(), &db_) != SQLITE_OK) {
      const std::string msg = db_ ? sqlite3_errmsg(db_) : "out of memory";
      sqlite3_close(db_);
      throw std::runtime_error("cannot open study database " + db_path.string() + ": " + msg);
    }
    exec("PRAGMA journal_mode=WAL;");
    exec("PRAGMA foreign_keys=ON;");
    exec(R"(CREATE TABLE IF NOT EXISTS sessions(
              session_id TEXT PRIMARY KEY,
              created TEXT NOT NULL,
              body TEXT NOT NULL);
            CREATE TABLE IF NOT EXISTS responses(
              seq INTEGER PRIMARY KEY AUTOINCREMENT,
              session_id TEXT NOT NULL REFERENCES sessions(session_id),
              reader_id TEXT NOT NULL,
              item_id TEXT NOT NULL,
              position INTEGER NOT NULL,
              choice TEXT NOT NULL,
              option_index INTEGER,
              birads INTEGER,
              ts TEXT NOT NULL,
              UNIQUE(session_id, reader_id, item_id));
            CREATE TRIGGER IF NOT EXISTS responses_no_update BEFORE UPDATE ON responses
              BEGIN SELECT RAISE(ABORT, 'responses are append-only'); END;
            CREATE TRIGGER IF NOT EXISTS responses_no_delete BEFORE DELETE ON responses
              BEGIN SELECT RAISE(ABORT, 'responses are append-only'); END;
            CREATE TRIGGER IF NOT EXISTS sessions_no_update BEFORE UPDATE ON sessions
              BEGIN SELECT RAISE(ABORT, 'sessions are immutable'); END;)");
  }
  ~Store() { sqlite3_close(db_); }
  Store(const Store&) = delete;
  Store& operator=(const Store&) = delete;

  void put_session(const Session& s) {
    std::lock_guard lock(mu_);
    Stmt st(db_, "INSERT INTO sessions(session_id, created, body) VALUES(?, ?, ?)");
    st.bind(1, s.session_id);
    st.bind(2, utc_now());
    st.bind(3, to_json(s).dump());
    if (st.step() != SQLITE_DONE) throw StudyError("session " + s.session_id + " already exists");
  }

  std::optional<Session> session(const std::string& id) const {
    std::lock_guard lock(mu_);
    Stmt st(db_, "SELECT body FROM sessions WHERE session_id = ?");
    st.bind(1, id);
    if (st.step() != SQLITE_ROW) return std::nullopt;
    return session_from_json(json::parse(st.text(0)));
  }

  std::vector<std::string> session_ids() const {
    std::lock_guard lock(mu_);
    Stmt st(db_, "SELECT session_id FROM sessions ORDER BY created, session_id");
    std::vector<std::string> out;
    while (st.step() == SQLITE_ROW) out.push_back(st.text(0));
    return out;
  }

  void append(const std::string& session_id, const Response& r) {
    std::lock_guard lock(mu_);
    Stmt st(db_,
            "INSERT INTO responses(session_id, reader_id, item_id, position, choice, option_index, birads, ts)"
            " VALUES(?, ?, ?, ?, ?, ?, ?, ?)");
    st.bind(1, session_id);
    st.bind(2, r.reader_id);
    st.bind(3, r.item_id);
    st.bind(4, r.position);
    st.bind(5, r.choice);
    st.bind(6, r.option_index);
    st.bind(7, r.birads);
    st.bind(8, r.timestamp);
    const int rc = st.step();
    if (rc == SQLITE_CONSTRAINT) {
      throw DuplicateResponse("reader " + r.reader_id + " already answered " + r.item_id);
    }
    if (rc != SQLITE_DONE) throw std::runtime_error(std::string("response insert failed: ") + sqlite3_errmsg(db_));
  }

  /// Responses in arrival order.
  std::vector<Response> responses(const std::string& session_id) const {
    std::lock_guard lock(mu_);
    Stmt st(db_,
            "SELECT reader_id, item_id, position, choice, option_index, birads, ts FROM responses"
            " WHERE session_id = ? ORDER BY seq");
    st.bind(1, session_id);
    std::vector<Response> out;
    while (st.step() == SQLITE_ROW) {
      Response r;
      r.reader_id = st.text(0);
      r.item_id = st.text(1);
      r.position = st.integer(2);
      r.choice = st.text(3);
      r.option_index = st.optional_int(4);
      r.birads = st.optional_int(5);
      r.timestamp = st.text(6);
      out.push_back(r);
    }
    return out;
  }

  /// Raw handle, for tests that probe the append-only triggers.
  sqlite3* handle() { return db_; }

 private:
  struct Stmt {
    Stmt(sqlite3* db, const char* sql) {
      if (sqlite3_prepare_v2(db, sql, -1, &s, nullptr) != SQLITE_OK) {
        throw std::runtime_error(std::string("sqlite prepare: ") + sqlite3_errmsg(db));
      }
    }
    ~Stmt() { sqlite3_finalize(s); }
    void bind(int i, const std::string& v) { sqlite3_bind_text(s, i, v.c_str(), -1, SQLITE_TRANSIENT); }
    void bind(int i, int v) { sqlite3_bind_int(s, i, v); }
    void bind(int i, const std::optional<int>& v) {
      if (v) sqlite3_bind_int(s, i, *v);
      else sqlite3_bind_null(s, i);
    }
    int step() { return sqlite3_step(s); }
    std::string text(int c) const {
      const auto* p = sqlite3_column_text(s, c);
      return p ? reinterpret_cast<const char*>(p) : "";
    }
    int integer(int c) const { return sqlite3_column_int(s, c); }
    std::optional<int> optional_int(int c) const {
      if (sqlite3_column_type(s, c) == SQLITE_NULL) return std::nullopt;
      return sqlite3_column_int(s, c);
    }
    sqlite3_stmt* s = nullptr;
  };

  void exec(const char* sql) {
    char* err = nullptr;
    if (sqlite3_exec(db_, sql, nullptr, nullptr, &err) != SQLITE_OK) {
      std::string msg = err ? err : "unknown";
      sqlite3_free(err);
      throw std::runtime_error("sqlite: " + msg);
    }
  }

  sqlite3* db_ = nullptr;
  mutable std::mutex mu_;
};

}  // namespace vce::study
