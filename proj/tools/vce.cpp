// vce: command-line entrypoint for ingest, preprocessing, training, evaluation,
// reporting and the reader study service.
#include <CLI11.hpp>

#include <chrono>
#include <csignal>
#include <iostream>

#include "vce/config.hpp"
#include "vce/dataset.hpp"
#include "vce/report.hpp"
#include "vce/study.hpp"
#include "vce/study_server.hpp"
#include "vce/synth.hpp"
#include "vce/trainer.hpp"

using namespace vce;
namespace fs = std::filesystem;
using json = nlohmann::json;
using losses::ModelKind;

namespace {

struct ValidationError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

void log_event(json e) {
  e["ts"] = study::utc_now();
  std::cerr << e.dump() << std::endl;
}

struct Common {
  std::string config_path;
  std::vector<std::string> overrides;

  void add_to(CLI::App* app) {
    app->add_option("--config", config_path, "JSON run configuration");
    app->add_option("--set", overrides, "override a config key, e.g. --set train.max_epochs=20")->take_all();
  }
  config::RunConfig load() const { return config::load(config_path, overrides); }
};

void freeze(const fs::path& dir, const config::RunConfig& cfg, const std::vector<std::string>& argv) {
  fs::create_directories(dir);
  io::write_file_atomic(dir / "config.json", config::to_json(cfg).dump(2) + "\n");
  io::write_file_atomic(dir / "invocation.json", json{{"argv", argv}, {"started", study::utc_now()}}.dump(2) + "\n");
}

std::vector<ModelKind> kinds_of(const std::string& model) {
  if (model == "all") return {ModelKind::autoencoder, ModelKind::pix2pix, ModelKind::cyclegan};
  try {
    return {losses::model_kind_from_string(model)};
  } catch (const std::exception&) {
    throw ValidationError("unknown model '" + model + "' (autoencoder, pix2pix, cyclegan, all)");
  }
}

std::string display_name(ModelKind k) {
  switch (k) {
    case ModelKind::autoencoder: return "Autoencoder";
    case ModelKind::pix2pix: return "Pix2Pix";
    case ModelKind::cyclegan: return "CycleGAN";
  }
  return "?";
}

std::vector<dataset::FoldPlan> read_folds(const fs::path& p) {
  std::vector<dataset::FoldPlan> out;
  for (const auto& f : config::read_json_file(p)) out.push_back(dataset::fold_from_json(f));
  return out;
}

void write_folds(const fs::path& p, const std::vector<dataset::FoldPlan>& folds) {
  json a = json::array();
  for (const auto& f : folds) a.push_back(dataset::to_json(f));
  io::write_file_atomic(p, a.dump(1) + "\n");
}

std::vector<dataset::FoldPlan> folds_for(const std::vector<trainer::PairSample>& pairs, const config::RunConfig& cfg) {
  std::set<std::string> ids;
  for (const auto& p : pairs) ids.insert(p.patient_id);
  return dataset::make_folds({ids.begin(), ids.end()}, cfg.data.n_folds, cfg.data.fold_seed);
}

// ---------------------------------------------------------------------------

void cmd_ingest(const config::RunConfig& cfg, const fs::path& out) {
  if (cfg.data.dicom_root.empty()) throw config::ConfigError("data.dicom_root", "required for ingest");
  dataset::TypeRule rule{cfg.data.des_markers, cfg.data.le_markers};
  std::optional<fs::path> sidecar;
  if (!cfg.data.sidecar.empty()) sidecar = cfg.data.sidecar;
  const auto m = dataset::load_manifest(cfg.data.dicom_root, rule, sidecar);
  for (const auto& w : m.warnings) log_event({{"event", "ingest_warning"}, {"file", w.file}, {"message", w.message}});
  dataset::write_manifest(out / "manifest.jsonl", m.records);
  const auto paired = dataset::build_pairs(m.records);
  for (const auto& u : paired.unmatched) log_event({{"event", "unmatched"}, {"file", u.file_uri}});
  const auto folds = dataset::make_folds(dataset::patients_of(paired.pairs), cfg.data.n_folds, cfg.data.fold_seed);
  write_folds(out / "folds.json", folds);
  log_event({{"event", "ingested"}, {"records", m.records.size()}, {"pairs", paired.pairs.size()},
             {"unmatched", paired.unmatched.size()}, {"patients", dataset::patients_of(paired.pairs).size()}});
}

void cmd_preprocess(const config::RunConfig& cfg, const fs::path& manifest, const fs::path& out) {
  const auto paired = dataset::build_pairs(dataset::read_manifest(manifest));
  fs::create_directories(out / "images");
  std::vector<trainer::PairSample> samples;
  int failed = 0;
  for (const auto& p : paired.pairs) {
    try {
      auto run = [&](const dataset::StudyRecord& r, const std::string& suffix) {
        auto res = preprocess::run_chain(dataset::load_pixels(r), cfg.preprocess);
        for (const auto& w : res.warnings) log_event({{"event", "preprocess_warning"}, {"file", r.file_uri}, {"message", w}});
        const std::string rel = "images/" + p.pair_id + suffix + ".f32";
        io::write_float_image(out / rel, res.image.cast<float>());
        return rel;
      };
      trainer::PairSample s;
      s.pair_id = p.pair_id;
      s.patient_id = p.patient_id;
      s.acr_category = dataset::to_string(p.acr_category);
      s.birads = p.birads;
      s.x_path = run(p.le, "_le");
      s.y_path = run(p.des, "_des");
      samples.push_back(s);
    } catch (const std::exception& e) {
      ++failed;
      log_event({{"event", "preprocess_failed"}, {"pair_id", p.pair_id}, {"error", e.what()}});
    }
  }
  trainer::write_pair_index(out / "pairs.jsonl", samples);
  log_event({{"event", "preprocessed"}, {"pairs", samples.size()}, {"failed", failed}});
  if (failed) throw std::runtime_error(std::to_string(failed) + " pairs failed to preprocess");
}

trainer::LogFn logger(const std::string& model) {
  return [model](const json& j) {
    json e = j;
    e["model"] = model;
    log_event(e);
  };
}

void cmd_pretrain(ModelKind kind, const config::RunConfig& cfg, const fs::path& pairs_path, const fs::path& out) {
  const auto samples = trainer::read_pair_index(pairs_path);
  const auto images = trainer::load_pair_images<float>(samples);
  // the whole public corpus trains except one patient chunk held out for early stopping
  auto plan = folds_for(samples, cfg).front();
  plan.train_patients.insert(plan.train_patients.end(), plan.test_patients.begin(), plan.test_patients.end());
  plan.test_patients.clear();
  const auto split = trainer::split_fold(images, plan);
  trainer::Trainer<float> tr(kind, cfg, out);
  tr.set_logger(logger(losses::to_string(kind)));
  const auto st = tr.fit(split.train, split.val);
  log_event({{"event", "pretrained"}, {"model", losses::to_string(kind)}, {"checkpoint", tr.best_path().string()},
             {"epochs", st.epoch}, {"best_epoch", st.best_epoch}});
}

void cmd_train(ModelKind kind, const config::RunConfig& cfg, const fs::path& pairs_path, const fs::path& folds_path,
               int fold, const fs::path& runs, bool resume) {
  const auto samples = trainer::read_pair_index(pairs_path);
  const auto folds = folds_path.empty() ? folds_for(samples, cfg) : read_folds(folds_path);
  if (fold < 0 || fold >= static_cast<int>(folds.size())) throw ValidationError("--fold out of range");
  const auto split = trainer::split_fold(trainer::load_pair_images<float>(samples), folds[fold]);
  config::RunConfig c = cfg;
  c.train.seed += static_cast<std::uint64_t>(fold);  // same seeding as cv
  trainer::Trainer<float> tr(kind, c, trainer::fold_dir(runs, kind, fold));
  tr.set_logger(logger(losses::to_string(kind)));
  if (!cfg.train.pretrain_checkpoint.empty() && !(resume && fs::exists(tr.last_path()))) {
    tr.load_pretrained(cfg.train.pretrain_checkpoint);
  }
  const auto st = tr.fit(split.train, split.val, {}, resume);
  log_event({{"event", "trained"}, {"model", losses::to_string(kind)}, {"fold", fold}, {"epochs", st.epoch},
             {"best_epoch", st.best_epoch}, {"stopped_early", st.stopped_early}});
}

bool cmd_cv(ModelKind kind, const config::RunConfig& cfg, const fs::path& pairs_path, const fs::path& folds_path,
            const fs::path& runs, bool resume) {
  const auto samples = trainer::read_pair_index(pairs_path);
  const auto folds = folds_path.empty() ? folds_for(samples, cfg) : read_folds(folds_path);
  freeze(trainer::model_dir(runs, kind), cfg, {});
  write_folds(trainer::model_dir(runs, kind) / "folds.json", folds);
  const auto res = trainer::run_cv<float>(kind, cfg, trainer::load_pair_images<float>(samples), folds, runs,
                                          cfg.train.pretrain_checkpoint, logger(losses::to_string(kind)), resume);
  log_event({{"event", "cv_done"}, {"model", losses::to_string(kind)}, {"partial", res.partial},
             {"manifest", res.manifest.string()}});
  return !res.partial;
}

std::vector<metrics::MetricResult> read_metrics(const fs::path& p) {
  std::vector<metrics::MetricResult> out;
  std::ifstream in(p);
  if (!in) throw io::IoError("cannot open " + p.string());
  for (std::string line; std::getline(in, line);) {
    if (!line.empty()) out.push_back(metrics::metric_result_from_json(json::parse(line)));
  }
  return out;
}

void cmd_evaluate(ModelKind kind, const config::RunConfig& cfg, const fs::path& runs) {
  const auto dir = trainer::model_dir(runs, kind);
  const auto records = trainer::read_output_manifest(dir / "test_outputs.jsonl");
  if (records.empty()) throw std::runtime_error("no test outputs in " + dir.string());
  const auto opts = cfg.metrics.options();
  std::string lines;
  std::vector<metrics::MetricResult> results;
  for (const auto& r : records) {
    auto m = metrics::evaluate_pair(trainer::read_any_image(r.target), trainer::read_any_image(r.output), opts);
    m.pair_id = r.pair_id;
    m.fold_index = r.fold;
    m.acr_category = r.acr_category;
    lines += metrics::to_json(m).dump() + "\n";
    results.push_back(m);
  }
  io::write_file_atomic(dir / "metrics.jsonl", lines);
  const auto agg = metrics::aggregate(results);
  json summary = {{"event", "evaluated"}, {"model", losses::to_string(kind)}, {"pairs", results.size()}};
  for (auto m : metrics::kAllMetrics) {
    summary[metrics::to_string(m)] = {{"mean", agg.by_metric.at(m).mean}, {"std", agg.by_metric.at(m).std}};
  }
  log_event(summary);
}

void cmd_report(const fs::path& runs, const fs::path& out, const std::string& scores_path, int panel_size) {
  fs::create_directories(out);
  std::vector<std::pair<std::string, metrics::Aggregate>> rows;
  std::vector<report::AcrBlock> blocks;
  std::map<ModelKind, std::map<std::string, trainer::OutputRecord>> outputs;
  for (auto kind : kinds_of("all")) {
    const auto dir = trainer::model_dir(runs, kind);
    if (!fs::exists(dir / "metrics.jsonl")) continue;
    const auto results = read_metrics(dir / "metrics.jsonl");
    rows.emplace_back(display_name(kind), metrics::aggregate(results));
    blocks.push_back(report::acr_block(display_name(kind), results));
    for (auto& r : trainer::read_output_manifest(dir / "test_outputs.jsonl")) outputs[kind][r.pair_id] = r;
  }
  if (rows.empty()) throw std::runtime_error("no evaluated models under " + runs.string() + " (run `vce evaluate` first)");
  const auto table = report::model_table(rows);
  io::write_file_atomic(out / "model_table.txt", report::render_model_table_text(table));
  io::write_file_atomic(out / "model_table.csv", report::render_model_table_csv(table));
  io::write_file_atomic(out / "acr_table.txt", report::render_acr_table_text(blocks));
  io::write_file_atomic(out / "acr_table.csv", report::render_acr_table_csv(blocks));

  // one panel row per ACR category, using the first pair every model produced
  if (outputs.size() == 3) {
    std::vector<report::PanelRow> panel_rows;
    auto fit = [&](const std::string& p) { return preprocess::resize(trainer::read_any_image(p), panel_size); };
    for (const auto& acr : report::acr_categories()) {
      for (const auto& [pid, rec] : outputs.at(ModelKind::autoencoder)) {
        if (rec.acr_category != acr) continue;
        if (!outputs.at(ModelKind::pix2pix).count(pid) || !outputs.at(ModelKind::cyclegan).count(pid)) continue;
        report::PanelRow row{acr, {fit(rec.input), fit(rec.target)}};
        for (auto kind : kinds_of("all")) row.columns.push_back(fit(outputs.at(kind).at(pid).output));
        panel_rows.push_back(std::move(row));
        break;
      }
    }
    if (!panel_rows.empty()) io::write_png16(out / "panels.png", report::render_panels(panel_rows));
  }
  if (!scores_path.empty()) {
    const json s = config::read_json_file(scores_path);
    auto get = [&](const char* k) { return s.at(k).is_null() ? 0.0 : s.at(k).get<double>(); };
    io::write_file_atomic(out / "study_chart.svg",
                          report::render_study_chart({get("tpr"), get("tnr"), get("birads_accuracy_real"),
                                                      get("birads_accuracy_synthetic")}));
  }
  log_event({{"event", "reported"}, {"dir", out.string()}, {"models", rows.size()}});
}

httplib::Server* g_server = nullptr;

void cmd_study_serve(const fs::path& db, const std::string& pool, const std::string& host, int port, int max_side) {
  study::Store store(db);
  study::Pool p = pool.empty() ? study::Pool{} : study::read_pool(pool);
  study::StudyApi api(store, p, {max_side});
  httplib::Server srv;
  api.bind(srv);
  g_server = &srv;
  std::signal(SIGINT, [](int) { if (g_server) g_server->stop(); });
  std::signal(SIGTERM, [](int) { if (g_server) g_server->stop(); });
  if (port == 0) port = srv.bind_to_any_port(host);
  else if (!srv.bind_to_port(host, port)) throw std::runtime_error("cannot bind " + host + ":" + std::to_string(port));
  log_event({{"event", "study_serving"}, {"host", host}, {"port", port}, {"db", db.string()}});
  srv.listen_after_bind();
  log_event({{"event", "study_stopped"}});
}

void cmd_study_score(const fs::path& db, const std::string& session, const std::string& out) {
  if (!fs::exists(db)) throw ValidationError("no study database at " + db.string());
  study::Store store(db);
  std::vector<std::string> ids = session.empty() ? store.session_ids() : std::vector<std::string>{session};
  json all = json::array();
  for (const auto& id : ids) {
    const auto s = store.session(id);
    if (!s) throw ValidationError("no session " + id);
    all.push_back(study::score_session(*s, store.responses(id)));
  }
  const json result = ids.size() == 1 ? all[0] : all;
  if (!out.empty()) io::write_file_atomic(out, result.dump(2) + "\n");
  std::cout << result.dump(2) << "\n";
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Virtual contrast enhancement workbench: LE mammograms to synthetic DES images"};
  app.require_subcommand(1);
  const std::vector<std::string> args(argv, argv + argc);
  Common common;
  std::string out, manifest, pairs, folds, runs = "runs", model = "all", scores, db = "study.sqlite", pool,
                                     host = "127.0.0.1", session;
  int fold = 0, port = 8080, panel_size = 256, max_side = 512;
  bool resume = false;
  synth::BlobConfig blobs;

  auto* ingest = app.add_subcommand("ingest", "scan a DICOM tree, write manifest.jsonl and folds.json");
  common.add_to(ingest);
  ingest->add_option("--out", out, "output directory")->required();

  auto* prep = app.add_subcommand("preprocess", "pair LE/DES records and cache preprocessed float images");
  common.add_to(prep);
  prep->add_option("--manifest", manifest, "manifest.jsonl from ingest")->required();
  prep->add_option("--out", out, "output directory")->required();

  auto* pretrain = app.add_subcommand("pretrain", "train on a public corpus to initialise later runs");
  common.add_to(pretrain);
  pretrain->add_option("--model", model, "autoencoder | pix2pix | cyclegan")->required();
  pretrain->add_option("--pairs", pairs, "pairs.jsonl")->required();
  pretrain->add_option("--out", out, "run directory")->required();

  auto* train = app.add_subcommand("train", "train one fold");
  common.add_to(train);
  train->add_option("--model", model, "autoencoder | pix2pix | cyclegan")->required();
  train->add_option("--pairs", pairs, "pairs.jsonl")->required();
  train->add_option("--folds", folds, "folds.json (default: derived from the pairs and data.fold_seed)");
  train->add_option("--fold", fold, "fold index")->required();
  train->add_option("--runs", runs, "runs root");
  train->add_flag("--resume", resume, "continue from the last checkpoint");

  auto* cv = app.add_subcommand("cv", "k-fold cross-validation with test-set inference");
  common.add_to(cv);
  cv->add_option("--model", model, "autoencoder | pix2pix | cyclegan | all");
  cv->add_option("--pairs", pairs, "pairs.jsonl")->required();
  cv->add_option("--folds", folds, "folds.json (default: derived from the pairs and data.fold_seed)");
  cv->add_option("--runs", runs, "runs root");
  cv->add_flag("--resume", resume, "continue interrupted folds");

  auto* evaluate = app.add_subcommand("evaluate", "score cv test outputs against their targets");
  common.add_to(evaluate);
  evaluate->add_option("--model", model, "autoencoder | pix2pix | cyclegan | all");
  evaluate->add_option("--runs", runs, "runs root");

  auto* rep = app.add_subcommand("report", "model and ACR tables, panels and the study chart");
  common.add_to(rep);
  rep->add_option("--runs", runs, "runs root");
  rep->add_option("--out", out, "report directory")->default_val("reports");
  rep->add_option("--scores", scores, "study scores JSON for the chart");
  rep->add_option("--panel-size", panel_size, "panel tile side in pixels");

  auto* synth_cmd = app.add_subcommand("synth-blobs", "write the synthetic blob dataset used by the desk harness");
  common.add_to(synth_cmd);
  synth_cmd->add_option("--out", out, "output directory")->required();
  synth_cmd->add_option("--n", blobs.n_pairs, "number of pairs");
  synth_cmd->add_option("--size", blobs.size, "image side");
  synth_cmd->add_option("--seed", blobs.seed, "generator seed");

  auto* study_cmd = app.add_subcommand("study", "reader study service");
  study_cmd->require_subcommand(1);
  auto* serve = study_cmd->add_subcommand("serve", "run the HTTP+JSON study API");
  serve->add_option("--db", db, "SQLite response log");
  serve->add_option("--pool", pool, "default image pool JSON");
  serve->add_option("--host", host, "bind address");
  serve->add_option("--port", port, "port (0 picks a free one)");
  serve->add_option("--max-side", max_side, "longest side of served images");
  auto* score = study_cmd->add_subcommand("score", "score sessions from the persisted log");
  score->add_option("--db", db, "SQLite response log");
  score->add_option("--session", session, "session id (default: all)");
  score->add_option("--out", out, "write the scores JSON here");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  try {
    if (*ingest) {
      const auto cfg = common.load();
      freeze(out, cfg, args);
      cmd_ingest(cfg, out);
    } else if (*prep) {
      const auto cfg = common.load();
      freeze(out, cfg, args);
      cmd_preprocess(cfg, manifest, out);
    } else if (*pretrain) {
      const auto cfg = common.load();
      const auto kinds = kinds_of(model);
      if (kinds.size() != 1) throw ValidationError("pretrain takes a single model");
      freeze(out, cfg, args);
      cmd_pretrain(kinds[0], cfg, pairs, out);
    } else if (*train) {
      const auto cfg = common.load();
      const auto kinds = kinds_of(model);
      if (kinds.size() != 1) throw ValidationError("train takes a single model");
      freeze(trainer::fold_dir(runs, kinds[0], fold), cfg, args);
      cmd_train(kinds[0], cfg, pairs, folds, fold, runs, resume);
    } else if (*cv) {
      const auto cfg = common.load();
      freeze(runs, cfg, args);
      bool ok = true;
      for (auto k : kinds_of(model)) ok = cmd_cv(k, cfg, pairs, folds, runs, resume) && ok;
      if (!ok) {
        log_event({{"event", "error"}, {"message", "cross-validation finished with failed folds"}});
        return 2;
      }
    } else if (*evaluate) {
      const auto cfg = common.load();
      for (auto k : kinds_of(model)) {
        if (model == "all" && !fs::exists(trainer::model_dir(runs, k) / "test_outputs.jsonl")) continue;
        cmd_evaluate(k, cfg, runs);
      }
    } else if (*rep) {
      freeze(out, common.load(), args);
      cmd_report(runs, out, scores, panel_size);
    } else if (*synth_cmd) {
      const auto cfg = common.load();
      freeze(out, cfg, args);
      const auto samples = synth::write_blob_dataset(out, blobs);
      write_folds(fs::path(out) / "folds.json", folds_for(samples, cfg));
      log_event({{"event", "synth_written"}, {"pairs", samples.size()}, {"dir", out}});
    } else if (*serve) {
      cmd_study_serve(db, pool, host, port, max_side);
    } else if (*score) {
      cmd_study_score(db, session, out);
    }
  } catch (const config::ConfigError& e) {
    log_event({{"event", "error"}, {"kind", "validation"}, {"key", e.key}, {"message", e.what()}});
    return 1;
  } catch (const ValidationError& e) {
    log_event({{"event", "error"}, {"kind", "validation"}, {"message", e.what()}});
    return 1;
  } catch (const study::StudyError& e) {
    log_event({{"event", "error"}, {"kind", "validation"}, {"message", e.what()}});
    return 1;
  } catch (const std::exception& e) {
    log_event({{"event", "error"}, {"kind", "runtime"}, {"message", e.what()}});
    return 2;
  }
  return 0;
}
