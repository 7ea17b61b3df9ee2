/*
 * Copyright 2026 The mriseq Authors
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *    http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */
#pragma once
#pragma once

// Command-line front end. cli_dispatch() returns the process exit code:
// 0 success, 1 unexpected failure, 2 usage error, 3 data error, 4 numeric
// failure.

#include <algorithm>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "mriseq/mriseq.hpp"

namespace mriseq::cli {

namespace fs = std::filesystem;
using nlohmann::json;

enum ExitCode : int { kOk = 0, kFailure = 1, kUsage = 2, kData = 3, kNumeric = 4 };

struct Streams {
  std::ostream& out = std::cout;
  std::ostream& err = std::cerr;
};

namespace detail {

inline void write_json(const fs::path& p, const json& j) {
  std::ofstream os(p, std::ios::trunc);
  os << j.dump(2) << '\n';
  if (!os) throw DataError("cannot write '" + p.string() + "'");
}

inline json read_json(const fs::path& p) {
  if (!fs::exists(p)) throw DataError("missing file '" + p.string() + "'");
  try {
    return json::parse(mriseq::detail::slurp(p));
  } catch (const json::exception& e) {
    throw DataError("malformed JSON in '" + p.string() + "': " + e.what());
  }
}

/// Appends `--key value` for every config-file key that is not already given
/// on the command line. Keys may use '-' or '_'.
inline std::vector<std::string> merge_config_file(std::vector<std::string> args) {
  auto it = std::find(args.begin(), args.end(), "--config");
  if (it == args.end()) return args;
  if (it + 1 == args.end()) throw UsageError("--config needs a file argument");
  const fs::path path = *(it + 1);
  args.erase(it, it + 2);
  json cfg;
  try {
    cfg = json::parse(mriseq::detail::slurp(path));
  } catch (const json::exception& e) {
    throw UsageError("malformed config file '" + path.string() + "': " + e.what());
  } catch (const DataError& e) {
    throw UsageError(e.what());
  }
  if (!cfg.is_object()) throw UsageError("config file '" + path.string() + "' must hold a JSON object");
  auto scalar = [](const json& v) { return v.is_string() ? v.get<std::string>() : v.dump(); };
  for (const auto& [key, v] : cfg.items()) {
    std::string flag = "--" + key;
    std::replace(flag.begin(), flag.end(), '_', '-');
    if (std::find(args.begin(), args.end(), flag) != args.end()) continue;
    if (v.is_boolean()) {
      if (v.get<bool>()) args.push_back(flag);
    } else if (v.is_array()) {
      args.push_back(flag);
      for (const auto& e : v) args.push_back(scalar(e));
    } else if (!v.is_null()) {
      args.push_back(flag);
      args.push_back(scalar(v));
    }
  }
  return args;
}

inline std::uint64_t default_seed() {
  if (const char* s = std::getenv("MRISEQ_SEED")) {
    try {
      return std::stoull(s);
    } catch (const std::exception&) {
      throw UsageError(std::string("MRISEQ_SEED is not an unsigned integer: '") + s + "'");
    }
  }
  return 0;
}

}  // namespace detail

/// Options shared by train, sweep and seeds.
struct TrainArgs {
  std::string manifest;
  std::string mix;
  std::string finetune;
  std::string cache;
  std::string arch = "densenet3d";
  bool toy = false;
  int epochs = 25;
  int batch_size = 2;
  double lr = 1e-4;
  int folds = 5;
  double val_ratio = 0.12;
  double fraction = 1.0;
  std::vector<std::size_t> dims;
  std::vector<double> spacing;
  unsigned jobs = 1;
  std::uint64_t seed = 0;

  void add_to(CLI::App* app, bool with_grid_values = true) {
    app->add_option("--manifest", manifest, "Labeled training manifest (CSV)")->required();
    app->add_option("--mix", mix, "Second manifest merged into the training pool");
    app->add_option("--finetune", finetune, "Initialize from a checkpoint (all folds) or a run directory (fold k from fold k)");
    app->add_option("--cache", cache, "Directory for cached preprocessed volumes");
    app->add_option("--arch", arch, "densenet3d or resnet3d")->check(CLI::IsMember({"densenet3d", "resnet3d"}));
    app->add_flag("--toy", toy, "Desk-scale model and 32x32x8 preprocessing");
    app->add_option("--epochs", epochs)->check(CLI::NonNegativeNumber);
    if (with_grid_values) {
      app->add_option("--batch-size", batch_size)->check(CLI::PositiveNumber);
      app->add_option("--lr", lr)->check(CLI::PositiveNumber);
    }
    app->add_option("--folds", folds)->check(CLI::PositiveNumber);
    app->add_option("--val-ratio", val_ratio)->check(CLI::Range(0.0, 1.0));
    app->add_option("--fraction", fraction, "Fraction of patients used (nested subsets)")->check(CLI::Range(0.0, 1.0));
    app->add_option("--dims", dims, "Preprocessing target dims X Y Z")->expected(3);
    app->add_option("--spacing", spacing, "Preprocessing target spacing in mm")->expected(3);
    app->add_option("--jobs", jobs, "Worker threads (folds and loading)")->check(CLI::PositiveNumber);
    app->add_option("--seed", seed)->envname("MRISEQ_SEED");
  }

  TrainConfig resolve() const {
    TrainConfig c;
    const Arch a = parse_arch(arch);
    c.model = toy ? ModelConfig::toy(a) : (a == Arch::DenseNet3D ? ModelConfig::densenet121() : ModelConfig::resnet50());
    c.preprocess = toy ? PreprocessConfig::toy() : PreprocessConfig{};
    if (!dims.empty()) c.preprocess.target_dims = {dims[0], dims[1], dims[2]};
    if (!spacing.empty()) c.preprocess.target_spacing = {spacing[0], spacing[1], spacing[2]};
    c.epochs = epochs;
    c.batch_size = batch_size;
    c.learning_rate = lr;
    c.folds = folds;
    c.val_ratio = val_ratio;
    c.data_fraction = fraction;
    c.seed = seed;
    if (!finetune.empty()) {
      const fs::path base = finetune;
      const fs::path probe = fs::is_directory(base) ? base / "fold0" / "best.ckpt" : base;
      if (!fs::exists(probe)) throw DataError("fine-tune base '" + probe.string() + "' does not exist");
      mriseq::detail::ByteReader r(mriseq::detail::slurp(probe), probe.string());
      c.model = read_checkpoint_config(r, probe.string());
      c.finetune_from = fs::absolute(base).lexically_normal().string();
    }
    c.validate();
    return c;
  }

  DatasetManifest load_pool() const {
    auto m = load_manifest(manifest);
    if (!mix.empty()) m = merge_manifests(m, load_manifest(mix));
    return m;
  }
};

inline TrainOptions train_options(const TrainArgs& a, const Streams& io) {
  TrainOptions o;
  o.jobs = a.jobs;
  o.cache_dir = a.cache;
  o.log = [&io](const std::string& s) { io.err << s << '\n'; };
  return o;
}

inline void run_training(const TrainArgs& a, const TrainConfig& cfg, const fs::path& out, const Streams& io) {
  const auto pool = a.load_pool();
  json extra{{"command", "train"}, {"manifest", fs::absolute(a.manifest).lexically_normal().string()}};
  if (!a.mix.empty()) extra["mix"] = fs::absolute(a.mix).lexically_normal().string();
  io.err << "training " << cfg.folds << " fold(s) of " << arch_name(cfg.model.arch) << " on " << pool.records.size()
         << " series -> " << out.string() << '\n';
  train_cv(pool, cfg, out, train_options(a, io), extra);
}

struct EvalArgs {
  std::string run;
  std::string predictions;
  std::string manifest;
  std::string out;
  std::size_t resamples = 1000;
  unsigned jobs = 1;
  std::uint64_t seed = 0;
};

/// Scores predictions against the labels of `manifest` and writes
/// predictions.csv (when predicting from a run), metrics.json and
/// confusion.csv into `out`.
inline json run_eval(const EvalArgs& a, const Streams& io) {
  if (a.run.empty() == a.predictions.empty()) throw UsageError("eval needs exactly one of --run or --predictions");
  const auto m = load_manifest(a.manifest);
  const fs::path out = a.out.empty() ? fs::path(a.run.empty() ? fs::path(a.predictions).parent_path() : fs::path(a.run))
                                     : fs::path(a.out);
  fs::create_directories(out);
  std::vector<PredictionRow> rows;
  if (!a.run.empty()) {
    auto ens = load_ensemble(a.run);
    rows = predict_study(ens, m, a.jobs);
    write_predictions_csv(rows, out / "predictions.csv");
  } else {
    const auto given = read_predictions_csv(a.predictions);
    std::map<std::string, const PredictionRow*> by_path;
    for (const auto& r : given) by_path[r.volume_path] = &r;
    for (const auto& rec : m.records) {
      auto it = by_path.find(rec.volume_path);
      if (it == by_path.end()) throw DataError("no prediction for '" + rec.volume_path + "' in '" + a.predictions + "'");
      rows.push_back(*it->second);
    }
  }
  std::vector<int> preds, truths;
  std::vector<ClassProbs> probs;
  std::size_t errors = 0;
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (!rows[i].prediction) {
      ++errors;
      io.err << "series '" << rows[i].volume_path << "' failed: " << rows[i].error << '\n';
      continue;
    }
    preds.push_back(static_cast<int>(label_index(rows[i].prediction->label)));
    probs.push_back(rows[i].prediction->probabilities);
    truths.push_back(static_cast<int>(label_index(m.records[i].label)));
  }
  if (truths.empty()) throw DataError("no series could be scored");
  const auto rep = evaluate_predictions(preds, probs, truths, a.resamples, 0.95, a.seed);
  json j = report_json(rep);
  j["manifest"] = fs::absolute(a.manifest).lexically_normal().string();
  j["errors"] = errors;
  j["bootstrap"] = {{"resamples", a.resamples}, {"seed", a.seed}, {"level", 0.95}};
  if (!a.run.empty()) {
    const auto rc = detail::read_json(fs::path(a.run) / "config.json");
    j["run"] = {{"dir", fs::absolute(a.run).lexically_normal().string()},
                {"seed", rc.value("seed", 0ull)},
                {"data_fraction", rc.value("data_fraction", 1.0)},
                {"arch", rc.contains("model") ? rc["model"].value("arch", "") : ""},
                {"mode", rc.value("mode", "scratch")}};
  }
  detail::write_json(out / "metrics.json", j);
  write_confusion_csv(rep.confusion, out / "confusion.csv");
  char buf[128];
  std::snprintf(buf, sizeof buf, "accuracy %.4f [%.4f, %.4f] f1 %.4f auc %.4f (n=%zu)", rep.accuracy.value,
                rep.accuracy.ci.lo, rep.accuracy.ci.hi, rep.f1.value, rep.auc.value, rep.n);
  io.out << buf << '\n';
  return j;
}

inline std::vector<std::pair<std::string, std::string>> summary_columns() {
  return {{"accuracy", "accuracy"}, {"precision", "precision"}, {"sensitivity", "sensitivity"},
          {"specificity", "specificity"}, {"f1", "f1"}, {"auc", "auc"}};
}

/// summary.csv, fraction_curve.csv and summary.json over run directories.
inline json run_report(const std::vector<std::string>& runs, const fs::path& out, const Streams& io) {
  if (runs.empty()) throw UsageError("report needs at least one run directory");
  struct Row {
    std::string id;
    double fraction;
    std::uint64_t seed;
    json metrics;
  };
  std::vector<Row> rows;
  for (const auto& r : runs) {
    const fs::path dir(r);
    const auto mp = dir / "metrics.json";
    if (!fs::exists(mp)) throw DataError("run '" + r + "' has no metrics.json (run eval first)");
    const json mj = detail::read_json(mp);
    json cj = fs::exists(dir / "config.json") ? detail::read_json(dir / "config.json") : json::object();
    rows.push_back({dir.filename().empty() ? dir.parent_path().filename().string() : dir.filename().string(),
                    cj.value("data_fraction", 1.0), cj.value("seed", 0ull), mj});
  }
  fs::create_directories(out);
  auto fmt = [](const json& v) { return v.is_null() ? std::string() : csv::format_double(v.get<double>()); };
  auto write_table = [&](const fs::path& p, const std::vector<const Row*>& order) {
    std::ofstream os(p, std::ios::trunc);
    os << "run,fraction,seed";
    for (const auto& [k, name] : summary_columns()) os << ',' << name << ',' << name << "_lo," << name << "_hi";
    os << '\n';
    for (const Row* row : order) {
      os << csv::escape(row->id) << ',' << csv::format_double(row->fraction) << ',' << row->seed;
      for (const auto& [k, name] : summary_columns()) {
        const auto& e = row->metrics.at(k);
        os << ',' << fmt(e.at("value")) << ',' << fmt(e.at("ci95")[0]) << ',' << fmt(e.at("ci95")[1]);
      }
      os << '\n';
    }
    if (!os) throw DataError("cannot write '" + p.string() + "'");
  };
  std::vector<const Row*> order;
  for (const auto& r : rows) order.push_back(&r);
  write_table(out / "summary.csv", order);
  std::stable_sort(order.begin(), order.end(), [](const Row* a, const Row* b) { return a->fraction < b->fraction; });
  write_table(out / "fraction_curve.csv", order);

  double lo = 1e300, hi = -1e300;
  for (const auto& r : rows) {
    const double acc = r.metrics.at("accuracy").at("value").get<double>();
    lo = std::min(lo, acc);
    hi = std::max(hi, acc);
  }
  json s{{"runs", rows.size()}, {"accuracy_min", lo}, {"accuracy_max", hi}, {"accuracy_spread", hi - lo}};
  detail::write_json(out / "summary.json", s);
  io.out << "runs " << rows.size() << " accuracy spread (max-min) " << (hi - lo) << '\n';
  return s;
}

/// Records for every volume header under `dir`, sorted by path; labels are
/// unknown and set to T1w-pre.
inline DatasetManifest study_manifest(const fs::path& dir) {
  if (!fs::is_directory(dir)) throw DataError("study directory '" + dir.string() + "' does not exist");
  DatasetManifest m;
  m.root_dir = dir;
  std::vector<std::string> paths;
  for (const auto& e : fs::recursive_directory_iterator(dir))
    if (e.is_regular_file() && e.path().extension() == ".vh") paths.push_back(fs::relative(e.path(), dir).generic_string());
  std::sort(paths.begin(), paths.end());
  for (const auto& p : paths) {
    SeriesRecord r;
    r.volume_path = p;
    r.patient_id = dir.filename().string();
    r.study_id = dir.filename().string();
    m.records.push_back(r);
  }
  if (m.records.empty()) throw DataError("no volumes found under '" + dir.string() + "'");
  return m;
}

inline std::vector<int> labels_from_predictions(const fs::path& csv_path, const DatasetManifest& m) {
  const auto rows = read_predictions_csv(csv_path);
  std::map<std::string, int> by_path;
  for (const auto& r : rows) by_path[r.volume_path] = r.prediction ? static_cast<int>(label_index(r.prediction->label)) : -1;
  std::vector<int> out;
  for (const auto& rec : m.records) {
    auto it = by_path.find(rec.volume_path);
    if (it == by_path.end()) throw DataError("'" + csv_path.string() + "' has no row for '" + rec.volume_path + "'");
    out.push_back(it->second);
  }
  return out;
}

inline int dispatch_impl(std::vector<std::string> args, const Streams& io) {
  args = detail::merge_config_file(std::move(args));
  CLI::App app{"Body MRI series-type classification toolkit", "mriseq"};
  app.require_subcommand(1);
  const std::uint64_t env_seed = detail::default_seed();

  // synth
  auto* synth = app.add_subcommand("synth", "Generate a synthetic phantom dataset");
  PhantomConfig pc;
  pc.seed = env_seed;
  std::string synth_out, domain = "A";
  std::vector<std::size_t> pdims;
  std::vector<double> pspacing;
  std::optional<double> gain, offset, extra_noise, gamma, bias_field;
  synth->add_option("--out", synth_out, "Output directory")->required();
  synth->add_option("--patients", pc.n_patients)->check(CLI::PositiveNumber);
  synth->add_option("--studies", pc.studies_per_patient)->check(CLI::PositiveNumber);
  synth->add_option("--first-patient", pc.first_patient);
  synth->add_option("--prefix", pc.patient_prefix);
  synth->add_option("--dims", pdims)->expected(3);
  synth->add_option("--spacing", pspacing)->expected(3);
  synth->add_option("--noise", pc.noise_sigma)->check(CLI::NonNegativeNumber);
  synth->add_option("--jitter", pc.jitter)->check(CLI::NonNegativeNumber);
  synth->add_option("--domain", domain, "Scanner profile A or B")->check(CLI::IsMember({"A", "B"}));
  synth->add_option("--gain", gain);
  synth->add_option("--offset", offset);
  synth->add_option("--extra-noise", extra_noise);
  synth->add_option("--gamma", gamma);
  synth->add_option("--bias-field", bias_field);
  synth->add_option("--seed", pc.seed)->envname("MRISEQ_SEED");

  // preprocess
  auto* prep = app.add_subcommand("preprocess", "Fill the preprocessing cache for a manifest");
  std::string prep_manifest, prep_out;
  bool prep_toy = false;
  std::vector<std::size_t> prep_dims;
  std::vector<double> prep_spacing, prep_clip;
  unsigned prep_jobs = 1;
  prep->add_option("--manifest", prep_manifest)->required();
  prep->add_option("--out", prep_out, "Cache directory")->required();
  prep->add_flag("--toy", prep_toy);
  prep->add_option("--dims", prep_dims)->expected(3);
  prep->add_option("--spacing", prep_spacing)->expected(3);
  prep->add_option("--clip", prep_clip, "Percentiles lo hi")->expected(2);
  prep->add_option("--jobs", prep_jobs)->check(CLI::PositiveNumber);

  // train
  auto* train = app.add_subcommand("train", "Cross-validated training");
  TrainArgs ta;
  ta.seed = env_seed;
  std::string train_out;
  ta.add_to(train);
  train->add_option("--out", train_out, "Run directory")->required();

  // predict
  auto* predict = app.add_subcommand("predict", "Classify series with a trained ensemble");
  std::string pr_run, pr_manifest, pr_study, pr_out;
  unsigned pr_jobs = 1;
  predict->add_option("--run", pr_run)->required();
  predict->add_option("--manifest", pr_manifest);
  predict->add_option("--study", pr_study, "Directory of volumes");
  predict->add_option("--out", pr_out, "Prediction CSV")->required();
  predict->add_option("--jobs", pr_jobs)->check(CLI::PositiveNumber);

  // eval
  auto* eval = app.add_subcommand("eval", "Metrics against a labeled manifest");
  EvalArgs ea;
  ea.seed = env_seed;
  eval->add_option("--run", ea.run);
  eval->add_option("--predictions", ea.predictions);
  eval->add_option("--manifest", ea.manifest)->required();
  eval->add_option("--out", ea.out, "Output directory (default: the run directory)");
  eval->add_option("--resamples", ea.resamples)->check(CLI::PositiveNumber);
  eval->add_option("--jobs", ea.jobs)->check(CLI::PositiveNumber);
  eval->add_option("--seed", ea.seed)->envname("MRISEQ_SEED");

  // mcnemar
  auto* mcn = app.add_subcommand("mcnemar", "Paired test of two evaluated runs");
  std::string run_a, run_b, mc_manifest, mc_out;
  mcn->add_option("run_a", run_a)->required();
  mcn->add_option("run_b", run_b)->required();
  mcn->add_option("--manifest", mc_manifest, "Labeled manifest (default: the one recorded by eval)");
  mcn->add_option("--out", mc_out, "Write the result as JSON");

  // gradcam
  auto* gc = app.add_subcommand("gradcam", "Saliency volume and slice overlay");
  std::string gc_run, gc_ckpt, gc_volume, gc_out, gc_class, gc_layer = "final";
  int gc_axis = 2;
  std::optional<std::size_t> gc_slice;
  bool gc_toy = false;
  gc->add_option("--run", gc_run);
  gc->add_option("--checkpoint", gc_ckpt);
  gc->add_option("--volume", gc_volume)->required();
  gc->add_flag("--toy", gc_toy, "With --checkpoint: use the desk-scale preprocessing");
  gc->add_option("--class", gc_class, "Target label (default: predicted)");
  gc->add_option("--layer", gc_layer);
  gc->add_option("--axis", gc_axis)->check(CLI::Range(0, 2));
  gc->add_option("--slice", gc_slice);
  gc->add_option("--out", gc_out)->required();

  // sweep
  auto* sweep = app.add_subcommand("sweep", "Grid over batch size and learning rate");
  TrainArgs sa;
  sa.seed = env_seed;
  std::string sweep_out, sweep_eval;
  std::vector<int> sweep_bs{1, 2, 4};
  std::vector<double> sweep_lr{1e-4, 3e-4, 1e-3};
  sa.add_to(sweep, false);
  sweep->add_option("--batch-sizes", sweep_bs)->check(CLI::PositiveNumber);
  sweep->add_option("--lrs", sweep_lr)->check(CLI::PositiveNumber);
  sweep->add_option("--eval-manifest", sweep_eval)->required();
  sweep->add_option("--out", sweep_out)->required();

  // seeds
  auto* seeds = app.add_subcommand("seeds", "Repeat training and evaluation over seeds");
  TrainArgs sd;
  std::string seeds_out, seeds_eval;
  std::vector<std::uint64_t> seed_list{1, 2, 3};
  sd.add_to(seeds);
  seeds->add_option("--seeds", seed_list)->required();
  seeds->add_option("--eval-manifest", seeds_eval)->required();
  seeds->add_option("--out", seeds_out)->required();

  // report
  auto* report = app.add_subcommand("report", "Aggregate evaluated runs");
  std::vector<std::string> report_runs;
  std::string report_out = ".";
  report->add_option("runs,--runs", report_runs, "Run directories");
  report->add_option("--out", report_out);

  try {
    std::vector<std::string> rev(args.rbegin(), args.rend());
    app.parse(rev);
  } catch (const CLI::CallForHelp&) {
    io.out << app.help();
    return kOk;
  } catch (const CLI::CallForAllHelp&) {
    io.out << app.help("", CLI::AppFormatMode::All);
    return kOk;
  } catch (const CLI::ParseError& e) {
    io.err << "usage error: " << e.what() << '\n';
    return kUsage;
  }

  auto all_options = [](CLI::App* sub) {
    json j = json::object();
    for (const auto* o : sub->get_options()) {
      if (o->get_name() == "--help" || o->get_name().empty()) continue;
      std::string key = o->get_name();
      while (!key.empty() && key.front() == '-') key.erase(0, 1);
      if (key.find(',') != std::string::npos) key = key.substr(0, key.find(','));
      const auto res = o->results();
      if (o->get_type_size() == 0)
        j[key] = o->count() > 0;
      else if (res.size() == 1)
        j[key] = res[0];
      else if (!res.empty())
        j[key] = res;
    }
    return j;
  };

  if (*synth) {
    if (!pdims.empty()) pc.dims = {pdims[0], pdims[1], pdims[2]};
    if (!pspacing.empty()) pc.spacing = {pspacing[0], pspacing[1], pspacing[2]};
    pc.domain = domain == "B" ? DomainProfile::B() : DomainProfile::A();
    if (gain) pc.domain.gain = *gain;
    if (offset) pc.domain.offset = *offset;
    if (extra_noise) pc.domain.extra_noise = *extra_noise;
    if (gamma) pc.domain.gamma = *gamma;
    if (bias_field) pc.domain.bias_field = *bias_field;
    pc.validate();
    fs::create_directories(synth_out);
    detail::write_json(fs::path(synth_out) / "config.json", all_options(synth));
    const auto m = generate_dataset(pc, synth_out);
    io.out << "wrote " << m.records.size() << " series for " << pc.n_patients << " patient(s) to " << synth_out
           << '\n';
  } else if (*prep) {
    PreprocessConfig cfg = prep_toy ? PreprocessConfig::toy() : PreprocessConfig{};
    if (!prep_dims.empty()) cfg.target_dims = {prep_dims[0], prep_dims[1], prep_dims[2]};
    if (!prep_spacing.empty()) cfg.target_spacing = {prep_spacing[0], prep_spacing[1], prep_spacing[2]};
    if (!prep_clip.empty()) cfg.clip_percentiles = {prep_clip[0], prep_clip[1]};
    cfg.validate();
    fs::create_directories(prep_out);
    json echo = all_options(prep);
    echo["resolved"] = cfg;
    detail::write_json(fs::path(prep_out) / "preprocess_config.json", echo);
    const auto m = load_manifest(prep_manifest);
    SeriesCache cache(cfg, prep_out);
    cache.prepare(m, m.records, prep_jobs);
    io.out << "cached " << m.records.size() << " series under " << (fs::path(prep_out) / config_digest(cfg)).string()
           << '\n';
  } else if (*train) {
    const auto cfg = ta.resolve();
    run_training(ta, cfg, train_out, io);
    io.out << "run written to " << train_out << '\n';
  } else if (*predict) {
    if (pr_manifest.empty() == pr_study.empty()) throw UsageError("predict needs exactly one of --manifest or --study");
    auto ens = load_ensemble(pr_run);
    const auto m = pr_manifest.empty() ? study_manifest(pr_study) : load_manifest(pr_manifest);
    const auto rows = predict_study(ens, m, pr_jobs);
    if (const auto parent = fs::path(pr_out).parent_path(); !parent.empty()) fs::create_directories(parent);
    write_predictions_csv(rows, pr_out);
    std::size_t failed = 0;
    for (const auto& r : rows)
      if (!r.prediction) {
        ++failed;
        io.err << "series '" << r.volume_path << "' failed: " << r.error << '\n';
      }
    io.out << rows.size() - failed << " prediction(s), " << failed << " error(s) -> " << pr_out << '\n';
  } else if (*eval) {
    run_eval(ea, io);
  } else if (*mcn) {
    std::string man = mc_manifest;
    if (man.empty()) man = detail::read_json(fs::path(run_a) / "metrics.json").value("manifest", "");
    if (man.empty()) throw UsageError("mcnemar needs --manifest (none recorded in '" + run_a + "')");
    const auto m = load_manifest(man);
    const auto pa = labels_from_predictions(fs::path(run_a) / "predictions.csv", m);
    const auto pb = labels_from_predictions(fs::path(run_b) / "predictions.csv", m);
    std::vector<int> truths;
    for (const auto& r : m.records) truths.push_back(static_cast<int>(label_index(r.label)));
    const auto res = mcnemar(pa, pb, truths);
    json j{{"run_a", run_a}, {"run_b", run_b}, {"b", res.b},         {"c", res.c},
           {"statistic", res.statistic}, {"p_value", res.p_value}, {"exact", res.exact}, {"n", truths.size()}};
    if (!mc_out.empty()) detail::write_json(mc_out, j);
    io.out << j.dump() << '\n';
  } else if (*gc) {
    if (gc_run.empty() == gc_ckpt.empty()) throw UsageError("gradcam needs exactly one of --run or --checkpoint");
    PreprocessConfig pcfg;
    std::optional<Model<float>> model;
    if (!gc_run.empty()) {
      auto ens = load_ensemble(gc_run);
      pcfg = ens.preprocess;
      model = std::move(ens.members.front());
    } else {
      model = load_checkpoint<float>(gc_ckpt);
      pcfg = gc_toy ? PreprocessConfig::toy() : PreprocessConfig{};
    }
    const auto pre = preprocess_pipeline(read_volume(gc_volume), pcfg);
    int target;
    if (gc_class.empty()) {
      ad::NoGradGuard ng;
      const auto logits = model->forward(
          ad::Tensor<float>::from({1, 1, pre.dims()[0], pre.dims()[1], pre.dims()[2]}, volume_to_tensor_data<float>(pre)),
          false);
      target = static_cast<int>(argmax_index(softmax_row<float>(logits.data())));
    } else {
      const auto l = parse_label(gc_class);
      if (!l) throw UsageError("unknown label '" + gc_class + "'");
      target = static_cast<int>(label_index(*l));
    }
    const auto sal = gradcam(*model, pre, target, gc_layer);
    fs::create_directories(gc_out);
    write_volume(sal.to_volume(pre.spacing()), fs::path(gc_out) / "saliency.vh");
    write_volume(pre, fs::path(gc_out) / "input.vh");
    const std::size_t slice = gc_slice.value_or(pre.dims()[gc_axis] / 2);
    export_overlay(pre, sal, gc_axis, slice, fs::path(gc_out) / "overlay.ppm");
    io.out << "gradcam for " << label_name(label_from_index(target)) << " at layer '" << gc_layer << "' -> "
           << gc_out << '\n';
  } else if (*sweep) {
    std::vector<std::string> runs;
    for (int bs : sweep_bs)
      for (double lr : sweep_lr) {
        TrainArgs a = sa;
        a.batch_size = bs;
        a.lr = lr;
        char name[64];
        std::snprintf(name, sizeof name, "bs%d_lr%g", bs, lr);
        const fs::path dir = fs::path(sweep_out) / name;
        run_training(a, a.resolve(), dir, io);
        EvalArgs e;
        e.run = dir.string();
        e.manifest = sweep_eval;
        e.jobs = a.jobs;
        e.seed = a.seed;
        run_eval(e, io);
        runs.push_back(dir.string());
      }
    run_report(runs, sweep_out, io);
  } else if (*seeds) {
    std::vector<std::string> runs;
    for (auto s : seed_list) {
      TrainArgs a = sd;
      a.seed = s;
      const fs::path dir = fs::path(seeds_out) / ("seed" + std::to_string(s));
      run_training(a, a.resolve(), dir, io);
      EvalArgs e;
      e.run = dir.string();
      e.manifest = seeds_eval;
      e.jobs = a.jobs;
      e.seed = s;
      run_eval(e, io);
      runs.push_back(dir.string());
    }
    run_report(runs, seeds_out, io);
  } else if (*report) {
    run_report(report_runs, report_out, io);
  }
  return kOk;
}

inline int dispatch(std::vector<std::string> args, const Streams& io) {
  try {
    return dispatch_impl(std::move(args), io);
  } catch (const UsageError& e) {
    io.err << "usage error: " << e.what() << '\n';
    return kUsage;
  } catch (const NumericError& e) {
    io.err << "numeric failure: " << e.what() << '\n';
    return kNumeric;
  } catch (const DataError& e) {
    io.err << "data error: " << e.what() << '\n';
    return kData;
  } catch (const ShapeError& e) {
    io.err << "data error: " << e.what() << '\n';
    return kData;
  } catch (const std::exception& e) {
    io.err << "error: " << e.what() << '\n';
    return kFailure;
  }
}

}  // namespace mriseq::cli

namespace mriseq {

/// Runs one command line (without the program name).
inline int cli_dispatch(std::vector<std::string> args, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  return cli::dispatch(std::move(args), cli::Streams{out, err});
}

}  // namespace mriseq
