#pragma once

// Manifest-driven experiment stages. Every stage writes into
// <output>/<config hash prefix>/ and skips work whose outputs already exist,
// so a rerun with the same manifest only fills in what is missing.

#include <filesystem>
#include <functional>
#include <iostream>
#include <set>

#include "dodem/dataset_io.hpp"
#include "dodem/defense.hpp"
#include "dodem/report.hpp"
#include "dodem/synthetic.hpp"

namespace dodem {

namespace fs = std::filesystem;

struct DataSection {
  std::string source = "synthetic";  // "synthetic" or "cmapss"
  std::string dir;                   // directory holding train_FD00x.txt etc.
  std::uint64_t synthetic_seed = 2024;
  std::vector<std::string> datasets{"FD001", "FD002", "FD003", "FD004"};
  std::string target = "FD001";
  std::size_t max_units = 0;  // 0 keeps every training unit
  double train_fraction = 0.6;
  double val_fraction = 0.2;
  std::size_t window = 80;
  std::size_t stride = 1;
  std::size_t eval_stride = 1;
  double rul_cap = 125.0;
};

struct ModelSection {
  std::vector<std::string> targets{"RNN", "LSTM", "BLSTM", "GRU", "BGRU", "CGRU", "GLSTM"};
  std::string substitute = "CNN1D";
  double width_scale = 1.0;
  double dropout = 0.5;
  double output_scale = 1.0;
  TrainConfig train;
};

struct AttackSection {
  std::vector<std::string> methods{"FGSM", "BIM", "MIM"};
  double epsilon = 0.1;
  int iterations = 100;
  double decay = 1.0;
  std::vector<double> ratios{0.01, 0.05, 0.1, 0.2};
};

struct DetectSection {
  std::vector<double> nu{kDetectorGrid.begin(), kDetectorGrid.end()};
  std::vector<double> contamination{kDetectorGrid.begin(), kDetectorGrid.end()};
  std::size_t k = 20;
  std::string pipeline_detector = "LOF";
  std::size_t fit_rows = 2000;  // clean training rows used to fit the detectors
  double calibration_ratio = 0.2;
  SdaeConfig sdae;
};

struct Manifest {
  DataSection data;
  ModelSection models;
  AttackSection attacks;
  DetectSection detect;
  RetrainPlan retrain;
  std::uint64_t seed = 1;
  std::string output = "runs";

  AttackSpec attack_spec(const std::string& method) const {
    AttackSpec s{attack_method_from_string(method), attacks.epsilon, attacks.iterations, attacks.decay, true};
    s.validate();
    return s;
  }

  ModelSpec model_spec(const std::string& arch) const {
    ModelSpec s;
    s.architecture = architecture_from_string(arch);
    s.width_scale = models.width_scale;
    s.dropout = models.dropout;
    s.output_scale = models.output_scale;
    s.validate();
    return s;
  }

  void validate() const {
    if (data.source != "synthetic" && data.source != "cmapss") throw InputError("data.source must be synthetic or cmapss");
    if (data.source == "cmapss" && !fs::is_directory(data.dir)) throw InputError("data.dir '" + data.dir + "' does not exist");
    if (data.datasets.empty()) throw InputError("no datasets listed");
    if (std::find(data.datasets.begin(), data.datasets.end(), data.target) == data.datasets.end())
      throw InputError("target dataset is not among data.datasets");
    if (!(data.train_fraction > 0 && data.val_fraction > 0 && data.train_fraction + data.val_fraction < 1))
      throw InputError("train and validation fractions must be positive and leave room for a test split");
    if (data.window == 0 || data.stride == 0 || data.eval_stride == 0) throw InputError("window and strides must be >= 1");
    if (!(data.rul_cap > 0)) throw InputError("RUL cap must be positive");
    if (models.targets.empty()) throw InputError("no target architectures");
    for (const auto& a : models.targets) model_spec(a);
    model_spec(models.substitute);
    for (const auto& m : attacks.methods) attack_spec(m);
    for (double r : attacks.ratios)
      if (!(r > 0 && r < 1)) throw InputError("attack ratios must lie in (0,1)");
    for (double v : detect.nu)
      if (!(v > 0 && v <= 1)) throw InputError("nu values must lie in (0,1]");
    for (double v : detect.contamination)
      if (!(v > 0 && v <= 0.5)) throw InputError("contamination values must lie in (0,0.5]");
    detector_kind_from_string(detect.pipeline_detector);
    if (!(retrain.budget > 0 && retrain.budget <= 1)) throw InputError("retrain budget must lie in (0,1]");
  }
};

inline void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = {{"learning_rate", c.learning_rate}, {"batch_size", c.batch_size}, {"max_epochs", c.max_epochs},
       {"patience", c.patience}};
}

inline void from_json(const nlohmann::json& j, TrainConfig& c) {
  TrainConfig d;
  c.learning_rate = j.value("learning_rate", d.learning_rate);
  c.batch_size = j.value("batch_size", d.batch_size);
  c.max_epochs = j.value("max_epochs", d.max_epochs);
  c.patience = j.value("patience", d.patience);
}

inline void to_json(nlohmann::json& j, const SdaeConfig& c) {
  j = {{"hidden1", c.hidden1}, {"hidden2", c.hidden2}, {"mask_fraction", c.mask_fraction},
       {"epochs", c.epochs}, {"batch_size", c.batch_size}, {"learning_rate", c.learning_rate}};
}

inline void from_json(const nlohmann::json& j, SdaeConfig& c) {
  SdaeConfig d;
  c.hidden1 = j.value("hidden1", d.hidden1);
  c.hidden2 = j.value("hidden2", d.hidden2);
  c.mask_fraction = j.value("mask_fraction", d.mask_fraction);
  c.epochs = j.value("epochs", d.epochs);
  c.batch_size = j.value("batch_size", d.batch_size);
  c.learning_rate = j.value("learning_rate", d.learning_rate);
}

inline void to_json(nlohmann::json& j, const Manifest& m) {
  const auto& d = m.data;
  j = {{"data",
        {{"source", d.source}, {"dir", d.dir}, {"synthetic_seed", d.synthetic_seed}, {"datasets", d.datasets},
         {"target", d.target}, {"max_units", d.max_units}, {"train_fraction", d.train_fraction},
         {"val_fraction", d.val_fraction}, {"window", d.window}, {"stride", d.stride},
         {"eval_stride", d.eval_stride}, {"rul_cap", d.rul_cap}}},
       {"models",
        {{"targets", m.models.targets}, {"substitute", m.models.substitute}, {"width_scale", m.models.width_scale},
         {"dropout", m.models.dropout}, {"output_scale", m.models.output_scale}, {"train", m.models.train}}},
       {"attacks",
        {{"methods", m.attacks.methods}, {"epsilon", m.attacks.epsilon}, {"iterations", m.attacks.iterations},
         {"decay", m.attacks.decay}, {"ratios", m.attacks.ratios}}},
       {"detect",
        {{"nu", m.detect.nu}, {"contamination", m.detect.contamination}, {"k", m.detect.k},
         {"pipeline_detector", m.detect.pipeline_detector}, {"fit_rows", m.detect.fit_rows},
         {"calibration_ratio", m.detect.calibration_ratio}, {"sdae", m.detect.sdae}}},
       {"retrain",
        {{"budget", m.retrain.budget}, {"extra_epochs", m.retrain.extra_epochs},
         {"validation_ratio", m.retrain.validation_ratio}}},
       {"seed", m.seed},
       {"output", m.output}};
}

inline void from_json(const nlohmann::json& j, Manifest& m) {
  static const std::set<std::string> sections{"data", "models", "attacks", "detect", "retrain", "seed", "output"};
  for (const auto& [key, _] : j.items())
    if (!sections.count(key)) throw InputError("unknown manifest key '" + key + "'");
  Manifest d;
  m = d;
  if (j.contains("data")) {
    const auto& s = j.at("data");
    m.data.source = s.value("source", d.data.source);
    m.data.dir = s.value("dir", d.data.dir);
    m.data.synthetic_seed = s.value("synthetic_seed", d.data.synthetic_seed);
    m.data.datasets = s.value("datasets", d.data.datasets);
    m.data.target = s.value("target", d.data.target);
    m.data.max_units = s.value("max_units", d.data.max_units);
    m.data.train_fraction = s.value("train_fraction", d.data.train_fraction);
    m.data.val_fraction = s.value("val_fraction", d.data.val_fraction);
    m.data.window = s.value("window", d.data.window);
    m.data.stride = s.value("stride", d.data.stride);
    m.data.eval_stride = s.value("eval_stride", d.data.eval_stride);
    m.data.rul_cap = s.value("rul_cap", d.data.rul_cap);
  }
  if (j.contains("models")) {
    const auto& s = j.at("models");
    m.models.targets = s.value("targets", d.models.targets);
    m.models.substitute = s.value("substitute", d.models.substitute);
    m.models.width_scale = s.value("width_scale", d.models.width_scale);
    m.models.dropout = s.value("dropout", d.models.dropout);
    m.models.output_scale = s.value("output_scale", d.models.output_scale);
    if (s.contains("train")) m.models.train = s.at("train").get<TrainConfig>();
  }
  if (j.contains("attacks")) {
    const auto& s = j.at("attacks");
    m.attacks.methods = s.value("methods", d.attacks.methods);
    m.attacks.epsilon = s.value("epsilon", d.attacks.epsilon);
    m.attacks.iterations = s.value("iterations", d.attacks.iterations);
    m.attacks.decay = s.value("decay", d.attacks.decay);
    m.attacks.ratios = s.value("ratios", d.attacks.ratios);
  }
  if (j.contains("detect")) {
    const auto& s = j.at("detect");
    m.detect.nu = s.value("nu", d.detect.nu);
    m.detect.contamination = s.value("contamination", d.detect.contamination);
    m.detect.k = s.value("k", d.detect.k);
    m.detect.pipeline_detector = s.value("pipeline_detector", d.detect.pipeline_detector);
    m.detect.fit_rows = s.value("fit_rows", d.detect.fit_rows);
    m.detect.calibration_ratio = s.value("calibration_ratio", d.detect.calibration_ratio);
    if (s.contains("sdae")) m.detect.sdae = s.at("sdae").get<SdaeConfig>();
  }
  if (j.contains("retrain")) {
    const auto& s = j.at("retrain");
    m.retrain.budget = s.value("budget", d.retrain.budget);
    m.retrain.extra_epochs = s.value("extra_epochs", d.retrain.extra_epochs);
    m.retrain.validation_ratio = s.value("validation_ratio", d.retrain.validation_ratio);
  }
  m.seed = j.value("seed", d.seed);
  m.output = j.value("output", d.output);
}

inline Manifest load_manifest(const fs::path& path) {
  try {
    return nlohmann::json::parse(read_file(path)).get<Manifest>();
  } catch (const nlohmann::json::exception& e) {
    throw InputError("manifest " + path.string() + ": " + e.what());
  }
}

/// SHA-256 of the canonical manifest with the output location removed.
inline std::string config_hash(const Manifest& m) {
  nlohmann::json j = m;
  j.erase("output");
  return sha256_hex(j.dump());
}

/// Stage outputs for one manifest.
class Workspace {
 public:
  using Log = std::function<void(const std::string&)>;

  explicit Workspace(Manifest m, Log log = default_log())
      : manifest_(std::move(m)), hash_(config_hash(manifest_)), log_(std::move(log)) {
    manifest_.validate();
    root_ = fs::path(manifest_.output) / hash_.substr(0, 16);
    nlohmann::json j = manifest_;
    j.erase("output");
    write_atomic(root_ / "manifest.json", j.dump(2) + "\n");
  }

  static Log default_log() {
    return [](const std::string& s) { std::cerr << s << "\n"; };
  }

  const Manifest& manifest() const { return manifest_; }
  const std::string& hash() const { return hash_; }
  const fs::path& root() const { return root_; }
  void log(const std::string& s) const {
    if (log_) log_(s);
  }

  ReportMeta meta() const {
    nlohmann::json cfg = manifest_;
    cfg.erase("output");
    return {hash_, {{"seed", manifest_.seed}, {"synthetic_seed", manifest_.data.synthetic_seed}}, cfg};
  }

  fs::path dataset_dir(const std::string& id) const { return root_ / "datasets" / id; }
  fs::path model_path(const std::string& id, const std::string& arch) const {
    return root_ / "models" / id / (arch + ".ckpt");
  }
  fs::path substitute_path(const std::string& id) const {
    return root_ / "models" / id / ("substitute_" + manifest_.models.substitute + ".ckpt");
  }
  fs::path retrained_path(const std::string& arch) const { return root_ / "retrain" / (arch + ".ckpt"); }
  fs::path attack_dir(const std::string& method, double ratio) const {
    return root_ / "attacks" / method / ("rho_" + format_double(ratio));
  }

 private:
  Manifest manifest_;
  std::string hash_;
  fs::path root_;
  Log log_;
};

// Seed streams, one per purpose.
inline std::uint64_t model_seed(const Manifest& m, std::size_t dataset, std::size_t spec) {
  return derive_seed(m.seed, 0x1000 + 64 * dataset + spec);
}
inline std::uint64_t ratio_seed(const Manifest& m, double ratio) {
  return derive_seed(m.seed, 0x2000000 + static_cast<std::uint64_t>(std::llround(ratio * 1e6)));
}
inline constexpr std::uint64_t kSdaeStream = 0x3000;
inline constexpr std::uint64_t kFitRowsStream = 0x3001;
inline constexpr std::uint64_t kCalibrationStream = 0x3002;
inline constexpr std::uint64_t kRetrainStream = 0x4000;

struct SplitData {
  std::vector<WindowedSample> train, val, test;
  Normalizer normalizer;
};

inline void to_json(nlohmann::json& j, const Normalizer& n) { j = {{"mean", n.mean}, {"std", n.std}}; }
inline void from_json(const nlohmann::json& j, Normalizer& n) {
  n.mean = j.at("mean").get<std::array<double, kChannels>>();
  n.std = j.at("std").get<std::array<double, kChannels>>();
}

inline void save_model(const fs::path& path, const TrainedModel& m) {
  std::ostringstream out(std::ios::binary);
  save_checkpoint(m, out);
  write_atomic(path, out.str());
}

// ---- ingest ----------------------------------------------------------------

struct RawSubset {
  TrajectorySet train, test;
};

inline RawSubset load_raw(const Manifest& m, const std::string& id) {
  if (m.data.source == "synthetic") {
    auto s = synthetic::generate(id, m.data.synthetic_seed);
    return {std::move(s.train), std::move(s.test)};
  }
  const fs::path dir(m.data.dir);
  RawSubset r{load_cmapss((dir / ("train_" + id + ".txt")).string()), {}};
  const auto test = dir / ("test_" + id + ".txt");
  if (fs::exists(test)) r.test = load_cmapss(test.string());
  return r;
}

/// Splits the (optionally truncated) run-to-failure units by position into
/// train, validation and test, normalizing with training statistics.
inline SplitData split_dataset(const Manifest& m, TrajectorySet train_file) {
  auto labeled = label_rul(std::move(train_file), m.data.rul_cap);
  if (m.data.max_units > 0 && labeled.units.size() > m.data.max_units) labeled.units.resize(m.data.max_units);
  const std::size_t n = labeled.units.size();
  const auto n_train = static_cast<std::size_t>(std::llround(m.data.train_fraction * static_cast<double>(n)));
  const auto n_val = static_cast<std::size_t>(std::llround(m.data.val_fraction * static_cast<double>(n)));
  if (n_train < 1 || n_val < 1 || n_train + n_val >= n) throw InputError("too few units to split");
  auto [tr, rest] = split_units(labeled, n_train);
  auto [va, te] = split_units(rest, n_val);
  SplitData out;
  out.normalizer = fit_normalizer(tr);
  out.train = make_windows(apply_normalizer(out.normalizer, tr), m.data.window, m.data.stride);
  out.val = make_windows(apply_normalizer(out.normalizer, va), m.data.window, m.data.eval_stride);
  out.test = make_windows(apply_normalizer(out.normalizer, te), m.data.window, m.data.eval_stride);
  return out;
}

inline void ingest(const Workspace& ws) {
  const auto& m = ws.manifest();
  for (const auto& id : m.data.datasets) {
    const fs::path dir = ws.dataset_dir(id);
    if (fs::exists(dir / "summary.json")) continue;
    auto raw = load_raw(m, id);
    const std::size_t train_units = raw.train.units.size(), test_units = raw.test.units.size();
    ws.log("[ingest] " + id + ": " + std::to_string(train_units) + " train / " + std::to_string(test_units) +
           " test units");
    const auto split = split_dataset(m, std::move(raw.train));
    save_windows(dir / "train.dws", split.train);
    save_windows(dir / "val.dws", split.val);
    save_windows(dir / "test.dws", split.test);
    write_atomic(dir / "normalizer.json", nlohmann::json(split.normalizer).dump(2) + "\n");
    const nlohmann::json summary{{"dataset", id},
                                 {"train_file_units", train_units},
                                 {"test_file_units", test_units},
                                 {"windows", {{"train", split.train.size()}, {"val", split.val.size()},
                                              {"test", split.test.size()}}}};
    write_atomic(dir / "summary.json", summary.dump(2) + "\n");
  }
}

inline SplitData load_split(const Workspace& ws, const std::string& id) {
  const fs::path dir = ws.dataset_dir(id);
  if (!fs::exists(dir / "summary.json")) ingest(ws);
  SplitData s;
  s.train = load_windows(dir / "train.dws");
  s.val = load_windows(dir / "val.dws");
  s.test = load_windows(dir / "test.dws");
  s.normalizer = nlohmann::json::parse(read_file(dir / "normalizer.json")).get<Normalizer>();
  return s;
}

// ---- train -----------------------------------------------------------------

inline void train_models(const Workspace& ws) {
  const auto& m = ws.manifest();
  for (std::size_t d = 0; d < m.data.datasets.size(); ++d) {
    const auto& id = m.data.datasets[d];
    std::optional<SplitData> data;
    auto fit = [&](const std::string& arch, std::size_t stream, const fs::path& path) {
      if (fs::exists(path)) {
        ws.log("[train] " + id + " " + arch + ": checkpoint present, skipped");
        return;
      }
      if (!data) data = load_split(ws, id);
      const std::uint64_t seed = model_seed(m, d, stream);
      auto models = standard_train({m.model_spec(arch)}, data->train, data->val, m.models.train, seed);
      save_model(path, models[0]);
      const auto& h = models[0].history;
      const nlohmann::json meta{{"dataset", id}, {"architecture", arch}, {"seed", models[0].seed},
                                {"epochs", h.size()}, {"spec", models[0].spec}};
      write_atomic(fs::path(path).replace_extension(".json"), meta.dump(2) + "\n");
      ws.log("[train] " + id + " " + arch + ": " + std::to_string(h.size()) + " epochs, seed " +
             std::to_string(models[0].seed));
    };
    for (std::size_t s = 0; s < m.models.targets.size(); ++s)
      fit(m.models.targets[s], s, ws.model_path(id, m.models.targets[s]));
    fit(m.models.substitute, 63, ws.substitute_path(id));
  }
}

inline std::vector<TrainedModel> load_targets(const Workspace& ws, const std::string& id) {
  std::vector<TrainedModel> out;
  for (const auto& a : ws.manifest().models.targets) {
    const auto path = ws.model_path(id, a);
    if (!fs::exists(path)) train_models(ws);
    out.push_back(load_checkpoint(path.string()));
  }
  return out;
}

inline TrainedModel load_substitute(const Workspace& ws, const std::string& id) {
  const auto path = ws.substitute_path(id);
  if (!fs::exists(path)) train_models(ws);
  return load_checkpoint(path.string());
}

// ---- attack ----------------------------------------------------------------

/// Ratios evaluated downstream: the manifest's set plus the clean and fully
/// attacked extremes.
inline std::vector<double> evaluation_ratios(const Manifest& m) {
  std::set<double> r(m.attacks.ratios.begin(), m.attacks.ratios.end());
  r.insert(0.0);
  r.insert(1.0);
  return {r.begin(), r.end()};
}

inline PerturbedDataset mix_attacked(const std::vector<WindowedSample>& clean, const std::vector<WindowedSample>& attacked,
                                     double ratio, std::uint64_t seed) {
  PerturbedDataset out{clean, std::vector<bool>(clean.size(), false), ratio, seed};
  for (std::size_t i : random_subset(clean.size(), ratio, seed)) {
    out.samples[i] = attacked[i];
    out.attack_mask[i] = true;
  }
  return out;
}

/// Crafts the target's test set against the target dataset's substitute and
/// writes one perturbed copy plus mask per (method, ratio).
inline void attack_stage(const Workspace& ws) {
  const auto& m = ws.manifest();
  const auto ratios = evaluation_ratios(m);
  std::optional<SplitData> data;
  std::optional<TrainedModel> sub;
  for (const auto& method : m.attacks.methods) {
    bool done = true;
    for (double r : ratios) done = done && fs::exists(ws.attack_dir(method, r) / "mask.csv");
    if (done) continue;
    if (!data) data = load_split(ws, m.data.target);
    if (!sub) sub = load_substitute(ws, m.data.target);
    const auto spec = m.attack_spec(method);
    const auto attacked = attack_all(data->test, *sub, spec);
    double linf = 0.0;
    for (std::size_t i = 0; i < attacked.size(); ++i)
      for (std::size_t k = 0; k < attacked[i].window.size(); ++k)
        linf = std::max(linf, std::abs(attacked[i].window[k] - data->test[i].window[k]));
    if (!(linf <= spec.epsilon + 1e-9)) throw NumericError(method + " perturbation exceeds epsilon: " + format_double(linf));
    for (double r : ratios) {
      const auto p = mix_attacked(data->test, attacked, r, ratio_seed(m, r));
      const auto dir = ws.attack_dir(method, r);
      save_windows(dir / "test.dws", p.samples);
      write_atomic(dir / "mask.csv", encode_mask(p.attack_mask));
      ws.log("[attack] " + method + " rho=" + format_double(r) + ": " + std::to_string(p.attacked_count()) + "/" +
             std::to_string(p.samples.size()) + " attacked, Linf " + format_double(linf));
    }
  }
}

inline PerturbedDataset load_perturbed(const Workspace& ws, const std::string& method, double ratio) {
  const auto dir = ws.attack_dir(method, ratio);
  if (!fs::exists(dir / "mask.csv")) attack_stage(ws);
  PerturbedDataset p{load_windows(dir / "test.dws"), decode_mask(read_file(dir / "mask.csv")), ratio,
                     ratio_seed(ws.manifest(), ratio)};
  if (p.samples.size() != p.attack_mask.size()) throw InputError("mask sidecar does not match " + dir.string());
  return p;
}

// ---- detect ----------------------------------------------------------------

inline FeatureExtractor fit_feature_extractor(const Manifest& m, const SplitData& data) {
  FeatureExtractor fx;
  fx.informative = data.normalizer.informative_mask();
  std::vector<const Matrix*> windows;
  for (const auto& s : data.train) windows.push_back(&s.window);
  fx.sdae = sdae_train(windows, select_sdae_channels(fx.informative, m.detect.sdae.inputs),
                       derive_seed(m.seed, kSdaeStream), m.detect.sdae);
  return fx;
}

inline void to_json(nlohmann::json& j, const FeatureExtractor& f) { j = {{"informative", f.informative}, {"sdae", f.sdae}}; }
inline void from_json(const nlohmann::json& j, FeatureExtractor& f) {
  f.informative = j.at("informative").get<std::vector<bool>>();
  f.sdae = j.at("sdae").get<SdaeModel>();
}

/// Clean training rows the detectors are fitted on, subsampled under a
/// fixed seed when the manifest caps them.
inline FeatureRows detector_fit_rows(const Manifest& m, const FeatureExtractor& fx, const SplitData& data) {
  std::vector<WindowedSample> pick = data.train;
  if (m.detect.fit_rows > 0 && pick.size() > m.detect.fit_rows) {
    const auto idx = random_subset(pick.size(), static_cast<double>(m.detect.fit_rows) / static_cast<double>(pick.size()),
                                   derive_seed(m.seed, kFitRowsStream));
    std::vector<WindowedSample> sub;
    for (std::size_t i : idx) sub.push_back(pick[i]);
    pick = std::move(sub);
  }
  return extract_features(fx, pick).values();
}

inline SweepResult run_sweep(DetectorKind kind, const Manifest& m, const FeatureRows& fit, const FeatureRows& test,
                             const std::vector<bool>& truth) {
  return kind == DetectorKind::ocsvm ? sweep_ocsvm(fit, test, truth, m.detect.nu)
                                     : sweep_lof(fit, test, truth, m.detect.contamination, m.detect.k);
}

inline Detector fit_detector(DetectorKind kind, const Manifest& m, const FeatureRows& fit, double param) {
  if (kind == DetectorKind::ocsvm) {
    OcsvmParams p;
    p.nu = param;
    return ocsvm_fit(fit, p);
  }
  return lof_fit(fit, m.detect.k, param);
}

/// Fits the feature pipeline, sweeps both detectors on every perturbed test
/// set, and fixes the pipeline detector's parameter on a perturbed
/// validation set.
inline void detect_stage(const Workspace& ws) {
  const auto& m = ws.manifest();
  const fs::path dir = ws.root() / "detect";
  if (fs::exists(dir / "detector.json")) return;
  const auto data = load_split(ws, m.data.target);
  const auto fx = fit_feature_extractor(m, data);
  write_atomic(dir / "features.json", nlohmann::json(fx).dump() + "\n");
  const auto fit = detector_fit_rows(m, fx, data);
  ws.log("[detect] features fitted; " + std::to_string(fit.size()) + " clean rows for the detectors");

  Table sweep{{"method", "ratio", "detector", "param", "tp", "fp", "tn", "fn", "precision", "recall", "f2", "auc", "best"}, {}};
  for (const auto& method : m.attacks.methods)
    for (double r : m.attacks.ratios) {
      const auto p = load_perturbed(ws, method, r);
      const auto fm = extract_features(fx, p.samples, p.attack_mask);
      std::ostringstream csv;
      write_feature_csv(csv, fm);
      write_atomic(dir / "features" / (method + "_rho_" + format_double(r) + ".csv"), csv.str());
      const auto rows = fm.values();
      for (auto kind : {DetectorKind::ocsvm, DetectorKind::lof}) {
        const auto res = run_sweep(kind, m, fit, rows, p.attack_mask);
        for (std::size_t i = 0; i < res.points.size(); ++i) {
          const auto& pt = res.points[i];
          sweep.add({method, cell(r), to_string(kind), cell(pt.param), cell(pt.confusion.tp), cell(pt.confusion.fp),
                     cell(pt.confusion.tn), cell(pt.confusion.fn), cell(pt.confusion.precision()),
                     cell(pt.confusion.recall()), cell(pt.f2), std::isnan(pt.auc) ? "" : cell(pt.auc), cell(i == res.best)});
        }
        ws.log("[detect] " + method + " rho=" + format_double(r) + " " + to_string(kind) + ": best F2 " +
               format_double(res.best_f2()) + " at " + format_double(res.best_param()));
      }
    }
  emit_report(dir, "sweep", sweep, ws.meta());

  const auto kind = detector_kind_from_string(m.detect.pipeline_detector);
  const auto sub = load_substitute(ws, m.data.target);
  const auto calib = inject_random(data.val, sub, m.attack_spec("FGSM"), m.detect.calibration_ratio,
                                   derive_seed(m.seed, kCalibrationStream));
  const auto calib_rows = extract_features(fx, calib.samples).values();
  const auto res = run_sweep(kind, m, fit, calib_rows, calib.attack_mask);
  const Detector det = fit_detector(kind, m, fit, res.best_param());
  const nlohmann::json choice{{"detector", to_string(kind)}, {"param", res.best_param()}, {"validation_f2", res.best_f2()}};
  write_atomic(dir / "calibration.json", choice.dump(2) + "\n");
  write_atomic(dir / "detector.json", nlohmann::json(det).dump() + "\n");
  ws.log("[detect] pipeline " + to_string(kind) + " param " + format_double(res.best_param()) + " (validation F2 " +
         format_double(res.best_f2()) + ")");
}

// ---- transfer --------------------------------------------------------------

/// Clean and FGSM transferability matrices over every listed dataset, plus
/// the substitute ranking for each target column.
inline void transfer_stage(const Workspace& ws) {
  const auto& m = ws.manifest();
  const fs::path dir = ws.root() / "transfer";
  if (fs::exists(dir / "ranking.csv")) return;
  std::vector<SplitData> data;
  std::vector<std::vector<TrainedModel>> targets;
  std::vector<TrainedModel> subs;
  for (const auto& id : m.data.datasets) {
    data.push_back(load_split(ws, id));
    targets.push_back(load_targets(ws, id));
    subs.push_back(load_substitute(ws, id));
  }
  std::vector<TransferSubject> subjects;
  for (std::size_t i = 0; i < data.size(); ++i) subjects.push_back({m.data.datasets[i], &subs[i], &targets[i], data[i].test});
  AttackSpec clean = m.attack_spec("FGSM");
  clean.epsilon = 0.0;
  Table table{{"attack", "source", "destination", "rmse"}, {}};
  const auto emit = [&](const std::string& name, const TransferabilityMatrix& mat) {
    for (const auto& s : mat.ids)
      for (const auto& d : mat.ids) table.add({name, s, d, cell(mat.at(s, d))});
  };
  emit("clean", transferability_analysis(subjects, clean));
  const auto fgsm_matrix = transferability_analysis(subjects, m.attack_spec("FGSM"));
  emit("FGSM", fgsm_matrix);
  emit_report(dir, "matrix", table, ws.meta());
  Table ranking{{"target", "rank", "substitute", "rmse"}, {}};
  for (const auto& t : fgsm_matrix.ids) {
    const auto order = rank_substitutes(fgsm_matrix, t);
    for (std::size_t i = 0; i < order.size(); ++i) ranking.add({t, cell(i + 1), order[i], cell(fgsm_matrix.at(order[i], t))});
  }
  emit_report(dir, "ranking", ranking, ws.meta());
  ws.log("[transfer] " + std::to_string(subjects.size()) + "x" + std::to_string(subjects.size()) + " matrix written");
}

inline std::vector<std::string> load_ranking(const Workspace& ws, const std::string& target) {
  const fs::path path = ws.root() / "transfer" / "ranking.json";
  if (!fs::exists(path)) transfer_stage(ws);
  const auto doc = nlohmann::json::parse(read_file(path));
  std::vector<std::string> out;
  for (const auto& r : doc.at("rows"))
    if (r.at("target") == target) out.push_back(r.at("substitute").get<std::string>());
  return out;
}

// ---- retrain ---------------------------------------------------------------

inline void retrain_stage(const Workspace& ws) {
  const auto& m = ws.manifest();
  const fs::path dir = ws.root() / "retrain";
  if (fs::exists(dir / "rounds.csv")) return;
  const auto& target = m.data.target;
  const auto order = load_ranking(ws, target);
  std::vector<TrainedModel> subs;
  for (const auto& id : order) subs.push_back(load_substitute(ws, id));
  std::vector<const TrainedModel*> sub_ptrs;
  for (const auto& s : subs) sub_ptrs.push_back(&s);
  const auto data = load_split(ws, target);
  const auto standard = load_targets(ws, target);
  RetrainPlan plan = m.retrain;
  plan.target = target;
  plan.substitutes = order;
  Table rounds{{"architecture", "round", "substitute", "crafted", "val_rmse_before", "val_rmse_after", "accepted"}, {}};
  Table summary{{"architecture", "rounds", "stop_reason", "initial_val_rmse", "final_val_rmse"}, {}};
  for (std::size_t s = 0; s < standard.size(); ++s) {
    const auto& arch = m.models.targets[s];
    const auto r = adversarial_retrain(standard[s], data.train, data.val, plan, sub_ptrs, m.models.train,
                                       derive_seed(m.seed, kRetrainStream + s), m.attack_spec("FGSM"));
    save_model(ws.retrained_path(arch), r.model);
    for (std::size_t k = 0; k < r.rounds.size(); ++k) {
      const auto& x = r.rounds[k];
      rounds.add({arch, cell(k + 1), x.substitute, cell(x.crafted), cell(x.val_rmse_before), cell(x.val_rmse_after), cell(x.accepted)});
    }
    summary.add({arch, cell(r.rounds.size()), r.stop_reason, cell(r.initial_val_rmse), cell(r.final_val_rmse)});
    ws.log("[retrain] " + arch + ": " + std::to_string(r.rounds.size()) + " round(s), " + r.stop_reason +
           ", validation RMSE " + format_double(r.initial_val_rmse) + " -> " + format_double(r.final_val_rmse));
  }
  emit_report(dir, "summary", summary, ws.meta());
  emit_report(dir, "rounds", rounds, ws.meta());
}

inline std::vector<TrainedModel> load_retrained(const Workspace& ws) {
  std::vector<TrainedModel> out;
  for (const auto& a : ws.manifest().models.targets) {
    const auto path = ws.retrained_path(a);
    if (!fs::exists(path)) retrain_stage(ws);
    out.push_back(load_checkpoint(path.string()));
  }
  return out;
}

// ---- dodem -----------------------------------------------------------------

inline DodemPipeline load_pipeline(const Workspace& ws) {
  const fs::path dir = ws.root() / "detect";
  if (!fs::exists(dir / "detector.json")) detect_stage(ws);
  DodemPipeline p;
  p.detector = nlohmann::json::parse(read_file(dir / "detector.json")).get<Detector>();
  p.features = nlohmann::json::parse(read_file(dir / "features.json")).get<FeatureExtractor>();
  p.standard = load_targets(ws, ws.manifest().data.target);
  p.retrained = load_retrained(ws);
  p.validate();
  return p;
}

/// Three strategies per (method, ratio) cell on identical perturbed sets.
inline void dodem_stage(const Workspace& ws) {
  const auto& m = ws.manifest();
  const fs::path dir = ws.root() / "dodem";
  if (fs::exists(dir / "evaluation.csv")) return;
  const auto p = load_pipeline(ws);
  Table eval{{"strategy", "method", "ratio", "rmse", "improvement_vs_standard_pct", "improvement_vs_adversarial_pct"}, {}};
  Table detection{{"method", "ratio", "tp", "fp", "tn", "fn", "f2", "routed_retrained"}, {}};
  Table per_model{{"method", "ratio", "set", "architecture", "rmse"}, {}};
  std::vector<LongRow> longform;
  for (const auto& method : m.attacks.methods)
    for (double r : evaluation_ratios(m)) {
      const auto data = load_perturbed(ws, method, r);
      const auto rep = evaluate_dodem(p, data);
      const auto pct = [](double base, double v) { return cell(improvement_pct(base, v)); };
      eval.add({"standard", method, cell(r), cell(rep.rmse_standard), "0", pct(rep.rmse_adversarial, rep.rmse_standard)});
      eval.add({"adversarial", method, cell(r), cell(rep.rmse_adversarial), pct(rep.rmse_standard, rep.rmse_adversarial), "0"});
      eval.add({"dodem", method, cell(r), cell(rep.rmse_dodem), cell(rep.improvement_vs_standard),
                cell(rep.improvement_vs_adversarial)});
      detection.add({method, cell(r), cell(rep.detection.tp), cell(rep.detection.fp), cell(rep.detection.tn),
                     cell(rep.detection.fn), cell(f_beta(rep.detection)), cell(rep.routed_retrained)});
      for (std::size_t i = 0; i < m.models.targets.size(); ++i) {
        per_model.add({method, cell(r), "standard", m.models.targets[i], cell(rep.per_model_standard[i])});
        per_model.add({method, cell(r), "adversarial", m.models.targets[i], cell(rep.per_model_adversarial[i])});
      }
      longform.push_back({"standard", method, r, "rmse", rep.rmse_standard});
      longform.push_back({"adversarial", method, r, "rmse", rep.rmse_adversarial});
      longform.push_back({"dodem", method, r, "rmse", rep.rmse_dodem});
      ws.log("[dodem] " + method + " rho=" + format_double(r) + ": standard " + format_double(rep.rmse_standard) +
             ", adversarial " + format_double(rep.rmse_adversarial) + ", dodem " + format_double(rep.rmse_dodem));
    }
  emit_report(dir, "per_model", per_model, ws.meta());
  emit_report(dir, "detection", detection, ws.meta());
  emit_report(dir, "rmse_long", long_table(longform), ws.meta());
  emit_report(dir, "evaluation", eval, ws.meta());
}

// ---- report ----------------------------------------------------------------

/// Index of every primary output with its SHA-256.
inline void report_stage(const Workspace& ws) {
  std::vector<fs::path> files;
  for (const auto& e : fs::recursive_directory_iterator(ws.root()))
    if (e.is_regular_file() && e.path().filename() != "index.csv" && e.path().filename() != "index.json")
      files.push_back(fs::relative(e.path(), ws.root()));
  std::sort(files.begin(), files.end());
  Table t{{"file", "bytes", "sha256"}, {}};
  for (const auto& f : files) {
    const auto content = read_file(ws.root() / f);
    t.add({f.generic_string(), cell(content.size()), sha256_hex(content)});
  }
  emit_report(ws.root(), "index", t, ws.meta());
  ws.log("[report] " + std::to_string(files.size()) + " files indexed under " + ws.root().string());
}

inline void run_all(const Workspace& ws) {
  ingest(ws);
  train_models(ws);
  attack_stage(ws);
  detect_stage(ws);
  transfer_stage(ws);
  retrain_stage(ws);
  dodem_stage(ws);
  report_stage(ws);
}

}  // namespace dodem
