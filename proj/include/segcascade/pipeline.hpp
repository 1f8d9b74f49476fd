#pragma once

// Run configuration, manifests and the pipeline commands behind the CLI.
// Every artifact is a pure function of (config, seed), so reruns reproduce
// identical bytes.

#include <atomic>
#include <exception>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <mutex>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <nlohmann/json.hpp>

#include "cascade.hpp"
#include "checkpoint.hpp"
#include "error.hpp"
#include "evalsuite.hpp"
#include "nifti_io.hpp"
#include "normalize.hpp"
#include "phantom.hpp"
#include "trainer.hpp"

namespace segcascade {

namespace fs = std::filesystem;
using nlohmann::json;

struct RunConfig {
  fs::path data_dir = "data";
  fs::path output_dir = "runs";
  std::uint64_t seed = 0;
  PhantomSpec phantom;
  std::size_t n_train = 40;
  std::size_t n_val = 15;
  int depth = 3;
  int base_width = 8;
  TrainConfig train;
  int folds = 5;
  Architecture architecture = Architecture::Cascade;
  CascadePlan cascade;
  std::optional<std::vector<RegionId>> stage2b_presence_filter;
  double lowres_factor = kLowResFactor;
  LesionMatchParams eval;
  int jobs = 1;
};

// -- JSON helpers ---------------------------------------------------------------

namespace cfg {

[[noreturn]] inline void fail(const std::string& msg) { throw Error(Errc::ConfigError, msg); }

template <class T>
T get_or(const json& j, const char* key, T fallback) {
  if (!j.contains(key) || j.at(key).is_null()) return fallback;
  try {
    return j.at(key).get<T>();
  } catch (const json::exception& e) {
    fail(std::string("bad value for '") + key + "': " + e.what());
  }
}

inline Index3 index3(const json& j, const char* key, Index3 fallback) {
  if (!j.contains(key)) return fallback;
  const auto& a = j.at(key);
  if (!a.is_array() || a.size() != 3) fail(std::string("'") + key + "' must be a 3-element array");
  return {a[0].get<int>(), a[1].get<int>(), a[2].get<int>()};
}

inline Vec3 vec3(const json& j, const char* key, Vec3 fallback) {
  if (!j.contains(key)) return fallback;
  const auto& a = j.at(key);
  if (!a.is_array() || a.size() != 3) fail(std::string("'") + key + "' must be a 3-element array");
  return {a[0].get<double>(), a[1].get<double>(), a[2].get<double>()};
}

inline std::optional<std::vector<RegionId>> regions(const json& j, const char* key) {
  if (!j.contains(key) || j.at(key).is_null()) return std::nullopt;
  std::vector<RegionId> out;
  for (const auto& s : j.at(key)) {
    const auto r = parse_region(s.get<std::string>());
    if (!r) fail("unknown region '" + s.get<std::string>() + "'");
    out.push_back(*r);
  }
  return out;
}

inline json regions_json(const std::optional<std::vector<RegionId>>& r) {
  if (!r) return nullptr;
  json a = json::array();
  for (auto x : *r) a.push_back(to_string(x));
  return a;
}

inline StageSpec stage(const json& j, StageName name, int depth, int width, bool default_residual) {
  StageSpec s = make_stage_spec(name, depth, width, default_residual);
  if (j.is_null()) return s;
  if (j.contains("modalities")) {
    s.modalities.clear();
    for (const auto& m : j.at("modalities")) {
      const auto p = parse_modality(m.get<std::string>());
      if (!p) fail("unknown modality '" + m.get<std::string>() + "'");
      s.modalities.push_back(*p);
    }
  }
  if (j.contains("prior_channels")) s.prior_channels = *regions(j, "prior_channels");
  if (j.contains("out_labels")) {
    s.out_labels.clear();
    for (auto r : *regions(j, "out_labels")) s.out_labels.push_back(label_for(r));
  }
  s.net_config.residual_encoder = get_or<bool>(j, "residual_encoder", default_residual);
  s.net_config.in_channels = static_cast<int>(s.modalities.size() + s.prior_channels.size());
  s.net_config.out_classes = static_cast<int>(s.out_labels.size()) + 1;
  try {
    validate(s);
  } catch (const Error& e) {
    fail(e.what());
  }
  return s;
}

inline json stage_json(const StageSpec& s) {
  json j;
  j["modalities"] = json::array();
  for (auto m : s.modalities) j["modalities"].push_back(to_string(m));
  j["prior_channels"] = json::array();
  for (auto r : s.prior_channels) j["prior_channels"].push_back(to_string(r));
  j["out_labels"] = json::array();
  for (auto l : s.out_labels) j["out_labels"].push_back(to_string(l));
  j["residual_encoder"] = s.net_config.residual_encoder;
  return j;
}

}  // namespace cfg

/// Relative paths resolve against `base` (the config file's directory).
inline RunConfig parse_run_config(const json& j, const fs::path& base = {}) {
  if (!j.is_object()) cfg::fail("config root must be an object");
  RunConfig c;
  try {
    c.seed = cfg::get_or<std::uint64_t>(j, "seed", 0);
    const json paths = j.value("paths", json::object());
    c.data_dir = cfg::get_or<std::string>(paths, "data_dir", "data");
    c.output_dir = cfg::get_or<std::string>(paths, "output_dir", "runs");
    if (c.data_dir.is_relative()) c.data_dir = base / c.data_dir;
    if (c.output_dir.is_relative()) c.output_dir = base / c.output_dir;

    const json ph = j.value("phantom", json::object());
    c.phantom.extents = cfg::index3(ph, "extents", c.phantom.extents);
    c.phantom.spacing = cfg::vec3(ph, "spacing", c.phantom.spacing);
    c.phantom.noise_sigma = cfg::get_or<double>(ph, "noise_sigma", c.phantom.noise_sigma);
    c.phantom.p_cc = cfg::get_or<double>(ph, "p_cc", c.phantom.p_cc);
    c.phantom.p_ed = cfg::get_or<double>(ph, "p_ed", c.phantom.p_ed);
    c.n_train = cfg::get_or<std::size_t>(ph, "n_train", c.n_train);
    c.n_val = cfg::get_or<std::size_t>(ph, "n_val", c.n_val);
    validate(c.phantom);

    const json net = j.value("network", json::object());
    c.depth = cfg::get_or<int>(net, "depth", c.depth);
    c.base_width = cfg::get_or<int>(net, "base_width", c.base_width);
    validate(NetworkConfig{4, 5, c.depth, c.base_width, true});

    const json tr = j.value("train", json::object());
    c.train.epochs = cfg::get_or<int>(tr, "epochs", c.train.epochs);
    c.train.batch_size = cfg::get_or<int>(tr, "batch_size", c.train.batch_size);
    c.train.steps_per_epoch = cfg::get_or<int>(tr, "steps_per_epoch", c.train.steps_per_epoch);
    c.train.lr0 = cfg::get_or<double>(tr, "lr0", c.train.lr0);
    c.train.momentum = cfg::get_or<double>(tr, "momentum", c.train.momentum);
    c.train.poly_exponent = cfg::get_or<double>(tr, "poly_exponent", c.train.poly_exponent);
    const auto aug = cfg::get_or<std::string>(tr, "augmentation", "minimal");
    if (aug == "none") c.train.augmentation = Augmentation::None;
    else if (aug == "minimal") c.train.augmentation = Augmentation::Minimal;
    else cfg::fail("augmentation must be 'none' or 'minimal'");
    c.train.presence_filter = cfg::regions(tr, "presence_filter");
    if (tr.contains("loss")) {
      c.train.loss.dice = cfg::get_or<double>(tr.at("loss"), "w_dice", 1.0);
      c.train.loss.ce = cfg::get_or<double>(tr.at("loss"), "w_ce", 1.0);
    }
    validate(c.train);

    c.folds = cfg::get_or<int>(j, "folds", c.folds);
    if (c.folds < 1) cfg::fail("folds must be >= 1");
    const auto arch = cfg::get_or<std::string>(j, "architecture", "cascade");
    const auto a = parse_architecture(arch);
    if (!a) cfg::fail("unknown architecture '" + arch + "'");
    c.architecture = *a;

    const json cas = j.value("cascade", json::object());
    c.cascade.stage1 = cfg::stage(cas.value("stage1", json()), StageName::Stage1, c.depth, c.base_width, true);
    c.cascade.stage2a = cfg::stage(cas.value("stage2a", json()), StageName::Stage2a, c.depth, c.base_width, false);
    c.cascade.stage2b = cfg::stage(cas.value("stage2b", json()), StageName::Stage2b, c.depth, c.base_width, false);
    const auto merge = cfg::get_or<std::string>(cas, "merge_policy", "overwrite_2b_over_2a");
    if (merge != "overwrite_2b_over_2a") cfg::fail("merge_policy must be 'overwrite_2b_over_2a'");
    c.stage2b_presence_filter = cfg::regions(cas, "stage2b_presence_filter");
    c.lowres_factor = cfg::get_or<double>(j, "lowres_factor", c.lowres_factor);
    if (!(c.lowres_factor >= 1.0)) cfg::fail("lowres_factor must be >= 1");

    const json ev = j.value("eval", json::object());
    const int conn = cfg::get_or<int>(ev, "connectivity", 26);
    if (conn != 6 && conn != 26) cfg::fail("eval.connectivity must be 6 or 26");
    c.eval.connectivity = static_cast<Connectivity>(conn);
    c.eval.gt_dilation_voxels = cfg::get_or<int>(ev, "gt_dilation_voxels", 3);
    validate(c.eval);
    c.jobs = cfg::get_or<int>(j, "jobs", 1);
  } catch (const json::exception& e) {
    cfg::fail(e.what());
  } catch (const Error& e) {
    if (e.code() == Errc::ConfigError) throw;
    cfg::fail(e.what());
  }
  return c;
}

inline RunConfig load_run_config(const fs::path& path) {
  if (!fs::exists(path)) throw Error(Errc::ConfigError, "config not found: " + path.string());
  json j;
  try {
    std::ifstream in(path);
    j = json::parse(in);
  } catch (const json::exception& e) {
    throw Error(Errc::ConfigError, "cannot parse " + path.string() + ": " + e.what());
  }
  return parse_run_config(j, path.parent_path());
}

/// Label map file: {"<file code>": "<region name>", ...}.
inline LabelMap load_label_map(const fs::path& path) {
  json j;
  try {
    std::ifstream in(path);
    if (!in) throw Error(Errc::IoError, "cannot open " + path.string());
    j = json::parse(in);
  } catch (const json::exception& e) {
    throw Error(Errc::ConfigError, "cannot parse label map: " + std::string(e.what()));
  }
  LabelMap m;
  m.codes.clear();
  for (const auto& [k, v] : j.items()) {
    const auto r = parse_region(v.get<std::string>());
    if (!r || *r == RegionId::TC || *r == RegionId::WT || *r == RegionId::ST)
      throw Error(Errc::ConfigError, "label map value must be BG/ET/NET/CC/ED: " + v.get<std::string>());
    try {
      m.codes[std::stol(k)] = label_for(*r);
    } catch (const std::logic_error&) {
      throw Error(Errc::ConfigError, "label map key is not an integer: " + k);
    }
  }
  return m;
}

// -- utilities ------------------------------------------------------------------

inline void write_text(const fs::path& path, const std::string& text) {
  write_file_bytes(path, std::span<const std::uint8_t>(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

inline void write_json(const fs::path& path, const json& j) { write_text(path, j.dump(2) + "\n"); }

inline json read_json(const fs::path& path) {
  if (!fs::exists(path)) throw Error(Errc::MissingArtifact, "missing " + path.string());
  try {
    std::ifstream in(path);
    return json::parse(in);
  } catch (const json::exception& e) {
    throw Error(Errc::IoError, "cannot parse " + path.string() + ": " + e.what());
  }
}

inline std::uint64_t fnv1a(std::string_view s) {
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char c : s) h = (h ^ c) * 1099511628211ull;
  return h;
}

/// Runs fn(i) for i in [0, n) on up to `jobs` threads. Results must be written
/// by index; the first failure (by index) is rethrown.
inline void parallel_for(std::size_t n, int jobs, const std::function<void(std::size_t)>& fn) {
  if (jobs <= 1 || n <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::exception_ptr> errors(n);
  std::atomic<std::size_t> next{0};
  std::vector<std::thread> pool;
  const auto workers = std::min<std::size_t>(static_cast<std::size_t>(jobs), n);
  for (std::size_t w = 0; w < workers; ++w)
    pool.emplace_back([&] {
      for (std::size_t i = next++; i < n; i = next++) {
        try {
          fn(i);
        } catch (...) {
          errors[i] = std::current_exception();
        }
      }
    });
  for (auto& t : pool) t.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

class Logger {
 public:
  explicit Logger(std::ostream* os = nullptr) : os_(os) {}
  void operator()(const std::string& msg) const {
    if (!os_) return;
    std::lock_guard lock(mu_);
    *os_ << msg << '\n' << std::flush;
  }

 private:
  std::ostream* os_;
  mutable std::mutex mu_;
};

// -- manifests ------------------------------------------------------------------

struct CaseEntry {
  std::string case_id;
  std::string split;  // "train" or "val"
  std::uint64_t seed = 0;
  bool has_cc = false;
  bool has_ed = false;
  std::map<std::string, std::string> images;  // modality -> path relative to data_dir
  std::string truth;
};

struct CohortManifest {
  std::vector<CaseEntry> cases;

  std::vector<const CaseEntry*> split(const std::string& which) const {
    std::vector<const CaseEntry*> out;
    for (const auto& c : cases)
      if (which == "all" || c.split == which) out.push_back(&c);
    return out;
  }
};

inline json to_json(const CaseEntry& c) {
  return {{"case_id", c.case_id}, {"split", c.split},   {"seed", c.seed},  {"has_cc", c.has_cc},
          {"has_ed", c.has_ed},   {"images", c.images}, {"truth", c.truth}};
}

inline CohortManifest load_cohort_manifest(const fs::path& path) {
  const json j = read_json(path);
  CohortManifest m;
  try {
    for (const auto& e : j.at("cases")) {
      CaseEntry c;
      c.case_id = e.at("case_id").get<std::string>();
      c.split = e.at("split").get<std::string>();
      c.seed = e.value("seed", std::uint64_t{0});
      c.has_cc = e.value("has_cc", false);
      c.has_ed = e.value("has_ed", false);
      c.images = e.at("images").get<std::map<std::string, std::string>>();
      c.truth = e.at("truth").get<std::string>();
      m.cases.push_back(std::move(c));
    }
  } catch (const json::exception& e) {
    throw Error(Errc::IoError, "malformed manifest " + path.string() + ": " + e.what());
  }
  return m;
}

struct Workspace {
  RunConfig config;
  LabelMap label_map;
  Logger log;

  fs::path raw_manifest() const { return config.data_dir / "cohort.json"; }
  fs::path normalized_manifest() const { return config.data_dir / "normalized.json"; }
  fs::path model_dir(const std::string& key) const { return config.output_dir / "models" / key; }
  fs::path checkpoint(const std::string& key, int fold) const {
    return model_dir(key) / ("fold_" + std::to_string(fold) + ".ckpt");
  }
  fs::path prediction_dir() const { return config.output_dir / "predictions" / to_string(config.architecture); }
  fs::path evaluation_dir() const { return config.output_dir / "evaluation" / to_string(config.architecture); }

  MultiModalStudy load_study(const CaseEntry& c) const {
    MultiModalStudy s;
    s.case_id = c.case_id;
    for (auto m : kAllModalities) {
      const auto it = c.images.find(to_string(m));
      if (it == c.images.end()) throw Error(Errc::MissingArtifact, c.case_id + ": no " + to_string(m) + " image");
      const auto p = config.data_dir / it->second;
      if (!fs::exists(p)) throw Error(Errc::MissingArtifact, "missing " + p.string());
      s[m] = load_nifti(p);
    }
    validate(s);
    return s;
  }
  LabelVolume load_truth(const CaseEntry& c) const {
    const auto p = config.data_dir / c.truth;
    if (!fs::exists(p)) throw Error(Errc::MissingArtifact, "missing " + p.string());
    return load_label_nifti(p, label_map);
  }
};

// -- generate ---------------------------------------------------------------------

/// Train cases are derived with indices [0, n_train), validation cases with
/// [n_train, n_train + n_val) of the same seed stream.
inline CohortManifest cmd_generate(const Workspace& ws) {
  const auto& c = ws.config;
  const std::size_t n = c.n_train + c.n_val;
  if (n == 0) throw Error(Errc::ConfigError, "cohort is empty");
  std::vector<CaseEntry> entries(n);
  parallel_for(n, c.jobs, [&](std::size_t i) {
    const auto id = phantom_case_id(i);
    const auto seed = derive_seed(c.seed, i);
    const auto pc = generate_phantom(c.phantom, seed, id);
    CaseEntry e;
    e.case_id = id;
    e.split = i < c.n_train ? "train" : "val";
    e.seed = seed;
    e.has_cc = pc.has_cc;
    e.has_ed = pc.has_ed;
    for (auto m : kAllModalities) {
      const std::string rel = "raw/" + id + "_" + to_string(m) + ".nii.gz";
      save_nifti(c.data_dir / rel, pc.study[m]);
      e.images[to_string(m)] = rel;
    }
    e.truth = "raw/" + id + "_truth.nii.gz";
    save_label_nifti(c.data_dir / e.truth, pc.truth);
    entries[i] = std::move(e);
  });
  CohortManifest m{std::move(entries)};
  json j;
  j["seed"] = c.seed;
  j["extents"] = c.phantom.extents;
  j["spacing"] = c.phantom.spacing;
  j["p_cc"] = c.phantom.p_cc;
  j["p_ed"] = c.phantom.p_ed;
  j["noise_sigma"] = c.phantom.noise_sigma;
  j["cases"] = json::array();
  for (const auto& e : m.cases) j["cases"].push_back(to_json(e));
  write_json(ws.raw_manifest(), j);
  ws.log("generated " + std::to_string(n) + " cases into " + c.data_dir.string());
  return m;
}

// -- normalize ----------------------------------------------------------------------

inline json to_json(const NormalizationRecord& r) {
  return {{"modality", to_string(r.modality)},
          {"divisor", r.divisor},
          {"peak_mean", r.fit.mean},
          {"peak_sigma", r.fit.sigma},
          {"window", {r.fit.window_lo, r.fit.window_hi}},
          {"fit_residual", r.fit.residual},
          {"mask_voxels", r.mask_voxels},
          {"fallback", to_string(r.fallback)}};
}

/// Writes normalised copies next to the raw images plus a manifest that points
/// at them and carries the per-modality records.
inline void cmd_normalize(const Workspace& ws) {
  const auto raw = load_cohort_manifest(ws.raw_manifest());
  std::vector<CaseEntry> out(raw.cases.size());
  std::vector<json> records(raw.cases.size());
  parallel_for(raw.cases.size(), ws.config.jobs, [&](std::size_t i) {
    const auto& e = raw.cases[i];
    const auto n = normalize_study(ws.load_study(e));
    CaseEntry ne = e;
    json rec = json::array();
    for (auto m : kAllModalities) {
      const std::string rel = "normalized/" + e.case_id + "_" + to_string(m) + ".nii.gz";
      save_nifti(ws.config.data_dir / rel, n.study[m]);
      ne.images[to_string(m)] = rel;
      rec.push_back(to_json(n.records[static_cast<int>(m)]));
    }
    out[i] = std::move(ne);
    records[i] = std::move(rec);
  });
  json j;
  j["cases"] = json::array();
  for (std::size_t i = 0; i < out.size(); ++i) {
    auto e = to_json(out[i]);
    e["normalization"] = records[i];
    j["cases"].push_back(e);
  }
  write_json(ws.normalized_manifest(), j);
  ws.log("normalized " + std::to_string(out.size()) + " cases");
}

// -- train ---------------------------------------------------------------------

/// Directory name of a model family; identical stage specs share checkpoints,
/// so the cascade's residual stage 1 reuses the resenc baseline folds.
inline std::string model_key(const StageSpec& s, bool lowres = false) {
  if (s.name == StageName::Stage1) {
    if (lowres) return "lowres";
    return s.net_config.residual_encoder ? "resenc" : "default";
  }
  return std::string(to_string(s.name)) + (s.net_config.residual_encoder ? "_resenc" : "");
}

struct ModelFamily {
  std::string key;
  StageSpec spec;
  bool lowres = false;
  std::optional<std::vector<RegionId>> presence_filter;
};

inline std::vector<ModelFamily> families_for(const RunConfig& c) {
  const auto s1 = [&](Architecture a) { return baseline_spec(a, c.depth, c.base_width); };
  std::vector<ModelFamily> f;
  auto add_single = [&](Architecture a) {
    const bool lowres = a == Architecture::LowRes;
    f.push_back({model_key(s1(a), lowres), s1(a), lowres, c.train.presence_filter});
  };
  switch (c.architecture) {
    case Architecture::ResEnc:
    case Architecture::Default:
    case Architecture::LowRes: add_single(c.architecture); break;
    case Architecture::MultiEnsemble:
      add_single(Architecture::ResEnc);
      add_single(Architecture::Default);
      add_single(Architecture::LowRes);
      break;
    case Architecture::Cascade:
      f.push_back({model_key(c.cascade.stage1), c.cascade.stage1, false, c.train.presence_filter});
      f.push_back({model_key(c.cascade.stage2a), c.cascade.stage2a, false, c.train.presence_filter});
      f.push_back({model_key(c.cascade.stage2b), c.cascade.stage2b, false,
                   c.stage2b_presence_filter ? c.stage2b_presence_filter : c.train.presence_filter});
      break;
  }
  return f;
}

/// Training inputs for one case; lowres families see volumes resampled by the
/// configured factor. Both are zero-padded to the network's spatial multiple.
inline TrainingCase make_training_case(const ModelFamily& fam, double lowres_factor, const MultiModalStudy& study,
                                       const LabelVolume& truth, const std::optional<LabelVolume>& prior) {
  TrainingCase tc;
  tc.case_id = study.case_id;
  tc.truth = truth;
  auto x = build_stage_inputs(fam.spec, study, prior);
  auto t = class_targets(truth, fam.spec.out_labels);
  if (fam.lowres) {
    const auto e = reduced_extents(x.extents, lowres_factor);
    x = resample_channels(x, e);
    t = class_targets(resample_nearest_to(truth, e), fam.spec.out_labels);
  }
  const auto pe = padded_extents(x.extents, spatial_multiple(fam.spec.net_config));
  tc.targets = pad_targets(t, x.extents, pe);
  tc.inputs = pad_to(x, pe);
  return tc;
}

inline std::string train_metadata(const ModelFamily& fam, int fold, const RunConfig& c,
                                  const std::vector<std::string>& ids, const TrainResult& r, bool best) {
  json j;
  j["family"] = fam.key;
  j["stage"] = to_string(fam.spec.name);
  j["fold"] = fold;
  j["checkpoint"] = best ? "best" : "final";
  j["epochs"] = c.train.epochs;
  j["best_epoch"] = r.best_epoch;
  j["lr0"] = c.train.lr0;
  j["momentum"] = c.train.momentum;
  j["poly_exponent"] = c.train.poly_exponent;
  j["batch_size"] = c.train.batch_size;
  j["steps_per_epoch"] = c.train.steps_per_epoch;
  j["augmentation"] = to_string(c.train.augmentation);
  j["presence_filter"] = cfg::regions_json(fam.presence_filter);
  j["training_cases"] = r.training_cases;
  j["case_ids"] = ids;
  j["data_extents"] = c.phantom.extents;
  if (fam.lowres) j["lowres_factor"] = c.lowres_factor;
  if (fam.spec.name != StageName::Stage1) j["prior_source"] = "stage1_cross_validated";
  return j.dump();
}

/// Everything that determines a fold model; equal requests give equal bytes.
inline json training_request(const ModelFamily& fam, int fold, const RunConfig& c, const std::vector<std::string>& ids,
                             std::uint64_t net_seed, std::uint64_t train_seed) {
  json j = json::parse(train_metadata(fam, fold, c, ids, TrainResult{}, false));
  j.erase("best_epoch");
  j.erase("training_cases");
  j["net_config"] = {fam.spec.net_config.in_channels, fam.spec.net_config.out_classes, fam.spec.net_config.depth,
                     fam.spec.net_config.base_width, fam.spec.net_config.residual_encoder};
  j["net_seed"] = net_seed;
  j["train_seed"] = train_seed;
  j["loss_weights"] = {c.train.loss.dice, c.train.loss.ce};
  j["data_seed"] = c.seed;
  return j;
}

inline std::string history_csv(const std::vector<EpochRecord>& h) {
  std::ostringstream os;
  os << "epoch,lr,loss\n" << std::setprecision(17);
  for (const auto& r : h) os << r.epoch << ',' << r.lr << ',' << r.loss << '\n';
  return os.str();
}

struct LoadedCase {
  const CaseEntry* entry;
  MultiModalStudy study;
  LabelVolume truth;
};

inline std::vector<LoadedCase> load_cases(const Workspace& ws, const CohortManifest& m, const std::string& split) {
  const auto entries = m.split(split);
  std::vector<LoadedCase> out(entries.size());
  parallel_for(entries.size(), ws.config.jobs, [&](std::size_t i) {
    out[i] = {entries[i], ws.load_study(*entries[i]), ws.load_truth(*entries[i])};
  });
  return out;
}

inline CohortManifest require_normalized(const Workspace& ws) {
  if (!fs::exists(ws.normalized_manifest()))
    throw Error(Errc::MissingArtifact, "no normalized cohort; run generate and normalize first");
  return load_cohort_manifest(ws.normalized_manifest());
}

inline std::vector<Network<float>> load_family(const Workspace& ws, const std::string& key, const StageSpec& spec) {
  std::vector<Network<float>> nets;
  for (int f = 0; f < ws.config.folds; ++f) {
    auto ck = load_checkpoint(ws.checkpoint(key, f));
    if (ck.net.config != spec.net_config)
      throw Error(Errc::ConfigError, ws.checkpoint(key, f).string() + ": network configuration differs from the stage spec");
    nets.push_back(std::move(ck.net));
  }
  return nets;
}

/// Trains the k fold models of one family on the training split. Existing
/// checkpoints with identical configuration, seed and metadata are reused.
inline void train_family(const Workspace& ws, const ModelFamily& fam, const std::vector<LoadedCase>& cases,
                         const FoldSplit& split, const std::map<std::string, LabelVolume>& priors) {
  const auto& c = ws.config;
  const auto fam_seed = derive_seed(c.seed, fnv1a(fam.key));
  std::map<std::string, const LoadedCase*> by_id;
  for (const auto& lc : cases) by_id[lc.study.case_id] = &lc;

  parallel_for(static_cast<std::size_t>(c.folds), c.jobs, [&](std::size_t fi) {
    const int f = static_cast<int>(fi);
    const auto ids = c.folds == 1 ? split.fold(0) : split.complement(f);
    std::vector<TrainingCase> data;
    for (const auto& id : ids) {
      const auto* lc = by_id.at(id);
      std::optional<LabelVolume> prior;
      if (!fam.spec.prior_channels.empty()) prior = priors.at(id);
      data.push_back(make_training_case(fam, c.lowres_factor, lc->study, lc->truth, prior));
    }
    auto tcfg = c.train;
    tcfg.seed = derive_seed(fam_seed, 2 * fi + 1);
    tcfg.presence_filter = fam.presence_filter;
    const auto net_seed = derive_seed(fam_seed, 2 * fi);
    const auto path = ws.checkpoint(fam.key, f);

    // Reuse when the stored model was produced by exactly this request.
    const auto stem = ws.model_dir(fam.key) / ("fold_" + std::to_string(f));
    const auto request = training_request(fam, f, c, ids, net_seed, tcfg.seed);
    if (fs::exists(path) && fs::exists(stem.string() + ".request.json") &&
        read_json(stem.string() + ".request.json") == request) {
      const auto ck = load_checkpoint(path);
      if (ck.net.config == fam.spec.net_config && ck.net.seed == net_seed) {
        ws.log(fam.key + " fold " + std::to_string(f) + ": reusing checkpoint");
        return;
      }
    }

    ws.log(fam.key + " fold " + std::to_string(f) + ": training on " + std::to_string(data.size()) + " cases");
    const auto res = train(build_network<float>(fam.spec.net_config, net_seed), data, tcfg);
    write_text(stem.string() + ".history.csv", history_csv(res.history));
    if (res.failure)
      throw Error(res.failure->code(), fam.key + " fold " + std::to_string(f) + ": " + res.failure->what());
    save_checkpoint(stem.string() + ".best.ckpt", res.best_net, res.best_epoch, train_metadata(fam, f, c, ids, res, true));
    save_checkpoint(path, res.final_net, c.train.epochs, train_metadata(fam, f, c, ids, res, false));
    write_json(stem.string() + ".request.json", request);
    ws.log(fam.key + " fold " + std::to_string(f) + ": final loss " +
           std::to_string(res.history.empty() ? 0.0 : res.history.back().loss));
  });
}

/// Stage-1 labels of every training case from the fold model that did not see
/// it (all folds when k = 1).
inline std::map<std::string, LabelVolume> out_of_fold_priors(const Workspace& ws, const ModelFamily& stage1,
                                                             const std::vector<LoadedCase>& cases,
                                                             const FoldSplit& split) {
  const auto nets = load_family(ws, stage1.key, stage1.spec);
  std::vector<LabelVolume> labels(cases.size());
  parallel_for(cases.size(), ws.config.jobs, [&](std::size_t i) {
    const auto& lc = cases[i];
    const int f = split.assignments.at(lc.study.case_id);
    const std::span<const Network<float>> fold_nets =
        ws.config.folds == 1 ? std::span<const Network<float>>(nets) : std::span<const Network<float>>(&nets[f], 1);
    labels[i] = run_stage(stage1.spec, fold_nets, lc.study, std::nullopt).labels;
    save_label_nifti(ws.model_dir(stage1.key) / "oof" / (lc.study.case_id + ".nii.gz"), labels[i]);
  });
  std::map<std::string, LabelVolume> out;
  for (std::size_t i = 0; i < cases.size(); ++i) out[cases[i].study.case_id] = std::move(labels[i]);
  return out;
}

inline std::vector<std::string> case_ids(const std::vector<LoadedCase>& cases) {
  std::vector<std::string> ids;
  for (const auto& c : cases) ids.push_back(c.study.case_id);
  return ids;
}

inline FoldSplit training_split(const Workspace& ws, const std::vector<LoadedCase>& cases) {
  return kfold_split(case_ids(cases), ws.config.folds, derive_seed(ws.config.seed, fnv1a("folds")));
}

inline void cmd_train(const Workspace& ws) {
  const auto m = require_normalized(ws);
  const auto cases = load_cases(ws, m, "train");
  if (cases.empty()) throw Error(Errc::TooFewCases, "no training cases in the manifest");
  const auto split = training_split(ws, cases);
  json folds;
  for (int f = 0; f < split.k; ++f) folds[std::to_string(f)] = split.fold(f);
  write_json(ws.config.output_dir / "models" / "folds.json", folds);

  const auto fams = families_for(ws.config);
  if (ws.config.architecture != Architecture::Cascade) {
    for (const auto& fam : fams) train_family(ws, fam, cases, split, {});
    return;
  }
  train_family(ws, fams[0], cases, split, {});
  const auto priors = out_of_fold_priors(ws, fams[0], cases, split);
  train_family(ws, fams[1], cases, split, priors);
  train_family(ws, fams[2], cases, split, priors);
}

// -- predict -------------------------------------------------------------------

inline json to_json(const CascadeProvenance& p) {
  return {{"case_id", p.case_id}, {"label_counts", p.label_counts}, {"stage2_prior_source", p.stage2_prior_source}};
}

/// Label predictions for a split ("val", "train" or "all") plus a manifest
/// pairing each prediction with its truth.
inline void cmd_predict(const Workspace& ws, const std::string& split = "val") {
  const auto& c = ws.config;
  const auto m = require_normalized(ws);
  const auto entries = m.split(split);
  if (entries.empty()) throw Error(Errc::TooFewCases, "no cases in split '" + split + "'");
  const auto fams = families_for(c);
  std::vector<std::vector<Network<float>>> nets;
  for (const auto& fam : fams) nets.push_back(load_family(ws, fam.key, fam.spec));

  const auto dir = ws.prediction_dir();
  std::vector<json> rows(entries.size());
  parallel_for(entries.size(), c.jobs, [&](std::size_t i) {
    const auto& e = *entries[i];
    const auto study = ws.load_study(e);
    LabelVolume labels;
    // Paths are relative to the manifest so that runs in different
    // directories produce identical bytes.
    const auto truth_rel =
        fs::absolute(c.data_dir / e.truth).lexically_normal().lexically_relative(fs::absolute(dir).lexically_normal());
    json row = {{"case_id", e.case_id}, {"truth", truth_rel.string()}};
    if (c.architecture == Architecture::Cascade) {
      CascadePlan plan = c.cascade;
      const CascadeNets<Network<float>> cn{nets[0], nets[1], nets[2]};
      const auto r = run_cascade(plan, cn, study);
      labels = r.labels;
      write_json(dir / (e.case_id + ".provenance.json"), to_json(r.provenance));
      row["provenance"] = e.case_id + ".provenance.json";
    } else {
      BaselineNets<Network<float>> bn;
      bn.lowres_factor = c.lowres_factor;
      for (std::size_t k = 0; k < fams.size(); ++k) {
        if (fams[k].key == "resenc") bn.resenc = nets[k];
        else if (fams[k].key == "default") bn.plain = nets[k];
        else bn.lowres = nets[k];
      }
      labels = run_baseline(c.architecture, bn, study, c.depth, c.base_width).labels;
    }
    const auto path = dir / (e.case_id + ".nii.gz");
    save_label_nifti(path, labels);
    row["prediction"] = e.case_id + ".nii.gz";
    rows[i] = std::move(row);
  });
  json j;
  j["architecture"] = to_string(c.architecture);
  j["split"] = split;
  j["cases"] = rows;
  write_json(dir / "manifest.json", j);
  ws.log("wrote " + std::to_string(rows.size()) + " predictions to " + dir.string());
}

// -- evaluate / report-empties -------------------------------------------------------

struct PairEntry {
  std::string case_id;
  fs::path prediction, truth;
};

/// Prediction manifest: {"cases": [{"case_id", "prediction", "truth"}, ...]};
/// relative paths resolve against the manifest's directory.
inline std::vector<PairEntry> load_pair_manifest(const fs::path& path) {
  const json j = read_json(path);
  std::vector<PairEntry> out;
  try {
    for (const auto& e : j.at("cases")) {
      PairEntry p{e.at("case_id").get<std::string>(), e.at("prediction").get<std::string>(),
                  e.at("truth").get<std::string>()};
      if (p.prediction.is_relative()) p.prediction = path.parent_path() / p.prediction;
      if (p.truth.is_relative()) p.truth = path.parent_path() / p.truth;
      out.push_back(std::move(p));
    }
  } catch (const json::exception& e) {
    throw Error(Errc::IoError, "malformed prediction manifest: " + std::string(e.what()));
  }
  if (out.empty()) throw Error(Errc::TooFewCases, "prediction manifest lists no cases");
  return out;
}

inline std::pair<LabelVolume, LabelVolume> load_pair(const Workspace& ws, const PairEntry& p) {
  for (const auto& f : {p.prediction, p.truth})
    if (!fs::exists(f)) throw Error(Errc::MissingArtifact, "missing " + f.string());
  return {load_label_nifti(p.prediction, ws.label_map), load_label_nifti(p.truth, ws.label_map)};
}

inline json summary_json(const CohortSummary& s) {
  json j;
  j["n_cases"] = s.n_cases;
  j["columns"] = json::array();
  for (auto r : kSummaryColumns) j["columns"].push_back(report_name(r));
  for (auto r : kSummaryColumns) {
    const auto& x = s[r];
    j["regions"][report_name(r)] = {{"dice", x.mean_dice},
                                    {"lesionwise_dice", x.mean_lesionwise_dice},
                                    {"hd95_mm", x.mean_hd95_mm ? json(*x.mean_hd95_mm) : json(nullptr)},
                                    {"hd95_defined_cases", x.hd95_defined},
                                    {"pred_empty", x.pred_empty_count},
                                    {"truth_empty", x.truth_empty_count}};
  }
  return j;
}

inline fs::path default_pair_manifest(const Workspace& ws) { return ws.prediction_dir() / "manifest.json"; }

inline CohortSummary cmd_evaluate(const Workspace& ws, const std::optional<fs::path>& manifest = std::nullopt) {
  const auto pairs = load_pair_manifest(manifest.value_or(default_pair_manifest(ws)));
  std::vector<EvalReport> reports(pairs.size());
  parallel_for(pairs.size(), ws.config.jobs, [&](std::size_t i) {
    const auto [pred, truth] = load_pair(ws, pairs[i]);
    reports[i] = evaluate_case(pred, truth, ws.config.eval, pairs[i].case_id);
  });
  const auto summary = aggregate(reports);
  const auto dir = ws.evaluation_dir();
  write_text(dir / "cases.csv", reports_csv(reports));
  write_json(dir / "summary.json", summary_json(summary));
  ws.log("evaluated " + std::to_string(reports.size()) + " cases into " + dir.string());
  return summary;
}

/// Empty-mask table ("k/n" per region) for predictions versus truth.
inline std::string cmd_report_empties(const Workspace& ws, const std::optional<fs::path>& manifest = std::nullopt) {
  const auto pairs = load_pair_manifest(manifest.value_or(default_pair_manifest(ws)));
  std::vector<EvalReport> reports(pairs.size());
  parallel_for(pairs.size(), ws.config.jobs, [&](std::size_t i) {
    const auto [pred, truth] = load_pair(ws, pairs[i]);
    EvalReport rep;
    rep.case_id = pairs[i].case_id;
    for (auto r : kEvalRegions) {
      RegionReport rr;
      rr.region = r;
      rr.pred_empty = count_true(derive_region(pred, r)) == 0;
      rr.truth_empty = count_true(derive_region(truth, r)) == 0;
      rep.regions.push_back(rr);
    }
    reports[i] = std::move(rep);
  });
  const auto table = empties_table(aggregate(reports));
  write_text(ws.evaluation_dir() / "empties.txt", table);
  return table;
}

}  // namespace segcascade
