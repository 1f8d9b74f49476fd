#pragma once

// Stage specifications and inference for the single-configuration baselines
// and the two-stage cascade. Inference is templated over a predictor: any
// type for which predict_probs(p, Tensor5<float>) returns class
// probabilities. Network<float> is the production predictor; tests plug in
// oracles.

#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "error.hpp"
#include "label_algebra.hpp"
#include "study.hpp"
#include "tinyunet.hpp"
#include "trainer.hpp"
#include "volume.hpp"
#include "volume_core.hpp"

namespace segcascade {

enum class StageName { Stage1, Stage2a, Stage2b };

inline const char* to_string(StageName s) {
  switch (s) {
    case StageName::Stage1: return "stage1";
    case StageName::Stage2a: return "stage2a";
    case StageName::Stage2b: return "stage2b";
  }
  return "?";
}

struct StageSpec {
  StageName name = StageName::Stage1;
  std::vector<Modality> modalities;
  std::vector<RegionId> prior_channels;
  std::vector<Label> out_labels;
  NetworkConfig net_config;
};

inline StageSpec make_stage_spec(StageName name, int depth = 3, int base_width = 8, bool residual = true) {
  StageSpec s;
  s.name = name;
  switch (name) {
    case StageName::Stage1:
      s.modalities = {Modality::T1w, Modality::T1wCE, Modality::T2w, Modality::FLAIR};
      s.out_labels = {Label::ET, Label::NET, Label::CC, Label::ED};
      break;
    case StageName::Stage2a:
      s.modalities = {Modality::T1w, Modality::T1wCE};
      s.prior_channels = {RegionId::ET, RegionId::NET};
      s.out_labels = {Label::ET, Label::NET};
      break;
    case StageName::Stage2b:
      s.modalities = {Modality::T2w, Modality::FLAIR};
      s.prior_channels = {RegionId::ST, RegionId::CC, RegionId::ED};
      s.out_labels = {Label::CC, Label::ED};
      break;
  }
  s.net_config = NetworkConfig{static_cast<int>(s.modalities.size() + s.prior_channels.size()),
                               static_cast<int>(s.out_labels.size()) + 1, depth, base_width, residual};
  return s;
}

inline void validate(const StageSpec& s) {
  const auto ref = make_stage_spec(s.name, s.net_config.depth, s.net_config.base_width, s.net_config.residual_encoder);
  if (s.modalities != ref.modalities || s.prior_channels != ref.prior_channels || s.out_labels != ref.out_labels)
    throw Error(Errc::InvalidConfig, std::string(to_string(s.name)) + ": channel routing differs from the stage definition");
  if (s.net_config != ref.net_config)
    throw Error(Errc::InvalidConfig, std::string(to_string(s.name)) + ": network channel counts do not match the routing");
  validate(s.net_config);
}

/// Class names of a stage's probability stack: BG then the output labels.
inline std::vector<std::string> class_names(const StageSpec& s) {
  std::vector<std::string> n{"BG"};
  for (auto l : s.out_labels) n.emplace_back(to_string(l));
  return n;
}

inline std::vector<Label> code_map(const StageSpec& s) {
  std::vector<Label> m{Label::BG};
  for (auto l : s.out_labels) m.push_back(l);
  return m;
}

enum class MergePolicy { Overwrite2bOver2a };

struct CascadePlan {
  StageSpec stage1 = make_stage_spec(StageName::Stage1);
  StageSpec stage2a = make_stage_spec(StageName::Stage2a, 3, 8, false);
  StageSpec stage2b = make_stage_spec(StageName::Stage2b, 3, 8, false);
  MergePolicy merge_policy = MergePolicy::Overwrite2bOver2a;
};

inline CascadePlan make_cascade_plan(int depth, int base_width, bool stage1_residual = true,
                                     bool stage2_residual = false) {
  return {make_stage_spec(StageName::Stage1, depth, base_width, stage1_residual),
          make_stage_spec(StageName::Stage2a, depth, base_width, stage2_residual),
          make_stage_spec(StageName::Stage2b, depth, base_width, stage2_residual),
          MergePolicy::Overwrite2bOver2a};
}

inline void validate(const CascadePlan& p) {
  if (p.stage1.name != StageName::Stage1 || p.stage2a.name != StageName::Stage2a ||
      p.stage2b.name != StageName::Stage2b)
    throw Error(Errc::InvalidConfig, "cascade plan stages out of order");
  validate(p.stage1);
  validate(p.stage2a);
  validate(p.stage2b);
}

/// Channels: spec.modalities (normalised intensities) then spec.prior_channels
/// as binary masks of `prior`. Batch 1.
inline Tensor5<float> build_stage_inputs(const StageSpec& spec, const MultiModalStudy& study,
                                         const std::optional<LabelVolume>& prior) {
  if (spec.prior_channels.empty() && prior)
    throw Error(Errc::MissingPrior, std::string(to_string(spec.name)) + " takes no prior");
  if (!spec.prior_channels.empty() && !prior)
    throw Error(Errc::MissingPrior, std::string(to_string(spec.name)) + " requires a stage-1 prior");
  const Grid& g = study.grid();
  if (prior) require_same_grid(prior->grid, g, "prior geometry differs from the study");
  for (auto m : spec.modalities) require_same_grid(study[m].grid, g, "study modalities disagree on geometry");

  const int C = static_cast<int>(spec.modalities.size() + spec.prior_channels.size());
  Tensor5<float> x(1, C, g.extents);
  int c = 0;
  for (auto m : spec.modalities) {
    std::copy(study[m].data.begin(), study[m].data.end(), x.channel(0, c));
    ++c;
  }
  if (prior) {
    const auto stack = to_channels(*prior, spec.prior_channels);
    for (const auto& ch : stack.channels) {
      std::copy(ch.begin(), ch.end(), x.channel(0, c));
      ++c;
    }
  }
  return x;
}

// -- padding ---------------------------------------------------------------

inline Index3 padded_extents(const Index3& e, int multiple) {
  Index3 out;
  for (int a = 0; a < 3; ++a) out[a] = (e[a] + multiple - 1) / multiple * multiple;
  return out;
}

/// Zero-pads every channel at the high end of each axis.
template <class T>
Tensor5<T> pad_to(const Tensor5<T>& x, const Index3& e, T fill = T(0)) {
  if (e == x.extents) return x;
  Tensor5<T> out(x.batch, x.channels, e, fill);
  const auto& s = x.extents;
  for (int b = 0; b < x.batch; ++b)
    for (int c = 0; c < x.channels; ++c)
      for (int z = 0; z < s[2]; ++z)
        for (int y = 0; y < s[1]; ++y) {
          const T* src = x.channel(b, c) + (static_cast<std::size_t>(z) * s[1] + y) * s[0];
          T* dst = out.channel(b, c) + (static_cast<std::size_t>(z) * e[1] + y) * e[0];
          std::copy(src, src + s[0], dst);
        }
  return out;
}

template <class T>
Tensor5<T> crop_to(const Tensor5<T>& x, const Index3& e) {
  if (e == x.extents) return x;
  Tensor5<T> out(x.batch, x.channels, e);
  const auto& s = x.extents;
  for (int b = 0; b < x.batch; ++b)
    for (int c = 0; c < x.channels; ++c)
      for (int z = 0; z < e[2]; ++z)
        for (int y = 0; y < e[1]; ++y) {
          const T* src = x.channel(b, c) + (static_cast<std::size_t>(z) * s[1] + y) * s[0];
          T* dst = out.channel(b, c) + (static_cast<std::size_t>(z) * e[1] + y) * e[0];
          std::copy(src, src + e[0], dst);
        }
  return out;
}

inline std::vector<std::uint8_t> pad_targets(const std::vector<std::uint8_t>& t, const Index3& s, const Index3& e) {
  if (s == e) return t;
  std::vector<std::uint8_t> out(unet::nvox(e), 0);
  for (int z = 0; z < s[2]; ++z)
    for (int y = 0; y < s[1]; ++y)
      std::copy_n(t.begin() + (static_cast<std::size_t>(z) * s[1] + y) * s[0], s[0],
                  out.begin() + (static_cast<std::size_t>(z) * e[1] + y) * e[0]);
  return out;
}

// -- predictors --------------------------------------------------------------

/// Whole-volume inference; inputs are zero-padded up to the network's spatial
/// multiple and the probabilities cropped back.
inline Tensor5<float> predict_probs(const Network<float>& net, const Tensor5<float>& x) {
  const auto e = padded_extents(x.extents, spatial_multiple(net.config));
  return crop_to(forward(net, pad_to(x, e)), x.extents);
}

/// Runs `inner` on inputs resampled by `factor` and trilinearly upsamples the
/// probabilities back onto the input lattice.
template <class P>
struct Rescaled {
  const P* inner = nullptr;
  double factor = 1.5;
};

inline Tensor5<float> resample_channels(const Tensor5<float>& x, const Index3& e) {
  if (e == x.extents) return x;
  Tensor5<float> out(x.batch, x.channels, e);
  const Grid src(x.extents, {1.0, 1.0, 1.0});
  for (int b = 0; b < x.batch; ++b)
    for (int c = 0; c < x.channels; ++c) {
      const float* p = x.channel(b, c);
      const auto r = resample_to(Volume3D(src, std::vector<float>(p, p + x.voxels())), e);
      std::copy(r.data.begin(), r.data.end(), out.channel(b, c));
    }
  return out;
}

template <class P>
Tensor5<float> predict_probs(const Rescaled<P>& r, const Tensor5<float>& x) {
  const auto low = resample_channels(x, reduced_extents(x.extents, r.factor));
  return resample_channels(predict_probs(*r.inner, low), x.extents);
}

template <class P>
concept Predictor = requires(const P& p, const Tensor5<float>& x) {
  { predict_probs(p, x) } -> std::same_as<Tensor5<float>>;
};

/// Network configuration of a predictor, when it has one.
template <class P>
std::optional<NetworkConfig> predictor_config(const P& p) {
  if constexpr (requires { p.config; })
    return p.config;
  else if constexpr (requires { p.inner; })
    return predictor_config(*p.inner);
  else
    return std::nullopt;
}

struct StageOutput {
  ChannelStack probs;
  LabelVolume labels;
};

/// Fold-ensembled inference for one stage. Labels are restricted to the
/// stage's outputs plus BG by construction of the code map.
template <Predictor P>
StageOutput run_stage(const StageSpec& spec, std::span<const P> nets, const MultiModalStudy& study,
                      const std::optional<LabelVolume>& prior) {
  if (nets.empty()) throw Error(Errc::MissingArtifact, std::string(to_string(spec.name)) + ": no fold models");
  for (const auto& n : nets)
    if (const auto c = predictor_config(n); c && *c != spec.net_config)
      throw Error(Errc::ConfigError, std::string(to_string(spec.name)) + ": model configuration differs from the stage spec");
  const auto x = build_stage_inputs(spec, study, prior);
  const auto names = class_names(spec);
  std::vector<ChannelStack> members;
  for (const auto& n : nets) {
    const auto probs = predict_probs(n, x);
    if (probs.channels != static_cast<int>(names.size()) || probs.extents != x.extents || probs.batch != 1)
      throw Error(Errc::ShapeMismatch, std::string(to_string(spec.name)) + ": predictor output shape");
    members.push_back(to_channel_stack(probs, 0, study.grid(), names));
  }
  StageOutput out;
  out.probs = ensemble_probs(members);
  out.labels = argmax_labels(out.probs, code_map(spec));
  return out;
}

template <Predictor P>
StageOutput run_stage(const StageSpec& spec, const std::vector<P>& nets, const MultiModalStudy& study,
                      const std::optional<LabelVolume>& prior) {
  return run_stage(spec, std::span<const P>(nets), study, prior);
}

template <class P>
struct CascadeNets {
  std::vector<P> stage1, stage2a, stage2b;
};

struct CascadeProvenance {
  std::string case_id;
  std::map<std::string, std::map<std::string, std::size_t>> label_counts;  // stage -> label -> voxels
  std::string stage2_prior_source = "stage1_cross_validated";
};

struct CascadeResult {
  LabelVolume labels;
  StageOutput stage1, stage2a, stage2b;
  CascadeProvenance provenance;
};

inline std::map<std::string, std::size_t> label_counts(const LabelVolume& lv) {
  std::map<std::string, std::size_t> m;
  for (auto l : kAllLabels) m[to_string(l)] = count_value(lv, l);
  return m;
}

/// Stage 1 on all modalities; stages 2a and 2b each take stage 1's labels as
/// prior channels (never as a hard mask); 2b foreground overwrites 2a.
template <Predictor P>
CascadeResult run_cascade(const CascadePlan& plan, const CascadeNets<P>& nets, const MultiModalStudy& study) {
  validate(plan);
  CascadeResult r;
  r.stage1 = run_stage(plan.stage1, nets.stage1, study, std::nullopt);
  r.stage2a = run_stage(plan.stage2a, nets.stage2a, study, r.stage1.labels);
  r.stage2b = run_stage(plan.stage2b, nets.stage2b, study, r.stage1.labels);
  r.labels = merge_stage_outputs(r.stage2a.labels, r.stage2b.labels);
  r.provenance.case_id = study.case_id;
  r.provenance.label_counts["stage1"] = label_counts(r.stage1.labels);
  r.provenance.label_counts["stage2a"] = label_counts(r.stage2a.labels);
  r.provenance.label_counts["stage2b"] = label_counts(r.stage2b.labels);
  r.provenance.label_counts["final"] = label_counts(r.labels);
  return r;
}

enum class Architecture { ResEnc, Default, LowRes, MultiEnsemble, Cascade };

inline const char* to_string(Architecture a) {
  switch (a) {
    case Architecture::ResEnc: return "resenc";
    case Architecture::Default: return "default";
    case Architecture::LowRes: return "lowres";
    case Architecture::MultiEnsemble: return "multi_ensemble";
    case Architecture::Cascade: return "cascade";
  }
  return "?";
}

inline std::optional<Architecture> parse_architecture(std::string_view s) {
  for (auto a : {Architecture::ResEnc, Architecture::Default, Architecture::LowRes, Architecture::MultiEnsemble,
                 Architecture::Cascade})
    if (s == to_string(a)) return a;
  return std::nullopt;
}

inline constexpr double kLowResFactor = 1.5;

/// Stage-1-shaped spec of a single-configuration baseline.
inline StageSpec baseline_spec(Architecture a, int depth, int base_width) {
  if (a == Architecture::MultiEnsemble || a == Architecture::Cascade)
    throw Error(Errc::InvalidConfig, "not a single-configuration architecture");
  return make_stage_spec(StageName::Stage1, depth, base_width, a == Architecture::ResEnc);
}

template <class P>
struct BaselineNets {
  std::vector<P> resenc, plain, lowres;  // fold models per configuration
  double lowres_factor = kLowResFactor;
};

/// Single-configuration or multi-configuration baseline prediction.
template <Predictor P>
StageOutput run_baseline(Architecture arch, const BaselineNets<P>& nets, const MultiModalStudy& study, int depth,
                         int base_width) {
  auto lowres = [&] {
    std::vector<Rescaled<P>> w;
    for (const auto& n : nets.lowres) w.push_back({&n, nets.lowres_factor});
    return run_stage(baseline_spec(Architecture::LowRes, depth, base_width), w, study, std::nullopt);
  };
  switch (arch) {
    case Architecture::ResEnc:
      return run_stage(baseline_spec(arch, depth, base_width), nets.resenc, study, std::nullopt);
    case Architecture::Default:
      return run_stage(baseline_spec(arch, depth, base_width), nets.plain, study, std::nullopt);
    case Architecture::LowRes: return lowres();
    case Architecture::MultiEnsemble: {
      const auto a = run_stage(baseline_spec(Architecture::ResEnc, depth, base_width), nets.resenc, study, std::nullopt);
      const auto b = run_stage(baseline_spec(Architecture::Default, depth, base_width), nets.plain, study, std::nullopt);
      const auto c = lowres();
      StageOutput out;
      out.probs = ensemble_probs({b.probs, c.probs, a.probs});
      out.labels = argmax_labels(out.probs, code_map(make_stage_spec(StageName::Stage1)));
      return out;
    }
    case Architecture::Cascade: break;
  }
  throw Error(Errc::InvalidConfig, "run_baseline does not handle the cascade");
}

}  // namespace segcascade
