// Acceptance run: one PASS/FAIL line per criterion, nonzero exit on any FAIL.
// `acceptance 2 9` runs a subset.

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <iostream>
#include <set>
#include <sstream>
#include <string>
#include <unistd.h>

#include <segcascade/cascade.hpp>
#include <segcascade/evalsuite.hpp>
#include <segcascade/nifti_io.hpp>
#include <segcascade/normalize.hpp>
#include <segcascade/phantom.hpp>
#include <segcascade/pipeline.hpp>
#include <segcascade/trainer.hpp>

#include "support.hpp"

using namespace segcascade;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = true;
  std::string detail;

  void check(bool ok, const std::string& what) {
    if (!ok && pass) {
      pass = false;
      detail = what;
    }
  }
};

std::string fmt(double v, int prec = 4) {
  std::ostringstream os;
  os.precision(prec);
  os << v;
  return os.str();
}

fs::path scratch_dir(const std::string& name) {
  const auto d = fs::temp_directory_path() / ("segcascade_accept_" + std::to_string(::getpid()) + "_" + name);
  fs::remove_all(d);
  fs::create_directories(d);
  return d;
}

std::string slurp(const fs::path& p) {
  const auto b = read_file_bytes(p);
  return {b.begin(), b.end()};
}

// 1 ---------------------------------------------------------------------------
Outcome nifti_round_trip() {
  Outcome o;
  Rng rng(1001);
  for (int i = 0; i < 100; ++i) {
    const auto e = testsupport::random_extents(rng, 32);
    // pixdim is float32 on disk
    const auto sp = [&] { return static_cast<double>(static_cast<float>(rng.uniform(0.5, 3.0))); };
    Volume3D v(Grid(e, {sp(), sp(), sp()}));
    for (auto& x : v.data) x = static_cast<float>(rng.normal(0.0, 1000.0));
    const auto back = read_nifti(write_nifti(v)).volume;
    o.check(back.data == v.data && back.grid.extents == v.grid.extents && back.grid.spacing == v.grid.spacing,
            "write/read mismatch on volume " + std::to_string(i));
    for (bool big : {false, true}) {
      const auto raw = testsupport::build(testsupport::float_volume(e, v.data, big));
      o.check(read_nifti(raw).volume.data == v.data,
              std::string(big ? "big" : "little") + "-endian read mismatch on volume " + std::to_string(i));
    }
  }
  if (o.pass) o.detail = "100 volumes bit-exact, both byte orders";
  return o;
}

// 2 ---------------------------------------------------------------------------
Outcome metric_oracles() {
  Outcome o;
  Rng rng(2002);
  double worst_hd = 0.0;
  for (int i = 0; i < 500; ++i) {
    const auto e = testsupport::random_extents(rng, 8);
    const Grid g(e, {rng.uniform(0.5, 2.5), rng.uniform(0.5, 2.5), rng.uniform(0.5, 2.5)});
    const auto a = testsupport::random_mask(rng, g, rng.uniform(0.0, 0.5));
    const auto b = testsupport::random_mask(rng, g, rng.uniform(0.0, 0.5));
    o.check(dice(a, b) == testsupport::brute_dice(a, b), "dice differs on pair " + std::to_string(i));
    const auto h = hd95(a, b);
    const double oracle = testsupport::brute_hd95(a, b);
    if (oracle < 0) {
      o.check(!h.has_value(), "hd95 defined for a one-empty pair " + std::to_string(i));
    } else {
      o.check(h.has_value(), "hd95 undefined on pair " + std::to_string(i));
      if (h) worst_hd = std::max(worst_hd, std::abs(*h - oracle));
    }
    o.check(lesionwise_dice(a, b) == testsupport::brute_lesionwise(a, b, true, 3),
            "lesion-wise dice differs on pair " + std::to_string(i));
  }
  o.check(worst_hd <= 1e-9, "hd95 error " + fmt(worst_hd));
  if (o.pass) o.detail = "500 pairs; worst hd95 error " + fmt(worst_hd) + " mm";
  return o;
}

// 3 ---------------------------------------------------------------------------
Outcome empty_conventions() {
  Outcome o;
  const Grid g({6, 6, 6}, {1, 1, 1});
  const LabelVolume empty(g, Label::BG);
  int checked = 0;
  for (auto r : kEvalRegions) {
    const auto both = evaluate_case(empty, empty);
    o.check(both[r].dice == 1.0 && both[r].lesionwise_dice == 1.0, "both-empty " + report_name(r));
    for (auto code : {Label::ET, Label::NET, Label::CC, Label::ED}) {
      LabelVolume one(g, Label::BG);
      one(2, 3, 1) = code;
      if (count_true(derive_region(one, r)) == 0) continue;
      o.check(evaluate_case(one, empty)[r].dice == 0.0, "pred-only " + report_name(r));
      o.check(evaluate_case(empty, one)[r].dice == 0.0, "truth-only " + report_name(r));
      ++checked;
    }
  }
  if (o.pass) o.detail = "6 regions, " + std::to_string(checked) + " one-empty cases";
  return o;
}

// 4 ---------------------------------------------------------------------------
Outcome normalization() {
  Outcome o;
  PhantomSpec spec;
  spec.tumor = false;
  double lo = 1.0, hi = 0.0, worst_rel = 0.0;
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const auto ph = generate_phantom(spec, 4000 + seed);
    for (auto m : kAllModalities) {
      const auto n = normalize_volume(ph.study[m], m);
      const double mean = fit_gaussian_peak<float>(masked_values(n.volume, n.mask)).mean;
      lo = std::min(lo, mean);
      hi = std::max(hi, mean);
      if (seed < 5) {
        const double c = 1.0 + 2.0 * seed;
        Volume3D scaled = ph.study[m];
        for (auto& x : scaled.data) x = static_cast<float>(x * c);
        const auto ns = normalize_volume(scaled, m);
        for (std::size_t i = 0; i < n.volume.size(); ++i) {
          const double ref = n.volume.data[i];
          if (ref == 0.0) continue;
          worst_rel = std::max(worst_rel, std::abs(ns.volume.data[i] - ref) / std::abs(ref));
        }
      }
    }
  }
  o.check(lo >= 0.49 && hi <= 0.51, "peak means span [" + fmt(lo) + ", " + fmt(hi) + "]");
  o.check(worst_rel < 1e-4, "scale equivariance error " + fmt(worst_rel));
  if (o.pass) o.detail = "peaks in [" + fmt(lo) + ", " + fmt(hi) + "], equivariance " + fmt(worst_rel);
  return o;
}

// 5 ---------------------------------------------------------------------------
Outcome gradient_check() {
  Outcome o;
  constexpr double h = 1e-3;
  double worst = 0.0;
  int failing = 0, total = 0;
  for (bool residual : {true, false}) {
    const NetworkConfig c{2, 3, 2, 4, residual};
    auto net = build_network<double>(c, residual ? 51 : 52);
    Rng rng(residual ? 53 : 54);
    Batch<double> batch{Tensor5<double>(2, 2, {8, 8, 8}), std::vector<std::uint8_t>(2 * 512)};
    for (auto& v : batch.inputs.data) v = rng.normal();
    for (auto& t : batch.targets) t = static_cast<std::uint8_t>(rng.below(3));
    const auto g = gradients(net, batch);
    for (int k = 0; k < 20; ++k) {
      const auto pi = rng.below(net.params.size());
      auto& p = net.params[pi];
      const auto j = rng.below(p.data.size());
      const double old = p.data[j];
      p.data[j] = old + h;
      const double lp = gradients(net, batch).loss.total;
      p.data[j] = old - h;
      const double lm = gradients(net, batch).loss.total;
      p.data[j] = old;
      const double fd = (lp - lm) / (2 * h), an = g.grads[pi][j];
      const double rel = std::abs(fd - an) / std::max({std::abs(fd), std::abs(an), 1e-10});
      worst = std::max(worst, rel);
      failing += rel >= 1e-4;
      ++total;
    }
  }
  o.check(worst < 1e-4, std::to_string(failing) + "/" + std::to_string(total) +
                            " coordinates above 1e-4 at step 1e-3, worst relative error " + fmt(worst));
  if (o.pass) o.detail = std::to_string(total) + " coordinates, worst relative error " + fmt(worst);
  return o;
}

// 6 ---------------------------------------------------------------------------
Outcome optimizer_schedule() {
  Outcome o;
  TrainConfig cfg;
  o.check(poly_lr(0, cfg) == 0.01, "poly_lr(0) != 0.01");
  for (int e = 1; e <= cfg.epochs; ++e) o.check(poly_lr(e, cfg) < poly_lr(e - 1, cfg), "not strictly decreasing");

  Network<double> one;
  one.params.push_back({"w", {1}, {1.0}});
  auto st = make_optimizer_state(one);
  sgd_nesterov_step(one, {{1.0}}, st, 0.1, 0.99);
  o.check(std::abs(one.params[0].data[0] - 0.801) <= 1e-12 && std::abs(st.velocity[0][0] + 0.1) <= 1e-12,
          "Nesterov hand example: theta " + fmt(one.params[0].data[0], 17));

  auto net = build_network<double>(NetworkConfig{2, 3, 2, 2, true}, 6);
  const auto before = net;
  Rng rng(6);
  std::vector<std::vector<double>> g;
  for (const auto& p : net.params) {
    g.emplace_back(p.data.size());
    for (auto& v : g.back()) v = rng.normal();
  }
  auto s2 = make_optimizer_state(net);
  sgd_nesterov_step(net, g, s2, 0.03, 0.0);
  for (std::size_t i = 0; i < g.size(); ++i)
    for (std::size_t j = 0; j < g[i].size(); ++j)
      o.check(net.params[i].data[j] == before.params[i].data[j] - 0.03 * g[i][j], "mu = 0 differs from plain SGD");
  if (o.pass) o.detail = "poly_lr(0) = 0.01, monotone, Nesterov exact, mu = 0 is SGD";
  return o;
}

// 7 ---------------------------------------------------------------------------
Outcome overfit_smoke() {
  Outcome o;
  PhantomSpec spec;
  spec.extents = {16, 16, 16};
  std::uint64_t seed = 0;
  auto ph = generate_phantom(spec, seed, "solo");
  while (!(ph.has_cc && ph.has_ed)) ph = generate_phantom(spec, ++seed, "solo");
  const auto fam = ModelFamily{"resenc", make_stage_spec(StageName::Stage1, 3, 8, true), false, std::nullopt};
  const auto tc = make_training_case(fam, kLowResFactor, normalize_study(ph.study).study, ph.truth, std::nullopt);
  TrainConfig cfg;
  cfg.epochs = 200;
  cfg.batch_size = 1;
  cfg.steps_per_epoch = 5;
  cfg.seed = 7;
  const auto r = train(build_network(fam.spec.net_config, 7), {tc}, cfg);
  o.check(!r.failure, "training diverged");
  const double sd = foreground_soft_dice(forward(r.final_net, tc.inputs), tc.targets);
  o.check(sd > 0.9, "soft-Dice " + fmt(sd));
  if (o.pass) o.detail = "soft-Dice " + fmt(sd) + " after 200 epochs";
  return o;
}

// 8 ---------------------------------------------------------------------------
struct Oracle {
  std::function<Tensor5<float>(const Tensor5<float>&)> fn;
};
Tensor5<float> predict_probs(const Oracle& p, const Tensor5<float>& x) { return p.fn(x); }

Oracle label_oracle(const LabelVolume& lv, const StageSpec& spec) {
  const auto codes = code_map(spec);
  return {[lv, codes](const Tensor5<float>& x) {
    Tensor5<float> out(1, static_cast<int>(codes.size()), x.extents);
    for (std::size_t i = 0; i < out.voxels(); ++i) {
      int k = 0;
      for (std::size_t c = 0; c < codes.size(); ++c)
        if (codes[c] == lv.data[i]) k = static_cast<int>(c);
      out.channel(0, k)[i] = 1.0f;
    }
    return out;
  }};
}

Outcome cascade_mechanics() {
  Outcome o;
  const auto plan = make_cascade_plan(3, 4);
  PhantomSpec spec;
  spec.extents = {16, 16, 16};
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const auto ph = generate_phantom(spec, 8000 + seed);
    CascadeNets<Oracle> nets;
    nets.stage1 = {label_oracle(ph.truth, plan.stage1)};
    nets.stage2a = {label_oracle(restrict_labels(ph.truth, {Label::BG, Label::ET, Label::NET}), plan.stage2a)};
    nets.stage2b = {label_oracle(restrict_labels(ph.truth, {Label::BG, Label::CC, Label::ED}), plan.stage2b)};
    o.check(run_cascade(plan, nets, ph.study).labels == ph.truth, "oracle cascade differs from truth");
    o.check(build_stage_inputs(plan.stage1, ph.study, std::nullopt).channels == 4, "stage1 channels");
    o.check(build_stage_inputs(plan.stage2a, ph.study, ph.truth).channels == 4, "stage2a channels");
    o.check(build_stage_inputs(plan.stage2b, ph.study, ph.truth).channels == 5, "stage2b channels");
  }
  // Every (2a, 2b) code pair, voxel by voxel.
  const Grid g({3, 3, 1}, {1, 1, 1});
  LabelVolume a(g), b(g);
  const Label as[3] = {Label::BG, Label::ET, Label::NET}, bs[3] = {Label::BG, Label::CC, Label::ED};
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) {
      a(i, j, 0) = as[i];
      b(i, j, 0) = bs[j];
    }
  const auto m = merge_stage_outputs(a, b);
  for (std::size_t i = 0; i < m.size(); ++i)
    o.check(m.data[i] == (b.data[i] != Label::BG ? b.data[i] : a.data[i]), "merge rule");
  o.check(m(1, 1, 0) == Label::CC, "2a=ET, 2b=CC does not give CC");
  if (o.pass) o.detail = "oracles reproduce truth on 10 phantoms; merge rule on all 9 code pairs; channels 4/4/5";
  return o;
}

// 9 ---------------------------------------------------------------------------
RunConfig experiment_config(const fs::path& root, const std::string& arch) {
  nlohmann::json j = {{"seed", 2024},
                      {"paths", {{"data_dir", "data"}, {"output_dir", "runs"}}},
                      {"phantom", {{"extents", {16, 16, 16}}, {"p_cc", 0.4}, {"n_train", 40}, {"n_val", 15}}},
                      {"network", {{"depth", 3}, {"base_width", 8}}},
                      {"train", {{"epochs", 60}}},
                      {"folds", 5},
                      {"architecture", arch}};
  return parse_run_config(j, root);
}

double cc_ed(const CohortSummary& s) { return (s[RegionId::CC].mean_dice + s[RegionId::ED].mean_dice) / 2.0; }

Outcome end_to_end() {
  Outcome o;
  const auto root = scratch_dir("e2e");
  Workspace cas{experiment_config(root, "cascade"), {}, Logger(nullptr)};
  Workspace base{experiment_config(root, "resenc"), {}, Logger(nullptr)};
  const auto cohort = cmd_generate(cas);
  cmd_normalize(cas);
  cmd_train(cas);
  cmd_predict(cas);
  const auto sc = cmd_evaluate(cas);
  const auto table = cmd_report_empties(cas);
  cmd_train(base);  // stage 1 of the cascade is this model; its checkpoints are reused
  cmd_predict(base);
  const auto sb = cmd_evaluate(base);

  const double c = cc_ed(sc), b = cc_ed(sb);
  o.check(c >= b - 0.05, "cascade CC+ED Dice " + fmt(c) + " < baseline " + fmt(b) + " - 0.05");

  int cc_empty = 0, ed_empty = 0, n = 0;
  for (const auto* e : cohort.split("val")) {
    cc_empty += !e->has_cc;
    ed_empty += !e->has_ed;
    ++n;
  }
  std::istringstream lines(table);
  std::string line;
  std::getline(lines, line);
  o.check(line == "region pred_empty truth_empty", "empties header '" + line + "'");
  int rows = 0;
  while (std::getline(lines, line)) {
    std::istringstream f(line);
    std::string name, pred, truth;
    f >> name >> pred >> truth;
    const auto denom = "/" + std::to_string(n);
    o.check(pred.ends_with(denom) && truth.ends_with(denom), "row '" + line + "' is not k/n");
    if (name == "CC") o.check(truth == std::to_string(cc_empty) + denom, "CC truth count " + truth);
    if (name == "ED") o.check(truth == std::to_string(ed_empty) + denom, "ED truth count " + truth);
    if (name == "CC") o.check(pred == std::to_string(sc[RegionId::CC].pred_empty_count) + denom, "CC pred count");
    ++rows;
  }
  o.check(rows == 6, "empties table has " + std::to_string(rows) + " rows");
  const auto cc_row = table.substr(table.find("\nCC ") + 1);
  o.detail = "cascade CC+ED " + fmt(c) + " vs baseline " + fmt(b) + "; " + cc_row.substr(0, cc_row.find('\n'));
  if (!o.pass) o.detail = o.detail + " (" + "cascade " + fmt(c) + ", baseline " + fmt(b) + ")";
  fs::remove_all(root);
  return o;
}

// 10 --------------------------------------------------------------------------
Outcome determinism() {
  Outcome o;
  const auto root = scratch_dir("det");
  nlohmann::json j = {{"seed", 77},
                      {"phantom", {{"extents", {16, 16, 16}}, {"n_train", 10}, {"n_val", 3}}},
                      {"network", {{"depth", 3}, {"base_width", 4}}},
                      {"train", {{"epochs", 2}}},
                      {"folds", 2},
                      {"architecture", "cascade"}};
  for (const char* sub : {"a", "b"}) {
    Workspace ws{parse_run_config(j, root / sub), {}, Logger(nullptr)};
    cmd_generate(ws);
    cmd_normalize(ws);
    cmd_train(ws);
    cmd_predict(ws);
    cmd_evaluate(ws);
    cmd_report_empties(ws);
  }
  std::size_t files = 0;
  std::set<std::string> kinds;
  for (const auto& e : fs::recursive_directory_iterator(root / "a")) {
    if (!e.is_regular_file()) continue;
    const auto rel = fs::relative(e.path(), root / "a");
    const auto other = root / "b" / rel;
    o.check(fs::exists(other) && slurp(e.path()) == slurp(other), "differs: " + rel.string());
    kinds.insert(e.path().extension().string());
    ++files;
  }
  o.check(kinds.count(".ckpt") && kinds.count(".gz") && kinds.count(".csv") && kinds.count(".txt"),
          "missing artifact kinds");
  if (o.pass) o.detail = std::to_string(files) + " artifacts byte-identical across two runs";
  fs::remove_all(root);
  return o;
}

// 11 --------------------------------------------------------------------------
Outcome kfold_partition() {
  Outcome o;
  Rng rng(1111);
  for (int t = 0; t < 200; ++t) {
    const int k = 1 + static_cast<int>(rng.below(10));
    const std::size_t n = k + rng.below(100);
    std::vector<std::string> ids;
    for (std::size_t i = 0; i < n; ++i) ids.push_back("c" + std::to_string(i));
    const auto s = kfold_split(ids, k, rng.below(1u << 30));
    std::multiset<std::string> seen;
    std::size_t lo = n, hi = 0;
    for (int f = 0; f < k; ++f) {
      const auto fold = s.fold(f);
      seen.insert(fold.begin(), fold.end());
      lo = std::min(lo, fold.size());
      hi = std::max(hi, fold.size());
    }
    o.check(seen == std::multiset<std::string>(ids.begin(), ids.end()), "not a partition");
    o.check(hi - lo <= 1, "fold size spread " + std::to_string(hi - lo));
  }
  std::vector<std::string> ids;
  for (int i = 0; i < 261; ++i) ids.push_back("c" + std::to_string(i));
  const auto s = kfold_split(ids, 5, 42);
  std::vector<std::size_t> sizes;
  for (int f = 0; f < 5; ++f) sizes.push_back(s.fold(f).size());
  o.check(sizes == std::vector<std::size_t>{53, 52, 52, 52, 52}, "261/5 sizes wrong");
  if (o.pass) o.detail = "200 random triples; 261/5 -> 53,52,52,52,52";
  return o;
}

struct Criterion {
  int id;
  const char* name;
  double limit_s;  // 0: no runtime limit
  std::function<Outcome()> run;
};

}  // namespace

int main(int argc, char** argv) {
  const std::vector<Criterion> all{
      {1, "NIfTI round-trip", 10, nifti_round_trip},
      {2, "metric oracles", 60, metric_oracles},
      {3, "empty-mask conventions", 0, empty_conventions},
      {4, "normalization", 30, normalization},
      {5, "gradient correctness", 120, gradient_check},
      {6, "optimizer/schedule", 0, optimizer_schedule},
      {7, "overfit smoke", 600, overfit_smoke},
      {8, "cascade mechanics", 0, cascade_mechanics},
      {9, "end-to-end phantom experiment", 3600, end_to_end},
      {10, "determinism", 0, determinism},
      {11, "k-fold partition", 0, kfold_partition},
  };
  std::set<int> only;
  for (int i = 1; i < argc; ++i) only.insert(std::stoi(argv[i]));

  int failed = 0;
  for (const auto& c : all) {
    if (!only.empty() && !only.count(c.id)) continue;
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = c.run();
    } catch (const std::exception& e) {
      o.pass = false;
      o.detail = std::string("exception: ") + e.what();
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    if (o.pass && c.limit_s > 0 && secs >= c.limit_s) {
      o.pass = false;
      o.detail += "; runtime " + fmt(secs) + " s over the " + fmt(c.limit_s) + " s limit";
    }
    failed += !o.pass;
    std::printf("%s  %2d %-30s %7.1f s  %s\n", o.pass ? "PASS" : "FAIL", c.id, c.name, secs, o.detail.c_str());
    std::fflush(stdout);
  }
  return failed ? 1 : 0;
}
