// aligndet command-line harness.
//
// Subcommands: verify, gradcheck, analyze, train, eval, compare, bench.
// Exit codes: 0 success, 1 a numeric check failed, 2 usage/config error.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "aligndet/box.hpp"
#include "aligndet/conv.hpp"
#include "aligndet/detector.hpp"
#include "aligndet/tensor.hpp"
#include "json.hpp"

using namespace aligndet;
using nlohmann::json;
namespace fs = std::filesystem;
using Clock = std::chrono::steady_clock;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitCheckFailed = 1;
constexpr int kExitUsage = 2;

struct GlobalOptions {
  std::string config_path;
  std::string out_dir = "out";
  std::uint64_t seed = 0;
  bool seed_set = false;
  std::string precision = "f64";
};

struct HarnessConfig {
  DetectionConfig det;
  std::vector<std::uint64_t> seeds{101, 202, 303};
  std::string checkpoint;  // eval input
};

// Strict config loader: every key must be recognized.
HarnessConfig load_config(const GlobalOptions& g) {
  HarnessConfig cfg;
  if (!g.config_path.empty()) {
    std::ifstream in(g.config_path);
    if (!in) throw std::runtime_error("cannot open config file: " + g.config_path);
    json j = json::parse(in);
    for (const auto& [key, value] : j.items()) {
      if (key == "image_size") cfg.det.image_size = value.get<int>();
      else if (key == "stride") cfg.det.stride = value.get<int>();
      else if (key == "anchor_scale") cfg.det.anchor_scale = value.get<double>();
      else if (key == "anchor_ratio") cfg.det.anchor_ratio = value.get<double>();
      else if (key == "dpm_fg") cfg.det.dpm_fg = value.get<double>();
      else if (key == "dpm_bg") cfg.det.dpm_bg = value.get<double>();
      else if (key == "adm_fg") cfg.det.adm_fg = value.get<double>();
      else if (key == "adm_bg") cfg.det.adm_bg = value.get<double>();
      else if (key == "focal_alpha") cfg.det.focal_alpha = value.get<double>();
      else if (key == "focal_gamma") cfg.det.focal_gamma = value.get<double>();
      else if (key == "reg_loss_weight") cfg.det.reg_loss_weight = value.get<double>();
      else if (key == "smooth_l1_beta") cfg.det.smooth_l1_beta = value.get<double>();
      else if (key == "nms_iou") cfg.det.nms_iou = value.get<double>();
      else if (key == "score_threshold") cfg.det.score_threshold = value.get<double>();
      else if (key == "adm_kernel") cfg.det.adm_kernel = value.get<int>();
      else if (key == "adm_variant")
        cfg.det.adm_variant = variant_from_name(value.get<std::string>());
      else if (key == "channels") cfg.det.channels = value.get<int>();
      else if (key == "learning_rate") cfg.det.learning_rate = value.get<double>();
      else if (key == "momentum") cfg.det.momentum = value.get<double>();
      else if (key == "batch_size") cfg.det.batch_size = value.get<int>();
      else if (key == "train_steps") cfg.det.train_steps = value.get<int>();
      else if (key == "num_train_scenes") cfg.det.num_train_scenes = value.get<int>();
      else if (key == "num_eval_scenes") cfg.det.num_eval_scenes = value.get<int>();
      else if (key == "seed") cfg.det.seed = value.get<std::uint64_t>();
      else if (key == "seeds") cfg.seeds = value.get<std::vector<std::uint64_t>>();
      else if (key == "checkpoint") cfg.checkpoint = value.get<std::string>();
      else throw std::runtime_error("unknown config key: " + key);
    }
  }
  if (g.seed_set) cfg.det.seed = g.seed;
  cfg.det.validate();
  return cfg;
}

json config_json(const HarnessConfig& cfg) {
  const DetectionConfig& d = cfg.det;
  return json{{"image_size", d.image_size},
              {"stride", d.stride},
              {"anchor_scale", d.anchor_scale},
              {"anchor_ratio", d.anchor_ratio},
              {"dpm_fg", d.dpm_fg},
              {"dpm_bg", d.dpm_bg},
              {"adm_fg", d.adm_fg},
              {"adm_bg", d.adm_bg},
              {"focal_alpha", d.focal_alpha},
              {"focal_gamma", d.focal_gamma},
              {"reg_loss_weight", d.reg_loss_weight},
              {"smooth_l1_beta", d.smooth_l1_beta},
              {"nms_iou", d.nms_iou},
              {"score_threshold", d.score_threshold},
              {"adm_kernel", d.adm_kernel},
              {"adm_variant", variant_name(d.adm_variant)},
              {"channels", d.channels},
              {"learning_rate", d.learning_rate},
              {"momentum", d.momentum},
              {"batch_size", d.batch_size},
              {"train_steps", d.train_steps},
              {"num_train_scenes", d.num_train_scenes},
              {"num_eval_scenes", d.num_eval_scenes},
              {"seed", d.seed},
              {"seeds", cfg.seeds}};
}

void write_json(const fs::path& path, const json& j) {
  fs::create_directories(path.parent_path());
  std::ofstream out(path);
  out << j.dump(2) << "\n";
}

void write_manifest(const GlobalOptions& g, const HarnessConfig& cfg,
                    const std::string& command, const json& results) {
  json manifest{{"command", command},
                {"precision", g.precision},
                {"config", config_json(cfg)},
                {"results", results}};
  write_json(fs::path(g.out_dir) / (command + "_manifest.json"), manifest);
}

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

template <typename T>
FeatureMapT<T> random_feature(Rng& rng, int C, int H, int W, int stride) {
  TensorT<T> t({std::size_t(C), std::size_t(H), std::size_t(W)});
  rng.fill_uniform(t, -1.0, 1.0);
  return FeatureMapT<T>(std::move(t), stride);
}

template <typename T>
ConvSpecT<T> random_spec(Rng& rng, int kh, int kw, int cin, int cout) {
  ConvSpecT<T> spec(kh, kw, cin, cout);
  rng.fill_uniform(spec.weights, -1.0, 1.0);
  rng.fill_uniform(spec.bias, -1.0, 1.0);
  return spec;
}

// --- verify -----------------------------------------------------------

// conv vs FC-over-RoIAlign and roiconv identity, in the selected dtype.
template <typename T>
json verify_impl(std::uint64_t seed, int trials, double equiv_tol,
                 double identity_tol) {
  Rng rng(seed + 1);
  const int kernels[] = {1, 2, 3, 5};
  double worst_equiv = 0.0;
  for (int trial = 0; trial < trials; ++trial) {
    const int kh = kernels[rng.uniform_int(0, 3)];
    const int kw = kernels[rng.uniform_int(0, 3)];
    const int C = int(rng.uniform_int(1, 3));
    const int Cout = int(rng.uniform_int(1, 3));
    const int H = int(rng.uniform_int(4, 8));
    const int W = int(rng.uniform_int(4, 8));
    const int S = 1 << int(rng.uniform_int(0, 5));
    const FeatureMapT<T> f = random_feature<T>(rng, C, H, W, S);
    const ConvSpecT<T> spec = random_spec<T>(rng, kh, kw, C, Cout);
    const TensorT<T> conv = conv_forward(f, spec);
    for (int X = 0; X < H; ++X) {
      for (int Y = 0; Y < W; ++Y) {
        const Box roi = implicit_roi(X, Y, spec, S);
        const TensorT<T> pooled = roialign(f, roi, kh, kw);
        for (int co = 0; co < Cout; ++co) {
          double acc = double(spec.bias[std::size_t(co)]);
          for (std::size_t k = 0; k < pooled.numel(); ++k)
            acc += double(spec.weights.at2(std::size_t(co), k)) * double(pooled[k]);
          worst_equiv = std::max(
              worst_equiv, std::abs(acc - double(conv.at3(std::size_t(co),
                                                          std::size_t(X),
                                                          std::size_t(Y)))));
        }
      }
    }
  }

  double worst_identity = 0.0;
  for (int trial = 0; trial < std::max(1, trials / 10); ++trial) {
    const int kh = int(rng.uniform_int(1, 4));
    const int kw = int(rng.uniform_int(1, 4));
    const int C = int(rng.uniform_int(1, 3));
    const int H = int(rng.uniform_int(4, 8));
    const int W = int(rng.uniform_int(4, 8));
    const FeatureMapT<T> f = random_feature<T>(rng, C, H, W, 16);
    const ConvSpecT<T> spec = random_spec<T>(rng, kh, kw, C, 2);
    std::vector<Box> anchors;
    for (int X = 0; X < H; ++X)
      for (int Y = 0; Y < W; ++Y) anchors.push_back(implicit_roi(X, Y, spec, 16));
    const OffsetFieldT<T> off = roiconv_offsets(anchors, spec, H, W, 16);
    const TensorT<T> a = deform_conv_forward(f, spec, off);
    const TensorT<T> b = conv_forward(f, spec);
    for (std::size_t i = 0; i < a.numel(); ++i)
      worst_identity =
          std::max(worst_identity, std::abs(double(a[i]) - double(b[i])));
  }

  const bool pass = worst_equiv <= equiv_tol && worst_identity <= identity_tol;
  return json{{"trials", trials},
              {"max_equivalence_gap", worst_equiv},
              {"equivalence_tolerance", equiv_tol},
              {"max_identity_gap", worst_identity},
              {"identity_tolerance", identity_tol},
              {"pass", pass}};
}

int cmd_verify(const GlobalOptions& g, const HarnessConfig& cfg, int trials) {
  // f32 keeps the same structure at looser tolerances
  const json r = g.precision == "f32"
                     ? verify_impl<float>(cfg.det.seed, trials, 1e-4, 1e-5)
                     : verify_impl<double>(cfg.det.seed, trials, 1e-10, 1e-12);
  write_manifest(g, cfg, "verify", r);
  std::cout << r.dump(2) << "\n";
  return r["pass"].get<bool>() ? kExitOk : kExitCheckFailed;
}

// --- gradcheck --------------------------------------------------------

int cmd_gradcheck(const GlobalOptions& g, const HarnessConfig& cfg) {
  if (g.precision != "f64") {
    std::cerr << "gradcheck: only f64 is supported\n";
    return kExitUsage;
  }
  Rng rng(cfg.det.seed + 2);
  double worst_conv = 0.0, worst_deform = 0.0, worst_detector = 0.0;

  {
    const FeatureMap f = random_feature<double>(rng, 2, 5, 5, 1);
    const ConvSpec spec = random_spec<double>(rng, 3, 3, 2, 2);
    Tensor go({2, 5, 5});
    rng.fill_uniform(go, -1.0, 1.0);
    const ConvGrads grads = conv_backward(f, spec, go);
    auto loss = [&](const FeatureMap& ff, const ConvSpec& ss) {
      const Tensor out = conv_forward(ff, ss);
      double acc = 0.0;
      for (std::size_t i = 0; i < out.numel(); ++i) acc += out[i] * go[i];
      return acc;
    };
    const double eps = 1e-5;
    for (int probe = 0; probe < 20; ++probe) {
      FeatureMap fp = f, fm = f;
      const std::size_t i =
          std::size_t(rng.uniform_int(0, std::int64_t(f.tensor.numel()) - 1));
      fp.tensor[i] += eps;
      fm.tensor[i] -= eps;
      const double fd = (loss(fp, spec) - loss(fm, spec)) / (2 * eps);
      worst_conv = std::max(worst_conv, std::abs(fd - grads.grad_input[i]) /
                                            std::max(1.0, std::abs(fd)));
    }
  }

  {
    const FeatureMap f = random_feature<double>(rng, 2, 5, 5, 1);
    const ConvSpec spec = random_spec<double>(rng, 3, 3, 2, 2);
    Tensor ot({18, 5, 5});
    rng.fill_uniform(ot, 0.1, 0.45);
    const OffsetField off(ot);
    Tensor go({2, 5, 5});
    rng.fill_uniform(go, -1.0, 1.0);
    const DeformConvGrads grads = deform_conv_backward(f, spec, off, go, true);
    auto loss = [&](const OffsetField& oo) {
      const Tensor out = deform_conv_forward(f, spec, oo);
      double acc = 0.0;
      for (std::size_t i = 0; i < out.numel(); ++i) acc += out[i] * go[i];
      return acc;
    };
    const double eps = 1e-6;
    for (int probe = 0; probe < 20; ++probe) {
      const std::size_t i =
          std::size_t(rng.uniform_int(0, std::int64_t(ot.numel()) - 1));
      OffsetField op = off, om = off;
      op.tensor[i] += eps;
      om.tensor[i] -= eps;
      const double fd = (loss(op) - loss(om)) / (2 * eps);
      worst_deform =
          std::max(worst_deform, std::abs(fd - grads.grad_offsets.tensor[i]) /
                                     std::max(1.0, std::abs(fd)));
    }
  }

  for (AdmVariant v : {AdmVariant::kVanillaConv, AdmVariant::kLearnedDeform,
                       AdmVariant::kRoiConv}) {
    DetectionConfig dc = cfg.det;
    dc.image_size = 32;
    dc.channels = 4;
    dc.adm_variant = v;
    ModelState model = init_model(dc);
    Rng srng(cfg.det.seed + 3);
    const SyntheticScene scene = generate_scene(srng, dc);
    const ForwardResult fr = forward(model, scene, dc);
    const std::vector<Box> frozen = fr.refined_anchors;
    compute_loss_and_grads(model, scene, dc, &frozen);
    auto layers = model.layers();
    Rng pick(cfg.det.seed + 4);
    const double eps = 1e-5;
    int checked = 0;
    while (checked < 10) {
      auto* layer =
          layers[std::size_t(pick.uniform_int(0, std::int64_t(layers.size()) - 1))];
      if (v != AdmVariant::kLearnedDeform && layer == &model.adm_offset_gen) continue;
      const std::size_t i = std::size_t(
          pick.uniform_int(0, std::int64_t(layer->spec.weights.numel()) - 1));
      const double analytic = layer->w_grad[i];
      const double saved = layer->spec.weights[i];
      layer->spec.weights[i] = saved + eps;
      const double lp = compute_loss(model, scene, dc, &frozen).total();
      layer->spec.weights[i] = saved - eps;
      const double lm = compute_loss(model, scene, dc, &frozen).total();
      layer->spec.weights[i] = saved;
      const double fd = (lp - lm) / (2 * eps);
      worst_detector = std::max(
          worst_detector, std::abs(fd - analytic) / std::max(1.0, std::abs(fd)));
      ++checked;
    }
  }

  const bool pass =
      worst_conv <= 1e-6 && worst_deform <= 1e-6 && worst_detector <= 1e-5;
  const json r{{"conv_max_rel_err", worst_conv},
               {"deform_max_rel_err", worst_deform},
               {"detector_max_rel_err", worst_detector},
               {"operator_tolerance", 1e-6},
               {"detector_tolerance", 1e-5},
               {"pass", pass}};
  write_manifest(g, cfg, "gradcheck", r);
  std::cout << r.dump(2) << "\n";
  return pass ? kExitOk : kExitCheckFailed;
}

// --- analyze ----------------------------------------------------------

int cmd_analyze(const GlobalOptions& g, const HarnessConfig& cfg) {
  json rows = json::array();
  fs::create_directories(g.out_dir);
  std::ofstream csv(fs::path(g.out_dir) / "implicit_rois.csv");
  csv << "kernel,stride,x1,y1,x2,y2,side_h,side_w\n";
  for (int k : {1, 3, 5, 7}) {
    for (int S : {8, 16, 32, 64, 128}) {
      const Box r = implicit_roi(0, 0, k, k, S);
      rows.push_back(json{{"kernel", k},
                          {"stride", S},
                          {"box", {r.x1, r.y1, r.x2, r.y2}},
                          {"side_h", r.height()},
                          {"side_w", r.width()}});
      csv << k << "," << S << "," << r.x1 << "," << r.y1 << "," << r.x2 << ","
          << r.y2 << "," << r.height() << "," << r.width() << "\n";
    }
  }
  const json r{{"rows", rows}, {"pass", true}};
  write_manifest(g, cfg, "analyze", r);
  std::cout << r.dump(2) << "\n";
  return kExitOk;
}

// --- train / eval -----------------------------------------------------

int cmd_train(const GlobalOptions& g, const HarnessConfig& cfg) {
  if (g.precision != "f64") {
    std::cerr << "train: only f64 is supported\n";
    return kExitUsage;
  }
  const TrainResult tr = train(cfg.det);
  fs::create_directories(g.out_dir);
  const std::string ckpt = (fs::path(g.out_dir) / "checkpoint").string();
  save_checkpoint(ckpt, tr.model, cfg.det);
  std::ofstream csv(fs::path(g.out_dir) / "loss_curve.csv");
  csv << "step,loss\n";
  for (std::size_t i = 0; i < tr.loss_curve.size(); ++i)
    csv << i << "," << tr.loss_curve[i] << "\n";
  const json r{{"checkpoint", ckpt},
               {"final_loss", tr.loss_curve.back()},
               {"steps", tr.loss_curve.size()},
               {"pass", true}};
  write_manifest(g, cfg, "train", r);
  std::cout << r.dump(2) << "\n";
  return kExitOk;
}

int cmd_eval(const GlobalOptions& g, const HarnessConfig& cfg) {
  if (cfg.checkpoint.empty()) {
    std::cerr << "eval: config key \"checkpoint\" is required\n";
    return kExitUsage;
  }
  DetectionConfig dc;
  ModelState model = load_checkpoint(cfg.checkpoint, dc);
  dc.num_eval_scenes = cfg.det.num_eval_scenes;
  const std::vector<SyntheticScene> scenes =
      generate_dataset(424242, dc.num_eval_scenes, dc);
  const ApMetrics m = evaluate(model, scenes, dc);
  const json r{{"checkpoint", cfg.checkpoint},
               {"num_eval_scenes", dc.num_eval_scenes},
               {"ap50", m.ap50},
               {"ap75", m.ap75},
               {"map", m.map},
               {"pass", true}};
  write_manifest(g, cfg, "eval", r);
  std::cout << r.dump(2) << "\n";
  return kExitOk;
}

// --- compare ----------------------------------------------------------

int cmd_compare(const GlobalOptions& g, const HarnessConfig& cfg) {
  if (g.precision != "f64") {
    std::cerr << "compare: only f64 is supported\n";
    return kExitUsage;
  }
  const std::vector<VariantReport> reports = compare_variants(cfg.det, cfg.seeds);
  json out = json::array();
  fs::create_directories(g.out_dir);
  std::ofstream csv(fs::path(g.out_dir) / "alignment_histogram.csv");
  csv << "variant,bin_lo,bin_hi,count\n";
  double roiconv_map = 0.0, vanilla_map = 0.0;
  for (const auto& rep : reports) {
    json bins = json::array();
    for (std::size_t b = 0; b < rep.alignment.counts.size(); ++b) {
      const double lo = double(b) * rep.alignment.bin_width;
      const double hi = std::min(1.0, lo + rep.alignment.bin_width);
      bins.push_back(rep.alignment.counts[b]);
      csv << variant_name(rep.variant) << "," << lo << "," << hi << ","
          << rep.alignment.counts[b] << "\n";
    }
    out.push_back(json{{"variant", variant_name(rep.variant)},
                       {"maps", rep.maps},
                       {"median_map", rep.median_map},
                       {"mean_alignment_iou", rep.mean_alignment_iou},
                       {"histogram_bin_width", rep.alignment.bin_width},
                       {"histogram_counts", bins}});
    if (rep.variant == AdmVariant::kRoiConv) roiconv_map = rep.median_map;
    if (rep.variant == AdmVariant::kVanillaConv) vanilla_map = rep.median_map;
  }
  const double margin = roiconv_map - vanilla_map;
  const bool pass = margin >= 0.02;
  const json r{{"variants", out}, {"roiconv_margin", margin}, {"pass", pass}};
  write_manifest(g, cfg, "compare", r);
  std::cout << r.dump(2) << "\n";
  return pass ? kExitOk : kExitCheckFailed;
}

// --- bench ------------------------------------------------------------

template <typename T>
json bench_impl(std::uint64_t seed, int iters) {
  Rng rng(seed + 6);
  json rows = json::array();
  for (int k : {3, 5, 7}) {
    const int C = 256, H = 8, W = 8, S = 16;
    const FeatureMapT<T> f = random_feature<T>(rng, C, H, W, S);
    const ConvSpecT<T> spec = random_spec<T>(rng, k, k, C, C);
    TensorT<T> ot({std::size_t(2 * k * k), std::size_t(H), std::size_t(W)});
    rng.fill_uniform(ot, -0.4, 0.4);
    const OffsetFieldT<T> learned(ot);
    const AnchorGrid grid = make_anchor_grid(H, W, S, 4.0, 1.0);

    auto time_median = [&](auto&& fn) {
      for (int i = 0; i < 10; ++i) fn();
      std::vector<double> samples;
      samples.reserve(std::size_t(iters));
      for (int i = 0; i < iters; ++i) {
        const auto t0 = Clock::now();
        fn();
        samples.push_back(seconds_since(t0));
      }
      std::nth_element(samples.begin(), samples.begin() + iters / 2, samples.end());
      return samples[std::size_t(iters / 2)];
    };

    volatile double sink = 0.0;
    const double t_conv = time_median([&] {
      const TensorT<T> out = conv_forward(f, spec);
      sink = sink + double(out[0]);
    });
    const double t_deform = time_median([&] {
      const TensorT<T> out = deform_conv_forward(f, spec, learned);
      sink = sink + double(out[0]);
    });
    const double t_roiconv = time_median([&] {
      const OffsetFieldT<T> off = roiconv_offsets(grid.boxes, spec, H, W, S);
      const TensorT<T> out = deform_conv_forward(f, spec, off);
      sink = sink + double(out[0]);
    });
    rows.push_back(json{{"kernel", k},
                        {"median_conv_s", t_conv},
                        {"median_deform_s", t_deform},
                        {"median_roiconv_s", t_roiconv},
                        {"roiconv_over_deform", t_roiconv / t_deform}});
  }
  return rows;
}

int cmd_bench(const GlobalOptions& g, const HarnessConfig& cfg, int iters) {
  if (iters < 100) {
    std::cerr << "bench: at least 100 iterations are required\n";
    return kExitUsage;
  }
  const json rows = g.precision == "f32" ? bench_impl<float>(cfg.det.seed, iters)
                                         : bench_impl<double>(cfg.det.seed, iters);
  fs::create_directories(g.out_dir);
  std::ofstream csv(fs::path(g.out_dir) / "bench.csv");
  csv << "kernel,median_conv_s,median_deform_s,median_roiconv_s,"
         "roiconv_over_deform\n";
  for (const auto& row : rows)
    csv << row["kernel"] << "," << row["median_conv_s"].get<double>() << ","
        << row["median_deform_s"].get<double>() << ","
        << row["median_roiconv_s"].get<double>() << ","
        << row["roiconv_over_deform"].get<double>() << "\n";
  const json r{{"iterations", iters}, {"rows", rows}, {"pass", true}};
  write_manifest(g, cfg, "bench", r);
  std::cout << r.dump(2) << "\n";
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"conv/RoIAlign equivalence kernels, the roiconv operator, and a "
               "toy two-stage detector"};
  app.require_subcommand(1);
  app.fallthrough();  // global options may follow the subcommand

  GlobalOptions g;
  app.add_option("--config", g.config_path, "JSON config file")
      ->check(CLI::ExistingFile);
  app.add_option("--out", g.out_dir, "output directory");
  auto* seed_opt = app.add_option("--seed", g.seed, "override the config seed");
  app.add_option("--precision", g.precision, "arithmetic dtype")
      ->check(CLI::IsMember({"f32", "f64"}));

  int verify_trials = 100;
  int bench_iters = 100;
  auto* verify = app.add_subcommand("verify", "conv/roialign equivalence checks");
  verify->add_option("--trials", verify_trials, "random configurations to test");
  auto* gradcheck =
      app.add_subcommand("gradcheck", "finite-difference gradient checks");
  auto* analyze = app.add_subcommand("analyze", "implicit-RoI coverage table");
  auto* train_cmd = app.add_subcommand("train", "train the toy detector");
  auto* eval_cmd = app.add_subcommand("eval", "evaluate a saved checkpoint");
  auto* compare = app.add_subcommand("compare", "train and compare head variants");
  auto* bench = app.add_subcommand("bench", "operator latency medians");
  bench->add_option("--iters", bench_iters, "timed iterations per operator");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitUsage;
  }
  g.seed_set = seed_opt->count() > 0;

  try {
    const HarnessConfig cfg = load_config(g);
    if (verify->parsed()) return cmd_verify(g, cfg, verify_trials);
    if (gradcheck->parsed()) return cmd_gradcheck(g, cfg);
    if (analyze->parsed()) return cmd_analyze(g, cfg);
    if (train_cmd->parsed()) return cmd_train(g, cfg);
    if (eval_cmd->parsed()) return cmd_eval(g, cfg);
    if (compare->parsed()) return cmd_compare(g, cfg);
    if (bench->parsed()) return cmd_bench(g, cfg, bench_iters);
  } catch (const json::exception& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitUsage;
  }
  return kExitUsage;
}
