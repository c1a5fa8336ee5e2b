#include "aligndet/detector.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <stdexcept>

#include "aligndet/rten.hpp"
#include "json.hpp"

namespace aligndet {

namespace {

constexpr double kClsPriorBias = -4.59511985013459;  // -log((1-0.01)/0.01)
constexpr std::uint64_t kEvalDataSeed = 424242;
constexpr std::uint64_t kOffsetGenSeedSalt = 0x0FF5E76E5ULL;

bool finite(double v) { return std::isfinite(v); }

}  // namespace

const char* variant_name(AdmVariant v) {
  switch (v) {
    case AdmVariant::kVanillaConv: return "vanilla_conv";
    case AdmVariant::kLearnedDeform: return "learned_deform";
    case AdmVariant::kRoiConv: return "roiconv";
  }
  return "?";
}

AdmVariant variant_from_name(const std::string& name) {
  if (name == "vanilla_conv") return AdmVariant::kVanillaConv;
  if (name == "learned_deform") return AdmVariant::kLearnedDeform;
  if (name == "roiconv") return AdmVariant::kRoiConv;
  throw std::invalid_argument("unknown adm variant: " + name);
}

void DetectionConfig::validate() const {
  if (image_size <= 0 || stride <= 0 || image_size % stride != 0)
    throw std::invalid_argument("config: image_size must be a positive multiple of stride");
  if (dpm_fg < dpm_bg || adm_fg < adm_bg)
    throw std::invalid_argument("config: fg threshold below bg threshold");
  if (!(focal_alpha > 0.0 && focal_alpha < 1.0))
    throw std::invalid_argument("config: focal alpha must be in (0,1)");
  if (focal_gamma < 0.0) throw std::invalid_argument("config: focal gamma must be >= 0");
  if (adm_kernel <= 0 || channels <= 0 || num_classes <= 0)
    throw std::invalid_argument("config: non-positive model dimension");
  if (batch_size <= 0)
    throw std::invalid_argument("config: batch_size must be positive");
}

int aspect_class(double h, double w) {
  const double r = h / w;
  if (r > 1.5) return kClassTall;
  if (r < 1.0 / 1.5) return kClassWide;
  return kClassSquare;
}

SyntheticScene generate_scene(Rng& rng, const DetectionConfig& cfg) {
  const int N = cfg.image_size;
  SyntheticScene scene;
  scene.image = Tensor({1, std::size_t(N), std::size_t(N)});
  for (std::size_t i = 0; i < scene.image.numel(); ++i)
    scene.image[i] = rng.uniform(0.0, 0.2);

  const int min_ext = 8;
  const int max_ext = std::min(48, N);
  const int n_objects = int(rng.uniform_int(1, 3));
  for (int o = 0; o < n_objects; ++o) {
    bool placed = false;
    for (int attempt = 0; attempt < 30 && !placed; ++attempt) {
      const int eh = int(rng.uniform_int(min_ext, max_ext));
      const int ew = int(rng.uniform_int(min_ext, max_ext));
      const int r0 = int(rng.uniform_int(0, N - eh));
      const int c0 = int(rng.uniform_int(0, N - ew));
      const Box b{double(r0), double(c0), double(r0 + eh), double(c0 + ew)};
      bool ok = true;
      for (const auto& gt : scene.gts)
        if (iou(b, gt.box) > 0.3) {
          ok = false;
          break;
        }
      if (!ok) continue;
      const double intensity = rng.uniform(0.4, 1.0);
      for (int r = r0; r < r0 + eh; ++r)
        for (int c = c0; c < c0 + ew; ++c)
          scene.image.at3(0, std::size_t(r), std::size_t(c)) = intensity;
      scene.gts.push_back({b, aspect_class(eh, ew)});
      placed = true;
    }
    // give up on this object if the canvas is too crowded
  }
  return scene;
}

std::vector<SyntheticScene> generate_dataset(std::uint64_t seed, int count,
                                             const DetectionConfig& cfg) {
  Rng rng(seed);
  std::vector<SyntheticScene> scenes;
  scenes.reserve(std::size_t(count));
  for (int i = 0; i < count; ++i) scenes.push_back(generate_scene(rng, cfg));
  return scenes;
}

LossWithGrad focal_loss(const Tensor& logits, const std::vector<AnchorLabel>& labels,
                        const std::vector<int>& positive_class, double alpha,
                        double gamma) {
  if (logits.rank() != 2)
    throw std::invalid_argument("focal_loss: logits must be [K x A]");
  const std::size_t K = logits.dim(0), A = logits.dim(1);
  if (labels.size() != A || positive_class.size() != A)
    throw std::invalid_argument("focal_loss: label count mismatch");

  int npos = 0;
  for (auto l : labels)
    if (l == AnchorLabel::kPositive) ++npos;
  const double norm = double(std::max(1, npos));

  LossWithGrad out;
  out.grad = Tensor(logits.shape());
  constexpr double kEps = 1e-12;
  for (std::size_t a = 0; a < A; ++a) {
    if (labels[a] == AnchorLabel::kIgnore) continue;
    for (std::size_t k = 0; k < K; ++k) {
      const double z = logits.at2(k, a);
      if (!finite(z)) throw std::domain_error("focal_loss: non-finite logit");
      const bool target = labels[a] == AnchorLabel::kPositive &&
                          positive_class[a] == int(k);
      double p = 1.0 / (1.0 + std::exp(-z));
      p = std::clamp(p, kEps, 1.0 - kEps);
      double term, dz;
      if (target) {
        term = -alpha * std::pow(1.0 - p, gamma) * std::log(p);
        dz = alpha * std::pow(1.0 - p, gamma) *
             (gamma * p * std::log(p) - (1.0 - p));
      } else {
        term = -(1.0 - alpha) * std::pow(p, gamma) * std::log(1.0 - p);
        dz = (1.0 - alpha) * std::pow(p, gamma) *
             (p - gamma * (1.0 - p) * std::log(1.0 - p));
      }
      out.loss += term / norm;
      out.grad.at2(k, a) = dz / norm;
    }
  }
  return out;
}

LossWithGrad smooth_l1(const Tensor& pred, const Tensor& target, double beta) {
  if (pred.shape() != target.shape())
    throw std::invalid_argument("smooth_l1: shape mismatch");
  LossWithGrad out;
  out.grad = Tensor(pred.shape());
  const std::size_t n = pred.numel();
  if (n == 0) return out;
  for (std::size_t i = 0; i < n; ++i) {
    const double d = pred[i] - target[i];
    if (std::abs(d) < beta) {
      out.loss += 0.5 * d * d / beta;
      out.grad[i] = d / beta;
    } else {
      out.loss += std::abs(d) - 0.5 * beta;
      out.grad[i] = d > 0 ? 1.0 : -1.0;
    }
  }
  out.loss /= double(n);
  for (std::size_t i = 0; i < n; ++i) out.grad[i] /= double(n);
  return out;
}

ConvLayer::ConvLayer(int kh, int kw, int cin, int cout, bool relu_after, bool down)
    : spec(kh, kw, cin, cout),
      relu(relu_after),
      downsample(down),
      w_momentum(spec.weights.shape()),
      b_momentum(spec.bias.shape()),
      w_grad(spec.weights.shape()),
      b_grad(spec.bias.shape()) {}

Tensor ConvLayer::forward(const FeatureMap& in) {
  cached_input = in;
  cached_preact = conv_forward(in, spec);
  Tensor act = cached_preact;
  if (relu) act = elementwise(UnaryOp::kRelu, act);
  if (!downsample) return act;
  const std::size_t C = act.dim(0), H = act.dim(1), W = act.dim(2);
  Tensor out({C, (H + 1) / 2, (W + 1) / 2});
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t r = 0; r < (H + 1) / 2; ++r)
      for (std::size_t col = 0; col < (W + 1) / 2; ++col)
        out.at3(c, r, col) = act.at3(c, 2 * r, 2 * col);
  return out;
}

Tensor ConvLayer::backward(const Tensor& grad_out) {
  Tensor g = grad_out;
  if (downsample) {
    Tensor up(cached_preact.shape());
    const std::size_t C = g.dim(0), Hh = g.dim(1), Wh = g.dim(2);
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t r = 0; r < Hh; ++r)
        for (std::size_t col = 0; col < Wh; ++col)
          up.at3(c, 2 * r, 2 * col) = g.at3(c, r, col);
    g = up;
  }
  if (relu)
    for (std::size_t i = 0; i < g.numel(); ++i)
      if (cached_preact[i] <= 0.0) g[i] = 0.0;
  ConvGrads cg = conv_backward(cached_input, spec, g);
  for (std::size_t i = 0; i < w_grad.numel(); ++i) w_grad[i] += cg.grad_weights[i];
  for (std::size_t i = 0; i < b_grad.numel(); ++i) b_grad[i] += cg.grad_bias[i];
  return cg.grad_input;
}

void ConvLayer::zero_grad() {
  w_grad.fill(0.0);
  b_grad.fill(0.0);
}

void ConvLayer::sgd_step(double lr, double momentum) {
  for (std::size_t i = 0; i < spec.weights.numel(); ++i) {
    w_momentum[i] = momentum * w_momentum[i] + w_grad[i];
    spec.weights[i] -= lr * w_momentum[i];
  }
  for (std::size_t i = 0; i < spec.bias.numel(); ++i) {
    b_momentum[i] = momentum * b_momentum[i] + b_grad[i];
    spec.bias[i] -= lr * b_momentum[i];
  }
}

std::size_t ConvLayer::param_count() const {
  return spec.weights.numel() + spec.bias.numel();
}

std::vector<ConvLayer*> ModelState::layers() {
  std::vector<ConvLayer*> out;
  for (auto& l : backbone) out.push_back(&l);
  for (auto& l : dpm_trunk) out.push_back(&l);
  out.push_back(&dpm_cls);
  out.push_back(&dpm_reg);
  out.push_back(&adm_align);
  out.push_back(&adm_offset_gen);
  for (auto& l : adm_head) out.push_back(&l);
  out.push_back(&adm_cls);
  out.push_back(&adm_reg);
  return out;
}

std::vector<const ConvLayer*> ModelState::layers() const {
  auto mut = const_cast<ModelState*>(this)->layers();
  return {mut.begin(), mut.end()};
}

bool ModelState::all_finite() const {
  for (const ConvLayer* l : layers()) {
    for (double v : l->spec.weights.values())
      if (!finite(v)) return false;
    for (double v : l->spec.bias.values())
      if (!finite(v)) return false;
  }
  return true;
}

namespace {

void he_init(Rng& rng, ConvSpec& spec) {
  const double fan_in = double(spec.weights.dim(1));
  rng.fill_normal(spec.weights, 0.0, std::sqrt(2.0 / fan_in));
  spec.bias.fill(0.0);
}

void tap_init(Rng& rng, ConvSpec& spec, double bias_value = 0.0) {
  rng.fill_normal(spec.weights, 0.0, 0.01);
  spec.bias.fill(bias_value);
}

}  // namespace

ModelState init_model(const DetectionConfig& cfg) {
  cfg.validate();
  const int C = cfg.channels;
  const int K = cfg.num_classes;
  const int k = cfg.adm_kernel;
  ModelState m;
  m.backbone = {ConvLayer(3, 3, 1, C, true, true), ConvLayer(3, 3, C, C, true, true),
                ConvLayer(3, 3, C, C, true, true)};
  m.dpm_trunk = {ConvLayer(3, 3, C, C, true), ConvLayer(3, 3, C, C, true)};
  m.dpm_cls = ConvLayer(1, 1, C, 1, false);
  m.dpm_reg = ConvLayer(1, 1, C, 4, false);
  m.adm_align = ConvLayer(k, k, C, C, true);
  m.adm_offset_gen = ConvLayer(1, 1, C, 2 * k * k, false);
  m.adm_head = {ConvLayer(3, 3, C, C, true)};
  m.adm_cls = ConvLayer(1, 1, C, K, false);
  m.adm_reg = ConvLayer(1, 1, C, 4, false);

  // Shared parameters come from one stream so every variant starts from
  // bit-identical weights; the offset generator (used only by the
  // learned-deform arm) draws from its own stream.
  Rng rng(cfg.seed);
  for (auto& l : m.backbone) he_init(rng, l.spec);
  for (auto& l : m.dpm_trunk) he_init(rng, l.spec);
  tap_init(rng, m.dpm_cls.spec, kClsPriorBias);
  tap_init(rng, m.dpm_reg.spec);
  he_init(rng, m.adm_align.spec);
  for (auto& l : m.adm_head) he_init(rng, l.spec);
  tap_init(rng, m.adm_cls.spec, kClsPriorBias);
  tap_init(rng, m.adm_reg.spec);

  Rng off_rng(cfg.seed ^ kOffsetGenSeedSalt);
  tap_init(off_rng, m.adm_offset_gen.spec);
  return m;
}

namespace {

// Clip regression deltas before decoding so an untrained head cannot blow
// boxes up to the whole image (which would also make every roiconv
// sampling region identical).
constexpr double kDeltaClip = 1.0;

std::array<double, 4> clip_deltas(const std::array<double, 4>& d) {
  std::array<double, 4> out;
  for (int i = 0; i < 4; ++i)
    out[i] = std::clamp(d[i], -kDeltaClip, kDeltaClip);
  return out;
}

std::vector<Box> decode_refined_anchors(const AnchorGrid& grid, const Tensor& deltas,
                                        const DetectionConfig& cfg) {
  const int h = grid.feat_h, w = grid.feat_w;
  std::vector<Box> refined;
  refined.reserve(std::size_t(h) * w);
  for (int X = 0; X < h; ++X) {
    for (int Y = 0; Y < w; ++Y) {
      const std::array<double, 4> d{deltas.at3(0, std::size_t(X), std::size_t(Y)),
                                    deltas.at3(1, std::size_t(X), std::size_t(Y)),
                                    deltas.at3(2, std::size_t(X), std::size_t(Y)),
                                    deltas.at3(3, std::size_t(X), std::size_t(Y))};
      refined.push_back(clamp_box(decode_box(grid.at(X, Y), clip_deltas(d)),
                                  double(cfg.image_size), double(cfg.image_size)));
    }
  }
  return refined;
}

}  // namespace

ForwardResult forward(ModelState& model, const SyntheticScene& scene,
                      const DetectionConfig& cfg,
                      const std::vector<Box>* frozen_anchors) {
  cfg.validate();
  ForwardResult r;
  int stride = 1;
  FeatureMap fm(scene.image, 1);
  for (auto& l : model.backbone) {
    Tensor t = l.forward(fm);
    stride *= 2;
    fm = FeatureMap(std::move(t), stride);
  }
  if (stride != cfg.stride)
    throw std::logic_error("forward: backbone stride does not match config");
  r.feature = fm;

  FeatureMap t = fm;
  for (auto& l : model.dpm_trunk) t = FeatureMap(l.forward(t), stride);
  r.dpm_logits = model.dpm_cls.forward(t);
  r.dpm_deltas = model.dpm_reg.forward(t);

  const int h = cfg.feat_size(), w = cfg.feat_size();
  const AnchorGrid grid =
      make_anchor_grid(h, w, cfg.stride, cfg.anchor_scale, cfg.anchor_ratio);
  r.refined_anchors = frozen_anchors
                          ? *frozen_anchors
                          : decode_refined_anchors(grid, r.dpm_deltas, cfg);

  Tensor aligned;
  switch (cfg.adm_variant) {
    case AdmVariant::kVanillaConv:
      aligned = model.adm_align.forward(r.feature);
      break;
    case AdmVariant::kRoiConv: {
      r.adm_offsets = roiconv_offsets(r.refined_anchors, model.adm_align.spec, h, w,
                                      cfg.stride);
      // deform path bypasses ConvLayer::forward; cache by hand
      model.adm_align.cached_input = r.feature;
      model.adm_align.cached_preact =
          deform_conv_forward(r.feature, model.adm_align.spec, r.adm_offsets);
      aligned = elementwise(UnaryOp::kRelu, model.adm_align.cached_preact);
      break;
    }
    case AdmVariant::kLearnedDeform: {
      r.adm_offsets = OffsetField(model.adm_offset_gen.forward(r.feature));
      model.adm_align.cached_input = r.feature;
      model.adm_align.cached_preact =
          deform_conv_forward(r.feature, model.adm_align.spec, r.adm_offsets);
      aligned = elementwise(UnaryOp::kRelu, model.adm_align.cached_preact);
      break;
    }
  }

  FeatureMap ah(std::move(aligned), stride);
  for (auto& l : model.adm_head) ah = FeatureMap(l.forward(ah), stride);
  r.adm_logits = model.adm_cls.forward(ah);
  r.adm_deltas = model.adm_reg.forward(ah);
  return r;
}

namespace {

struct HeadLoss {
  double focal = 0.0;
  double reg = 0.0;
  Tensor grad_logits;  // [K x h x w]
  Tensor grad_deltas;  // [4 x h x w]
};

// Shared loss arithmetic for one head: focal over all anchors plus
// smooth-L1 over positives, with gradients in prediction layout.
HeadLoss head_loss(const Tensor& logits3, const Tensor& deltas3,
                   const std::vector<Box>& reference_anchors,
                   const std::vector<GtBox>& gts, double fg, double bg,
                   bool classwise, const DetectionConfig& cfg) {
  const std::size_t K = logits3.dim(0);
  const std::size_t A = logits3.dim(1) * logits3.dim(2);

  std::vector<Box> gt_boxes;
  gt_boxes.reserve(gts.size());
  for (const auto& g : gts) gt_boxes.push_back(g.box);
  const LabelAssignment assign = assign_labels(reference_anchors, gt_boxes, fg, bg);

  std::vector<int> pos_class(A, -1);
  for (std::size_t a = 0; a < A; ++a)
    if (assign.labels[a] == AnchorLabel::kPositive)
      pos_class[a] = classwise ? gts[std::size_t(assign.matched_gt[a])].cls : 0;

  const Tensor logits2 = logits3.reshaped({K, A});
  const LossWithGrad fl =
      focal_loss(logits2, assign.labels, pos_class, cfg.focal_alpha, cfg.focal_gamma);

  HeadLoss out;
  out.focal = fl.loss;
  out.grad_logits = fl.grad.reshaped(logits3.shape());
  out.grad_deltas = Tensor(deltas3.shape());

  std::vector<std::size_t> positives;
  for (std::size_t a = 0; a < A; ++a)
    if (assign.labels[a] == AnchorLabel::kPositive) positives.push_back(a);
  if (!positives.empty()) {
    Tensor pred({positives.size(), 4});
    Tensor target({positives.size(), 4});
    for (std::size_t p = 0; p < positives.size(); ++p) {
      const std::size_t a = positives[p];
      const auto t =
          encode_box(reference_anchors[a], gts[std::size_t(assign.matched_gt[a])].box);
      for (std::size_t k = 0; k < 4; ++k) {
        pred.at2(p, k) = deltas3[k * A + a];
        target.at2(p, k) = t[k];
      }
    }
    const LossWithGrad sl = smooth_l1(pred, target, cfg.smooth_l1_beta);
    out.reg = cfg.reg_loss_weight * sl.loss;
    for (std::size_t p = 0; p < positives.size(); ++p)
      for (std::size_t k = 0; k < 4; ++k)
        out.grad_deltas[k * A + positives[p]] =
            cfg.reg_loss_weight * sl.grad.at2(p, k);
  }
  return out;
}

LossBreakdown run_loss(ModelState& model, const SyntheticScene& scene,
                       const DetectionConfig& cfg,
                       const std::vector<Box>* frozen_anchors, bool with_grads) {
  ForwardResult fr = forward(model, scene, cfg, frozen_anchors);
  const int h = cfg.feat_size();
  const AnchorGrid grid =
      make_anchor_grid(h, h, cfg.stride, cfg.anchor_scale, cfg.anchor_ratio);

  const HeadLoss dpm = head_loss(fr.dpm_logits, fr.dpm_deltas, grid.boxes, scene.gts,
                                 cfg.dpm_fg, cfg.dpm_bg, /*classwise=*/false, cfg);
  // ADM references the refined anchors as constants (stop-gradient).
  const HeadLoss adm = head_loss(fr.adm_logits, fr.adm_deltas, fr.refined_anchors,
                                 scene.gts, cfg.adm_fg, cfg.adm_bg,
                                 /*classwise=*/true, cfg);

  LossBreakdown lb;
  lb.dpm_focal = dpm.focal;
  lb.dpm_reg = dpm.reg;
  lb.adm_focal = adm.focal;
  lb.adm_reg = adm.reg;
  if (!with_grads) return lb;

  for (ConvLayer* l : model.layers()) l->zero_grad();

  // ADM path
  Tensor g_head = model.adm_cls.backward(adm.grad_logits);
  {
    Tensor g_reg = model.adm_reg.backward(adm.grad_deltas);
    for (std::size_t i = 0; i < g_head.numel(); ++i) g_head[i] += g_reg[i];
  }
  for (auto it = model.adm_head.rbegin(); it != model.adm_head.rend(); ++it)
    g_head = it->backward(g_head);

  Tensor g_feature;
  if (cfg.adm_variant == AdmVariant::kVanillaConv) {
    g_feature = model.adm_align.backward(g_head);
  } else {
    // relu + deform backward by hand, mirroring the forward path
    Tensor g = g_head;
    for (std::size_t i = 0; i < g.numel(); ++i)
      if (model.adm_align.cached_preact[i] <= 0.0) g[i] = 0.0;
    const bool offsets_trainable = cfg.adm_variant == AdmVariant::kLearnedDeform;
    DeformConvGrads dg = deform_conv_backward(model.adm_align.cached_input,
                                              model.adm_align.spec, fr.adm_offsets, g,
                                              offsets_trainable);
    for (std::size_t i = 0; i < dg.grad_weights.numel(); ++i)
      model.adm_align.w_grad[i] += dg.grad_weights[i];
    for (std::size_t i = 0; i < dg.grad_bias.numel(); ++i)
      model.adm_align.b_grad[i] += dg.grad_bias[i];
    g_feature = dg.grad_input;
    if (offsets_trainable) {
      Tensor g_off_in = model.adm_offset_gen.backward(dg.grad_offsets.tensor);
      for (std::size_t i = 0; i < g_feature.numel(); ++i)
        g_feature[i] += g_off_in[i];
    }
  }

  // DPM path
  Tensor g_trunk = model.dpm_cls.backward(dpm.grad_logits);
  {
    Tensor g_reg = model.dpm_reg.backward(dpm.grad_deltas);
    for (std::size_t i = 0; i < g_trunk.numel(); ++i) g_trunk[i] += g_reg[i];
  }
  for (auto it = model.dpm_trunk.rbegin(); it != model.dpm_trunk.rend(); ++it)
    g_trunk = it->backward(g_trunk);

  for (std::size_t i = 0; i < g_feature.numel(); ++i) g_feature[i] += g_trunk[i];
  Tensor g = g_feature;
  for (auto it = model.backbone.rbegin(); it != model.backbone.rend(); ++it)
    g = it->backward(g);
  return lb;
}

}  // namespace

LossBreakdown compute_loss_and_grads(ModelState& model, const SyntheticScene& scene,
                                     const DetectionConfig& cfg,
                                     const std::vector<Box>* frozen_anchors) {
  return run_loss(model, scene, cfg, frozen_anchors, true);
}

LossBreakdown compute_loss(ModelState& model, const SyntheticScene& scene,
                           const DetectionConfig& cfg,
                           const std::vector<Box>* frozen_anchors) {
  return run_loss(model, scene, cfg, frozen_anchors, false);
}

TrainResult train_on_scenes(const DetectionConfig& cfg,
                            const std::vector<SyntheticScene>& scenes) {
  cfg.validate();
  if (scenes.empty()) throw std::invalid_argument("train: no scenes");
  TrainResult result;
  result.model = init_model(cfg);
  Rng order_rng(cfg.seed ^ 0x5EEDDA7AULL);
  result.loss_curve.reserve(std::size_t(cfg.train_steps));
  const auto layers = result.model.layers();
  std::vector<Tensor> w_acc(layers.size()), b_acc(layers.size());
  for (int step = 0; step < cfg.train_steps; ++step) {
    // average gradients over a minibatch of scenes
    for (std::size_t l = 0; l < layers.size(); ++l) {
      w_acc[l] = Tensor(layers[l]->spec.weights.shape());
      b_acc[l] = Tensor(layers[l]->spec.bias.shape());
    }
    double step_loss = 0.0;
    for (int b = 0; b < cfg.batch_size; ++b) {
      const std::size_t idx =
          std::size_t(order_rng.uniform_int(0, std::int64_t(scenes.size()) - 1));
      const LossBreakdown lb =
          compute_loss_and_grads(result.model, scenes[idx], cfg);
      if (!finite(lb.total()))
        throw std::runtime_error("train: non-finite loss at step " +
                                 std::to_string(step));
      step_loss += lb.total();
      for (std::size_t l = 0; l < layers.size(); ++l) {
        for (std::size_t i = 0; i < w_acc[l].numel(); ++i)
          w_acc[l][i] += layers[l]->w_grad[i];
        for (std::size_t i = 0; i < b_acc[l].numel(); ++i)
          b_acc[l][i] += layers[l]->b_grad[i];
      }
    }
    const double inv = 1.0 / cfg.batch_size;
    for (std::size_t l = 0; l < layers.size(); ++l) {
      for (std::size_t i = 0; i < w_acc[l].numel(); ++i)
        layers[l]->w_grad[i] = w_acc[l][i] * inv;
      for (std::size_t i = 0; i < b_acc[l].numel(); ++i)
        layers[l]->b_grad[i] = b_acc[l][i] * inv;
    }
    for (ConvLayer* l : result.model.layers())
      l->sgd_step(cfg.learning_rate, cfg.momentum);
    if (!result.model.all_finite())
      throw std::runtime_error("train: non-finite parameter at step " +
                               std::to_string(step));
    result.loss_curve.push_back(step_loss * inv);
  }
  return result;
}

TrainResult train(const DetectionConfig& cfg) {
  return train_on_scenes(cfg,
                         generate_dataset(cfg.seed, cfg.num_train_scenes, cfg));
}

std::vector<Detection> detect(ModelState& model, const SyntheticScene& scene,
                              const DetectionConfig& cfg, bool perturb_dpm_logits) {
  ConvSpec saved = model.dpm_cls.spec;
  if (perturb_dpm_logits) {
    // DPM classification must be dead weight at test time.
    model.dpm_cls.spec.bias.fill(1000.0);
    Rng junk(1);
    junk.fill_normal(model.dpm_cls.spec.weights, 0.0, 10.0);
  }
  ForwardResult fr = forward(model, scene, cfg);
  if (perturb_dpm_logits) model.dpm_cls.spec = saved;

  const int h = cfg.feat_size();
  const std::size_t A = std::size_t(h) * h;
  std::vector<Detection> raw;
  for (std::size_t a = 0; a < A; ++a) {
    const std::array<double, 4> d{fr.adm_deltas[0 * A + a], fr.adm_deltas[1 * A + a],
                                  fr.adm_deltas[2 * A + a], fr.adm_deltas[3 * A + a]};
    const Box box = clamp_box(decode_box(fr.refined_anchors[a], clip_deltas(d)),
                              double(cfg.image_size), double(cfg.image_size));
    for (int k = 0; k < cfg.num_classes; ++k) {
      const double score =
          1.0 / (1.0 + std::exp(-fr.adm_logits[std::size_t(k) * A + a]));
      if (score >= cfg.score_threshold) raw.push_back({box, score, k});
    }
  }
  // per-class NMS
  std::vector<Detection> kept;
  for (int k = 0; k < cfg.num_classes; ++k) {
    std::vector<Detection> cls_dets;
    for (const auto& d : raw)
      if (d.cls == k) cls_dets.push_back(d);
    const auto cls_kept = nms(cls_dets, cfg.nms_iou);
    kept.insert(kept.end(), cls_kept.begin(), cls_kept.end());
  }
  std::stable_sort(kept.begin(), kept.end(),
                   [](const Detection& a, const Detection& b) {
                     return a.score > b.score;
                   });
  return kept;
}

namespace {

double average_precision_101(const std::vector<std::pair<double, bool>>& scored,
                             std::size_t n_gt) {
  // scored: (score, is_tp) sorted descending by score
  if (n_gt == 0) return -1.0;
  std::vector<double> precision, recall;
  std::size_t tp = 0, fp = 0;
  for (const auto& [score, is_tp] : scored) {
    (void)score;
    is_tp ? ++tp : ++fp;
    precision.push_back(double(tp) / double(tp + fp));
    recall.push_back(double(tp) / double(n_gt));
  }
  // monotone envelope from the right
  for (std::size_t i = precision.size(); i-- > 1;)
    precision[i - 1] = std::max(precision[i - 1], precision[i]);
  double ap = 0.0;
  std::size_t j = 0;
  for (int r = 0; r <= 100; ++r) {
    const double level = double(r) / 100.0;
    while (j < recall.size() && recall[j] < level) ++j;
    ap += (j < recall.size()) ? precision[j] : 0.0;
  }
  return ap / 101.0;
}

double ap_at_threshold(
    const std::vector<std::vector<Detection>>& per_scene_detections,
    const std::vector<std::vector<GtBox>>& per_scene_gts, int num_classes,
    double iou_thr) {
  double sum = 0.0;
  int n_classes_with_gt = 0;
  for (int k = 0; k < num_classes; ++k) {
    struct Entry {
      double score;
      std::size_t scene;
      Box box;
    };
    std::vector<Entry> dets;
    std::size_t n_gt = 0;
    for (std::size_t s = 0; s < per_scene_gts.size(); ++s) {
      for (const auto& g : per_scene_gts[s])
        if (g.cls == k) ++n_gt;
      for (const auto& d : per_scene_detections[s])
        if (d.cls == k) dets.push_back({d.score, s, d.box});
    }
    if (n_gt == 0) continue;
    ++n_classes_with_gt;
    std::stable_sort(dets.begin(), dets.end(),
                     [](const Entry& a, const Entry& b) { return a.score > b.score; });
    std::vector<std::vector<bool>> matched(per_scene_gts.size());
    for (std::size_t s = 0; s < per_scene_gts.size(); ++s)
      matched[s].assign(per_scene_gts[s].size(), false);
    std::vector<std::pair<double, bool>> scored;
    scored.reserve(dets.size());
    for (const auto& e : dets) {
      double best = 0.0;
      int best_g = -1;
      const auto& gts = per_scene_gts[e.scene];
      for (std::size_t g = 0; g < gts.size(); ++g) {
        if (gts[g].cls != k || matched[e.scene][g]) continue;
        const double v = iou(e.box, gts[g].box);
        if (v >= iou_thr && v > best) {
          best = v;
          best_g = int(g);
        }
      }
      if (best_g >= 0) {
        matched[e.scene][std::size_t(best_g)] = true;
        scored.emplace_back(e.score, true);
      } else {
        scored.emplace_back(e.score, false);
      }
    }
    sum += average_precision_101(scored, n_gt);
  }
  return n_classes_with_gt > 0 ? sum / n_classes_with_gt : 0.0;
}

}  // namespace

ApMetrics evaluate_detections(
    const std::vector<std::vector<Detection>>& per_scene_detections,
    const std::vector<std::vector<GtBox>>& per_scene_gts, int num_classes) {
  if (per_scene_gts.empty()) throw std::invalid_argument("evaluate: empty scene set");
  if (per_scene_detections.size() != per_scene_gts.size())
    throw std::invalid_argument("evaluate: scene count mismatch");
  ApMetrics m;
  double acc = 0.0;
  for (int t = 0; t < 10; ++t) {
    const double thr = 0.5 + 0.05 * t;
    const double ap =
        ap_at_threshold(per_scene_detections, per_scene_gts, num_classes, thr);
    acc += ap;
    if (t == 0) m.ap50 = ap;
    if (t == 5) m.ap75 = ap;
  }
  m.map = acc / 10.0;
  return m;
}

ApMetrics evaluate(ModelState& model, const std::vector<SyntheticScene>& scenes,
                   const DetectionConfig& cfg) {
  if (scenes.empty()) throw std::invalid_argument("evaluate: empty scene set");
  std::vector<std::vector<Detection>> dets;
  std::vector<std::vector<GtBox>> gts;
  dets.reserve(scenes.size());
  gts.reserve(scenes.size());
  for (const auto& s : scenes) {
    dets.push_back(detect(model, s, cfg));
    gts.push_back(s.gts);
  }
  return evaluate_detections(dets, gts, cfg.num_classes);
}

void collect_alignment(ModelState& model, const std::vector<SyntheticScene>& scenes,
                       const DetectionConfig& cfg, std::vector<Box>& implicit_rois,
                       std::vector<Box>& anchors) {
  const int h = cfg.feat_size();
  const int k = cfg.adm_kernel;
  const std::size_t ntap = std::size_t(k) * k;
  for (const auto& scene : scenes) {
    ForwardResult fr = forward(model, scene, cfg);
    for (int X = 0; X < h; ++X) {
      for (int Y = 0; Y < h; ++Y) {
        const std::size_t a = std::size_t(X) * h + Y;
        anchors.push_back(fr.refined_anchors[a]);
        if (cfg.adm_variant == AdmVariant::kVanillaConv) {
          implicit_rois.push_back(implicit_roi(X, Y, k, k, cfg.stride));
        } else {
          std::vector<double> off(2 * ntap);
          for (std::size_t t = 0; t < 2 * ntap; ++t)
            off[t] = fr.adm_offsets.tensor.at3(t, std::size_t(X), std::size_t(Y));
          implicit_rois.push_back(
              decode_offsets_to_roi(off, X, Y, k, k, cfg.stride));
        }
      }
    }
  }
}

std::vector<VariantReport> compare_variants(const DetectionConfig& base,
                                            const std::vector<std::uint64_t>& seeds) {
  if (seeds.size() < 3)
    throw std::invalid_argument("compare_variants: at least 3 seeds required");
  const auto eval_scenes = generate_dataset(kEvalDataSeed, base.num_eval_scenes, base);

  std::vector<VariantReport> reports;
  for (AdmVariant v : {AdmVariant::kVanillaConv, AdmVariant::kLearnedDeform,
                       AdmVariant::kRoiConv}) {
    VariantReport rep;
    rep.variant = v;
    std::vector<std::pair<double, ModelState>> runs;
    for (std::uint64_t seed : seeds) {
      DetectionConfig cfg = base;
      cfg.adm_variant = v;
      cfg.seed = seed;
      TrainResult tr = train(cfg);
      const ApMetrics m = evaluate(tr.model, eval_scenes, cfg);
      rep.maps.push_back(m.map);
      runs.emplace_back(m.map, std::move(tr.model));
    }
    std::vector<double> sorted = rep.maps;
    std::sort(sorted.begin(), sorted.end());
    rep.median_map = sorted[sorted.size() / 2];

    // alignment histogram from the median-mAP run, over a slice of the
    // eval set
    std::size_t median_idx = 0;
    for (std::size_t i = 0; i < rep.maps.size(); ++i)
      if (rep.maps[i] == rep.median_map) median_idx = i;
    DetectionConfig cfg = base;
    cfg.adm_variant = v;
    cfg.seed = seeds[median_idx];
    std::vector<SyntheticScene> slice(
        eval_scenes.begin(),
        eval_scenes.begin() + std::min<std::size_t>(20, eval_scenes.size()));
    std::vector<Box> rois, anchors;
    collect_alignment(runs[median_idx].second, slice, cfg, rois, anchors);
    rep.alignment = alignment_histogram(rois, anchors, 0.05);
    rep.mean_alignment_iou = histogram_mean(rois, anchors);
    reports.push_back(std::move(rep));
  }
  return reports;
}

void save_checkpoint(const std::string& dir, const ModelState& model,
                     const DetectionConfig& cfg) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  nlohmann::json manifest;
  manifest["seed"] = cfg.seed;
  manifest["config"] = {{"image_size", cfg.image_size},
                        {"stride", cfg.stride},
                        {"anchor_scale", cfg.anchor_scale},
                        {"anchor_ratio", cfg.anchor_ratio},
                        {"channels", cfg.channels},
                        {"adm_kernel", cfg.adm_kernel},
                        {"num_classes", cfg.num_classes},
                        {"adm_variant", variant_name(cfg.adm_variant)}};
  auto layers = model.layers();
  nlohmann::json tensors = nlohmann::json::array();
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const std::string wname = "layer" + std::to_string(i) + "_w.rten";
    const std::string bname = "layer" + std::to_string(i) + "_b.rten";
    save_rten((fs::path(dir) / wname).string(), layers[i]->spec.weights);
    save_rten((fs::path(dir) / bname).string(), layers[i]->spec.bias);
    tensors.push_back({{"weights", wname},
                       {"bias", bname},
                       {"kernel_h", layers[i]->spec.kernel_h},
                       {"kernel_w", layers[i]->spec.kernel_w},
                       {"in_channels", layers[i]->spec.in_channels},
                       {"out_channels", layers[i]->spec.out_channels}});
  }
  manifest["tensors"] = tensors;
  std::ofstream os(fs::path(dir) / "manifest.json");
  os << manifest.dump(2) << "\n";
}

ModelState load_checkpoint(const std::string& dir, DetectionConfig& cfg_out) {
  namespace fs = std::filesystem;
  std::ifstream is(fs::path(dir) / "manifest.json");
  if (!is) throw std::runtime_error("checkpoint: missing manifest in " + dir);
  nlohmann::json manifest = nlohmann::json::parse(is);
  const auto& c = manifest.at("config");
  cfg_out.image_size = c.at("image_size").get<int>();
  cfg_out.stride = c.at("stride").get<int>();
  cfg_out.anchor_scale = c.at("anchor_scale").get<double>();
  cfg_out.anchor_ratio = c.at("anchor_ratio").get<double>();
  cfg_out.channels = c.at("channels").get<int>();
  cfg_out.adm_kernel = c.at("adm_kernel").get<int>();
  cfg_out.num_classes = c.at("num_classes").get<int>();
  cfg_out.adm_variant = variant_from_name(c.at("adm_variant").get<std::string>());
  cfg_out.seed = manifest.at("seed").get<std::uint64_t>();

  ModelState model = init_model(cfg_out);
  auto layers = model.layers();
  const auto& tensors = manifest.at("tensors");
  if (tensors.size() != layers.size())
    throw std::runtime_error("checkpoint: layer count mismatch");
  for (std::size_t i = 0; i < layers.size(); ++i) {
    Tensor w = load_rten((fs::path(dir) / tensors[i].at("weights").get<std::string>()).string());
    Tensor b = load_rten((fs::path(dir) / tensors[i].at("bias").get<std::string>()).string());
    if (w.shape() != layers[i]->spec.weights.shape() ||
        b.shape() != layers[i]->spec.bias.shape())
      throw std::runtime_error("checkpoint: tensor shape mismatch at layer " +
                               std::to_string(i));
    layers[i]->spec.weights = std::move(w);
    layers[i]->spec.bias = std::move(b);
  }
  return model;
}

}  // namespace aligndet
