#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "aligndet/box.hpp"
#include "aligndet/conv.hpp"
#include "aligndet/tensor.hpp"

namespace aligndet {

enum class AdmVariant { kVanillaConv, kLearnedDeform, kRoiConv };

const char* variant_name(AdmVariant v);
AdmVariant variant_from_name(const std::string& name);

struct DetectionConfig {
  int image_size = 64;
  int stride = 8;
  double anchor_scale = 4.0;
  double anchor_ratio = 1.0;
  double dpm_fg = 0.5;
  double dpm_bg = 0.4;
  double adm_fg = 0.6;
  double adm_bg = 0.6;
  double focal_alpha = 0.25;
  double focal_gamma = 2.0;
  double reg_loss_weight = 1.0;
  double smooth_l1_beta = 1.0 / 9.0;
  double nms_iou = 0.5;
  double score_threshold = 0.05;
  int adm_kernel = 3;
  AdmVariant adm_variant = AdmVariant::kRoiConv;
  std::uint64_t seed = 0;

  int channels = 8;
  double learning_rate = 0.01;
  double momentum = 0.9;
  int batch_size = 8;
  int train_steps = 2000;
  int num_train_scenes = 2000;
  int num_eval_scenes = 200;
  int num_classes = 3;

  void validate() const;
  int feat_size() const { return image_size / stride; }
};

// Class by aspect-ratio band: h/w > 1.5 tall, < 1/1.5 wide, else square.
constexpr int kClassTall = 0;
constexpr int kClassSquare = 1;
constexpr int kClassWide = 2;

int aspect_class(double h, double w);

struct GtBox {
  Box box;
  int cls = 0;
};

struct SyntheticScene {
  Tensor image;  // [1 x H x W]
  std::vector<GtBox> gts;
};

// 1-3 filled rectangles over a noise background; extents in [8, 48] px,
// pairwise gt IoU <= 0.3. Deterministic given the rng state.
SyntheticScene generate_scene(Rng& rng, const DetectionConfig& cfg);

struct LossWithGrad {
  double loss = 0.0;
  Tensor grad;  // same shape as the prediction input
};

// Focal loss over per-class sigmoid logits [K x A], summed over
// non-ignored anchors and normalized by max(1, positive count).
// positive_class[a] names the target class of a positive anchor.
LossWithGrad focal_loss(const Tensor& logits, const std::vector<AnchorLabel>& labels,
                        const std::vector<int>& positive_class, double alpha,
                        double gamma);

// Smooth-L1 over matched coordinate pairs, mean-reduced.
LossWithGrad smooth_l1(const Tensor& pred, const Tensor& target, double beta);

// Conv layer with momentum buffers and a cached forward state. When
// downsample is set the stride-1 output is decimated 2x (equivalent to a
// stride-2 convolution of the same kernel).
struct ConvLayer {
  ConvSpec spec;
  bool relu = false;
  bool downsample = false;
  Tensor w_momentum, b_momentum;
  Tensor w_grad, b_grad;

  // cached by forward for the matching backward
  FeatureMap cached_input;
  Tensor cached_preact;

  ConvLayer() = default;
  ConvLayer(int kh, int kw, int cin, int cout, bool relu_after, bool down = false);

  Tensor forward(const FeatureMap& in);
  Tensor backward(const Tensor& grad_out);
  void zero_grad();
  void sgd_step(double lr, double momentum);
  std::size_t param_count() const;
};

struct ModelState {
  std::vector<ConvLayer> backbone;  // 3 blocks, stride 8 total
  std::vector<ConvLayer> dpm_trunk;
  ConvLayer dpm_cls;
  ConvLayer dpm_reg;
  ConvLayer adm_align;
  ConvLayer adm_offset_gen;  // learned_deform only
  std::vector<ConvLayer> adm_head;
  ConvLayer adm_cls;
  ConvLayer adm_reg;

  std::vector<ConvLayer*> layers();
  std::vector<const ConvLayer*> layers() const;
  bool all_finite() const;
};

ModelState init_model(const DetectionConfig& cfg);

struct ForwardResult {
  FeatureMap feature;      // backbone output, stride S
  Tensor dpm_logits;       // [1 x h x w]
  Tensor dpm_deltas;       // [4 x h x w]
  std::vector<Box> refined_anchors;  // decoded + clamped, row-major
  OffsetField adm_offsets;           // empty for vanilla variant
  Tensor adm_logits;       // [K x h x w]
  Tensor adm_deltas;       // [4 x h x w]
};

// When frozen_anchors is supplied the ADM consumes those boxes instead of
// the decoded DPM output; the training gradient treats refined anchors as
// constants, and the finite-difference oracle relies on this hook.
ForwardResult forward(ModelState& model, const SyntheticScene& scene,
                      const DetectionConfig& cfg,
                      const std::vector<Box>* frozen_anchors = nullptr);

struct LossBreakdown {
  double dpm_focal = 0.0;
  double dpm_reg = 0.0;
  double adm_focal = 0.0;
  double adm_reg = 0.0;
  double total() const { return dpm_focal + dpm_reg + adm_focal + adm_reg; }
};

// Full training step computation: forward, losses, backward into layer
// grad buffers. Does not update parameters.
LossBreakdown compute_loss_and_grads(ModelState& model, const SyntheticScene& scene,
                                     const DetectionConfig& cfg,
                                     const std::vector<Box>* frozen_anchors = nullptr);

// Loss value only (shares the exact forward path); used by the
// finite-difference oracle.
LossBreakdown compute_loss(ModelState& model, const SyntheticScene& scene,
                           const DetectionConfig& cfg,
                           const std::vector<Box>* frozen_anchors = nullptr);

struct TrainResult {
  ModelState model;
  std::vector<double> loss_curve;
};

TrainResult train(const DetectionConfig& cfg);
TrainResult train_on_scenes(const DetectionConfig& cfg,
                            const std::vector<SyntheticScene>& scenes);

std::vector<SyntheticScene> generate_dataset(std::uint64_t seed, int count,
                                             const DetectionConfig& cfg);

// Test-time detections. DPM contributes regression only; when
// perturb_dpm_logits is set the DPM classification output is scrambled
// first, which must not change the result (ablation hook).
std::vector<Detection> detect(ModelState& model, const SyntheticScene& scene,
                              const DetectionConfig& cfg,
                              bool perturb_dpm_logits = false);

struct ApMetrics {
  double ap50 = 0.0;
  double ap75 = 0.0;
  double map = 0.0;  // IoU 0.5:0.05:0.95, 101-point interpolation
};

ApMetrics evaluate(ModelState& model, const std::vector<SyntheticScene>& scenes,
                   const DetectionConfig& cfg);

// AP over precomputed per-scene detections; the detector-free entry point
// used by evaluation fixtures.
ApMetrics evaluate_detections(
    const std::vector<std::vector<Detection>>& per_scene_detections,
    const std::vector<std::vector<GtBox>>& per_scene_gts, int num_classes);

struct VariantReport {
  AdmVariant variant;
  std::vector<double> maps;  // one per seed
  double median_map = 0.0;
  Histogram alignment;       // implicit-RoI vs refined-anchor IoUs, post-training
  double mean_alignment_iou = 0.0;
};

// Trains each variant with the given seeds on identical data and reports
// median mAP plus the alignment histogram of the trained model.
std::vector<VariantReport> compare_variants(const DetectionConfig& base,
                                            const std::vector<std::uint64_t>& seeds);

// Implicit RoIs of the trained alignment conv against refined anchors,
// accumulated over eval scenes.
void collect_alignment(ModelState& model, const std::vector<SyntheticScene>& scenes,
                       const DetectionConfig& cfg, std::vector<Box>& implicit_rois,
                       std::vector<Box>& anchors);

void save_checkpoint(const std::string& dir, const ModelState& model,
                     const DetectionConfig& cfg);
ModelState load_checkpoint(const std::string& dir, DetectionConfig& cfg_out);

}  // namespace aligndet
