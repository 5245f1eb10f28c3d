// Four-panel masked-image-modeling transformer.
//
// A canvas is laid out as a 2×2 grid of panels:
//
//     phi1 | t1        (context: source and its task result)
//     phi2 | t2        (query source and the task panel to reconstruct)
//
// The composite is split into square patches, each patch embedded linearly,
// masked task patches are swapped for a learned mask token, each task token
// also receives a projection of the source patch beside it, and a pre-norm
// transformer encoder processes the full token sequence. A per-patch MLP head
// decodes the task-panel tokens back to pixels.

#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "iclb/image.hpp"
#include "iclb/optim.hpp"
#include "iclb/tensor.hpp"

namespace iclb {

struct ModelConfig {
  int panel = 16;
  int patch = 4;
  int dim = 64;
  int heads = 4;
  int depth = 4;
  int head_depth = 3;
  int mlp_ratio = 4;
  double mask_ratio = 0.5;
  /// Task-panel tokens additionally embed the co-located source patch
  /// (phi1 for t1, phi2 for t2) through their own projection.
  bool source_skip = true;
  std::uint64_t seed = 0;

  /// Throws std::invalid_argument when the geometry is inconsistent.
  void validate() const;
  int patches_per_side() const { return panel / patch; }
  int patches_per_panel() const { return patches_per_side() * patches_per_side(); }
  int tokens() const { return 4 * patches_per_panel(); }
  int patch_values() const { return patch * patch * 3; }
  /// Stable string over the architecture fields (seed excluded).
  std::string canonical() const;
  std::uint64_t digest() const;

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

/// Visibility of the two task panels; 1 = visible, 0 = masked. Context
/// sources are never masked, so they carry no mask.
struct Mask {
  int height = 0;
  int width = 0;
  std::vector<std::uint8_t> t1;
  std::vector<std::uint8_t> t2;

  static Mask all_visible(int h, int w);
  std::size_t masked_count() const;
  friend bool operator==(const Mask&, const Mask&) = default;
};

struct Canvas {
  Image phi1;
  Image t1;
  Image phi2;
  Image t2;
  Mask mask;

  friend bool operator==(const Canvas&, const Canvas&) = default;
};

/// Builds a canvas from four equally shaped panels with nothing masked.
Canvas assemble_canvas(const Image& phi1, const Image& t1, const Image& phi2, const Image& t2);

/// The 2H×2W composite image of a canvas (masked pixels are not zeroed).
Image composite(const Canvas& canvas);

/// Panel (row, col) of a composite produced by composite().
Image composite_panel(const Image& composite, int row, int col);

enum class MaskPhase { Train, Infer };

/// Train: patch-aligned random mask over t1 and t2, round(mask_ratio·patches)
/// patches masked in each. Infer: t1 fully visible, t2 fully masked.
Mask sample_mask(const ModelConfig& config, MaskPhase phase, std::uint64_t seed);

struct LossValue {
  double value = 0.0;
  /// Set when the mask hides nothing, in which case value is 0.
  bool no_masked_pixels = false;
};

/// Smooth-ℓ1 (δ = 1) between prediction and target averaged over pixels the
/// mask hides; visible pixels contribute nothing.
LossValue masked_loss(const Image& pred, const Image& target, std::span<const std::uint8_t> visible);

struct Prediction {
  Image t1;
  Image t2;
};

template <typename T>
class Model {
 public:
  explicit Model(const ModelConfig& config);

  const ModelConfig& config() const { return config_; }
  std::vector<Parameter<T>*> parameters();
  std::vector<const Parameter<T>*> parameters() const;
  std::size_t parameter_count() const;

  /// Records the forward pass for a batch. Returns the clamped task-panel
  /// patches, shape [(B · 2 · patches_per_panel) × patch_values]; per canvas
  /// the t1 patches come first, then t2, each in row-major patch order.
  /// `input`, when given, replaces the constant patch matrix so gradients
  /// with respect to pixels can be inspected.
  Var<T> forward_tokens(Graph<T>& graph, std::span<const Canvas> batch,
                        const Var<T>* input = nullptr);

  /// Mean masked smooth-ℓ1 over every hidden task pixel in the batch.
  Var<T> batch_loss(Graph<T>& graph, std::span<const Canvas> batch);

  Prediction forward(const Canvas& canvas) const;
  std::vector<Prediction> forward_batch(std::span<const Canvas> batch) const;

  template <typename U>
  Model<U> cast() const;

 private:
  struct Block {
    Parameter<T> ln1_gain, ln1_bias, qkv_weight, qkv_bias, proj_weight, proj_bias;
    Parameter<T> ln2_gain, ln2_bias, fc1_weight, fc1_bias, fc2_weight, fc2_bias;
  };

  template <typename U>
  friend class Model;

  ModelConfig config_;
  Parameter<T> patch_weight_, patch_bias_, source_weight_, pos_embed_, panel_embed_, mask_token_;
  std::vector<Block> blocks_;
  Parameter<T> norm_gain_, norm_bias_;
  std::vector<Parameter<T>> head_weights_, head_biases_;
};

/// Patch matrix [(B·tokens) × patch_values] of the composites.
template <typename T>
Tensor<T> canvas_patches(const ModelConfig& config, std::span<const Canvas> batch);

struct TrainOptions {
  AdamConfig adam;
  int batch_size = 16;
  std::uint64_t seed = 0;
  int epoch = 0;
  /// Draw a fresh mask per canvas each epoch; otherwise the canvas masks are used.
  bool resample_masks = true;
  /// Fraction of canvases given the inference mask (t2 fully hidden) instead
  /// of a random one when masks are resampled.
  double infer_mask_fraction = 0.5;
};

/// One shuffled pass over `canvases` with Adam; returns the mean batch loss.
template <typename T>
double train_epoch(Model<T>& model, std::span<const Canvas> canvases, AdamState<T>& optimizer,
                   const TrainOptions& options);

/// In-context inference: context pair (phi1, t1), query phi2, t2 fully masked.
template <typename T>
Image predict_task(const Model<T>& model, const Image& phi1, const Image& t1, const Image& phi2);

/// Batched predict_task over canvases whose t2 is replaced by an empty panel.
template <typename T>
std::vector<Image> predict_batch(const Model<T>& model, std::span<const Canvas> canvases);

}  // namespace iclb
