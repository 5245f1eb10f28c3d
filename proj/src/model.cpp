#include "iclb/model.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <stdexcept>

#include "iclb/rng.hpp"

namespace iclb {

namespace {

std::uint64_t fnv1a(const std::string& s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

template <typename T>
Parameter<T> xavier(const std::string& name, std::size_t fan_in, std::size_t fan_out, Rng& rng) {
  const double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  Tensor<T> w({fan_in, fan_out});
  for (auto& v : w.data) v = static_cast<T>(rng.uniform(-limit, limit));
  return Parameter<T>(name, std::move(w));
}

template <typename T>
Parameter<T> constant_param(const std::string& name, std::size_t n, T value) {
  return Parameter<T>(name, Tensor<T>({n}, value));
}

template <typename T>
Parameter<T> normal_param(const std::string& name, Shape shape, double stddev, Rng& rng) {
  Tensor<T> w(std::move(shape));
  for (auto& v : w.data) v = static_cast<T>(stddev * rng.normal());
  return Parameter<T>(name, std::move(w));
}

// Fixed 2-D sine/cosine table over a side×side patch grid, used as the
// starting point of the learned in-panel position embedding.
template <typename T>
Parameter<T> sincos_param(const std::string& name, int side, std::size_t dim) {
  const std::size_t quarter = dim / 4;
  Tensor<T> w({static_cast<std::size_t>(side * side), dim});
  for (int y = 0; y < side; ++y) {
    for (int x = 0; x < side; ++x) {
      T* row = w.data.data() + static_cast<std::size_t>(y * side + x) * dim;
      for (std::size_t k = 0; k < quarter; ++k) {
        const double omega = std::pow(100.0, -static_cast<double>(k) / static_cast<double>(quarter));
        row[k] = static_cast<T>(std::sin(y * omega));
        row[quarter + k] = static_cast<T>(std::cos(y * omega));
        row[2 * quarter + k] = static_cast<T>(std::sin(x * omega));
        row[3 * quarter + k] = static_cast<T>(std::cos(x * omega));
      }
    }
  }
  return Parameter<T>(name, std::move(w));
}

// Row indices (within one canvas) of the t1 then t2 patch tokens.
std::vector<std::size_t> task_token_offsets(const ModelConfig& cfg) {
  const int pps = cfg.patches_per_side();
  const int grid = 2 * pps;
  std::vector<std::size_t> rows;
  rows.reserve(2 * cfg.patches_per_panel());
  for (int panel_row = 0; panel_row < 2; ++panel_row) {
    for (int py = 0; py < pps; ++py) {
      for (int px = 0; px < pps; ++px) {
        rows.push_back(static_cast<std::size_t>((panel_row * pps + py) * grid + pps + px));
      }
    }
  }
  return rows;
}

void check_canvas(const ModelConfig& cfg, const Canvas& c) {
  for (const Image* img : {&c.phi1, &c.t1, &c.phi2, &c.t2}) {
    if (img->height != cfg.panel || img->width != cfg.panel || img->channels != 3) {
      throw DimensionError("canvas panel " + std::to_string(img->height) + "x" +
                           std::to_string(img->width) + "x" + std::to_string(img->channels) +
                           " does not match model panel " + std::to_string(cfg.panel));
    }
  }
  const std::size_t n = static_cast<std::size_t>(cfg.panel) * cfg.panel;
  if (c.mask.t1.size() != n || c.mask.t2.size() != n) {
    throw DimensionError("canvas mask does not cover a " + std::to_string(cfg.panel) + "x" +
                         std::to_string(cfg.panel) + " panel");
  }
}

// Whether any pixel of patch (py, px) is hidden.
bool patch_hidden(const std::vector<std::uint8_t>& visible, int width, int patch, int py, int px) {
  for (int y = py * patch; y < (py + 1) * patch; ++y) {
    for (int x = px * patch; x < (px + 1) * patch; ++x) {
      if (!visible[static_cast<std::size_t>(y) * width + x]) return true;
    }
  }
  return false;
}

}  // namespace

// ---------------------------------------------------------------------------
// Config, masks, canvases

void ModelConfig::validate() const {
  if (panel <= 0 || patch <= 0 || panel % patch != 0) {
    throw std::invalid_argument("panel size " + std::to_string(panel) +
                                " must be a positive multiple of patch size " + std::to_string(patch));
  }
  if (dim <= 0 || heads <= 0 || dim % heads != 0) {
    throw std::invalid_argument("embedding dim " + std::to_string(dim) +
                                " must be divisible by heads " + std::to_string(heads));
  }
  if (depth < 0 || head_depth < 1 || mlp_ratio < 1) {
    throw std::invalid_argument("depth >= 0, head_depth >= 1 and mlp_ratio >= 1 required");
  }
  if (!(mask_ratio >= 0.0 && mask_ratio <= 1.0)) {
    throw std::invalid_argument("mask ratio must lie in [0,1]");
  }
}

std::string ModelConfig::canonical() const {
  std::ostringstream os;
  os << "panel=" << panel << ";patch=" << patch << ";dim=" << dim << ";heads=" << heads
     << ";depth=" << depth << ";head_depth=" << head_depth << ";mlp_ratio=" << mlp_ratio
     << ";source_skip=" << (source_skip ? 1 : 0);
  return os.str();
}

std::uint64_t ModelConfig::digest() const { return fnv1a(canonical()); }

Mask Mask::all_visible(int h, int w) {
  Mask m;
  m.height = h;
  m.width = w;
  m.t1.assign(static_cast<std::size_t>(h) * w, 1);
  m.t2.assign(static_cast<std::size_t>(h) * w, 1);
  return m;
}

std::size_t Mask::masked_count() const {
  return static_cast<std::size_t>(std::count(t1.begin(), t1.end(), 0) +
                                  std::count(t2.begin(), t2.end(), 0));
}

Canvas assemble_canvas(const Image& phi1, const Image& t1, const Image& phi2, const Image& t2) {
  if (!phi1.same_shape(t1) || !phi1.same_shape(phi2) || !phi1.same_shape(t2)) {
    throw DimensionError("assemble_canvas: all four panels must share one shape");
  }
  return Canvas{phi1, t1, phi2, t2, Mask::all_visible(phi1.height, phi1.width)};
}

Image composite(const Canvas& c) {
  const int h = c.phi1.height;
  const int w = c.phi1.width;
  const int ch = c.phi1.channels;
  Image out(2 * h, 2 * w, ch);
  const Image* panels[2][2] = {{&c.phi1, &c.t1}, {&c.phi2, &c.t2}};
  for (int r = 0; r < 2; ++r) {
    for (int col = 0; col < 2; ++col) {
      const Image& p = *panels[r][col];
      for (int y = 0; y < h; ++y) {
        std::copy_n(p.pixels.data() + static_cast<std::size_t>(y) * w * ch, w * ch,
                    out.pixels.data() + (static_cast<std::size_t>(r * h + y) * 2 * w + col * w) * ch);
      }
    }
  }
  return out;
}

Image composite_panel(const Image& comp, int row, int col) {
  if (comp.height % 2 != 0 || comp.width % 2 != 0 || row < 0 || row > 1 || col < 0 || col > 1) {
    throw DimensionError("composite_panel: invalid composite or panel index");
  }
  const int h = comp.height / 2;
  const int w = comp.width / 2;
  Image out(h, w, comp.channels);
  for (int y = 0; y < h; ++y) {
    std::copy_n(comp.pixels.data() + (static_cast<std::size_t>(row * h + y) * comp.width + col * w) * comp.channels,
                w * comp.channels, out.pixels.data() + static_cast<std::size_t>(y) * w * comp.channels);
  }
  return out;
}

Mask sample_mask(const ModelConfig& cfg, MaskPhase phase, std::uint64_t seed) {
  cfg.validate();
  Mask m = Mask::all_visible(cfg.panel, cfg.panel);
  if (phase == MaskPhase::Infer) {
    std::fill(m.t2.begin(), m.t2.end(), 0);
    return m;
  }
  const int pps = cfg.patches_per_side();
  const int n = cfg.patches_per_panel();
  const int hidden = static_cast<int>(std::floor(cfg.mask_ratio * n + 0.5));
  Rng rng(seed);
  for (auto* panel : {&m.t1, &m.t2}) {
    std::vector<int> order(n);
    for (int i = 0; i < n; ++i) order[i] = i;
    rng.shuffle(order);
    for (int k = 0; k < hidden; ++k) {
      const int py = order[k] / pps;
      const int px = order[k] % pps;
      for (int y = py * cfg.patch; y < (py + 1) * cfg.patch; ++y) {
        for (int x = px * cfg.patch; x < (px + 1) * cfg.patch; ++x) {
          (*panel)[static_cast<std::size_t>(y) * cfg.panel + x] = 0;
        }
      }
    }
  }
  return m;
}

LossValue masked_loss(const Image& pred, const Image& target, std::span<const std::uint8_t> visible) {
  if (!pred.same_shape(target) ||
      visible.size() != static_cast<std::size_t>(pred.height) * pred.width) {
    throw DimensionError("masked_loss: prediction, target and mask shapes differ");
  }
  double total = 0.0;
  std::size_t count = 0;
  for (std::size_t p = 0; p < visible.size(); ++p) {
    if (visible[p]) continue;
    for (int c = 0; c < pred.channels; ++c) {
      const std::size_t i = p * pred.channels + c;
      const double d = std::abs(static_cast<double>(pred.pixels[i]) - target.pixels[i]);
      total += d < 1.0 ? 0.5 * d * d : d - 0.5;
      ++count;
    }
  }
  if (count == 0) return {0.0, true};
  return {total / static_cast<double>(count), false};
}

// ---------------------------------------------------------------------------
// Model

template <typename T>
Model<T>::Model(const ModelConfig& config) : config_(config) {
  config_.validate();
  Rng rng(derive_seed(config_.seed, {0x4d4f44454cULL}));
  const auto d = static_cast<std::size_t>(config_.dim);
  const auto pv = static_cast<std::size_t>(config_.patch_values());
  const auto hidden = d * static_cast<std::size_t>(config_.mlp_ratio);

  patch_weight_ = xavier<T>("patch_embed.weight", pv, d, rng);
  patch_bias_ = constant_param<T>("patch_embed.bias", d, T(0));
  if (config_.source_skip) source_weight_ = xavier<T>("source_embed.weight", pv, d, rng);
  pos_embed_ = sincos_param<T>("pos_embed", config_.patches_per_side(), d);
  panel_embed_ = normal_param<T>("panel_embed", {4, d}, 0.2, rng);
  mask_token_ = normal_param<T>("mask_token", {1, d}, 0.02, rng);
  for (int b = 0; b < config_.depth; ++b) {
    const std::string p = "blocks." + std::to_string(b) + ".";
    Block blk;
    blk.ln1_gain = constant_param<T>(p + "ln1.gain", d, T(1));
    blk.ln1_bias = constant_param<T>(p + "ln1.bias", d, T(0));
    blk.qkv_weight = xavier<T>(p + "attn.qkv.weight", d, 3 * d, rng);
    blk.qkv_bias = constant_param<T>(p + "attn.qkv.bias", 3 * d, T(0));
    blk.proj_weight = xavier<T>(p + "attn.proj.weight", d, d, rng);
    blk.proj_bias = constant_param<T>(p + "attn.proj.bias", d, T(0));
    blk.ln2_gain = constant_param<T>(p + "ln2.gain", d, T(1));
    blk.ln2_bias = constant_param<T>(p + "ln2.bias", d, T(0));
    blk.fc1_weight = xavier<T>(p + "mlp.fc1.weight", d, hidden, rng);
    blk.fc1_bias = constant_param<T>(p + "mlp.fc1.bias", hidden, T(0));
    blk.fc2_weight = xavier<T>(p + "mlp.fc2.weight", hidden, d, rng);
    blk.fc2_bias = constant_param<T>(p + "mlp.fc2.bias", d, T(0));
    blocks_.push_back(std::move(blk));
  }
  norm_gain_ = constant_param<T>("norm.gain", d, T(1));
  norm_bias_ = constant_param<T>("norm.bias", d, T(0));
  for (int i = 0; i < config_.head_depth; ++i) {
    const bool last = i + 1 == config_.head_depth;
    const std::size_t out = last ? pv : d;
    const std::string p = "head." + std::to_string(i) + ".";
    head_weights_.push_back(xavier<T>(p + "weight", d, out, rng));
    // Mid-grey start keeps initial outputs away from the clamp boundaries.
    head_biases_.push_back(constant_param<T>(p + "bias", out, last ? T(0.5) : T(0)));
  }
}

template <typename T>
std::vector<Parameter<T>*> Model<T>::parameters() {
  std::vector<Parameter<T>*> out{&patch_weight_, &patch_bias_};
  if (config_.source_skip) out.push_back(&source_weight_);
  for (auto* p : {&pos_embed_, &panel_embed_, &mask_token_}) out.push_back(p);
  for (auto& b : blocks_) {
    for (auto* p : {&b.ln1_gain, &b.ln1_bias, &b.qkv_weight, &b.qkv_bias, &b.proj_weight, &b.proj_bias,
                    &b.ln2_gain, &b.ln2_bias, &b.fc1_weight, &b.fc1_bias, &b.fc2_weight, &b.fc2_bias}) {
      out.push_back(p);
    }
  }
  out.push_back(&norm_gain_);
  out.push_back(&norm_bias_);
  for (std::size_t i = 0; i < head_weights_.size(); ++i) {
    out.push_back(&head_weights_[i]);
    out.push_back(&head_biases_[i]);
  }
  return out;
}

template <typename T>
std::vector<const Parameter<T>*> Model<T>::parameters() const {
  auto mutable_params = const_cast<Model*>(this)->parameters();
  return {mutable_params.begin(), mutable_params.end()};
}

template <typename T>
std::size_t Model<T>::parameter_count() const {
  std::size_t n = 0;
  for (const auto* p : parameters()) n += p->value.numel();
  return n;
}

template <typename T>
Tensor<T> canvas_patches(const ModelConfig& cfg, std::span<const Canvas> batch) {
  const int pps = cfg.patches_per_side();
  const int grid = 2 * pps;
  const auto tokens = static_cast<std::size_t>(cfg.tokens());
  const auto pv = static_cast<std::size_t>(cfg.patch_values());
  Tensor<T> out({batch.size() * tokens, pv});
  for (std::size_t b = 0; b < batch.size(); ++b) {
    check_canvas(cfg, batch[b]);
    const Image* panels[2][2] = {{&batch[b].phi1, &batch[b].t1}, {&batch[b].phi2, &batch[b].t2}};
    for (int gy = 0; gy < grid; ++gy) {
      for (int gx = 0; gx < grid; ++gx) {
        const Image& img = *panels[gy / pps][gx / pps];
        const int oy = (gy % pps) * cfg.patch;
        const int ox = (gx % pps) * cfg.patch;
        T* row = out.data.data() + (b * tokens + static_cast<std::size_t>(gy * grid + gx)) * pv;
        std::size_t k = 0;
        for (int y = 0; y < cfg.patch; ++y) {
          for (int x = 0; x < cfg.patch; ++x) {
            for (int c = 0; c < 3; ++c) row[k++] = static_cast<T>(img.at(oy + y, ox + x, c));
          }
        }
      }
    }
  }
  return out;
}

namespace {

template <typename T>
Var<T> use_param(Graph<T>& g, const Parameter<T>& p, bool track) {
  return track ? g.parameter(const_cast<Parameter<T>&>(p)) : g.constant(p.value);
}

template <typename T>
Var<T> linear(Graph<T>& g, Var<T> x, const Parameter<T>& w, const Parameter<T>& b, bool track) {
  return add_row_bias(matmul(x, use_param(g, w, track)), use_param(g, b, track));
}

// Shared forward body; `track` binds parameters so backward reaches them.
template <typename T, typename Blocks, typename Params>
Var<T> run_forward(Graph<T>& g, const ModelConfig& cfg, std::span<const Canvas> batch,
                   const Var<T>* input, bool track, const Params& p, const Blocks& blocks) {
  const std::size_t tokens = static_cast<std::size_t>(cfg.tokens());
  Var<T> x = input != nullptr ? *input : g.constant(canvas_patches<T>(cfg, batch));
  if (input != nullptr) {
    for (const auto& c : batch) check_canvas(cfg, c);
    if (x.value().shape != Shape{batch.size() * tokens, static_cast<std::size_t>(cfg.patch_values())}) {
      throw DimensionError("forward: input patches " + shape_str(x.value().shape) +
                           " do not match the batch");
    }
  }

  const int pps = cfg.patches_per_side();
  const int grid = 2 * pps;
  std::vector<std::uint8_t> hidden(batch.size() * tokens, 0);
  for (std::size_t b = 0; b < batch.size(); ++b) {
    const Mask& m = batch[b].mask;
    for (int py = 0; py < pps; ++py) {
      for (int px = 0; px < pps; ++px) {
        const std::size_t t1_row = b * tokens + static_cast<std::size_t>(py * grid + pps + px);
        const std::size_t t2_row = b * tokens + static_cast<std::size_t>((pps + py) * grid + pps + px);
        hidden[t1_row] = patch_hidden(m.t1, cfg.panel, cfg.patch, py, px);
        hidden[t2_row] = patch_hidden(m.t2, cfg.panel, cfg.patch, py, px);
      }
    }
  }

  Var<T> h = linear(g, x, *p.patch_weight, *p.patch_bias, track);
  h = replace_rows(h, use_param(g, *p.mask_token, track), std::span<const std::uint8_t>(hidden));
  if (cfg.source_skip) {
    // Row of the source patch left of each task token; source tokens map to themselves.
    std::vector<std::size_t> src(batch.size() * tokens);
    for (std::size_t b = 0; b < batch.size(); ++b) {
      for (int gy = 0; gy < grid; ++gy) {
        for (int gx = 0; gx < grid; ++gx) {
          const int sx = gx >= pps ? gx - pps : gx;
          src[b * tokens + static_cast<std::size_t>(gy * grid + gx)] = b * tokens + static_cast<std::size_t>(gy * grid + sx);
        }
      }
    }
    h = add(h, matmul(gather_rows(x, std::span<const std::size_t>(src)), use_param(g, *p.source_weight, track)));
  }
  // Token position = in-panel patch position + panel identity.
  std::vector<std::size_t> cell(tokens), panel(tokens);
  for (int gy = 0; gy < grid; ++gy) {
    for (int gx = 0; gx < grid; ++gx) {
      const auto t = static_cast<std::size_t>(gy * grid + gx);
      cell[t] = static_cast<std::size_t>((gy % pps) * pps + gx % pps);
      panel[t] = static_cast<std::size_t>((gy / pps) * 2 + gx / pps);
    }
  }
  Var<T> pos = add(gather_rows(use_param(g, *p.pos_embed, track), std::span<const std::size_t>(cell)),
                   gather_rows(use_param(g, *p.panel_embed, track), std::span<const std::size_t>(panel)));
  h = add_tiled(h, pos);
  for (const auto& blk : blocks) {
    Var<T> a = layer_norm(h, use_param(g, blk.ln1_gain, track), use_param(g, blk.ln1_bias, track));
    a = linear(g, a, blk.qkv_weight, blk.qkv_bias, track);
    a = attention(a, batch.size(), tokens, static_cast<std::size_t>(cfg.heads));
    h = add(h, linear(g, a, blk.proj_weight, blk.proj_bias, track));
    Var<T> m = layer_norm(h, use_param(g, blk.ln2_gain, track), use_param(g, blk.ln2_bias, track));
    m = gelu(linear(g, m, blk.fc1_weight, blk.fc1_bias, track));
    h = add(h, linear(g, m, blk.fc2_weight, blk.fc2_bias, track));
  }

  const auto offsets = task_token_offsets(cfg);
  std::vector<std::size_t> rows;
  rows.reserve(batch.size() * offsets.size());
  for (std::size_t b = 0; b < batch.size(); ++b) {
    for (auto o : offsets) rows.push_back(b * tokens + o);
  }
  h = gather_rows(h, std::span<const std::size_t>(rows));
  h = layer_norm(h, use_param(g, *p.norm_gain, track), use_param(g, *p.norm_bias, track));
  for (std::size_t i = 0; i < p.head_weights->size(); ++i) {
    h = linear(g, h, (*p.head_weights)[i], (*p.head_biases)[i], track);
    if (i + 1 < p.head_weights->size()) h = gelu(h);
  }
  return clamp(h, T(0), T(1));
}

template <typename T>
struct ParamRefs {
  const Parameter<T>* patch_weight;
  const Parameter<T>* patch_bias;
  const Parameter<T>* source_weight;
  const Parameter<T>* pos_embed;
  const Parameter<T>* panel_embed;
  const Parameter<T>* mask_token;
  const Parameter<T>* norm_gain;
  const Parameter<T>* norm_bias;
  const std::vector<Parameter<T>>* head_weights;
  const std::vector<Parameter<T>>* head_biases;
};

// Splits decoded task rows back into per-canvas panel images.
template <typename T>
std::vector<Prediction> rows_to_predictions(const ModelConfig& cfg, const Tensor<T>& rows,
                                            std::size_t batch) {
  const int pps = cfg.patches_per_side();
  const std::size_t per_panel = static_cast<std::size_t>(cfg.patches_per_panel());
  const std::size_t pv = static_cast<std::size_t>(cfg.patch_values());
  std::vector<Prediction> out(batch);
  for (std::size_t b = 0; b < batch; ++b) {
    for (int which = 0; which < 2; ++which) {
      Image img(cfg.panel, cfg.panel, 3);
      for (std::size_t k = 0; k < per_panel; ++k) {
        const T* row = rows.data.data() + ((b * 2 + which) * per_panel + k) * pv;
        const int py = static_cast<int>(k) / pps;
        const int px = static_cast<int>(k) % pps;
        std::size_t idx = 0;
        for (int y = 0; y < cfg.patch; ++y) {
          for (int x = 0; x < cfg.patch; ++x) {
            for (int c = 0; c < 3; ++c) {
              img.at(py * cfg.patch + y, px * cfg.patch + x, c) = static_cast<float>(row[idx++]);
            }
          }
        }
      }
      (which == 0 ? out[b].t1 : out[b].t2) = std::move(img);
    }
  }
  return out;
}

}  // namespace

template <typename T>
Var<T> Model<T>::forward_tokens(Graph<T>& graph, std::span<const Canvas> batch, const Var<T>* input) {
  const ParamRefs<T> refs{&patch_weight_, &patch_bias_, &source_weight_, &pos_embed_, &panel_embed_, &mask_token_,
                          &norm_gain_,    &norm_bias_,  &head_weights_, &head_biases_};
  return run_forward(graph, config_, batch, input, true, refs, blocks_);
}

template <typename T>
Var<T> Model<T>::batch_loss(Graph<T>& graph, std::span<const Canvas> batch) {
  Var<T> out = forward_tokens(graph, batch);
  const int pps = config_.patches_per_side();
  const std::size_t per_panel = static_cast<std::size_t>(config_.patches_per_panel());
  const std::size_t pv = static_cast<std::size_t>(config_.patch_values());
  Tensor<T> target(out.value().shape);
  std::vector<std::uint8_t> weight(target.numel(), 0);
  for (std::size_t b = 0; b < batch.size(); ++b) {
    for (int which = 0; which < 2; ++which) {
      const Image& img = which == 0 ? batch[b].t1 : batch[b].t2;
      const auto& vis = which == 0 ? batch[b].mask.t1 : batch[b].mask.t2;
      for (std::size_t k = 0; k < per_panel; ++k) {
        const std::size_t base = ((b * 2 + which) * per_panel + k) * pv;
        const int py = static_cast<int>(k) / pps;
        const int px = static_cast<int>(k) % pps;
        std::size_t idx = 0;
        for (int y = 0; y < config_.patch; ++y) {
          for (int x = 0; x < config_.patch; ++x) {
            const int iy = py * config_.patch + y;
            const int ix = px * config_.patch + x;
            const bool hidden = !vis[static_cast<std::size_t>(iy) * config_.panel + ix];
            for (int c = 0; c < 3; ++c) {
              target.data[base + idx] = static_cast<T>(img.at(iy, ix, c));
              weight[base + idx] = hidden ? 1 : 0;
              ++idx;
            }
          }
        }
      }
    }
  }
  return masked_smooth_l1(out, target, std::span<const std::uint8_t>(weight));
}

template <typename T>
std::vector<Prediction> Model<T>::forward_batch(std::span<const Canvas> batch) const {
  if (batch.empty()) return {};
  Graph<T> g;
  const ParamRefs<T> refs{&patch_weight_, &patch_bias_, &source_weight_, &pos_embed_, &panel_embed_, &mask_token_,
                          &norm_gain_,    &norm_bias_,  &head_weights_, &head_biases_};
  Var<T> out = run_forward<T>(g, config_, batch, static_cast<const Var<T>*>(nullptr), false, refs, blocks_);
  return rows_to_predictions(config_, out.value(), batch.size());
}

template <typename T>
Prediction Model<T>::forward(const Canvas& canvas) const {
  return forward_batch(std::span<const Canvas>(&canvas, 1)).front();
}

template <typename T>
template <typename U>
Model<U> Model<T>::cast() const {
  Model<U> out(config_);
  auto src = parameters();
  auto dst = out.parameters();
  for (std::size_t i = 0; i < src.size(); ++i) {
    dst[i]->value.data.assign(src[i]->value.data.begin(), src[i]->value.data.end());
  }
  return out;
}

// ---------------------------------------------------------------------------
// Training and inference

template <typename T>
double train_epoch(Model<T>& model, std::span<const Canvas> canvases, AdamState<T>& optimizer,
                   const TrainOptions& options) {
  if (canvases.empty()) throw std::invalid_argument("train_epoch: empty dataset");
  if (options.batch_size <= 0) throw std::invalid_argument("train_epoch: batch size must be positive");
  const auto& cfg = model.config();
  std::vector<std::size_t> order(canvases.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  Rng shuffle_rng(derive_seed(options.seed, {0x5348554646ULL, static_cast<std::uint64_t>(options.epoch)}));
  shuffle_rng.shuffle(order);

  auto params = model.parameters();
  double total = 0.0;
  std::size_t batches = 0;
  std::vector<Canvas> batch;
  for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(options.batch_size)) {
    const std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(options.batch_size));
    batch.clear();
    for (std::size_t k = start; k < end; ++k) {
      Canvas c = canvases[order[k]];
      if (options.resample_masks) {
        const std::uint64_t s = derive_seed(options.seed, {0x4d41534bULL,
                                                           static_cast<std::uint64_t>(options.epoch),
                                                           static_cast<std::uint64_t>(order[k])});
        Rng pick(s);
        const MaskPhase phase = pick.uniform() < options.infer_mask_fraction ? MaskPhase::Infer : MaskPhase::Train;
        c.mask = sample_mask(cfg, phase, s);
      }
      batch.push_back(std::move(c));
    }
    Graph<T> g;
    Var<T> loss = model.batch_loss(g, std::span<const Canvas>(batch));
    zero_grads<T>(params);
    g.backward(loss);
    adam_step<T>(params, optimizer, options.adam);
    total += static_cast<double>(loss.value().data[0]);
    ++batches;
  }
  return total / static_cast<double>(batches);
}

template <typename T>
std::vector<Image> predict_batch(const Model<T>& model, std::span<const Canvas> canvases) {
  const auto& cfg = model.config();
  std::vector<Canvas> prepared(canvases.begin(), canvases.end());
  for (auto& c : prepared) {
    c.t2 = Image(c.phi2.height, c.phi2.width, c.phi2.channels, 0.0f);
    c.mask = sample_mask(cfg, MaskPhase::Infer, 0);
  }
  std::vector<Image> out;
  out.reserve(prepared.size());
  constexpr std::size_t kChunk = 64;
  for (std::size_t start = 0; start < prepared.size(); start += kChunk) {
    const std::size_t n = std::min(kChunk, prepared.size() - start);
    for (auto& p : model.forward_batch(std::span<const Canvas>(prepared.data() + start, n))) {
      out.push_back(std::move(p.t2));
    }
  }
  return out;
}

template <typename T>
Image predict_task(const Model<T>& model, const Image& phi1, const Image& t1, const Image& phi2) {
  if (!phi1.same_shape(t1) || !phi1.same_shape(phi2)) {
    throw DimensionError("predict_task: context and query shapes differ");
  }
  Canvas c = assemble_canvas(phi1, t1, phi2, Image(phi2.height, phi2.width, phi2.channels, 0.0f));
  return predict_batch(model, std::span<const Canvas>(&c, 1)).front();
}

template class Model<float>;
template class Model<double>;
template Model<double> Model<float>::cast<double>() const;
template Model<float> Model<double>::cast<float>() const;
template Model<float> Model<float>::cast<float>() const;
template Tensor<float> canvas_patches(const ModelConfig&, std::span<const Canvas>);
template Tensor<double> canvas_patches(const ModelConfig&, std::span<const Canvas>);
template double train_epoch(Model<float>&, std::span<const Canvas>, AdamState<float>&, const TrainOptions&);
template double train_epoch(Model<double>&, std::span<const Canvas>, AdamState<double>&, const TrainOptions&);
template std::vector<Image> predict_batch(const Model<float>&, std::span<const Canvas>);
template std::vector<Image> predict_batch(const Model<double>&, std::span<const Canvas>);
template Image predict_task(const Model<float>&, const Image&, const Image&, const Image&);
template Image predict_task(const Model<double>&, const Image&, const Image&, const Image&);

}  // namespace iclb
