// Finite-difference checks shared by the unit tests and the acceptance run.

#pragma once

#include <string>
#include <utility>
#include <vector>

#include "gradcheck.hpp"

#include "iclb/model.hpp"
#include "iclb/rng.hpp"

namespace iclb::testing {

using Vars = std::vector<Var<double>>;

/// Worst relative error of every differentiable op, by op name.
inline std::vector<std::pair<std::string, double>> op_gradient_errors() {
  std::vector<std::pair<std::string, double>> out;
  auto check = [&out](std::string name, const Expr& expr, std::vector<Tensor<double>> inputs) {
    out.emplace_back(std::move(name), max_gradient_error(expr, std::move(inputs)));
  };
  auto unary = [](auto op) {
    return [op](Graph<double>& g, const Vars& v) { return weighted_sum(g, op(v[0])); };
  };
  auto binary = [](auto op) {
    return [op](Graph<double>& g, const Vars& v) { return weighted_sum(g, op(v[0], v[1])); };
  };

  check("matmul", binary([](auto a, auto b) { return matmul(a, b); }),
        {random_tensor({3, 4}, 10), random_tensor({4, 2}, 11)});
  check("add", binary([](auto a, auto b) { return add(a, b); }), {random_tensor({2, 3}, 12), random_tensor({2, 3}, 13)});
  check("mul", binary([](auto a, auto b) { return mul(a, b); }), {random_tensor({2, 3}, 14), random_tensor({2, 3}, 15)});
  check("scale", unary([](auto x) { return scale(x, -1.7); }), {random_tensor({5}, 16)});
  check("add_row_bias", binary([](auto x, auto b) { return add_row_bias(x, b); }),
        {random_tensor({4, 3}, 17), random_tensor({3}, 18)});
  check("add_tiled", binary([](auto x, auto t) { return add_tiled(x, t); }),
        {random_tensor({6, 3}, 19), random_tensor({2, 3}, 20)});
  check("softmax/0", unary([](auto x) { return softmax(x, 0); }), {random_tensor({3, 5}, 21, -2.0, 2.0)});
  check("softmax/1", unary([](auto x) { return softmax(x, 1); }), {random_tensor({3, 5}, 21, -2.0, 2.0)});
  check("layer_norm",
        [](Graph<double>& g, const Vars& v) { return weighted_sum(g, layer_norm(v[0], v[1], v[2])); },
        {random_tensor({3, 6}, 22, -2.0, 2.0), random_tensor({6}, 23, 0.5, 1.5), random_tensor({6}, 24)});
  check("gelu", unary([](auto x) { return gelu(x); }), {random_tensor({4, 4}, 25, -3.0, 3.0)});
  // Points kept away from the clamp corners, where the derivative jumps.
  check("clamp", unary([](auto x) { return clamp(x, 0.0, 1.0); }),
        {Tensor<double>({4}, std::vector<double>{-0.5, 0.3, 0.7, 1.6})});
  const std::vector<std::size_t> rows{2, 0, 2};
  check("gather_rows", unary([&rows](auto x) { return gather_rows(x, rows); }), {random_tensor({3, 4}, 26)});
  const std::vector<std::uint8_t> flags{0, 1, 0, 1};
  check("replace_rows", binary([&flags](auto x, auto t) { return replace_rows(x, t, flags); }),
        {random_tensor({4, 3}, 27), random_tensor({1, 3}, 28)});
  check("attention", unary([](auto qkv) { return attention(qkv, 2, 3, 2); }), {random_tensor({6, 12}, 29)});
  const Tensor<double> target = random_tensor({2, 4}, 30, 0.0, 1.0);
  const std::vector<std::uint8_t> w{1, 0, 1, 1, 0, 1, 1, 1};
  check("masked_smooth_l1", [&](Graph<double>&, const Vars& v) { return masked_smooth_l1(v[0], target, w, 0.25); },
        {Tensor<double>({2, 4}, std::vector<double>{0.1, 0.9, 0.95, -0.4, 0.5, 0.2, 0.61, 2.0})});
  const std::vector<int> labels{2, 0, 1};
  check("cross_entropy", [&](Graph<double>&, const Vars& v) { return cross_entropy(v[0], labels); },
        {random_tensor({3, 3}, 31, -2.0, 2.0)});
  check("sum", [](Graph<double>&, const Vars& v) { return sum(v[0]); }, {random_tensor({3, 2}, 32)});
  return out;
}

inline Image noise_image(int size, std::uint64_t seed) {
  Image img(size, size);
  Rng rng(seed);
  for (auto& v : img.pixels) v = static_cast<float>(rng.uniform());
  return img;
}

inline Canvas noise_canvas(int size, std::uint64_t seed) {
  return assemble_canvas(noise_image(size, seed), noise_image(size, seed + 1), noise_image(size, seed + 2),
                         noise_image(size, seed + 3));
}

inline ModelConfig tiny_config() {
  ModelConfig c;
  c.panel = 8;
  c.patch = 4;
  c.dim = 8;
  c.heads = 2;
  c.depth = 1;
  c.head_depth = 2;
  c.mlp_ratio = 2;
  c.seed = 3;
  return c;
}

struct ModelGradientCheck {
  double worst = 0.0;
  std::string worst_parameter;
};

/// Compares every parameter gradient of the composed model (train and
/// inference masks in one batch) against central differences of the loss.
inline ModelGradientCheck model_gradient_error(const ModelConfig& config = tiny_config()) {
  Model<double> m(config);
  const int panel = config.panel;
  std::vector<Canvas> batch{noise_canvas(panel, 300), noise_canvas(panel, 304)};
  batch[0].mask = sample_mask(m.config(), MaskPhase::Train, 1);
  batch[1].mask = sample_mask(m.config(), MaskPhase::Infer, 1);
  auto params = m.parameters();
  for (auto* p : params) p->zero_grad();
  {
    Graph<double> g;
    g.backward(m.batch_loss(g, std::span<const Canvas>(batch)));
  }
  auto loss_at = [&] {
    Graph<double> g;
    return m.batch_loss(g, std::span<const Canvas>(batch)).value()[0];
  };
  ModelGradientCheck r;
  for (auto* p : params) {
    for (std::size_t i = 0; i < p->value.numel(); ++i) {
      const double x0 = p->value[i];
      p->value[i] = x0 + kFdStep;
      const double up = loss_at();
      p->value[i] = x0 - kFdStep;
      const double down = loss_at();
      p->value[i] = x0;
      const double err = relative_error(p->grad[i], (up - down) / (2.0 * kFdStep));
      if (err > r.worst) {
        r.worst = err;
        r.worst_parameter = p->name;
      }
    }
  }
  return r;
}

}  // namespace iclb::testing
