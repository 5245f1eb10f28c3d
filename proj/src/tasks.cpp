#include "iclb/tasks.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "json.hpp"

#include "iclb/rng.hpp"

namespace iclb {

namespace {

constexpr std::uint64_t kSceneTag = 0x5343454e45ULL;
constexpr std::uint64_t kNoiseTag = 0x4e4f495345ULL;
constexpr std::uint64_t kStripeTag = 0x5354524950ULL;
constexpr std::uint64_t kSplitTag = 0x53504c4954ULL;
constexpr std::uint64_t kPairTag = 0x50414952ULL;

constexpr double kLowLightGain = 0.3;
constexpr double kNoiseRate = 0.1;

std::uint64_t name_hash(const std::string& s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

double color_distance(const Rgb& a, const Rgb& b) {
  double d = 0.0;
  for (int c = 0; c < 3; ++c) d += (a[c] - b[c]) * (a[c] - b[c]);
  return std::sqrt(d);
}

Rgb random_color(Rng& rng) {
  return {static_cast<float>(rng.uniform()), static_cast<float>(rng.uniform()),
          static_cast<float>(rng.uniform())};
}

std::vector<TaskSpec> build_registry() {
  const auto m = [](MetricId id) { return metric_spec(id); };
  const std::vector<MetricSpec> quality{m(MetricId::PSNR), m(MetricId::SSIM)};
  return {
      {"segmentation", TaskKind::Segmentation, {m(MetricId::MIoU)}, true},
      {"low_light", TaskKind::LowLight,
       {m(MetricId::PSNR), m(MetricId::SSIM), m(MetricId::RMSE), m(MetricId::ARel), m(MetricId::Delta1)},
       true},
      {"destriping", TaskKind::Destriping, quality, true},
      {"denoising", TaskKind::Denoising, quality, true},
      {"grayscale", TaskKind::Grayscale, quality, true},
      {"colorization", TaskKind::Colorization, quality, false},
      {"inversion", TaskKind::Inversion, quality, false},
  };
}

}  // namespace

const std::vector<TaskSpec>& task_registry() {
  static const std::vector<TaskSpec> registry = build_registry();
  return registry;
}

const TaskSpec& find_task(const std::string& name) {
  for (const auto& t : task_registry()) {
    if (t.name == name) return t;
  }
  throw std::invalid_argument("unknown task '" + name + "'");
}

std::vector<TaskSpec> in_domain_tasks() {
  std::vector<TaskSpec> out;
  for (const auto& t : task_registry()) {
    if (t.in_domain) out.push_back(t);
  }
  return out;
}

const TaskSpec& out_of_domain_task() { return find_task("inversion"); }

MetricId primary_metric(const TaskSpec& task) {
  return task.kind == TaskKind::Segmentation ? MetricId::MIoU : MetricId::SSIM;
}

const std::vector<Rgb>& segmentation_palette() {
  static const std::vector<Rgb> palette{{0.0f, 0.0f, 0.0f}, {1.0f, 0.0f, 0.0f}, {0.0f, 0.0f, 1.0f}};
  return palette;
}

bool Shape2D::covers(int x, int y) const {
  const double px = x + 0.5;
  const double py = y + 0.5;
  if (kind == ShapeKind::Rectangle) {
    return std::abs(px - cx) <= half_w && std::abs(py - cy) <= half_h;
  }
  return (px - cx) * (px - cx) + (py - cy) * (py - cy) <= radius * radius;
}

Scene make_scene(std::uint64_t seed, int size) {
  Rng rng(derive_seed(seed, {kSceneTag}));
  Scene s;
  s.size = size;
  s.background = random_color(rng);
  const int count = rng.range(1, 3);
  const double scale = size / 16.0;
  for (int i = 0; i < count; ++i) {
    Shape2D sh{};
    sh.kind = rng.uniform() < 0.5 ? ShapeKind::Rectangle : ShapeKind::Disk;
    sh.cx = rng.uniform(0.2, 0.8) * size;
    sh.cy = rng.uniform(0.2, 0.8) * size;
    sh.half_w = rng.uniform(2.0, 5.0) * scale;
    sh.half_h = rng.uniform(2.0, 5.0) * scale;
    sh.radius = rng.uniform(2.5, 5.0) * scale;
    // Keep shapes distinguishable from the background.
    Rgb color = random_color(rng);
    for (int tries = 0; tries < 16 && color_distance(color, s.background) < 0.4; ++tries) {
      color = random_color(rng);
    }
    sh.color = color;
    s.shapes.push_back(sh);
  }
  return s;
}

Image rasterize(const Scene& scene) {
  Image img = Image::filled(scene.size, scene.size, scene.background);
  for (const auto& sh : scene.shapes) {
    for (int y = 0; y < scene.size; ++y) {
      for (int x = 0; x < scene.size; ++x) {
        if (!sh.covers(x, y)) continue;
        for (int c = 0; c < 3; ++c) img.at(y, x, c) = sh.color[c];
      }
    }
  }
  return img;
}

std::vector<int> class_map(const Scene& scene) {
  std::vector<int> labels(static_cast<std::size_t>(scene.size) * scene.size, 0);
  for (const auto& sh : scene.shapes) {
    const int cls = sh.kind == ShapeKind::Rectangle ? 1 : 2;
    for (int y = 0; y < scene.size; ++y) {
      for (int x = 0; x < scene.size; ++x) {
        if (sh.covers(x, y)) labels[static_cast<std::size_t>(y) * scene.size + x] = cls;
      }
    }
  }
  return labels;
}

Image gen_base_image(std::uint64_t seed, int size) { return rasterize(make_scene(seed, size)); }

Image luminance(const Image& img) {
  Image out = img;
  for (std::size_t p = 0; p < img.pixels.size() / 3; ++p) {
    const float y = 0.299f * img.pixels[p * 3] + 0.587f * img.pixels[p * 3 + 1] + 0.114f * img.pixels[p * 3 + 2];
    out.pixels[p * 3] = out.pixels[p * 3 + 1] = out.pixels[p * 3 + 2] = y;
  }
  return out;
}

Image salt_and_pepper(const Image& img, double rate, std::uint64_t seed) {
  Rng rng(derive_seed(seed, {kNoiseTag}));
  Image out = img;
  const std::size_t n = static_cast<std::size_t>(img.height) * img.width;
  for (std::size_t p = 0; p < n; ++p) {
    const double u = rng.uniform();
    const double v = rng.uniform();
    if (u >= rate) continue;
    const float value = v < 0.5 ? 0.0f : 1.0f;
    for (int c = 0; c < img.channels; ++c) out.pixels[p * img.channels + c] = value;
  }
  return out;
}

Image add_stripes(const Image& img, std::uint64_t seed) {
  Rng rng(derive_seed(seed, {kStripeTag}));
  Image out = img;
  std::vector<int> rows(img.height);
  for (int y = 0; y < img.height; ++y) rows[y] = y;
  rng.shuffle(rows);
  const int count = std::min(img.height, rng.range(2, 4));
  for (int k = 0; k < count; ++k) {
    for (int x = 0; x < img.width; ++x) {
      for (int c = 0; c < img.channels; ++c) out.at(rows[k], x, c) = 1.0f;
    }
  }
  return out;
}

TaskPair apply_task(const TaskSpec& task, const Image& phi, std::uint64_t seed) {
  switch (task.kind) {
    case TaskKind::Segmentation: {
      const Scene scene = make_scene(seed, phi.height);
      const auto labels = class_map(scene);
      const auto& palette = segmentation_palette();
      Image t(phi.height, phi.width, 3);
      for (std::size_t p = 0; p < labels.size(); ++p) {
        for (int c = 0; c < 3; ++c) t.pixels[p * 3 + c] = palette[labels[p]][c];
      }
      return {phi, t};
    }
    case TaskKind::Denoising:
      return {salt_and_pepper(phi, kNoiseRate, seed), phi};
    case TaskKind::LowLight: {
      Image dark = phi;
      for (auto& v : dark.pixels) v = static_cast<float>(kLowLightGain) * v;
      return {dark, phi};
    }
    case TaskKind::Destriping:
      return {add_stripes(phi, seed), phi};
    case TaskKind::Grayscale:
      return {phi, luminance(phi)};
    case TaskKind::Colorization:
      return {luminance(phi), phi};
    case TaskKind::Inversion: {
      Image inv = phi;
      for (auto& v : inv.pixels) v = 1.0f - v;
      return {phi, inv};
    }
  }
  throw std::invalid_argument("apply_task: unknown task id for '" + task.name + "'");
}

TaskSample make_sample(const TaskSpec& task, std::uint64_t seed, int size) {
  const Image base = gen_base_image(seed, size);
  auto [input, target] = apply_task(task, base, seed);
  return {std::move(input), std::move(target), task.name, seed};
}

Canvas make_canvas_sample(const TaskSpec& task, std::uint64_t context_seed, std::uint64_t query_seed,
                          int size) {
  const TaskSample ctx = make_sample(task, context_seed, size);
  const TaskSample query = make_sample(task, query_seed, size);
  return assemble_canvas(ctx.phi, ctx.t, query.phi, query.t);
}

Split make_split(const TaskSpec& task, int n_train, int n_test, std::uint64_t seed) {
  if (n_train <= 0 || n_test <= 0) {
    throw std::invalid_argument("make_split: train and test sizes must be positive");
  }
  Split s;
  s.task = task.name;
  const std::uint64_t base = derive_seed(seed, {kSplitTag, name_hash(task.name)});
  for (int i = 0; i < n_train; ++i) s.train.push_back(base + static_cast<std::uint64_t>(i));
  for (int i = 0; i < n_test; ++i) s.test.push_back(base + static_cast<std::uint64_t>(n_train + i));
  return s;
}

std::vector<Canvas> pair_canvases(const TaskSpec& task, const std::vector<std::uint64_t>& seeds,
                                  std::uint64_t pairing_seed, int size) {
  std::vector<TaskSample> samples;
  samples.reserve(seeds.size());
  for (auto s : seeds) samples.push_back(make_sample(task, s, size));
  Rng rng(derive_seed(pairing_seed, {kPairTag, name_hash(task.name)}));
  std::vector<Canvas> out;
  out.reserve(seeds.size());
  const std::size_t n = seeds.size();
  for (std::size_t i = 0; i < n; ++i) {
    std::size_t j = i;
    if (n > 1) {
      j = static_cast<std::size_t>(rng.below(n - 1));
      if (j >= i) ++j;
    }
    out.push_back(assemble_canvas(samples[j].phi, samples[j].t, samples[i].phi, samples[i].t));
  }
  return out;
}

std::map<std::string, CorpusSize> default_corpus_sizes() {
  return {
      {"segmentation", {2000, 48}}, {"destriping", {500, 48}}, {"denoising", {500, 48}},
      {"grayscale", {500, 48}},     {"low_light", {120, 48}},  {"colorization", {200, 48}},
      {"inversion", {0, 48}},
  };
}

std::map<std::string, Split> make_corpora(const std::map<std::string, CorpusSize>& sizes, std::uint64_t seed) {
  std::map<std::string, Split> out;
  for (const auto& [name, size] : sizes) {
    const TaskSpec& task = find_task(name);
    if (size.train > 0) {
      out[name] = make_split(task, size.train, size.test, seed);
    } else {
      // Evaluation-only: draw a one-sample train range and drop it.
      Split s = make_split(task, 1, size.test, seed);
      s.train.clear();
      out[name] = std::move(s);
    }
  }
  return out;
}

nlohmann::json corpus_manifest(const std::map<std::string, Split>& corpora, std::uint64_t seed) {
  nlohmann::json tasks = nlohmann::json::object();
  for (const auto& [name, split] : corpora) {
    const auto range = [](const std::vector<std::uint64_t>& v) {
      return v.empty() ? nlohmann::json::array({nullptr, 0}) : nlohmann::json::array({v.front(), v.size()});
    };
    tasks[name] = {{"train", range(split.train)},
                   {"test", range(split.test)},
                   {"in_domain", find_task(name).in_domain}};
  }
  return {{"seed", seed}, {"panel", kDefaultPanel}, {"tasks", tasks}};
}

}  // namespace iclb
