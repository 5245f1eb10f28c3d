// Synthetic image tasks.
//
// Every sample is a pure function of (task, seed): a procedural scene of a
// flat background and one to three rectangles or disks, then a task-specific
// (input, target) transform. Five tasks form the training mixture; inversion
// is held out as an out-of-domain task and colorization is reserved for
// injecting a backdoor as a task the model has never seen.

#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"

#include "iclb/image.hpp"
#include "iclb/metrics.hpp"
#include "iclb/model.hpp"

namespace iclb {

inline constexpr int kDefaultPanel = 16;

enum class TaskKind { Segmentation, Denoising, LowLight, Destriping, Grayscale, Colorization, Inversion };

struct TaskSpec {
  std::string name;
  TaskKind kind;
  std::vector<MetricSpec> metrics;
  bool in_domain = true;
};

/// All registered tasks in a fixed order.
const std::vector<TaskSpec>& task_registry();
/// Throws std::invalid_argument for an unknown name.
const TaskSpec& find_task(const std::string& name);
/// The five tasks of the training mixture.
std::vector<TaskSpec> in_domain_tasks();
/// Evaluation-only task never seen in training.
const TaskSpec& out_of_domain_task();
/// The headline metric used to compare contexts: mIoU for segmentation, SSIM otherwise.
MetricId primary_metric(const TaskSpec& task);

/// Class colours of the segmentation target: background, rectangle, disk.
const std::vector<Rgb>& segmentation_palette();

enum class ShapeKind { Rectangle, Disk };

struct Shape2D {
  ShapeKind kind;
  double cx, cy;        // centre in pixel units
  double half_w, half_h;  // rectangle half extents
  double radius;        // disk radius
  Rgb color;

  bool covers(int x, int y) const;
};

struct Scene {
  int size = kDefaultPanel;
  Rgb background{};
  std::vector<Shape2D> shapes;
};

Scene make_scene(std::uint64_t seed, int size = kDefaultPanel);
Image rasterize(const Scene& scene);
/// Per-pixel class index: 0 background, 1 rectangle, 2 disk (topmost shape wins).
std::vector<int> class_map(const Scene& scene);

Image gen_base_image(std::uint64_t seed, int size = kDefaultPanel);

struct TaskPair {
  Image input;
  Image target;
};

/// Task transform of a base image. For segmentation the labels come from the
/// scene of `seed`, so `phi` must be gen_base_image(seed).
TaskPair apply_task(const TaskSpec& task, const Image& phi, std::uint64_t seed);

struct TaskSample {
  Image phi;
  Image t;
  std::string task;
  std::uint64_t seed = 0;
};

TaskSample make_sample(const TaskSpec& task, std::uint64_t seed, int size = kDefaultPanel);

/// Context row from `context_seed`, query row from `query_seed`, same task.
Canvas make_canvas_sample(const TaskSpec& task, std::uint64_t context_seed, std::uint64_t query_seed,
                          int size = kDefaultPanel);

Image luminance(const Image& img);

// Building blocks exposed for tests.
Image salt_and_pepper(const Image& img, double rate, std::uint64_t seed);
Image add_stripes(const Image& img, std::uint64_t seed);

struct Split {
  std::string task;
  std::vector<std::uint64_t> train;
  std::vector<std::uint64_t> test;
};

/// Disjoint, deterministic train/test seed ranges for a task.
Split make_split(const TaskSpec& task, int n_train, int n_test, std::uint64_t seed);

/// Pairs every query seed with a different context seed drawn from the same
/// list (deterministic under `pairing_seed`).
std::vector<Canvas> pair_canvases(const TaskSpec& task, const std::vector<std::uint64_t>& seeds,
                                  std::uint64_t pairing_seed, int size = kDefaultPanel);

struct CorpusSize {
  int train = 0;
  int test = 0;
};

/// Per-task corpus sizes. Unequal by design; the out-of-domain task gets a
/// test split only.
std::map<std::string, CorpusSize> default_corpus_sizes();

/// Generates the splits for `sizes`. Tasks with train == 0 receive test seeds only.
std::map<std::string, Split> make_corpora(const std::map<std::string, CorpusSize>& sizes, std::uint64_t seed);

/// {task: {train: [first, count], test: [first, count]}, ...}
nlohmann::json corpus_manifest(const std::map<std::string, Split>& corpora, std::uint64_t seed);

}  // namespace iclb
