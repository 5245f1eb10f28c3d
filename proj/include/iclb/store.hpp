// Run configuration, checkpoint files and report emission.
//
// Checkpoint layout (all integers little-endian):
//
//   "ICLB"            4 bytes magic
//   u32 version       currently 1
//   u64 digest        FNV-1a of ModelConfig::canonical()
//   u32 count         number of parameter blobs
//   count × blob:
//     u32 name_len, name bytes
//     u32 rank, rank × u64 dims
//     f32 values      product(dims) IEEE-754 singles
//
// A JSON sidecar `<path>.json` carries the model config, training history
// and attack provenance.

#pragma once

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"

#include "iclb/harness.hpp"
#include "iclb/model.hpp"

namespace iclb {

/// Raised for malformed configs, checkpoints and reports.
class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class AttackMode { TaskSpecific, TaskAgnostic, NewTask };
std::string attack_mode_name(AttackMode m);
AttackMode attack_mode_from_name(const std::string& s);

struct DefenseConfig {
  std::vector<double> fractions{0.01, 0.10, 1.00};
  int epochs = 5;
  /// Task whose contexts the prompt sweep scores; empty means the attacked task.
  std::string sweep_task;
};

struct RunConfig {
  ExperimentConfig experiment;
  AttackMode attack_mode = AttackMode::TaskSpecific;
  DefenseConfig defense;
  BlendConfig blend;
  std::string output_dir;

  /// Defaults: task-specific attack on segmentation at ε = 0.25.
  static RunConfig defaults();
  /// Sets every seed (data, training, poisoning, model init) to `seed`.
  void override_seed(std::uint64_t seed);
  void validate() const;
};

/// Missing keys take defaults; unknown keys throw FormatError naming the key.
RunConfig run_config_from_json(const nlohmann::json& j);
nlohmann::json run_config_to_json(const RunConfig& cfg);
/// Throws std::runtime_error naming the path when it cannot be read.
RunConfig load_run_config(const std::filesystem::path& path);

nlohmann::json model_config_to_json(const ModelConfig& cfg);
ModelConfig model_config_from_json(const nlohmann::json& j);

inline constexpr std::uint32_t kCheckpointVersion = 1;

void save_checkpoint(const Model<float>& model, const std::filesystem::path& path,
                     const nlohmann::json& metadata = nlohmann::json::object());
/// Rebuilds the model from `path` under `config`. Throws FormatError on a bad
/// magic, version, digest mismatch, unexpected blob or truncation.
Model<float> load_checkpoint(const std::filesystem::path& path, const ModelConfig& config);
/// Reads the model config from the sidecar, then loads.
Model<float> load_checkpoint(const std::filesystem::path& path);
nlohmann::json load_checkpoint_metadata(const std::filesystem::path& path);

/// Fixed two-decimal rendering with a dot separator; "inf"/"-inf" for
/// infinities and "0.00" instead of "-0.00".
std::string format_fixed2(double v);

enum class ReportFormat { Csv, Json };
ReportFormat report_format_from_name(const std::string& s);

/// CSV header: attack,eval_task,metric,triggered,raw,delta.
std::string report_to_csv(const MetricReport& report);
void write_report(const MetricReport& report, ReportFormat format, const std::filesystem::path& path);
MetricReport read_report_json(const std::filesystem::path& path);

void write_text(const std::filesystem::path& path, const std::string& text);
std::string read_text(const std::filesystem::path& path);

std::string blend_to_csv(const BlendResult& r);
std::string prompt_sweep_to_csv(const PromptSweep& s);

}  // namespace iclb
