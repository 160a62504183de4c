#pragma once

// Experiment configuration (INI file) and the desk-scale evaluation harness.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

#include "mvar/dataset.hpp"
#include "mvar/metrics.hpp"
#include "mvar/model.hpp"
#include "mvar/sampler.hpp"
#include "mvar/trainer.hpp"

namespace mvar {

struct ExperimentConfig {
  ModelConfig model;
  TrainConfig train;
  DatasetConfig data;
  std::vector<std::uint64_t> train_seeds;
  std::vector<std::uint64_t> eval_seeds;
  std::size_t runs = 1;  // independent training seeds per variant
  std::filesystem::path out_dir;

  // Stable hash of the canonical INI text.
  std::string fingerprint() const;
};

// Sections [model] [train] [data] [experiment]; unknown keys are errors.
ExperimentConfig parse_config(const std::string& ini_text);
ExperimentConfig load_config(const std::filesystem::path& path);
std::string dump_config(const ExperimentConfig& cfg);

// Worker count from MVAR_THREADS (default 1).
std::size_t worker_threads();

enum class Task {
  kT2mv,         // caption only
  kI2mv,         // reference = view 0, remaining views generated
  kI2mvAnyView,  // reference = view (scene index mod N), ring continues from it
  kShape2mv,     // point cloud only
};
std::string task_name(Task task);

struct SceneScore {
  std::vector<double> psnr;  // per generated view
  std::vector<double> ssim;
  double exact = 0.0;
  std::vector<Image> images;
};

SceneScore evaluate_scene(const ModelState& state, const SceneSample& sample, Task task,
                          std::size_t scene_index);

// Means over scenes; keys "<prefix>psnr", "<prefix>ssim", "<prefix>exact" and
// "<prefix>psnr.view<k>". Scenes run on worker_threads() threads and are
// merged in scene order.
void evaluate_task(const ModelState& state, std::span<const SceneSample> samples, Task task,
                   const std::string& prefix, MetricReport& report,
                   const std::filesystem::path& sample_dir = {});

const std::vector<std::string>& experiment_names();

MetricReport run_experiment(const std::string& name, const ExperimentConfig& cfg,
                            std::ostream* log = nullptr);

// Metrics of one checkpoint on a dataset for all three tasks.
MetricReport evaluate_checkpoint(const ModelState& state, std::span<const SceneSample> samples);

}  // namespace mvar
