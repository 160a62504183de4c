#pragma once

// Teacher-forced training: loss, condition dropping schedule, Shuffle-Views
// batches, AdamW steps and the checkpoint container.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <span>
#include <vector>

#include "mvar/adamw.hpp"
#include "mvar/dataset.hpp"
#include "mvar/model.hpp"
#include "mvar/sequence.hpp"

namespace mvar {

struct TrainConfig {
  double lr = 4e-4;
  double beta1 = 0.9;
  double beta2 = 0.95;
  double eps = 1e-8;
  double weight_decay = 0.05;
  double clip_norm = 1.0;  // <= 0 disables clipping
  std::size_t batch = 16;
  std::size_t iterations = 3000;
  std::size_t ramp = 1000;
  std::uint64_t seed = 0;
  std::size_t log_every = 50;
  ShuffleMode shuffle = ShuffleMode::kFull;
  // When set, every sample uses exactly these conditions and the dropping
  // schedule is bypassed.
  std::optional<ConditionSet> fixed_conditions;

  void validate() const;

  // Large-scale settings: batch 1024, 30k iterations, ramp 10k.
  static TrainConfig full_scale();
};

// Mean over unmasked positions of -log softmax(logits)[target].
// pad_mask[i] != 0 marks position i as padding.
Tensor ar_loss(const Tensor& logits, std::span<const std::int64_t> targets,
               std::span<const std::uint8_t> pad_mask = {});

// min(0.5, 0.5 * iter / ramp).
double drop_prob(std::size_t iter, std::size_t ramp);

// Draws which conditions survive at drop probability p: text is dropped with
// probability p, the image and shape conditions are each switched on with
// probability p; text, image and shape never all appear together.
ConditionSet draw_conditions(double p, Rng& rng);

// One training sequence for `sample`: a fresh view order plus the drawn
// conditions packed into the context.
TrainingSequence apply_condition_policy(const SceneSample& sample, std::size_t iter, Rng& rng,
                                        const TrainConfig& train, const ModelConfig& model);

// Sequence with the given conditions and order, no randomness.
TrainingSequence make_sequence(const SceneSample& sample, const ConditionSet& conditions,
                               const ViewOrder& order, const ModelConfig& model);

// Scene indices for each slot of batch `iter`: epochs are consecutive
// permutations of the dataset derived from (seed, epoch).
std::vector<std::size_t> batch_indices(std::size_t iter, std::size_t batch, std::size_t dataset_size,
                                       std::uint64_t seed);

std::vector<TrainingSequence> make_batch(std::span<const SceneSample> data, std::size_t iter,
                                         const TrainConfig& train, const ModelConfig& model);

struct StepResult {
  double loss = 0.0;
  double grad_norm = 0.0;
};

// Forward/backward over the batch (mean loss), clipping, one AdamW update.
StepResult train_step(ModelState& state, AdamWState& opt, std::span<const TrainingSequence> batch,
                      const TrainConfig& train);

AdamWState make_optimizer(const ModelState& state, const TrainConfig& train);

struct TrainSession {
  ModelState model;
  AdamWState optimizer;
  TrainConfig config;
  std::size_t iteration = 0;
  std::vector<double> losses;
};

TrainSession start_training(const ModelConfig& model, const TrainConfig& train);

// Runs iterations [session.iteration, until). Log lines go to `log` if given:
// "iter=<i> loss=<l> p_drop=<p> time=<s>".
void train(TrainSession& session, std::span<const SceneSample> data, std::size_t until,
           std::ostream* log = nullptr);

// ---- checkpoints --------------------------------------------------------------

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
  ModelState model;
  std::optional<AdamWState> optimizer;
  std::size_t iteration = 0;
};

void save_checkpoint(const std::filesystem::path& path, const ModelState& model,
                     const AdamWState* optimizer = nullptr, std::size_t iteration = 0);
std::vector<unsigned char> encode_checkpoint(const ModelState& model, const AdamWState* optimizer,
                                             std::size_t iteration);

// Reconstructs the model from the stored config.
Checkpoint load_checkpoint(const std::filesystem::path& path);
Checkpoint decode_checkpoint(std::span<const unsigned char> bytes);

// Copies stored parameters into `target`, whose shapes come from its own
// config; throws CheckpointShapeError naming the first parameter that differs.
void load_parameters(const Checkpoint& ckpt, ModelState& target);

void save_session(const std::filesystem::path& path, const TrainSession& session);
TrainSession resume_session(const std::filesystem::path& path, const TrainConfig& train);

}  // namespace mvar
