#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "mvae/masking.hpp"
#include "mvae/model.hpp"

namespace mvae {

struct TrainConfig {
  double learning_rate = 1e-3;
  int batch_size = 256;
  int max_epochs = 200;
  int patience = 10;
  std::uint64_t seed = 0;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  // When false, epoch records carry wall_time_s = 0 so logs compare bytewise.
  bool record_wall_time = true;

  // Throws std::invalid_argument naming the offending field.
  void validate() const;
};

template <class T>
struct AdamMoments {
  Parameters<T> first;
  Parameters<T> second;
};

template <class T>
AdamMoments<T> zero_moments(const Parameters<T>& like);

// One bias-corrected Adam update taking an ascent step along `grads` (the
// ELBO is maximised). t is the 1-based step index. Throws if any gradient is
// non-finite, naming the tensor; nothing is modified in that case.
template <class T>
void adam_step(Parameters<T>& params, const Parameters<T>& grads,
               AdamMoments<T>& moments, const TrainConfig& config,
               std::int64_t t);

struct EpochRecord {
  int epoch = 0;  // 1-based
  double train_elbo = 0.0;  // mean per-image ELBO over the epoch's batches
  double val_elbo = 0.0;    // mean per-image single-sample validation ELBO
  double wall_time_s = 0.0;

  bool operator==(const EpochRecord&) const = default;
};

std::string epoch_record_to_json(const EpochRecord& record);
EpochRecord epoch_record_from_json(const std::string& line);

// Complete training state. All randomness is drawn from substreams keyed by
// (seed, purpose, epoch or step), so the step counter and epoch number are the
// whole random state.
struct Checkpoint {
  ModelSpec spec;
  TrainConfig config;
  Parameters<float> params;       // after the last completed epoch
  Parameters<float> best_params;  // highest validation ELBO so far
  AdamMoments<float> moments;
  std::int64_t step = 0;          // Adam steps taken
  int epoch = 0;                  // completed epochs
  int best_epoch = 0;             // 0 until the first validation
  double best_val_elbo = 0.0;     // meaningful once best_epoch > 0
  int epochs_since_improvement = 0;
  bool finished = false;
  std::vector<EpochRecord> log;
};

// Container layout: 8-byte magic "MVAECKPT", u64 little-endian header length,
// a JSON header (metadata plus a tensor directory of name, dtype, shape and
// byte offset), then the tensor payloads as little-endian IEEE-754 values.
// Doubles in the header are stored as their 64-bit patterns.
void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& path);
std::vector<std::uint8_t> serialize_checkpoint(const Checkpoint& ckpt);
Checkpoint parse_checkpoint(std::span<const std::uint8_t> bytes);

struct TrainHooks {
  // Continue from this state instead of a fresh initialisation.
  std::optional<Checkpoint> resume;
  // Called after every completed epoch with the updated state.
  std::function<void(const Checkpoint&)> on_epoch;
};

// Single-sample ELBO maximisation with per-epoch shuffling and early stopping
// on the validation ELBO. An epoch improves when its validation ELBO is
// strictly greater than the best so far; training stops once
// epochs_since_improvement reaches patience after a non-improving epoch, or at
// max_epochs. The last partial batch is kept.
Checkpoint train(const ModelSpec& spec, const MaskedDataset& train_set,
                 const MaskedDataset& val_set, const TrainConfig& config,
                 const TrainHooks& hooks = {});

// Mean single-sample ELBO with noise from the substream (seed, purpose, index).
double mean_elbo(const ConditionalVae<float>& model, const Parameters<float>& params,
                 const MaskedDataset& data, int batch_size, std::uint64_t seed,
                 const std::string& purpose, std::uint64_t index);

}  // namespace mvae
