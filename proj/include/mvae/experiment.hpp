#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "mvae/evaluation.hpp"
#include "mvae/masking.hpp"
#include "mvae/model_spec.hpp"
#include "mvae/training.hpp"

namespace mvae {

struct ExperimentConfig {
  std::string dataset = "mnist";  // "mnist" or "svhn"
  Missingness missingness = Missingness::Mcar;
  BlockExtent block_extent = BlockExtent::Full;
  std::vector<Variant> methods = {Variant::NoInd, Variant::EoInd, Variant::EdInd};
  int replicates = 1;
  std::uint64_t seed = 0;
  // The seed field is replaced by the replicate's training seed.
  TrainConfig train;
  int importance_samples = 256;
  int imputation_samples = 256;
  int grid_samples = 8;
  std::filesystem::path data_dir;  // MNIST-style IDX file names
  std::filesystem::path out_dir;
  // 0 = every training-file image not used for validation.
  std::size_t train_count = 0;
  std::size_t val_count = 10000;
  // 0 = the whole test file.
  std::size_t test_count = 0;

  void validate() const;
  std::string to_json() const;
};

// Seeds of replicate r: every method of a replicate shares the masks, the
// training seed (shuffles, noise) and the evaluation seed.
struct ReplicateSeeds {
  std::uint64_t replicate;  // derive_seed(seed, "replicate", r)
  std::uint64_t training;   // derive_seed(replicate, "train")
  std::uint64_t evaluation; // derive_seed(replicate, "eval")
};
ReplicateSeeds replicate_seeds(std::uint64_t root, int replicate);

// <out_dir>/replicate-NN and the files inside it.
struct ReplicatePaths {
  std::filesystem::path dir;

  std::filesystem::path images(const std::string& split) const;
  std::filesystem::path labels(const std::string& split) const;
  std::filesystem::path masks(const std::string& split) const;
  std::filesystem::path corrupted(const std::string& split) const;
  std::filesystem::path assignment() const;
  std::filesystem::path manifest() const;
  std::filesystem::path method_dir(Variant method) const;
  std::filesystem::path checkpoint(Variant method) const;
  std::filesystem::path epoch_log(Variant method) const;
  std::filesystem::path model_spec(Variant method) const;
  std::filesystem::path metrics(Variant method) const;
};
ReplicatePaths replicate_paths(const std::filesystem::path& out_dir, int replicate);

struct MaskedSplits {
  MaskedDataset train;
  MaskedDataset val;
  MaskedDataset test;
};

using ProgressLog = std::function<void(const std::string&)>;

// Splits the source files, samples frozen masks for every split and writes
// images, labels, masks and zero-imputed images as IDX files (plus the MNAR
// class assignment) into the replicate directory.
MaskedSplits make_masks(const ExperimentConfig& config, int replicate);

// Reads back what make_masks wrote.
MaskedSplits load_masked_splits(const ExperimentConfig& config, int replicate);

// Trains one method on the replicate's frozen data, saving the checkpoint and
// the epoch log after every epoch. With resume, continues from an existing
// checkpoint.
Checkpoint train_method(const ExperimentConfig& config, int replicate, Variant method,
                        bool resume, const ProgressLog& log = {});

// Evaluates the best-validation parameters of a trained method on the test
// split and writes the record to the method's metrics file.
MetricReport evaluate_method(const ExperimentConfig& config, int replicate, Variant method,
                             const ProgressLog& log = {});

// Grid of the first grid_samples test images with one mean reconstruction
// column per configured method.
void render_replicate_grid(const ExperimentConfig& config, int replicate,
                           const std::filesystem::path& path);

struct SignificanceRecord {
  std::string metric;
  Variant method;
  Variant reference = Variant::EdInd;
  int n = 0;
  double mean_difference = 0.0;  // reference − method
  double t = 0.0;
  int dof = 0;
  double p_two_sided = 1.0;
  // Alternative: the reference is better (higher log-likelihood, lower
  // bits/pixel or MSE).
  double p_one_sided = 1.0;
  std::string stars;
  std::string error;  // nonempty when the test could not be run
};

// Paired tests of every other method against ed_ind for each metric, pairing
// records by replicate.
std::vector<SignificanceRecord> significance_tests(const std::vector<MetricReport>& records);
std::string significance_to_json(const SignificanceRecord& record);

struct ExperimentResult {
  std::vector<MetricReport> records;
  std::vector<SignificanceRecord> significance;
};

// Full pipeline. Finished steps found on disk (masks, finished checkpoints,
// metrics files) are reused, so an interrupted run resumes where it stopped.
// Writes results.jsonl, significance.jsonl and grid-replicate-NN.png into
// out_dir.
ExperimentResult run_experiment(const ExperimentConfig& config, const ProgressLog& log = {});

}  // namespace mvae
