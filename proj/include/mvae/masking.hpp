#pragma once

#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "mvae/data_io.hpp"
#include "mvae/seeding.hpp"

namespace mvae {

// `block_count` square blocks of side `block_side` (odd, so each block has a
// center pixel).
struct MaskConfig {
  int block_count = 0;
  int block_side = 0;

  bool operator==(const MaskConfig&) const = default;
};

struct MaskConfigTable {
  std::vector<MaskConfig> configs;

  static MaskConfigTable mnist();
  static MaskConfigTable svhn();
  // "mnist" or "svhn".
  static MaskConfigTable for_dataset(const std::string& dataset);

  void validate(int height, int width) const;
};

// Pixel-level missingness mask, 1 = observed, 0 = missing. Broadcast over
// colour channels.
struct Mask {
  int height = 0;
  int width = 0;
  std::vector<std::uint8_t> observed;

  static Mask all_observed(int height, int width);
  static Mask all_missing(int height, int width);

  std::size_t pixels() const { return observed.size(); }
  std::size_t observed_count() const;
  std::size_t missing_count() const { return pixels() - observed_count(); }
  double missing_fraction() const;
  Mask complement() const;
  bool operator==(const Mask&) const = default;
};

// How much of its nominal side a block covers. Full: the k×k square centred
// on the block centre. Trimmed: the (k−1)×(k−1) square whose top-left corner
// is centre − (k−1)/2, i.e. the half-open slice [c − k/2, c + k/2). Centres
// are drawn identically in both cases.
enum class BlockExtent { Full, Trimmed };
std::string to_string(BlockExtent e);
BlockExtent parse_block_extent(const std::string& text);

struct Block {
  int center_row = 0;
  int center_col = 0;
  int side = 0;    // nominal side from the config
  int extent = 0;  // side of the zeroed square

  int top() const { return center_row - (side - 1) / 2; }
  int left() const { return center_col - (side - 1) / 2; }
};

// A sampled mask together with the blocks that produced it.
struct MaskDraw {
  MaskConfig config;
  std::vector<Block> blocks;
  Mask mask;
};

enum class Missingness { Mcar, Mnar };
std::string to_string(Missingness m);
Missingness parse_missingness(const std::string& text);

using MnarAssignment = std::map<int, MaskConfig>;

// Centres are uniform over every position that keeps the whole block inside
// the image; blocks may overlap.
MaskDraw place_blocks(const MaskConfig& config, int height, int width,
                      Rng& rng, BlockExtent extent = BlockExtent::Full);

MaskDraw sample_mcar_mask(const MaskConfigTable& table, int height, int width,
                          Rng& rng, BlockExtent extent = BlockExtent::Full);

// Each class independently draws one config from the table (with
// replacement across classes).
MnarAssignment assign_mnar_configs(const MaskConfigTable& table,
                                   int num_classes, Rng& rng);

MaskDraw sample_mnar_mask(const MnarAssignment& assignment, int label,
                          int height, int width, Rng& rng,
                          BlockExtent extent = BlockExtent::Full);

// x̃ = m ⊙ x. `x` is H×W×C (NHWC, one image).
std::vector<double> corrupt_zero(std::span<const double> x, const Mask& m,
                                 int channels);
// x̃ = m ⊙ x + (1 − m) ⊙ mu.
std::vector<double> corrupt_mean(std::span<const double> x, const Mask& m,
                                 std::span<const double> mu, int channels);

// Per-element mean over the (uncorrupted) training images.
std::vector<double> compute_mean_image(const ImageDataset& train);

struct MaskedSample {
  std::vector<double> x;
  Mask m;
  std::vector<double> x_tilde;
  int label = 0;
};

// A dataset with one frozen mask per image.
struct MaskedDataset {
  ImageDataset images;
  std::vector<Mask> masks;

  std::size_t size() const { return images.size(); }
  MaskedSample sample(std::size_t i) const;  // zero-imputed x̃
};

// Masks for every image; image i uses the substream (seed, purpose, i).
std::vector<Mask> generate_masks(const ImageDataset& dataset,
                                 Missingness missingness,
                                 const MaskConfigTable& table,
                                 const MnarAssignment& assignment,
                                 std::uint64_t seed,
                                 const std::string& purpose,
                                 BlockExtent extent = BlockExtent::Full);

IdxTensor masks_to_idx(std::span<const Mask> masks);
std::vector<Mask> masks_from_idx(const IdxTensor& tensor);

// x̃ levels (zero imputation) for a whole masked dataset, as an IDX image file.
IdxTensor corrupted_to_idx(const MaskedDataset& dataset);

std::string assignment_to_json(const MnarAssignment& assignment);
MnarAssignment assignment_from_json(const std::string& text);

}  // namespace mvae
