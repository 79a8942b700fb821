#include "mvae/masking.hpp"

#include <algorithm>
#include <random>
#include <stdexcept>

#include <nlohmann/json.hpp>

namespace mvae {

MaskConfigTable MaskConfigTable::mnist() {
  return {{{10, 5}, {12, 5}, {5, 7}, {6, 7}, {3, 9},
           {4, 9}, {2, 11}, {3, 11}, {1, 13}, {1, 15}}};
}

MaskConfigTable MaskConfigTable::svhn() {
  return {{{12, 5}, {5, 7}, {6, 7}, {3, 9}, {4, 9},
           {2, 11}, {3, 11}, {2, 13}, {1, 15}, {1, 17}}};
}

MaskConfigTable MaskConfigTable::for_dataset(const std::string& dataset) {
  if (dataset == "mnist") return mnist();
  if (dataset == "svhn") return svhn();
  throw std::invalid_argument("no mask table for dataset '" + dataset + "'");
}

void MaskConfigTable::validate(int height, int width) const {
  if (configs.empty()) throw std::invalid_argument("empty mask config table");
  for (const auto& c : configs) {
    if (c.block_count < 1 || c.block_side < 1 || c.block_side % 2 == 0) {
      throw std::invalid_argument(
          "mask config needs a positive block count and odd block side");
    }
    if (c.block_side > std::min(height, width)) {
      throw std::invalid_argument("block side " + std::to_string(c.block_side) +
                                  " does not fit in a " +
                                  std::to_string(height) + "x" +
                                  std::to_string(width) + " image");
    }
  }
}

Mask Mask::all_observed(int height, int width) {
  return {height, width, std::vector<std::uint8_t>(std::size_t(height) * width, 1)};
}

Mask Mask::all_missing(int height, int width) {
  return {height, width, std::vector<std::uint8_t>(std::size_t(height) * width, 0)};
}

std::size_t Mask::observed_count() const {
  return std::size_t(std::count(observed.begin(), observed.end(), 1));
}

double Mask::missing_fraction() const {
  return pixels() == 0 ? 0.0 : double(missing_count()) / double(pixels());
}

Mask Mask::complement() const {
  Mask out = *this;
  for (auto& v : out.observed) v = std::uint8_t(1 - v);
  return out;
}

std::string to_string(Missingness m) {
  return m == Missingness::Mcar ? "mcar" : "mnar";
}

Missingness parse_missingness(const std::string& text) {
  if (text == "mcar") return Missingness::Mcar;
  if (text == "mnar") return Missingness::Mnar;
  throw std::invalid_argument("unknown missingness '" + text + "'");
}

std::string to_string(BlockExtent e) {
  return e == BlockExtent::Full ? "full" : "trimmed";
}

BlockExtent parse_block_extent(const std::string& text) {
  if (text == "full") return BlockExtent::Full;
  if (text == "trimmed") return BlockExtent::Trimmed;
  throw std::invalid_argument("unknown block extent '" + text + "'");
}

MaskDraw place_blocks(const MaskConfig& config, int height, int width,
                      Rng& rng, BlockExtent extent) {
  MaskConfigTable{{config}}.validate(height, width);
  const int half = (config.block_side - 1) / 2;
  std::uniform_int_distribution<int> row(half, height - 1 - half);
  std::uniform_int_distribution<int> col(half, width - 1 - half);
  const int covered =
      extent == BlockExtent::Full ? config.block_side : config.block_side - 1;

  MaskDraw draw{config, {}, Mask::all_observed(height, width)};
  for (int b = 0; b < config.block_count; ++b) {
    const int center_row = row(rng);
    const int center_col = col(rng);
    const Block block{center_row, center_col, config.block_side, covered};
    for (int r = block.top(); r < block.top() + covered; ++r) {
      for (int c = block.left(); c < block.left() + covered; ++c) {
        draw.mask.observed[std::size_t(r) * width + c] = 0;
      }
    }
    draw.blocks.push_back(block);
  }
  return draw;
}

MaskDraw sample_mcar_mask(const MaskConfigTable& table, int height, int width,
                          Rng& rng, BlockExtent extent) {
  table.validate(height, width);
  std::uniform_int_distribution<std::size_t> pick(0, table.configs.size() - 1);
  const auto& config = table.configs[pick(rng)];
  return place_blocks(config, height, width, rng, extent);
}

MnarAssignment assign_mnar_configs(const MaskConfigTable& table,
                                   int num_classes, Rng& rng) {
  if (num_classes < 1) throw std::invalid_argument("num_classes must be >= 1");
  if (table.configs.empty()) throw std::invalid_argument("empty mask config table");
  std::uniform_int_distribution<std::size_t> pick(0, table.configs.size() - 1);
  MnarAssignment out;
  for (int label = 0; label < num_classes; ++label) {
    out[label] = table.configs[pick(rng)];
  }
  return out;
}

MaskDraw sample_mnar_mask(const MnarAssignment& assignment, int label,
                          int height, int width, Rng& rng,
                          BlockExtent extent) {
  auto it = assignment.find(label);
  if (it == assignment.end()) {
    throw std::invalid_argument("label " + std::to_string(label) +
                                " has no MNAR mask assignment");
  }
  return place_blocks(it->second, height, width, rng, extent);
}

namespace {

void check_image_shape(std::span<const double> x, const Mask& m, int channels) {
  if (channels < 1 || x.size() != m.pixels() * std::size_t(channels)) {
    throw std::invalid_argument("image size " + std::to_string(x.size()) +
                                " does not match mask " +
                                std::to_string(m.height) + "x" +
                                std::to_string(m.width) + " with " +
                                std::to_string(channels) + " channel(s)");
  }
}

}  // namespace

std::vector<double> corrupt_zero(std::span<const double> x, const Mask& m,
                                 int channels) {
  check_image_shape(x, m, channels);
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    out[i] = m.observed[i / channels] ? x[i] : 0.0;
  }
  return out;
}

std::vector<double> corrupt_mean(std::span<const double> x, const Mask& m,
                                 std::span<const double> mu, int channels) {
  check_image_shape(x, m, channels);
  if (mu.size() != x.size()) {
    throw std::invalid_argument("mean image shape does not match image");
  }
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    out[i] = m.observed[i / channels] ? x[i] : mu[i];
  }
  return out;
}

std::vector<double> compute_mean_image(const ImageDataset& train) {
  if (train.size() == 0) {
    throw std::invalid_argument("cannot compute the mean of an empty dataset");
  }
  const std::size_t d = train.shape.elements();
  std::vector<std::uint64_t> sums(d, 0);
  for (std::size_t i = 0; i < train.size(); ++i) {
    auto img = train.image_levels(i);
    for (std::size_t k = 0; k < d; ++k) sums[k] += img[k];
  }
  std::vector<double> mean(d);
  for (std::size_t k = 0; k < d; ++k) {
    mean[k] = double(sums[k]) / (255.0 * double(train.size()));
  }
  return mean;
}

MaskedSample MaskedDataset::sample(std::size_t i) const {
  MaskedSample s;
  s.x = images.image_values(i);
  s.m = masks[i];
  s.x_tilde = corrupt_zero(s.x, s.m, images.shape.channels);
  s.label = images.labels[i];
  return s;
}

std::vector<Mask> generate_masks(const ImageDataset& dataset,
                                 Missingness missingness,
                                 const MaskConfigTable& table,
                                 const MnarAssignment& assignment,
                                 std::uint64_t seed,
                                 const std::string& purpose,
                                 BlockExtent extent) {
  const int h = dataset.shape.height;
  const int w = dataset.shape.width;
  table.validate(h, w);
  std::vector<Mask> masks;
  masks.reserve(dataset.size());
  for (std::size_t i = 0; i < dataset.size(); ++i) {
    auto rng = make_rng(seed, purpose, i);
    if (missingness == Missingness::Mcar) {
      masks.push_back(sample_mcar_mask(table, h, w, rng, extent).mask);
    } else {
      masks.push_back(
          sample_mnar_mask(assignment, dataset.labels[i], h, w, rng, extent).mask);
    }
  }
  return masks;
}

IdxTensor masks_to_idx(std::span<const Mask> masks) {
  IdxTensor t;
  const int h = masks.empty() ? 0 : masks.front().height;
  const int w = masks.empty() ? 0 : masks.front().width;
  t.dims = {std::uint32_t(masks.size()), std::uint32_t(h), std::uint32_t(w)};
  t.data.reserve(masks.size() * std::size_t(h) * w);
  for (const auto& m : masks) {
    if (m.height != h || m.width != w) {
      throw std::invalid_argument("masks must share one shape");
    }
    t.data.insert(t.data.end(), m.observed.begin(), m.observed.end());
  }
  return t;
}

std::vector<Mask> masks_from_idx(const IdxTensor& tensor) {
  if (tensor.dims.size() != 3) {
    throw std::invalid_argument("mask tensor must have rank 3 (N×H×W)");
  }
  const int h = int(tensor.dims[1]);
  const int w = int(tensor.dims[2]);
  const std::size_t px = std::size_t(h) * w;
  std::vector<Mask> masks(tensor.dims[0]);
  for (std::size_t i = 0; i < masks.size(); ++i) {
    auto first = tensor.data.begin() + std::ptrdiff_t(i * px);
    masks[i] = {h, w, std::vector<std::uint8_t>(first, first + std::ptrdiff_t(px))};
    for (auto v : masks[i].observed) {
      if (v > 1) throw std::invalid_argument("mask values must be 0 or 1");
    }
  }
  return masks;
}

IdxTensor corrupted_to_idx(const MaskedDataset& dataset) {
  auto t = to_idx(dataset.images);
  const auto c = std::size_t(dataset.images.shape.channels);
  const auto per_image = dataset.images.shape.elements();
  for (std::size_t i = 0; i < dataset.size(); ++i) {
    for (std::size_t k = 0; k < per_image; ++k) {
      if (!dataset.masks[i].observed[k / c]) t.data[i * per_image + k] = 0;
    }
  }
  return t;
}

std::string assignment_to_json(const MnarAssignment& assignment) {
  nlohmann::json classes = nlohmann::json::array();
  for (const auto& [label, config] : assignment) {
    classes.push_back({{"label", label},
                       {"block_count", config.block_count},
                       {"block_side", config.block_side}});
  }
  return nlohmann::json{{"classes", classes}}.dump(2) + "\n";
}

MnarAssignment assignment_from_json(const std::string& text) {
  MnarAssignment out;
  const auto doc = nlohmann::json::parse(text);
  for (const auto& c : doc.at("classes")) {
    out[c.at("label").get<int>()] = {c.at("block_count").get<int>(),
                                     c.at("block_side").get<int>()};
  }
  return out;
}

}  // namespace mvae
