#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace mvae {

// Raised for malformed IDX input. offset() is the byte position at which the
// problem was detected.
class IdxParseError : public std::runtime_error {
 public:
  IdxParseError(const std::string& what, std::size_t offset);
  std::size_t offset() const noexcept { return offset_; }

 private:
  std::size_t offset_;
};

// An IDX container holding unsigned 8-bit elements, rank 1..4, row-major.
struct IdxTensor {
  std::vector<std::uint32_t> dims;
  std::vector<std::uint8_t> data;

  std::size_t element_count() const;
};

// Layout: 0x00 0x00 <type=0x08> <rank>, rank big-endian u32 sizes, payload.
IdxTensor parse_idx(std::span<const std::uint8_t> bytes);
std::vector<std::uint8_t> serialize_idx(const IdxTensor& tensor);

IdxTensor read_idx(const std::filesystem::path& path);
void write_idx(const std::filesystem::path& path, const IdxTensor& tensor);

struct ImageShape {
  int height = 0;
  int width = 0;
  int channels = 0;

  std::size_t pixels() const { return std::size_t(height) * width; }
  std::size_t elements() const { return pixels() * channels; }
  bool operator==(const ImageShape&) const = default;
};

// Images are kept as their original 8-bit levels; value() is level / 255, so
// every pixel value is an exact multiple of 1/255 in [0, 1].
struct ImageDataset {
  std::string name;
  ImageShape shape;
  std::vector<std::uint8_t> levels;  // N * H * W * C, NHWC
  std::vector<std::uint8_t> labels;  // N

  std::size_t size() const { return labels.size(); }
  std::span<const std::uint8_t> image_levels(std::size_t i) const;
  double value(std::size_t i, std::size_t element) const {
    return levels[i * shape.elements() + element] / 255.0;
  }
  std::vector<double> image_values(std::size_t i) const;

  // Subset in the given order.
  ImageDataset select(std::span<const std::size_t> indices) const;
};

struct SplitSpec {
  std::size_t train_count = 0;
  std::size_t val_count = 0;
  // Number of leading test-file images to keep; 0 keeps the whole file.
  std::size_t test_count = 0;
  std::uint64_t seed = 0;
};

struct DatasetFiles {
  std::filesystem::path train_images;
  std::filesystem::path train_labels;
  std::filesystem::path test_images;
  std::filesystem::path test_labels;

  // Standard MNIST-style file names inside `dir`.
  static DatasetFiles in_directory(const std::filesystem::path& dir);
};

struct DatasetSplits {
  ImageDataset train;
  ImageDataset val;
  ImageDataset test;
};

// Pairs an image tensor (rank 3 = N×H×W greyscale, rank 4 = N×H×W×C) with a
// rank-1 label tensor.
ImageDataset make_dataset(std::string name, const IdxTensor& images,
                          const IdxTensor& labels);

// Validation images are a seeded permutation of the training file; the test
// file is used as-is (truncated to test_count when nonzero).
DatasetSplits load_dataset(const DatasetFiles& files, const SplitSpec& split,
                           const std::string& name = "dataset");

// Same split logic on in-memory data.
DatasetSplits split_dataset(const ImageDataset& train_file,
                            const ImageDataset& test_file,
                            const SplitSpec& split);

IdxTensor to_idx(const ImageDataset& dataset);
IdxTensor labels_to_idx(const ImageDataset& dataset);

}  // namespace mvae
