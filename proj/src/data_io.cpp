#include "mvae/data_io.hpp"

#include <algorithm>
#include <fstream>
#include <iterator>
#include <numeric>
#include <random>

#include "mvae/seeding.hpp"

namespace mvae {

namespace {

constexpr std::uint8_t kUnsignedByte = 0x08;
constexpr std::size_t kMaxRank = 4;

std::uint32_t read_be_u32(std::span<const std::uint8_t> bytes,
                          std::size_t offset) {
  return (std::uint32_t(bytes[offset]) << 24) |
         (std::uint32_t(bytes[offset + 1]) << 16) |
         (std::uint32_t(bytes[offset + 2]) << 8) |
         std::uint32_t(bytes[offset + 3]);
}

void append_be_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  out.push_back(std::uint8_t(v >> 24));
  out.push_back(std::uint8_t(v >> 16));
  out.push_back(std::uint8_t(v >> 8));
  out.push_back(std::uint8_t(v));
}

}  // namespace

IdxParseError::IdxParseError(const std::string& what, std::size_t offset)
    : std::runtime_error("IDX parse error at byte " + std::to_string(offset) +
                         ": " + what),
      offset_(offset) {}

std::size_t IdxTensor::element_count() const {
  return std::accumulate(dims.begin(), dims.end(), std::size_t{1},
                         [](std::size_t a, std::uint32_t d) { return a * d; });
}

IdxTensor parse_idx(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < 4) {
    throw IdxParseError("truncated magic number", bytes.size());
  }
  if (bytes[0] != 0 || bytes[1] != 0) {
    throw IdxParseError("malformed magic number (first two bytes must be 0)", 0);
  }
  if (bytes[2] != kUnsignedByte) {
    throw IdxParseError("unsupported element type code " +
                            std::to_string(bytes[2]),
                        2);
  }
  const std::size_t rank = bytes[3];
  if (rank < 1 || rank > kMaxRank) {
    throw IdxParseError("unsupported dimension count " + std::to_string(rank),
                        3);
  }
  const std::size_t header = 4 + 4 * rank;
  if (bytes.size() < header) {
    throw IdxParseError("truncated dimension header", bytes.size());
  }
  IdxTensor tensor;
  for (std::size_t d = 0; d < rank; ++d) {
    tensor.dims.push_back(read_be_u32(bytes, 4 + 4 * d));
  }
  const std::size_t count = tensor.element_count();
  if (bytes.size() < header + count) {
    throw IdxParseError("truncated payload: expected " + std::to_string(count) +
                            " elements",
                        bytes.size());
  }
  if (bytes.size() > header + count) {
    throw IdxParseError("trailing bytes after payload", header + count);
  }
  tensor.data.assign(bytes.begin() + header, bytes.end());
  return tensor;
}

std::vector<std::uint8_t> serialize_idx(const IdxTensor& tensor) {
  if (tensor.dims.empty() || tensor.dims.size() > kMaxRank) {
    throw std::invalid_argument("IDX tensors must have rank 1..4");
  }
  if (tensor.data.size() != tensor.element_count()) {
    throw std::invalid_argument("IDX payload size does not match dims");
  }
  std::vector<std::uint8_t> out{0, 0, kUnsignedByte,
                                std::uint8_t(tensor.dims.size())};
  for (auto d : tensor.dims) append_be_u32(out, d);
  out.insert(out.end(), tensor.data.begin(), tensor.data.end());
  return out;
}

IdxTensor read_idx(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)),
                                  std::istreambuf_iterator<char>());
  try {
    return parse_idx(bytes);
  } catch (const IdxParseError& e) {
    throw IdxParseError(path.string() + ": " + e.what(), e.offset());
  }
}

void write_idx(const std::filesystem::path& path, const IdxTensor& tensor) {
  const auto bytes = serialize_idx(tensor);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()),
            std::streamsize(bytes.size()));
  if (!out) throw std::runtime_error("write failed for " + path.string());
}

std::span<const std::uint8_t> ImageDataset::image_levels(std::size_t i) const {
  return std::span<const std::uint8_t>(levels).subspan(i * shape.elements(),
                                                        shape.elements());
}

std::vector<double> ImageDataset::image_values(std::size_t i) const {
  auto src = image_levels(i);
  std::vector<double> out(src.size());
  std::transform(src.begin(), src.end(), out.begin(),
                 [](std::uint8_t v) { return v / 255.0; });
  return out;
}

ImageDataset ImageDataset::select(std::span<const std::size_t> indices) const {
  ImageDataset out;
  out.name = name;
  out.shape = shape;
  out.levels.reserve(indices.size() * shape.elements());
  out.labels.reserve(indices.size());
  for (auto i : indices) {
    auto img = image_levels(i);
    out.levels.insert(out.levels.end(), img.begin(), img.end());
    out.labels.push_back(labels[i]);
  }
  return out;
}

DatasetFiles DatasetFiles::in_directory(const std::filesystem::path& dir) {
  return {dir / "train-images-idx3-ubyte", dir / "train-labels-idx1-ubyte",
          dir / "t10k-images-idx3-ubyte", dir / "t10k-labels-idx1-ubyte"};
}

ImageDataset make_dataset(std::string name, const IdxTensor& images,
                          const IdxTensor& labels) {
  if (images.dims.size() != 3 && images.dims.size() != 4) {
    throw std::invalid_argument("image tensor must have rank 3 or 4");
  }
  if (labels.dims.size() != 1) {
    throw std::invalid_argument("label tensor must have rank 1");
  }
  if (images.dims[0] != labels.dims[0]) {
    throw std::invalid_argument(
        "image/label count mismatch: " + std::to_string(images.dims[0]) +
        " images vs " + std::to_string(labels.dims[0]) + " labels");
  }
  ImageDataset ds;
  ds.name = std::move(name);
  ds.shape = {int(images.dims[1]), int(images.dims[2]),
              images.dims.size() == 4 ? int(images.dims[3]) : 1};
  ds.levels = images.data;
  ds.labels = labels.data;
  return ds;
}

DatasetSplits split_dataset(const ImageDataset& train_file,
                            const ImageDataset& test_file,
                            const SplitSpec& split) {
  if (split.train_count + split.val_count != train_file.size()) {
    throw std::invalid_argument(
        "split train_count + val_count (" +
        std::to_string(split.train_count + split.val_count) +
        ") must equal the training file size (" +
        std::to_string(train_file.size()) + ")");
  }
  if (split.test_count > test_file.size()) {
    throw std::invalid_argument("split test_count exceeds test file size");
  }
  if (!(train_file.shape == test_file.shape)) {
    throw std::invalid_argument("train and test image shapes differ");
  }
  std::vector<std::size_t> order(train_file.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  auto rng = make_rng(split.seed, "validation-split");
  std::shuffle(order.begin(), order.end(), rng);

  std::span<const std::size_t> all(order);
  DatasetSplits out;
  out.val = train_file.select(all.first(split.val_count));
  out.train = train_file.select(all.subspan(split.val_count));
  if (split.test_count == 0 || split.test_count == test_file.size()) {
    out.test = test_file;
  } else {
    std::vector<std::size_t> head(split.test_count);
    std::iota(head.begin(), head.end(), std::size_t{0});
    out.test = test_file.select(head);
  }
  return out;
}

DatasetSplits load_dataset(const DatasetFiles& files, const SplitSpec& split,
                           const std::string& name) {
  auto train_file = make_dataset(name, read_idx(files.train_images),
                                 read_idx(files.train_labels));
  auto test_file = make_dataset(name, read_idx(files.test_images),
                                read_idx(files.test_labels));
  return split_dataset(train_file, test_file, split);
}

IdxTensor to_idx(const ImageDataset& dataset) {
  IdxTensor t;
  t.dims = {std::uint32_t(dataset.size()), std::uint32_t(dataset.shape.height),
            std::uint32_t(dataset.shape.width)};
  if (dataset.shape.channels != 1) {
    t.dims.push_back(std::uint32_t(dataset.shape.channels));
  }
  t.data = dataset.levels;
  return t;
}

IdxTensor labels_to_idx(const ImageDataset& dataset) {
  return {{std::uint32_t(dataset.size())}, dataset.labels};
}

}  // namespace mvae
