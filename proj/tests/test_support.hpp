#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <filesystem>
#include <random>
#include <string>
#include <vector>
#include <unistd.h>

#include "mvae/data_io.hpp"
#include "mvae/masking.hpp"
#include "mvae/model.hpp"
#include "mvae/model_spec.hpp"

namespace mvae::testing {

// 4×4 images, latent_dim 2; every layer kind appears at least once.
inline ModelSpec tiny_spec(Variant variant, LikelihoodKind likelihood) {
  using A = Activation;
  ModelSpec s;
  const int channels = likelihood == LikelihoodKind::Bernoulli ? 1 : 3;
  s.input = {4, 4, channels};
  s.latent_dim = 2;
  s.likelihood = likelihood;
  s.variant = variant;
  if (variant != Variant::NoInd) s.encoder_layers.push_back(LayerSpec::concat_mask());
  s.encoder_layers.push_back(LayerSpec::conv(3, 3, 2, A::Relu));
  s.decoder_layers = {LayerSpec::dense(2, 2, 2, A::Relu),
                      LayerSpec::transposed_conv(3, 3, 2, A::Relu)};
  if (variant == Variant::EdInd) s.decoder_layers.push_back(LayerSpec::concat_mask());
  s.decoder_layers.push_back(LayerSpec::conv(
      s.output_channels(), 3, 1,
      likelihood == LikelihoodKind::Bernoulli ? A::Sigmoid : A::Exponential));
  return s;
}

// Random 8-bit images with random block masks.
inline MaskedDataset random_masked_dataset(ImageShape shape, std::size_t n,
                                           std::uint64_t seed,
                                           int block_side = 1) {
  MaskedDataset ds;
  ds.images.name = "random";
  ds.images.shape = shape;
  Rng rng(seed);
  std::uniform_int_distribution<int> level(0, 255);
  std::uniform_int_distribution<int> label(0, 9);
  for (std::size_t i = 0; i < n * shape.elements(); ++i) {
    ds.images.levels.push_back(std::uint8_t(level(rng)));
  }
  for (std::size_t i = 0; i < n; ++i) {
    ds.images.labels.push_back(std::uint8_t(label(rng)));
    ds.masks.push_back(place_blocks({3, block_side}, shape.height, shape.width, rng).mask);
  }
  return ds;
}

template <class T>
Matrix<T> normal_matrix(Eigen::Index rows, Eigen::Index cols, Rng& rng) {
  std::normal_distribution<double> n01;
  Matrix<T> m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = T(n01(rng));
  return m;
}

}  // namespace mvae::testing

namespace mvae::testing {

struct GradientCheck {
  double max_relative_error = 0.0;
  std::string worst_parameter;
  std::size_t checked = 0;
};

// Compares the analytic ELBO gradient against central differences for every
// scalar parameter. Biases are randomised too so no gradient is trivially 0.
inline GradientCheck check_elbo_gradient(const ModelSpec& spec, std::uint64_t seed,
                                         double step = 1e-4,
                                         std::size_t images = 3) {
  ConditionalVae<double> model(spec);
  auto params = model.init_parameters(seed);
  Rng rng(seed + 1);
  std::uniform_real_distribution<double> small(-0.1, 0.1);
  for (std::size_t i = 0; i < params.tensors.size(); ++i) {
    if (model.parameter_layout()[i].is_bias) {
      for (auto& v : params.tensors[i].values) v = small(rng);
    }
  }
  auto data = random_masked_dataset(spec.input, images, seed + 2);
  std::vector<std::size_t> idx(images);
  for (std::size_t i = 0; i < images; ++i) idx[i] = i;
  const auto batch = make_batch<double>(data, idx);
  const auto eps = normal_matrix<double>(Eigen::Index(images), spec.latent_dim, rng);

  auto grads = params.zeros_like();
  model.elbo(params, batch, eps, &grads);

  GradientCheck out;
  for (std::size_t t = 0; t < params.tensors.size(); ++t) {
    for (std::size_t k = 0; k < params.tensors[t].values.size(); ++k) {
      double& v = params.tensors[t].values[k];
      const double saved = v;
      v = saved + step;
      const double up = model.elbo(params, batch, eps).total();
      v = saved - step;
      const double down = model.elbo(params, batch, eps).total();
      v = saved;
      const double fd = (up - down) / (2 * step);
      const double g = grads.tensors[t].values[k];
      const double denom = std::max(std::abs(g), std::abs(fd));
      const double err = denom < 1e-7 ? std::abs(g - fd) : std::abs(g - fd) / denom;
      ++out.checked;
      if (err > out.max_relative_error) {
        out.max_relative_error = err;
        out.worst_parameter = params.tensors[t].name + "[" + std::to_string(k) + "]";
      }
    }
  }
  return out;
}

}  // namespace mvae::testing

namespace mvae::testing {

// A fresh directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    static std::atomic<int> counter{0};
    path_ = std::filesystem::temp_directory_path() /
            ("mvae-" + tag + "-" + std::to_string(::getpid()) + "-" +
             std::to_string(counter++));
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;
  const std::filesystem::path& path() const { return path_; }

 private:
  std::filesystem::path path_;
};

// Random images with a class-dependent bright square so that models have
// something to learn; labels cycle through 0..9.
inline ImageDataset synthetic_images(ImageShape shape, std::size_t n, std::uint64_t seed) {
  ImageDataset ds;
  ds.name = "synthetic";
  ds.shape = shape;
  Rng rng(seed);
  std::uniform_int_distribution<int> noise(0, 40);
  for (std::size_t i = 0; i < n; ++i) {
    const int label = int(i % 10);
    ds.labels.push_back(std::uint8_t(label));
    const int r0 = (label * 3) % std::max(1, shape.height - 3);
    const int c0 = (label * 5) % std::max(1, shape.width - 3);
    for (int r = 0; r < shape.height; ++r) {
      for (int c = 0; c < shape.width; ++c) {
        const bool on = r >= r0 && r < r0 + 4 && c >= c0 && c < c0 + 4;
        for (int ch = 0; ch < shape.channels; ++ch) {
          ds.levels.push_back(std::uint8_t(on ? 255 - noise(rng) : noise(rng)));
        }
      }
    }
  }
  return ds;
}

// Writes MNIST-style train/test IDX files into dir.
inline void write_dataset_files(const std::filesystem::path& dir, const ImageDataset& train,
                                const ImageDataset& test) {
  std::filesystem::create_directories(dir);
  const auto files = DatasetFiles::in_directory(dir);
  write_idx(files.train_images, to_idx(train));
  write_idx(files.train_labels, labels_to_idx(train));
  write_idx(files.test_images, to_idx(test));
  write_idx(files.test_labels, labels_to_idx(test));
}

}  // namespace mvae::testing

namespace mvae::testing {

// 2×2 greyscale Bernoulli model with a one-dimensional latent: the encoder is
// the posterior head on (x̃, m) pairs, the decoder a dense map to 2×2 followed
// by concat_mask and a 1×1 conv.
struct Latent1Model {
  ModelSpec spec;
  Parameters<double> params;
  MaskedSample sample;
};

inline Latent1Model latent1_model() {
  Latent1Model out;
  auto& s = out.spec;
  s.input = {2, 2, 1};
  s.latent_dim = 1;
  s.likelihood = LikelihoodKind::Bernoulli;
  s.variant = Variant::EdInd;
  s.encoder_layers = {LayerSpec::concat_mask()};
  s.decoder_layers = {LayerSpec::dense(2, 2, 1, Activation::Linear), LayerSpec::concat_mask(),
                      LayerSpec::conv(1, 1, 1, Activation::Sigmoid)};
  ConditionalVae<double> model(s);
  out.params = model.zero_parameters();
  out.params.at("encoder.head.weight").values = {0.4, -0.2, 0.1, 0.3, -0.5, 0.25, 0.2, -0.1,
                                                 0.3, 0.05, -0.6, 0.15, 0.7, -0.35, 0.1, 0.2};
  // q(z) = N(≈1.2, ≈0.9²), a little wider than the exact posterior
  // (mean ≈ 1.0, sd ≈ 0.75), so the importance weights have finite variance.
  out.params.at("encoder.head.bias").values = {-0.30, 0.51};
  out.params.at("decoder.0.dense.weight").values = {1.2, -0.7, 0.4, 2.0};
  out.params.at("decoder.0.dense.bias").values = {0.1, 0.2, -0.3, 0.0};
  out.params.at("decoder.2.conv.weight").values = {0.9, -0.5};
  out.params.at("decoder.2.conv.bias").values = {0.15};

  auto& smp = out.sample;
  smp.x = {1.0, 0.0, 1.0, 1.0};
  smp.m.height = 2;
  smp.m.width = 2;
  smp.m.observed = {1, 1, 0, 1};
  smp.x_tilde = corrupt_zero(smp.x, smp.m, 1);
  return out;
}

// log of Simpson's rule applied to exp(log_f) sampled on an even panel count.
inline double log_simpson(const std::vector<double>& log_f, double h) {
  const double peak = *std::max_element(log_f.begin(), log_f.end());
  double s = 0;
  const std::size_t n = log_f.size() - 1;
  for (std::size_t i = 0; i <= n; ++i) {
    const double w = (i == 0 || i == n) ? 1 : (i % 2 ? 4 : 2);
    s += w * std::exp(log_f[i] - peak);
  }
  return peak + std::log(s * h / 3);
}

struct QuadratureOracle {
  double logpx = 0.0;         // log ∫ p(x_o|z,m) N(z; 0, 1) dz
  double imput_loglik = 0.0;  // ∫ q(z|x̃,m) log p(x_m|z,m) dz
};

// Composite Simpson over z ∈ [−12, 12] for a latent_dim 1 model.
inline QuadratureOracle quadrature_oracle(const ConditionalVae<double>& model,
                                          const Parameters<double>& params,
                                          const MaskedSample& sample, int panels = 24000) {
  const auto& spec = model.spec();
  const auto batch = make_batch<double>(std::span<const MaskedSample>(&sample, 1), spec.input);
  const auto post = model.encode(params, batch.x_tilde, batch.mask, 1);
  const double mu = post.mu(0, 0), sigma = post.sigma(0, 0);
  const double lo = -12, hi = 12, h = (hi - lo) / panels;
  const std::size_t px = spec.input.pixels(), oc = std::size_t(spec.output_channels());
  std::vector<double> log_joint(panels + 1), imput(panels + 1);
  const int chunk = 1000;
  for (int start = 0; start <= panels; start += chunk) {
    const int c = std::min(chunk, panels + 1 - start);
    Matrix<double> z(c, 1);
    for (int k = 0; k < c; ++k) z(k, 0) = lo + (start + k) * h;
    Matrix<double> mask(Eigen::Index(c * px), 1);
    for (int k = 0; k < c; ++k) mask.middleRows(Eigen::Index(k * px), Eigen::Index(px)) = batch.mask;
    const auto raw = model.decode(params, z, mask);
    for (int k = 0; k < c; ++k) {
      std::span<const double> rows(raw.data() + std::size_t(k) * px * oc, px * oc);
      const double zk = z(k, 0);
      const double obs = image_logprob<double>(spec.likelihood, spec.input.channels, rows,
                                               batch.x, batch.pixel_mask, 1);
      const double miss = image_logprob<double>(spec.likelihood, spec.input.channels, rows,
                                                batch.x, batch.pixel_mask, 0);
      log_joint[start + k] = obs - 0.5 * zk * zk - 0.5 * std::log(2 * M_PI);
      const double q = std::exp(-0.5 * std::pow((zk - mu) / sigma, 2)) / (sigma * std::sqrt(2 * M_PI));
      imput[start + k] = q * miss;
    }
  }
  QuadratureOracle out;
  out.logpx = log_simpson(log_joint, h);
  double s = 0;
  for (int i = 0; i <= panels; ++i) {
    s += imput[i] * ((i == 0 || i == panels) ? 1 : (i % 2 ? 4 : 2));
  }
  out.imput_loglik = s * h / 3;
  return out;
}

}  // namespace mvae::testing
