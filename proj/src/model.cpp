#include "mvae/model.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <stdexcept>

#include "mvae/likelihoods.hpp"
#include "mvae/seeding.hpp"

namespace mvae {

namespace {

template <class T>
void fill_sample(Batch<T>& batch, std::size_t slot, std::span<const double> x,
                 const Mask& m, int channels) {
  const std::size_t px = m.pixels();
  for (std::size_t p = 0; p < px; ++p) {
    const auto row = Eigen::Index(slot * px + p);
    const bool obs = m.observed[p] != 0;
    batch.mask(row, 0) = obs ? T(1) : T(0);
    batch.pixel_mask[slot * px + p] = m.observed[p];
    for (int c = 0; c < channels; ++c) {
      const double v = x[p * channels + c];
      batch.x[(slot * px + p) * channels + c] = v;
      batch.x_tilde(row, c) = obs ? T(v) : T(0);
    }
  }
}

template <class T>
Batch<T> empty_batch(std::size_t count, ImageShape shape) {
  Batch<T> b;
  b.count = int(count);
  const auto rows = Eigen::Index(count * shape.pixels());
  b.x_tilde.resize(rows, shape.channels);
  b.mask.resize(rows, 1);
  b.x.resize(count * shape.elements());
  b.pixel_mask.resize(count * shape.pixels());
  return b;
}

}  // namespace

template <class T>
Batch<T> make_batch(const MaskedDataset& data, std::span<const std::size_t> indices) {
  const auto shape = data.images.shape;
  auto b = empty_batch<T>(indices.size(), shape);
  std::vector<double> x(shape.elements());
  for (std::size_t s = 0; s < indices.size(); ++s) {
    auto levels = data.images.image_levels(indices[s]);
    std::transform(levels.begin(), levels.end(), x.begin(),
                   [](std::uint8_t v) { return v / 255.0; });
    fill_sample(b, s, x, data.masks[indices[s]], shape.channels);
  }
  return b;
}

template <class T>
Batch<T> make_batch(std::span<const MaskedSample> samples, ImageShape shape) {
  auto b = empty_batch<T>(samples.size(), shape);
  for (std::size_t s = 0; s < samples.size(); ++s) {
    if (samples[s].x.size() != shape.elements() ||
        samples[s].m.pixels() != shape.pixels()) {
      throw std::invalid_argument("sample shape does not match the model input");
    }
    fill_sample(b, s, samples[s].x, samples[s].m, shape.channels);
  }
  return b;
}

template <class T>
LikelihoodParams likelihood_params(LikelihoodKind kind, int channels,
                                   std::span<const T> raw) {
  LikelihoodParams out;
  out.kind = kind;
  if (kind == LikelihoodKind::Bernoulli) {
    out.p.resize(raw.size());
    std::transform(raw.begin(), raw.end(), out.p.begin(),
                   [](T a) { return sigmoid(double(a)); });
    return out;
  }
  const std::size_t pixels = raw.size() / (2 * channels);
  out.mu.resize(pixels * channels);
  out.scale.resize(pixels * channels);
  for (std::size_t p = 0; p < pixels; ++p) {
    for (int c = 0; c < channels; ++c) {
      out.mu[p * channels + c] = double(raw[p * 2 * channels + c]);
      out.scale[p * channels + c] =
          std::max(std::exp(double(raw[p * 2 * channels + channels + c])),
                   kMinLogisticScale);
    }
  }
  return out;
}

template <class T>
double image_logprob(LikelihoodKind kind, int channels, std::span<const T> raw,
                     std::span<const double> x,
                     std::span<const std::uint8_t> pixel_mask, std::uint8_t want,
                     T* d_raw, double grad_scale) {
  const std::size_t pixels = pixel_mask.size();
  double total = 0.0;
  if (kind == LikelihoodKind::Bernoulli) {
    for (std::size_t p = 0; p < pixels; ++p) {
      if (pixel_mask[p] != want) continue;
      for (int c = 0; c < channels; ++c) {
        const std::size_t k = p * channels + c;
        const auto term = bernoulli_logit_term(x[k], double(raw[k]));
        total += term.value;
        if (d_raw) d_raw[k] += T(grad_scale * term.d_logit);
      }
    }
    return total;
  }
  const std::size_t stride = 2 * std::size_t(channels);
  for (std::size_t p = 0; p < pixels; ++p) {
    if (pixel_mask[p] != want) continue;
    for (int c = 0; c < channels; ++c) {
      const std::size_t mean_at = p * stride + c;
      const std::size_t scale_at = mean_at + channels;
      const double exp_raw = std::exp(double(raw[scale_at]));
      const bool floored = exp_raw < kMinLogisticScale;
      const double s = floored ? kMinLogisticScale : exp_raw;
      const auto bin = discretized_logistic_bin(x[p * channels + c],
                                                double(raw[mean_at]), s);
      total += bin.value;
      if (d_raw) {
        d_raw[mean_at] += T(grad_scale * bin.d_mu);
        if (!floored) d_raw[scale_at] += T(grad_scale * bin.d_scale * s);
      }
    }
  }
  return total;
}

template <class T>
void decoder_mean(LikelihoodKind kind, int channels, std::span<const T> raw,
                  std::span<double> out) {
  if (kind == LikelihoodKind::Bernoulli) {
    for (std::size_t k = 0; k < out.size(); ++k) out[k] = sigmoid(double(raw[k]));
    return;
  }
  const std::size_t stride = 2 * std::size_t(channels);
  for (std::size_t k = 0; k < out.size(); ++k) {
    const std::size_t p = k / channels;
    const std::size_t c = k % channels;
    out[k] = std::clamp(double(raw[p * stride + c]), 0.0, 1.0);
  }
}

double ElboResult::total() const {
  double t = 0.0;
  for (double v : elbo) t += v;
  return t;
}

template <class T>
ConditionalVae<T>::ConditionalVae(ModelSpec spec) : spec_(std::move(spec)) {
  spec_.validate();
  encoder_ = LayerStack<T>("encoder", spec_.encoder_layers, spec_.input, false, layout_);
  const std::size_t features = encoder_.output_shape().elements();
  const std::size_t latent = std::size_t(spec_.latent_dim);
  // The head stacks two dense maps (mean, raw scale), so each has fan_out = latent.
  head_weight_ = int(layout_.size());
  layout_.push_back({"encoder.head.weight", {features, 2 * latent}, features, latent,
                     false});
  head_bias_ = int(layout_.size());
  layout_.push_back({"encoder.head.bias", {2 * latent}, 0, 0, true});
  decoder_ = LayerStack<T>("decoder", spec_.decoder_layers,
                           {1, 1, spec_.latent_dim}, true, layout_);
}

template <class T>
Parameters<T> ConditionalVae<T>::zero_parameters() const {
  Parameters<T> params;
  for (const auto& d : layout_) {
    std::size_t n = 1;
    for (auto s : d.shape) n *= s;
    params.tensors.push_back({d.name, d.shape, AlignedVector<T>(n, T(0))});
  }
  return params;
}

template <class T>
Parameters<T> ConditionalVae<T>::init_parameters(std::uint64_t seed) const {
  auto params = zero_parameters();
  for (std::size_t i = 0; i < layout_.size(); ++i) {
    const auto& d = layout_[i];
    if (d.is_bias) continue;
    const double limit = std::sqrt(6.0 / double(d.fan_in + d.fan_out));
    auto rng = make_rng(seed, "init", i);
    std::uniform_real_distribution<double> u(-limit, limit);
    for (auto& v : params.tensors[i].values) v = T(u(rng));
  }
  return params;
}

template <class T>
Posterior<T> ConditionalVae<T>::encode_impl(const Parameters<T>& params,
                                            const Matrix<T>& x_tilde,
                                            const Matrix<T>& mask, int batch,
                                            StackTrace<T>* trace,
                                            Matrix<T>* features) const {
  if (params.tensors.size() != layout_.size()) {
    throw std::invalid_argument("parameter set does not match the model layout");
  }
  Matrix<T> feat = encoder_.forward(params, x_tilde, &mask, batch, trace);
  const auto f = Eigen::Index(encoder_.output_shape().elements());
  const auto l = Eigen::Index(spec_.latent_dim);
  Eigen::Map<const Matrix<T>> flat(feat.data(), batch, f);
  Eigen::Map<const Matrix<T>> w(params.tensors[head_weight_].values.data(), f, 2 * l);
  Eigen::Map<const Matrix<T>> b(params.tensors[head_bias_].values.data(), 1, 2 * l);
  Matrix<T> head = flat * w;
  head.rowwise() += b.row(0);

  Posterior<T> post;
  post.mu = head.leftCols(l);
  post.raw_sigma = head.rightCols(l);
  post.sigma = (post.raw_sigma.array().max(T(0)) +
                (T(1) + (-post.raw_sigma.array().abs()).exp()).log() +
                T(kPosteriorSigmaFloor))
                   .matrix();
  if (features) *features = std::move(feat);
  return post;
}

template <class T>
Posterior<T> ConditionalVae<T>::encode(const Parameters<T>& params,
                                       const Matrix<T>& x_tilde,
                                       const Matrix<T>& mask, int batch) const {
  if (x_tilde.rows() != Eigen::Index(batch * spec_.input.pixels()) ||
      x_tilde.cols() != spec_.input.channels || mask.rows() != x_tilde.rows()) {
    throw std::invalid_argument("encoder input shape mismatch");
  }
  return encode_impl(params, x_tilde, mask, batch, nullptr, nullptr);
}

template <class T>
Matrix<T> ConditionalVae<T>::decode(const Parameters<T>& params, const Matrix<T>& z,
                                    const Matrix<T>& mask) const {
  if (z.cols() != spec_.latent_dim) {
    throw std::invalid_argument("latent vector has " + std::to_string(z.cols()) +
                                " dimensions, expected " +
                                std::to_string(spec_.latent_dim));
  }
  if (spec_.variant == Variant::EdInd &&
      mask.rows() != z.rows() * Eigen::Index(spec_.input.pixels())) {
    throw std::invalid_argument("decoder mask shape mismatch");
  }
  return decoder_.forward(params, z, &mask, int(z.rows()));
}

template <class T>
Matrix<T> reparameterize(const Posterior<T>& posterior, const Matrix<T>& eps) {
  if (eps.rows() != posterior.mu.rows() || eps.cols() != posterior.mu.cols()) {
    throw std::invalid_argument("noise shape does not match the posterior");
  }
  return posterior.mu + posterior.sigma.cwiseProduct(eps);
}

template <class T>
ElboResult ConditionalVae<T>::elbo(const Parameters<T>& params, const Batch<T>& batch,
                                   const Matrix<T>& eps, Parameters<T>* grads,
                                   double grad_scale) const {
  const int n = batch.count;
  const auto l = Eigen::Index(spec_.latent_dim);
  const std::size_t px = spec_.input.pixels();
  const int channels = spec_.input.channels;
  const auto out_c = std::size_t(spec_.output_channels());

  StackTrace<T> enc_trace, dec_trace;
  Matrix<T> features;
  const bool train = grads != nullptr;
  const auto post = encode_impl(params, batch.x_tilde, batch.mask, n,
                                train ? &enc_trace : nullptr, &features);
  const Matrix<T> z = reparameterize(post, eps);
  const Matrix<T> raw = decoder_.forward(params, z, &batch.mask, n,
                                         train ? &dec_trace : nullptr);

  ElboResult result;
  Matrix<T> d_raw;
  if (train) d_raw.setZero(raw.rows(), raw.cols());
  for (int b = 0; b < n; ++b) {
    std::span<const T> rows(raw.data() + std::size_t(b) * px * out_c, px * out_c);
    const double recon = image_logprob<T>(
        spec_.likelihood, channels, rows,
        std::span<const double>(batch.x).subspan(std::size_t(b) * px * channels,
                                                 px * channels),
        std::span<const std::uint8_t>(batch.pixel_mask).subspan(std::size_t(b) * px, px),
        1, train ? d_raw.data() + std::size_t(b) * px * out_c : nullptr, grad_scale);
    double kl = 0.0;
    for (Eigen::Index j = 0; j < l; ++j) {
      const double m = double(post.mu(b, j));
      const double s = double(post.sigma(b, j));
      kl += 0.5 * (m * m + s * s - 1.0 - 2.0 * std::log(s));
    }
    result.recon.push_back(recon);
    result.kl.push_back(kl);
    result.elbo.push_back(recon - kl);
  }
  if (!train) return result;

  const Matrix<T> dz = decoder_.backward(params, dec_trace, std::move(d_raw), *grads, true);
  const T scale = T(grad_scale);
  const Matrix<T> d_mu = dz - scale * post.mu;
  const Matrix<T> d_sigma =
      (dz.array() * eps.array() -
       scale * (post.sigma.array() - post.sigma.array().inverse()))
          .matrix();
  const Matrix<T> d_raw_sigma =
      (d_sigma.array() / (T(1) + (-post.raw_sigma.array()).exp())).matrix();

  Matrix<T> d_head(n, 2 * l);
  d_head.leftCols(l) = d_mu;
  d_head.rightCols(l) = d_raw_sigma;

  const auto f = Eigen::Index(encoder_.output_shape().elements());
  Eigen::Map<const Matrix<T>> flat(features.data(), n, f);
  Eigen::Map<const Matrix<T>> w(params.tensors[head_weight_].values.data(), f, 2 * l);
  Eigen::Map<Matrix<T>> dw(grads->tensors[head_weight_].values.data(), f, 2 * l);
  Eigen::Map<Matrix<T>> db(grads->tensors[head_bias_].values.data(), 1, 2 * l);
  dw.noalias() += flat.transpose() * d_head;
  db += d_head.colwise().sum();
  Matrix<T> d_flat = d_head * w.transpose();
  Matrix<T> d_features =
      Eigen::Map<Matrix<T>>(d_flat.data(), features.rows(), features.cols());
  encoder_.backward(params, enc_trace, std::move(d_features), *grads, false);
  return result;
}

#define MVAE_INSTANTIATE(T)                                                       \
  template Batch<T> make_batch<T>(const MaskedDataset&, std::span<const std::size_t>); \
  template Batch<T> make_batch<T>(std::span<const MaskedSample>, ImageShape);     \
  template LikelihoodParams likelihood_params<T>(LikelihoodKind, int,             \
                                                 std::span<const T>);             \
  template double image_logprob<T>(LikelihoodKind, int, std::span<const T>,       \
                                   std::span<const double>,                       \
                                   std::span<const std::uint8_t>, std::uint8_t,   \
                                   T*, double);                                   \
  template void decoder_mean<T>(LikelihoodKind, int, std::span<const T>,          \
                                std::span<double>);                               \
  template Matrix<T> reparameterize<T>(const Posterior<T>&, const Matrix<T>&);    \
  template class ConditionalVae<T>;

MVAE_INSTANTIATE(float)
MVAE_INSTANTIATE(double)

#undef MVAE_INSTANTIATE

}  // namespace mvae
