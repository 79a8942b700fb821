#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "mvae/masking.hpp"
#include "mvae/model_spec.hpp"
#include "mvae/network.hpp"

namespace mvae {

// Added to the softplus output of the posterior standard deviation.
inline constexpr double kPosteriorSigmaFloor = 1e-3;

template <class T>
struct Posterior {
  Matrix<T> mu;         // batch × latent_dim
  Matrix<T> sigma;      // batch × latent_dim, >= kPosteriorSigmaFloor
  Matrix<T> raw_sigma;  // pre-softplus
};

// A batch of masked images in network layout.
template <class T>
struct Batch {
  int count = 0;
  Matrix<T> x_tilde;                     // (count*H*W) × C
  Matrix<T> mask;                        // (count*H*W) × 1, the mask as 0/1
  std::vector<double> x;                 // count*H*W*C uncorrupted targets
  std::vector<std::uint8_t> pixel_mask;  // count*H*W
};

template <class T>
Batch<T> make_batch(const MaskedDataset& data, std::span<const std::size_t> indices);
template <class T>
Batch<T> make_batch(std::span<const MaskedSample> samples, ImageShape shape);

// Per-image likelihood parameters read off the raw decoder output.
struct LikelihoodParams {
  LikelihoodKind kind = LikelihoodKind::Bernoulli;
  std::vector<double> p;      // Bernoulli: emission probability per element
  std::vector<double> mu;     // logistic mean per element
  std::vector<double> scale;  // logistic scale per element, >= 1e-2
};

// raw: H*W rows of output_channels values for one image.
template <class T>
LikelihoodParams likelihood_params(LikelihoodKind kind, int channels,
                                   std::span<const T> raw);

// Σ log p(x_d | raw) over pixels whose mask value equals `want` (1 = the
// observed set, 0 = the missing set), every channel of a selected pixel
// included. When d_raw is given, adds grad_scale · ∂/∂raw.
template <class T>
double image_logprob(LikelihoodKind kind, int channels, std::span<const T> raw,
                     std::span<const double> x,
                     std::span<const std::uint8_t> pixel_mask, std::uint8_t want,
                     T* d_raw = nullptr, double grad_scale = 1.0);

// Decoder mean per element: Bernoulli p, or the logistic mean clamped to [0,1].
template <class T>
void decoder_mean(LikelihoodKind kind, int channels, std::span<const T> raw,
                  std::span<double> out);

struct ElboResult {
  std::vector<double> elbo;   // recon − kl, per image
  std::vector<double> recon;  // log p(x_o | z, m)
  std::vector<double> kl;     // KL(q(z | x̃, m) ‖ N(0, I))

  double total() const;
};

// The conditional VAE q(z | x̃, m), p(x_o | z, m) for a given ModelSpec.
template <class T>
class ConditionalVae {
 public:
  explicit ConditionalVae(ModelSpec spec);

  const ModelSpec& spec() const { return spec_; }
  const std::vector<ParamDescriptor>& parameter_layout() const { return layout_; }

  // Fan-in scaled uniform weights (He bound before ReLU, LeCun bound
  // otherwise), zero biases.
  Parameters<T> init_parameters(std::uint64_t seed) const;
  Parameters<T> zero_parameters() const;

  // x_tilde: (batch*H*W) × C, mask: (batch*H*W) × 1. The mask is only read when
  // the variant feeds it to the encoder.
  Posterior<T> encode(const Parameters<T>& params, const Matrix<T>& x_tilde,
                      const Matrix<T>& mask, int batch) const;

  // Raw decoder output, (batch*H*W) × output_channels. Row b of z is decoded
  // against rows [b*H*W, (b+1)*H*W) of mask.
  Matrix<T> decode(const Parameters<T>& params, const Matrix<T>& z,
                   const Matrix<T>& mask) const;

  // Single-sample reparameterised ELBO per image, using eps (batch ×
  // latent_dim) as the standard-normal noise. With grads, accumulates
  // grad_scale · ∇ Σ_b elbo_b.
  ElboResult elbo(const Parameters<T>& params, const Batch<T>& batch,
                  const Matrix<T>& eps, Parameters<T>* grads = nullptr,
                  double grad_scale = 1.0) const;

 private:
  Posterior<T> encode_impl(const Parameters<T>& params, const Matrix<T>& x_tilde,
                           const Matrix<T>& mask, int batch, StackTrace<T>* trace,
                           Matrix<T>* features) const;

  ModelSpec spec_;
  std::vector<ParamDescriptor> layout_;
  LayerStack<T> encoder_;
  LayerStack<T> decoder_;
  int head_weight_ = -1;
  int head_bias_ = -1;
};

// z = mu + sigma ⊙ eps.
template <class T>
Matrix<T> reparameterize(const Posterior<T>& posterior, const Matrix<T>& eps);

}  // namespace mvae
