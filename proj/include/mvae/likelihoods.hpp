#pragma once

#include <cmath>
#include <cstdint>
#include <span>

namespace mvae {

inline double softplus(double a) {
  return std::max(a, 0.0) + std::log1p(std::exp(-std::abs(a)));
}

inline double sigmoid(double a) {
  if (a >= 0) return 1.0 / (1.0 + std::exp(-a));
  const double e = std::exp(a);
  return e / (1.0 + e);
}

// Lower bound on the logistic scale parameter.
inline constexpr double kMinLogisticScale = 1e-2;
// Half of one 8-bit level on the [0, 1] scale.
inline constexpr double kBinHalfWidth = 1.0 / 510.0;

// Σ_{sel=1} x ln p + (1 − x) ln(1 − p). Targets may be any real in [0, 1].
double bernoulli_masked_logprob(std::span<const double> x,
                                std::span<const double> p,
                                std::span<const std::uint8_t> sel);

// The same sum with p = sigmoid(logit), evaluated without forming p.
double bernoulli_masked_logprob_logits(std::span<const double> x,
                                       std::span<const double> logits,
                                       std::span<const std::uint8_t> sel);

struct BernoulliTerm {
  double value;
  double d_logit;
};

inline BernoulliTerm bernoulli_logit_term(double x, double logit) {
  return {-x * softplus(-logit) - (1.0 - x) * softplus(logit),
          x - sigmoid(logit)};
}

double logistic_cdf(double v, double mu, double s);

struct BinLogProb {
  double value;
  double d_mu;
  double d_scale;
};

// log P(bin containing x) for a logistic(mu, s) discretised onto 256 levels.
// Interior bins take CDF(x + 1/510) − CDF(x − 1/510); level 0 takes the whole
// lower tail and level 255 the whole upper tail. Evaluated in log space:
//   log(σ(a) − σ(b)) = −softplus(−a) − softplus(b) + log(−expm1(b − a)).
// x must lie on the 1/255 grid.
BinLogProb discretized_logistic_bin(double x, double mu, double s);

double discretized_logistic_masked_logprob(std::span<const double> x,
                                           std::span<const double> mu,
                                           std::span<const double> s,
                                           std::span<const std::uint8_t> sel);

// Σ_j ½(mu_j² + sigma_j² − 1 − 2 ln sigma_j) = KL(N(mu, diag sigma²) ‖ N(0, I)).
double gaussian_kl_to_standard_normal(std::span<const double> mu,
                                      std::span<const double> sigma);

// log N(z; mu, diag sigma²).
double gaussian_logpdf(std::span<const double> z, std::span<const double> mu,
                       std::span<const double> sigma);
double standard_normal_logpdf(std::span<const double> z);

double log_sum_exp(std::span<const double> values);

// 8-bit level of a value on the 1/255 grid; throws if off-grid.
int grid_level(double x);

}  // namespace mvae
