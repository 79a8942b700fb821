#include "mvae/likelihoods.hpp"

#include <algorithm>
#include <numbers>
#include <stdexcept>
#include <string>

namespace mvae {

namespace {

void check_selector(std::span<const std::uint8_t> sel, std::size_t n) {
  if (sel.size() != n) throw std::invalid_argument("selector size mismatch");
  for (auto v : sel) {
    if (v > 1) throw std::invalid_argument("selector must be binary");
  }
}

}  // namespace

double bernoulli_masked_logprob(std::span<const double> x,
                                std::span<const double> p,
                                std::span<const std::uint8_t> sel) {
  if (x.size() != p.size()) throw std::invalid_argument("shape mismatch");
  check_selector(sel, x.size());
  double total = 0.0;
  for (std::size_t d = 0; d < x.size(); ++d) {
    if (!sel[d]) continue;
    total += x[d] * std::log(p[d]) + (1.0 - x[d]) * std::log1p(-p[d]);
  }
  return total;
}

double bernoulli_masked_logprob_logits(std::span<const double> x,
                                       std::span<const double> logits,
                                       std::span<const std::uint8_t> sel) {
  if (x.size() != logits.size()) throw std::invalid_argument("shape mismatch");
  check_selector(sel, x.size());
  double total = 0.0;
  for (std::size_t d = 0; d < x.size(); ++d) {
    if (sel[d]) total += bernoulli_logit_term(x[d], logits[d]).value;
  }
  return total;
}

double logistic_cdf(double v, double mu, double s) {
  if (!(s > 0)) throw std::invalid_argument("logistic scale must be positive");
  return sigmoid((v - mu) / s);
}

int grid_level(double x) {
  const double scaled = x * 255.0;
  const double level = std::round(scaled);
  if (std::abs(scaled - level) > 1e-6 || level < 0 || level > 255) {
    throw std::invalid_argument("value " + std::to_string(x) +
                                " is not on the 1/255 pixel grid");
  }
  return int(level);
}

BinLogProb discretized_logistic_bin(double x, double mu, double s) {
  const int level = grid_level(x);
  const double v = level / 255.0;
  const double inv_s = 1.0 / s;
  const double a = (v + kBinHalfWidth - mu) * inv_s;  // upper edge
  const double b = (v - kBinHalfWidth - mu) * inv_s;  // lower edge

  // d a / d mu = −1/s, d a / d s = −a/s (same for b).
  if (level == 0) {
    const double da = sigmoid(-a);  // d/da log σ(a)
    return {-softplus(-a), -da * inv_s, -da * a * inv_s};
  }
  if (level == 255) {
    const double db = -sigmoid(b);  // d/db log(1 − σ(b))
    return {-softplus(b), -db * inv_s, -db * b * inv_s};
  }
  const double width = a - b;  // 2h/s > 0
  const double value = -softplus(-a) - softplus(b) + std::log(-std::expm1(-width));
  const double da = sigmoid(-a);
  const double db = -sigmoid(b);
  const double dwidth = 1.0 / std::expm1(width);
  return {value, -(da + db) * inv_s,
          -(da * a + db * b + dwidth * width) * inv_s};
}

double discretized_logistic_masked_logprob(std::span<const double> x,
                                           std::span<const double> mu,
                                           std::span<const double> s,
                                           std::span<const std::uint8_t> sel) {
  if (x.size() != mu.size() || x.size() != s.size()) {
    throw std::invalid_argument("shape mismatch");
  }
  check_selector(sel, x.size());
  double total = 0.0;
  for (std::size_t d = 0; d < x.size(); ++d) {
    if (!sel[d]) continue;
    if (!(s[d] > 0)) throw std::invalid_argument("logistic scale must be positive");
    total += discretized_logistic_bin(x[d], mu[d], s[d]).value;
  }
  return total;
}

double gaussian_kl_to_standard_normal(std::span<const double> mu,
                                      std::span<const double> sigma) {
  if (mu.size() != sigma.size()) throw std::invalid_argument("shape mismatch");
  double kl = 0.0;
  for (std::size_t j = 0; j < mu.size(); ++j) {
    if (!(sigma[j] > 0)) {
      throw std::invalid_argument("posterior sigma must be positive");
    }
    kl += 0.5 * (mu[j] * mu[j] + sigma[j] * sigma[j] - 1.0 -
                 2.0 * std::log(sigma[j]));
  }
  return kl;
}

double gaussian_logpdf(std::span<const double> z, std::span<const double> mu,
                       std::span<const double> sigma) {
  if (z.size() != mu.size() || z.size() != sigma.size()) {
    throw std::invalid_argument("shape mismatch");
  }
  constexpr double half_log_2pi = 0.91893853320467274178;
  double total = 0.0;
  for (std::size_t j = 0; j < z.size(); ++j) {
    const double u = (z[j] - mu[j]) / sigma[j];
    total += -half_log_2pi - std::log(sigma[j]) - 0.5 * u * u;
  }
  return total;
}

double standard_normal_logpdf(std::span<const double> z) {
  constexpr double half_log_2pi = 0.91893853320467274178;
  double total = 0.0;
  for (double v : z) total += -half_log_2pi - 0.5 * v * v;
  return total;
}

double log_sum_exp(std::span<const double> values) {
  if (values.empty()) throw std::invalid_argument("log_sum_exp of empty input");
  if (values.size() == 1) return values[0];
  const double peak = *std::max_element(values.begin(), values.end());
  if (std::isinf(peak)) return peak;
  double sum = 0.0;
  for (double v : values) sum += std::exp(v - peak);
  return peak + std::log(sum);
}

}  // namespace mvae
