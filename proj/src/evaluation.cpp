#include "mvae/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <random>
#include <stdexcept>

#include <nlohmann/json.hpp>

#include "mvae/likelihoods.hpp"

namespace mvae {

template <class T>
PosteriorScores score_posterior_draws(const ConditionalVae<T>& model,
                                      const Parameters<T>& params,
                                      const MaskedSample& sample, int count,
                                      Rng& rng, int mean_draws, int chunk) {
  if (count < 1) throw std::invalid_argument("the number of posterior draws must be >= 1");
  if (chunk < 1) throw std::invalid_argument("chunk size must be >= 1");
  const auto& spec = model.spec();
  const ImageShape shape = spec.input;
  const std::size_t px = shape.pixels();
  const int channels = shape.channels;
  const std::size_t out_c = std::size_t(spec.output_channels());
  const int latent = spec.latent_dim;
  if (mean_draws < 0 || mean_draws > count) mean_draws = count;

  const auto batch = make_batch<T>(std::span<const MaskedSample>(&sample, 1), shape);
  const auto post = model.encode(params, batch.x_tilde, batch.mask, 1);
  std::vector<double> mu(latent), sigma(latent);
  for (int j = 0; j < latent; ++j) {
    mu[j] = double(post.mu(0, j));
    sigma[j] = double(post.sigma(0, j));
  }

  std::normal_distribution<double> n01;
  Matrix<T> eps(count, latent);
  for (Eigen::Index i = 0; i < eps.size(); ++i) eps.data()[i] = T(n01(rng));

  PosteriorScores out;
  out.log_weight.reserve(count);
  out.observed_loglik.reserve(count);
  out.missing_loglik.reserve(count);
  out.mean_sum.assign(shape.elements(), 0.0);
  std::vector<double> mean(shape.elements());
  std::vector<double> zd(latent);

  for (int start = 0; start < count; start += chunk) {
    const int c = std::min(chunk, count - start);
    Matrix<T> z(c, latent);
    for (int k = 0; k < c; ++k) {
      for (int j = 0; j < latent; ++j) {
        z(k, j) = post.mu(0, j) + post.sigma(0, j) * eps(start + k, j);
      }
    }
    Matrix<T> mask(Eigen::Index(c * px), 1);
    for (int k = 0; k < c; ++k) mask.middleRows(Eigen::Index(k * px), Eigen::Index(px)) = batch.mask;
    const Matrix<T> raw = model.decode(params, z, mask);

    for (int k = 0; k < c; ++k) {
      std::span<const T> rows(raw.data() + std::size_t(k) * px * out_c, px * out_c);
      const double obs = image_logprob<T>(spec.likelihood, channels, rows, batch.x,
                                          batch.pixel_mask, 1);
      const double miss = image_logprob<T>(spec.likelihood, channels, rows, batch.x,
                                           batch.pixel_mask, 0);
      for (int j = 0; j < latent; ++j) zd[j] = double(z(k, j));
      out.log_weight.push_back(obs + standard_normal_logpdf(zd) -
                               gaussian_logpdf(zd, mu, sigma));
      out.observed_loglik.push_back(obs);
      out.missing_loglik.push_back(miss);
      if (start + k < mean_draws) {
        decoder_mean<T>(spec.likelihood, channels, rows, mean);
        for (std::size_t e = 0; e < mean.size(); ++e) out.mean_sum[e] += mean[e];
      }
    }
  }
  return out;
}

namespace {

double logmeanexp_prefix(const std::vector<double>& v, int n) {
  return log_sum_exp(std::span<const double>(v.data(), std::size_t(n))) - std::log(double(n));
}

double mean_prefix(const std::vector<double>& v, int n) {
  double s = 0.0;
  for (int i = 0; i < n; ++i) s += v[i];
  return s / n;
}

}  // namespace

template <class T>
double importance_logpx(const ConditionalVae<T>& model, const Parameters<T>& params,
                        const MaskedSample& sample, int K, Rng& rng) {
  const auto scores = score_posterior_draws(model, params, sample, K, rng, 0);
  return logmeanexp_prefix(scores.log_weight, K);
}

template <class T>
double imputation_loglik(const ConditionalVae<T>& model, const Parameters<T>& params,
                         const MaskedSample& sample, int S, Rng& rng) {
  const auto scores = score_posterior_draws(model, params, sample, S, rng, 0);
  return mean_prefix(scores.missing_loglik, S);
}

template <class T>
std::vector<double> mean_reconstruction(const ConditionalVae<T>& model,
                                        const Parameters<T>& params,
                                        const MaskedSample& sample, int S, Rng& rng) {
  auto scores = score_posterior_draws(model, params, sample, S, rng, S);
  for (auto& v : scores.mean_sum) v /= S;
  return scores.mean_sum;
}

double bits_per_pixel(double logpx, double observed_pixels) {
  if (!(observed_pixels > 0)) {
    throw std::invalid_argument("bits per pixel needs at least one observed pixel");
  }
  return -logpx / (observed_pixels * std::numbers::ln2);
}

double bits_per_pixel(double logpx, const Mask& m) {
  return bits_per_pixel(logpx, double(m.observed_count()));
}

double masked_mse(std::span<const double> x, std::span<const double> x_hat,
                  const Mask& m, int channels, std::uint8_t want) {
  if (x.size() != x_hat.size() || x.size() != m.pixels() * std::size_t(channels)) {
    throw std::invalid_argument("MSE operands have mismatched shapes");
  }
  double sum = 0.0;
  std::size_t n = 0;
  for (std::size_t p = 0; p < m.pixels(); ++p) {
    if (m.observed[p] != want) continue;
    for (int c = 0; c < channels; ++c) {
      const double d = x[p * channels + c] - x_hat[p * channels + c];
      sum += d * d;
      ++n;
    }
  }
  if (n == 0) {
    throw std::invalid_argument(want ? "MSE over an empty observed set"
                                     : "MSE over an empty missing set");
  }
  return sum / double(n);
}

MseMetrics mse_metrics(std::span<const double> x, std::span<const double> x_hat,
                       const Mask& m, int channels) {
  MseMetrics out;
  if (m.observed_count() > 0) out.observed = masked_mse(x, x_hat, m, channels, 1);
  if (m.missing_count() > 0) out.missing = masked_mse(x, x_hat, m, channels, 0);
  if (!out.observed && !out.missing) masked_mse(x, x_hat, m, channels, 1);
  return out;
}

template <class T>
ImageMetrics evaluate_sample(const ConditionalVae<T>& model, const Parameters<T>& params,
                             const MaskedSample& sample, const EvalConfig& config,
                             std::uint64_t image_index) {
  const int K = config.importance_samples;
  const int S = config.imputation_samples;
  if (K < 1 || S < 1) throw std::invalid_argument("K and S must be >= 1");
  auto rng = make_rng(config.seed, "eval", image_index);
  auto scores = score_posterior_draws(model, params, sample, std::max(K, S), rng, S);
  for (auto& v : scores.mean_sum) v /= S;

  ImageMetrics m;
  m.logpx = logmeanexp_prefix(scores.log_weight, K);
  m.imput_loglik = mean_prefix(scores.missing_loglik, S);
  m.bits_per_pixel = bits_per_pixel(m.logpx, sample.m);
  const auto mse = mse_metrics(sample.x, scores.mean_sum, sample.m, model.spec().input.channels);
  m.mse_observed = mse.observed;
  m.mse_missing = mse.missing;
  return m;
}

template <class T>
MetricSummary evaluate_dataset(const ConditionalVae<T>& model, const Parameters<T>& params,
                               const MaskedDataset& test, const EvalConfig& config,
                               std::vector<ImageMetrics>* per_image) {
  if (test.size() == 0) throw std::invalid_argument("cannot evaluate an empty test set");
  MetricSummary s;
  std::size_t n_obs = 0, n_miss = 0;
  if (per_image) per_image->clear();
  for (std::size_t i = 0; i < test.size(); ++i) {
    const auto m = evaluate_sample(model, params, test.sample(i), config, i);
    s.logpx += m.logpx;
    s.imput_loglik += m.imput_loglik;
    s.bits_per_pixel += m.bits_per_pixel;
    if (m.mse_observed) {
      s.mse_observed += *m.mse_observed;
      ++n_obs;
    }
    if (m.mse_missing) {
      s.mse_missing += *m.mse_missing;
      ++n_miss;
    }
    if (per_image) per_image->push_back(m);
  }
  const double n = double(test.size());
  s.logpx /= n;
  s.imput_loglik /= n;
  s.bits_per_pixel /= n;
  if (n_obs) s.mse_observed /= double(n_obs);
  if (n_miss) s.mse_missing /= double(n_miss);
  return s;
}

std::string metric_report_to_json(const MetricReport& r) {
  nlohmann::ordered_json j;
  j["dataset"] = r.dataset;
  j["method"] = to_string(r.method);
  j["missingness"] = to_string(r.missingness);
  j["replicate"] = r.replicate;
  j["replicate_seed"] = r.replicate_seed;
  j["test_images"] = r.test_images;
  j["K"] = r.importance_samples;
  j["S"] = r.imputation_samples;
  j["logpx_o"] = r.metrics.logpx;
  j["imput_loglik"] = r.metrics.imput_loglik;
  j["bits_per_pixel"] = r.metrics.bits_per_pixel;
  j["mse_observed"] = r.metrics.mse_observed;
  j["mse_missing"] = r.metrics.mse_missing;
  return j.dump();
}

MetricReport metric_report_from_json(const std::string& line) {
  const auto j = nlohmann::json::parse(line);
  MetricReport r;
  r.dataset = j.at("dataset").get<std::string>();
  r.method = parse_variant(j.at("method").get<std::string>());
  r.missingness = parse_missingness(j.at("missingness").get<std::string>());
  r.replicate = j.at("replicate").get<int>();
  r.replicate_seed = j.at("replicate_seed").get<std::uint64_t>();
  r.test_images = j.at("test_images").get<int>();
  r.importance_samples = j.at("K").get<int>();
  r.imputation_samples = j.at("S").get<int>();
  r.metrics.logpx = j.at("logpx_o").get<double>();
  r.metrics.imput_loglik = j.at("imput_loglik").get<double>();
  r.metrics.bits_per_pixel = j.at("bits_per_pixel").get<double>();
  r.metrics.mse_observed = j.at("mse_observed").get<double>();
  r.metrics.mse_missing = j.at("mse_missing").get<double>();
  return r;
}

namespace {

std::uint8_t to_byte(double v) {
  return std::uint8_t(std::clamp(std::lround(v * 255.0), 0L, 255L));
}

}  // namespace

RasterImage compose_grid(std::span<const GridRow> rows, ImageShape shape) {
  if (rows.empty()) throw std::invalid_argument("grid needs at least one row");
  if (shape.channels != 1 && shape.channels != 3) {
    throw std::invalid_argument("grid images must have 1 or 3 channels");
  }
  const std::size_t methods = rows.front().reconstructions.size();
  const int cols = int(3 + methods);
  RasterImage img;
  img.height = int(rows.size()) * shape.height;
  img.width = cols * shape.width;
  img.channels = shape.channels;
  img.pixels.assign(std::size_t(img.height) * img.width * img.channels, 0);

  auto blit = [&](int row, int col, auto&& value) {
    for (int r = 0; r < shape.height; ++r) {
      for (int c = 0; c < shape.width; ++c) {
        const std::size_t p = std::size_t(r) * shape.width + c;
        const std::size_t y = std::size_t(row) * shape.height + r;
        const std::size_t x = std::size_t(col) * shape.width + c;
        for (int ch = 0; ch < shape.channels; ++ch) {
          img.pixels[(y * img.width + x) * img.channels + ch] = value(p, ch);
        }
      }
    }
  };
  const std::size_t elements = shape.elements();
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const auto& g = rows[i];
    if (g.x.size() != elements || g.x_tilde.size() != elements ||
        g.m.pixels() != shape.pixels() || g.reconstructions.size() != methods) {
      throw std::invalid_argument("grid row " + std::to_string(i) + " has mismatched shapes");
    }
    const int row = int(i);
    auto image = [&](const std::vector<double>& v) {
      return [&v, &shape](std::size_t p, int ch) { return to_byte(v[p * shape.channels + ch]); };
    };
    blit(row, 0, image(g.x));
    blit(row, 1, [&g](std::size_t p, int) { return std::uint8_t(g.m.observed[p] ? 255 : 0); });
    blit(row, 2, image(g.x_tilde));
    for (std::size_t k = 0; k < methods; ++k) {
      if (g.reconstructions[k].size() != elements) {
        throw std::invalid_argument("grid row " + std::to_string(i) + " has a mismatched reconstruction");
      }
      blit(row, int(3 + k), image(g.reconstructions[k]));
    }
  }
  return img;
}

void render_grid(std::span<const GridRow> rows, ImageShape shape,
                 const std::filesystem::path& path) {
  write_png(path, compose_grid(rows, shape));
}

#define MVAE_INSTANTIATE(T)                                                          \
  template PosteriorScores score_posterior_draws<T>(const ConditionalVae<T>&,        \
                                                    const Parameters<T>&,            \
                                                    const MaskedSample&, int, Rng&,  \
                                                    int, int);                       \
  template double importance_logpx<T>(const ConditionalVae<T>&, const Parameters<T>&, \
                                      const MaskedSample&, int, Rng&);               \
  template double imputation_loglik<T>(const ConditionalVae<T>&, const Parameters<T>&, \
                                       const MaskedSample&, int, Rng&);              \
  template std::vector<double> mean_reconstruction<T>(                               \
      const ConditionalVae<T>&, const Parameters<T>&, const MaskedSample&, int, Rng&); \
  template ImageMetrics evaluate_sample<T>(const ConditionalVae<T>&,                 \
                                           const Parameters<T>&, const MaskedSample&, \
                                           const EvalConfig&, std::uint64_t);        \
  template MetricSummary evaluate_dataset<T>(const ConditionalVae<T>&,               \
                                             const Parameters<T>&,                   \
                                             const MaskedDataset&, const EvalConfig&, \
                                             std::vector<ImageMetrics>*);

MVAE_INSTANTIATE(float)
MVAE_INSTANTIATE(double)

#undef MVAE_INSTANTIATE

}  // namespace mvae
