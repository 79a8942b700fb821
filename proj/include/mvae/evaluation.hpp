#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "mvae/masking.hpp"
#include "mvae/model.hpp"

namespace mvae {

// Posterior draws z_k = mu + sigma ⊙ eps_k for one sample, scored against the
// observed and missing sets.
struct PosteriorScores {
  std::vector<double> log_weight;     // log p(x_o|z_k,m) + log p(z_k) − log q(z_k)
  std::vector<double> observed_loglik;  // log p(x_o | z_k, m)
  std::vector<double> missing_loglik;   // log p(x_m | z_k, m)
  std::vector<double> mean_sum;         // Σ decoder mean over the first mean_draws
};

// Draws `count` noise vectors from rng (row-major, count × latent_dim) and
// decodes them in chunks of `chunk`. mean_draws < 0 averages every draw.
template <class T>
PosteriorScores score_posterior_draws(const ConditionalVae<T>& model,
                                      const Parameters<T>& params,
                                      const MaskedSample& sample, int count,
                                      Rng& rng, int mean_draws = -1, int chunk = 64);

// log (1/K) Σ_k p(x_o|z_k,m) p(z_k) / q(z_k|x̃,m), z_k ~ q.
template <class T>
double importance_logpx(const ConditionalVae<T>& model, const Parameters<T>& params,
                        const MaskedSample& sample, int K, Rng& rng);

// (1/S) Σ_s log p(x_m | z_s, m), z_s ~ q. Zero when nothing is missing.
template <class T>
double imputation_loglik(const ConditionalVae<T>& model, const Parameters<T>& params,
                         const MaskedSample& sample, int S, Rng& rng);

// (1/S) Σ_s E[x | z_s, m]: Bernoulli p, or the logistic mean clamped to [0, 1].
template <class T>
std::vector<double> mean_reconstruction(const ConditionalVae<T>& model,
                                        const Parameters<T>& params,
                                        const MaskedSample& sample, int S, Rng& rng);

// −logpx / (observed_pixels · ln 2). A multi-channel pixel counts once.
double bits_per_pixel(double logpx, double observed_pixels);
double bits_per_pixel(double logpx, const Mask& m);

// Mean of (x − x̂)² over the channel components of pixels whose mask value is
// `want`. Throws when no pixel is selected.
double masked_mse(std::span<const double> x, std::span<const double> x_hat,
                  const Mask& m, int channels, std::uint8_t want);

struct MseMetrics {
  std::optional<double> observed;  // absent when no pixel is observed
  std::optional<double> missing;   // absent when no pixel is missing
};
MseMetrics mse_metrics(std::span<const double> x, std::span<const double> x_hat,
                       const Mask& m, int channels);

struct EvalConfig {
  int importance_samples = 256;  // K
  int imputation_samples = 256;  // S, also used for the mean reconstruction
  std::uint64_t seed = 0;        // image i uses the substream (seed, "eval", i)
};

// Per-image metrics. The K and S estimators share their posterior draws: the
// first S of the max(K, S) draws serve the imputation and reconstruction.
struct ImageMetrics {
  double logpx = 0.0;
  double imput_loglik = 0.0;
  double bits_per_pixel = 0.0;
  std::optional<double> mse_observed;
  std::optional<double> mse_missing;
};

template <class T>
ImageMetrics evaluate_sample(const ConditionalVae<T>& model, const Parameters<T>& params,
                             const MaskedSample& sample, const EvalConfig& config,
                             std::uint64_t image_index);

// Test-set means of the per-image metrics. MSE means run over the images
// where the corresponding set is nonempty.
struct MetricSummary {
  double logpx = 0.0;
  double imput_loglik = 0.0;
  double bits_per_pixel = 0.0;
  double mse_observed = 0.0;
  double mse_missing = 0.0;
};

template <class T>
MetricSummary evaluate_dataset(const ConditionalVae<T>& model, const Parameters<T>& params,
                               const MaskedDataset& test, const EvalConfig& config,
                               std::vector<ImageMetrics>* per_image = nullptr);

struct MetricReport {
  std::string dataset;
  Variant method = Variant::EdInd;
  Missingness missingness = Missingness::Mcar;
  int replicate = 0;
  std::uint64_t replicate_seed = 0;
  int test_images = 0;
  int importance_samples = 0;
  int imputation_samples = 0;
  MetricSummary metrics;
};

// One JSON object on a single line with a fixed key order.
std::string metric_report_to_json(const MetricReport& report);
MetricReport metric_report_from_json(const std::string& line);

// 8-bit raster, H×W×C with C ∈ {1, 3}.
struct RasterImage {
  int height = 0;
  int width = 0;
  int channels = 0;
  std::vector<std::uint8_t> pixels;

  bool operator==(const RasterImage&) const = default;
};

void write_png(const std::filesystem::path& path, const RasterImage& image);
RasterImage read_png(const std::filesystem::path& path);

struct GridRow {
  std::vector<double> x;
  Mask m;
  std::vector<double> x_tilde;
  std::vector<std::vector<double>> reconstructions;  // one per method
};

// Tiles rows of [x, m, x̃, reconstruction per method] with no spacing; values
// map to round(255·v) clipped to [0, 255] and the mask renders white where
// observed. Colour images give an RGB raster with the mask replicated.
RasterImage compose_grid(std::span<const GridRow> rows, ImageShape shape);
void render_grid(std::span<const GridRow> rows, ImageShape shape,
                 const std::filesystem::path& path);

}  // namespace mvae
