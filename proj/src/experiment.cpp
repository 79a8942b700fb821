#include "mvae/experiment.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <set>
#include <sstream>
#include <stdexcept>

#include <nlohmann/json.hpp>

#include "mvae/stats.hpp"

namespace mvae {

namespace fs = std::filesystem;
using ojson = nlohmann::ordered_json;

namespace {

constexpr int kNumClasses = 10;
const char* const kSplits[] = {"train", "val", "test"};

void write_text(const fs::path& path, const std::string& text) {
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot open " + tmp.string() + " for writing");
    out << text;
    if (!out) throw std::runtime_error("failed writing " + tmp.string());
  }
  fs::rename(tmp, path);
}

std::string read_text(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void note(const ProgressLog& log, const std::string& message) {
  if (log) log(message);
}

std::string two_digits(int r) {
  char buf[16];
  std::snprintf(buf, sizeof buf, "%02d", r);
  return buf;
}

}  // namespace

void ExperimentConfig::validate() const {
  if (dataset != "mnist" && dataset != "svhn") {
    throw std::invalid_argument("dataset must be mnist or svhn, got '" + dataset + "'");
  }
  if (methods.empty()) throw std::invalid_argument("at least one method is required");
  if (std::set<Variant>(methods.begin(), methods.end()).size() != methods.size()) {
    throw std::invalid_argument("methods must not repeat");
  }
  if (replicates < 1) throw std::invalid_argument("replicates must be >= 1");
  if (importance_samples < 1) throw std::invalid_argument("importance samples (K) must be >= 1");
  if (imputation_samples < 1) throw std::invalid_argument("imputation samples (S) must be >= 1");
  if (grid_samples < 0) throw std::invalid_argument("grid samples must be >= 0");
  if (val_count < 1) throw std::invalid_argument("validation count must be >= 1");
  if (out_dir.empty()) throw std::invalid_argument("an output directory is required");
  train.validate();
}

std::string ExperimentConfig::to_json() const {
  ojson j;
  j["dataset"] = dataset;
  j["missingness"] = mvae::to_string(missingness);
  j["block_extent"] = mvae::to_string(block_extent);
  std::vector<std::string> names;
  for (auto m : methods) names.push_back(mvae::to_string(m));
  j["methods"] = names;
  j["replicates"] = replicates;
  j["seed"] = seed;
  j["learning_rate"] = train.learning_rate;
  j["batch_size"] = train.batch_size;
  j["max_epochs"] = train.max_epochs;
  j["patience"] = train.patience;
  j["adam_beta1"] = train.adam_beta1;
  j["adam_beta2"] = train.adam_beta2;
  j["adam_eps"] = train.adam_eps;
  j["importance_samples"] = importance_samples;
  j["imputation_samples"] = imputation_samples;
  j["grid_samples"] = grid_samples;
  j["train_count"] = train_count;
  j["val_count"] = val_count;
  j["test_count"] = test_count;
  return j.dump(2) + "\n";
}

ReplicateSeeds replicate_seeds(std::uint64_t root, int replicate) {
  ReplicateSeeds s{};
  s.replicate = derive_seed(root, "replicate", std::uint64_t(replicate));
  s.training = derive_seed(s.replicate, "train");
  s.evaluation = derive_seed(s.replicate, "eval");
  return s;
}

fs::path ReplicatePaths::images(const std::string& split) const { return dir / (split + "-images.idx"); }
fs::path ReplicatePaths::labels(const std::string& split) const { return dir / (split + "-labels.idx"); }
fs::path ReplicatePaths::masks(const std::string& split) const { return dir / (split + "-masks.idx"); }
fs::path ReplicatePaths::corrupted(const std::string& split) const {
  return dir / (split + "-corrupted.idx");
}
fs::path ReplicatePaths::assignment() const { return dir / "mnar-assignment.json"; }
fs::path ReplicatePaths::manifest() const { return dir / "manifest.json"; }
fs::path ReplicatePaths::method_dir(Variant m) const { return dir / mvae::to_string(m); }
fs::path ReplicatePaths::checkpoint(Variant m) const { return method_dir(m) / "checkpoint.bin"; }
fs::path ReplicatePaths::epoch_log(Variant m) const { return method_dir(m) / "epochs.jsonl"; }
fs::path ReplicatePaths::model_spec(Variant m) const { return method_dir(m) / "model.json"; }
fs::path ReplicatePaths::metrics(Variant m) const { return method_dir(m) / "metrics.json"; }

ReplicatePaths replicate_paths(const fs::path& out_dir, int replicate) {
  return {out_dir / ("replicate-" + two_digits(replicate))};
}

MaskedSplits make_masks(const ExperimentConfig& config, int replicate) {
  config.validate();
  const auto files = DatasetFiles::in_directory(config.data_dir);
  const auto train_file = make_dataset(config.dataset, read_idx(files.train_images),
                                       read_idx(files.train_labels));
  const auto test_file = make_dataset(config.dataset, read_idx(files.test_images),
                                      read_idx(files.test_labels));
  const ImageShape expected = ModelSpec::for_dataset(config.dataset, Variant::EdInd).input;
  if (!(train_file.shape == expected) || !(test_file.shape == expected)) {
    throw std::invalid_argument("images in " + config.data_dir.string() +
                                " do not have the " + config.dataset + " shape");
  }
  if (config.val_count >= train_file.size()) {
    throw std::invalid_argument("validation count leaves no training images");
  }
  SplitSpec split;
  split.val_count = config.val_count;
  split.train_count = config.train_count ? config.train_count : train_file.size() - config.val_count;
  split.test_count = config.test_count;
  split.seed = derive_seed(config.seed, "split");
  const auto splits = split_dataset(train_file, test_file, split);

  const auto seeds = replicate_seeds(config.seed, replicate);
  const auto table = MaskConfigTable::for_dataset(config.dataset);
  MnarAssignment assignment;
  if (config.missingness == Missingness::Mnar) {
    auto rng = make_rng(seeds.replicate, "mnar-assignment");
    assignment = assign_mnar_configs(table, kNumClasses, rng);
  }

  MaskedSplits out;
  MaskedDataset* targets[] = {&out.train, &out.val, &out.test};
  const ImageDataset* sources[] = {&splits.train, &splits.val, &splits.test};
  const auto paths = replicate_paths(config.out_dir, replicate);
  fs::create_directories(paths.dir);
  ojson manifest;
  manifest["dataset"] = config.dataset;
  manifest["missingness"] = to_string(config.missingness);
  manifest["block_extent"] = to_string(config.block_extent);
  manifest["replicate"] = replicate;
  manifest["replicate_seed"] = seeds.replicate;
  for (int s = 0; s < 3; ++s) {
    const std::string name = kSplits[s];
    targets[s]->images = *sources[s];
    targets[s]->masks = generate_masks(*sources[s], config.missingness, table, assignment,
                                       seeds.replicate, "mask-" + name, config.block_extent);
    write_idx(paths.images(name), to_idx(targets[s]->images));
    write_idx(paths.labels(name), labels_to_idx(targets[s]->images));
    write_idx(paths.masks(name), masks_to_idx(targets[s]->masks));
    write_idx(paths.corrupted(name), corrupted_to_idx(*targets[s]));
    std::size_t missing = 0, pixels = 0;
    for (const auto& m : targets[s]->masks) {
      missing += m.missing_count();
      pixels += m.pixels();
    }
    manifest[name] = {{"images", targets[s]->size()},
                      {"missing_fraction", pixels ? double(missing) / double(pixels) : 0.0}};
  }
  if (config.missingness == Missingness::Mnar) {
    write_text(paths.assignment(), assignment_to_json(assignment));
  }
  // Written last: its presence marks a complete replicate dataset.
  write_text(paths.manifest(), manifest.dump(2) + "\n");
  return out;
}

MaskedSplits load_masked_splits(const ExperimentConfig& config, int replicate) {
  const auto paths = replicate_paths(config.out_dir, replicate);
  if (!fs::exists(paths.manifest())) {
    throw std::runtime_error("no masked dataset in " + paths.dir.string() +
                             " (run make-masks first)");
  }
  MaskedSplits out;
  MaskedDataset* targets[] = {&out.train, &out.val, &out.test};
  for (int s = 0; s < 3; ++s) {
    const std::string name = kSplits[s];
    targets[s]->images = make_dataset(config.dataset, read_idx(paths.images(name)),
                                      read_idx(paths.labels(name)));
    targets[s]->masks = masks_from_idx(read_idx(paths.masks(name)));
    if (targets[s]->masks.size() != targets[s]->size()) {
      throw std::runtime_error(name + " masks and images differ in count");
    }
  }
  return out;
}

Checkpoint train_method(const ExperimentConfig& config, int replicate, Variant method,
                        bool resume, const ProgressLog& log) {
  config.validate();
  const auto data = load_masked_splits(config, replicate);
  const auto paths = replicate_paths(config.out_dir, replicate);
  const auto spec = ModelSpec::for_dataset(config.dataset, method);
  fs::create_directories(paths.method_dir(method));
  write_text(paths.model_spec(method), spec.to_json() + "\n");

  TrainConfig tc = config.train;
  tc.seed = replicate_seeds(config.seed, replicate).training;
  TrainHooks hooks;
  if (resume && fs::exists(paths.checkpoint(method))) {
    hooks.resume = load_checkpoint(paths.checkpoint(method));
    note(log, "resuming " + to_string(method) + " at epoch " +
                  std::to_string(hooks.resume->epoch));
  }
  const std::string tag = "replicate " + std::to_string(replicate) + " " + to_string(method);
  hooks.on_epoch = [&](const Checkpoint& ckpt) {
    save_checkpoint(paths.checkpoint(method), ckpt);
    std::string lines;
    for (const auto& r : ckpt.log) lines += epoch_record_to_json(r) + "\n";
    write_text(paths.epoch_log(method), lines);
    const auto& r = ckpt.log.back();
    char buf[160];
    std::snprintf(buf, sizeof buf, " epoch %d train %.3f val %.3f (best %.3f @ %d)", r.epoch,
                  r.train_elbo, r.val_elbo, ckpt.best_val_elbo, ckpt.best_epoch);
    note(log, tag + buf);
  };
  return train(spec, data.train, data.val, tc, hooks);
}

MetricReport evaluate_method(const ExperimentConfig& config, int replicate, Variant method,
                             const ProgressLog& log) {
  config.validate();
  const auto paths = replicate_paths(config.out_dir, replicate);
  const auto data = load_masked_splits(config, replicate);
  const auto ckpt = load_checkpoint(paths.checkpoint(method));
  if (ckpt.spec.variant != method) {
    throw std::runtime_error(paths.checkpoint(method).string() + " holds a " +
                             to_string(ckpt.spec.variant) + " model");
  }
  const ConditionalVae<float> model(ckpt.spec);
  const auto seeds = replicate_seeds(config.seed, replicate);
  EvalConfig ec;
  ec.importance_samples = config.importance_samples;
  ec.imputation_samples = config.imputation_samples;
  ec.seed = seeds.evaluation;
  note(log, "evaluating replicate " + std::to_string(replicate) + " " + to_string(method) +
                " on " + std::to_string(data.test.size()) + " test images");

  MetricReport report;
  report.dataset = config.dataset;
  report.method = method;
  report.missingness = config.missingness;
  report.replicate = replicate;
  report.replicate_seed = seeds.replicate;
  report.test_images = int(data.test.size());
  report.importance_samples = ec.importance_samples;
  report.imputation_samples = ec.imputation_samples;
  report.metrics = evaluate_dataset(model, ckpt.best_params, data.test, ec);
  write_text(paths.metrics(method), metric_report_to_json(report) + "\n");
  return report;
}

void render_replicate_grid(const ExperimentConfig& config, int replicate, const fs::path& path) {
  config.validate();
  const auto paths = replicate_paths(config.out_dir, replicate);
  const auto data = load_masked_splits(config, replicate);
  const auto seeds = replicate_seeds(config.seed, replicate);
  const std::size_t n = std::min(std::size_t(config.grid_samples), data.test.size());
  if (n == 0) throw std::invalid_argument("grid needs at least one test image");

  std::vector<GridRow> rows(n);
  for (std::size_t i = 0; i < n; ++i) {
    const auto s = data.test.sample(i);
    rows[i].x = s.x;
    rows[i].m = s.m;
    rows[i].x_tilde = s.x_tilde;
  }
  for (auto method : config.methods) {
    const auto ckpt = load_checkpoint(paths.checkpoint(method));
    const ConditionalVae<float> model(ckpt.spec);
    for (std::size_t i = 0; i < n; ++i) {
      // Same substream as the evaluation, so the grid shows the evaluated x̂.
      auto rng = make_rng(seeds.evaluation, "eval", i);
      rows[i].reconstructions.push_back(mean_reconstruction(
          model, ckpt.best_params, data.test.sample(i), config.imputation_samples, rng));
    }
  }
  render_grid(rows, data.test.images.shape, path);
}

namespace {

struct MetricField {
  const char* name;
  double MetricSummary::*field;
  bool higher_is_better;
};

const MetricField kMetricFields[] = {
    {"logpx_o", &MetricSummary::logpx, true},
    {"imput_loglik", &MetricSummary::imput_loglik, true},
    {"bits_per_pixel", &MetricSummary::bits_per_pixel, false},
    {"mse_observed", &MetricSummary::mse_observed, false},
    {"mse_missing", &MetricSummary::mse_missing, false},
};

}  // namespace

std::vector<SignificanceRecord> significance_tests(const std::vector<MetricReport>& records) {
  std::set<Variant> methods;
  std::set<int> replicates;
  for (const auto& r : records) {
    methods.insert(r.method);
    replicates.insert(r.replicate);
  }
  std::vector<SignificanceRecord> out;
  if (!methods.count(Variant::EdInd)) return out;
  auto find = [&](Variant m, int rep) -> const MetricReport* {
    for (const auto& r : records) {
      if (r.method == m && r.replicate == rep) return &r;
    }
    return nullptr;
  };
  for (auto method : methods) {
    if (method == Variant::EdInd) continue;
    for (const auto& f : kMetricFields) {
      SignificanceRecord s;
      s.metric = f.name;
      s.method = method;
      std::vector<double> ref, other;
      for (int rep : replicates) {
        const auto* a = find(Variant::EdInd, rep);
        const auto* b = find(method, rep);
        if (a && b) {
          ref.push_back(a->metrics.*f.field);
          other.push_back(b->metrics.*f.field);
        }
      }
      s.n = int(ref.size());
      try {
        // Orient the differences so that positive means the reference wins.
        if (!f.higher_is_better) std::swap(ref, other);
        const auto t = paired_t_test(ref, other);
        s.mean_difference = f.higher_is_better ? t.mean_difference : -t.mean_difference;
        s.t = f.higher_is_better ? t.t : -t.t;
        s.dof = t.dof;
        s.p_two_sided = t.p_two_sided;
        s.p_one_sided = one_sided_p(t);
        s.stars = significance_stars(t.p_two_sided);
      } catch (const std::invalid_argument& e) {
        s.error = e.what();
      }
      out.push_back(s);
    }
  }
  return out;
}

std::string significance_to_json(const SignificanceRecord& s) {
  ojson j;
  j["metric"] = s.metric;
  j["method"] = to_string(s.method);
  j["reference"] = to_string(s.reference);
  j["n"] = s.n;
  if (!s.error.empty()) {
    j["error"] = s.error;
    return j.dump();
  }
  j["mean_difference"] = s.mean_difference;
  j["t"] = s.t;
  j["dof"] = s.dof;
  j["p_two_sided"] = s.p_two_sided;
  j["p_one_sided"] = s.p_one_sided;
  j["stars"] = s.stars;
  return j.dump();
}

ExperimentResult run_experiment(const ExperimentConfig& config, const ProgressLog& log) {
  config.validate();
  fs::create_directories(config.out_dir);
  const auto config_path = config.out_dir / "config.json";
  {
    // Everything except the replicate count must match an existing run.
    auto strip = [](const std::string& text) {
      auto j = nlohmann::json::parse(text);
      j.erase("replicates");
      return j;
    };
    if (fs::exists(config_path) && strip(read_text(config_path)) != strip(config.to_json())) {
      throw std::runtime_error(config.out_dir.string() +
                               " holds an experiment with a different configuration");
    }
    write_text(config_path, config.to_json());
  }

  ExperimentResult result;
  for (int r = 0; r < config.replicates; ++r) {
    const auto paths = replicate_paths(config.out_dir, r);
    if (!fs::exists(paths.manifest())) {
      note(log, "replicate " + std::to_string(r) + ": sampling masks");
      make_masks(config, r);
    }
    for (auto method : config.methods) {
      if (fs::exists(paths.metrics(method))) {
        result.records.push_back(metric_report_from_json(read_text(paths.metrics(method))));
        continue;
      }
      train_method(config, r, method, fs::exists(paths.checkpoint(method)), log);
      result.records.push_back(evaluate_method(config, r, method, log));
    }
    if (config.grid_samples > 0) {
      render_replicate_grid(config, r,
                            config.out_dir / ("grid-replicate-" + two_digits(r) + ".png"));
    }
  }

  std::string lines;
  for (const auto& rec : result.records) lines += metric_report_to_json(rec) + "\n";
  write_text(config.out_dir / "results.jsonl", lines);
  result.significance = significance_tests(result.records);
  lines.clear();
  for (const auto& s : result.significance) lines += significance_to_json(s) + "\n";
  write_text(config.out_dir / "significance.jsonl", lines);
  return result;
}

}  // namespace mvae
