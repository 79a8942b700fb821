// Command-line front end: make-masks, train, evaluate, experiment, visualize.
#include <cstdio>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "mvae/experiment.hpp"

namespace {

using namespace mvae;

struct Options {
  ExperimentConfig config;
  std::string missingness = "mcar";
  std::string block_extent = "full";
  std::vector<std::string> methods = {"no_ind", "eo_ind", "ed_ind"};
  bool quiet = false;
  bool no_wall_time = false;
};

void add_experiment_options(CLI::App& app, Options& o) {
  auto& c = o.config;
  app.add_option("--dataset", c.dataset, "mnist or svhn")
      ->check(CLI::IsMember({"mnist", "svhn"}))
      ->capture_default_str();
  app.add_option("--missingness", o.missingness, "mcar or mnar")
      ->check(CLI::IsMember({"mcar", "mnar"}))
      ->capture_default_str();
  app.add_option("--block-extent", o.block_extent,
                 "full: k x k blocks; trimmed: (k-1) x (k-1) blocks at the same centres")
      ->check(CLI::IsMember({"full", "trimmed"}))
      ->capture_default_str();
  app.add_option("--methods", o.methods, "comma-separated subset of no_ind,eo_ind,ed_ind")
      ->delimiter(',')
      ->check(CLI::IsMember({"no_ind", "eo_ind", "ed_ind"}))
      ->capture_default_str();
  app.add_option("--replicates", c.replicates, "number of replicates")
      ->check(CLI::PositiveNumber)
      ->capture_default_str();
  app.add_option("--seed", c.seed, "root seed")->capture_default_str();
  app.add_option("--data-dir", c.data_dir, "directory with MNIST-style IDX files");
  app.add_option("--out-dir", c.out_dir, "experiment output directory");
  app.add_option("--train-count", c.train_count, "training images (0 = rest of the training file)")
      ->capture_default_str();
  app.add_option("--val-count", c.val_count, "validation images taken from the training file")
      ->capture_default_str();
  app.add_option("--test-count", c.test_count, "leading test images used (0 = all)")
      ->capture_default_str();
  app.add_option("--learning-rate", c.train.learning_rate)->capture_default_str();
  app.add_option("--batch-size", c.train.batch_size)->capture_default_str();
  app.add_option("--max-epochs", c.train.max_epochs)->capture_default_str();
  app.add_option("--patience", c.train.patience)->capture_default_str();
  app.add_option("--adam-beta1", c.train.adam_beta1)->capture_default_str();
  app.add_option("--adam-beta2", c.train.adam_beta2)->capture_default_str();
  app.add_option("--adam-eps", c.train.adam_eps)->capture_default_str();
  app.add_option("-K,--importance-samples", c.importance_samples)->capture_default_str();
  app.add_option("-S,--imputation-samples", c.imputation_samples)->capture_default_str();
  app.add_option("--grid-samples", c.grid_samples, "test images shown in reconstruction grids")
      ->capture_default_str();
  app.add_flag("--no-wall-time", o.no_wall_time, "record wall_time_s = 0 in epoch logs");
  app.add_flag("-q,--quiet", o.quiet, "no progress output");
}

void finalize(Options& o) {
  o.config.missingness = parse_missingness(o.missingness);
  o.config.block_extent = parse_block_extent(o.block_extent);
  o.config.methods.clear();
  for (const auto& m : o.methods) o.config.methods.push_back(parse_variant(m));
  o.config.train.record_wall_time = !o.no_wall_time;
  o.config.validate();
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Conditional VAE training and evaluation on masked image data"};
  app.set_config("--config", "", "key = value file supplying any option; the command line wins");
  app.fallthrough();
  app.require_subcommand(1);
  Options o;
  add_experiment_options(app, o);

  int replicate = 0;
  std::string method = "ed_ind";
  bool resume = false;
  std::string output;

  auto* make_masks_cmd = app.add_subcommand("make-masks", "sample frozen masks for one replicate");
  make_masks_cmd->add_option("--replicate", replicate)->capture_default_str();

  auto* train_cmd = app.add_subcommand("train", "train one method on one replicate");
  train_cmd->add_option("--replicate", replicate)->capture_default_str();
  train_cmd->add_option("--method", method)
      ->check(CLI::IsMember({"no_ind", "eo_ind", "ed_ind"}))
      ->capture_default_str();
  train_cmd->add_flag("--resume", resume, "continue from an existing checkpoint");

  auto* eval_cmd = app.add_subcommand("evaluate", "evaluate one trained method on the test split");
  eval_cmd->add_option("--replicate", replicate)->capture_default_str();
  eval_cmd->add_option("--method", method)
      ->check(CLI::IsMember({"no_ind", "eo_ind", "ed_ind"}))
      ->capture_default_str();

  auto* exp_cmd = app.add_subcommand("experiment", "masks, training, evaluation and tests for every replicate");

  auto* vis_cmd = app.add_subcommand("visualize", "render a reconstruction grid for one replicate");
  vis_cmd->add_option("--replicate", replicate)->capture_default_str();
  vis_cmd->add_option("-o,--output", output, "PNG path")->required();

  CLI11_PARSE(app, argc, argv);

  try {
    finalize(o);
    const ProgressLog log = o.quiet ? ProgressLog{}
                                    : ProgressLog{[](const std::string& s) {
                                        std::cerr << s << std::endl;
                                      }};
    const auto& c = o.config;
    if (*make_masks_cmd) {
      make_masks(c, replicate);
      std::cout << replicate_paths(c.out_dir, replicate).manifest().string() << "\n";
    } else if (*train_cmd) {
      const auto ckpt = train_method(c, replicate, parse_variant(method), resume, log);
      std::cout << "best validation ELBO " << ckpt.best_val_elbo << " at epoch "
                << ckpt.best_epoch << " of " << ckpt.epoch << "\n";
    } else if (*eval_cmd) {
      std::cout << metric_report_to_json(evaluate_method(c, replicate, parse_variant(method), log))
                << "\n";
    } else if (*exp_cmd) {
      const auto result = run_experiment(c, log);
      for (const auto& r : result.records) std::cout << metric_report_to_json(r) << "\n";
      for (const auto& s : result.significance) std::cout << significance_to_json(s) << "\n";
    } else if (*vis_cmd) {
      render_replicate_grid(c, replicate, output);
    }
  } catch (const std::exception& e) {
    std::cerr << "mvae: error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
