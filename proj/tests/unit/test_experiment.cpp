#include <doctest.h>

#include <cstdlib>
#include <fstream>
#include <iterator>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "mvae/experiment.hpp"
#include "test_support.hpp"

using namespace mvae;
using namespace mvae::testing;

namespace {

std::string read_text(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

std::vector<std::string> read_lines(const std::filesystem::path& p) {
  std::ifstream in(p);
  std::vector<std::string> out;
  for (std::string line; std::getline(in, line);) {
    if (!line.empty()) out.push_back(line);
  }
  return out;
}

// 28×28 synthetic MNIST-shaped files: 80 training and 12 test images.
ExperimentConfig smoke_config(const std::filesystem::path& root) {
  const ImageShape shape{28, 28, 1};
  write_dataset_files(root / "data", synthetic_images(shape, 80, 1), synthetic_images(shape, 12, 2));
  ExperimentConfig c;
  c.dataset = "mnist";
  c.methods = {Variant::NoInd, Variant::EdInd};
  c.replicates = 2;
  c.seed = 5;
  c.train.max_epochs = 2;
  c.train.patience = 2;
  c.train.batch_size = 32;
  c.train.record_wall_time = false;
  c.importance_samples = 4;
  c.imputation_samples = 4;
  c.grid_samples = 3;
  c.data_dir = root / "data";
  c.out_dir = root / "out";
  c.val_count = 20;
  c.test_count = 6;
  return c;
}

int run_cli(const std::string& args, const std::filesystem::path& log) {
  const std::string cmd = std::string(MVAE_CLI_PATH) + " " + args + " > " + log.string() + " 2>&1";
  return std::system(cmd.c_str());
}

}  // namespace

TEST_SUITE("experiment") {

TEST_CASE("replicate seeds") {
  std::set<std::uint64_t> seen;
  for (int r = 0; r < 50; ++r) {
    const auto s = replicate_seeds(7, r);
    const auto again = replicate_seeds(7, r);
    CHECK(s.replicate == again.replicate);
    CHECK(s.training == again.training);
    CHECK(s.evaluation == again.evaluation);
    seen.insert(s.replicate);
    seen.insert(s.training);
    seen.insert(s.evaluation);
  }
  CHECK(seen.size() == 150);
  CHECK(replicate_seeds(8, 0).replicate != replicate_seeds(7, 0).replicate);
}

TEST_CASE("configuration validation") {
  TempDir dir("cfg");
  auto c = smoke_config(dir.path());
  CHECK_NOTHROW(c.validate());
  auto bad = c;
  bad.replicates = 0;
  CHECK_THROWS(bad.validate());
  bad = c;
  bad.methods.clear();
  CHECK_THROWS(bad.validate());
  bad = c;
  bad.methods = {Variant::EdInd, Variant::EdInd};
  CHECK_THROWS(bad.validate());
  bad = c;
  bad.dataset = "cifar";
  CHECK_THROWS(bad.validate());
  bad = c;
  bad.importance_samples = 0;
  CHECK_THROWS(bad.validate());
}

TEST_CASE("frozen masks are written once and read back unchanged") {
  TempDir dir("masks");
  const auto c = smoke_config(dir.path());
  const auto made = make_masks(c, 0);
  CHECK(made.train.size() == 60);
  CHECK(made.val.size() == 20);
  CHECK(made.test.size() == 6);
  const auto loaded = load_masked_splits(c, 0);
  CHECK(loaded.train.images.levels == made.train.images.levels);
  CHECK(loaded.val.images.labels == made.val.images.labels);
  REQUIRE(loaded.test.masks.size() == made.test.masks.size());
  for (std::size_t i = 0; i < made.test.masks.size(); ++i) {
    CHECK(loaded.test.masks[i].observed == made.test.masks[i].observed);
  }
  const auto paths = replicate_paths(c.out_dir, 0);
  CHECK(std::filesystem::exists(paths.manifest()));
  CHECK(std::filesystem::exists(paths.corrupted("test")));

  // Same split for every replicate, different masks.
  const auto other = make_masks(c, 1);
  CHECK(other.train.images.levels == made.train.images.levels);
  bool differs = false;
  for (std::size_t i = 0; i < made.train.masks.size(); ++i) {
    if (other.train.masks[i].observed != made.train.masks[i].observed) differs = true;
  }
  CHECK(differs);
}

TEST_CASE("experiment pipeline writes every artifact and resumes without recomputation") {
  TempDir dir("exp");
  const auto c = smoke_config(dir.path());
  const auto result = run_experiment(c);
  CHECK(result.records.size() == 4);
  // One comparison against ed_ind per metric.
  CHECK(result.significance.size() == 5);
  for (const auto& s : result.significance) {
    CHECK(s.method == Variant::NoInd);
    CHECK(s.reference == Variant::EdInd);
    CHECK(s.n == 2);
  }
  const auto results = read_lines(c.out_dir / "results.jsonl");
  CHECK(results.size() == 4);
  CHECK(read_lines(c.out_dir / "significance.jsonl").size() == result.significance.size());
  for (int r = 0; r < 2; ++r) {
    const auto paths = replicate_paths(c.out_dir, r);
    for (auto m : c.methods) {
      CHECK(std::filesystem::exists(paths.checkpoint(m)));
      CHECK(read_lines(paths.epoch_log(m)).size() == 2);
      CHECK(std::filesystem::exists(paths.metrics(m)));
      CHECK(ModelSpec::from_json(read_text(paths.model_spec(m))) == ModelSpec::for_dataset("mnist", m));
    }
    char name[32];
    std::snprintf(name, sizeof name, "grid-replicate-%02d.png", r);
    const auto grid = read_png(c.out_dir / name);
    CHECK(grid.height == 3 * 28);
    CHECK(grid.width == 5 * 28);
  }

  // A second run finds everything on disk.
  const auto ckpt = replicate_paths(c.out_dir, 0).checkpoint(Variant::EdInd);
  const auto stamp = std::filesystem::last_write_time(ckpt);
  const auto before = read_text(c.out_dir / "results.jsonl");
  run_experiment(c);
  CHECK(std::filesystem::last_write_time(ckpt) == stamp);
  CHECK(read_text(c.out_dir / "results.jsonl") == before);

  // A changed configuration is refused.
  auto changed = c;
  changed.train.learning_rate = 0.5;
  CHECK_THROWS(run_experiment(changed));
}

TEST_CASE("command-line front end") {
  TempDir dir("cli");
  const auto c = smoke_config(dir.path());
  const auto log = dir.path() / "log.txt";
  CHECK(run_cli("--help", log) == 0);
  CHECK(read_text(log).find("experiment") != std::string::npos);
  CHECK(run_cli("--dataset cifar experiment", log) != 0);
  CHECK(run_cli("experiment --data-dir " + (dir.path() / "nowhere").string() + " --out-dir " +
                    (dir.path() / "o").string(),
                log) != 0);
  CHECK(read_text(log).find("mvae: error:") != std::string::npos);

  const auto cfg = dir.path() / "run.conf";
  {
    std::ofstream out(cfg);
    out << "dataset = \"mnist\"\n"
        << "methods = \"no_ind,ed_ind\"\n"
        << "replicates = 2\nseed = 5\nmax-epochs = 2\npatience = 2\nbatch-size = 32\n"
        << "importance-samples = 4\nimputation-samples = 4\ngrid-samples = 3\n"
        << "val-count = 20\ntest-count = 6\nno-wall-time = true\nquiet = true\n"
        << "data-dir = \"" << c.data_dir.string() << "\"\n";
  }
  const auto cli_out = dir.path() / "cli-out";
  REQUIRE(run_cli("--config " + cfg.string() + " --out-dir " + cli_out.string() + " experiment", log) == 0);
  run_experiment(c);
  CHECK(read_text(cli_out / "results.jsonl") == read_text(c.out_dir / "results.jsonl"));
  CHECK(read_text(cli_out / "grid-replicate-01.png") == read_text(c.out_dir / "grid-replicate-01.png"));

  // Step-by-step subcommands reproduce the pipeline's records.
  const auto steps = dir.path() / "steps";
  const std::string common = "--config " + cfg.string() + " --out-dir " + steps.string() + " ";
  REQUIRE(run_cli(common + "make-masks --replicate 1", log) == 0);
  REQUIRE(run_cli(common + "train --replicate 1 --method ed_ind", log) == 0);
  REQUIRE(run_cli(common + "evaluate --replicate 1 --method ed_ind", log) == 0);
  const auto paths = replicate_paths(c.out_dir, 1), step_paths = replicate_paths(steps, 1);
  CHECK(read_text(step_paths.metrics(Variant::EdInd)) == read_text(paths.metrics(Variant::EdInd)));
  CHECK(read_text(step_paths.checkpoint(Variant::EdInd)) == read_text(paths.checkpoint(Variant::EdInd)));
  REQUIRE(run_cli(common + "train --replicate 1 --method no_ind", log) == 0);
  REQUIRE(run_cli(common + "visualize --replicate 1 -o " + (steps / "g.png").string(), log) == 0);
  CHECK(read_text(steps / "g.png") == read_text(c.out_dir / "grid-replicate-01.png"));
}

}  // TEST_SUITE
