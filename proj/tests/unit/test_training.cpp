#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <vector>

#include "mvae/training.hpp"
#include "test_support.hpp"

using namespace mvae;
using namespace mvae::testing;

namespace {

MaskedDataset synthetic_masked(std::size_t n, std::uint64_t seed) {
  MaskedDataset ds;
  ds.images = synthetic_images({4, 4, 1}, n, seed);
  Rng rng(seed + 100);
  for (std::size_t i = 0; i < n; ++i) ds.masks.push_back(place_blocks({1, 3}, 4, 4, rng).mask);
  return ds;
}

TrainConfig quick_config() {
  TrainConfig c;
  c.learning_rate = 1e-2;
  c.batch_size = 16;
  c.max_epochs = 6;
  c.patience = 6;
  c.seed = 77;
  c.record_wall_time = false;
  return c;
}

Parameters<float> scalar_params(float v) {
  Parameters<float> p;
  p.tensors.push_back({"w", {1}, {v}});
  return p;
}

void check_same_params(const Parameters<float>& a, const Parameters<float>& b) {
  REQUIRE(a.tensors.size() == b.tensors.size());
  for (std::size_t t = 0; t < a.tensors.size(); ++t) {
    REQUIRE(a.tensors[t].name == b.tensors[t].name);
    REQUIRE(a.tensors[t].shape == b.tensors[t].shape);
    REQUIRE(a.tensors[t].values == b.tensors[t].values);
  }
}

void check_same_checkpoint(const Checkpoint& a, const Checkpoint& b) {
  CHECK(a.spec == b.spec);
  CHECK(a.step == b.step);
  CHECK(a.epoch == b.epoch);
  CHECK(a.best_epoch == b.best_epoch);
  CHECK(a.best_val_elbo == b.best_val_elbo);
  CHECK(a.epochs_since_improvement == b.epochs_since_improvement);
  CHECK(a.finished == b.finished);
  CHECK(a.log == b.log);
  check_same_params(a.params, b.params);
  check_same_params(a.best_params, b.best_params);
  check_same_params(a.moments.first, b.moments.first);
  check_same_params(a.moments.second, b.moments.second);
}

}  // namespace

TEST_SUITE("training") {

TEST_CASE("Adam two-step scalar oracle") {
  TrainConfig c;
  c.learning_rate = 0.01;
  auto p = scalar_params(0.5f);
  auto moments = zero_moments(p);
  adam_step(p, scalar_params(0.2f), moments, c, 1);
  adam_step(p, scalar_params(-0.1f), moments, c, 2);

  double w = 0.5, m = 0, v = 0;
  const double g[] = {0.2, -0.1};
  for (int t = 1; t <= 2; ++t) {
    const double gt = double(float(g[t - 1]));
    m = 0.9 * m + 0.1 * gt;
    v = 0.999 * v + 0.001 * gt * gt;
    const double mh = m / (1 - std::pow(0.9, t)), vh = v / (1 - std::pow(0.999, t));
    w += 0.01 * mh / (std::sqrt(vh) + 1e-8);
  }
  CHECK(p.tensors[0].values[0] == doctest::Approx(w).epsilon(1e-6));
  CHECK(moments.first.tensors[0].values[0] == doctest::Approx(m).epsilon(1e-6));
  CHECK(moments.second.tensors[0].values[0] == doctest::Approx(v).epsilon(1e-6));
}

TEST_CASE("Adam edge cases") {
  TrainConfig c;
  auto p = scalar_params(1.0f);
  auto moments = zero_moments(p);
  adam_step(p, scalar_params(0.0f), moments, c, 1);
  CHECK(p.tensors[0].values[0] == 1.0f);

  // A constant gradient moves by ≈ lr every step once bias correction applies.
  for (int t = 1; t <= 50; ++t) {
    const float before = p.tensors[0].values[0];
    adam_step(p, scalar_params(3.0f), moments, c, t + 1);
    REQUIRE(p.tensors[0].values[0] - before > 0.0f);
  }
  CHECK_THROWS(adam_step(p, scalar_params(1.0f), moments, c, 0));

  const auto before = p.tensors[0].values[0];
  const auto m_before = moments.first.tensors[0].values[0];
  CHECK_THROWS_WITH(adam_step(p, scalar_params(std::numeric_limits<float>::quiet_NaN()), moments, c, 60),
                    doctest::Contains("non-finite gradient in tensor w"));
  CHECK(p.tensors[0].values[0] == before);
  CHECK(moments.first.tensors[0].values[0] == m_before);
}

TEST_CASE("configuration validation") {
  CHECK_NOTHROW(TrainConfig{}.validate());
  auto bad = [](auto edit) {
    TrainConfig c;
    edit(c);
    return c;
  };
  CHECK_THROWS(bad([](TrainConfig& c) { c.learning_rate = 0; }).validate());
  CHECK_THROWS(bad([](TrainConfig& c) { c.batch_size = 0; }).validate());
  CHECK_THROWS(bad([](TrainConfig& c) { c.max_epochs = 0; }).validate());
  CHECK_THROWS(bad([](TrainConfig& c) { c.patience = -1; }).validate());
  CHECK_THROWS(bad([](TrainConfig& c) { c.patience = c.max_epochs + 1; }).validate());
  CHECK_THROWS(bad([](TrainConfig& c) { c.adam_beta1 = 1.0; }).validate());
}

TEST_CASE("epoch records round-trip through JSON") {
  const EpochRecord r{3, -101.25, -99.125000000001, 0.5};
  CHECK(epoch_record_from_json(epoch_record_to_json(r)) == r);
  CHECK_THROWS(epoch_record_from_json("{"));
}

TEST_CASE("training is deterministic and resumes bit-exactly") {
  const auto spec = tiny_spec(Variant::EdInd, LikelihoodKind::Bernoulli);
  const auto tr = synthetic_masked(60, 1), va = synthetic_masked(20, 2);
  auto config = quick_config();
  config.patience = config.max_epochs;

  const auto full = train(spec, tr, va, config);
  const auto again = train(spec, tr, va, config);
  check_same_checkpoint(full, again);
  CHECK(full.epoch == config.max_epochs);
  CHECK(full.step == std::int64_t(config.max_epochs) * 4);  // ceil(60 / 16) batches

  auto short_config = config;
  short_config.max_epochs = 2;
  short_config.patience = 2;
  const auto partial = train(spec, tr, va, short_config);
  CHECK(partial.epoch == 2);

  TempDir dir("ckpt");
  save_checkpoint(dir.path() / "c.bin", partial);
  const auto loaded = load_checkpoint(dir.path() / "c.bin");
  check_same_checkpoint(partial, loaded);
  CHECK(serialize_checkpoint(loaded) == serialize_checkpoint(partial));

  TrainHooks hooks;
  hooks.resume = loaded;
  int calls = 0;
  hooks.on_epoch = [&](const Checkpoint& c) {
    ++calls;
    CHECK(c.epoch == 2 + calls);
  };
  const auto resumed = train(spec, tr, va, config, hooks);
  CHECK(calls == config.max_epochs - 2);
  check_same_checkpoint(full, resumed);

  // Resuming with a different seed is refused.
  auto other = config;
  other.seed = 1;
  CHECK_THROWS(train(spec, tr, va, other, hooks));
}

TEST_CASE("checkpoint parsing rejects damaged input") {
  const auto spec = tiny_spec(Variant::NoInd, LikelihoodKind::Bernoulli);
  auto config = quick_config();
  config.max_epochs = 1;
  config.patience = 1;
  const auto ckpt = train(spec, synthetic_masked(20, 3), synthetic_masked(10, 4), config);
  auto bytes = serialize_checkpoint(ckpt);
  CHECK_NOTHROW(parse_checkpoint(bytes));
  auto bad_magic = bytes;
  bad_magic[0] = 'X';
  CHECK_THROWS(parse_checkpoint(bad_magic));
  auto truncated = bytes;
  truncated.resize(bytes.size() - 3);
  CHECK_THROWS(parse_checkpoint(truncated));
  CHECK_THROWS(load_checkpoint("/nonexistent/checkpoint.bin"));
}

TEST_CASE("early stopping keeps the best validation parameters") {
  const auto spec = tiny_spec(Variant::EoInd, LikelihoodKind::Bernoulli);
  const auto tr = synthetic_masked(40, 5), va = synthetic_masked(20, 6);
  for (int patience : {0, 1, 3}) {
    auto config = quick_config();
    config.learning_rate = 0.05;
    config.max_epochs = 12;
    config.patience = patience;
    std::vector<Parameters<float>> snapshots;
    TrainHooks hooks;
    hooks.on_epoch = [&](const Checkpoint& c) { snapshots.push_back(c.params); };
    const auto c = train(spec, tr, va, config, hooks);
    INFO("patience ", patience);
    REQUIRE(c.finished);
    REQUIRE(int(c.log.size()) == c.epoch);
    CHECK(c.epoch <= config.max_epochs);
    int best = 0;
    for (int i = 0; i < int(c.log.size()); ++i) {
      CHECK(c.log[i].epoch == i + 1);
      CHECK(c.log[i].wall_time_s == 0.0);
      if (c.log[i].val_elbo > c.log[best].val_elbo) best = i;
    }
    CHECK(c.best_epoch == best + 1);
    CHECK(c.best_val_elbo == c.log[best].val_elbo);
    check_same_params(c.best_params, snapshots[best]);
    if (c.epoch < config.max_epochs) {
      CHECK(c.epochs_since_improvement >= std::max(1, patience));
      CHECK(c.log.back().val_elbo <= c.best_val_elbo);
    }
  }
}

TEST_CASE("training improves the validation ELBO") {
  const auto spec = tiny_spec(Variant::EdInd, LikelihoodKind::Bernoulli);
  const auto tr = synthetic_masked(200, 7), va = synthetic_masked(50, 8);
  auto config = quick_config();
  config.max_epochs = 15;
  config.patience = 15;
  const auto c = train(spec, tr, va, config);
  ConditionalVae<float> model(spec);
  const double initial = mean_elbo(model, model.init_parameters(config.seed), va, 32, 1, "check", 0);
  const double trained = mean_elbo(model, c.best_params, va, 32, 1, "check", 0);
  CHECK(trained > initial + 1.0);
  CHECK(c.best_val_elbo > c.log.front().val_elbo);
}

TEST_CASE("mean ELBO is a deterministic function of its substream") {
  const auto spec = tiny_spec(Variant::EdInd, LikelihoodKind::DiscretizedLogistic);
  ConditionalVae<float> model(spec);
  const auto params = model.init_parameters(1);
  MaskedDataset data;
  data.images = synthetic_images({4, 4, 3}, 30, 3);
  Rng rng(4);
  for (int i = 0; i < 30; ++i) data.masks.push_back(place_blocks({1, 3}, 4, 4, rng).mask);
  const double a = mean_elbo(model, params, data, 7, 5, "val-eps", 1);
  CHECK(a == mean_elbo(model, params, data, 7, 5, "val-eps", 1));
  CHECK(a != mean_elbo(model, params, data, 7, 5, "val-eps", 2));
  // Batching does not change the noise assignment.
  CHECK(mean_elbo(model, params, data, 30, 5, "val-eps", 1) == doctest::Approx(a).epsilon(1e-5));
}

}  // TEST_SUITE
