#include "mvae/training.hpp"

#include <algorithm>
#include <bit>
#include <chrono>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>
#include <random>
#include <stdexcept>

#include <nlohmann/json.hpp>

namespace mvae {

static_assert(std::endian::native == std::endian::little,
              "checkpoint payloads are written in host byte order");

using json = nlohmann::json;

void TrainConfig::validate() const {
  auto fail = [](const std::string& what) { throw std::invalid_argument(what); };
  if (!(learning_rate > 0)) fail("learning_rate must be positive");
  if (batch_size < 1) fail("batch_size must be positive");
  if (max_epochs < 1) fail("max_epochs must be positive");
  if (patience < 0) fail("patience must be nonnegative");
  if (patience > max_epochs) fail("patience must not exceed max_epochs");
  if (!(adam_beta1 >= 0 && adam_beta1 < 1)) fail("adam_beta1 must lie in [0, 1)");
  if (!(adam_beta2 >= 0 && adam_beta2 < 1)) fail("adam_beta2 must lie in [0, 1)");
  if (!(adam_eps > 0)) fail("adam_eps must be positive");
}

template <class T>
AdamMoments<T> zero_moments(const Parameters<T>& like) {
  return {like.zeros_like(), like.zeros_like()};
}

template <class T>
void adam_step(Parameters<T>& params, const Parameters<T>& grads,
               AdamMoments<T>& moments, const TrainConfig& config,
               std::int64_t t) {
  if (t < 1) throw std::invalid_argument("Adam step index must be >= 1");
  const std::size_t n = params.tensors.size();
  if (grads.tensors.size() != n || moments.first.tensors.size() != n ||
      moments.second.tensors.size() != n) {
    throw std::invalid_argument("Adam operands have different tensor counts");
  }
  for (std::size_t i = 0; i < n; ++i) {
    const auto& g = grads.tensors[i];
    if (g.values.size() != params.tensors[i].values.size()) {
      throw std::invalid_argument("gradient shape mismatch for " + g.name);
    }
    for (std::size_t k = 0; k < g.values.size(); ++k) {
      if (!std::isfinite(double(g.values[k]))) {
        throw std::runtime_error("non-finite gradient in tensor " + g.name +
                                 " at element " + std::to_string(k));
      }
    }
  }
  const double b1 = config.adam_beta1, b2 = config.adam_beta2;
  const double c1 = 1.0 - std::pow(b1, double(t));
  const double c2 = 1.0 - std::pow(b2, double(t));
  for (std::size_t i = 0; i < n; ++i) {
    auto& p = params.tensors[i].values;
    const auto& g = grads.tensors[i].values;
    auto& m = moments.first.tensors[i].values;
    auto& v = moments.second.tensors[i].values;
    for (std::size_t k = 0; k < p.size(); ++k) {
      const double gk = double(g[k]);
      const double mk = b1 * double(m[k]) + (1.0 - b1) * gk;
      const double vk = b2 * double(v[k]) + (1.0 - b2) * gk * gk;
      m[k] = T(mk);
      v[k] = T(vk);
      const double m_hat = mk / c1;
      const double v_hat = vk / c2;
      p[k] = T(double(p[k]) + config.learning_rate * m_hat /
                                  (std::sqrt(v_hat) + config.adam_eps));
    }
  }
}

template AdamMoments<float> zero_moments(const Parameters<float>&);
template AdamMoments<double> zero_moments(const Parameters<double>&);
template void adam_step(Parameters<float>&, const Parameters<float>&,
                        AdamMoments<float>&, const TrainConfig&, std::int64_t);
template void adam_step(Parameters<double>&, const Parameters<double>&,
                        AdamMoments<double>&, const TrainConfig&, std::int64_t);

std::string epoch_record_to_json(const EpochRecord& r) {
  json j;
  j["epoch"] = r.epoch;
  j["train_elbo"] = r.train_elbo;
  j["val_elbo"] = r.val_elbo;
  j["wall_time_s"] = r.wall_time_s;
  return j.dump();
}

EpochRecord epoch_record_from_json(const std::string& line) {
  const auto j = json::parse(line);
  return {j.at("epoch").get<int>(), j.at("train_elbo").get<double>(),
          j.at("val_elbo").get<double>(), j.at("wall_time_s").get<double>()};
}

namespace {

std::uint64_t bits(double v) { return std::bit_cast<std::uint64_t>(v); }
double from_bits(const json& j) { return std::bit_cast<double>(j.get<std::uint64_t>()); }

json config_to_json(const TrainConfig& c) {
  return {{"learning_rate", bits(c.learning_rate)},
          {"batch_size", c.batch_size},
          {"max_epochs", c.max_epochs},
          {"patience", c.patience},
          {"seed", c.seed},
          {"adam_beta1", bits(c.adam_beta1)},
          {"adam_beta2", bits(c.adam_beta2)},
          {"adam_eps", bits(c.adam_eps)},
          {"record_wall_time", c.record_wall_time}};
}

TrainConfig config_from_json(const json& j) {
  TrainConfig c;
  c.learning_rate = from_bits(j.at("learning_rate"));
  c.batch_size = j.at("batch_size").get<int>();
  c.max_epochs = j.at("max_epochs").get<int>();
  c.patience = j.at("patience").get<int>();
  c.seed = j.at("seed").get<std::uint64_t>();
  c.adam_beta1 = from_bits(j.at("adam_beta1"));
  c.adam_beta2 = from_bits(j.at("adam_beta2"));
  c.adam_eps = from_bits(j.at("adam_eps"));
  c.record_wall_time = j.at("record_wall_time").get<bool>();
  return c;
}

constexpr char kMagic[8] = {'M', 'V', 'A', 'E', 'C', 'K', 'P', 'T'};

}  // namespace

std::vector<std::uint8_t> serialize_checkpoint(const Checkpoint& ckpt) {
  json header;
  header["spec"] = json::parse(ckpt.spec.to_json());
  header["config"] = config_to_json(ckpt.config);
  header["step"] = ckpt.step;
  header["epoch"] = ckpt.epoch;
  header["best_epoch"] = ckpt.best_epoch;
  header["best_val_elbo"] = bits(ckpt.best_val_elbo);
  header["epochs_since_improvement"] = ckpt.epochs_since_improvement;
  header["finished"] = ckpt.finished;
  json log = json::array();
  for (const auto& r : ckpt.log) {
    log.push_back({{"epoch", r.epoch},
                   {"train_elbo", bits(r.train_elbo)},
                   {"val_elbo", bits(r.val_elbo)},
                   {"wall_time_s", bits(r.wall_time_s)}});
  }
  header["log"] = log;

  const std::pair<const char*, const Parameters<float>*> groups[] = {
      {"params", &ckpt.params},
      {"best", &ckpt.best_params},
      {"adam_m", &ckpt.moments.first},
      {"adam_v", &ckpt.moments.second}};
  json directory = json::array();
  std::vector<std::uint8_t> payload;
  for (const auto& [prefix, group] : groups) {
    for (const auto& t : group->tensors) {
      directory.push_back({{"name", std::string(prefix) + "/" + t.name},
                           {"dtype", "f32"},
                           {"shape", t.shape},
                           {"offset", payload.size()},
                           {"count", t.values.size()}});
      const auto* p = reinterpret_cast<const std::uint8_t*>(t.values.data());
      payload.insert(payload.end(), p, p + t.values.size() * sizeof(float));
    }
  }
  header["tensors"] = directory;
  const std::string text = header.dump();

  std::vector<std::uint8_t> out(kMagic, kMagic + 8);
  const std::uint64_t len = text.size();
  const auto* lp = reinterpret_cast<const std::uint8_t*>(&len);
  out.insert(out.end(), lp, lp + 8);
  out.insert(out.end(), text.begin(), text.end());
  out.insert(out.end(), payload.begin(), payload.end());
  return out;
}

Checkpoint parse_checkpoint(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < 16 || std::memcmp(bytes.data(), kMagic, 8) != 0) {
    throw std::runtime_error("not a checkpoint file (bad magic)");
  }
  std::uint64_t len = 0;
  std::memcpy(&len, bytes.data() + 8, 8);
  if (len > bytes.size() - 16) throw std::runtime_error("truncated checkpoint header");
  const auto header = json::parse(bytes.begin() + 16, bytes.begin() + 16 + std::ptrdiff_t(len));
  const auto payload = bytes.subspan(16 + len);

  Checkpoint c;
  c.spec = ModelSpec::from_json(header.at("spec").dump());
  c.config = config_from_json(header.at("config"));
  c.step = header.at("step").get<std::int64_t>();
  c.epoch = header.at("epoch").get<int>();
  c.best_epoch = header.at("best_epoch").get<int>();
  c.best_val_elbo = from_bits(header.at("best_val_elbo"));
  c.epochs_since_improvement = header.at("epochs_since_improvement").get<int>();
  c.finished = header.at("finished").get<bool>();
  for (const auto& r : header.at("log")) {
    c.log.push_back({r.at("epoch").get<int>(), from_bits(r.at("train_elbo")),
                     from_bits(r.at("val_elbo")), from_bits(r.at("wall_time_s"))});
  }

  std::pair<std::string, Parameters<float>*> groups[] = {
      {"params", &c.params},
      {"best", &c.best_params},
      {"adam_m", &c.moments.first},
      {"adam_v", &c.moments.second}};
  for (const auto& entry : header.at("tensors")) {
    const auto full = entry.at("name").get<std::string>();
    if (entry.at("dtype").get<std::string>() != "f32") {
      throw std::runtime_error("unsupported tensor dtype in checkpoint: " + full);
    }
    const auto slash = full.find('/');
    const std::string prefix = full.substr(0, slash);
    Parameters<float>* target = nullptr;
    for (auto& [name, group] : groups) {
      if (name == prefix) target = group;
    }
    if (!target || slash == std::string::npos) {
      throw std::runtime_error("unknown tensor group in checkpoint: " + full);
    }
    const auto offset = entry.at("offset").get<std::size_t>();
    const auto count = entry.at("count").get<std::size_t>();
    if (offset + count * sizeof(float) > payload.size()) {
      throw std::runtime_error("truncated checkpoint payload at tensor " + full);
    }
    ParamTensor<float> t;
    t.name = full.substr(slash + 1);
    t.shape = entry.at("shape").get<std::vector<std::size_t>>();
    t.values.resize(count);
    std::memcpy(t.values.data(), payload.data() + offset, count * sizeof(float));
    target->tensors.push_back(std::move(t));
  }
  return c;
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  const auto bytes = serialize_checkpoint(ckpt);
  // Write-then-rename so an interrupted save never leaves a torn file.
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot open " + tmp.string() + " for writing");
    out.write(reinterpret_cast<const char*>(bytes.data()), std::streamsize(bytes.size()));
    if (!out) throw std::runtime_error("failed writing " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open checkpoint " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)),
                                  std::istreambuf_iterator<char>());
  try {
    return parse_checkpoint(bytes);
  } catch (const std::exception& e) {
    throw std::runtime_error(path.string() + ": " + e.what());
  }
}

namespace {

Matrix<float> standard_normal(Eigen::Index rows, Eigen::Index cols, Rng& rng) {
  std::normal_distribution<double> n01;
  Matrix<float> m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = float(n01(rng));
  return m;
}

}  // namespace

double mean_elbo(const ConditionalVae<float>& model, const Parameters<float>& params,
                 const MaskedDataset& data, int batch_size, std::uint64_t seed,
                 const std::string& purpose, std::uint64_t index) {
  if (data.size() == 0) throw std::invalid_argument("cannot average an ELBO over no images");
  auto rng = make_rng(seed, purpose, index);
  double total = 0.0;
  std::vector<std::size_t> idx;
  for (std::size_t start = 0; start < data.size(); start += std::size_t(batch_size)) {
    const std::size_t end = std::min(data.size(), start + std::size_t(batch_size));
    idx.resize(end - start);
    std::iota(idx.begin(), idx.end(), start);
    const auto batch = make_batch<float>(data, idx);
    const auto eps = standard_normal(Eigen::Index(idx.size()), model.spec().latent_dim, rng);
    total += model.elbo(params, batch, eps).total();
  }
  return total / double(data.size());
}

Checkpoint train(const ModelSpec& spec, const MaskedDataset& train_set,
                 const MaskedDataset& val_set, const TrainConfig& config,
                 const TrainHooks& hooks) {
  config.validate();
  if (train_set.size() == 0 || val_set.size() == 0) {
    throw std::invalid_argument("training and validation sets must be nonempty");
  }
  if (!(train_set.images.shape == spec.input) || !(val_set.images.shape == spec.input)) {
    throw std::invalid_argument("dataset image shape does not match the model input");
  }
  const ConditionalVae<float> model(spec);

  Checkpoint ckpt;
  if (hooks.resume) {
    ckpt = *hooks.resume;
    if (!(ckpt.spec == spec)) throw std::invalid_argument("resumed checkpoint has a different model spec");
    // The stopping rule may be tightened or relaxed on resume; the random
    // streams and optimiser constants may not.
    TrainConfig saved = ckpt.config;
    saved.max_epochs = config.max_epochs;
    saved.patience = config.patience;
    saved.record_wall_time = config.record_wall_time;
    if (saved.learning_rate != config.learning_rate ||
        saved.batch_size != config.batch_size || saved.seed != config.seed ||
        saved.adam_beta1 != config.adam_beta1 || saved.adam_beta2 != config.adam_beta2 ||
        saved.adam_eps != config.adam_eps) {
      throw std::invalid_argument("resumed checkpoint was trained with a different configuration");
    }
    ckpt.config = saved;
    ckpt.finished = ckpt.epoch >= config.max_epochs ||
                    (ckpt.epochs_since_improvement > 0 &&
                     ckpt.epochs_since_improvement >= config.patience);
  } else {
    ckpt.spec = spec;
    ckpt.config = config;
    ckpt.params = model.init_parameters(config.seed);
    ckpt.best_params = ckpt.params;
    ckpt.moments = zero_moments(ckpt.params);
  }

  const std::size_t n = train_set.size();
  std::vector<std::size_t> order(n);
  std::vector<std::size_t> batch_idx;
  const auto start_time = std::chrono::steady_clock::now();
  double elapsed_before = ckpt.log.empty() ? 0.0 : ckpt.log.back().wall_time_s;

  while (!ckpt.finished && ckpt.epoch < config.max_epochs) {
    const int epoch = ckpt.epoch + 1;
    std::iota(order.begin(), order.end(), std::size_t{0});
    auto shuffle_rng = make_rng(config.seed, "shuffle", std::uint64_t(epoch));
    std::shuffle(order.begin(), order.end(), shuffle_rng);

    double epoch_total = 0.0;
    for (std::size_t start = 0; start < n; start += std::size_t(config.batch_size)) {
      const std::size_t end = std::min(n, start + std::size_t(config.batch_size));
      batch_idx.assign(order.begin() + std::ptrdiff_t(start), order.begin() + std::ptrdiff_t(end));
      const auto batch = make_batch<float>(train_set, batch_idx);
      const std::int64_t t = ckpt.step + 1;
      auto eps_rng = make_rng(config.seed, "train-eps", std::uint64_t(t));
      const auto eps = standard_normal(Eigen::Index(batch_idx.size()), spec.latent_dim, eps_rng);
      auto grads = ckpt.params.zeros_like();
      const auto result = model.elbo(ckpt.params, batch, eps, &grads,
                                     1.0 / double(batch_idx.size()));
      const double total = result.total();
      if (!std::isfinite(total)) {
        throw std::runtime_error("non-finite training ELBO at epoch " + std::to_string(epoch) +
                                 ", step " + std::to_string(t) + " (recon " +
                                 std::to_string(result.recon.front()) + ", kl " +
                                 std::to_string(result.kl.front()) + " for the first image)");
      }
      adam_step(ckpt.params, grads, ckpt.moments, config, t);
      ckpt.step = t;
      epoch_total += total;
    }

    const double val = mean_elbo(model, ckpt.params, val_set, config.batch_size,
                                 config.seed, "val-eps", std::uint64_t(epoch));
    if (!std::isfinite(val)) {
      throw std::runtime_error("non-finite validation ELBO at epoch " + std::to_string(epoch));
    }
    EpochRecord record;
    record.epoch = epoch;
    record.train_elbo = epoch_total / double(n);
    record.val_elbo = val;
    if (config.record_wall_time) {
      record.wall_time_s =
          elapsed_before +
          std::chrono::duration<double>(std::chrono::steady_clock::now() - start_time).count();
    }
    ckpt.log.push_back(record);
    ckpt.epoch = epoch;

    if (ckpt.best_epoch == 0 || val > ckpt.best_val_elbo) {
      ckpt.best_val_elbo = val;
      ckpt.best_epoch = epoch;
      ckpt.best_params = ckpt.params;
      ckpt.epochs_since_improvement = 0;
    } else {
      ++ckpt.epochs_since_improvement;
      if (ckpt.epochs_since_improvement >= config.patience) ckpt.finished = true;
    }
    if (ckpt.epoch >= config.max_epochs) ckpt.finished = true;
    if (hooks.on_epoch) hooks.on_epoch(ckpt);
  }
  return ckpt;
}

}  // namespace mvae
