#include "fedsilo/nn.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>

#include "fedsilo/metrics.hpp"
#include "fedsilo/rng.hpp"

namespace fedsilo {

namespace {

using ConstMat = Eigen::Map<const Eigen::MatrixXd>;
using MutMat = Eigen::Map<Eigen::MatrixXd>;

// Layout order: input.weight, input.bias, then per block gate.weight,
// gate.bias, transform.weight, transform.bias, then head.weight, head.bias.
std::vector<TensorInfo> make_layout(int d, int w, int blocks) {
  std::vector<TensorInfo> layout;
  std::size_t offset = 0;
  auto add = [&](const std::string& name, int rows, int cols) {
    layout.push_back(TensorInfo{name, rows, cols, offset});
    offset += static_cast<std::size_t>(rows) * cols;
  };
  add("input.weight", d, w);
  add("input.bias", w, 1);
  for (int k = 0; k < blocks; ++k) {
    const std::string prefix = "block" + std::to_string(k);
    add(prefix + ".gate.weight", w, w);
    add(prefix + ".gate.bias", w, 1);
    add(prefix + ".transform.weight", w, w);
    add(prefix + ".transform.bias", w, 1);
  }
  add("head.weight", w, 1);
  add("head.bias", 1, 1);
  return layout;
}

ConstMat tensor(const ModelParams& p, std::size_t idx) {
  const TensorInfo& t = p.layout[idx];
  return ConstMat(p.values.data() + t.offset, t.rows, t.cols);
}

MutMat grad_tensor(std::vector<double>& grads, const ModelParams& p, std::size_t idx) {
  const TensorInfo& t = p.layout[idx];
  return MutMat(grads.data() + t.offset, t.rows, t.cols);
}

// Overflow-safe logistic; exact 0/1 is still possible in double for |x| > ~37.
double sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

constexpr double kProbFloor = 1e-12;

}  // namespace

void HighwayNetConfig::validate() const {
  // input_dim 0 means "not wired to the data yet"; everything else must be
  // sane up front so configuration mistakes surface before training starts.
  if (input_dim < 0) throw ConfigError("net: input_dim must be >= 1");
  if (hidden_width < 1) throw ConfigError("net: hidden_width must be >= 1");
  if (n_blocks < 1) throw ConfigError("net: n_blocks must be >= 1");
  if (!(learning_rate > 0.0)) throw ConfigError("net: learning_rate must be positive");
  if (!(beta1 >= 0.0 && beta1 < 1.0)) throw ConfigError("net: beta1 must lie in [0, 1)");
  if (!(beta2 >= 0.0 && beta2 < 1.0)) throw ConfigError("net: beta2 must lie in [0, 1)");
  if (!(epsilon > 0.0)) throw ConfigError("net: epsilon must be positive");
  if (early_stop_patience < 1) throw ConfigError("net: early_stop_patience must be >= 1");
}

std::size_t param_count(int input_dim, int hidden_width, int n_blocks) {
  const std::size_t d = static_cast<std::size_t>(input_dim);
  const std::size_t w = static_cast<std::size_t>(hidden_width);
  const std::size_t b = static_cast<std::size_t>(n_blocks);
  return d * w + w + b * 2 * (w * w + w) + w + 1;
}

ModelParams init_model(const HighwayNetConfig& config) {
  config.validate();
  if (config.input_dim < 1) throw ConfigError("net: input_dim must be >= 1");
  ModelParams params;
  params.input_dim = config.input_dim;
  params.hidden_width = config.hidden_width;
  params.n_blocks = config.n_blocks;
  params.layout = make_layout(config.input_dim, config.hidden_width, config.n_blocks);
  params.values.assign(param_count(config.input_dim, config.hidden_width, config.n_blocks),
                       0.0);

  Rng rng(config.init_seed);
  for (const auto& t : params.layout) {
    double* slice = params.values.data() + t.offset;
    if (t.name.ends_with(".weight")) {
      const double limit = std::sqrt(6.0 / (t.rows + t.cols));
      for (std::size_t i = 0; i < t.size(); ++i) slice[i] = rng.uniform(-limit, limit);
    } else {
      // Gate biases start negative so every block opens close to identity;
      // all other biases start at zero.
      const bool gate = t.name.ends_with(".gate.bias");
      std::fill(slice, slice + t.size(), gate ? config.gate_bias_init : 0.0);
    }
  }
  return params;
}

Eigen::VectorXd forward(const ModelParams& params, const Eigen::MatrixXd& batch,
                        ForwardCache* cache) {
  if (batch.cols() != params.input_dim)
    throw DataError("forward: batch has " + std::to_string(batch.cols()) +
                    " columns, model expects " + std::to_string(params.input_dim));
  const int blocks = params.n_blocks;
  const std::size_t head_w = 2 + 4 * static_cast<std::size_t>(blocks);

  Eigen::MatrixXd x =
      (batch * tensor(params, 0)).rowwise() + tensor(params, 1).col(0).transpose();
  if (cache) {
    cache->input = batch;
    cache->block_inputs.assign(1, x);
    cache->gates.clear();
    cache->transforms.clear();
    cache->pre_transform.clear();
  }

  for (int k = 0; k < blocks; ++k) {
    const std::size_t base = 2 + 4 * static_cast<std::size_t>(k);
    Eigen::MatrixXd gate_pre =
        (x * tensor(params, base)).rowwise() + tensor(params, base + 1).col(0).transpose();
    Eigen::MatrixXd t = gate_pre.unaryExpr([](double v) { return sigmoid(v); });
    Eigen::MatrixXd h_pre = (x * tensor(params, base + 2)).rowwise() +
                            tensor(params, base + 3).col(0).transpose();
    Eigen::MatrixXd h = h_pre.cwiseMax(0.0);
    x = t.cwiseProduct(h) + (Eigen::MatrixXd::Ones(t.rows(), t.cols()) - t).cwiseProduct(x);
    if (cache) {
      cache->gates.push_back(std::move(t));
      cache->transforms.push_back(std::move(h));
      cache->pre_transform.push_back(std::move(h_pre));
      cache->block_inputs.push_back(x);
    }
  }

  Eigen::VectorXd logits = x * tensor(params, head_w);
  logits.array() += params.values.back();
  Eigen::VectorXd probs = logits.unaryExpr([](double v) {
    return std::clamp(sigmoid(v), kProbFloor, 1.0 - kProbFloor);
  });
  if (cache) cache->probabilities = probs;
  return probs;
}

double weighted_bce_loss(const Eigen::VectorXd& probs, const Eigen::VectorXd& labels,
                         double pos_weight) {
  if (probs.size() == 0) throw DataError("loss is undefined on an empty batch");
  const long n = probs.size();
  double acc = 0.0;
  for (long i = 0; i < n; ++i) {
    const double p = std::clamp(probs(i), kProbFloor, 1.0 - kProbFloor);
    acc -= pos_weight * labels(i) * std::log(p) + (1.0 - labels(i)) * std::log(1.0 - p);
  }
  return acc / static_cast<double>(n);
}

std::vector<double> backward(const ModelParams& params, const ForwardCache& cache,
                             const Eigen::VectorXd& labels, double pos_weight) {
  const long n = cache.input.rows();
  const int blocks = params.n_blocks;
  const std::size_t head_w = 2 + 4 * static_cast<std::size_t>(blocks);
  std::vector<double> grads(params.values.size(), 0.0);

  // d(loss)/d(logit): for y=1 this is -pw*(1-p)/n, for y=0 it is p/n.
  Eigen::VectorXd dz(n);
  for (long i = 0; i < n; ++i) {
    const double p = cache.probabilities(i);
    dz(i) = ((1.0 - labels(i)) * p - pos_weight * labels(i) * (1.0 - p)) /
            static_cast<double>(n);
  }

  const Eigen::MatrixXd& x_last = cache.block_inputs.back();
  grad_tensor(grads, params, head_w) = x_last.transpose() * dz;
  grads[params.layout[head_w + 1].offset] = dz.sum();
  Eigen::MatrixXd dx = dz * tensor(params, head_w).transpose();

  for (int k = blocks - 1; k >= 0; --k) {
    const std::size_t base = 2 + 4 * static_cast<std::size_t>(k);
    const Eigen::MatrixXd& x_in = cache.block_inputs[static_cast<std::size_t>(k)];
    const Eigen::MatrixXd& t = cache.gates[static_cast<std::size_t>(k)];
    const Eigen::MatrixXd& h = cache.transforms[static_cast<std::size_t>(k)];
    const Eigen::MatrixXd& h_pre = cache.pre_transform[static_cast<std::size_t>(k)];

    Eigen::MatrixXd dt = dx.cwiseProduct(h - x_in);
    Eigen::MatrixXd dh = dx.cwiseProduct(t);
    Eigen::MatrixXd dx_in =
        dx.cwiseProduct(Eigen::MatrixXd::Ones(t.rows(), t.cols()) - t);

    Eigen::MatrixXd dh_pre =
        dh.cwiseProduct(h_pre.unaryExpr([](double v) { return v > 0.0 ? 1.0 : 0.0; }));
    Eigen::MatrixXd dt_pre = dt.cwiseProduct(t).cwiseProduct(
        Eigen::MatrixXd::Ones(t.rows(), t.cols()) - t);

    grad_tensor(grads, params, base) = x_in.transpose() * dt_pre;
    grad_tensor(grads, params, base + 1) = dt_pre.colwise().sum().transpose();
    grad_tensor(grads, params, base + 2) = x_in.transpose() * dh_pre;
    grad_tensor(grads, params, base + 3) = dh_pre.colwise().sum().transpose();

    dx_in += dt_pre * tensor(params, base).transpose();
    dx_in += dh_pre * tensor(params, base + 2).transpose();
    dx = std::move(dx_in);
  }

  grad_tensor(grads, params, 0) = cache.input.transpose() * dx;
  grad_tensor(grads, params, 1) = dx.colwise().sum().transpose();
  return grads;
}

void adam_step(ModelParams& params, const std::vector<double>& grads, AdamState& state,
               const HighwayNetConfig& config) {
  if (grads.size() != params.values.size() ||
      state.first_moment.size() != params.values.size())
    throw DataError("adam_step: size mismatch");
  ++state.step_count;
  const double bc1 = 1.0 - std::pow(config.beta1, static_cast<double>(state.step_count));
  const double bc2 = 1.0 - std::pow(config.beta2, static_cast<double>(state.step_count));
  for (std::size_t i = 0; i < grads.size(); ++i) {
    const double g = grads[i];
    state.first_moment[i] = config.beta1 * state.first_moment[i] + (1.0 - config.beta1) * g;
    state.second_moment[i] =
        config.beta2 * state.second_moment[i] + (1.0 - config.beta2) * g * g;
    const double m_hat = state.first_moment[i] / bc1;
    const double v_hat = state.second_moment[i] / bc2;
    params.values[i] -= config.learning_rate * m_hat / (std::sqrt(v_hat) + config.epsilon);
  }
}

TrainStats train_local(ModelParams& params, const EncodedDataset& ds,
                       std::span<const int> train_indices,
                       std::span<const int> val_indices, const HighwayNetConfig& config,
                       int epochs, int batch_size, double pos_weight, std::uint64_t seed,
                       const EpochObserver& on_epoch) {
  config.validate();
  if (epochs < 0) throw ConfigError("train: epochs must be >= 0");
  if (batch_size < 1) throw ConfigError("train: batch_size must be >= 1");
  if (train_indices.empty()) throw DataError("train: empty training set");

  TrainStats stats;
  stats.validation_disabled = val_indices.empty();
  if (epochs == 0) return stats;  // explicit no-op: params untouched

  AdamState adam = AdamState::zeros(params.values.size());
  std::vector<int> order(train_indices.begin(), train_indices.end());

  Eigen::MatrixXd val_x;
  Eigen::VectorXd val_y;
  if (!val_indices.empty()) {
    val_x.resize(static_cast<long>(val_indices.size()), ds.width());
    val_y.resize(static_cast<long>(val_indices.size()));
    for (std::size_t i = 0; i < val_indices.size(); ++i) {
      val_x.row(static_cast<long>(i)) = ds.design_matrix.row(val_indices[i]);
      val_y(static_cast<long>(i)) = ds.labels(val_indices[i]);
    }
  }

  std::optional<std::vector<double>> best_values;
  int bad_evals = 0;

  for (int epoch = 0; epoch < epochs; ++epoch) {
    Rng rng(derive_seed(seed, "shuffle", static_cast<std::uint64_t>(epoch)));
    rng.shuffle(order);

    double loss_acc = 0.0;
    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(batch_size)) {
      const std::size_t stop = std::min(order.size(), start + static_cast<std::size_t>(batch_size));
      const long rows = static_cast<long>(stop - start);
      Eigen::MatrixXd batch(rows, ds.width());
      Eigen::VectorXd labels(rows);
      for (long i = 0; i < rows; ++i) {
        const int r = order[start + static_cast<std::size_t>(i)];
        batch.row(i) = ds.design_matrix.row(r);
        labels(i) = ds.labels(r);
      }
      ForwardCache cache;
      Eigen::VectorXd probs = forward(params, batch, &cache);
      loss_acc += weighted_bce_loss(probs, labels, pos_weight) * static_cast<double>(rows);
      auto grads = backward(params, cache, labels, pos_weight);
      adam_step(params, grads, adam, config);
    }
    stats.epoch_losses.push_back(loss_acc / static_cast<double>(order.size()));
    stats.epochs_run = epoch + 1;
    if (on_epoch) on_epoch(epoch, params);

    if (val_indices.empty()) continue;

    Eigen::VectorXd val_probs = forward(params, val_x);
    const auto cm = confusion(val_probs, val_y, 0.5);
    const auto scores = prf(cm);
    const bool improved =
        scores.f1.has_value() &&
        (!stats.best_val_f1.has_value() || *scores.f1 > *stats.best_val_f1 + 1e-12);
    if (improved) {
      stats.best_val_f1 = scores.f1;
      stats.best_epoch = epoch;
      best_values = params.values;
      bad_evals = 0;
    } else {
      ++bad_evals;
      if (bad_evals >= config.early_stop_patience) {
        stats.stopped_early = true;
        break;
      }
    }
  }

  if (best_values) params.values = std::move(*best_values);
  return stats;
}

// ---------------------------------------------------------------------------
// Serialization
// ---------------------------------------------------------------------------

namespace {

constexpr char kMagic[8] = {'F', 'S', 'I', 'L', 'O', 'P', 'R', 'M'};
constexpr std::uint32_t kFormatVersion = 1;

void put_u32(std::vector<std::uint8_t>& out, std::size_t at, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out[at + static_cast<std::size_t>(i)] = (v >> (8 * i)) & 0xff;
}

void put_u64(std::vector<std::uint8_t>& out, std::size_t at, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out[at + static_cast<std::size_t>(i)] = (v >> (8 * i)) & 0xff;
}

std::uint32_t get_u32(const std::vector<std::uint8_t>& in, std::size_t at) {
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i)
    v |= static_cast<std::uint32_t>(in[at + static_cast<std::size_t>(i)]) << (8 * i);
  return v;
}

std::uint64_t get_u64(const std::vector<std::uint8_t>& in, std::size_t at) {
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i)
    v |= static_cast<std::uint64_t>(in[at + static_cast<std::size_t>(i)]) << (8 * i);
  return v;
}

}  // namespace

std::size_t param_byte_size(const ModelParams& params) {
  return kParamHeaderBytes + 8 * params.values.size();
}

std::vector<std::uint8_t> serialize_params(const ModelParams& params) {
  std::vector<std::uint8_t> bytes(param_byte_size(params), 0);
  std::memcpy(bytes.data(), kMagic, sizeof(kMagic));
  put_u32(bytes, 8, kFormatVersion);
  put_u32(bytes, 12, static_cast<std::uint32_t>(params.input_dim));
  put_u32(bytes, 16, static_cast<std::uint32_t>(params.hidden_width));
  put_u32(bytes, 20, static_cast<std::uint32_t>(params.n_blocks));
  put_u64(bytes, 24, params.values.size());
  for (std::size_t i = 0; i < params.values.size(); ++i) {
    std::uint64_t bits = 0;
    std::memcpy(&bits, &params.values[i], 8);
    put_u64(bytes, kParamHeaderBytes + 8 * i, bits);
  }
  return bytes;
}

ModelParams deserialize_params(const std::vector<std::uint8_t>& bytes) {
  if (bytes.size() < kParamHeaderBytes)
    throw DataError("model bytes: shorter than the fixed header");
  if (std::memcmp(bytes.data(), kMagic, sizeof(kMagic)) != 0)
    throw DataError("model bytes: bad magic");
  if (get_u32(bytes, 8) != kFormatVersion)
    throw DataError("model bytes: unsupported format version " +
                    std::to_string(get_u32(bytes, 8)));
  ModelParams params;
  params.input_dim = static_cast<int>(get_u32(bytes, 12));
  params.hidden_width = static_cast<int>(get_u32(bytes, 16));
  params.n_blocks = static_cast<int>(get_u32(bytes, 20));
  const std::uint64_t count = get_u64(bytes, 24);
  if (params.input_dim < 1 || params.hidden_width < 1 || params.n_blocks < 1 ||
      count != param_count(params.input_dim, params.hidden_width, params.n_blocks))
    throw DataError("model bytes: header dimensions are inconsistent");
  if (bytes.size() != kParamHeaderBytes + 8 * count)
    throw DataError("model bytes: payload size does not match the header");
  params.layout = make_layout(params.input_dim, params.hidden_width, params.n_blocks);
  params.values.resize(count);
  for (std::size_t i = 0; i < count; ++i) {
    const std::uint64_t bits = get_u64(bytes, kParamHeaderBytes + 8 * i);
    std::memcpy(&params.values[i], &bits, 8);
  }
  return params;
}

void save_params(const ModelParams& params, const std::string& path) {
  const auto bytes = serialize_params(params);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write model file '" + path + "'");
  out.write(reinterpret_cast<const char*>(bytes.data()),
            static_cast<std::streamsize>(bytes.size()));
  if (!out) throw DataError("failed while writing model file '" + path + "'");
}

ModelParams load_params(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open model file '" + path + "'");
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)),
                                  std::istreambuf_iterator<char>());
  return deserialize_params(bytes);
}

}  // namespace fedsilo
