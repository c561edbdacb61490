#pragma once

#include <Eigen/Core>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "fedsilo/dataset.hpp"

namespace fedsilo {

// ---------------------------------------------------------------------------
// Highway network binary classifier
//
// input projection:  x0 = X W_in + b_in                  (linear)
// block k:           t  = sigmoid(x W_T + b_T)
//                    h  = relu(x W_H + b_H)
//                    x' = t .* h + (1 - t) .* x
// head:              p  = sigmoid(x W_out + b_out)       (scalar logit)
// ---------------------------------------------------------------------------

struct HighwayNetConfig {
  int input_dim = 0;
  int hidden_width = 64;
  int n_blocks = 8;
  double gate_bias_init = -1.0;
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  int early_stop_patience = 10;
  std::uint64_t init_seed = 0;

  void validate() const;  // throws ConfigError
};

struct TensorInfo {
  std::string name;
  int rows = 0;
  int cols = 0;  // 1 for bias vectors
  std::size_t offset = 0;

  std::size_t size() const { return static_cast<std::size_t>(rows) * cols; }
};

// Flat parameter vector plus the layout that maps tensor names to
// contiguous, non-overlapping slices of it. The layout is a pure function
// of (input_dim, hidden_width, n_blocks).
struct ModelParams {
  std::vector<double> values;
  std::vector<TensorInfo> layout;
  int input_dim = 0;
  int hidden_width = 0;
  int n_blocks = 0;

  bool same_layout(const ModelParams& other) const {
    return input_dim == other.input_dim && hidden_width == other.hidden_width &&
           n_blocks == other.n_blocks && values.size() == other.values.size();
  }
};

// Parameter count for a config: d*w + w + n_blocks*2*(w^2 + w) + w + 1.
std::size_t param_count(int input_dim, int hidden_width, int n_blocks);

// Glorot-uniform weights, zero transform biases, gate biases at
// gate_bias_init; deterministic in init_seed.
ModelParams init_model(const HighwayNetConfig& config);

// Activations retained for exact backprop.
struct ForwardCache {
  Eigen::MatrixXd input;
  std::vector<Eigen::MatrixXd> block_inputs;  // n_blocks + 1 entries (x0 .. xL)
  std::vector<Eigen::MatrixXd> gates;         // t per block
  std::vector<Eigen::MatrixXd> transforms;    // h per block
  std::vector<Eigen::MatrixXd> pre_transform;  // pre-activation of h
  Eigen::VectorXd probabilities;
};

// Batch forward pass; probabilities lie strictly inside (0, 1). Pass a cache
// to enable backward(). Throws DataError on a column-count mismatch.
Eigen::VectorXd forward(const ModelParams& params, const Eigen::MatrixXd& batch,
                        ForwardCache* cache = nullptr);

// mean over rows of -[pos_weight*y*log(p) + (1-y)*log(1-p)]
double weighted_bce_loss(const Eigen::VectorXd& probs, const Eigen::VectorXd& labels,
                         double pos_weight);

// Gradient of weighted_bce_loss w.r.t. every parameter, in layout order.
std::vector<double> backward(const ModelParams& params, const ForwardCache& cache,
                             const Eigen::VectorXd& labels, double pos_weight);

struct AdamState {
  std::vector<double> first_moment;
  std::vector<double> second_moment;
  long step_count = 0;

  static AdamState zeros(std::size_t n) {
    return AdamState{std::vector<double>(n, 0.0), std::vector<double>(n, 0.0), 0};
  }
};

// Bias-corrected Adam update, in place.
void adam_step(ModelParams& params, const std::vector<double>& grads, AdamState& state,
               const HighwayNetConfig& config);

struct TrainStats {
  std::vector<double> epoch_losses;
  std::optional<double> best_val_f1;
  int best_epoch = -1;
  bool stopped_early = false;
  bool validation_disabled = false;
  int epochs_run = 0;
};

// Called after each completed epoch (0-based), before the early-stop check.
using EpochObserver = std::function<void(int epoch, const ModelParams& params)>;

// Mini-batch training with seeded shuffling and early stopping on
// validation F1 (threshold 0.5). Restores the best-F1 parameters seen when
// training ends, whether by patience or by epoch exhaustion. An empty
// validation set disables early stopping and sets validation_disabled.
TrainStats train_local(ModelParams& params, const EncodedDataset& ds,
                       std::span<const int> train_indices,
                       std::span<const int> val_indices,
                       const HighwayNetConfig& config, int epochs, int batch_size,
                       double pos_weight, std::uint64_t seed,
                       const EpochObserver& on_epoch = {});

// ---------------------------------------------------------------------------
// Serialization: 64-byte header (magic, version, dims, count) followed by
// little-endian IEEE-754 doubles. This byte count is what the communication
// ledger charges per model transfer.
// ---------------------------------------------------------------------------

inline constexpr std::size_t kParamHeaderBytes = 64;

std::size_t param_byte_size(const ModelParams& params);
std::vector<std::uint8_t> serialize_params(const ModelParams& params);
ModelParams deserialize_params(const std::vector<std::uint8_t>& bytes);
void save_params(const ModelParams& params, const std::string& path);
ModelParams load_params(const std::string& path);

}  // namespace fedsilo
