#pragma once

#include <Eigen/Core>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "fedsilo/dataset.hpp"
#include "fedsilo/nn.hpp"

namespace fedsilo {

// Attribution works against any batch scoring function, so tests can plug in
// closed-form models; the CLI wires in the highway net's probability output.
using ModelFn = std::function<Eigen::VectorXd(const Eigen::MatrixXd&)>;

ModelFn probability_model(const ModelParams& params);

struct ColSpan {
  int begin = 0;
  int width = 0;
};

// One attribution player: a group of one-hot columns masked as a unit.
struct Player {
  std::string name;
  std::vector<ColSpan> spans;
  std::vector<int> codes;  // category codes when the player is one span

  int column_count() const {
    int n = 0;
    for (const auto& s : spans) n += s.width;
    return n;
  }
};

struct GroupStructure {
  std::vector<Player> players;
  std::vector<std::vector<int>> blocks;  // partition of player indices

  void validate(int dataset_width) const;  // throws ConfigError
  static GroupStructure singleton_blocks(std::vector<Player> players);
};

// Players from a dataset's feature spans; every design column is owned by
// exactly one player. With use_views = true, each derived view becomes its
// own player and shares a coalition block with its source feature; with
// use_views = false, the source feature masks its view columns as one unit.
GroupStructure players_from_dataset(const EncodedDataset& ds, bool use_views);

struct BackgroundSet {
  Eigen::MatrixXd rows;
  std::uint64_t seed = 0;

  long size() const { return rows.rows(); }
};

BackgroundSet sample_background(const EncodedDataset& ds,
                                const std::vector<int>& candidate_rows, int size,
                                std::uint64_t seed);

// Interventional coalition payoff: columns of in-coalition players come
// from x, everything else from each background row; v = mean model output.
double value_function(const ModelFn& model, const Eigen::RowVectorXd& x,
                      std::uint32_t coalition_mask, const std::vector<Player>& players,
                      const BackgroundSet& background);

struct Attribution {
  int instance_index = -1;
  std::vector<double> values;         // per player
  double base_value = 0.0;            // v(empty) = mean output over background
  double model_output = 0.0;          // f(x)
  double efficiency_residual = 0.0;   // f(x) - base_value - sum(values)
  std::vector<double> std_errors;     // sampled methods only
  std::string method;
  int n_permutations = 0;             // 0 for exact methods
};

inline constexpr int kMaxExactPlayers = 20;
inline constexpr int kMaxOwenBlocks = 12;
inline constexpr int kMaxOwenBlockSize = 12;

// Exact Shapley values by full coalition enumeration (<= 20 players).
Attribution shapley_exact(const ModelFn& model, const Eigen::RowVectorXd& x,
                          const std::vector<Player>& players,
                          const BackgroundSet& background);

// Permutation-sampling estimate with per-player standard errors.
Attribution shapley_sampled(const ModelFn& model, const Eigen::RowVectorXd& x,
                            const std::vector<Player>& players,
                            const BackgroundSet& background, int n_permutations,
                            std::uint64_t seed);

// Exact Owen values via two-level enumeration over the coalition structure
// (<= 12 blocks, <= 12 players per block).
Attribution owen_exact(const ModelFn& model, const Eigen::RowVectorXd& x,
                       const GroupStructure& structure, const BackgroundSet& background);

// Two-level permutation estimator: a block order, then player orders within
// blocks; unbiased for owen_exact.
Attribution owen_sampled(const ModelFn& model, const Eigen::RowVectorXd& x,
                         const GroupStructure& structure, const BackgroundSet& background,
                         int n_permutations, std::uint64_t seed);

struct AttributionSummary {
  std::vector<std::string> player_names;
  std::vector<double> mean_abs;  // mean |phi| per player
  std::vector<double> stddev;    // population sd of phi per player
};

AttributionSummary summarize_attributions(const std::vector<Attribution>& attributions,
                                          const std::vector<Player>& players);

struct BinSelector {
  std::string player;  // player name (must own exactly one span)
  int code = 0;        // category code within that span
};

struct BinEntry {
  int attribution_index = -1;  // position in the attributions list
  double value = 0.0;          // that instance's phi for the bin's player
  int label = 0;               // true label of the instance
};

struct BinDistribution {
  std::string name;  // "<player>=<code>"
  std::vector<BinEntry> entries;
  bool no_positives = false;
};

// For each selected bin, the attribution values of exactly the explained
// instances whose active category matches, tagged with their true label.
// instance_rows[i] is the dataset row explained by attributions[i].
std::vector<BinDistribution> bin_distributions(
    const std::vector<Attribution>& attributions, const std::vector<int>& instance_rows,
    const EncodedDataset& ds, const std::vector<Player>& players,
    const std::vector<BinSelector>& bins);

}  // namespace fedsilo
