#include "fedsilo/explain.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <numeric>
#include <set>
#include <unordered_map>

#include "fedsilo/rng.hpp"

namespace fedsilo {

ModelFn probability_model(const ModelParams& params) {
  return [params](const Eigen::MatrixXd& batch) { return forward(params, batch); };
}

// ---------------------------------------------------------------------------
// Structure
// ---------------------------------------------------------------------------

void GroupStructure::validate(int dataset_width) const {
  if (players.empty()) throw ConfigError("attribution: no players");
  if (players.size() > 32)
    throw CapacityError("attribution: more than 32 players cannot be masked");
  std::set<int> used;
  for (const auto& p : players) {
    if (p.spans.empty())
      throw ConfigError("attribution: player '" + p.name + "' owns no columns");
    for (const auto& s : p.spans) {
      if (s.begin < 0 || s.width < 1 || s.begin + s.width > dataset_width)
        throw ConfigError("attribution: player '" + p.name +
                          "' spans columns outside the dataset");
      for (int c = s.begin; c < s.begin + s.width; ++c)
        if (!used.insert(c).second)
          throw ConfigError("attribution: column " + std::to_string(c) +
                            " belongs to two players");
    }
  }
  std::vector<int> seen(players.size(), 0);
  for (const auto& block : blocks) {
    if (block.empty()) throw ConfigError("attribution: empty block");
    for (int idx : block) {
      if (idx < 0 || static_cast<std::size_t>(idx) >= players.size())
        throw ConfigError("attribution: block references player " + std::to_string(idx));
      ++seen[static_cast<std::size_t>(idx)];
    }
  }
  for (std::size_t i = 0; i < seen.size(); ++i)
    if (seen[i] != 1)
      throw ConfigError("attribution: player '" + players[i].name +
                        "' must appear in exactly one block");
}

GroupStructure GroupStructure::singleton_blocks(std::vector<Player> players) {
  GroupStructure s;
  s.players = std::move(players);
  for (std::size_t i = 0; i < s.players.size(); ++i)
    s.blocks.push_back({static_cast<int>(i)});
  return s;
}

GroupStructure players_from_dataset(const EncodedDataset& ds, bool use_views) {
  GroupStructure structure;
  const auto spans = ds.feature_spans;

  auto as_player = [](const FeatureSpan& span) {
    Player p;
    p.name = span.name;
    p.spans = {ColSpan{span.begin, span.width}};
    p.codes = span.codes;
    return p;
  };

  // Every design column keeps exactly one owner, so the grand coalition
  // reproduces f(x) and the efficiency identity holds for exact methods.
  for (std::size_t f = 0; f < spans.size(); ++f) {
    if (spans[f].is_view) continue;
    std::vector<int> block;
    Player source = as_player(spans[f]);
    if (use_views) {
      // The source feature and its derived views are separate players
      // sharing one coalition block, so the views can earn individual
      // credit while never drifting far from their source.
      block.push_back(static_cast<int>(structure.players.size()));
      structure.players.push_back(std::move(source));
      for (std::size_t v = 0; v < spans.size(); ++v) {
        if (spans[v].is_view && spans[v].source_feature == static_cast<int>(f)) {
          block.push_back(static_cast<int>(structure.players.size()));
          structure.players.push_back(as_player(spans[v]));
        }
      }
    } else {
      // Views are deterministic restatements of their source, so without
      // view players the source masks their columns as part of its unit.
      for (std::size_t v = 0; v < spans.size(); ++v)
        if (spans[v].is_view && spans[v].source_feature == static_cast<int>(f))
          source.spans.push_back(ColSpan{spans[v].begin, spans[v].width});
      block.push_back(static_cast<int>(structure.players.size()));
      structure.players.push_back(std::move(source));
    }
    structure.blocks.push_back(std::move(block));
  }
  structure.validate(ds.width());
  return structure;
}

BackgroundSet sample_background(const EncodedDataset& ds,
                                const std::vector<int>& candidate_rows, int size,
                                std::uint64_t seed) {
  if (size < 1) throw ConfigError("background: size must be >= 1");
  if (static_cast<std::size_t>(size) > candidate_rows.size())
    throw ConfigError("background: requested " + std::to_string(size) + " rows from " +
                      std::to_string(candidate_rows.size()) + " candidates");
  Rng rng(derive_seed(seed, "background"));
  auto picks =
      rng.sample_without_replacement(static_cast<int>(candidate_rows.size()), size);
  std::sort(picks.begin(), picks.end());
  BackgroundSet bg;
  bg.seed = seed;
  bg.rows.resize(size, ds.width());
  for (int i = 0; i < size; ++i)
    bg.rows.row(i) = ds.design_matrix.row(candidate_rows[picks[static_cast<std::size_t>(i)]]);
  return bg;
}

// ---------------------------------------------------------------------------
// Coalition payoffs
// ---------------------------------------------------------------------------

namespace {

void overlay_coalition(Eigen::Ref<Eigen::MatrixXd> block, const Eigen::RowVectorXd& x,
                       std::uint32_t mask, const std::vector<Player>& players) {
  for (std::size_t i = 0; i < players.size(); ++i) {
    if (!(mask & (1u << i))) continue;
    for (const auto& s : players[i].spans)
      block.middleCols(s.begin, s.width) =
          x.middleCols(s.begin, s.width).replicate(block.rows(), 1);
  }
}

// Evaluates v for every requested mask with one model call per chunk of
// coalitions; the model cost dominates, so hybrids are batched aggressively.
std::unordered_map<std::uint32_t, double> eval_masks(
    const ModelFn& model, const Eigen::RowVectorXd& x,
    const std::vector<Player>& players, const BackgroundSet& background,
    const std::vector<std::uint32_t>& masks) {
  const long b = background.size();
  if (b < 1) throw ConfigError("attribution: empty background set");
  const long chunk_masks = std::max<long>(1, 16384 / b);

  std::unordered_map<std::uint32_t, double> values;
  values.reserve(masks.size() * 2);

  Eigen::MatrixXd batch(chunk_masks * b, background.rows.cols());
  std::vector<std::uint32_t> chunk;
  auto flush = [&]() {
    if (chunk.empty()) return;
    const long rows = static_cast<long>(chunk.size()) * b;
    Eigen::VectorXd out = model(batch.topRows(rows));
    for (std::size_t m = 0; m < chunk.size(); ++m)
      values[chunk[m]] =
          out.segment(static_cast<long>(m) * b, b).mean();
    chunk.clear();
  };

  for (std::uint32_t mask : masks) {
    if (values.count(mask)) continue;
    values[mask] = 0.0;  // placeholder so duplicates in `masks` are skipped
    Eigen::Ref<Eigen::MatrixXd> block =
        batch.middleRows(static_cast<long>(chunk.size()) * b, b);
    block = background.rows;
    overlay_coalition(block, x, mask, players);
    chunk.push_back(mask);
    if (static_cast<long>(chunk.size()) == chunk_masks) flush();
  }
  flush();
  return values;
}

double binomial(int n, int k) {
  double v = 1.0;
  for (int i = 1; i <= k; ++i) v = v * static_cast<double>(n - k + i) / i;
  return v;
}

double model_output_at(const ModelFn& model, const Eigen::RowVectorXd& x) {
  Eigen::MatrixXd one(1, x.cols());
  one.row(0) = x;
  return model(one)(0);
}

void check_players(const std::vector<Player>& players, int width) {
  GroupStructure s = GroupStructure::singleton_blocks(players);
  s.validate(width);
}

std::vector<double> column_stderr(const std::vector<std::vector<double>>& per_perm,
                                  const std::vector<double>& mean) {
  const std::size_t perms = per_perm.size();
  std::vector<double> se(mean.size(), 0.0);
  if (perms < 2) return se;
  for (std::size_t i = 0; i < mean.size(); ++i) {
    double acc = 0.0;
    for (const auto& row : per_perm) {
      const double d = row[i] - mean[i];
      acc += d * d;
    }
    se[i] = std::sqrt(acc / static_cast<double>(perms - 1) /
                      static_cast<double>(perms));
  }
  return se;
}

}  // namespace

double value_function(const ModelFn& model, const Eigen::RowVectorXd& x,
                      std::uint32_t coalition_mask, const std::vector<Player>& players,
                      const BackgroundSet& background) {
  if (background.size() < 1) throw ConfigError("attribution: empty background set");
  Eigen::MatrixXd hybrid = background.rows;
  overlay_coalition(hybrid, x, coalition_mask, players);
  return model(hybrid).mean();
}

// ---------------------------------------------------------------------------
// Exact Shapley
// ---------------------------------------------------------------------------

Attribution shapley_exact(const ModelFn& model, const Eigen::RowVectorXd& x,
                          const std::vector<Player>& players,
                          const BackgroundSet& background) {
  const int n = static_cast<int>(players.size());
  check_players(players, static_cast<int>(x.cols()));
  if (n > kMaxExactPlayers)
    throw CapacityError("exact attribution over " + std::to_string(n) +
                        " players; the limit is " + std::to_string(kMaxExactPlayers));

  const std::uint32_t n_masks = 1u << n;
  std::vector<std::uint32_t> masks(n_masks);
  std::iota(masks.begin(), masks.end(), 0u);
  const auto v = eval_masks(model, x, players, background, masks);

  // phi_i = sum over S without i of [v(S+i) - v(S)] / (n * C(n-1, |S|))
  std::vector<double> weight(static_cast<std::size_t>(n));
  for (int s = 0; s < n; ++s)
    weight[static_cast<std::size_t>(s)] = 1.0 / (n * binomial(n - 1, s));

  Attribution out;
  out.method = "shapley_exact";
  out.values.assign(static_cast<std::size_t>(n), 0.0);
  for (int i = 0; i < n; ++i) {
    const std::uint32_t bit = 1u << i;
    double phi = 0.0;
    for (std::uint32_t m = 0; m < n_masks; ++m) {
      if (m & bit) continue;
      phi += weight[static_cast<std::size_t>(std::popcount(m))] *
             (v.at(m | bit) - v.at(m));
    }
    out.values[static_cast<std::size_t>(i)] = phi;
  }
  out.base_value = v.at(0);
  out.model_output = model_output_at(model, x);
  out.efficiency_residual =
      out.model_output - out.base_value -
      std::accumulate(out.values.begin(), out.values.end(), 0.0);
  return out;
}

// ---------------------------------------------------------------------------
// Sampled Shapley
// ---------------------------------------------------------------------------

namespace {

std::vector<int> identity_order(int n) {
  std::vector<int> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), 0);
  return order;
}

// Walks one player order, adding the masks it visits to `sink`.
void collect_walk_masks(const std::vector<int>& order, std::vector<std::uint32_t>& sink) {
  std::uint32_t mask = 0;
  sink.push_back(mask);
  for (int p : order) {
    mask |= 1u << p;
    sink.push_back(mask);
  }
}

Attribution from_permutations(const ModelFn& model, const Eigen::RowVectorXd& x,
                              const std::vector<Player>& players,
                              const BackgroundSet& background,
                              const std::vector<std::vector<int>>& orders,
                              const std::string& method) {
  std::vector<std::uint32_t> needed;
  needed.reserve(orders.size() * (players.size() + 1));
  for (const auto& order : orders) collect_walk_masks(order, needed);
  const auto v = eval_masks(model, x, players, background, needed);

  const std::size_t n = players.size();
  std::vector<std::vector<double>> per_perm(orders.size(),
                                            std::vector<double>(n, 0.0));
  for (std::size_t p = 0; p < orders.size(); ++p) {
    std::uint32_t mask = 0;
    double prev = v.at(0);
    for (int player : orders[p]) {
      mask |= 1u << player;
      const double cur = v.at(mask);
      per_perm[p][static_cast<std::size_t>(player)] = cur - prev;
      prev = cur;
    }
  }

  Attribution out;
  out.method = method;
  out.n_permutations = static_cast<int>(orders.size());
  out.values.assign(n, 0.0);
  for (const auto& row : per_perm)
    for (std::size_t i = 0; i < n; ++i) out.values[i] += row[i];
  for (auto& phi : out.values) phi /= static_cast<double>(orders.size());
  out.std_errors = column_stderr(per_perm, out.values);
  out.base_value = v.at(0);
  out.model_output = model_output_at(model, x);
  out.efficiency_residual =
      out.model_output - out.base_value -
      std::accumulate(out.values.begin(), out.values.end(), 0.0);
  return out;
}

}  // namespace

Attribution shapley_sampled(const ModelFn& model, const Eigen::RowVectorXd& x,
                            const std::vector<Player>& players,
                            const BackgroundSet& background, int n_permutations,
                            std::uint64_t seed) {
  check_players(players, static_cast<int>(x.cols()));
  if (n_permutations < 1) throw ConfigError("attribution: n_permutations must be >= 1");

  std::vector<std::vector<int>> orders;
  orders.reserve(static_cast<std::size_t>(n_permutations));
  for (int p = 0; p < n_permutations; ++p) {
    auto order = identity_order(static_cast<int>(players.size()));
    Rng rng(derive_seed(seed, "perm", static_cast<std::uint64_t>(p)));
    rng.shuffle(order);
    orders.push_back(std::move(order));
  }
  return from_permutations(model, x, players, background, orders, "shapley_sampled");
}

// ---------------------------------------------------------------------------
// Owen values: block-respecting coalition formation
// ---------------------------------------------------------------------------

namespace {

void check_structure(const GroupStructure& structure, int width) {
  structure.validate(width);
  if (structure.blocks.size() > static_cast<std::size_t>(kMaxOwenBlocks))
    throw CapacityError("owen: " + std::to_string(structure.blocks.size()) +
                        " blocks; the limit is " + std::to_string(kMaxOwenBlocks));
  for (const auto& block : structure.blocks)
    if (block.size() > static_cast<std::size_t>(kMaxOwenBlockSize))
      throw CapacityError("owen: a block holds " + std::to_string(block.size()) +
                          " players; the limit is " + std::to_string(kMaxOwenBlockSize));
}

std::uint32_t block_mask(const std::vector<int>& block) {
  std::uint32_t m = 0;
  for (int p : block) m |= 1u << p;
  return m;
}

}  // namespace

Attribution owen_exact(const ModelFn& model, const Eigen::RowVectorXd& x,
                       const GroupStructure& structure, const BackgroundSet& background) {
  check_structure(structure, static_cast<int>(x.cols()));
  const int m = static_cast<int>(structure.blocks.size());
  const std::size_t n = structure.players.size();

  std::vector<std::uint32_t> full_masks(structure.blocks.size());
  for (std::size_t k = 0; k < structure.blocks.size(); ++k)
    full_masks[k] = block_mask(structure.blocks[k]);

  // Every mask that can appear: full blocks for an outer coalition R, plus an
  // arbitrary sub-coalition of the block under study.
  std::set<std::uint32_t> needed_set;
  for (int k = 0; k < m; ++k) {
    const auto& block = structure.blocks[static_cast<std::size_t>(k)];
    std::vector<int> others;
    for (int j = 0; j < m; ++j)
      if (j != k) others.push_back(j);
    const std::uint32_t outer_count = 1u << others.size();
    const std::uint32_t inner_count = 1u << block.size();
    for (std::uint32_t r = 0; r < outer_count; ++r) {
      std::uint32_t outer = 0;
      for (std::size_t j = 0; j < others.size(); ++j)
        if (r & (1u << j)) outer |= full_masks[static_cast<std::size_t>(others[j])];
      for (std::uint32_t t = 0; t < inner_count; ++t) {
        std::uint32_t inner = 0;
        for (std::size_t j = 0; j < block.size(); ++j)
          if (t & (1u << j)) inner |= 1u << block[j];
        needed_set.insert(outer | inner);
      }
    }
  }
  std::vector<std::uint32_t> needed(needed_set.begin(), needed_set.end());
  const auto v = eval_masks(model, x, structure.players, background, needed);

  Attribution out;
  out.method = "owen_exact";
  out.values.assign(n, 0.0);

  for (int k = 0; k < m; ++k) {
    const auto& block = structure.blocks[static_cast<std::size_t>(k)];
    const int bk = static_cast<int>(block.size());
    std::vector<int> others;
    for (int j = 0; j < m; ++j)
      if (j != k) others.push_back(j);

    std::vector<double> outer_weight(static_cast<std::size_t>(m));
    for (int s = 0; s < m; ++s)
      outer_weight[static_cast<std::size_t>(s)] = 1.0 / (m * binomial(m - 1, s));
    std::vector<double> inner_weight(static_cast<std::size_t>(bk));
    for (int s = 0; s < bk; ++s)
      inner_weight[static_cast<std::size_t>(s)] = 1.0 / (bk * binomial(bk - 1, s));

    const std::uint32_t outer_count = 1u << others.size();
    for (std::uint32_t r = 0; r < outer_count; ++r) {
      std::uint32_t outer = 0;
      for (std::size_t j = 0; j < others.size(); ++j)
        if (r & (1u << j)) outer |= full_masks[static_cast<std::size_t>(others[j])];
      const double w_outer =
          outer_weight[static_cast<std::size_t>(std::popcount(r))];

      for (std::size_t pi = 0; pi < block.size(); ++pi) {
        const int player = block[pi];
        const std::uint32_t bit = 1u << player;
        const std::uint32_t inner_count = 1u << block.size();
        double phi = 0.0;
        for (std::uint32_t t = 0; t < inner_count; ++t) {
          if (t & (1u << pi)) continue;
          std::uint32_t inner = 0;
          for (std::size_t j = 0; j < block.size(); ++j)
            if (t & (1u << j)) inner |= 1u << block[j];
          const double w = w_outer *
                           inner_weight[static_cast<std::size_t>(std::popcount(t))];
          phi += w * (v.at(outer | inner | bit) - v.at(outer | inner));
        }
        out.values[static_cast<std::size_t>(player)] += phi;
      }
    }
  }

  out.base_value = v.at(0);
  out.model_output = model_output_at(model, x);
  out.efficiency_residual =
      out.model_output - out.base_value -
      std::accumulate(out.values.begin(), out.values.end(), 0.0);
  return out;
}

Attribution owen_sampled(const ModelFn& model, const Eigen::RowVectorXd& x,
                         const GroupStructure& structure, const BackgroundSet& background,
                         int n_permutations, std::uint64_t seed) {
  check_structure(structure, static_cast<int>(x.cols()));
  if (n_permutations < 1) throw ConfigError("attribution: n_permutations must be >= 1");

  std::vector<std::vector<int>> orders;
  orders.reserve(static_cast<std::size_t>(n_permutations));
  for (int p = 0; p < n_permutations; ++p) {
    Rng rng(derive_seed(seed, "owen_perm", static_cast<std::uint64_t>(p)));
    auto block_order = identity_order(static_cast<int>(structure.blocks.size()));
    rng.shuffle(block_order);
    std::vector<int> order;
    order.reserve(structure.players.size());
    for (int k : block_order) {
      auto inner = structure.blocks[static_cast<std::size_t>(k)];
      rng.shuffle(inner);
      order.insert(order.end(), inner.begin(), inner.end());
    }
    orders.push_back(std::move(order));
  }
  Attribution out =
      from_permutations(model, x, structure.players, background, orders, "owen_sampled");
  return out;
}

// ---------------------------------------------------------------------------
// Summaries and bins
// ---------------------------------------------------------------------------

AttributionSummary summarize_attributions(const std::vector<Attribution>& attributions,
                                          const std::vector<Player>& players) {
  AttributionSummary summary;
  for (const auto& p : players) summary.player_names.push_back(p.name);
  const std::size_t n = players.size();
  summary.mean_abs.assign(n, 0.0);
  summary.stddev.assign(n, 0.0);
  if (attributions.empty()) return summary;

  for (const auto& a : attributions)
    if (a.values.size() != n)
      throw DataError("summary: attribution with " + std::to_string(a.values.size()) +
                      " values against " + std::to_string(n) + " players");

  const double count = static_cast<double>(attributions.size());
  std::vector<double> mean(n, 0.0);
  for (const auto& a : attributions)
    for (std::size_t i = 0; i < n; ++i) {
      summary.mean_abs[i] += std::abs(a.values[i]);
      mean[i] += a.values[i];
    }
  for (std::size_t i = 0; i < n; ++i) {
    summary.mean_abs[i] /= count;
    mean[i] /= count;
  }
  for (const auto& a : attributions)
    for (std::size_t i = 0; i < n; ++i) {
      const double d = a.values[i] - mean[i];
      summary.stddev[i] += d * d;
    }
  for (std::size_t i = 0; i < n; ++i)
    summary.stddev[i] = std::sqrt(summary.stddev[i] / count);
  return summary;
}

std::vector<BinDistribution> bin_distributions(
    const std::vector<Attribution>& attributions, const std::vector<int>& instance_rows,
    const EncodedDataset& ds, const std::vector<Player>& players,
    const std::vector<BinSelector>& bins) {
  if (attributions.size() != instance_rows.size())
    throw DataError("bins: attribution/instance count mismatch");

  std::vector<BinDistribution> out;
  for (const auto& bin : bins) {
    int player_idx = -1;
    for (std::size_t i = 0; i < players.size(); ++i)
      if (players[i].name == bin.player) player_idx = static_cast<int>(i);
    if (player_idx < 0) throw ConfigError("bins: unknown player '" + bin.player + "'");
    const Player& player = players[static_cast<std::size_t>(player_idx)];
    // Bins key on the player's primary span: the categorical columns its
    // codes index. Extra spans (derived-view columns) don't matter here.
    if (player.spans.empty() ||
        player.codes.size() != static_cast<std::size_t>(player.spans.front().width))
      throw ConfigError("bins: player '" + bin.player +
                        "' has no categorical span to bin on");
    if (std::find(player.codes.begin(), player.codes.end(), bin.code) ==
        player.codes.end())
      throw ConfigError("bins: player '" + bin.player + "' has no code " +
                        std::to_string(bin.code));

    const ColSpan span = player.spans.front();
    BinDistribution dist;
    dist.name = bin.player + "=" + std::to_string(bin.code);
    for (std::size_t i = 0; i < attributions.size(); ++i) {
      const long row = instance_rows[i];
      int active = -1;
      for (int j = 0; j < span.width; ++j)
        if (ds.design_matrix(row, span.begin + j) > 0.5) {
          active = player.codes[static_cast<std::size_t>(j)];
          break;
        }
      if (active != bin.code) continue;
      BinEntry entry;
      entry.attribution_index = static_cast<int>(i);
      entry.value = attributions[i].values[static_cast<std::size_t>(player_idx)];
      entry.label = ds.labels(row) > 0.5 ? 1 : 0;
      dist.entries.push_back(entry);
    }
    dist.no_positives = std::none_of(dist.entries.begin(), dist.entries.end(),
                                     [](const BinEntry& e) { return e.label == 1; });
    out.push_back(std::move(dist));
  }
  return out;
}

}  // namespace fedsilo
