#pragma once

// Assignment-score smoothing. For each patch the query's score s is blended
// with its k nearest pool entries:
//
//   s_hat = (1 - alpha) * s + alpha * sum_i w_i * u_i
//   w_i   = exp(-d_i / tau) / sum_j exp(-d_j / tau)
//
// with d the JS (or KL) divergence between s and u_i, or an l2 distance
// between feature / decoded-patch keys.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "panicl/divergence.hpp"
#include "panicl/errors.hpp"
#include "panicl/pool.hpp"

namespace panicl {

enum class KeyType { kScore, kFeature, kPatch };
enum class Aggregation { kWeighted, kAverage, kNearest };
enum class PoolScope { kPerPatch, kAllPatch };
enum class Metric { kJS, kKL, kL2 };

/// Task presets for the default hyperparameters.
enum class Task { kSegmentation, kColorization, kDetection, kPixelSpace, kAutoregressive };

struct SmoothingConfig {
  std::size_t m = 4;
  std::size_t k = 4;
  double alpha = 1.0;
  double tau = 1.0;
  DivergenceKind divergence = DivergenceKind::kJS;
  KeyType key = KeyType::kScore;
  Aggregation aggregation = Aggregation::kWeighted;
  PoolScope scope = PoolScope::kPerPatch;

  /// tau = 1 everywhere for the codebook models; alpha = 0.7 for detection,
  /// 1.0 otherwise; k = min(5, m). Pixel-space feature smoothing uses
  /// m = 2, tau = 25, alpha = 0.5; the two-sequence autoregressive case uses
  /// tau = 1, alpha = 0.8.
  static SmoothingConfig defaults(std::size_t m, Task task = Task::kSegmentation) {
    SmoothingConfig c;
    c.m = m;
    switch (task) {
      case Task::kSegmentation:
      case Task::kColorization: c.alpha = 1.0; break;
      case Task::kDetection: c.alpha = 0.7; break;
      case Task::kPixelSpace:
        c.m = m == 0 ? 2 : m;
        c.tau = 25.0;
        c.alpha = 0.5;
        break;
      case Task::kAutoregressive: c.alpha = 0.8; break;
    }
    c.k = std::max<std::size_t>(1, std::min<std::size_t>(5, c.m));
    return c;
  }

  void validate() const {
    if (k < 1) throw ConfigError("k must be >= 1");
    if (!(alpha >= 0.0 && alpha <= 1.0)) throw ConfigError("alpha must lie in [0, 1]");
    if (!(tau > 0.0) || !std::isfinite(tau)) throw ConfigError("tau must be positive and finite");
  }

  Metric metric() const {
    if (key != KeyType::kScore) return Metric::kL2;
    return divergence == DivergenceKind::kJS ? Metric::kJS : Metric::kKL;
  }
};

inline const char* to_string(KeyType k) {
  switch (k) {
    case KeyType::kScore: return "score";
    case KeyType::kFeature: return "feature";
    case KeyType::kPatch: return "patch";
  }
  return "?";
}
inline const char* to_string(Aggregation a) {
  switch (a) {
    case Aggregation::kWeighted: return "weighted";
    case Aggregation::kAverage: return "average";
    case Aggregation::kNearest: return "nearest";
  }
  return "?";
}
inline const char* to_string(PoolScope s) { return s == PoolScope::kPerPatch ? "patch" : "all"; }

inline std::optional<KeyType> parse_key(const std::string& s) {
  if (s == "score") return KeyType::kScore;
  if (s == "feature") return KeyType::kFeature;
  if (s == "patch") return KeyType::kPatch;
  return std::nullopt;
}
inline std::optional<Aggregation> parse_aggregation(const std::string& s) {
  if (s == "weighted") return Aggregation::kWeighted;
  if (s == "average") return Aggregation::kAverage;
  if (s == "nearest") return Aggregation::kNearest;
  return std::nullopt;
}
inline std::optional<PoolScope> parse_scope(const std::string& s) {
  if (s == "patch") return PoolScope::kPerPatch;
  if (s == "all") return PoolScope::kAllPatch;
  return std::nullopt;
}

struct Neighbor {
  std::size_t index = 0;  // position in the candidate list handed to knn_select
  double distance = 0.0;
  Provenance source;

  friend bool operator==(const Neighbor&, const Neighbor&) = default;
};

struct NeighborSet {
  std::vector<Neighbor> entries;  // ascending distance

  std::size_t size() const noexcept { return entries.size(); }
  bool empty() const noexcept { return entries.empty(); }
};

struct PatchDiagnostics {
  std::vector<Neighbor> neighbors;
  std::vector<double> weights;
};

struct SmoothedGrid {
  std::vector<CodebookDistribution> distributions;
  std::vector<PatchDiagnostics> diagnostics;

  std::size_t size() const noexcept { return distributions.size(); }
};

inline double l2_distance(std::span<const double> a, std::span<const double> b) {
  require_same_size(a.size(), b.size(), "l2_distance");
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = a[i] - b[i];
    s += d * d;
  }
  return std::sqrt(s);
}

inline double key_distance(Metric metric, std::span<const double> query, std::span<const double> candidate) {
  switch (metric) {
    case Metric::kJS: return kernels::js(candidate, query);
    case Metric::kKL: return kernels::kl(candidate, query);
    case Metric::kL2: return l2_distance(query, candidate);
  }
  return 0.0;
}

/// The min(k, pool size) candidates closest to `query`, ascending. Ties go to
/// the smaller provenance index, then the smaller patch index.
inline NeighborSet knn_select(std::span<const double> query, std::span<const std::span<const double>> keys,
                              std::span<const Provenance> sources, std::size_t k, Metric metric) {
  if (keys.empty()) throw DegenerateError("knn_select over an empty pool");
  if (k == 0) throw ConfigError("k must be >= 1");
  require_same_size(keys.size(), sources.size(), "knn_select provenance");
  std::vector<Neighbor> all(keys.size());
  for (std::size_t i = 0; i < keys.size(); ++i) {
    require_same_size(keys[i].size(), query.size(), "knn_select key");
    all[i] = {i, key_distance(metric, query, keys[i]), sources[i]};
  }
  const std::size_t take = std::min(k, all.size());
  std::partial_sort(all.begin(), all.begin() + static_cast<std::ptrdiff_t>(take), all.end(),
                    [](const Neighbor& a, const Neighbor& b) {
                      if (a.distance != b.distance) return a.distance < b.distance;
                      if (a.source.index != b.source.index) return a.source.index < b.source.index;
                      return a.source.patch < b.source.patch;
                    });
  all.resize(take);
  return {std::move(all)};
}

/// Temperature softmax of negated distances. Infinite distances get weight
/// 0; the rest are shifted by the smallest finite distance before exp.
inline std::vector<double> softmax_weights(std::span<const double> distances, double tau) {
  if (!(tau > 0.0)) throw ConfigError("tau must be positive");
  double lowest = std::numeric_limits<double>::infinity();
  for (double d : distances) {
    if (std::isnan(d)) throw DegenerateError("NaN distance");
    if (std::isfinite(d)) lowest = std::min(lowest, d);
  }
  if (!std::isfinite(lowest)) throw DegenerateError("softmax over distances that are all infinite");
  std::vector<double> w(distances.size(), 0.0);
  double total = 0.0;
  for (std::size_t i = 0; i < distances.size(); ++i) {
    if (!std::isfinite(distances[i])) continue;
    w[i] = std::exp(-(distances[i] - lowest) / tau);
    total += w[i];
  }
  for (double& x : w) x /= total;
  return w;
}

/// Neighbor weights per aggregation mode; NEAREST keeps only the first entry.
inline std::vector<double> aggregation_weights(const NeighborSet& neighbors, const SmoothingConfig& config) {
  const std::size_t n = neighbors.size();
  switch (config.aggregation) {
    case Aggregation::kWeighted: {
      std::vector<double> d(n);
      for (std::size_t i = 0; i < n; ++i) d[i] = neighbors.entries[i].distance;
      return softmax_weights(d, config.tau);
    }
    case Aggregation::kAverage: return std::vector<double>(n, 1.0 / static_cast<double>(n));
    case Aggregation::kNearest: {
      std::vector<double> w(n, 0.0);
      w[0] = 1.0;
      return w;
    }
  }
  return {};
}

namespace detail {

/// (1 - alpha) * self + alpha * sum_i weights[i] * targets[i]; zero weights skipped.
inline std::vector<double> blend(std::span<const double> self, std::span<const std::span<const double>> targets,
                                 std::span<const double> weights, double alpha) {
  std::vector<double> mixed(self.size(), 0.0);
  for (std::size_t i = 0; i < targets.size(); ++i) {
    if (weights[i] == 0.0) continue;
    require_same_size(targets[i].size(), self.size(), "smoothing target");
    for (std::size_t j = 0; j < self.size(); ++j) mixed[j] += weights[i] * targets[i][j];
  }
  std::vector<double> out(self.size());
  for (std::size_t j = 0; j < self.size(); ++j) out[j] = (1.0 - alpha) * self[j] + alpha * mixed[j];
  return out;
}

}  // namespace detail

/// Blends s with the distributions of its neighbors. `candidates` is the list
/// the neighbor indices refer to; `weights_out` (optional) receives the
/// aggregation weights.
inline CodebookDistribution smooth_patch(const CodebookDistribution& s, const NeighborSet& neighbors,
                                         std::span<const CodebookDistribution> candidates,
                                         const SmoothingConfig& config, std::vector<double>* weights_out = nullptr) {
  if (neighbors.empty() || config.alpha == 0.0) {
    if (weights_out) weights_out->assign(neighbors.size(), 0.0);
    return s;
  }
  std::vector<double> weights = aggregation_weights(neighbors, config);
  std::vector<std::span<const double>> targets;
  targets.reserve(neighbors.size());
  for (const auto& n : neighbors.entries) {
    if (n.index >= candidates.size()) throw DimensionError("neighbor index out of range");
    require_same_size(candidates[n.index].size(), s.size(), "smooth_patch");
    targets.push_back(candidates[n.index].values());
  }
  std::vector<double> out = detail::blend(s.values(), targets, weights, config.alpha);
  for (double& x : out) x = std::max(x, 0.0);
  if (weights_out) *weights_out = std::move(weights);
  // The constructor renormalizes only when mass drift exceeds kDriftTolerance.
  return CodebookDistribution(std::move(out));
}

namespace detail {

inline std::vector<std::span<const double>> key_views(const PoolSlot& slot, KeyType key) {
  std::vector<std::span<const double>> views;
  views.reserve(slot.size());
  switch (key) {
    case KeyType::kScore:
      for (const auto& d : slot.scores) views.push_back(d.values());
      break;
    case KeyType::kFeature:
      if (slot.features.size() != slot.size()) throw ConfigError("feature key requested but the pool has no feature tensors");
      for (const auto& f : slot.features) views.emplace_back(f);
      break;
    case KeyType::kPatch:
      if (slot.patches.size() != slot.size()) throw ConfigError("patch key requested but the pool has no patch tensors");
      for (const auto& p : slot.patches) views.emplace_back(p);
      break;
  }
  return views;
}

inline std::span<const double> query_key(const ScoreGrid& grid, std::size_t l, KeyType key) {
  switch (key) {
    case KeyType::kScore: return grid.distributions[l].values();
    case KeyType::kFeature:
      if (grid.features.size() != grid.size()) throw ConfigError("feature key requested but the query grid has no features");
      return grid.features[l];
    case KeyType::kPatch:
      if (grid.patches.size() != grid.size()) throw ConfigError("patch key requested but the query grid has no patch keys");
      return grid.patches[l];
  }
  return {};
}

}  // namespace detail

/// Smooths every patch of the query grid against the pool. PER_PATCH draws
/// neighbors from the same patch's slot, ALL_PATCH from the union of slots.
inline SmoothedGrid smooth_grid(const ScoreGrid& query, const PromptPool& pool, const SmoothingConfig& config) {
  config.validate();
  const std::size_t L = query.size();
  require_same_size(pool.patch_count(), L, "query grid vs pool patches");

  SmoothedGrid out;
  out.distributions.reserve(L);
  out.diagnostics.resize(L);

  std::optional<PoolSlot> flat;
  std::vector<std::span<const double>> flat_keys;
  if (config.scope == PoolScope::kAllPatch) {
    flat = merge_all_patches(pool);
    flat_keys = detail::key_views(*flat, config.key);
  }

  for (std::size_t l = 0; l < L; ++l) {
    const PoolSlot& slot = flat ? *flat : pool.per_patch[l];
    std::vector<std::span<const double>> local_keys;
    if (!flat) local_keys = detail::key_views(slot, config.key);
    const auto& keys = flat ? flat_keys : local_keys;

    const auto& s = query.distributions[l];
    if (slot.size() == 0) {
      out.distributions.push_back(s);
      continue;
    }
    NeighborSet neighbors = knn_select(detail::query_key(query, l, config.key), keys, slot.sources, config.k,
                                       config.metric());
    auto& diag = out.diagnostics[l];
    out.distributions.push_back(smooth_patch(s, neighbors, slot.scores, config, &diag.weights));
    diag.neighbors = std::move(neighbors.entries);
  }
  return out;
}

/// The same k-NN blend over unconstrained per-patch vectors with l2
/// distances (for models whose intermediate outputs are features).
inline std::vector<std::vector<double>> smooth_features(const std::vector<std::vector<double>>& query,
                                                        const std::vector<std::vector<std::vector<double>>>& pools,
                                                        const SmoothingConfig& config) {
  config.validate();
  require_same_size(pools.size(), query.size(), "smooth_features patches");
  std::vector<std::vector<double>> out;
  out.reserve(query.size());
  for (std::size_t l = 0; l < query.size(); ++l) {
    const auto& candidates = pools[l];
    if (candidates.empty() || config.alpha == 0.0) {
      out.push_back(query[l]);
      continue;
    }
    std::vector<std::span<const double>> keys;
    std::vector<Provenance> sources;
    for (std::size_t i = 0; i < candidates.size(); ++i) {
      keys.emplace_back(candidates[i]);
      sources.push_back({i + 1, l, i});
    }
    NeighborSet neighbors = knn_select(query[l], keys, sources, config.k, Metric::kL2);
    const std::vector<double> weights = aggregation_weights(neighbors, config);
    std::vector<std::span<const double>> targets;
    for (const auto& n : neighbors.entries) targets.push_back(keys[n.index]);
    out.push_back(detail::blend(query[l], targets, weights, config.alpha));
  }
  return out;
}

/// Grid 0 plays the query role and grids 1..n form a per-patch pool of size n.
inline SmoothedGrid aggregate_sequences(std::span<const ScoreGrid> grids, const SmoothingConfig& config) {
  if (grids.empty()) throw ConfigError("aggregate_sequences needs at least one grid");
  const ScoreGrid& head = grids.front();
  for (const auto& g : grids) {
    require_same_size(g.size(), head.size(), "sequence grid patches");
    require_same_size(g.codebook_size(), head.codebook_size(), "sequence grid codebook");
  }
  if (grids.size() == 1) {
    SmoothedGrid same;
    same.distributions = head.distributions;
    same.diagnostics.resize(head.size());
    return same;
  }
  std::vector<ScoreGrid> rest(grids.begin() + 1, grids.end());
  std::vector<std::size_t> index(rest.size());
  for (std::size_t i = 0; i < rest.size(); ++i) index[i] = i + 1;
  const PromptPool pool = assemble_pool(std::move(rest), std::move(index), AnchorMode::kQuery, grids.size() - 1);
  return smooth_grid(head, pool, config);
}

}  // namespace panicl
