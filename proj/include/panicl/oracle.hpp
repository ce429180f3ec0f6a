#pragma once

// Brute-force reference implementations used to check the production path.
// Nothing here calls into the smoothing or divergence kernels: distances are
// recomputed in long double (JS via the entropy identity
// H(z) - (H(a) + H(b)) / 2), every candidate is sorted, and the softmax and
// blend are evaluated literally without stabilization.

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <string>
#include <vector>

#include "panicl/pool.hpp"
#include "panicl/retriever.hpp"
#include "panicl/smoothing.hpp"

namespace panicl::oracle {

using Real = long double;

inline Real entropy(const std::vector<Real>& p) {
  Real h = 0;
  for (Real x : p) {
    if (x > 0) h -= x * std::log(x);
  }
  return h;
}

inline Real js_entropy_form(std::span<const double> a, std::span<const double> b) {
  std::vector<Real> pa(a.begin(), a.end());
  std::vector<Real> pb(b.begin(), b.end());
  std::vector<Real> z(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) z[i] = (pa[i] + pb[i]) / 2;
  return entropy(z) - (entropy(pa) + entropy(pb)) / 2;
}

/// Cross-entropy minus entropy; +inf when a has mass where b has none.
inline Real kl_cross_entropy_form(std::span<const double> a, std::span<const double> b) {
  Real cross = 0;
  Real self = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (a[i] == 0.0) continue;
    if (b[i] == 0.0) return std::numeric_limits<Real>::infinity();
    cross -= static_cast<Real>(a[i]) * std::log(static_cast<Real>(b[i]));
    self -= static_cast<Real>(a[i]) * std::log(static_cast<Real>(a[i]));
  }
  return cross - self;
}

inline Real euclid(std::span<const double> a, std::span<const double> b) {
  Real s = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const Real d = static_cast<Real>(a[i]) - static_cast<Real>(b[i]);
    s += d * d;
  }
  return std::sqrt(s);
}

struct Candidate {
  Real distance;
  std::size_t index;
  std::size_t patch;
  std::size_t position;
};

inline std::vector<Candidate> sorted_candidates(std::vector<Candidate> all) {
  std::stable_sort(all.begin(), all.end(), [](const Candidate& a, const Candidate& b) {
    if (a.distance < b.distance) return true;
    if (b.distance < a.distance) return false;
    if (a.index != b.index) return a.index < b.index;
    return a.patch < b.patch;
  });
  return all;
}

/// Literal blend of already-selected neighbor vectors.
inline std::vector<double> literal_blend(std::span<const double> self, const std::vector<std::vector<double>>& picked,
                                         const std::vector<Real>& distances, const SmoothingConfig& config) {
  const std::size_t n = picked.size();
  std::vector<Real> gamma(n, 0);
  if (config.aggregation == Aggregation::kNearest) {
    gamma[0] = 1;
  } else if (config.aggregation == Aggregation::kAverage) {
    for (auto& g : gamma) g = Real(1) / static_cast<Real>(n);
  } else {
    Real denom = 0;
    for (std::size_t i = 0; i < n; ++i) denom += std::exp(-distances[i] / static_cast<Real>(config.tau));
    for (std::size_t i = 0; i < n; ++i) gamma[i] = std::exp(-distances[i] / static_cast<Real>(config.tau)) / denom;
  }
  std::vector<double> out(self.size());
  const Real alpha = config.alpha;
  for (std::size_t j = 0; j < self.size(); ++j) {
    Real acc = 0;
    for (std::size_t i = 0; i < n; ++i) acc += picked[i][j] * gamma[i];
    out[j] = static_cast<double>((1 - alpha) * static_cast<Real>(self[j]) + alpha * acc);
  }
  return out;
}

/// Reference for smooth_grid: returns the raw (unrenormalized) blended rows.
inline std::vector<std::vector<double>> brute_force_smooth(const ScoreGrid& query, const PromptPool& pool,
                                                           const SmoothingConfig& config) {
  const std::size_t L = query.distributions.size();
  if (pool.per_patch.size() != L) throw DimensionError("oracle: pool and query disagree on patch count");

  // Candidate universe, listed explicitly.
  struct Entry {
    const std::vector<double>* score;
    const std::vector<double>* key;
    Provenance source;
  };
  auto entries_of = [&](std::size_t l) {
    std::vector<Entry> out;
    auto add_slot = [&](const PoolSlot& slot) {
      for (std::size_t e = 0; e < slot.scores.size(); ++e) {
        const std::vector<double>* key = &slot.scores[e].probs();
        if (config.key == KeyType::kFeature) key = &slot.features.at(e);
        if (config.key == KeyType::kPatch) key = &slot.patches.at(e);
        out.push_back({&slot.scores[e].probs(), key, slot.sources[e]});
      }
    };
    if (config.scope == PoolScope::kAllPatch) {
      for (const auto& slot : pool.per_patch) add_slot(slot);
    } else {
      add_slot(pool.per_patch[l]);
    }
    return out;
  };

  std::vector<std::vector<double>> result;
  for (std::size_t l = 0; l < L; ++l) {
    const std::vector<double>& s = query.distributions[l].probs();
    const std::vector<double>* qkey = &s;
    if (config.key == KeyType::kFeature) qkey = &query.features.at(l);
    if (config.key == KeyType::kPatch) qkey = &query.patches.at(l);

    const auto entries = entries_of(l);
    if (entries.empty() || config.alpha == 0.0) {
      result.push_back(s);
      continue;
    }
    std::vector<Candidate> cands;
    for (std::size_t e = 0; e < entries.size(); ++e) {
      Real d = 0;
      if (config.key != KeyType::kScore) {
        d = euclid(*qkey, *entries[e].key);
      } else if (config.divergence == DivergenceKind::kJS) {
        d = js_entropy_form(*entries[e].key, *qkey);
      } else {
        d = kl_cross_entropy_form(*entries[e].key, *qkey);
      }
      cands.push_back({d, entries[e].source.index, entries[e].source.patch, e});
    }
    const auto ranked = sorted_candidates(std::move(cands));
    const std::size_t take = std::min(config.k, ranked.size());
    std::vector<std::vector<double>> picked;
    std::vector<Real> dists;
    for (std::size_t i = 0; i < take; ++i) {
      picked.push_back(*entries[ranked[i].position].score);
      dists.push_back(ranked[i].distance);
    }
    result.push_back(literal_blend(s, picked, dists, config));
  }
  return result;
}

/// Reference for smooth_features.
inline std::vector<std::vector<double>> brute_force_smooth_features(
    const std::vector<std::vector<double>>& query, const std::vector<std::vector<std::vector<double>>>& pools,
    const SmoothingConfig& config) {
  std::vector<std::vector<double>> out;
  for (std::size_t l = 0; l < query.size(); ++l) {
    if (pools[l].empty() || config.alpha == 0.0) {
      out.push_back(query[l]);
      continue;
    }
    std::vector<Candidate> cands;
    for (std::size_t i = 0; i < pools[l].size(); ++i) cands.push_back({euclid(query[l], pools[l][i]), i + 1, l, i});
    const auto ranked = sorted_candidates(std::move(cands));
    const std::size_t take = std::min(config.k, ranked.size());
    std::vector<std::vector<double>> picked;
    std::vector<Real> dists;
    for (std::size_t i = 0; i < take; ++i) {
      picked.push_back(pools[l][ranked[i].position]);
      dists.push_back(ranked[i].distance);
    }
    out.push_back(literal_blend(query[l], picked, dists, config));
  }
  return out;
}

/// Reference for top_m: score everything, stable-sort everything, cut.
inline std::vector<std::string> brute_force_top_m(std::span<const double> query, const RetrievalIndex& index,
                                                  std::size_t m) {
  std::vector<std::pair<double, std::size_t>> all;
  for (std::size_t i = 0; i < index.size(); ++i) {
    const auto row = index.row(i);
    all.emplace_back(std::inner_product(query.begin(), query.end(), row.begin(), 0.0), i);
  }
  std::stable_sort(all.begin(), all.end(), [](const auto& a, const auto& b) { return a.first > b.first; });
  std::vector<std::string> ids;
  for (std::size_t i = 0; i < std::min(m, all.size()); ++i) ids.push_back(index.id(all[i].second));
  return ids;
}

}  // namespace panicl::oracle
