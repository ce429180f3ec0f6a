#pragma once

// Probability vectors over a visual-token codebook and the KL / JS kernels
// used to rank and weight them. All kernels work in nats and accumulate in
// double regardless of how the inputs were stored.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <numbers>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "panicl/errors.hpp"

namespace panicl {

inline constexpr double kMassTolerance = 1e-6;
/// Mass drift below this is left alone rather than renormalized away.
inline constexpr double kDriftTolerance = 1e-9;

struct CodebookSpec {
  std::size_t size = 0;
  std::vector<std::string> labels;  // empty, or exactly `size` entries

  explicit CodebookSpec(std::size_t n, std::vector<std::string> token_labels = {})
      : size(n), labels(std::move(token_labels)) {
    if (size < 2) throw ConfigError("codebook size must be >= 2");
    if (!labels.empty() && labels.size() != size) {
      throw ConfigError("codebook labels must match codebook size");
    }
  }
};

/// A validated distribution over codebook tokens. Construction checks
/// nonnegativity and unit mass (within kMassTolerance) and renormalizes any
/// drift above kDriftTolerance, so kernels never need to.
class CodebookDistribution {
 public:
  CodebookDistribution() = default;

  explicit CodebookDistribution(std::vector<double> probs) : probs_(std::move(probs)) {
    if (probs_.size() < 2) throw ValidationError("distribution needs at least 2 entries");
    double total = 0.0;
    for (double p : probs_) {
      if (!std::isfinite(p) || p < 0.0) throw ValidationError("distribution entry is negative or non-finite");
      total += p;
    }
    if (std::abs(total - 1.0) > kMassTolerance) {
      throw ValidationError("distribution mass " + std::to_string(total) + " is not 1");
    }
    if (std::abs(total - 1.0) > kDriftTolerance) {
      for (double& p : probs_) p /= total;
    }
  }

  CodebookDistribution(std::vector<double> probs, const CodebookSpec& spec)
      : CodebookDistribution(std::move(probs)) {
    require_same_size(probs_.size(), spec.size, "distribution vs codebook");
  }

  /// Scales nonnegative weights with positive total to unit mass.
  static CodebookDistribution normalized(std::span<const double> weights) {
    double total = 0.0;
    for (double w : weights) {
      if (!std::isfinite(w) || w < 0.0) throw ValidationError("weight is negative or non-finite");
      total += w;
    }
    if (!(total > 0.0)) throw ValidationError("weights have zero total mass");
    std::vector<double> p(weights.begin(), weights.end());
    for (double& v : p) v /= total;
    return CodebookDistribution(std::move(p));
  }

  static CodebookDistribution normalized(std::span<const float> weights) {
    std::vector<double> w(weights.begin(), weights.end());
    return normalized(std::span<const double>(w));
  }

  static CodebookDistribution one_hot(std::size_t size, std::size_t token) {
    if (token >= size) throw DimensionError("one-hot token out of range");
    std::vector<double> p(size, 0.0);
    p[token] = 1.0;
    return CodebookDistribution(std::move(p));
  }

  static CodebookDistribution uniform(std::size_t size) {
    return CodebookDistribution(std::vector<double>(size, 1.0 / static_cast<double>(size)));
  }

  std::size_t size() const noexcept { return probs_.size(); }
  double operator[](std::size_t i) const { return probs_[i]; }
  std::span<const double> values() const noexcept { return probs_; }
  const std::vector<double>& probs() const noexcept { return probs_; }

  friend bool operator==(const CodebookDistribution&, const CodebookDistribution&) = default;

 private:
  std::vector<double> probs_;
};

enum class DivergenceKind { kJS, kKL };

namespace kernels {

/// Sum a_i log(a_i / b_i); 0 log 0 = 0, and +inf when a_i > 0 meets b_i = 0.
inline double kl(std::span<const double> a, std::span<const double> b) {
  double sum = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (a[i] <= 0.0) continue;
    if (b[i] <= 0.0) return std::numeric_limits<double>::infinity();
    sum += a[i] * std::log(a[i] / b[i]);
  }
  // Rounding can leave tiny negative sums for near-identical inputs.
  return std::max(sum, 0.0);
}

/// Distributions closer than this (max elementwise) have JS exactly 0.
inline constexpr double kIdentityTolerance = 1e-9;

/// Both halves against the midpoint z = (a + b) / 2. Each term is written as
/// a_i log1p(d_i) + b_i log1p(-d_i) with d_i = (a_i - b_i) / (a_i + b_i), which
/// keeps the second-order mass when a and b are close, and swapping the
/// arguments only negates d_i and swaps the two addends.
inline double js(std::span<const double> a, std::span<const double> b) {
  double max_gap = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) max_gap = std::max(max_gap, std::abs(a[i] - b[i]));
  if (max_gap < kIdentityTolerance) return 0.0;

  double left = 0.0;
  double right = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double total = a[i] + b[i];
    if (total <= 0.0) continue;
    const double d = (a[i] - b[i]) / total;
    if (a[i] > 0.0) left += a[i] * std::log1p(d);
    if (b[i] > 0.0) right += b[i] * std::log1p(-d);
  }
  const double value = 0.5 * (left + right);
  return std::clamp(value, 0.0, std::numbers::ln2);
}

inline double divergence(DivergenceKind kind, std::span<const double> candidate,
                         std::span<const double> query) {
  return kind == DivergenceKind::kJS ? js(candidate, query) : kl(candidate, query);
}

}  // namespace kernels

inline double kl_divergence(const CodebookDistribution& a, const CodebookDistribution& b) {
  require_same_size(a.size(), b.size(), "kl_divergence");
  return kernels::kl(a.values(), b.values());
}

inline double js_divergence(const CodebookDistribution& a, const CodebookDistribution& b) {
  require_same_size(a.size(), b.size(), "js_divergence");
  return kernels::js(a.values(), b.values());
}

/// D(pool_i || query) for KL, symmetric JS otherwise; order follows `pool`.
inline std::vector<double> pairwise_divergence(const CodebookDistribution& query,
                                               std::span<const CodebookDistribution> pool,
                                               DivergenceKind kind) {
  std::vector<double> out;
  out.reserve(pool.size());
  for (const auto& candidate : pool) {
    require_same_size(candidate.size(), query.size(), "pairwise_divergence");
    out.push_back(kind == DivergenceKind::kJS ? js_divergence(candidate, query)
                                              : kl_divergence(candidate, query));
  }
  return out;
}

inline std::optional<DivergenceKind> parse_divergence(const std::string& s) {
  if (s == "js" || s == "JS") return DivergenceKind::kJS;
  if (s == "kl" || s == "KL") return DivergenceKind::kKL;
  return std::nullopt;
}

inline const char* to_string(DivergenceKind k) { return k == DivergenceKind::kJS ? "js" : "kl"; }

}  // namespace panicl
