#pragma once

// Pixel-level retrieval: feature maps are flattened without pooling away the
// spatial layout, l2-normalized, and ranked by dot similarity.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <map>
#include <set>
#include <span>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "panicl/errors.hpp"

namespace panicl {

/// Layout tag written into feature-file headers.
inline constexpr const char* kFlattenOrder = "channel-major,row-major";

struct FeatureMap {
  std::string id;
  std::size_t channels = 0;
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<double> values;  // channels * height * width, channel-major then row-major

  FeatureMap() = default;
  FeatureMap(std::string item_id, std::size_t c, std::size_t h, std::size_t w, std::vector<double> v)
      : id(std::move(item_id)), channels(c), height(h), width(w), values(std::move(v)) {
    if (c == 0 || h == 0 || w == 0) throw DimensionError("feature map dimensions must be >= 1");
    require_same_size(values.size(), c * h * w, "feature map payload");
    for (double x : values) {
      if (!std::isfinite(x)) throw ValidationError("feature map entry is not finite");
    }
  }

  double at(std::size_t c, std::size_t y, std::size_t x) const {
    return values[(c * height + y) * width + x];
  }
};

/// A flattened feature with unit l2 norm.
struct FeatureVector {
  std::string id;
  std::vector<double> values;
};

inline FeatureVector normalize_flat(std::string id, std::span<const double> flat) {
  double sq = 0.0;
  for (double v : flat) sq += v * v;
  if (!(sq > 0.0) || !std::isfinite(sq)) {
    throw DegenerateError("feature '" + id + "' has zero (or non-finite) norm");
  }
  const double norm = std::sqrt(sq);
  FeatureVector out{std::move(id), std::vector<double>(flat.begin(), flat.end())};
  for (double& v : out.values) v /= norm;
  return out;
}

inline FeatureVector flatten_normalize(const FeatureMap& map) {
  // `values` is already stored in the flattening order.
  return normalize_flat(map.id, map.values);
}

struct RetrievedItem {
  std::string id;
  double similarity = 0.0;

  friend bool operator==(const RetrievedItem&, const RetrievedItem&) = default;
};

struct RetrievedSet {
  std::string query;
  std::vector<RetrievedItem> items;  // descending similarity

  std::size_t size() const noexcept { return items.size(); }
  const RetrievedItem& operator[](std::size_t i) const { return items[i]; }
};

/// Immutable-after-build exact index. Vectors are stored row-major in one
/// block; ids keep insertion order, which is also the tie-break order.
class RetrievalIndex {
 public:
  RetrievalIndex() = default;

  void add(const FeatureVector& v) {
    if (v.values.empty()) throw DimensionError("empty feature vector");
    if (dim_ == 0) {
      dim_ = v.values.size();
    } else {
      require_same_size(v.values.size(), dim_, "index vector");
    }
    if (!positions_.emplace(v.id, ids_.size()).second) {
      throw ConfigError("duplicate item id in index: " + v.id);
    }
    ids_.push_back(v.id);
    data_.insert(data_.end(), v.values.begin(), v.values.end());
  }

  std::size_t size() const noexcept { return ids_.size(); }
  std::size_t dim() const noexcept { return dim_; }
  bool empty() const noexcept { return ids_.empty(); }
  const std::string& id(std::size_t i) const { return ids_[i]; }
  const std::vector<std::string>& ids() const noexcept { return ids_; }
  std::span<const double> row(std::size_t i) const { return {data_.data() + i * dim_, dim_}; }

  bool contains(const std::string& id) const { return positions_.count(id) != 0; }

 private:
  std::size_t dim_ = 0;
  std::vector<std::string> ids_;
  std::vector<double> data_;
  std::unordered_map<std::string, std::size_t> positions_;
};

inline double dot(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

/// The m most similar index entries to `query`; ties go to the earlier-added item.
inline RetrievedSet top_m(const FeatureVector& query, const RetrievalIndex& index, std::size_t m) {
  if (m == 0) throw ConfigError("top_m requires m >= 1");
  if (index.empty()) throw DegenerateError("retrieval index is empty");
  require_same_size(query.values.size(), index.dim(), "query vs index");

  std::vector<std::pair<double, std::size_t>> scored(index.size());
  for (std::size_t i = 0; i < index.size(); ++i) scored[i] = {dot(query.values, index.row(i)), i};

  const std::size_t take = std::min(m, index.size());
  std::partial_sort(scored.begin(), scored.begin() + static_cast<std::ptrdiff_t>(take), scored.end(),
                    [](const auto& a, const auto& b) {
                      if (a.first != b.first) return a.first > b.first;
                      return a.second < b.second;
                    });

  RetrievedSet out{query.id, {}};
  out.items.reserve(take);
  for (std::size_t i = 0; i < take; ++i) out.items.push_back({index.id(scored[i].second), scored[i].first});
  return out;
}

/// Fraction of retrievals whose first k items contain at least one relevant id.
inline double recall_at_k(std::span<const RetrievedSet> retrievals,
                          const std::map<std::string, std::set<std::string>>& relevant, std::size_t k) {
  if (k == 0) throw ConfigError("recall_at_k requires k >= 1");
  if (retrievals.empty()) throw DegenerateError("recall over an empty retrieval list is undefined");
  std::size_t hits = 0;
  for (const auto& r : retrievals) {
    auto it = relevant.find(r.query);
    if (it == relevant.end() || it->second.empty()) {
      throw ConfigError("query '" + r.query + "' has no relevant set");
    }
    const std::size_t upto = std::min(k, r.items.size());
    for (std::size_t i = 0; i < upto; ++i) {
      if (it->second.count(r.items[i].id) != 0) {
        ++hits;
        break;
      }
    }
  }
  return static_cast<double>(hits) / static_cast<double>(retrievals.size());
}

}  // namespace panicl
