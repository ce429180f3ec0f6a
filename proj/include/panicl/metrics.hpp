#pragma once

#include <cstdint>
#include <map>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "panicl/divergence.hpp"
#include "panicl/errors.hpp"
#include "panicl/pool.hpp"

namespace panicl {

struct PredictionGrid {
  std::vector<std::uint32_t> tokens;
  PatchGrid grid;
  std::size_t codebook = 0;

  std::size_t size() const noexcept { return tokens.size(); }
  friend bool operator==(const PredictionGrid&, const PredictionGrid&) = default;
};

/// Index of the largest entry, lowest index on ties.
inline std::uint32_t argmax(std::span<const double> p) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < p.size(); ++i) {
    if (p[i] > p[best]) best = i;
  }
  return static_cast<std::uint32_t>(best);
}

inline PredictionGrid decode_argmax(std::span<const CodebookDistribution> distributions, PatchGrid grid) {
  require_same_size(distributions.size(), grid.count(), "decode_argmax grid");
  PredictionGrid out{{}, grid, distributions.empty() ? 0 : distributions.front().size()};
  out.tokens.reserve(distributions.size());
  for (const auto& d : distributions) out.tokens.push_back(argmax(d.values()));
  return out;
}

/// Turns token ids into output values. Implementations must be deterministic.
class DecoderBackend {
 public:
  virtual ~DecoderBackend() = default;
  virtual std::vector<double> decode(const PredictionGrid& tokens) const = 0;
};

/// Token v of a |V|-entry codebook decodes to the intensity v / (|V| - 1).
class LinearTokenDecoder final : public DecoderBackend {
 public:
  std::vector<double> decode(const PredictionGrid& p) const override {
    if (p.codebook < 2) throw ConfigError("decoder needs a codebook of size >= 2");
    std::vector<double> out(p.size());
    const double top = static_cast<double>(p.codebook - 1);
    for (std::size_t i = 0; i < p.size(); ++i) out[i] = static_cast<double>(p.tokens[i]) / top;
    return out;
  }
};

/// Passes token ids through unchanged, for decoding outside this library.
class TokenPassthroughDecoder final : public DecoderBackend {
 public:
  std::vector<double> decode(const PredictionGrid& p) const override {
    return std::vector<double>(p.tokens.begin(), p.tokens.end());
  }
};

/// |pred AND gt| / |pred OR gt|. Both empty gives 1; exactly one empty gives 0.
inline double iou(std::span<const std::uint8_t> pred, std::span<const std::uint8_t> gt) {
  require_same_size(pred.size(), gt.size(), "iou masks");
  std::size_t inter = 0;
  std::size_t uni = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const bool a = pred[i] != 0;
    const bool b = gt[i] != 0;
    inter += (a && b) ? 1 : 0;
    uni += (a || b) ? 1 : 0;
  }
  if (uni == 0) return 1.0;
  return static_cast<double>(inter) / static_cast<double>(uni);
}

inline double mean_of(std::span<const double> values) {
  if (values.empty()) throw DegenerateError("mean over an empty set");
  return std::accumulate(values.begin(), values.end(), 0.0) / static_cast<double>(values.size());
}

inline double mean_iou(std::span<const std::vector<std::uint8_t>> preds, std::span<const std::vector<std::uint8_t>> gts) {
  require_same_size(preds.size(), gts.size(), "mean_iou items");
  std::vector<double> per(preds.size());
  for (std::size_t i = 0; i < preds.size(); ++i) per[i] = iou(preds[i], gts[i]);
  return mean_of(per);
}

inline double mse(std::span<const double> pred, std::span<const double> gt) {
  require_same_size(pred.size(), gt.size(), "mse grids");
  if (pred.empty()) throw DegenerateError("mse over empty grids");
  double s = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const double d = pred[i] - gt[i];
    s += d * d;
  }
  return s / static_cast<double>(pred.size());
}

inline double pixel_accuracy(std::span<const std::uint32_t> pred, std::span<const std::uint32_t> gt) {
  require_same_size(pred.size(), gt.size(), "pixel_accuracy");
  if (pred.empty()) throw DegenerateError("pixel accuracy over empty grids");
  std::size_t hit = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) hit += pred[i] == gt[i] ? 1 : 0;
  return static_cast<double>(hit) / static_cast<double>(pred.size());
}

/// Foreground mask from decoded intensities (value >= threshold).
inline std::vector<std::uint8_t> threshold_mask(std::span<const double> values, double threshold = 0.5) {
  std::vector<std::uint8_t> m(values.size());
  for (std::size_t i = 0; i < values.size(); ++i) m[i] = values[i] >= threshold ? 1 : 0;
  return m;
}

struct EvalReport {
  std::string metric;
  std::string arm;
  std::vector<std::string> item_ids;
  std::vector<double> per_item;
  std::vector<std::string> groups;  // optional grouping key per item (e.g. class)
  double aggregate = 0.0;
  double tolerance = 1e-12;
  nlohmann::json config = nlohmann::json::object();

  void add(std::string id, double value, std::string group = {}) {
    item_ids.push_back(std::move(id));
    per_item.push_back(value);
    groups.push_back(std::move(group));
  }

  void finalize() { aggregate = mean_of(per_item); }

  /// Mean per group, for callers that fold by class.
  std::map<std::string, double> grouped() const {
    std::map<std::string, std::pair<double, std::size_t>> acc;
    for (std::size_t i = 0; i < per_item.size(); ++i) {
      auto& a = acc[groups[i]];
      a.first += per_item[i];
      ++a.second;
    }
    std::map<std::string, double> out;
    for (const auto& [g, a] : acc) out[g] = a.first / static_cast<double>(a.second);
    return out;
  }

  nlohmann::json to_json() const {
    nlohmann::json j{{"metric", metric}, {"arm", arm}, {"aggregate", aggregate}, {"tolerance", tolerance},
                     {"items", item_ids}, {"per_item", per_item}};
    bool any_group = false;
    for (const auto& g : groups) any_group = any_group || !g.empty();
    if (any_group) {
      j["groups"] = groups;
      j["grouped"] = grouped();
    }
    if (!config.empty()) j["config"] = config;
    return j;
  }
};

}  // namespace panicl
