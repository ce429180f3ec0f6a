#pragma once

// A small deterministic stand-in for a visual in-context task. Items are
// token grids (inputs) with outputs given by a per-family token rule; each
// item also has a spatial feature map for retrieval. The synthetic scorer
// mixes the anchor's true output token with the in-context pair's output
// token, which reproduces the way a single example drags predictions toward
// its own output.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include <nlohmann/json.hpp>

#include "panicl/divergence.hpp"
#include "panicl/errors.hpp"
#include "panicl/metrics.hpp"
#include "panicl/pool.hpp"
#include "panicl/retriever.hpp"
#include "panicl/rng.hpp"
#include "panicl/smoothing.hpp"

namespace panicl {

enum class TaskFamily { kIdentity, kShift, kInvert, kBinarize };

inline const char* to_string(TaskFamily t) {
  switch (t) {
    case TaskFamily::kIdentity: return "identity";
    case TaskFamily::kShift: return "shift";
    case TaskFamily::kInvert: return "invert";
    case TaskFamily::kBinarize: return "binarize";
  }
  return "?";
}

inline std::optional<TaskFamily> parse_task_family(const std::string& s) {
  if (s == "identity") return TaskFamily::kIdentity;
  if (s == "shift") return TaskFamily::kShift;
  if (s == "invert") return TaskFamily::kInvert;
  if (s == "binarize") return TaskFamily::kBinarize;
  return std::nullopt;
}

inline std::uint32_t apply_rule(TaskFamily t, std::uint32_t token, std::size_t codebook) {
  const auto v = static_cast<std::uint32_t>(codebook);
  switch (t) {
    case TaskFamily::kIdentity: return token;
    case TaskFamily::kShift: return (token + 1) % v;
    case TaskFamily::kInvert: return v - 1 - token;
    case TaskFamily::kBinarize: return token >= v / 2 ? v - 1 : 0;
  }
  return token;
}

struct WorldOptions {
  std::size_t channels = 4;        // feature-map channels
  double feature_noise = 0.5;      // std-dev of per-cell feature noise
  double corruption = 0.25;        // per-patch chance an item deviates from its prototype
  std::size_t prototypes = 0;      // 0 = max(2, n_items / 10)
  double query_fraction = 0.2;
  std::size_t feature_dim = 8;     // width of the per-patch "intermediate feature" key
};

struct SyntheticItem {
  std::string id;
  std::size_t prototype = 0;
  std::vector<std::uint32_t> input;
  std::vector<std::uint32_t> output;
  FeatureMap features;
};

struct SyntheticWorld {
  std::uint64_t seed = 0;
  PatchGrid grid;
  CodebookSpec codebook{2};
  TaskFamily task = TaskFamily::kIdentity;
  WorldOptions options;
  std::vector<SyntheticItem> items;
  std::vector<std::size_t> support;  // indices into items
  std::vector<std::size_t> queries;
  std::vector<std::vector<double>> projection;  // |V| x feature_dim
  std::unordered_map<std::string, std::size_t> by_id;

  std::size_t patch_count() const noexcept { return grid.count(); }

  const SyntheticItem& item(const std::string& id) const {
    auto it = by_id.find(id);
    if (it == by_id.end()) throw MissingItemError("unknown synthetic item: " + id);
    return items[it->second];
  }

  RetrievalIndex support_index() const {
    RetrievalIndex index;
    for (std::size_t i : support) index.add(flatten_normalize(items[i].features));
    return index;
  }
};

inline std::string item_name(std::size_t i) {
  std::string digits = std::to_string(i);
  return "item" + std::string(digits.size() < 4 ? 4 - digits.size() : 0, '0') + digits;
}

/// Same seed and arguments give an identical world. Every item draws from
/// its own substream, so generation order does not matter.
inline SyntheticWorld generate_world(std::uint64_t seed, std::size_t rows, std::size_t cols, std::size_t codebook_size,
                                     std::size_t n_items, TaskFamily task, const WorldOptions& options = {}) {
  if (rows == 0 || cols == 0) throw ConfigError("world grid dimensions must be >= 1");
  if (n_items < 2) throw ConfigError("a world needs at least 2 items (support and query)");
  if (options.channels == 0 || options.feature_dim == 0) throw ConfigError("feature sizes must be >= 1");

  SyntheticWorld w;
  w.seed = seed;
  w.grid = {rows, cols};
  w.codebook = CodebookSpec(codebook_size);
  w.task = task;
  w.options = options;
  const std::size_t L = rows * cols;
  const std::size_t V = codebook_size;

  Rng world_rng(seed, Stream::kWorld, 0);
  std::vector<std::vector<double>> embedding(V, std::vector<double>(options.channels));
  for (auto& e : embedding) {
    for (double& x : e) x = world_rng.normal();
  }
  w.projection.assign(V, std::vector<double>(options.feature_dim));
  for (auto& p : w.projection) {
    for (double& x : p) x = world_rng.normal();
  }
  const std::size_t n_protos = options.prototypes ? options.prototypes : std::max<std::size_t>(2, n_items / 10);
  std::vector<std::vector<std::uint32_t>> protos(n_protos, std::vector<std::uint32_t>(L));
  for (auto& p : protos) {
    for (auto& t : p) t = static_cast<std::uint32_t>(world_rng.below(V));
  }

  w.items.resize(n_items);
  for (std::size_t i = 0; i < n_items; ++i) {
    Rng rng(seed, Stream::kItem, i);
    SyntheticItem& it = w.items[i];
    it.id = item_name(i);
    it.prototype = static_cast<std::size_t>(rng.below(n_protos));
    it.input = protos[it.prototype];
    for (auto& t : it.input) {
      if (rng.bernoulli(options.corruption)) t = static_cast<std::uint32_t>(rng.below(V));
    }
    it.output.resize(L);
    for (std::size_t l = 0; l < L; ++l) it.output[l] = apply_rule(task, it.input[l], V);
    std::vector<double> fm(options.channels * L);
    for (std::size_t c = 0; c < options.channels; ++c) {
      for (std::size_t l = 0; l < L; ++l) {
        fm[c * L + l] = embedding[it.input[l]][c] + options.feature_noise * rng.normal();
      }
    }
    it.features = FeatureMap(it.id, options.channels, rows, cols, std::move(fm));
    w.by_id.emplace(it.id, i);
  }

  const auto want = static_cast<std::size_t>(std::ceil(options.query_fraction * static_cast<double>(n_items)));
  const std::size_t n_queries = std::clamp<std::size_t>(want, 1, n_items - 1);
  for (std::size_t i = 0; i < n_items - n_queries; ++i) w.support.push_back(i);
  for (std::size_t i = n_items - n_queries; i < n_items; ++i) w.queries.push_back(i);
  return w;
}

struct BiasedScorerParams {
  double beta_truth = 0.45;
  double beta_pair = 0.45;
  double epsilon_noise = 0.1;
  /// 0: fixed split. c > 0 moves pair weight into truth weight as the
  /// anchor and pair inputs become less similar: beta_pair' = beta_pair *
  /// (1 - c + c * max(cos, 0)).
  double similarity_coupling = 0.0;

  /// The three masses scaled to sum to 1.
  BiasedScorerParams normalized() const {
    if (beta_truth < 0 || beta_pair < 0 || epsilon_noise < 0 || similarity_coupling < 0 || similarity_coupling > 1) {
      throw ConfigError("scorer weights must be nonnegative and coupling in [0, 1]");
    }
    const double total = beta_truth + beta_pair + epsilon_noise;
    if (!(total > 0.0)) throw ConfigError("scorer weights sum to zero");
    return {beta_truth / total, beta_pair / total, epsilon_noise / total, similarity_coupling};
  }
};

inline nlohmann::json to_json(const BiasedScorerParams& p) {
  return {{"beta_truth", p.beta_truth}, {"beta_pair", p.beta_pair}, {"epsilon_noise", p.epsilon_noise},
          {"similarity_coupling", p.similarity_coupling}};
}

inline ScoreGrid synthetic_score(const SyntheticWorld& world, const BiasedScorerParams& raw, const PromptSpec& prompt) {
  require_same_size(prompt.patch_count(), world.patch_count(), "prompt region vs world grid");
  const BiasedScorerParams p = raw.normalized();
  const SyntheticItem& anchor = world.item(prompt.anchor);
  const SyntheticItem& pair_in = world.item(prompt.input);
  const SyntheticItem& pair_out = world.item(prompt.output);
  const std::size_t V = world.codebook.size;

  double beta_pair = p.beta_pair;
  double beta_truth = p.beta_truth;
  if (p.similarity_coupling > 0.0) {
    const auto a = flatten_normalize(anchor.features);
    const auto b = flatten_normalize(pair_in.features);
    const double sim = std::max(0.0, dot(a.values, b.values));
    beta_pair = p.beta_pair * (1.0 - p.similarity_coupling + p.similarity_coupling * sim);
    beta_truth = p.beta_truth + (p.beta_pair - beta_pair);
  }

  ScoreGrid grid;
  grid.prompt = prompt;
  const double floor = p.epsilon_noise / static_cast<double>(V);
  for (std::size_t l = 0; l < world.patch_count(); ++l) {
    std::vector<double> d(V, floor);
    d[anchor.output[l]] += beta_truth;
    d[pair_out.output[l]] += beta_pair;
    grid.distributions.emplace_back(std::move(d));

    const auto& dist = grid.distributions.back();
    std::vector<double> feat(world.options.feature_dim, 0.0);
    for (std::size_t v = 0; v < V; ++v) {
      for (std::size_t f = 0; f < feat.size(); ++f) feat[f] += dist[v] * world.projection[v][f];
    }
    grid.features.push_back(std::move(feat));
    grid.patches.push_back({static_cast<double>(argmax(dist.values())) / static_cast<double>(V - 1)});
  }
  return grid;
}

class SyntheticScorer final : public ScorerBackend {
 public:
  SyntheticScorer(const SyntheticWorld& world, BiasedScorerParams params) : world_(&world), params_(params) {}

  ScoreGrid score(const PromptSpec& prompt) const override { return synthetic_score(*world_, params_, prompt); }
  std::size_t codebook_size() const override { return world_->codebook.size; }

 private:
  const SyntheticWorld* world_;
  BiasedScorerParams params_;
};

/// Deterministic seed list used by experiment sweeps.
inline std::vector<std::uint64_t> experiment_seeds(std::size_t n, std::uint64_t base = 0x5eedULL) {
  std::vector<std::uint64_t> seeds(n);
  for (std::size_t i = 0; i < n; ++i) seeds[i] = splitmix64(base + i) & 0xffffffffULL;
  return seeds;
}

struct ConfigResult {
  SmoothingConfig config;
  double accuracy = 0.0;
  double baseline_accuracy = 0.0;
  double mean_js = 0.0;           // JS(s_hat_l, onehot(truth)) averaged over patches and queries
  double baseline_mean_js = 0.0;
  std::vector<double> per_query_accuracy;
  std::vector<double> per_query_baseline;

  double margin() const { return accuracy - baseline_accuracy; }
};

struct BiasReport {
  std::uint64_t seed = 0;
  std::vector<std::string> queries;
  std::vector<ConfigResult> results;
};

inline nlohmann::json to_json(const SmoothingConfig& c) {
  return {{"m", c.m}, {"k", c.k}, {"alpha", c.alpha}, {"tau", c.tau}, {"divergence", to_string(c.divergence)},
          {"key", to_string(c.key)}, {"aggregation", to_string(c.aggregation)}, {"scope", to_string(c.scope)}};
}

/// Runs the single-pair baseline and every smoothing config over the same
/// queries. The baseline prompt is [x_1, y_1, x_q]; pools use query anchors.
inline BiasReport run_bias_experiment(const SyntheticWorld& world, const BiasedScorerParams& params,
                                      const std::vector<SmoothingConfig>& configs, std::size_t n_queries,
                                      std::uint64_t seed) {
  if (configs.empty()) throw ConfigError("no smoothing configs given");
  if (n_queries == 0) throw ConfigError("n_queries must be >= 1");
  std::size_t max_m = 1;
  for (const auto& c : configs) {
    c.validate();
    if (c.m == 0) throw ConfigError("config m must be >= 1");
    max_m = std::max(max_m, c.m);
  }
  if (world.support.size() < max_m) {
    throw ConfigError("world has " + std::to_string(world.support.size()) + " support items, need " + std::to_string(max_m));
  }

  std::vector<std::size_t> chosen = world.queries;
  if (n_queries < chosen.size()) {
    Rng rng(seed, Stream::kQuerySample, 0);
    for (std::size_t i = 0; i < n_queries; ++i) {
      const std::size_t j = i + static_cast<std::size_t>(rng.below(chosen.size() - i));
      std::swap(chosen[i], chosen[j]);
    }
    chosen.resize(n_queries);
    std::sort(chosen.begin(), chosen.end());
  }

  const RetrievalIndex index = world.support_index();
  const SyntheticScorer scorer(world, params);
  const std::size_t L = world.patch_count();
  const std::size_t V = world.codebook.size;

  BiasReport report;
  report.seed = seed;
  report.results.resize(configs.size());
  for (std::size_t c = 0; c < configs.size(); ++c) report.results[c].config = configs[c];

  auto truth_js = [&](std::span<const CodebookDistribution> dists, const SyntheticItem& q) {
    double s = 0.0;
    for (std::size_t l = 0; l < L; ++l) {
      s += js_divergence(dists[l], CodebookDistribution::one_hot(V, q.output[l]));
    }
    return s / static_cast<double>(L);
  };

  for (std::size_t qi : chosen) {
    const SyntheticItem& q = world.items[qi];
    report.queries.push_back(q.id);
    const RetrievedSet retrieved = top_m(flatten_normalize(q.features), index, max_m);
    const ScoreGrid s = score_prompt(scorer, {retrieved[0].id, retrieved[0].id, q.id, world.grid});
    const PredictionGrid base = decode_argmax(s.distributions, world.grid);
    const double base_acc = pixel_accuracy(base.tokens, q.output);
    const double base_js = truth_js(s.distributions, q);

    for (auto& r : report.results) {
      RetrievedSet prefix{retrieved.query, {retrieved.items.begin(), retrieved.items.begin() + static_cast<std::ptrdiff_t>(r.config.m)}};
      const PromptPool pool = build_pool(scorer, prefix, q.id, AnchorMode::kQuery, world.grid);
      const SmoothedGrid smoothed = smooth_grid(s, pool, r.config);
      const PredictionGrid pred = decode_argmax(smoothed.distributions, world.grid);
      r.per_query_accuracy.push_back(pixel_accuracy(pred.tokens, q.output));
      r.per_query_baseline.push_back(base_acc);
      r.mean_js += truth_js(smoothed.distributions, q);
      r.baseline_mean_js += base_js;
    }
  }
  const auto n = static_cast<double>(chosen.size());
  for (auto& r : report.results) {
    r.accuracy = mean_of(r.per_query_accuracy);
    r.baseline_accuracy = mean_of(r.per_query_baseline);
    r.mean_js /= n;
    r.baseline_mean_js /= n;
  }
  return report;
}

inline nlohmann::json to_json(const BiasReport& r) {
  nlohmann::json rows = nlohmann::json::array();
  for (const auto& c : r.results) {
    rows.push_back({{"config", to_json(c.config)},
                    {"accuracy", c.accuracy},
                    {"baseline_accuracy", c.baseline_accuracy},
                    {"margin", c.margin()},
                    {"mean_js_to_truth", c.mean_js},
                    {"baseline_mean_js_to_truth", c.baseline_mean_js}});
  }
  return {{"seed", r.seed}, {"queries", r.queries.size()}, {"results", rows}};
}

}  // namespace panicl
