#pragma once

// End-to-end runner: retrieve -> pool -> score query prompt -> smooth ->
// decode -> evaluate, driven by one JSON config. Every report carries the
// single-pair baseline next to the smoothed result and echoes the effective
// config it ran with.

#include <sys/resource.h>

#include <chrono>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "panicl/divergence.hpp"
#include "panicl/errors.hpp"
#include "panicl/metrics.hpp"
#include "panicl/pool.hpp"
#include "panicl/retriever.hpp"
#include "panicl/rng.hpp"
#include "panicl/smoothing.hpp"
#include "panicl/synthbench.hpp"
#include "panicl/tensor_io.hpp"

namespace panicl {

inline constexpr int kReportSchemaVersion = 1;

/// Defaults for every field run_pipeline reads. `k` and `alpha` left null
/// resolve to min(5, m) and the task preset.
inline nlohmann::json default_config() {
  return nlohmann::json::parse(R"({
    "schema_version": 1,
    "backend": "synth",
    "seed": 7,
    "task": "segmentation",
    "m": 4,
    "queries": 0,
    "world": {
      "rows": 4, "cols": 4, "codebook": 8, "items": 120, "family": "binarize",
      "channels": 4, "feature_noise": 0.5, "corruption": 0.25, "prototypes": 0,
      "query_fraction": 0.2, "feature_dim": 8
    },
    "bias": {"beta_truth": 0.45, "beta_pair": 0.45, "epsilon_noise": 0.1, "similarity_coupling": 0.0},
    "pool": {"mode": "q", "seed": 0},
    "smoothing": {
      "k": null, "alpha": null, "tau": 1.0, "divergence": "js",
      "key": "score", "aggregation": "weighted", "scope": "patch"
    },
    "metrics": ["pixel_accuracy", "miou", "mse"],
    "file": {
      "index": null, "queries": null, "scores": null, "gt": null, "tokens_out": null,
      "codebook": null, "rows": null, "cols": null
    }
  })");
}

inline Task parse_task(const std::string& s) {
  if (s == "segmentation") return Task::kSegmentation;
  if (s == "colorization") return Task::kColorization;
  if (s == "detection") return Task::kDetection;
  if (s == "pixel_space") return Task::kPixelSpace;
  if (s == "autoregressive") return Task::kAutoregressive;
  throw ConfigError("unknown task preset: " + s);
}

/// Merges `user` over the defaults and fills the derived fields.
inline nlohmann::json resolve_config(const nlohmann::json& user) {
  if (!user.is_object() && !user.is_null()) throw ConfigError("config must be a JSON object");
  nlohmann::json cfg = default_config();
  if (user.is_object()) cfg.merge_patch(user);
  try {
    const auto m = cfg.at("m").get<std::size_t>();
    if (m == 0) throw ConfigError("m must be >= 1");
    const SmoothingConfig preset = SmoothingConfig::defaults(m, parse_task(cfg.at("task").get<std::string>()));
    auto& sm = cfg["smoothing"];
    if (sm["k"].is_null()) sm["k"] = preset.k;
    if (sm["alpha"].is_null()) sm["alpha"] = preset.alpha;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("bad config: ") + e.what());
  }
  return cfg;
}

inline SmoothingConfig smoothing_from_json(const nlohmann::json& cfg) {
  try {
    const auto& sm = cfg.at("smoothing");
    SmoothingConfig c;
    c.m = cfg.at("m").get<std::size_t>();
    c.k = sm.at("k").get<std::size_t>();
    c.alpha = sm.at("alpha").get<double>();
    c.tau = sm.at("tau").get<double>();
    auto bad = [](const std::string& what, const std::string& v) { return ConfigError("unknown " + what + ": " + v); };
    const auto div = sm.at("divergence").get<std::string>();
    const auto key = sm.at("key").get<std::string>();
    const auto agg = sm.at("aggregation").get<std::string>();
    const auto scope = sm.at("scope").get<std::string>();
    c.divergence = parse_divergence(div).value_or(DivergenceKind::kJS);
    if (!parse_divergence(div)) throw bad("divergence", div);
    if (!parse_key(key)) throw bad("key", key);
    if (!parse_aggregation(agg)) throw bad("aggregation", agg);
    if (!parse_scope(scope)) throw bad("scope", scope);
    c.key = *parse_key(key);
    c.aggregation = *parse_aggregation(agg);
    c.scope = *parse_scope(scope);
    c.validate();
    return c;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("bad smoothing config: ") + e.what());
  }
}

inline BiasedScorerParams bias_from_json(const nlohmann::json& cfg) {
  const auto& b = cfg.at("bias");
  return {b.at("beta_truth").get<double>(), b.at("beta_pair").get<double>(), b.at("epsilon_noise").get<double>(),
          b.at("similarity_coupling").get<double>()};
}

inline SyntheticWorld world_from_json(const nlohmann::json& cfg) {
  try {
    const auto& w = cfg.at("world");
    WorldOptions opt;
    opt.channels = w.at("channels").get<std::size_t>();
    opt.feature_noise = w.at("feature_noise").get<double>();
    opt.corruption = w.at("corruption").get<double>();
    opt.prototypes = w.at("prototypes").get<std::size_t>();
    opt.query_fraction = w.at("query_fraction").get<double>();
    opt.feature_dim = w.at("feature_dim").get<std::size_t>();
    const auto family = w.at("family").get<std::string>();
    const auto task = parse_task_family(family);
    if (!task) throw ConfigError("unknown task family: " + family);
    return generate_world(cfg.at("seed").get<std::uint64_t>(), w.at("rows").get<std::size_t>(),
                          w.at("cols").get<std::size_t>(), w.at("codebook").get<std::size_t>(),
                          w.at("items").get<std::size_t>(), *task, opt);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("bad world config: ") + e.what());
  }
}

/// Runs `fn`, prefixing any library error with the stage name while keeping
/// its type (and so its exit code).
template <class Fn>
auto in_stage(const char* stage, Fn&& fn) -> decltype(fn()) {
  const std::string tag = std::string("[") + stage + "] ";
  try {
    return fn();
  } catch (const ChecksumError& e) {
    throw ChecksumError(tag + e.what());
  } catch (const FormatError& e) {
    throw FormatError(tag + e.what());
  } catch (const DimensionError& e) {
    throw DimensionError(tag + e.what());
  } catch (const ConfigError& e) {
    throw ConfigError(tag + e.what());
  } catch (const ValidationError& e) {
    throw ValidationError(tag + e.what());
  } catch (const MissingItemError& e) {
    throw MissingItemError(tag + e.what());
  } catch (const DegenerateError& e) {
    throw DegenerateError(tag + e.what());
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(tag + e.what());
  }
}

/// Reads a feature file: rank-2 (n, dim) or rank-4 (n, C, H, W) f32 with
/// item ids under "ids" in the sidecar.
inline std::vector<FeatureVector> read_feature_file(const std::filesystem::path& path) {
  const Tensor t = read_tensor(path);
  if (t.dtype != DType::kF32 || (t.rank() != 2 && t.rank() != 4)) {
    throw FormatError(path.string() + ": feature file must be f32 with rank 2 or 4");
  }
  const auto meta = t.meta();
  if (meta.contains("layout") && meta.at("layout").get<std::string>() != kFlattenOrder) {
    throw FormatError(path.string() + ": unsupported flatten layout " + meta.at("layout").dump());
  }
  const auto n = static_cast<std::size_t>(t.dim(0));
  const std::size_t width = n == 0 ? 0 : static_cast<std::size_t>(t.element_count() / n);
  std::vector<std::string> ids;
  if (meta.contains("ids")) ids = meta.at("ids").get<std::vector<std::string>>();
  if (ids.size() != n) throw FormatError(path.string() + ": sidecar must list one id per row");
  std::vector<FeatureVector> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    std::vector<double> row(t.f32.begin() + static_cast<std::ptrdiff_t>(i * width),
                            t.f32.begin() + static_cast<std::ptrdiff_t>((i + 1) * width));
    out.push_back(normalize_flat(ids[i], row));
  }
  return out;
}

inline void write_feature_file(const std::vector<FeatureMap>& maps, const std::filesystem::path& path) {
  if (maps.empty()) throw ConfigError("no feature maps to write");
  const auto& f = maps.front();
  std::vector<float> payload;
  std::vector<std::string> ids;
  for (const auto& m : maps) {
    if (m.channels != f.channels || m.height != f.height || m.width != f.width) {
      throw DimensionError("feature maps differ in shape");
    }
    payload.insert(payload.end(), m.values.begin(), m.values.end());
    ids.push_back(m.id);
  }
  nlohmann::json meta{{"ids", ids}, {"layout", kFlattenOrder}};
  write_tensor(Tensor::from_f32({maps.size(), f.channels, f.height, f.width}, std::move(payload), meta), path);
}

namespace detail {

struct ArmMetrics {
  EvalReport accuracy, miou, mse;
};

inline void score_arm(ArmMetrics& arm, const std::string& id, const PredictionGrid& pred,
                      const std::vector<std::uint32_t>& gt, const DecoderBackend& decoder) {
  arm.accuracy.add(id, pixel_accuracy(pred.tokens, gt));
  PredictionGrid truth = pred;
  truth.tokens = gt;
  const auto pv = decoder.decode(pred);
  const auto gv = decoder.decode(truth);
  arm.mse.add(id, mse(pv, gv));
  arm.miou.add(id, iou(threshold_mask(pv), threshold_mask(gv)));
}

inline nlohmann::json arm_rows(ArmMetrics& arm, const std::string& name, const std::vector<std::string>& wanted) {
  nlohmann::json rows = nlohmann::json::array();
  for (auto* r : {&arm.accuracy, &arm.miou, &arm.mse}) r->arm = name;
  arm.accuracy.metric = "pixel_accuracy";
  arm.miou.metric = "miou";
  arm.mse.metric = "mse";
  for (auto* r : {&arm.accuracy, &arm.miou, &arm.mse}) {
    if (std::find(wanted.begin(), wanted.end(), r->metric) == wanted.end()) continue;
    r->finalize();
    rows.push_back(r->to_json());
  }
  return rows;
}

}  // namespace detail

struct QueryOutcome {
  std::string query;
  RetrievedSet retrieved;
  PredictionGrid baseline;
  PredictionGrid smoothed;
};

/// Shared per-query core: retrieval, baseline prompt, pool, smoothing, decode.
inline QueryOutcome run_query(const ScorerBackend& scorer, const RetrievalIndex& index, const FeatureVector& query,
                              std::size_t m, AnchorMode mode, std::uint64_t pool_seed, PatchGrid grid,
                              const SmoothingConfig& sc) {
  QueryOutcome out;
  out.query = query.id;
  out.retrieved = in_stage("retrieve", [&] { return top_m(query, index, m); });
  const auto& first = out.retrieved[0].id;
  const ScoreGrid s = in_stage("score", [&] { return score_prompt(scorer, {first, first, query.id, grid}); });
  const PromptPool pool = in_stage("pool", [&] {
    return build_pool(scorer, out.retrieved, query.id, mode, grid, pool_seed);
  });
  const SmoothedGrid smoothed = in_stage("smooth", [&] { return smooth_grid(s, pool, sc); });
  out.baseline = in_stage("decode", [&] { return decode_argmax(s.distributions, grid); });
  out.smoothed = in_stage("decode", [&] { return decode_argmax(smoothed.distributions, grid); });
  return out;
}

inline nlohmann::json run_pipeline(const nlohmann::json& user_config) {
  const nlohmann::json cfg = in_stage("config", [&] { return resolve_config(user_config); });
  const SmoothingConfig sc = in_stage("config", [&] { return smoothing_from_json(cfg); });
  const auto m = cfg.at("m").get<std::size_t>();
  const auto mode_name = cfg.at("pool").at("mode").get<std::string>();
  const auto mode = parse_anchor_mode(mode_name);
  if (!mode) throw ConfigError("[config] unknown pool mode: " + mode_name);
  const auto pool_seed = cfg.at("pool").at("seed").get<std::uint64_t>();
  const auto wanted = cfg.at("metrics").get<std::vector<std::string>>();
  for (const auto& w : wanted) {
    if (w != "pixel_accuracy" && w != "miou" && w != "mse") throw ConfigError("[config] unknown metric: " + w);
  }
  const std::string backend = cfg.at("backend").get<std::string>();

  detail::ArmMetrics base_arm, panicl_arm;
  nlohmann::json retrievals = nlohmann::json::array();
  LinearTokenDecoder decoder;

  if (backend == "synth") {
    const SyntheticWorld world = in_stage("world", [&] { return world_from_json(cfg); });
    const BiasedScorerParams params = in_stage("config", [&] {
      auto p = bias_from_json(cfg);
      p.normalized();
      return p;
    });
    const SyntheticScorer scorer(world, params);
    const RetrievalIndex index = in_stage("index", [&] { return world.support_index(); });
    if (index.size() < m) throw ConfigError("[config] support set smaller than m");
    auto limit = cfg.at("queries").get<std::size_t>();
    if (limit == 0 || limit > world.queries.size()) limit = world.queries.size();
    for (std::size_t qn = 0; qn < limit; ++qn) {
      const SyntheticItem& q = world.items[world.queries[qn]];
      const auto fv = flatten_normalize(q.features);
      const QueryOutcome o = run_query(scorer, index, fv, m, *mode, pool_seed, world.grid, sc);
      detail::score_arm(base_arm, q.id, o.baseline, q.output, decoder);
      detail::score_arm(panicl_arm, q.id, o.smoothed, q.output, decoder);
      nlohmann::json ids = nlohmann::json::array();
      for (const auto& it : o.retrieved.items) ids.push_back(it.id);
      retrievals.push_back({{"query", q.id}, {"retrieved", ids}});
    }
  } else if (backend == "file") {
    const auto& f = cfg.at("file");
    // A field set to null in the user config is dropped by the merge, so absent means null.
    auto unset = [&](const char* key) { return !f.contains(key) || f.at(key).is_null(); };
    for (const char* key : {"index", "queries", "scores", "codebook", "rows", "cols"}) {
      if (unset(key)) throw ConfigError(std::string("[config] file backend needs file.") + key);
    }
    const PatchGrid grid{f.at("rows").get<std::size_t>(), f.at("cols").get<std::size_t>()};
    const FileScorer scorer(f.at("scores").get<std::string>(), f.at("codebook").get<std::size_t>());
    RetrievalIndex index;
    in_stage("index", [&] {
      for (const auto& v : read_feature_file(f.at("index").get<std::string>())) index.add(v);
      return 0;
    });
    const auto queries = in_stage("index", [&] { return read_feature_file(f.at("queries").get<std::string>()); });
    std::optional<Tensor> gt;
    std::vector<std::string> gt_ids;
    if (!unset("gt")) {
      gt = in_stage("eval", [&] { return read_tensor(f.at("gt").get<std::string>()); });
      if (gt->dtype != DType::kU32 || gt->rank() != 2 || gt->dim(1) != grid.count()) {
        throw FormatError("[eval] ground-truth tokens must be u32 with shape (n, rows*cols)");
      }
      gt_ids = gt->meta().value("ids", std::vector<std::string>{});
      if (gt_ids.size() != gt->dim(0)) throw FormatError("[eval] ground-truth sidecar must list one id per row");
    }
    std::vector<std::uint32_t> smoothed_tokens, baseline_tokens;
    std::vector<std::string> ids;
    for (const auto& q : queries) {
      const QueryOutcome o = run_query(scorer, index, q, m, *mode, pool_seed, grid, sc);
      smoothed_tokens.insert(smoothed_tokens.end(), o.smoothed.tokens.begin(), o.smoothed.tokens.end());
      baseline_tokens.insert(baseline_tokens.end(), o.baseline.tokens.begin(), o.baseline.tokens.end());
      ids.push_back(q.id);
      nlohmann::json rids = nlohmann::json::array();
      for (const auto& it : o.retrieved.items) rids.push_back(it.id);
      retrievals.push_back({{"query", q.id}, {"retrieved", rids}});
      if (gt) {
        auto pos = std::find(gt_ids.begin(), gt_ids.end(), q.id);
        if (pos == gt_ids.end()) throw MissingItemError("[eval] no ground truth for query " + q.id);
        const auto row = static_cast<std::size_t>(pos - gt_ids.begin());
        std::vector<std::uint32_t> truth(gt->u32.begin() + static_cast<std::ptrdiff_t>(row * grid.count()),
                                         gt->u32.begin() + static_cast<std::ptrdiff_t>((row + 1) * grid.count()));
        detail::score_arm(base_arm, q.id, o.baseline, truth, decoder);
        detail::score_arm(panicl_arm, q.id, o.smoothed, truth, decoder);
      }
    }
    if (!unset("tokens_out")) {
      const std::filesystem::path out = f.at("tokens_out").get<std::string>();
      const std::uint64_t n = ids.size();
      write_tensor(Tensor::from_u32({n, grid.count()}, smoothed_tokens, {{"ids", ids}, {"arm", "panicl"}}), out);
      write_tensor(Tensor::from_u32({n, grid.count()}, baseline_tokens, {{"ids", ids}, {"arm", "baseline"}}),
                   companion_path(out, "baseline"));
    }
  } else {
    throw ConfigError("[config] unknown backend: " + backend);
  }

  nlohmann::json rows = nlohmann::json::array();
  if (!base_arm.accuracy.per_item.empty()) {
    for (auto& r : detail::arm_rows(base_arm, "baseline", wanted)) rows.push_back(r);
    for (auto& r : detail::arm_rows(panicl_arm, "panicl", wanted)) rows.push_back(r);
  }
  return {{"schema_version", kReportSchemaVersion},
          {"kind", "pipeline_report"},
          {"rng", kRngFamily},
          {"config", cfg},
          {"rows", rows},
          {"retrievals", retrievals}};
}

/// Peak resident set size of this process in KiB.
inline long peak_rss_kib() {
  rusage usage{};
  getrusage(RUSAGE_SELF, &usage);
  return usage.ru_maxrss;
}

/// Wall-time per pipeline stage on the synthetic backend. Timings are of
/// this machine only.
inline nlohmann::json run_bench(const nlohmann::json& user_config, std::size_t repeats = 1) {
  using clock = std::chrono::steady_clock;
  const nlohmann::json cfg = resolve_config(user_config);
  const SmoothingConfig sc = smoothing_from_json(cfg);
  const auto m = cfg.at("m").get<std::size_t>();

  std::map<std::string, double> total_us;
  std::map<std::string, std::size_t> calls;
  auto timed = [&](const std::string& stage, auto&& fn) {
    const auto t0 = clock::now();
    auto result = fn();
    total_us[stage] += std::chrono::duration<double, std::micro>(clock::now() - t0).count();
    ++calls[stage];
    return result;
  };

  for (std::size_t rep = 0; rep < std::max<std::size_t>(1, repeats); ++rep) {
    const SyntheticWorld world = timed("world", [&] { return world_from_json(cfg); });
    const SyntheticScorer scorer(world, bias_from_json(cfg));
    const RetrievalIndex index = timed("index", [&] { return world.support_index(); });
    for (std::size_t qi : world.queries) {
      const auto& q = world.items[qi];
      const auto fv = flatten_normalize(q.features);
      const RetrievedSet r = timed("retrieve", [&] { return top_m(fv, index, m); });
      const ScoreGrid s = timed("score_query", [&] { return score_prompt(scorer, {r[0].id, r[0].id, q.id, world.grid}); });
      const PromptPool pool = timed("pool", [&] { return build_pool(scorer, r, q.id, AnchorMode::kQuery, world.grid); });
      const SmoothedGrid sm = timed("smooth", [&] { return smooth_grid(s, pool, sc); });
      timed("decode", [&] { return decode_argmax(sm.distributions, world.grid); });
    }
  }
  nlohmann::json stages = nlohmann::json::object();
  for (const auto& [name, us] : total_us) {
    stages[name] = {{"calls", calls[name]}, {"total_us", us}, {"mean_us", us / static_cast<double>(calls[name])}};
  }
  if (calls.count("pool")) stages["pool"]["per_prompt_us"] = total_us["pool"] / static_cast<double>(calls["pool"] * m);
  return {{"schema_version", kReportSchemaVersion}, {"kind", "bench_report"}, {"config", cfg},
          {"stages", stages}, {"peak_rss_kib", peak_rss_kib()}};
}

}  // namespace panicl
