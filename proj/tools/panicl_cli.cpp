// Command-line front end. Every subcommand accepts --config <json>; explicit
// flags override values from the file.
//
// Exit codes: 0 success, 2 config error, 3 format error, 4 dimension error,
// 1 anything else.

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "panicl/panicl.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

json load_json(const std::string& path) {
  if (path.empty()) return json::object();
  std::ifstream in(path);
  if (!in) throw panicl::ConfigError("cannot open config " + path);
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw panicl::ConfigError("config " + path + " is not valid JSON: " + e.what());
  }
}

void emit(const json& j, const std::string& out) {
  const std::string text = j.dump(2) + "\n";
  if (out.empty() || out == "-") {
    std::cout << text;
  } else {
    panicl::write_file_atomic(out, text);
  }
}

/// The named sub-object, created empty if absent (a null would erase the
/// section when merged over the defaults).
json& section(json& cfg, const char* key) {
  if (!cfg.contains(key) || !cfg[key].is_object()) cfg[key] = json::object();
  return cfg[key];
}

template <class T>
void override_if(json& target, const char* key, const std::optional<T>& v) {
  if (v) target[key] = *v;
}

template <class T, class Parse>
T parse_or_throw(const std::string& s, Parse parse, const char* what) {
  auto v = parse(s);
  if (!v) throw panicl::ConfigError(std::string("unknown ") + what + ": " + s);
  return *v;
}

/// Smoothing flags shared by `smooth` and `run`.
struct SmoothFlags {
  std::optional<std::size_t> k;
  std::optional<double> alpha;
  std::optional<double> tau;
  std::optional<std::string> div, key, agg, scope;

  void add(CLI::App* app) {
    app->add_option("--k", k, "neighbor count (default min(5, m))");
    app->add_option("--alpha", alpha, "blend factor in [0, 1]");
    app->add_option("--tau", tau, "softmax temperature");
    app->add_option("--div", div, "js | kl")->check(CLI::IsMember({"js", "kl"}));
    app->add_option("--key", key, "score | feature | patch")->check(CLI::IsMember({"score", "feature", "patch"}));
    app->add_option("--agg", agg, "weighted | average | nearest")->check(CLI::IsMember({"weighted", "average", "nearest"}));
    app->add_option("--scope", scope, "patch | all")->check(CLI::IsMember({"patch", "all"}));
  }

  void apply(json& cfg) const {
    auto& sm = section(cfg, "smoothing");
    override_if(sm, "k", k);
    override_if(sm, "alpha", alpha);
    override_if(sm, "tau", tau);
    override_if(sm, "divergence", div);
    override_if(sm, "key", key);
    override_if(sm, "aggregation", agg);
    override_if(sm, "scope", scope);
  }
};

json retrieved_to_json(const std::vector<panicl::RetrievedSet>& sets, std::size_t m) {
  json queries = json::array();
  for (const auto& s : sets) {
    json items = json::array();
    for (const auto& it : s.items) items.push_back({{"id", it.id}, {"similarity", it.similarity}});
    queries.push_back({{"query", s.query}, {"items", items}});
  }
  return {{"schema_version", panicl::kReportSchemaVersion}, {"kind", "retrieval"}, {"m", m}, {"queries", queries}};
}

panicl::RetrievedSet retrieved_from_json(const json& j, const std::string& query_id) {
  const auto& qs = j.at("queries");
  if (qs.empty()) throw panicl::ConfigError("retrieval file lists no queries");
  const json* pick = &qs.front();
  if (!query_id.empty()) {
    pick = nullptr;
    for (const auto& q : qs) {
      if (q.at("query").get<std::string>() == query_id) pick = &q;
    }
    if (!pick) throw panicl::MissingItemError("query " + query_id + " not in retrieval file");
  }
  panicl::RetrievedSet out{pick->at("query").get<std::string>(), {}};
  for (const auto& it : pick->at("items")) out.items.push_back({it.at("id").get<std::string>(), it.at("similarity").get<double>()});
  return out;
}

std::vector<std::vector<std::uint32_t>> token_rows(const panicl::Tensor& t, std::vector<std::string>& ids) {
  if (t.dtype != panicl::DType::kU32 || (t.rank() != 1 && t.rank() != 2)) {
    throw panicl::FormatError("token file must be u32 with rank 1 or 2");
  }
  const std::size_t n = t.rank() == 1 ? 1 : static_cast<std::size_t>(t.dim(0));
  const std::size_t L = static_cast<std::size_t>(t.dims.back());
  std::vector<std::vector<std::uint32_t>> rows(n);
  for (std::size_t i = 0; i < n; ++i) rows[i].assign(t.u32.begin() + static_cast<std::ptrdiff_t>(i * L), t.u32.begin() + static_cast<std::ptrdiff_t>((i + 1) * L));
  ids = t.meta().value("ids", std::vector<std::string>{});
  if (ids.size() != n) {
    ids.clear();
    for (std::size_t i = 0; i < n; ++i) ids.push_back(std::to_string(i));
  }
  return rows;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"panicl: k-nearest-neighbor smoothing of per-patch codebook scores across in-context pairs"};
  app.require_subcommand(1);
  std::string config_path;
  app.add_option("--config", config_path, "JSON config file")->check(CLI::ExistingFile);

  // retrieve
  auto* retrieve = app.add_subcommand("retrieve", "rank support items for each query by flattened-feature dot similarity");
  std::string index_path, query_path, out_path;
  std::optional<std::size_t> m_opt;
  retrieve->add_option("--config", config_path)->check(CLI::ExistingFile);
  retrieve->add_option("--index", index_path, "support feature file")->required();
  retrieve->add_option("--query", query_path, "query feature file")->required();
  retrieve->add_option("--m", m_opt, "number of pairs to keep");
  retrieve->add_option("--out", out_path, "output JSON (default stdout)");

  // pool
  auto* pool = app.add_subcommand("pool", "score one prompt per retrieved pair and write the prompt pool");
  std::string backend = "synth", scores_dir, retrieved_path, mode = "q", query_id;
  std::optional<std::uint64_t> pool_seed;
  std::optional<std::size_t> codebook_opt, rows_opt, cols_opt;
  pool->add_option("--config", config_path)->check(CLI::ExistingFile);
  pool->add_option("--backend", backend, "file | synth")->check(CLI::IsMember({"file", "synth"}));
  pool->add_option("--scores", scores_dir, "directory of exported score tensors (file backend)");
  pool->add_option("--retrieved", retrieved_path, "retrieval JSON from `retrieve`")->required();
  pool->add_option("--query-id", query_id, "which query in the retrieval file (default: first)");
  pool->add_option("--mode", mode, "q | rand | seq | self")->check(CLI::IsMember({"q", "rand", "seq", "self"}));
  pool->add_option("--seed", pool_seed, "anchor seed for rand");
  pool->add_option("--codebook", codebook_opt, "codebook size (file backend)");
  pool->add_option("--rows", rows_opt, "patch rows (file backend)");
  pool->add_option("--cols", cols_opt, "patch cols (file backend)");
  pool->add_option("--out", out_path, "pool tensor path")->required();
  std::string query_grid_out;
  pool->add_option("--query-grid-out", query_grid_out, "also write the baseline prompt's score grid here");

  // smooth
  auto* smooth = app.add_subcommand("smooth", "smooth a query score grid against a prompt pool");
  std::string grid_path, pool_path, diag_path;
  SmoothFlags sflags;
  smooth->add_option("--config", config_path)->check(CLI::ExistingFile);
  smooth->add_option("--query", grid_path, "query score grid tensor")->required();
  smooth->add_option("--pool", pool_path, "pool tensor")->required();
  sflags.add(smooth);
  smooth->add_option("--out", out_path, "smoothed grid tensor")->required();
  smooth->add_option("--diag", diag_path, "per-patch neighbors and weights (JSON)");

  // decode
  auto* decode = app.add_subcommand("decode", "argmax-decode a score grid to token ids");
  std::string in_path;
  decode->add_option("--config", config_path)->check(CLI::ExistingFile);
  decode->add_option("--in", in_path, "score grid tensor")->required();
  decode->add_option("--out", out_path, "u32 token tensor")->required();

  // eval
  auto* eval = app.add_subcommand("eval", "compare predicted and ground-truth token grids");
  std::string pred_path, gt_path, metric = "all";
  eval->add_option("--config", config_path)->check(CLI::ExistingFile);
  eval->add_option("--pred", pred_path, "predicted token tensor")->required();
  eval->add_option("--gt", gt_path, "ground-truth token tensor")->required();
  eval->add_option("--metric", metric, "pixel_accuracy | miou | mse | all")
      ->check(CLI::IsMember({"pixel_accuracy", "miou", "mse", "all"}));
  eval->add_option("--codebook", codebook_opt, "codebook size for intensity decoding");
  eval->add_option("--out", out_path, "output JSON (default stdout)");

  // synth-run
  auto* synth = app.add_subcommand("synth-run", "bias-reduction experiment on the synthetic world");
  std::optional<std::uint64_t> seed_opt;
  std::optional<std::size_t> items_opt, queries_opt;
  std::optional<std::vector<double>> bias_opt;
  std::vector<std::size_t> m_list;
  std::optional<std::size_t> k_opt, sweep_opt;
  std::optional<double> alpha_opt, tau_opt;
  std::string report_path;
  synth->add_option("--config", config_path)->check(CLI::ExistingFile);
  synth->add_option("--seed", seed_opt, "world seed (first seed when sweeping)");
  synth->add_option("--rows", rows_opt);
  synth->add_option("--cols", cols_opt);
  synth->add_option("--codebook", codebook_opt);
  synth->add_option("--items", items_opt);
  synth->add_option("--bias", bias_opt, "beta_truth,beta_pair,epsilon")->delimiter(',')->expected(3);
  synth->add_option("--m", m_list, "pool width(s), comma separated")->delimiter(',');
  synth->add_option("--k", k_opt, "neighbor count (default min(5, m))");
  synth->add_option("--alpha", alpha_opt);
  synth->add_option("--tau", tau_opt);
  synth->add_option("--queries", queries_opt, "queries per world (0 = all)");
  synth->add_option("--sweep", sweep_opt, "run over this many fixed experiment seeds instead of --seed");
  synth->add_option("--report", report_path, "report JSON (default stdout)");

  // bench
  auto* bench = app.add_subcommand("bench", "per-stage wall time and peak memory on the synthetic backend");
  std::size_t repeats = 1;
  bench->add_option("--config", config_path)->check(CLI::ExistingFile);
  bench->add_option("--repeats", repeats);
  bench->add_option("--out", out_path);

  // run
  auto* run = app.add_subcommand("run", "full pipeline from one config; report includes baseline and smoothed arms");
  std::optional<std::string> mode_opt;
  run->add_option("--config", config_path)->check(CLI::ExistingFile);
  run->add_option("--seed", seed_opt);
  run->add_option("--m", m_opt);
  run->add_option("--mode", mode_opt)->check(CLI::IsMember({"q", "rand", "seq", "self"}));
  SmoothFlags rflags;
  rflags.add(run);
  run->add_option("--out", out_path, "report JSON (default stdout)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : static_cast<int>(panicl::ExitCode::kConfig);
  }

  try {
    json cfg = load_json(config_path);

    if (*retrieve) {
      const std::size_t m = m_opt.value_or(cfg.value("m", std::size_t{4}));
      panicl::RetrievalIndex index;
      for (const auto& v : panicl::read_feature_file(index_path)) index.add(v);
      std::vector<panicl::RetrievedSet> sets;
      for (const auto& q : panicl::read_feature_file(query_path)) sets.push_back(panicl::top_m(q, index, m));
      emit(retrieved_to_json(sets, m), out_path);
    } else if (*pool) {
      const auto retrieved = retrieved_from_json(load_json(retrieved_path), query_id);
      const auto anchor = parse_or_throw<panicl::AnchorMode>(mode, panicl::parse_anchor_mode, "pool mode");
      std::optional<std::uint64_t> seed = pool_seed;
      if (!seed && cfg.contains("pool") && cfg["pool"].contains("seed")) seed = cfg["pool"]["seed"].get<std::uint64_t>();
      if (anchor != panicl::AnchorMode::kRandom) seed.reset();
      panicl::PromptPool built;
      std::optional<panicl::ScoreGrid> baseline;
      const auto& first = retrieved[0].id;
      if (backend == "synth") {
        const json resolved = panicl::resolve_config(cfg);
        const auto world = panicl::world_from_json(resolved);
        const panicl::SyntheticScorer scorer(world, panicl::bias_from_json(resolved));
        built = panicl::build_pool(scorer, retrieved, retrieved.query, anchor, world.grid, seed);
        baseline = panicl::score_prompt(scorer, {first, first, retrieved.query, world.grid});
      } else {
        const json file = cfg.value("file", json::object());
        auto pick = [&](const std::optional<std::size_t>& flag, const char* key) -> std::size_t {
          if (flag) return *flag;
          if (file.contains(key) && !file[key].is_null()) return file[key].get<std::size_t>();
          throw panicl::ConfigError(std::string("file backend needs --") + key);
        };
        if (scores_dir.empty()) scores_dir = file.value("scores", std::string());
        if (scores_dir.empty()) throw panicl::ConfigError("file backend needs --scores");
        const panicl::PatchGrid grid{pick(rows_opt, "rows"), pick(cols_opt, "cols")};
        const panicl::FileScorer scorer(scores_dir, pick(codebook_opt, "codebook"));
        built = panicl::build_pool(scorer, retrieved, retrieved.query, anchor, grid, seed);
        if (!query_grid_out.empty()) baseline = panicl::score_prompt(scorer, {first, first, retrieved.query, grid});
      }
      panicl::write_pool(built, out_path);
      if (!query_grid_out.empty() && baseline) panicl::write_score_grid(*baseline, query_grid_out);
    } else if (*smooth) {
      const auto grid = panicl::read_score_grid(grid_path);
      const auto p = panicl::read_pool(pool_path);
      cfg["m"] = p.width();
      sflags.apply(cfg);
      const json resolved = panicl::resolve_config(cfg);
      const auto sc = panicl::smoothing_from_json(resolved);
      const auto result = panicl::smooth_grid(grid, p, sc);
      panicl::ScoreGrid out{result.distributions, {}, {}, grid.prompt};
      panicl::write_score_grid(out, out_path);
      if (!diag_path.empty()) {
        json patches = json::array();
        for (std::size_t l = 0; l < result.size(); ++l) {
          json nb = json::array();
          const auto& d = result.diagnostics[l];
          for (std::size_t i = 0; i < d.neighbors.size(); ++i) {
            const auto& n = d.neighbors[i];
            nb.push_back({{"index", n.source.index}, {"patch", n.source.patch}, {"distance", n.distance},
                          {"weight", i < d.weights.size() ? d.weights[i] : 0.0}});
          }
          patches.push_back({{"patch", l}, {"neighbors", nb}});
        }
        emit({{"kind", "smoothing_diagnostics"}, {"config", panicl::to_json(sc)}, {"patches", patches}}, diag_path);
      }
    } else if (*decode) {
      const auto grid = panicl::read_score_grid(grid_path.empty() ? in_path : grid_path);
      const auto pred = panicl::decode_argmax(grid.distributions, grid.prompt.region);
      panicl::write_tensor(panicl::Tensor::from_u32({pred.size()}, pred.tokens,
                                                    {{"rows", pred.grid.rows}, {"cols", pred.grid.cols}, {"codebook", pred.codebook}}),
                           out_path);
    } else if (*eval) {
      const auto pt = panicl::read_tensor(pred_path);
      const auto gtt = panicl::read_tensor(gt_path);
      std::vector<std::string> pids, gids;
      const auto preds = token_rows(pt, pids);
      const auto gts = token_rows(gtt, gids);
      if (preds.size() != gts.size()) throw panicl::DimensionError("prediction and ground truth differ in item count");
      std::size_t codebook = codebook_opt.value_or(pt.meta().value("codebook", std::size_t{0}));
      const bool need_decode = metric != "pixel_accuracy";
      if (need_decode && codebook < 2) throw panicl::ConfigError("miou/mse need --codebook (or a codebook field in the token sidecar)");
      panicl::EvalReport acc, miou, mse;
      acc.metric = "pixel_accuracy";
      miou.metric = "miou";
      mse.metric = "mse";
      panicl::LinearTokenDecoder decoder;
      for (std::size_t i = 0; i < preds.size(); ++i) {
        acc.add(pids[i], panicl::pixel_accuracy(preds[i], gts[i]));
        if (need_decode) {
          const auto pv = decoder.decode({preds[i], {preds[i].size(), 1}, codebook});
          const auto gv = decoder.decode({gts[i], {gts[i].size(), 1}, codebook});
          miou.add(pids[i], panicl::iou(panicl::threshold_mask(pv), panicl::threshold_mask(gv)));
          mse.add(pids[i], panicl::mse(pv, gv));
        }
      }
      json rows = json::array();
      for (auto* r : {&acc, &miou, &mse}) {
        if (metric != "all" && metric != r->metric) continue;
        r->finalize();
        rows.push_back(r->to_json());
      }
      emit({{"schema_version", panicl::kReportSchemaVersion}, {"kind", "eval_report"}, {"rows", rows}}, out_path);
    } else if (*synth) {
      override_if(cfg, "seed", seed_opt);
      auto& w = section(cfg, "world");
      override_if(w, "rows", rows_opt);
      override_if(w, "cols", cols_opt);
      override_if(w, "codebook", codebook_opt);
      override_if(w, "items", items_opt);
      if (bias_opt) {
        section(cfg, "bias");
        cfg["bias"]["beta_truth"] = (*bias_opt)[0];
        cfg["bias"]["beta_pair"] = (*bias_opt)[1];
        cfg["bias"]["epsilon_noise"] = (*bias_opt)[2];
      }
      override_if(cfg, "queries", queries_opt);
      if (m_list.empty()) m_list.push_back(cfg.value("m", std::size_t{4}));
      cfg["m"] = m_list.front();
      const json resolved = panicl::resolve_config(cfg);
      const auto params = panicl::bias_from_json(resolved);
      params.normalized();

      std::vector<panicl::SmoothingConfig> grid;
      for (std::size_t m : m_list) {
        json per = resolved;
        per["m"] = m;
        per["smoothing"]["k"] = k_opt ? json(*k_opt) : json(nullptr);
        per["smoothing"]["alpha"] = alpha_opt ? json(*alpha_opt) : json(nullptr);
        if (tau_opt) per["smoothing"]["tau"] = *tau_opt;
        grid.push_back(panicl::smoothing_from_json(panicl::resolve_config(per)));
      }
      std::vector<std::uint64_t> seeds;
      if (sweep_opt) {
        seeds = panicl::experiment_seeds(*sweep_opt);
      } else {
        seeds.push_back(resolved.at("seed").get<std::uint64_t>());
      }
      std::size_t nq = resolved.at("queries").get<std::size_t>();
      json per_seed = json::array();
      std::vector<double> acc_sum(grid.size(), 0.0), base_sum(grid.size(), 0.0);
      for (auto seed : seeds) {
        json wc = resolved;
        wc["seed"] = seed;
        const auto world = panicl::world_from_json(wc);
        const auto rep = panicl::run_bias_experiment(world, params, grid, nq == 0 ? world.queries.size() : nq, seed);
        for (std::size_t c = 0; c < grid.size(); ++c) {
          acc_sum[c] += rep.results[c].accuracy;
          base_sum[c] += rep.results[c].baseline_accuracy;
        }
        per_seed.push_back(panicl::to_json(rep));
      }
      json summary = json::array();
      for (std::size_t c = 0; c < grid.size(); ++c) {
        const double n = static_cast<double>(seeds.size());
        summary.push_back({{"config", panicl::to_json(grid[c])}, {"mean_accuracy", acc_sum[c] / n},
                           {"mean_baseline_accuracy", base_sum[c] / n}, {"margin", (acc_sum[c] - base_sum[c]) / n}});
      }
      emit({{"schema_version", panicl::kReportSchemaVersion}, {"kind", "synth_report"}, {"rng", panicl::kRngFamily},
            {"config", resolved}, {"seeds", seeds}, {"summary", summary}, {"per_seed", per_seed}},
           report_path);
    } else if (*bench) {
      emit(panicl::run_bench(cfg, repeats), out_path);
    } else if (*run) {
      override_if(cfg, "seed", seed_opt);
      override_if(cfg, "m", m_opt);
      if (mode_opt) section(cfg, "pool")["mode"] = *mode_opt;
      rflags.apply(cfg);
      emit(panicl::run_pipeline(cfg), out_path);
    }
  } catch (const panicl::Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return static_cast<int>(e.exit_code());
  } catch (const json::exception& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return static_cast<int>(panicl::ExitCode::kConfig);
  } catch (const fs::filesystem_error& e) {
    std::cerr << "file error: " << e.what() << "\n";
    return static_cast<int>(panicl::ExitCode::kFormat);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return static_cast<int>(panicl::ExitCode::kFailure);
  }
  return 0;
}
