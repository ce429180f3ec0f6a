// Acceptance suite: one PASS/FAIL line per criterion, nonzero exit if any
// criterion fails. Every random draw is seeded, so a failure replays.

#include <bit>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <functional>
#include <iostream>
#include <numbers>
#include <sstream>
#include <string>

#include "panicl/oracle.hpp"
#include "panicl/panicl.hpp"
#include "../test_helpers.hpp"

using namespace panicl;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool ok = true;
  std::ostringstream detail;

  void require(bool cond, const std::string& why) {
    if (!cond && ok) {
      ok = false;
      detail << "FAILED: " << why << "; ";
    }
  }
};

int failures = 0;

void criterion(const std::string& name, const std::function<void(Outcome&)>& body) {
  Outcome o;
  const auto t0 = std::chrono::steady_clock::now();
  try {
    body(o);
  } catch (const std::exception& e) {
    o.ok = false;
    o.detail << "exception: " << e.what();
  }
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  if (!o.ok) ++failures;
  std::printf("%s  %-28s (%.1fs)  %s\n", o.ok ? "PASS" : "FAIL", name.c_str(), secs, o.detail.str().c_str());
  std::fflush(stdout);
}

CodebookDistribution dist(std::vector<double> p) { return CodebookDistribution(std::move(p)); }

double max_gap_to_simplex(const std::vector<CodebookDistribution>& rows) {
  double worst = 0.0;
  for (const auto& r : rows) {
    double total = 0.0;
    for (double x : r.values()) {
      if (x < 0.0) worst = std::max(worst, -x);
      total += x;
    }
    worst = std::max(worst, std::abs(total - 1.0));
  }
  return worst;
}

SmoothingConfig random_config(Rng& rng, std::size_t m) {
  SmoothingConfig c;
  c.m = m;
  c.k = 1 + static_cast<std::size_t>(rng.below(m));
  c.alpha = rng.uniform();
  c.tau = std::exp(rng.uniform(std::log(0.05), std::log(20.0)));
  return c;
}

// Independent high-precision references (40-digit mpmath).
constexpr double kJsRef = 0.2157615543388356956;
constexpr double kKlRef = 0.1438410362258904637;

void divergence_correctness(Outcome& o) {
  const double js = js_divergence(dist({1, 0}), dist({0.5, 0.5}));
  const double kl = kl_divergence(dist({0.5, 0.5}), dist({0.25, 0.75}));
  o.require(std::abs(js - kJsRef) <= 1e-6, "js([1,0],[.5,.5])");
  o.require(std::abs(kl - kKlRef) <= 1e-6, "kl([.5,.5],[.25,.75])");
  o.require(std::abs(js_divergence(dist({1, 0}), dist({0, 1})) - std::numbers::ln2) <= 1e-6, "js max");

  Rng rng(101, Stream::kTest, 0);
  const int trials = 20000;
  double worst_asym = 0.0;
  double lo = 1.0;
  double hi = 0.0;
  for (int t = 0; t < trials; ++t) {
    const std::size_t n = 2 + rng.below(255);
    const auto a = panicl::testing::random_distribution(rng, n, t % 4 == 0 ? 0.4 : 0.0);
    const auto b = panicl::testing::random_distribution(rng, n, t % 3 == 0 ? 0.4 : 0.0);
    const double ab = js_divergence(a, b);
    const double ba = js_divergence(b, a);
    worst_asym = std::max(worst_asym, std::abs(ab - ba));
    lo = std::min(lo, ab);
    hi = std::max(hi, ab);
  }
  o.require(worst_asym <= 1e-12, "js symmetry");
  o.require(lo >= 0.0 && hi <= std::numbers::ln2 + 1e-12, "js bound");
  o.detail << "js=" << js << " kl=" << kl << " pairs=" << trials << " max|js(a,b)-js(b,a)|=" << worst_asym
           << " range=[" << lo << ", " << hi << "]";
}

void oracle_equivalence(Outcome& o) {
  Rng rng(202, Stream::kTest, 0);
  int instances = 0;
  double worst = 0.0;
  for (auto div : {DivergenceKind::kJS, DivergenceKind::kKL}) {
    for (auto agg : {Aggregation::kWeighted, Aggregation::kAverage, Aggregation::kNearest}) {
      for (auto scope : {PoolScope::kPerPatch, PoolScope::kAllPatch}) {
        for (auto key : {KeyType::kScore, KeyType::kFeature, KeyType::kPatch}) {
          for (int rep = 0; rep < 30; ++rep) {
            // The first draw of each cell sits at the size limits.
            const bool corner = rep == 0;
            const std::size_t m = corner ? 8 : 1 + rng.below(8);
            const std::size_t L = corner ? 64 : 1 + rng.below(64);
            const std::size_t V = corner ? 128 : 2 + rng.below(127);
            // KL keeps every entry positive so distances stay finite; JS also sees exact zeros.
            const double zeros = div == DivergenceKind::kJS && rep % 2 ? 0.2 : 0.0;
            const auto inst = panicl::testing::random_instance(rng, L, V, m, 1 + rng.below(6), zeros);
            SmoothingConfig c = random_config(rng, m);
            if (corner) c.k = m;
            c.divergence = div;
            c.aggregation = agg;
            c.scope = scope;
            c.key = key;
            const auto got = smooth_grid(inst.query, inst.pool, c);
            const auto want = oracle::brute_force_smooth(inst.query, inst.pool, c);
            worst = std::max(worst, panicl::testing::max_abs_gap(got.distributions, want));
            ++instances;
          }
        }
      }
    }
  }
  o.require(instances >= 1000, "instance count");
  o.require(worst <= 1e-9, "elementwise gap");
  o.detail << "instances=" << instances << " variants=36 max|diff|=" << worst;
}

void algebraic_identities(Outcome& o) {
  Rng rng(303, Stream::kTest, 0);
  const int trials = 400;
  int alpha_zero_exact = 0;
  int nearest_exact = 0;
  double tau_gap = 0.0;
  double simplex_gap = 0.0;
  for (int t = 0; t < trials; ++t) {
    const std::size_t m = 1 + rng.below(8);
    const auto inst = panicl::testing::random_instance(rng, 1 + rng.below(32), 2 + rng.below(64), m, 3,
                                                       t % 2 ? 0.2 : 0.0);
    SmoothingConfig c = random_config(rng, m);
    c.scope = t % 3 == 0 ? PoolScope::kAllPatch : PoolScope::kPerPatch;
    c.key = static_cast<KeyType>(rng.below(3));

    SmoothingConfig zero = c;
    zero.alpha = 0.0;
    alpha_zero_exact += smooth_grid(inst.query, inst.pool, zero).distributions == inst.query.distributions;

    SmoothingConfig nearest = c;
    nearest.k = 1;
    nearest.aggregation = Aggregation::kNearest;
    SmoothingConfig weighted = nearest;
    weighted.aggregation = Aggregation::kWeighted;
    nearest_exact += smooth_grid(inst.query, inst.pool, nearest).distributions ==
                     smooth_grid(inst.query, inst.pool, weighted).distributions;

    SmoothingConfig hot = c;
    hot.tau = 1e6;
    hot.aggregation = Aggregation::kWeighted;
    SmoothingConfig avg = hot;
    avg.aggregation = Aggregation::kAverage;
    const auto h = smooth_grid(inst.query, inst.pool, hot).distributions;
    const auto a = smooth_grid(inst.query, inst.pool, avg).distributions;
    for (std::size_t l = 0; l < h.size(); ++l) {
      for (std::size_t v = 0; v < h[l].size(); ++v) tau_gap = std::max(tau_gap, std::abs(h[l][v] - a[l][v]));
    }

    for (auto agg : {Aggregation::kWeighted, Aggregation::kAverage, Aggregation::kNearest}) {
      SmoothingConfig any = c;
      any.aggregation = agg;
      simplex_gap = std::max(simplex_gap, max_gap_to_simplex(smooth_grid(inst.query, inst.pool, any).distributions));
    }
  }
  o.require(alpha_zero_exact == trials, "alpha=0 identity");
  o.require(nearest_exact == trials, "k=1 nearest == weighted");
  o.require(tau_gap <= 1e-6, "tau=1e6 vs average");
  o.require(simplex_gap <= 1e-9, "simplex closure");
  o.detail << "trials=" << trials << " alpha0_exact=" << alpha_zero_exact << " k1_exact=" << nearest_exact
           << " tau1e6_gap=" << tau_gap << " simplex_gap=" << simplex_gap;
}

void retrieval_exactness(Outcome& o) {
  Rng rng(404, Stream::kTest, 0);
  struct Shape {
    std::size_t n, dim;
  };
  std::vector<Shape> shapes{{5000, 4096}, {5000, 16}, {1, 4096}, {2000, 512}};
  for (int i = 0; i < 20; ++i) shapes.push_back({1 + rng.below(3000), 1 + rng.below(1024)});
  std::size_t checked = 0;
  for (const auto& s : shapes) {
    RetrievalIndex index;
    for (std::size_t i = 0; i < s.n; ++i) {
      if (i % 97 == 5) {
        // Exact duplicate of the previous row: ties must follow insertion order.
        const auto prev = index.row(i - 1);
        index.add({"i" + std::to_string(i), std::vector<double>(prev.begin(), prev.end())});
      } else {
        index.add(normalize_flat("i" + std::to_string(i), panicl::testing::random_vector(rng, s.dim)));
      }
    }
    for (int q = 0; q < 3; ++q) {
      const auto query = normalize_flat("q", panicl::testing::random_vector(rng, s.dim));
      for (std::size_t m : {std::size_t{1}, std::size_t{8}, 1 + rng.below(s.n), s.n + 5}) {
        const auto got = top_m(query, index, m);
        const auto want = oracle::brute_force_top_m(query.values, index, m);
        bool same = got.size() == want.size();
        for (std::size_t i = 0; same && i < want.size(); ++i) same = got[i].id == want[i];
        o.require(same, "top_m mismatch n=" + std::to_string(s.n) + " dim=" + std::to_string(s.dim));
        ++checked;
      }
    }
  }

  double scale_gap = 0.0;
  for (int t = 0; t < 2000; ++t) {
    const auto raw = panicl::testing::random_vector(rng, 1 + rng.below(4096));
    const double k = std::exp(rng.uniform(-30.0, 30.0));
    std::vector<double> scaled(raw);
    for (double& x : scaled) x *= k;
    const auto a = normalize_flat("a", raw).values;
    const auto b = normalize_flat("a", scaled).values;
    for (std::size_t i = 0; i < a.size(); ++i) scale_gap = std::max(scale_gap, std::abs(a[i] - b[i]));
  }
  o.require(scale_gap <= 1e-9, "scale invariance");
  o.detail << "queries=" << checked << " largest=5000x4096 scale_gap=" << scale_gap;
}

void bias_reduction(Outcome& o) {
  const json cfg = resolve_config(json{{"bias", {{"beta_truth", 0.45}, {"beta_pair", 0.45}, {"epsilon_noise", 0.1}}}});
  const BiasedScorerParams params = bias_from_json(cfg);
  const std::vector<SmoothingConfig> configs{SmoothingConfig::defaults(1), SmoothingConfig::defaults(2),
                                             SmoothingConfig::defaults(4)};
  const auto seeds = experiment_seeds(100);
  std::vector<double> acc(configs.size(), 0.0);
  double baseline = 0.0;
  std::size_t m4_wins = 0;
  for (auto seed : seeds) {
    json wc = cfg;
    wc["seed"] = seed;
    const auto world = world_from_json(wc);
    const auto rep = run_bias_experiment(world, params, configs, world.queries.size(), seed);
    for (std::size_t c = 0; c < configs.size(); ++c) acc[c] += rep.results[c].accuracy;
    baseline += rep.results[0].baseline_accuracy;
    m4_wins += rep.results[2].accuracy > rep.results[2].baseline_accuracy;
  }
  const double n = static_cast<double>(seeds.size());
  for (double& a : acc) a /= n;
  baseline /= n;
  o.require(acc[2] > baseline, "m=4 must beat the single-pair baseline");
  o.require(acc[1] > acc[0], "m=2 must beat m=1");
  o.detail << "seeds=100 tau=1 alpha=1 k=min(5,m) | baseline=" << baseline << " m1=" << acc[0] << " m2=" << acc[1]
           << " m4=" << acc[2] << " | margin(m4-base)=" << acc[2] - baseline << " margin(m2-m1)=" << acc[1] - acc[0]
           << " seeds_m4_better=" << m4_wins;
}

void metric_correctness(Outcome& o) {
  using Mask = std::vector<std::uint8_t>;
  using Tok = std::vector<std::uint32_t>;
  o.require(iou(Mask{1, 0, 1}, Mask{1, 0, 1}) == 1.0, "iou identical");
  o.require(iou(Mask{1, 1, 0, 0}, Mask{1, 0, 0, 0}) == 0.5, "iou 0.5");
  o.require(iou(Mask{1, 0}, Mask{0, 1}) == 0.0, "iou disjoint");
  o.require(mse(std::vector<double>{0.2, 0.4}, std::vector<double>{0.2, 0.4}) == 0.0, "mse identical");
  o.require(mse(std::vector<double>{0, 0}, std::vector<double>{1, 1}) == 1.0, "mse 1.0");
  o.require(mse(std::vector<double>{0.5}, std::vector<double>{0}) == 0.25, "mse 0.25");
  o.require(pixel_accuracy(Tok{1, 2}, Tok{1, 2}) == 1.0, "acc all");
  o.require(pixel_accuracy(Tok{1, 2, 3, 4}, Tok{1, 2, 0, 0}) == 0.5, "acc half");
  Tok pred(16, 0);
  Tok gt(16, 1);
  gt[0] = gt[5] = gt[9] = 0;
  o.require(pixel_accuracy(pred, gt) == 0.1875, "acc 3/16");

  Rng rng(606, Stream::kTest, 0);
  double worst = 0.0;
  for (int t = 0; t < 1000; ++t) {
    EvalReport r;
    long double exact = 0;
    const std::size_t n = 1 + rng.below(2000);
    for (std::size_t i = 0; i < n; ++i) {
      const double v = rng.uniform();
      r.add(std::to_string(i), v);
      exact += v;
    }
    r.finalize();
    worst = std::max(worst, std::abs(r.aggregate - static_cast<double>(exact / n)));
  }
  o.require(worst <= 1e-12, "mean aggregation");
  o.detail << "hand examples=9 exact, mean_gap=" << worst;
}

void reproducibility(Outcome& o) {
  for (const char* mode : {"q", "rand"}) {
    const json cfg{{"seed", 11}, {"pool", {{"mode", mode}, {"seed", 3}}}};
    o.require(run_pipeline(cfg).dump() == run_pipeline(cfg).dump(), std::string("report differs, mode ") + mode);
  }

  Rng rng(707, Stream::kTest, 0);
  const auto dir = fs::temp_directory_path() / "panicl_acceptance_tensor";
  fs::create_directories(dir);
  int tensors = 0;
  for (int t = 0; t < 200; ++t) {
    std::vector<std::uint64_t> dims{1 + rng.below(40), 1 + rng.below(40)};
    std::vector<float> v(dims[0] * dims[1]);
    // Arbitrary bit patterns, NaN payloads and signed zeros included.
    for (float& x : v) x = std::bit_cast<float>(static_cast<std::uint32_t>(rng.bits()));
    const Tensor a = Tensor::from_f32(dims, v, {{"trial", t}});
    write_tensor(a, dir / "t.pncl");
    const Tensor b = read_tensor(dir / "t.pncl");
    const bool same = b.dims == a.dims && b.sidecar == a.sidecar &&
                      std::memcmp(b.f32.data(), a.f32.data(), v.size() * sizeof(float)) == 0 &&
                      encode_tensor(b) == read_file_bytes(dir / "t.pncl");
    o.require(same, "tensor round trip");
    ++tensors;
  }
  o.detail << "pipeline reports byte-identical (q, rand); tensors round-tripped bitwise=" << tensors;
}

void non_reproducibility_statement(Outcome& o) {
  std::cout << "  Statement: absolute benchmark numbers (segmentation mIoU, colorization MSE, detection\n"
               "  scores) of pretrained masked-image models on real datasets need those checkpoints and are\n"
               "  NOT reproduced here. The file-import backend runs the same retrieval, pooling, k-NN\n"
               "  smoothing and decoding on exported score tensors; no check in this suite loads a checkpoint.\n";
  // The import path, driven by tensors exported from the synthetic world,
  // must agree with the in-process backend item by item.
  const json synth_cfg = resolve_config(json{{"seed", 5}, {"world", {{"items", 60}}}});
  const auto world = world_from_json(synth_cfg);
  const auto dir = fs::temp_directory_path() / "panicl_acceptance_export";
  const json file_cfg = panicl::testing::export_world(world, bias_from_json(synth_cfg), dir, 4);
  const auto synth = run_pipeline(synth_cfg);
  const auto file = run_pipeline(file_cfg);
  o.require(file.at("retrievals") == synth.at("retrievals"), "retrievals differ");
  o.require(file.at("rows").size() == synth.at("rows").size(), "row count");
  for (std::size_t i = 0; i < synth.at("rows").size(); ++i) {
    o.require(file.at("rows")[i].at("per_item") == synth.at("rows")[i].at("per_item"), "per-item metrics differ");
  }
  o.require(fs::exists(dir / "tokens.pncl"), "token output for external decoding");
  for (const auto& f : {"index", "queries", "scores"}) {
    o.require(file_cfg.at("file").at(f).get<std::string>().find(dir.string()) == 0, "inputs come from the export");
  }
  o.detail << "file-import path reproduces the in-process pipeline on " << world.queries.size()
           << " exported queries; no external checkpoints used";
}

}  // namespace

int main() {
  std::cout << "panicl acceptance suite\n";
  criterion("divergence-correctness", divergence_correctness);
  criterion("oracle-equivalence", oracle_equivalence);
  criterion("algebraic-identities", algebraic_identities);
  criterion("retrieval-exactness", retrieval_exactness);
  criterion("bias-reduction", bias_reduction);
  criterion("metric-correctness", metric_correctness);
  criterion("reproducibility", reproducibility);
  criterion("non-reproducibility-statement", non_reproducibility_statement);
  std::cout << (failures == 0 ? "ALL CRITERIA PASSED" : std::to_string(failures) + " CRITERIA FAILED") << "\n";
  return failures == 0 ? 0 : 1;
}
