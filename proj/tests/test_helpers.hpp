#pragma once

// Random instance generators shared by the unit tests and the acceptance
// binary. Everything draws from panicl::Rng so failures replay by seed.

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "panicl/panicl.hpp"

namespace panicl::testing {

/// Dirichlet-ish vector: exponential draws, with an optional share of exact zeros.
inline std::vector<double> random_probs(Rng& rng, std::size_t n, double zero_chance = 0.0) {
  std::vector<double> w(n);
  double total = 0.0;
  for (double& x : w) {
    x = rng.bernoulli(zero_chance) ? 0.0 : -std::log(1.0 - rng.uniform());
    total += x;
  }
  if (total <= 0.0) {
    w[rng.below(n)] = 1.0;
    total = 1.0;
  }
  for (double& x : w) x /= total;
  return w;
}

inline CodebookDistribution random_distribution(Rng& rng, std::size_t n, double zero_chance = 0.0) {
  return CodebookDistribution::normalized(std::span<const double>(random_probs(rng, n, zero_chance)));
}

inline std::vector<double> random_vector(Rng& rng, std::size_t n, double scale = 1.0) {
  std::vector<double> v(n);
  for (double& x : v) x = scale * rng.normal();
  return v;
}

struct RandomInstance {
  ScoreGrid query;
  PromptPool pool;
};

/// A query grid plus a q-mode-shaped pool of `width` prompts, with feature
/// and patch keys attached.
inline RandomInstance random_instance(Rng& rng, std::size_t L, std::size_t V, std::size_t width,
                                      std::size_t feature_dim = 4, double zero_chance = 0.0) {
  auto make_grid = [&] {
    ScoreGrid g;
    for (std::size_t l = 0; l < L; ++l) {
      g.distributions.push_back(random_distribution(rng, V, zero_chance));
      g.features.push_back(random_vector(rng, feature_dim));
      // Coarse patch keys so exact distance ties actually occur.
      g.patches.push_back({static_cast<double>(rng.below(4)) / 3.0});
    }
    g.prompt.region = {L, 1};
    return g;
  };
  RandomInstance inst;
  inst.query = make_grid();
  std::vector<ScoreGrid> grids;
  std::vector<std::size_t> index;
  for (std::size_t i = 0; i < width; ++i) {
    grids.push_back(make_grid());
    index.push_back(i + 1);
  }
  inst.pool = assemble_pool(std::move(grids), std::move(index), AnchorMode::kQuery, width);
  return inst;
}

/// Largest elementwise gap between two row sets.
inline double max_abs_gap(const std::vector<CodebookDistribution>& a, const std::vector<std::vector<double>>& b) {
  double worst = 0.0;
  for (std::size_t l = 0; l < a.size(); ++l) {
    for (std::size_t j = 0; j < a[l].size(); ++j) worst = std::max(worst, std::abs(a[l][j] - b[l][j]));
  }
  return worst;
}

/// A scorer that returns fixed grids keyed by prompt anchor and pair.
class TableScorer final : public ScorerBackend {
 public:
  explicit TableScorer(std::size_t codebook) : codebook_(codebook) {}

  ScoreGrid score(const PromptSpec& p) const override {
    ScoreGrid g;
    // Deterministic in the prompt: seed from a hash of the three ids.
    const std::uint64_t h = std::hash<std::string>{}(p.input + "|" + p.output + "|" + p.anchor);
    Rng rng(h, Stream::kTest, 0);
    for (std::size_t l = 0; l < p.patch_count(); ++l) g.distributions.push_back(random_distribution(rng, codebook_));
    return g;
  }
  std::size_t codebook_size() const override { return codebook_; }

 private:
  std::size_t codebook_;
};

/// Writes a synthetic world in the file-backend layout: support and query
/// feature files, one score tensor per prompt the q-mode pipeline can ask
/// for, and ground-truth tokens. Returns the matching pipeline config.
inline nlohmann::json export_world(const SyntheticWorld& world, const BiasedScorerParams& params,
                                   const std::filesystem::path& dir, std::size_t m) {
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir / "scores");
  std::vector<FeatureMap> support, queries;
  for (std::size_t i : world.support) support.push_back(world.items[i].features);
  for (std::size_t i : world.queries) queries.push_back(world.items[i].features);
  write_feature_file(support, dir / "index.pncl");
  write_feature_file(queries, dir / "queries.pncl");

  std::vector<std::uint32_t> gt;
  std::vector<std::string> ids;
  for (std::size_t qi : world.queries) {
    const auto& q = world.items[qi];
    for (std::size_t si : world.support) {
      const auto& x = world.items[si];
      const PromptSpec p{x.id, x.id, q.id, world.grid};
      write_score_grid(synthetic_score(world, params, p), dir / "scores" / FileScorer::file_name(p));
    }
    gt.insert(gt.end(), q.output.begin(), q.output.end());
    ids.push_back(q.id);
  }
  write_tensor(Tensor::from_u32({ids.size(), world.patch_count()}, gt, {{"ids", ids}}), dir / "gt.pncl");

  nlohmann::json cfg{{"backend", "file"}, {"m", m}};
  cfg["file"] = {{"index", (dir / "index.pncl").string()},
                 {"queries", (dir / "queries.pncl").string()},
                 {"scores", (dir / "scores").string()},
                 {"gt", (dir / "gt.pncl").string()},
                 {"tokens_out", (dir / "tokens.pncl").string()},
                 {"codebook", world.codebook.size},
                 {"rows", world.grid.rows},
                 {"cols", world.grid.cols}};
  return cfg;
}

}  // namespace panicl::testing
