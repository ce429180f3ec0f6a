#pragma once

// Symbolic prompt canvases, the scorer interface that turns a canvas into
// per-patch assignment scores, and prompt-pool construction.

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <memory>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "panicl/divergence.hpp"
#include "panicl/errors.hpp"
#include "panicl/retriever.hpp"
#include "panicl/rng.hpp"
#include "panicl/tensor_io.hpp"

namespace panicl {

struct PatchGrid {
  std::size_t rows = 1;
  std::size_t cols = 1;

  std::size_t count() const noexcept { return rows * cols; }
  friend bool operator==(const PatchGrid&, const PatchGrid&) = default;
};

/// The canvas [x, y, anchor, blank]: an in-context pair, the image placed in
/// the query cell, and the masked region split into `region` patches.
struct PromptSpec {
  std::string input;
  std::string output;
  std::string anchor;
  PatchGrid region;

  std::size_t patch_count() const noexcept { return region.count(); }
  friend bool operator==(const PromptSpec&, const PromptSpec&) = default;
};

inline nlohmann::json to_json(const PromptSpec& p) {
  return {{"input", p.input}, {"output", p.output}, {"anchor", p.anchor}, {"rows", p.region.rows},
          {"cols", p.region.cols}};
}

inline PromptSpec prompt_from_json(const nlohmann::json& j) {
  return {j.at("input").get<std::string>(), j.at("output").get<std::string>(), j.at("anchor").get<std::string>(),
          {j.at("rows").get<std::size_t>(), j.at("cols").get<std::size_t>()}};
}

/// Assignment scores for every patch of one prompt. `features` and `patches`
/// are optional per-patch key vectors (empty when the backend has none).
struct ScoreGrid {
  std::vector<CodebookDistribution> distributions;
  std::vector<std::vector<double>> features;
  std::vector<std::vector<double>> patches;
  PromptSpec prompt;

  std::size_t size() const noexcept { return distributions.size(); }
  std::size_t codebook_size() const noexcept { return distributions.empty() ? 0 : distributions.front().size(); }
  friend bool operator==(const ScoreGrid&, const ScoreGrid&) = default;
};

/// Stands in for the masked-image model: canvas in, per-patch scores out.
/// Implementations must be deterministic in the prompt.
class ScorerBackend {
 public:
  virtual ~ScorerBackend() = default;
  virtual ScoreGrid score(const PromptSpec& prompt) const = 0;
  virtual std::size_t codebook_size() const = 0;
};

inline void check_key_rows(const std::vector<std::vector<double>>& rows, std::size_t patches, const char* what) {
  if (rows.empty()) return;
  require_same_size(rows.size(), patches, what);
  for (const auto& r : rows) require_same_size(r.size(), rows.front().size(), what);
}

inline ScoreGrid score_prompt(const ScorerBackend& backend, const PromptSpec& prompt) {
  if (prompt.patch_count() == 0) throw ConfigError("prompt region must have at least one patch");
  ScoreGrid grid = backend.score(prompt);
  require_same_size(grid.size(), prompt.patch_count(), "score grid patches");
  for (const auto& d : grid.distributions) require_same_size(d.size(), backend.codebook_size(), "score grid codebook");
  check_key_rows(grid.features, grid.size(), "score grid features");
  check_key_rows(grid.patches, grid.size(), "score grid patch keys");
  grid.prompt = prompt;
  return grid;
}

enum class AnchorMode { kQuery, kRandom, kSequential, kSelf };

inline const char* to_string(AnchorMode m) {
  switch (m) {
    case AnchorMode::kQuery: return "q";
    case AnchorMode::kRandom: return "rand";
    case AnchorMode::kSequential: return "seq";
    case AnchorMode::kSelf: return "self";
  }
  return "?";
}

inline std::optional<AnchorMode> parse_anchor_mode(const std::string& s) {
  if (s == "q") return AnchorMode::kQuery;
  if (s == "rand") return AnchorMode::kRandom;
  if (s == "seq") return AnchorMode::kSequential;
  if (s == "self") return AnchorMode::kSelf;
  return std::nullopt;
}

/// Where a pool entry came from: `index` is the 1-based position in the
/// retrieved set of the item that varies across prompts (the pair for
/// q/self, the anchor for seq/rand); `patch` is the 0-based patch index.
struct Provenance {
  std::size_t index = 0;
  std::size_t patch = 0;
  std::size_t prompt = 0;  // position in PromptPool::prompts

  friend bool operator==(const Provenance&, const Provenance&) = default;
};

/// Candidates for one patch (or, after merging, for all patches).
struct PoolSlot {
  std::vector<CodebookDistribution> scores;
  std::vector<std::vector<double>> features;
  std::vector<std::vector<double>> patches;
  std::vector<Provenance> sources;

  std::size_t size() const noexcept { return scores.size(); }
  friend bool operator==(const PoolSlot&, const PoolSlot&) = default;
};

struct PromptPool {
  std::vector<PoolSlot> per_patch;
  std::vector<PromptSpec> prompts;
  AnchorMode mode = AnchorMode::kQuery;
  std::size_t m = 0;  // retrieved-set size the pool was built from

  std::size_t patch_count() const noexcept { return per_patch.size(); }
  std::size_t width() const noexcept { return per_patch.empty() ? 0 : per_patch.front().size(); }
  bool has_features() const noexcept { return !per_patch.empty() && !per_patch.front().features.empty(); }
  bool has_patches() const noexcept { return !per_patch.empty() && !per_patch.front().patches.empty(); }
  friend bool operator==(const PromptPool&, const PromptPool&) = default;
};

/// Groups per-prompt score grids into per-patch slots.
inline PromptPool assemble_pool(std::vector<ScoreGrid> grids, std::vector<std::size_t> varying_index,
                                AnchorMode mode, std::size_t m) {
  PromptPool pool;
  pool.mode = mode;
  pool.m = m;
  if (grids.empty()) return pool;
  const std::size_t patches = grids.front().size();
  const bool features = !grids.front().features.empty();
  const bool patch_keys = !grids.front().patches.empty();
  pool.per_patch.resize(patches);
  for (std::size_t g = 0; g < grids.size(); ++g) {
    auto& grid = grids[g];
    require_same_size(grid.size(), patches, "pool grids");
    if (features != !grid.features.empty() || patch_keys != !grid.patches.empty()) {
      throw DimensionError("pool grids disagree on which key tensors they carry");
    }
    for (std::size_t l = 0; l < patches; ++l) {
      auto& slot = pool.per_patch[l];
      slot.scores.push_back(std::move(grid.distributions[l]));
      if (features) slot.features.push_back(std::move(grid.features[l]));
      if (patch_keys) slot.patches.push_back(std::move(grid.patches[l]));
      slot.sources.push_back({varying_index[g], l, g});
    }
    pool.prompts.push_back(std::move(grid.prompt));
  }
  return pool;
}

/// Builds the per-patch prompt pool from the retrieved pairs.
///   q    : [x_i, y_i, x_q] for i = 1..m
///   self : [x_i, y_i, x_i] for i = 1..m
///   seq  : [x_1, y_1, x_i] for i = 2..m
///   rand : [x_1, y_1, x_a] for m - 1 anchors drawn without replacement from x_1..x_m
/// Items are identified by one id for both the input and its ground truth.
inline PromptPool build_pool(const ScorerBackend& backend, const RetrievedSet& retrieved, const std::string& query,
                             AnchorMode mode, PatchGrid region, std::optional<std::uint64_t> seed = std::nullopt) {
  const std::size_t m = retrieved.size();
  if (m == 0) throw ConfigError("build_pool needs at least one retrieved pair");
  if ((mode == AnchorMode::kSequential || mode == AnchorMode::kRandom) && m < 2) {
    throw ConfigError(std::string("anchor mode '") + to_string(mode) + "' needs m >= 2");
  }
  if (mode == AnchorMode::kRandom && !seed) throw ConfigError("anchor mode 'rand' needs a seed");

  std::vector<PromptSpec> prompts;
  std::vector<std::size_t> varying;
  const auto& first = retrieved[0].id;
  switch (mode) {
    case AnchorMode::kQuery:
      for (std::size_t i = 0; i < m; ++i) {
        prompts.push_back({retrieved[i].id, retrieved[i].id, query, region});
        varying.push_back(i + 1);
      }
      break;
    case AnchorMode::kSelf:
      for (std::size_t i = 0; i < m; ++i) {
        prompts.push_back({retrieved[i].id, retrieved[i].id, retrieved[i].id, region});
        varying.push_back(i + 1);
      }
      break;
    case AnchorMode::kSequential:
      for (std::size_t i = 1; i < m; ++i) {
        prompts.push_back({first, first, retrieved[i].id, region});
        varying.push_back(i + 1);
      }
      break;
    case AnchorMode::kRandom: {
      Rng rng(*seed, Stream::kPoolAnchor, 0);
      std::vector<std::size_t> order(m);
      for (std::size_t i = 0; i < m; ++i) order[i] = i;
      // Partial Fisher-Yates: the first m - 1 slots are the draw.
      for (std::size_t i = 0; i + 1 < m; ++i) {
        const std::size_t j = i + static_cast<std::size_t>(rng.below(m - i));
        std::swap(order[i], order[j]);
      }
      for (std::size_t i = 0; i + 1 < m; ++i) {
        prompts.push_back({first, first, retrieved[order[i]].id, region});
        varying.push_back(order[i] + 1);
      }
      break;
    }
  }

  std::vector<ScoreGrid> grids;
  grids.reserve(prompts.size());
  for (const auto& p : prompts) grids.push_back(score_prompt(backend, p));
  return assemble_pool(std::move(grids), std::move(varying), mode, m);
}

/// Union of every patch's candidates, concatenated patch by patch.
inline PoolSlot merge_all_patches(const PromptPool& pool) {
  PoolSlot flat;
  for (const auto& slot : pool.per_patch) {
    flat.scores.insert(flat.scores.end(), slot.scores.begin(), slot.scores.end());
    flat.features.insert(flat.features.end(), slot.features.begin(), slot.features.end());
    flat.patches.insert(flat.patches.end(), slot.patches.begin(), slot.patches.end());
    flat.sources.insert(flat.sources.end(), slot.sources.begin(), slot.sources.end());
  }
  return flat;
}

/// Inverse of merge_all_patches: regroups by Provenance::patch.
inline std::vector<PoolSlot> group_by_patch(const PoolSlot& flat, std::size_t patches) {
  std::vector<PoolSlot> out(patches);
  for (std::size_t e = 0; e < flat.size(); ++e) {
    const std::size_t l = flat.sources[e].patch;
    if (l >= patches) throw DimensionError("provenance patch index out of range");
    out[l].scores.push_back(flat.scores[e]);
    if (!flat.features.empty()) out[l].features.push_back(flat.features[e]);
    if (!flat.patches.empty()) out[l].patches.push_back(flat.patches[e]);
    out[l].sources.push_back(flat.sources[e]);
  }
  return out;
}

// ---------------------------------------------------------------------------
// File layout for score grids and pools. The main tensor holds the
// distributions; optional key tensors live next to it as
// "<stem>.feature.pncl" and "<stem>.patch.pncl".

inline std::filesystem::path companion_path(const std::filesystem::path& main, const char* key) {
  auto p = main;
  std::string name = p.filename().string();
  const std::string ext = ".pncl";
  if (name.size() > ext.size() && name.compare(name.size() - ext.size(), ext.size(), ext) == 0) {
    name.resize(name.size() - ext.size());
  }
  p.replace_filename(name + "." + key + ".pncl");
  return p;
}

namespace detail {

inline std::vector<float> to_f32(const std::vector<std::vector<double>>& rows) {
  std::vector<float> out;
  for (const auto& r : rows) out.insert(out.end(), r.begin(), r.end());
  return out;
}

inline std::vector<std::vector<double>> rows_from(const Tensor& t, std::size_t offset, std::size_t count,
                                                  std::size_t width) {
  std::vector<std::vector<double>> rows(count);
  for (std::size_t r = 0; r < count; ++r) {
    const auto* base = t.f32.data() + offset + r * width;
    rows[r].assign(base, base + width);
  }
  return rows;
}

inline std::optional<Tensor> read_companion(const std::filesystem::path& main, const char* key) {
  const auto p = companion_path(main, key);
  if (!std::filesystem::exists(p)) return std::nullopt;
  return read_tensor(p);
}

}  // namespace detail

inline void write_score_grid(const ScoreGrid& grid, const std::filesystem::path& path) {
  const std::size_t n = grid.size();
  const std::size_t v = grid.codebook_size();
  std::vector<std::vector<double>> rows;
  for (const auto& d : grid.distributions) rows.push_back(d.probs());
  nlohmann::json meta{{"kind", "score_grid"}, {"prompt", to_json(grid.prompt)}, {"patch_order", "row-major"}};
  write_tensor(Tensor::from_f32({n, v}, detail::to_f32(rows), meta), path);
  if (!grid.features.empty()) {
    write_tensor(Tensor::from_f32({n, grid.features.front().size()}, detail::to_f32(grid.features)),
                 companion_path(path, "feature"));
  }
  if (!grid.patches.empty()) {
    write_tensor(Tensor::from_f32({n, grid.patches.front().size()}, detail::to_f32(grid.patches)),
                 companion_path(path, "patch"));
  }
}

/// Reads an (L, |V|) tensor; rows are renormalized from f32 storage.
inline ScoreGrid read_score_grid(const std::filesystem::path& path) {
  const Tensor t = read_tensor(path);
  if (t.dtype != DType::kF32 || t.rank() != 2) throw FormatError(path.string() + ": score grid must be a rank-2 f32 tensor");
  const auto n = static_cast<std::size_t>(t.dim(0));
  const auto v = static_cast<std::size_t>(t.dim(1));
  ScoreGrid grid;
  for (std::size_t l = 0; l < n; ++l) {
    grid.distributions.push_back(
        CodebookDistribution::normalized(std::span<const float>(t.f32.data() + l * v, v)));
  }
  const auto meta = t.meta();
  if (meta.contains("prompt")) {
    grid.prompt = prompt_from_json(meta.at("prompt"));
  } else {
    grid.prompt.region = {n, 1};
  }
  require_same_size(grid.prompt.patch_count(), n, "score grid prompt region");
  if (auto f = detail::read_companion(path, "feature")) {
    require_same_size(static_cast<std::size_t>(f->dim(0)), n, "feature companion rows");
    grid.features = detail::rows_from(*f, 0, n, static_cast<std::size_t>(f->dim(1)));
  }
  if (auto p = detail::read_companion(path, "patch")) {
    require_same_size(static_cast<std::size_t>(p->dim(0)), n, "patch companion rows");
    grid.patches = detail::rows_from(*p, 0, n, static_cast<std::size_t>(p->dim(1)));
  }
  return grid;
}

/// Pool file: (count, L, |V|) f32, entry-major, with provenance in the sidecar.
inline void write_pool(const PromptPool& pool, const std::filesystem::path& path) {
  const std::size_t L = pool.patch_count();
  const std::size_t count = pool.width();
  if (L == 0 || count == 0) throw ConfigError("refusing to write an empty pool");
  const std::size_t v = pool.per_patch.front().scores.front().size();

  std::vector<float> scores(count * L * v);
  std::vector<float> feats;
  std::vector<float> pats;
  const std::size_t fdim = pool.has_features() ? pool.per_patch.front().features.front().size() : 0;
  const std::size_t pdim = pool.has_patches() ? pool.per_patch.front().patches.front().size() : 0;
  feats.resize(count * L * fdim);
  pats.resize(count * L * pdim);
  nlohmann::json sources = nlohmann::json::array();
  for (std::size_t e = 0; e < count; ++e) {
    sources.push_back({{"index", pool.per_patch.front().sources[e].index},
                       {"prompt", pool.per_patch.front().sources[e].prompt}});
    for (std::size_t l = 0; l < L; ++l) {
      const auto& slot = pool.per_patch[l];
      const auto& d = slot.scores[e].probs();
      std::copy(d.begin(), d.end(), scores.begin() + static_cast<std::ptrdiff_t>((e * L + l) * v));
      if (fdim) std::copy(slot.features[e].begin(), slot.features[e].end(), feats.begin() + static_cast<std::ptrdiff_t>((e * L + l) * fdim));
      if (pdim) std::copy(slot.patches[e].begin(), slot.patches[e].end(), pats.begin() + static_cast<std::ptrdiff_t>((e * L + l) * pdim));
    }
  }
  nlohmann::json prompts = nlohmann::json::array();
  for (const auto& p : pool.prompts) prompts.push_back(to_json(p));
  nlohmann::json meta{{"kind", "prompt_pool"}, {"mode", to_string(pool.mode)}, {"m", pool.m},
                      {"sources", sources}, {"prompts", prompts}};
  write_tensor(Tensor::from_f32({count, L, v}, std::move(scores), meta), path);
  if (fdim) write_tensor(Tensor::from_f32({count, L, fdim}, std::move(feats)), companion_path(path, "feature"));
  if (pdim) write_tensor(Tensor::from_f32({count, L, pdim}, std::move(pats)), companion_path(path, "patch"));
}

inline PromptPool read_pool(const std::filesystem::path& path) {
  const Tensor t = read_tensor(path);
  if (t.dtype != DType::kF32 || t.rank() != 3) throw FormatError(path.string() + ": pool must be a rank-3 f32 tensor");
  const auto count = static_cast<std::size_t>(t.dim(0));
  const auto L = static_cast<std::size_t>(t.dim(1));
  const auto v = static_cast<std::size_t>(t.dim(2));
  const auto meta = t.meta();

  PromptPool pool;
  pool.mode = parse_anchor_mode(meta.value("mode", std::string("q"))).value_or(AnchorMode::kQuery);
  pool.m = meta.value("m", count);
  if (meta.contains("prompts")) {
    for (const auto& p : meta.at("prompts")) pool.prompts.push_back(prompt_from_json(p));
  }
  std::vector<std::size_t> index(count);
  std::vector<std::size_t> prompt(count);
  for (std::size_t e = 0; e < count; ++e) {
    index[e] = e + 1;
    prompt[e] = e;
  }
  if (meta.contains("sources")) {
    require_same_size(meta.at("sources").size(), count, "pool provenance");
    for (std::size_t e = 0; e < count; ++e) {
      index[e] = meta.at("sources")[e].at("index").get<std::size_t>();
      prompt[e] = meta.at("sources")[e].at("prompt").get<std::size_t>();
    }
  }
  const auto feats = detail::read_companion(path, "feature");
  const auto pats = detail::read_companion(path, "patch");
  pool.per_patch.resize(L);
  for (std::size_t l = 0; l < L; ++l) {
    auto& slot = pool.per_patch[l];
    for (std::size_t e = 0; e < count; ++e) {
      slot.scores.push_back(CodebookDistribution::normalized(
          std::span<const float>(t.f32.data() + (e * L + l) * v, v)));
      if (feats) {
        const auto w = static_cast<std::size_t>(feats->dim(2));
        slot.features.push_back(detail::rows_from(*feats, (e * L + l) * w, 1, w).front());
      }
      if (pats) {
        const auto w = static_cast<std::size_t>(pats->dim(2));
        slot.patches.push_back(detail::rows_from(*pats, (e * L + l) * w, 1, w).front());
      }
      slot.sources.push_back({index[e], l, prompt[e]});
    }
  }
  return pool;
}

/// Backend over exported score tensors: one file per prompt, named
/// "<input>__<output>__<anchor>.pncl" inside `dir`, shape (L, |V|).
class FileScorer final : public ScorerBackend {
 public:
  FileScorer(std::filesystem::path dir, std::size_t codebook) : dir_(std::move(dir)), codebook_(codebook) {}

  static std::string file_name(const PromptSpec& p) { return p.input + "__" + p.output + "__" + p.anchor + ".pncl"; }

  ScoreGrid score(const PromptSpec& prompt) const override {
    const auto path = dir_ / file_name(prompt);
    if (!std::filesystem::exists(path)) throw MissingItemError("no exported scores for prompt: " + path.string());
    ScoreGrid grid = read_score_grid(path);
    require_same_size(grid.size(), prompt.patch_count(), "exported score rows vs prompt region");
    grid.prompt = prompt;
    return grid;
  }

  std::size_t codebook_size() const override { return codebook_; }

 private:
  std::filesystem::path dir_;
  std::size_t codebook_;
};

}  // namespace panicl
