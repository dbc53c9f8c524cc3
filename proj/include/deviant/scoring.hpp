#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "deviant/autodiff.hpp"
#include "deviant/feature_store.hpp"
#include "deviant/ide.hpp"
#include "deviant/nve.hpp"
#include "deviant/tensor.hpp"
#include "deviant/vector_ops.hpp"

namespace deviant {

// Which parts of the pipeline take part in scoring.
//   Full          NVE + learned deviation bank
//   IdeOnly       learned bank over raw residuals (alpha = 0)
//   NveOnly       denoised deviations, bank = mean masked reference deviation
//   MatchingOnly  1/2 (max cosine to masked reference patches + normal distance)
enum class ScoringMode { Full, IdeOnly, NveOnly, MatchingOnly };
enum class Upsample { Bilinear, Nearest };

std::string to_string(ScoringMode m);
ScoringMode scoring_mode_from_string(const std::string& s);
std::string to_string(Upsample u);
Upsample upsample_from_string(const std::string& s);

inline constexpr double kTinyTokenNorm2 = 1e-12;

// Sum of rank-1 projections of f onto each bank row; rows with squared norm
// below 1e-12 contribute nothing.
template <typename T>
std::vector<T> project(std::span<const T> f, const Tensor<T>& bank) {
    if (bank.rank() != 2 || bank.shape[1] != f.size()) throw DimensionError("project: bank/vector width mismatch");
    const std::size_t m = bank.shape[0], c = f.size();
    std::vector<T> out(c, T(0));
    for (std::size_t t = 0; t < m; ++t) {
        auto row = bank.row(t);
        const T nn = dot<T>(row, row);
        if (nn < T(kTinyTokenNorm2)) continue;
        const T coef = dot<T>(f, row) / nn;
        for (std::size_t j = 0; j < c; ++j) out[j] += coef * row[j];
    }
    return out;
}

// clamp(1/2 (cos(f_den, f_proj) + d_cos(f_q, f_nearest_normal)), 0, 1).
template <typename T>
T patch_score(std::span<const T> f_den, std::span<const T> f_proj, std::span<const T> f_q,
              std::span<const T> f_nearest) {
    const T raw = T(0.5) * (cosine<T>(f_den, f_proj) + cosine_distance<T>(f_q, f_nearest));
    return std::clamp(raw, T(0), T(1));
}

// Number of patches averaged into the image score: ceil(N / 100).
std::size_t top_fraction_count(std::size_t n);

// Mean of the ceil(N/100) largest patch scores.
double image_score(std::span<const float> patch_scores);

// Bilinear (corner-aligned) or nearest resampling of a g x g map to H x W.
std::vector<float> upsample_map(std::span<const float> grid_scores, std::size_t grid, std::size_t height,
                                std::size_t width, Upsample mode = Upsample::Bilinear);

struct ScoreMap {
    std::size_t grid = 0;
    std::size_t height = 0;
    std::size_t width = 0;
    std::vector<float> patch_scores;
    std::vector<float> pixel_map;
    float image_score = 0;

    bool operator==(const ScoreMap&) const = default;
};

struct ScoringConfig {
    NveConfig nve;
    ScoringMode mode = ScoringMode::Full;
    Upsample upsample = Upsample::Bilinear;
    std::size_t height = 0;  // 0: grid * 14
    std::size_t width = 0;
};

// Per-patch intermediate vectors of one scored query.
struct ScoreDetail {
    ScoreMap map;
    Tensor<float> residuals;
    Tensor<float> denoised;
    Tensor<float> projected;
    std::vector<double> normal_distance;
};

// Differentiable patch scores (N x 1) of query deviations against a bank.
template <typename T>
Var score_patches_graph(Tape<T>& tape, Var bank, const Tensor<T>& query_deviations,
                        std::span<const double> normal_distance);

// Fixed references of one manifest (or episode) with everything that does not
// depend on the query precomputed: the normal pool, the reference deviations
// and the bank.
class ReferenceContext {
public:
    ReferenceContext(const FeatureSet& dataset, std::span<const std::size_t> normal_ids,
                     std::span<const std::size_t> abnormal_ids, const Checkpoint* checkpoint,
                     const ScoringConfig& cfg);
    ReferenceContext(const FeatureSet& dataset, const EpisodeManifest& manifest, const Checkpoint* checkpoint,
                     const ScoringConfig& cfg);

    ScoreMap score(std::span<const float> query) const;
    ScoreDetail score_detail(std::span<const float> query) const;

    const Tensor<float>& bank() const { return bank_; }
    const ScoringConfig& config() const { return cfg_; }
    // FNV-1a over the reference feature bytes and masks.
    std::uint64_t reference_checksum() const { return checksum_; }

private:
    ScoringConfig cfg_;
    std::size_t n_patches_ = 0;
    std::size_t channels_ = 0;
    std::size_t grid_ = 0;
    std::optional<NormalPool> pool_;
    Tensor<float> masked_refs_;  // raw masked abnormal-reference patches (matching-only)
    Tensor<float> bank_;
    std::uint64_t checksum_ = 0;
};

// Scores the query of an episode against that episode's references.
ScoreMap score_episode(const FeatureSet& dataset, const Episode& episode, const Checkpoint* checkpoint,
                       const ScoringConfig& cfg);

// "IDSM" export: magic, H, W, N (u32), H*W f32 pixel map, N f32 patch scores,
// f32 image score.
std::vector<std::uint8_t> encode_score_map(const ScoreMap& m);
ScoreMap decode_score_map(std::span<const std::uint8_t> bytes);
void write_score_map(const std::filesystem::path& path, const ScoreMap& m);
ScoreMap read_score_map(const std::filesystem::path& path);

// Per-patch residual, denoised and projected vectors of scored queries.
// "IDDV": magic, u32 version, u64 rows, u32 C, then per row u32 image id,
// u32 patch index and 3*C f32 (res | den | proj).
struct DeviationExport {
    std::size_t channels = 0;
    std::vector<std::uint32_t> image_ids;
    std::vector<std::uint32_t> patch_ids;
    std::vector<float> rows;  // image_ids.size() x 3C

    std::size_t size() const { return image_ids.size(); }
    void append(std::size_t image_id, const ScoreDetail& detail);
    bool operator==(const DeviationExport&) const = default;
};

std::vector<std::uint8_t> encode_deviation_export(const DeviationExport& e);
DeviationExport decode_deviation_export(std::span<const std::uint8_t> bytes);
void write_deviation_export(const std::filesystem::path& path, const DeviationExport& e);
DeviationExport read_deviation_export(const std::filesystem::path& path);

// Lines "image_id<TAB>image_score".
std::string format_score_table(std::span<const std::size_t> ids, std::span<const float> scores);
std::vector<std::pair<std::size_t, float>> parse_score_table(const std::string& text);

}  // namespace deviant
