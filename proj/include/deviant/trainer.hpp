#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "deviant/autodiff.hpp"
#include "deviant/feature_store.hpp"
#include "deviant/ide.hpp"
#include "deviant/nve.hpp"
#include "deviant/optim.hpp"
#include "deviant/scoring.hpp"

namespace deviant {

struct TrainConfig {
    std::size_t epochs = 20;
    std::size_t warmup_epochs = 2;
    std::size_t batch_size = 16;
    std::size_t queries_per_epoch = 500;
    bool fixed_query_set = false;
    ShotCounts shots;
    std::uint64_t seed = 0;
    DualLossWeights dual;
    double focal_alpha = 0.25;
    double focal_gamma = 2.0;
    double dice_eps = 1e-5;
    double bce_eps = 1e-6;
    double base_lr = 1e-3;
    double warmup_start_lr = 1e-5;
    double floor_fraction = 0.01;
    AdamWConfig adamw;
    NveConfig nve;
    IdeConfig ide;
    ScoringMode mode = ScoringMode::Full;  // Full or IdeOnly

    std::size_t steps_per_epoch() const { return (queries_per_epoch + batch_size - 1) / batch_size; }
    LrSchedule schedule() const;
    void validate() const;
};

// Mean over patches of -a_t (1 - p_t)^gamma log p_t with p_t = A on anomalous
// and 1 - A on normal patches, clamped to [eps, 1 - eps].
template <typename T>
Var focal_loss(Tape<T>& tape, Var scores, std::span<const std::uint8_t> mask, double alpha, double gamma, double eps);

// 1 - (2 sum(A M) + eps) / (sum A + sum M + eps).
template <typename T>
Var dice_loss(Tape<T>& tape, Var scores, std::span<const std::uint8_t> mask, double eps);

// -(y log p + (1 - y) log(1 - p)), p clamped to [eps, 1 - eps].
template <typename T>
Var bce_loss(Tape<T>& tape, Var score, std::uint8_t label, double eps);

double focal_loss_value(std::span<const double> scores, std::span<const std::uint8_t> mask, double alpha,
                        double gamma, double eps);
double dice_loss_value(std::span<const double> scores, std::span<const std::uint8_t> mask, double eps);
double bce_loss_value(double score, std::uint8_t label, double eps);

// Everything an episode contributes to the loss that does not depend on the
// learnable parameters (NVE outputs are constants).
template <typename T>
struct PreparedEpisode {
    Tensor<T> ref_features;            // L2*N x C
    Tensor<T> ref_values;              // denoised (or raw) reference deviations
    std::vector<std::uint8_t> ref_mask;
    std::size_t grid = 0;
    Tensor<T> query_deviations;        // N x C
    std::vector<double> normal_distance;
    std::vector<std::uint8_t> query_mask;
    std::uint8_t label = 0;

    template <typename U>
    PreparedEpisode<U> cast() const {
        return {ref_features.template cast<U>(), ref_values.template cast<U>(), ref_mask, grid,
                query_deviations.template cast<U>(), normal_distance, query_mask, label};
    }
};

PreparedEpisode<float> prepare_episode(const FeatureSet& pool, const Episode& ep, const NveConfig& nve,
                                       ScoringMode mode);

struct LossTerms {
    double focal = 0;
    double dice = 0;
    double bce = 0;
    double dual = 0;
    double total = 0;
};

template <typename T>
struct EpisodeGraph {
    Var total, focal, dice, bce, dual;
    Var patch_scores, image_score, deviations;
    LossTerms values(const Tape<T>& tape) const;
};

// Builds focal + dice + bce + dual for one episode on `tape`.
template <typename T>
EpisodeGraph<T> episode_loss(Tape<T>& tape, const IdeVars<T>& vars, const PreparedEpisode<T>& ep,
                             const TrainConfig& cfg, bool train, Rng* rng);

struct StepRecord {
    std::size_t step = 0;
    double lr = 0;
    LossTerms loss;  // averaged over the batch
};

struct TrainResult {
    Checkpoint checkpoint;
    std::vector<StepRecord> trace;
};

// The parameters train() starts from.
IdeParams<float> initial_parameters(const TrainConfig& cfg);

// Episodic training from freshly initialized parameters.
TrainResult train(const FeatureSet& pool, const TrainConfig& cfg,
                  const std::function<void(const StepRecord&)>& on_step = {});

// "step\tlr\tL_focal\tL_dice\tL_bce\tL_dual\tL_total" lines.
std::string format_loss_trace(std::span<const StepRecord> trace);

// Scores every query of the manifest against its fixed references.
std::vector<std::pair<std::size_t, ScoreMap>> infer(const FeatureSet& dataset, const EpisodeManifest& manifest,
                                                    const Checkpoint* checkpoint, const ScoringConfig& cfg);
std::vector<std::pair<std::size_t, ScoreMap>> infer(const FeatureSet& dataset, const EpisodeManifest& manifest,
                                                    std::span<const std::size_t> queries,
                                                    const Checkpoint* checkpoint, const ScoringConfig& cfg);

// Derives an independent 64-bit seed from a base seed and a stream tag.
std::uint64_t derive_seed(std::uint64_t base, std::uint64_t stream, std::uint64_t index = 0);

}  // namespace deviant
