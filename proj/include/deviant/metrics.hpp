#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "deviant/feature_store.hpp"
#include "deviant/scoring.hpp"
#include "deviant/tensor.hpp"

namespace deviant {

// All metrics return nullopt when undefined (a required class is empty).

// Mann-Whitney: P(s+ > s-) + 1/2 P(s+ == s-).
std::optional<double> auroc(std::span<const double> scores, std::span<const std::uint8_t> labels);

// Sum over descending-score tie blocks of (R_k - R_{k-1}) * P_k.
std::optional<double> average_precision(std::span<const double> scores, std::span<const std::uint8_t> labels);

// Max F1 over thresholds at every distinct score; positive iff score >= threshold.
std::optional<double> f1_max(std::span<const double> scores, std::span<const std::uint8_t> labels);

struct PixelImage {
    std::size_t height = 0;
    std::size_t width = 0;
    std::span<const float> scores;
    std::span<const std::uint8_t> mask;
};

struct ProConfig {
    double fpr_cap = 0.3;
    std::size_t steps = 100;
};

// 8-connected component labels (1-based, 0 = background) of a binary mask.
std::vector<std::uint32_t> label_components(std::span<const std::uint8_t> mask, std::size_t height, std::size_t width,
                                            std::size_t* count = nullptr);

// Per-region overlap: mean connected-region recall against global FPR,
// integrated (trapezoid) over [0, fpr_cap] and divided by fpr_cap. Thresholds
// are every distinct score when there are at most `steps` of them, else
// `steps` evenly spaced values over the score range. The curve starts at
// (0, 0) and is held flat from its last point at or below the cap.
std::optional<double> pro(std::span<const PixelImage> images, ProConfig cfg = {});

// Mean over anomalous test patches of their largest cosine similarity to any
// masked abnormal-reference patch.
std::optional<double> task_difficulty(const Tensor<float>& ref_features, std::span<const std::uint8_t> ref_mask,
                                      const Tensor<float>& test_features, std::span<const std::uint8_t> test_mask);

struct EvalReport {
    std::string setting;
    std::optional<double> image_auroc;
    std::optional<double> image_ap;
    std::optional<double> image_f1max;
    std::optional<double> pixel_auroc;
    std::optional<double> pixel_pro;
    std::optional<double> pixel_f1max;
    std::optional<double> task_difficulty;
    std::size_t n_images = 0;
    std::size_t n_abnormal = 0;
    std::size_t n_normal = 0;
    std::uint64_t n_anomalous_pixels = 0;
    std::uint64_t n_normal_pixels = 0;
};

// Evaluates scored queries of a dataset. Pixel ground truth is each image's
// patch mask expanded (nearest) to the score map resolution.
EvalReport evaluate(const FeatureSet& dataset, const EpisodeManifest& manifest,
                    std::span<const std::pair<std::size_t, ScoreMap>> scored, ProConfig pro_cfg = {});

// JSON with a fixed key order; undefined metrics are null.
std::string report_to_json(const EvalReport& r);

// "(image_auroc / pixel_auroc)" as percentages with one decimal.
std::string report_summary(const EvalReport& r);

}  // namespace deviant
