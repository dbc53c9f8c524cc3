#pragma once

#include <cstddef>
#include <cstdint>
#include <string>

#include "deviant/feature_store.hpp"
#include "deviant/tensor.hpp"

namespace deviant {

// Synthetic feature world: every grid cell has a base pattern (one of
// n_patterns unit vectors); normal patches add Gaussian nuisance inside a
// nuisance_dim subspace plus isotropic noise; anomalous patches are further
// shifted by offset along one of D planted directions. Directions and the
// nuisance subspace are mutually orthonormal.
struct SynthWorldSpec {
    std::size_t channels = 64;
    std::size_t grid = 8;
    std::size_t n_normal_images = 200;
    std::size_t n_abnormal_images = 60;
    std::size_t train_normal_images = 200;
    std::size_t train_abnormal_images = 60;
    std::size_t nuisance_dim = 4;
    double nuisance_amplitude = 0.15;
    // Per-patch chance that the nuisance amplitude is multiplied by outlier_scale.
    double outlier_prob = 0.0;
    double outlier_scale = 5.0;
    double iso_noise = 0.03;
    std::size_t n_dirs = 3;
    double offset = 0.5;
    double anomaly_fraction = 0.12;
    std::size_t n_patterns = 4;
    std::uint64_t seed = 0;

    void validate() const;
    std::size_t n_patches() const { return grid * grid; }
};

struct SynthWorld {
    FeatureSet train;
    FeatureSet test;
    Tensor<double> directions;  // D x C, orthonormal rows
    Tensor<double> nuisance;    // nuisance_dim x C, orthonormal rows
    Tensor<double> patterns;    // n_patterns x C
    std::vector<std::size_t> cell_pattern;
};

// Anomaly-type tag for planted direction d.
std::string direction_tag(std::size_t d);

SynthWorld generate_world(const SynthWorldSpec& spec);

// Principal angles (radians, ascending) between the column spans of
// orthonormal C x p and C x q matrices.
std::vector<double> principal_angles(const Tensor<double>& a, const Tensor<double>& b);

// For each planted direction (rows of `directions`) the token with the largest
// |cosine| to it; the chosen tokens are orthonormalized and compared with the
// directions by principal_angles. Returns the angles (radians, ascending).
std::vector<double> token_alignment(const Tensor<float>& tokens, const Tensor<double>& directions,
                                    std::vector<std::size_t>* chosen = nullptr);

}  // namespace deviant
