#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "deviant/tensor.hpp"

namespace deviant {

struct NveConfig {
    std::size_t k = 12;   // neighbours for the local subspace
    std::size_t r = 4;    // subspace rank
    double alpha = 0.8;   // suppression strength
    void validate() const;
};

struct Neighbor {
    std::size_t index = 0;
    double distance = 0;  // cosine distance
};

// Normal reference patches with their norms cached, so repeated searches over
// one reference set do not renormalize it.
class NormalPool {
public:
    explicit NormalPool(const Tensor<float>& normals);

    std::size_t size() const { return n_; }
    std::size_t channels() const { return c_; }
    std::span<const float> row(std::size_t i) const { return {tensor_.data.data() + i * c_, c_}; }
    const Tensor<float>& features() const { return tensor_; }

    // Cosine distance from f to every pool row.
    std::vector<double> distances(std::span<const float> f) const;

private:
    Tensor<float> tensor_;
    std::vector<double> unit_;  // rows scaled to unit norm (zero rows stay zero)
    std::size_t n_ = 0;
    std::size_t c_ = 0;
};

// Closest pool row by cosine distance; ties go to the lower index.
Neighbor nearest_normal(std::span<const float> f, const NormalPool& pool);
Neighbor nearest_normal(std::span<const float> f, const Tensor<float>& normals);

// The k closest pool rows, ascending by distance then index.
std::vector<std::size_t> topk_neighbors(std::span<const float> f, const NormalPool& pool, std::size_t k);
std::vector<std::size_t> topk_neighbors(std::span<const float> f, const Tensor<float>& normals, std::size_t k);

// Rank-r principal subspace of k neighbour points (k x C), covariance divisor
// k-1. Only directions with eigenvalue above 1e-10 * trace are active and used
// for suppression; the remaining columns complete an orthonormal basis and
// carry eigenvalue 0.
struct LocalSubspace {
    std::size_t channels = 0;
    std::size_t rank = 0;
    std::vector<double> mean;         // C
    std::vector<double> basis;        // C x rank, row-major, orthonormal columns
    std::vector<double> eigenvalues;  // rank, descending, >= 0
    std::size_t active = 0;
    bool degenerate() const { return active < rank; }
    double basis_at(std::size_t c, std::size_t j) const { return basis[c * rank + j]; }
};

LocalSubspace local_pca(const Tensor<double>& neighbors, std::size_t r);

// f_res,i = f_i - normals[nearest(f_i)].
Tensor<float> residual_deviations(const Tensor<float>& features, const NormalPool& pool);
Tensor<float> residual_deviations(const Tensor<float>& features, const Tensor<float>& normals);

// f_den = f_res - alpha * U U^T f_res over the active columns of U.
std::vector<double> denoise_vector(std::span<const float> f_res, const LocalSubspace& s, double alpha);
Tensor<float> denoise(const Tensor<float>& residuals, std::span<const LocalSubspace> subspaces, double alpha);

struct DeviationField {
    Tensor<float> residuals;  // n x C
    Tensor<float> denoised;   // n x C
    std::vector<std::size_t> nearest;
    std::vector<double> nearest_distance;  // cosine distance to the nearest normal
    std::vector<LocalSubspace> subspaces;  // filled only on request
    std::size_t degenerate = 0;            // patches whose subspace lost rank
};

// Nearest normal, top-k neighbours, local PCA, residual and suppression for
// every row of `features`. The same routine serves abnormal references and
// queries.
DeviationField denoise_query(const Tensor<float>& features, const NormalPool& pool, const NveConfig& cfg,
                             bool keep_subspaces = false);
DeviationField denoise_query(const Tensor<float>& features, const Tensor<float>& normals, const NveConfig& cfg,
                             bool keep_subspaces = false);

}  // namespace deviant
