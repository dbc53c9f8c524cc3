#include "deviant/nve.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "deviant/linalg.hpp"
#include "deviant/vector_ops.hpp"

namespace deviant {

void NveConfig::validate() const {
    if (k < 2) throw ConfigError("nve: k must be at least 2");
    if (r == 0 || r >= k - 1) throw ConfigError("nve: r must satisfy 1 <= r < k-1");
    if (!(alpha >= 0.0 && alpha <= 1.0)) throw ConfigError("nve: alpha must lie in [0, 1]");
}

NormalPool::NormalPool(const Tensor<float>& normals) : tensor_(normals) {
    if (normals.rank() != 2) throw DimensionError("normal pool must be a matrix");
    n_ = normals.shape[0];
    c_ = normals.shape[1];
    if (n_ == 0) throw ContractError("normal pool is empty");
    unit_.resize(n_ * c_);
    for (std::size_t i = 0; i < n_; ++i) {
        double ss = 0;
        for (std::size_t j = 0; j < c_; ++j) {
            const double x = tensor_.data[i * c_ + j];
            ss += x * x;
        }
        const double nrm = std::sqrt(ss);
        for (std::size_t j = 0; j < c_; ++j)
            unit_[i * c_ + j] = nrm < kZeroNorm ? 0.0 : tensor_.data[i * c_ + j] / nrm;
    }
}

std::vector<double> NormalPool::distances(std::span<const float> f) const {
    if (f.size() != c_) throw DimensionError("query has " + std::to_string(f.size()) + " channels, pool has " +
                                             std::to_string(c_));
    std::vector<double> fd(f.begin(), f.end());
    double ss = 0;
    for (const double x : fd) ss += x * x;
    const double nrm = std::sqrt(ss);
    std::vector<double> out(n_, 1.0);
    if (nrm < kZeroNorm) return out;
    for (double& x : fd) x /= nrm;
    for (std::size_t i = 0; i < n_; ++i) {
        const double* u = unit_.data() + i * c_;
        double acc = 0;
        for (std::size_t j = 0; j < c_; ++j) acc += fd[j] * u[j];
        out[i] = 1.0 - std::clamp(acc, -1.0, 1.0);
    }
    return out;
}

Neighbor nearest_normal(std::span<const float> f, const NormalPool& pool) {
    const auto d = pool.distances(f);
    std::size_t best = 0;
    for (std::size_t i = 1; i < d.size(); ++i)
        if (d[i] < d[best]) best = i;
    return {best, d[best]};
}

Neighbor nearest_normal(std::span<const float> f, const Tensor<float>& normals) {
    return nearest_normal(f, NormalPool(normals));
}

namespace {

std::vector<std::size_t> smallest_k(const std::vector<double>& d, std::size_t k) {
    std::vector<std::size_t> order(d.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    auto less = [&](std::size_t a, std::size_t b) { return d[a] != d[b] ? d[a] < d[b] : a < b; };
    std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k), order.end(), less);
    order.resize(k);
    return order;
}

}  // namespace

std::vector<std::size_t> topk_neighbors(std::span<const float> f, const NormalPool& pool, std::size_t k) {
    if (k > pool.size()) {
        throw CapacityError("topk_neighbors: k=" + std::to_string(k) + " exceeds pool of " +
                            std::to_string(pool.size()));
    }
    return smallest_k(pool.distances(f), k);
}

std::vector<std::size_t> topk_neighbors(std::span<const float> f, const Tensor<float>& normals, std::size_t k) {
    return topk_neighbors(f, NormalPool(normals), k);
}

LocalSubspace local_pca(const Tensor<double>& neighbors, std::size_t r) {
    if (neighbors.rank() != 2) throw DimensionError("local_pca: neighbours must be a matrix");
    const std::size_t k = neighbors.shape[0], c = neighbors.shape[1];
    if (k < 2) throw ContractError("local_pca: need at least 2 neighbours");
    if (r == 0 || r >= std::min(k - 1, c)) {
        throw ContractError("local_pca: rank " + std::to_string(r) + " must satisfy 0 < r < min(k-1, C) = " +
                            std::to_string(std::min(k - 1, c)));
    }
    LocalSubspace s;
    s.channels = c;
    s.rank = r;
    s.mean.assign(c, 0.0);
    for (std::size_t i = 0; i < k; ++i)
        for (std::size_t j = 0; j < c; ++j) s.mean[j] += neighbors.data[i * c + j];
    for (double& m : s.mean) m /= static_cast<double>(k);
    std::vector<double> x(k * c);
    for (std::size_t i = 0; i < k; ++i)
        for (std::size_t j = 0; j < c; ++j) x[i * c + j] = neighbors.data[i * c + j] - s.mean[j];

    // Gram matrix X X^T / (k-1) shares its nonzero spectrum with the covariance.
    const double denom = static_cast<double>(k - 1);
    std::vector<double> gram(k * k, 0.0);
    for (std::size_t a = 0; a < k; ++a)
        for (std::size_t b = a; b < k; ++b) {
            double acc = 0;
            for (std::size_t j = 0; j < c; ++j) acc += x[a * c + j] * x[b * c + j];
            gram[a * k + b] = gram[b * k + a] = acc / denom;
        }
    double trace = 0;
    for (std::size_t a = 0; a < k; ++a) trace += gram[a * k + a];
    const SymmetricEigen eig = symmetric_eigen(gram, k);

    s.basis.assign(c * r, 0.0);
    s.eigenvalues.assign(r, 0.0);
    const double cutoff = 1e-10 * trace;
    for (std::size_t j = 0; j < r; ++j) {
        const double lambda = eig.values[j];
        if (!(trace > 0) || !(lambda > cutoff)) break;
        // u = X^T v / sqrt((k-1) lambda)
        const double inv = 1.0 / std::sqrt(denom * lambda);
        for (std::size_t ch = 0; ch < c; ++ch) {
            double acc = 0;
            for (std::size_t a = 0; a < k; ++a) acc += x[a * c + ch] * eig.vectors[a * k + j];
            s.basis[ch * r + j] = acc * inv;
        }
        s.eigenvalues[j] = lambda;
        ++s.active;
    }
    // Re-orthonormalize estimated columns and complete the basis with
    // coordinate vectors projected off the span (modified Gram-Schmidt).
    std::size_t filled = 0;
    std::size_t next_axis = 0;
    while (filled < r) {
        std::vector<double> col(c, 0.0);
        if (filled < s.active) {
            for (std::size_t ch = 0; ch < c; ++ch) col[ch] = s.basis[ch * r + filled];
        } else {
            if (next_axis >= c) throw InvariantError("local_pca: cannot complete an orthonormal basis");
            col[next_axis++] = 1.0;
        }
        for (std::size_t j = 0; j < filled; ++j) {
            double proj = 0;
            for (std::size_t ch = 0; ch < c; ++ch) proj += col[ch] * s.basis[ch * r + j];
            for (std::size_t ch = 0; ch < c; ++ch) col[ch] -= proj * s.basis[ch * r + j];
        }
        double nrm = 0;
        for (const double v : col) nrm += v * v;
        nrm = std::sqrt(nrm);
        if (filled >= s.active && nrm < 1e-6) continue;
        for (std::size_t ch = 0; ch < c; ++ch) s.basis[ch * r + filled] = col[ch] / nrm;
        ++filled;
    }
    fix_column_signs(s.basis, c, r);
    return s;
}

Tensor<float> residual_deviations(const Tensor<float>& features, const NormalPool& pool) {
    if (features.rank() != 2 || features.shape[1] != pool.channels()) {
        throw DimensionError("residual_deviations: feature/pool channel mismatch");
    }
    const std::size_t n = features.shape[0], c = features.shape[1];
    Tensor<float> out = Tensor<float>::zeros({n, c});
    for (std::size_t i = 0; i < n; ++i) {
        auto f = features.row(i);
        const auto nn = pool.row(nearest_normal(f, pool).index);
        for (std::size_t j = 0; j < c; ++j) out.data[i * c + j] = f[j] - nn[j];
    }
    return out;
}

Tensor<float> residual_deviations(const Tensor<float>& features, const Tensor<float>& normals) {
    return residual_deviations(features, NormalPool(normals));
}

std::vector<double> denoise_vector(std::span<const float> f_res, const LocalSubspace& s, double alpha) {
    if (f_res.size() != s.channels) throw DimensionError("denoise: residual/subspace channel mismatch");
    const std::size_t c = s.channels, r = s.rank;
    std::vector<double> out(f_res.begin(), f_res.end());
    for (std::size_t j = 0; j < s.active; ++j) {
        double coef = 0;
        for (std::size_t ch = 0; ch < c; ++ch) coef += s.basis[ch * r + j] * f_res[ch];
        for (std::size_t ch = 0; ch < c; ++ch) out[ch] -= alpha * coef * s.basis[ch * r + j];
    }
    return out;
}

Tensor<float> denoise(const Tensor<float>& residuals, std::span<const LocalSubspace> subspaces, double alpha) {
    if (residuals.rank() != 2 || residuals.shape[0] != subspaces.size()) {
        throw DimensionError("denoise: one subspace per residual row required");
    }
    const std::size_t n = residuals.shape[0], c = residuals.shape[1];
    Tensor<float> out = Tensor<float>::zeros({n, c});
    for (std::size_t i = 0; i < n; ++i) {
        const auto d = denoise_vector(residuals.row(i), subspaces[i], alpha);
        for (std::size_t j = 0; j < c; ++j) out.data[i * c + j] = static_cast<float>(d[j]);
    }
    return out;
}

DeviationField denoise_query(const Tensor<float>& features, const NormalPool& pool, const NveConfig& cfg,
                             bool keep_subspaces) {
    cfg.validate();
    if (features.rank() != 2 || features.shape[1] != pool.channels()) {
        throw DimensionError("denoise_query: feature/pool channel mismatch");
    }
    if (cfg.k > pool.size()) {
        throw CapacityError("nve: k=" + std::to_string(cfg.k) + " exceeds the normal pool of " +
                            std::to_string(pool.size()) + " patches");
    }
    if (cfg.r >= std::min(cfg.k - 1, pool.channels())) throw ConfigError("nve: r must be below min(k-1, C)");
    const std::size_t n = features.shape[0], c = features.shape[1];
    DeviationField out;
    out.residuals = Tensor<float>::zeros({n, c});
    out.denoised = Tensor<float>::zeros({n, c});
    out.nearest.resize(n);
    out.nearest_distance.resize(n);
    if (keep_subspaces) out.subspaces.reserve(n);
    Tensor<double> nb = Tensor<double>::zeros({cfg.k, c});
    for (std::size_t i = 0; i < n; ++i) {
        auto f = features.row(i);
        const auto d = pool.distances(f);
        const auto idx = smallest_k(d, cfg.k);
        out.nearest[i] = idx[0];
        out.nearest_distance[i] = d[idx[0]];
        const auto nn = pool.row(idx[0]);
        std::vector<float> res(c);
        for (std::size_t j = 0; j < c; ++j) res[j] = f[j] - nn[j];
        for (std::size_t a = 0; a < cfg.k; ++a) {
            const auto row = pool.row(idx[a]);
            for (std::size_t j = 0; j < c; ++j) nb.data[a * c + j] = row[j];
        }
        LocalSubspace s = local_pca(nb, cfg.r);
        if (s.degenerate()) ++out.degenerate;
        const auto den = denoise_vector(res, s, cfg.alpha);
        for (std::size_t j = 0; j < c; ++j) {
            out.residuals.data[i * c + j] = res[j];
            out.denoised.data[i * c + j] = static_cast<float>(den[j]);
        }
        if (keep_subspaces) out.subspaces.push_back(std::move(s));
    }
    return out;
}

DeviationField denoise_query(const Tensor<float>& features, const Tensor<float>& normals, const NveConfig& cfg,
                             bool keep_subspaces) {
    return denoise_query(features, NormalPool(normals), cfg, keep_subspaces);
}

}  // namespace deviant
