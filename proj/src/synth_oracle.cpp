#include "deviant/synth_oracle.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "deviant/linalg.hpp"
#include "deviant/vector_ops.hpp"

namespace deviant {

void SynthWorldSpec::validate() const {
    if (channels == 0 || grid == 0) throw ConfigError("synth: channels and grid must be positive");
    if (n_dirs == 0) throw ConfigError("synth: need at least one planted direction");
    if (n_dirs + nuisance_dim >= channels) throw ConfigError("synth: n_dirs + nuisance_dim must be < channels");
    if (n_patterns == 0) throw ConfigError("synth: n_patterns must be positive");
    if (!(nuisance_amplitude >= 0) || !(iso_noise >= 0) || !(offset >= 0) || !(outlier_scale >= 0)) {
        throw ConfigError("synth: amplitudes must be non-negative");
    }
    if (!(outlier_prob >= 0 && outlier_prob <= 1)) throw ConfigError("synth: outlier_prob must lie in [0, 1]");
    if (!(anomaly_fraction > 0 && anomaly_fraction <= 1)) throw ConfigError("synth: anomaly_fraction must lie in (0, 1]");
}

std::string direction_tag(std::size_t d) { return "dir" + std::to_string(d); }

namespace {

// Orthonormalizes `count` random Gaussian vectors in R^C (two passes of
// modified Gram-Schmidt).
std::vector<std::vector<double>> random_orthonormal(std::size_t count, std::size_t c, Rng& rng) {
    std::normal_distribution<double> n01(0.0, 1.0);
    std::vector<std::vector<double>> out;
    while (out.size() < count) {
        std::vector<double> v(c);
        for (auto& x : v) x = n01(rng);
        for (int pass = 0; pass < 2; ++pass)
            for (const auto& u : out) {
                const double d = std::inner_product(u.begin(), u.end(), v.begin(), 0.0);
                for (std::size_t i = 0; i < c; ++i) v[i] -= d * u[i];
            }
        const double nrm = std::sqrt(std::inner_product(v.begin(), v.end(), v.begin(), 0.0));
        if (nrm < 1e-8) continue;
        for (auto& x : v) x /= nrm;
        out.push_back(std::move(v));
    }
    return out;
}

Tensor<double> rows_to_tensor(const std::vector<std::vector<double>>& rows, std::size_t begin, std::size_t end,
                              std::size_t c) {
    Tensor<double> t = Tensor<double>::zeros({end - begin, c});
    for (std::size_t r = begin; r < end; ++r) std::copy(rows[r].begin(), rows[r].end(), t.row(r - begin).begin());
    return t;
}

FeatureSet draw_images(const SynthWorldSpec& s, const SynthWorld& w, std::size_t n_normal, std::size_t n_abnormal,
                       Rng& rng) {
    const std::size_t n = s.n_patches(), c = s.channels;
    std::normal_distribution<double> n01(0.0, 1.0);
    std::uniform_real_distribution<double> u01(0.0, 1.0);
    FeatureSet fs = FeatureSet::empty(n, c);
    const std::size_t k = std::max<std::size_t>(
        1, std::min<std::size_t>(n, static_cast<std::size_t>(std::llround(s.anomaly_fraction * static_cast<double>(n)))));
    std::vector<double> f(c);
    std::vector<float> img(n * c);
    std::vector<std::size_t> perm(n);
    for (std::size_t i = 0; i < n_normal + n_abnormal; ++i) {
        for (std::size_t p = 0; p < n; ++p) {
            const auto pat = w.patterns.row(w.cell_pattern[p]);
            std::copy(pat.begin(), pat.end(), f.begin());
            const double amp = s.nuisance_amplitude * (u01(rng) < s.outlier_prob ? s.outlier_scale : 1.0);
            for (std::size_t r = 0; r < s.nuisance_dim; ++r) {
                const double z = n01(rng) * amp;
                const auto dir = w.nuisance.row(r);
                for (std::size_t j = 0; j < c; ++j) f[j] += z * dir[j];
            }
            for (std::size_t j = 0; j < c; ++j) f[j] += n01(rng) * s.iso_noise;
            for (std::size_t j = 0; j < c; ++j) img[p * c + j] = static_cast<float>(f[j]);
        }
        std::vector<std::uint8_t> mask(n, 0);
        std::uint8_t label = 0;
        std::string type;
        if (i >= n_normal) {
            const std::size_t d = (i - n_normal) % s.n_dirs;
            label = 1;
            type = direction_tag(d);
            std::iota(perm.begin(), perm.end(), std::size_t{0});
            for (std::size_t t = 0; t < k; ++t) {
                const std::size_t j = t + std::uniform_int_distribution<std::size_t>(0, n - 1 - t)(rng);
                std::swap(perm[t], perm[j]);
                mask[perm[t]] = 1;
            }
            const auto dir = w.directions.row(d);
            for (std::size_t p = 0; p < n; ++p) {
                if (!mask[p]) continue;
                for (std::size_t j = 0; j < c; ++j) img[p * c + j] += static_cast<float>(s.offset * dir[j]);
            }
        }
        fs.add_image(img, mask, label, type);
    }
    return fs;
}

}  // namespace

SynthWorld generate_world(const SynthWorldSpec& s) {
    s.validate();
    Rng rng(s.seed);
    SynthWorld w;
    const auto basis = random_orthonormal(s.n_dirs + s.nuisance_dim, s.channels, rng);
    w.directions = rows_to_tensor(basis, 0, s.n_dirs, s.channels);
    w.nuisance = rows_to_tensor(basis, s.n_dirs, s.n_dirs + s.nuisance_dim, s.channels);

    std::normal_distribution<double> n01(0.0, 1.0);
    w.patterns = Tensor<double>::zeros({s.n_patterns, s.channels});
    for (std::size_t r = 0; r < s.n_patterns; ++r) {
        auto row = w.patterns.row(r);
        double nrm = 0;
        for (auto& x : row) {
            x = n01(rng);
            nrm += x * x;
        }
        nrm = std::sqrt(nrm);
        for (auto& x : row) x /= nrm;
    }
    w.cell_pattern.resize(s.n_patches());
    for (auto& cp : w.cell_pattern) cp = std::uniform_int_distribution<std::size_t>(0, s.n_patterns - 1)(rng);

    w.train = draw_images(s, w, s.train_normal_images, s.train_abnormal_images, rng);
    w.test = draw_images(s, w, s.n_normal_images, s.n_abnormal_images, rng);
    return w;
}

namespace {

void require_orthonormal(const Tensor<double>& m, const char* name) {
    if (m.rank() != 2 || m.shape[1] == 0 || m.shape[1] > m.shape[0]) {
        throw ContractError(std::string("principal_angles: ") + name + " must be C x p with 0 < p <= C");
    }
    const std::size_t c = m.shape[0], p = m.shape[1];
    for (std::size_t a = 0; a < p; ++a)
        for (std::size_t b = a; b < p; ++b) {
            double d = 0;
            for (std::size_t i = 0; i < c; ++i) d += m.at(i, a) * m.at(i, b);
            if (std::abs(d - (a == b ? 1.0 : 0.0)) > 1e-5) {
                throw ContractError(std::string("principal_angles: columns of ") + name + " are not orthonormal");
            }
        }
}

// Singular values of a rows x cols matrix (descending) via the Gram matrix.
std::vector<double> singular_values(const std::vector<double>& m, std::size_t rows, std::size_t cols) {
    std::vector<double> g(cols * cols, 0.0);
    for (std::size_t a = 0; a < cols; ++a)
        for (std::size_t b = 0; b < cols; ++b)
            for (std::size_t i = 0; i < rows; ++i) g[a * cols + b] += m[i * cols + a] * m[i * cols + b];
    auto e = symmetric_eigen(std::move(g), cols);
    for (auto& v : e.values) v = std::sqrt(std::max(v, 0.0));
    return e.values;
}

}  // namespace

std::vector<double> principal_angles(const Tensor<double>& a_in, const Tensor<double>& b_in) {
    require_orthonormal(a_in, "A");
    require_orthonormal(b_in, "B");
    if (a_in.shape[0] != b_in.shape[0]) throw DimensionError("principal_angles: row counts differ");
    // Work with q <= p so that every column of B has a partner angle.
    const bool swap = b_in.shape[1] > a_in.shape[1];
    const Tensor<double>& a = swap ? b_in : a_in;
    const Tensor<double>& b = swap ? a_in : b_in;
    const std::size_t c = a.shape[0], p = a.shape[1], q = b.shape[1];

    std::vector<double> atb(p * q, 0.0);
    for (std::size_t i = 0; i < p; ++i)
        for (std::size_t j = 0; j < q; ++j)
            for (std::size_t r = 0; r < c; ++r) atb[i * q + j] += a.at(r, i) * b.at(r, j);
    // Component of B outside span(A); its singular values are the sines.
    std::vector<double> perp(c * q);
    for (std::size_t r = 0; r < c; ++r)
        for (std::size_t j = 0; j < q; ++j) {
            double v = b.at(r, j);
            for (std::size_t i = 0; i < p; ++i) v -= a.at(r, i) * atb[i * q + j];
            perp[r * q + j] = v;
        }
    const auto cosines = singular_values(atb, p, q);  // descending
    auto sines = singular_values(perp, c, q);         // descending
    std::reverse(sines.begin(), sines.end());
    std::vector<double> out(q);
    for (std::size_t j = 0; j < q; ++j) {
        const double s = std::min(sines[j], 1.0), co = std::min(cosines[j], 1.0);
        out[j] = s < std::sqrt(0.5) ? std::asin(s) : std::acos(co);
    }
    std::sort(out.begin(), out.end());
    return out;
}

std::vector<double> token_alignment(const Tensor<float>& tokens, const Tensor<double>& directions,
                                    std::vector<std::size_t>* chosen) {
    if (tokens.rank() != 2 || directions.rank() != 2 || tokens.shape[1] != directions.shape[1]) {
        throw DimensionError("token_alignment: token and direction widths differ");
    }
    const std::size_t m = tokens.shape[0], d = directions.shape[0], c = directions.shape[1];
    if (d > m) throw ContractError("token_alignment: fewer tokens than directions");
    std::vector<std::size_t> pick;
    for (std::size_t k = 0; k < d; ++k) {
        std::size_t best = 0;
        double best_cos = -1;
        for (std::size_t t = 0; t < m; ++t) {
            const std::vector<double> tok(tokens.row(t).begin(), tokens.row(t).end());
            const double cs = std::abs(cosine<double>(tok, directions.row(k)));
            if (cs > best_cos) {
                best_cos = cs;
                best = t;
            }
        }
        pick.push_back(best);
    }
    std::sort(pick.begin(), pick.end());
    pick.erase(std::unique(pick.begin(), pick.end()), pick.end());

    // Orthonormalize the chosen tokens (columns of a C x p matrix).
    std::vector<std::vector<double>> cols;
    for (const std::size_t t : pick) {
        std::vector<double> v(tokens.row(t).begin(), tokens.row(t).end());
        for (int pass = 0; pass < 2; ++pass)
            for (const auto& u : cols) {
                const double dd = std::inner_product(u.begin(), u.end(), v.begin(), 0.0);
                for (std::size_t i = 0; i < c; ++i) v[i] -= dd * u[i];
            }
        const double nrm = std::sqrt(std::inner_product(v.begin(), v.end(), v.begin(), 0.0));
        if (nrm < 1e-12) continue;
        for (auto& x : v) x /= nrm;
        cols.push_back(std::move(v));
    }
    if (chosen) *chosen = pick;
    if (cols.empty()) throw ContractError("token_alignment: chosen tokens are all zero");
    Tensor<double> a = Tensor<double>::zeros({c, cols.size()});
    for (std::size_t j = 0; j < cols.size(); ++j)
        for (std::size_t i = 0; i < c; ++i) a.at(i, j) = cols[j][i];
    Tensor<double> b = Tensor<double>::zeros({c, d});
    for (std::size_t j = 0; j < d; ++j)
        for (std::size_t i = 0; i < c; ++i) b.at(i, j) = directions.at(j, i);
    auto angles = principal_angles(a, b);
    // Directions left without a distinct partner token count as orthogonal.
    while (angles.size() < d) angles.push_back(std::acos(0.0));
    return angles;
}

}  // namespace deviant
