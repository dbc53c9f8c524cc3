#pragma once
// Straight-line 64-bit reference implementations used only by tests.
// They share no code with the library beyond plain containers.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <map>
#include <numeric>
#include <random>
#include <set>
#include <utility>
#include <vector>

#include <Eigen/Dense>

namespace oracle {

using Mat = Eigen::MatrixXd;
using Vec = Eigen::VectorXd;

inline Mat to_mat(const std::vector<float>& data, std::size_t rows, std::size_t cols) {
    Mat m(rows, cols);
    for (std::size_t i = 0; i < rows; ++i)
        for (std::size_t j = 0; j < cols; ++j) m(i, j) = data[i * cols + j];
    return m;
}

inline Mat to_mat(const std::vector<double>& data, std::size_t rows, std::size_t cols) {
    Mat m(rows, cols);
    for (std::size_t i = 0; i < rows; ++i)
        for (std::size_t j = 0; j < cols; ++j) m(i, j) = data[i * cols + j];
    return m;
}

inline std::vector<double> matmul(const std::vector<double>& a, const std::vector<double>& b, std::size_t m,
                                  std::size_t k, std::size_t n) {
    std::vector<double> c(m * n, 0.0);
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) {
            double s = 0;
            for (std::size_t p = 0; p < k; ++p) s += a[i * k + p] * b[p * n + j];
            c[i * n + j] = s;
        }
    return c;
}

inline std::vector<double> softmax(const std::vector<double>& x) {
    double mx = x[0];
    for (double v : x) mx = std::max(mx, v);
    std::vector<double> e(x.size());
    double s = 0;
    for (std::size_t i = 0; i < x.size(); ++i) s += e[i] = std::exp(x[i] - mx);
    for (auto& v : e) v /= s;
    return e;
}

inline double gelu(double x) { return 0.5 * x * (1.0 + std::erf(x / std::sqrt(2.0))); }

inline double cos_sim(const Vec& a, const Vec& b) {
    const double na = a.norm(), nb = b.norm();
    if (na < 1e-12 || nb < 1e-12) return 0.0;
    return std::clamp(a.dot(b) / (na * nb), -1.0, 1.0);
}

// ---- NVE -------------------------------------------------------------------

struct NveResult {
    Mat residuals;                   // n x C
    Mat denoised;                    // n x C
    std::vector<std::size_t> nearest;
    std::vector<double> nearest_distance;
    std::vector<Mat> bases;          // C x active, per row
    std::vector<std::vector<double>> eigenvalues;  // top r per row
};

// Exhaustive sort of (distance, index).
inline std::vector<std::pair<double, std::size_t>> ranked(const Vec& f, const Mat& normals) {
    std::vector<std::pair<double, std::size_t>> d;
    for (Eigen::Index j = 0; j < normals.rows(); ++j)
        d.emplace_back(1.0 - cos_sim(f, normals.row(j).transpose()), static_cast<std::size_t>(j));
    std::sort(d.begin(), d.end());
    return d;
}

inline NveResult nve(const Mat& feats, const Mat& normals, std::size_t k, std::size_t r, double alpha) {
    const Eigen::Index n = feats.rows(), c = feats.cols();
    NveResult out;
    out.residuals.resize(n, c);
    out.denoised.resize(n, c);
    for (Eigen::Index i = 0; i < n; ++i) {
        const Vec f = feats.row(i).transpose();
        const auto d = ranked(f, normals);
        out.nearest.push_back(d[0].second);
        out.nearest_distance.push_back(d[0].first);
        const Vec res = f - normals.row(static_cast<Eigen::Index>(d[0].second)).transpose();
        Mat nb(static_cast<Eigen::Index>(k), c);
        for (std::size_t t = 0; t < k; ++t) nb.row(static_cast<Eigen::Index>(t)) = normals.row(static_cast<Eigen::Index>(d[t].second));
        const Vec mu = nb.colwise().mean().transpose();
        const Mat centered = nb.rowwise() - mu.transpose();
        const Mat cov = centered.transpose() * centered / static_cast<double>(k - 1);
        Eigen::SelfAdjointEigenSolver<Mat> es(cov);
        const double trace = cov.trace();
        std::vector<double> ev;
        std::vector<Vec> cols;
        for (std::size_t t = 0; t < r; ++t) {
            const Eigen::Index idx = c - 1 - static_cast<Eigen::Index>(t);  // ascending order from Eigen
            const double lam = std::max(es.eigenvalues()(idx), 0.0);
            ev.push_back(lam);
            if (lam > 1e-10 * trace) cols.push_back(es.eigenvectors().col(idx));
        }
        Mat u(c, static_cast<Eigen::Index>(cols.size()));
        for (std::size_t t = 0; t < cols.size(); ++t) u.col(static_cast<Eigen::Index>(t)) = cols[t];
        const Vec den = res - alpha * (u * (u.transpose() * res));
        out.residuals.row(i) = res.transpose();
        out.denoised.row(i) = den.transpose();
        out.bases.push_back(u);
        out.eigenvalues.push_back(ev);
    }
    return out;
}

// arccos of the singular values of A^T B, ascending (A, B orthonormal columns).
inline std::vector<double> principal_angles(const Mat& a, const Mat& b) {
    Eigen::JacobiSVD<Mat> svd(a.transpose() * b);
    std::vector<double> out;
    const auto& s = svd.singularValues();
    for (Eigen::Index i = 0; i < s.size(); ++i) out.push_back(std::acos(std::clamp(s(i), -1.0, 1.0)));
    std::sort(out.begin(), out.end());
    return out;
}

// ---- IDE (one or more heads, written out explicitly) -------------------------

struct IdeWeights {
    Mat tokens, wq, wk, wv, w1, w2;
    Vec bq, bk, bv, b1, b2;
};

inline Mat posenc(std::size_t grid, std::size_t c, std::size_t images) {
    const std::size_t n = grid * grid, half = c / 2;
    Mat pe = Mat::Zero(static_cast<Eigen::Index>(images * n), static_cast<Eigen::Index>(c));
    for (std::size_t img = 0; img < images; ++img)
        for (std::size_t p = 0; p < n; ++p) {
            const double rc[2] = {double(p / grid), double(p % grid)};
            for (int ax = 0; ax < 2; ++ax)
                for (std::size_t i = 0; i < half / 2; ++i) {
                    const double w = 1.0 / std::pow(10000.0, double(2 * i) / double(half));
                    pe(Eigen::Index(img * n + p), Eigen::Index(ax * half + 2 * i)) = std::sin(rc[ax] * w);
                    pe(Eigen::Index(img * n + p), Eigen::Index(ax * half + 2 * i + 1)) = std::cos(rc[ax] * w);
                }
        }
    return pe;
}

struct IdeResult {
    Mat deviations;
    Mat attended;
    std::vector<Mat> attention;
};

inline IdeResult ide_forward(const IdeWeights& w, const Mat& feats, const Mat& values, const std::vector<std::uint8_t>& mask,
                             std::size_t grid, std::size_t heads, double scale, bool residuals, bool use_pe) {
    const Eigen::Index c = feats.cols(), m = w.tokens.rows(), p = feats.rows();
    Mat keys_in = feats;
    if (use_pe) keys_in += posenc(grid, std::size_t(c), std::size_t(p) / (grid * grid));
    const Mat q = (w.tokens * w.wq).rowwise() + w.bq.transpose();
    const Mat k = (keys_in * w.wk).rowwise() + w.bk.transpose();
    const Mat v = (values * w.wv).rowwise() + w.bv.transpose();
    const Eigen::Index d = c / Eigen::Index(heads);
    IdeResult out;
    out.attended = Mat::Zero(m, c);
    for (std::size_t h = 0; h < heads; ++h) {
        const Eigen::Index o = Eigen::Index(h) * d;
        Mat a(m, p);
        for (Eigen::Index i = 0; i < m; ++i) {
            std::vector<double> logits(static_cast<std::size_t>(p));
            for (Eigen::Index j = 0; j < p; ++j)
                logits[std::size_t(j)] = q.row(i).segment(o, d).dot(k.row(j).segment(o, d)) * scale +
                                         (mask[std::size_t(j)] ? 0.0 : -1e9);
            const auto s = softmax(logits);
            for (Eigen::Index j = 0; j < p; ++j) a(i, j) = s[std::size_t(j)];
        }
        out.attention.push_back(a);
        out.attended.block(0, o, m, d) = a * v.block(0, o, p, d);
    }
    const Mat x = residuals ? Mat(w.tokens + out.attended) : out.attended;
    Mat hid = (x * w.w1).rowwise() + w.b1.transpose();
    hid = hid.unaryExpr([](double z) { return gelu(z); });
    const Mat ffn = (hid * w.w2).rowwise() + w.b2.transpose();
    out.deviations = residuals ? Mat(x + ffn) : ffn;
    return out;
}

inline double dual_loss(const Mat& dev, const Mat& values, const std::vector<std::uint8_t>& mask, double l1,
                        double l2) {
    const Eigen::Index m = dev.rows();
    double disc = 0;
    int cnt = 0;
    for (std::size_t i = 0; i < mask.size(); ++i) {
        if (!mask[i]) continue;
        double best = 2;
        for (Eigen::Index t = 0; t < m; ++t)
            best = std::min(best, 1.0 - cos_sim(values.row(Eigen::Index(i)).transpose(), dev.row(t).transpose()));
        disc += best;
        ++cnt;
    }
    disc /= cnt;
    double orth = 0;
    if (m >= 2) {
        for (Eigen::Index a = 0; a < m; ++a)
            for (Eigen::Index b = 0; b < m; ++b)
                if (a != b) {
                    const double cs = cos_sim(dev.row(a).transpose(), dev.row(b).transpose());
                    orth += cs * cs;
                }
        orth /= double(m * (m - 1));
    }
    return l1 * disc + l2 * orth;
}

// ---- scoring -----------------------------------------------------------------

inline double bilinear_at(const std::vector<float>& g, std::size_t grid, std::size_t h, std::size_t w, std::size_t y,
                          std::size_t x) {
    const double fy = h > 1 ? double(y) * double(grid - 1) / double(h - 1) : 0.0;
    const double fx = w > 1 ? double(x) * double(grid - 1) / double(w - 1) : 0.0;
    const std::size_t y0 = std::size_t(std::floor(fy)), x0 = std::size_t(std::floor(fx));
    const std::size_t y1 = std::min(y0 + 1, grid - 1), x1 = std::min(x0 + 1, grid - 1);
    const double ty = fy - double(y0), tx = fx - double(x0);
    auto at = [&](std::size_t r, std::size_t c) { return double(g[r * grid + c]); };
    return (1 - ty) * ((1 - tx) * at(y0, x0) + tx * at(y0, x1)) + ty * ((1 - tx) * at(y1, x0) + tx * at(y1, x1));
}

// ---- metrics -----------------------------------------------------------------

inline double auroc_pairs(const std::vector<double>& s, const std::vector<std::uint8_t>& y) {
    double num = 0, den = 0;
    for (std::size_t i = 0; i < s.size(); ++i)
        for (std::size_t j = 0; j < s.size(); ++j)
            if (y[i] && !y[j]) {
                den += 1;
                num += s[i] > s[j] ? 1.0 : (s[i] == s[j] ? 0.5 : 0.0);
            }
    return num / den;
}

// Thresholds at every distinct score, descending; predicted positive iff s >= t.
inline std::vector<std::pair<double, double>> pr_points(const std::vector<double>& s,
                                                        const std::vector<std::uint8_t>& y) {
    std::set<double, std::greater<>> th(s.begin(), s.end());
    double pos = 0;
    for (auto v : y) pos += v;
    std::vector<std::pair<double, double>> out;  // (recall, precision)
    for (double t : th) {
        double tp = 0, fp = 0;
        for (std::size_t i = 0; i < s.size(); ++i)
            if (s[i] >= t) (y[i] ? tp : fp) += 1;
        out.emplace_back(tp / pos, tp / (tp + fp));
    }
    return out;
}

inline double ap_prefix(const std::vector<double>& s, const std::vector<std::uint8_t>& y) {
    double prev = 0, ap = 0;
    for (auto [r, p] : pr_points(s, y)) {
        ap += (r - prev) * p;
        prev = r;
    }
    return ap;
}

inline double f1_sweep(const std::vector<double>& s, const std::vector<std::uint8_t>& y) {
    double best = 0;
    for (auto [r, p] : pr_points(s, y))
        if (p + r > 0) best = std::max(best, 2 * p * r / (p + r));
    return best;
}

// Union-find connected components, 8-neighbourhood.
inline std::vector<int> components(const std::vector<std::uint8_t>& mask, std::size_t h, std::size_t w) {
    std::vector<int> parent(h * w);
    std::iota(parent.begin(), parent.end(), 0);
    auto find = [&](int x) {
        while (parent[std::size_t(x)] != x) x = parent[std::size_t(x)] = parent[std::size_t(parent[std::size_t(x)])];
        return x;
    };
    for (std::size_t y = 0; y < h; ++y)
        for (std::size_t x = 0; x < w; ++x) {
            if (!mask[y * w + x]) continue;
            for (int dy = -1; dy <= 1; ++dy)
                for (int dx = -1; dx <= 1; ++dx) {
                    const long ny = long(y) + dy, nx = long(x) + dx;
                    if (ny < 0 || nx < 0 || ny >= long(h) || nx >= long(w)) continue;
                    if (!mask[std::size_t(ny) * w + std::size_t(nx)]) continue;
                    parent[std::size_t(find(int(y * w + x)))] = find(int(std::size_t(ny) * w + std::size_t(nx)));
                }
        }
    std::vector<int> lab(h * w, -1);
    std::map<int, int> ids;
    for (std::size_t i = 0; i < h * w; ++i)
        if (mask[i]) {
            const int r = find(int(i));
            if (!ids.count(r)) ids[r] = int(ids.size());
            lab[i] = ids[r];
        }
    return lab;
}

struct ProImage {
    std::size_t h, w;
    std::vector<float> scores;
    std::vector<std::uint8_t> mask;
};

// Every distinct score as a threshold; trapezoid to the cap with the curve held
// flat after its last point below it.
inline double pro_exhaustive(const std::vector<ProImage>& imgs, double cap) {
    std::set<double, std::greater<>> th;
    for (const auto& im : imgs) th.insert(im.scores.begin(), im.scores.end());
    std::vector<std::vector<int>> labs;
    std::vector<double> sizes;
    std::vector<std::size_t> base;
    double neg = 0;
    for (const auto& im : imgs) {
        labs.push_back(components(im.mask, im.h, im.w));
        base.push_back(sizes.size());
        int mx = -1;
        for (int l : labs.back()) mx = std::max(mx, l);
        sizes.resize(sizes.size() + std::size_t(mx + 1), 0.0);
        for (int l : labs.back())
            if (l >= 0) sizes[base.back() + std::size_t(l)] += 1;
            else neg += 1;
    }
    std::vector<std::pair<double, double>> pts = {{0, 0}};
    for (double t : th) {
        std::vector<double> hit(sizes.size(), 0.0);
        double fp = 0;
        for (std::size_t k = 0; k < imgs.size(); ++k)
            for (std::size_t i = 0; i < imgs[k].scores.size(); ++i)
                if (double(imgs[k].scores[i]) >= t) {
                    if (labs[k][i] < 0) fp += 1;
                    else hit[base[k] + std::size_t(labs[k][i])] += 1;
                }
        double ov = 0;
        for (std::size_t r = 0; r < sizes.size(); ++r) ov += hit[r] / sizes[r];
        pts.emplace_back(fp / neg, ov / double(sizes.size()));
    }
    std::sort(pts.begin(), pts.end());
    double area = 0, lx = 0, ly = 0;
    for (std::size_t i = 1; i < pts.size(); ++i) {
        if (pts[i].first > cap) break;
        area += (pts[i].first - pts[i - 1].first) * 0.5 * (pts[i].second + pts[i - 1].second);
        lx = pts[i].first;
        ly = pts[i].second;
    }
    area += (cap - lx) * ly;
    return area / cap;
}

inline double task_difficulty(const Mat& ref, const std::vector<std::uint8_t>& rm, const Mat& test,
                              const std::vector<std::uint8_t>& tm) {
    double acc = 0;
    int cnt = 0;
    for (std::size_t i = 0; i < tm.size(); ++i) {
        if (!tm[i]) continue;
        double best = -2;
        for (std::size_t j = 0; j < rm.size(); ++j)
            if (rm[j])
                best = std::max(best, cos_sim(test.row(Eigen::Index(i)).transpose(), ref.row(Eigen::Index(j)).transpose()));
        acc += best;
        ++cnt;
    }
    return acc / cnt;
}

// ---- losses -------------------------------------------------------------------

inline double focal(const std::vector<double>& a, const std::vector<std::uint8_t>& m, double alpha, double gamma,
                    double eps) {
    double s = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        double pt = m[i] ? a[i] : 1 - a[i];
        pt = std::clamp(pt, eps, 1 - eps);
        const double at = m[i] ? alpha : 1 - alpha;
        s += -at * std::pow(1 - pt, gamma) * std::log(pt);
    }
    return s / double(a.size());
}

}  // namespace oracle
