#include "deviant/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <sstream>

namespace deviant {

std::string shape_to_string(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << 'x';
        os << shape[i];
    }
    os << ']';
    return os.str();
}

namespace {

template <typename T>
void require_same_shape(const char* op, const Tensor<T>& a, const Tensor<T>& b) {
    if (a.shape != b.shape) {
        throw DimensionError(std::string(op) + ": shape " + shape_to_string(a.shape) + " vs " +
                             shape_to_string(b.shape));
    }
}

template <typename T>
void require_rank2(const char* op, const Tensor<T>& a) {
    if (a.rank() != 2) {
        throw DimensionError(std::string(op) + ": expected a matrix, got shape " +
                             shape_to_string(a.shape));
    }
}

// C = A * B for row-major A (m x k), B (k x n).
template <typename T>
void gemm(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n) {
    std::fill(c, c + m * n, T(0));
    for (std::size_t i = 0; i < m; ++i) {
        T* crow = c + i * n;
        for (std::size_t p = 0; p < k; ++p) {
            const T aip = a[i * k + p];
            if (aip == T(0)) continue;
            const T* brow = b + p * n;
            for (std::size_t j = 0; j < n; ++j) crow[j] += aip * brow[j];
        }
    }
}

template <typename T>
T normal_cdf(T x) {
    return T(0.5) * (T(1) + std::erf(x / std::numbers::sqrt2_v<T>));
}

template <typename T>
T normal_pdf(T x) {
    return std::exp(T(-0.5) * x * x) / std::sqrt(T(2) * std::numbers::pi_v<T>);
}

}  // namespace

template <typename T>
Var Tape<T>::push(std::string op, Tensor<T> value, std::vector<std::size_t> inputs,
                  std::function<void(Tape&, std::size_t)> backward) {
    if (!value.all_finite()) {
        throw NumericError("non-finite value produced by '" + op + "'");
    }
    Node n;
    n.op = std::move(op);
    n.value = std::move(value);
    n.value.requires_grad = false;
    n.value.grad.reset();
    for (const std::size_t in : inputs) {
        if (in >= nodes_.size()) throw ContractError("tape input refers to a future node");
        n.requires_grad = n.requires_grad || nodes_[in].requires_grad;
    }
    n.inputs = std::move(inputs);
    n.backward = std::move(backward);
    nodes_.push_back(std::move(n));
    return Var{nodes_.size() - 1};
}

template <typename T>
std::vector<T>& Tape<T>::grad_buffer(std::size_t id) {
    Node& n = nodes_[id];
    if (n.grad.size() != n.value.numel()) n.grad.assign(n.value.numel(), T(0));
    return n.grad;
}

template <typename T>
Var Tape<T>::constant(Tensor<T> value) {
    return push("constant", std::move(value), {}, nullptr);
}

template <typename T>
Var Tape<T>::parameter(Tensor<T>& param) {
    if (!param.all_finite()) throw NumericError("parameter contains non-finite values");
    Tensor<T> copy(param.shape, param.data);
    Var v = push("parameter", std::move(copy), {}, nullptr);
    nodes_[v.id].requires_grad = param.requires_grad;
    nodes_[v.id].bound = &param;
    return v;
}

template <typename T>
Var Tape<T>::matmul(Var a, Var b) {
    const auto& A = node(a).value;
    const auto& B = node(b).value;
    require_rank2("matmul", A);
    require_rank2("matmul", B);
    if (A.shape[1] != B.shape[0]) {
        throw DimensionError("matmul: inner dimensions disagree " + shape_to_string(A.shape) +
                             " x " + shape_to_string(B.shape));
    }
    const std::size_t m = A.shape[0], k = A.shape[1], n = B.shape[1];
    auto out = Tensor<T>::zeros({m, n});
    gemm(A.data.data(), B.data.data(), out.data.data(), m, k, n);
    return push("matmul", std::move(out), {a.id, b.id}, [m, k, n](Tape& t, std::size_t self) {
        const auto& G = t.nodes_[self].grad;
        const std::size_t ia = t.nodes_[self].inputs[0], ib = t.nodes_[self].inputs[1];
        if (t.nodes_[ia].requires_grad) {
            const auto& Bv = t.nodes_[ib].value.data;
            auto& dA = t.grad_buffer(ia);
            // dA = G * B^T
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t p = 0; p < k; ++p) {
                    T acc = 0;
                    for (std::size_t j = 0; j < n; ++j) acc += G[i * n + j] * Bv[p * n + j];
                    dA[i * k + p] += acc;
                }
        }
        if (t.nodes_[ib].requires_grad) {
            const auto& Av = t.nodes_[ia].value.data;
            auto& dB = t.grad_buffer(ib);
            // dB = A^T * G
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t p = 0; p < k; ++p) {
                    const T aip = Av[i * k + p];
                    if (aip == T(0)) continue;
                    for (std::size_t j = 0; j < n; ++j) dB[p * n + j] += aip * G[i * n + j];
                }
        }
    });
}

template <typename T>
Var Tape<T>::transpose(Var a) {
    const auto& A = node(a).value;
    require_rank2("transpose", A);
    const std::size_t m = A.shape[0], n = A.shape[1];
    auto out = Tensor<T>::zeros({n, m});
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) out.data[j * m + i] = A.data[i * n + j];
    return push("transpose", std::move(out), {a.id}, [m, n](Tape& t, std::size_t self) {
        const std::size_t ia = t.nodes_[self].inputs[0];
        if (!t.nodes_[ia].requires_grad) return;
        const auto& G = t.nodes_[self].grad;
        auto& d = t.grad_buffer(ia);
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < n; ++j) d[i * n + j] += G[j * m + i];
    });
}

template <typename T>
Var Tape<T>::add(Var a, Var b) {
    const auto& A = node(a).value;
    const auto& B = node(b).value;
    require_same_shape("add", A, B);
    Tensor<T> out = A;
    for (std::size_t i = 0; i < out.numel(); ++i) out.data[i] += B.data[i];
    return push("add", std::move(out), {a.id, b.id}, [](Tape& t, std::size_t self) {
        const auto& G = t.nodes_[self].grad;
        for (const std::size_t in : t.nodes_[self].inputs) {
            if (!t.nodes_[in].requires_grad) continue;
            auto& d = t.grad_buffer(in);
            for (std::size_t i = 0; i < G.size(); ++i) d[i] += G[i];
        }
    });
}

template <typename T>
Var Tape<T>::sub(Var a, Var b) {
    const auto& A = node(a).value;
    const auto& B = node(b).value;
    require_same_shape("sub", A, B);
    Tensor<T> out = A;
    for (std::size_t i = 0; i < out.numel(); ++i) out.data[i] -= B.data[i];
    return push("sub", std::move(out), {a.id, b.id}, [](Tape& t, std::size_t self) {
        const auto& G = t.nodes_[self].grad;
        const std::size_t ia = t.nodes_[self].inputs[0], ib = t.nodes_[self].inputs[1];
        if (t.nodes_[ia].requires_grad) {
            auto& d = t.grad_buffer(ia);
            for (std::size_t i = 0; i < G.size(); ++i) d[i] += G[i];
        }
        if (t.nodes_[ib].requires_grad) {
            auto& d = t.grad_buffer(ib);
            for (std::size_t i = 0; i < G.size(); ++i) d[i] -= G[i];
        }
    });
}

template <typename T>
Var Tape<T>::mul(Var a, Var b) {
    const auto& A = node(a).value;
    const auto& B = node(b).value;
    require_same_shape("mul", A, B);
    Tensor<T> out = A;
    for (std::size_t i = 0; i < out.numel(); ++i) out.data[i] *= B.data[i];
    return push("mul", std::move(out), {a.id, b.id}, [](Tape& t, std::size_t self) {
        const auto& G = t.nodes_[self].grad;
        const std::size_t ia = t.nodes_[self].inputs[0], ib = t.nodes_[self].inputs[1];
        if (t.nodes_[ia].requires_grad) {
            const auto& Bv = t.nodes_[ib].value.data;
            auto& d = t.grad_buffer(ia);
            for (std::size_t i = 0; i < G.size(); ++i) d[i] += G[i] * Bv[i];
        }
        if (t.nodes_[ib].requires_grad) {
            const auto& Av = t.nodes_[ia].value.data;
            auto& d = t.grad_buffer(ib);
            for (std::size_t i = 0; i < G.size(); ++i) d[i] += G[i] * Av[i];
        }
    });
}

template <typename T>
Var Tape<T>::div(Var a, Var b) {
    const auto& A = node(a).value;
    const auto& B = node(b).value;
    require_same_shape("div", A, B);
    Tensor<T> out = A;
    for (std::size_t i = 0; i < out.numel(); ++i) out.data[i] /= B.data[i];
    return push("div", std::move(out), {a.id, b.id}, [](Tape& t, std::size_t self) {
        const auto& G = t.nodes_[self].grad;
        const std::size_t ia = t.nodes_[self].inputs[0], ib = t.nodes_[self].inputs[1];
        const auto& Bv = t.nodes_[ib].value.data;
        if (t.nodes_[ia].requires_grad) {
            auto& d = t.grad_buffer(ia);
            for (std::size_t i = 0; i < G.size(); ++i) d[i] += G[i] / Bv[i];
        }
        if (t.nodes_[ib].requires_grad) {
            const auto& Y = t.nodes_[self].value.data;
            auto& d = t.grad_buffer(ib);
            for (std::size_t i = 0; i < G.size(); ++i) d[i] -= G[i] * Y[i] / Bv[i];
        }
    });
}

template <typename T>
Var Tape<T>::scale(Var a, T factor) {
    Tensor<T> out = node(a).value;
    for (auto& v : out.data) v *= factor;
    return push("scale", std::move(out), {a.id}, [factor](Tape& t, std::size_t self) {
        const std::size_t ia = t.nodes_[self].inputs[0];
        if (!t.nodes_[ia].requires_grad) return;
        const auto& G = t.nodes_[self].grad;
        auto& d = t.grad_buffer(ia);
        for (std::size_t i = 0; i < G.size(); ++i) d[i] += factor * G[i];
    });
}

template <typename T>
Var Tape<T>::add_scalar(Var a, T offset) {
    Tensor<T> out = node(a).value;
    for (auto& v : out.data) v += offset;
    return push("add_scalar", std::move(out), {a.id}, [](Tape& t, std::size_t self) {
        const std::size_t ia = t.nodes_[self].inputs[0];
        if (!t.nodes_[ia].requires_grad) return;
        const auto& G = t.nodes_[self].grad;
        auto& d = t.grad_buffer(ia);
        for (std::size_t i = 0; i < G.size(); ++i) d[i] += G[i];
    });
}

template <typename T>
Var Tape<T>::add_row(Var x, Var row) {
    const auto& X = node(x).value;
    const auto& R = node(row).value;
    require_rank2("add_row", X);
    if (R.numel() != X.shape[1]) {
        throw DimensionError("add_row: row of " + std::to_string(R.numel()) +
                             " entries cannot broadcast over " + shape_to_string(X.shape));
    }
    const std::size_t m = X.shape[0], n = X.shape[1];
    Tensor<T> out = X;
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) out.data[i * n + j] += R.data[j];
    return push("add_row", std::move(out), {x.id, row.id}, [m, n](Tape& t, std::size_t self) {
        const auto& G = t.nodes_[self].grad;
        const std::size_t ix = t.nodes_[self].inputs[0], ir = t.nodes_[self].inputs[1];
        if (t.nodes_[ix].requires_grad) {
            auto& d = t.grad_buffer(ix);
            for (std::size_t i = 0; i < G.size(); ++i) d[i] += G[i];
        }
        if (t.nodes_[ir].requires_grad) {
            auto& d = t.grad_buffer(ir);
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t j = 0; j < n; ++j) d[j] += G[i * n + j];
        }
    });
}

template <typename T>
Var Tape<T>::mul_row(Var x, Var row) {
    const auto& X = node(x).value;
    const auto& R = node(row).value;
    require_rank2("mul_row", X);
    if (R.numel() != X.shape[1]) {
        throw DimensionError("mul_row: row of " + std::to_string(R.numel()) +
                             " entries cannot broadcast over " + shape_to_string(X.shape));
    }
    const std::size_t m = X.shape[0], n = X.shape[1];
    Tensor<T> out = X;
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) out.data[i * n + j] *= R.data[j];
    return push("mul_row", std::move(out), {x.id, row.id}, [m, n](Tape& t, std::size_t self) {
        const auto& G = t.nodes_[self].grad;
        const std::size_t ix = t.nodes_[self].inputs[0], ir = t.nodes_[self].inputs[1];
        const auto& Xv = t.nodes_[ix].value.data;
        const auto& Rv = t.nodes_[ir].value.data;
        if (t.nodes_[ix].requires_grad) {
            auto& d = t.grad_buffer(ix);
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t j = 0; j < n; ++j) d[i * n + j] += G[i * n + j] * Rv[j];
        }
        if (t.nodes_[ir].requires_grad) {
            auto& d = t.grad_buffer(ir);
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t j = 0; j < n; ++j) d[j] += G[i * n + j] * Xv[i * n + j];
        }
    });
}

template <typename T>
Var Tape<T>::gelu(Var x) {
    Tensor<T> out = node(x).value;
    for (auto& v : out.data) v = v * normal_cdf(v);
    return push("gelu", std::move(out), {x.id}, [](Tape& t, std::size_t self) {
        const std::size_t ix = t.nodes_[self].inputs[0];
        if (!t.nodes_[ix].requires_grad) return;
        const auto& G = t.nodes_[self].grad;
        const auto& X = t.nodes_[ix].value.data;
        auto& d = t.grad_buffer(ix);
        for (std::size_t i = 0; i < G.size(); ++i) {
            const T v = X[i];
            d[i] += G[i] * (normal_cdf(v) + v * normal_pdf(v));
        }
    });
}

template <typename T>
Var Tape<T>::softmax_lastdim(Var x, const Tensor<T>* bias) {
    const auto& X = node(x).value;
    if (bias) require_same_shape("softmax_lastdim bias", X, *bias);
    const std::size_t n = X.shape.empty() ? 1 : X.shape.back();
    const std::size_t m = n == 0 ? 0 : X.numel() / n;
    Tensor<T> out = X;
    for (std::size_t i = 0; i < m; ++i) {
        T* row = out.data.data() + i * n;
        bool all_masked = bias != nullptr;
        if (bias) {
            for (std::size_t j = 0; j < n; ++j) {
                const T b = bias->data[i * n + j];
                row[j] += b;
                if (!(b <= kMaskedBias)) all_masked = false;
            }
        }
        if (all_masked) ++masked_rows_;
        const T mx = *std::max_element(row, row + n);
        T total = 0;
        for (std::size_t j = 0; j < n; ++j) {
            row[j] = std::exp(row[j] - mx);
            total += row[j];
        }
        for (std::size_t j = 0; j < n; ++j) row[j] /= total;
    }
    return push("softmax", std::move(out), {x.id}, [m, n](Tape& t, std::size_t self) {
        const std::size_t ix = t.nodes_[self].inputs[0];
        if (!t.nodes_[ix].requires_grad) return;
        const auto& G = t.nodes_[self].grad;
        const auto& P = t.nodes_[self].value.data;
        auto& d = t.grad_buffer(ix);
        for (std::size_t i = 0; i < m; ++i) {
            T dot = 0;
            for (std::size_t j = 0; j < n; ++j) dot += G[i * n + j] * P[i * n + j];
            for (std::size_t j = 0; j < n; ++j)
                d[i * n + j] += P[i * n + j] * (G[i * n + j] - dot);
        }
    });
}

template <typename T>
Var Tape<T>::log(Var x) {
    Tensor<T> out = node(x).value;
    for (auto& v : out.data) {
        if (!(v > T(0))) throw NumericError("log of non-positive value");
        v = std::log(v);
    }
    return push("log", std::move(out), {x.id}, [](Tape& t, std::size_t self) {
        const std::size_t ix = t.nodes_[self].inputs[0];
        if (!t.nodes_[ix].requires_grad) return;
        const auto& G = t.nodes_[self].grad;
        const auto& X = t.nodes_[ix].value.data;
        auto& d = t.grad_buffer(ix);
        for (std::size_t i = 0; i < G.size(); ++i) d[i] += G[i] / X[i];
    });
}

template <typename T>
Var Tape<T>::pow_scalar(Var x, T exponent) {
    Tensor<T> out = node(x).value;
    for (auto& v : out.data) {
        if (v < T(0)) throw ContractError("pow_scalar expects non-negative input");
        v = std::pow(v, exponent);
    }
    return push("pow", std::move(out), {x.id}, [exponent](Tape& t, std::size_t self) {
        const std::size_t ix = t.nodes_[self].inputs[0];
        if (!t.nodes_[ix].requires_grad) return;
        const auto& G = t.nodes_[self].grad;
        const auto& X = t.nodes_[ix].value.data;
        auto& d = t.grad_buffer(ix);
        for (std::size_t i = 0; i < G.size(); ++i) {
            T slope;
            if (X[i] > T(0)) slope = exponent * std::pow(X[i], exponent - T(1));
            else slope = exponent == T(1) ? T(1) : T(0);
            d[i] += G[i] * slope;
        }
    });
}

template <typename T>
Var Tape<T>::clamp(Var x, T lo, T hi) {
    Tensor<T> out = node(x).value;
    for (auto& v : out.data) v = std::clamp(v, lo, hi);
    return push("clamp", std::move(out), {x.id}, [lo, hi](Tape& t, std::size_t self) {
        const std::size_t ix = t.nodes_[self].inputs[0];
        if (!t.nodes_[ix].requires_grad) return;
        const auto& G = t.nodes_[self].grad;
        const auto& X = t.nodes_[ix].value.data;
        auto& d = t.grad_buffer(ix);
        for (std::size_t i = 0; i < G.size(); ++i)
            if (X[i] >= lo && X[i] <= hi) d[i] += G[i];
    });
}

template <typename T>
Var Tape<T>::safe_reciprocal(Var x, T threshold) {
    Tensor<T> out = node(x).value;
    for (auto& v : out.data) v = std::abs(v) < threshold ? T(0) : T(1) / v;
    return push("safe_reciprocal", std::move(out), {x.id}, [](Tape& t, std::size_t self) {
        const std::size_t ix = t.nodes_[self].inputs[0];
        if (!t.nodes_[ix].requires_grad) return;
        const auto& G = t.nodes_[self].grad;
        const auto& Y = t.nodes_[self].value.data;
        auto& d = t.grad_buffer(ix);
        for (std::size_t i = 0; i < G.size(); ++i) d[i] -= G[i] * Y[i] * Y[i];
    });
}

template <typename T>
Var Tape<T>::normalize_rows(Var x, T eps) {
    const auto& X = node(x).value;
    require_rank2("normalize_rows", X);
    const std::size_t m = X.shape[0], n = X.shape[1];
    Tensor<T> out = X;
    std::vector<T> norms(m, T(0));
    for (std::size_t i = 0; i < m; ++i) {
        T ss = 0;
        for (std::size_t j = 0; j < n; ++j) ss += X.data[i * n + j] * X.data[i * n + j];
        const T nrm = std::sqrt(ss);
        norms[i] = nrm;
        for (std::size_t j = 0; j < n; ++j)
            out.data[i * n + j] = nrm < eps ? T(0) : X.data[i * n + j] / nrm;
    }
    return push("normalize_rows", std::move(out), {x.id},
                [m, n, eps, norms = std::move(norms)](Tape& t, std::size_t self) {
                    const std::size_t ix = t.nodes_[self].inputs[0];
                    if (!t.nodes_[ix].requires_grad) return;
                    const auto& G = t.nodes_[self].grad;
                    const auto& Y = t.nodes_[self].value.data;
                    auto& d = t.grad_buffer(ix);
                    for (std::size_t i = 0; i < m; ++i) {
                        if (norms[i] < eps) continue;
                        T yg = 0;
                        for (std::size_t j = 0; j < n; ++j) yg += Y[i * n + j] * G[i * n + j];
                        for (std::size_t j = 0; j < n; ++j)
                            d[i * n + j] += (G[i * n + j] - Y[i * n + j] * yg) / norms[i];
                    }
                });
}

template <typename T>
Var Tape<T>::row_dot(Var a, Var b) {
    const auto& A = node(a).value;
    const auto& B = node(b).value;
    require_same_shape("row_dot", A, B);
    require_rank2("row_dot", A);
    const std::size_t m = A.shape[0], n = A.shape[1];
    auto out = Tensor<T>::zeros({m, 1});
    for (std::size_t i = 0; i < m; ++i) {
        T acc = 0;
        for (std::size_t j = 0; j < n; ++j) acc += A.data[i * n + j] * B.data[i * n + j];
        out.data[i] = acc;
    }
    return push("row_dot", std::move(out), {a.id, b.id}, [m, n](Tape& t, std::size_t self) {
        const auto& G = t.nodes_[self].grad;
        const std::size_t ia = t.nodes_[self].inputs[0], ib = t.nodes_[self].inputs[1];
        const auto& Av = t.nodes_[ia].value.data;
        const auto& Bv = t.nodes_[ib].value.data;
        if (t.nodes_[ia].requires_grad) {
            auto& d = t.grad_buffer(ia);
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t j = 0; j < n; ++j) d[i * n + j] += G[i] * Bv[i * n + j];
        }
        if (t.nodes_[ib].requires_grad) {
            auto& d = t.grad_buffer(ib);
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t j = 0; j < n; ++j) d[i * n + j] += G[i] * Av[i * n + j];
        }
    });
}

template <typename T>
Var Tape<T>::sum(Var x) {
    T acc = 0;
    for (const T v : node(x).value.data) acc += v;
    return push("sum", Tensor<T>::scalar(acc), {x.id}, [](Tape& t, std::size_t self) {
        const std::size_t ix = t.nodes_[self].inputs[0];
        if (!t.nodes_[ix].requires_grad) return;
        const T g = t.nodes_[self].grad[0];
        for (auto& d : t.grad_buffer(ix)) d += g;
    });
}

template <typename T>
Var Tape<T>::mean(Var x) {
    const std::size_t n = node(x).value.numel();
    if (n == 0) throw ContractError("mean of an empty tensor");
    T acc = 0;
    for (const T v : node(x).value.data) acc += v;
    return push("mean", Tensor<T>::scalar(acc / T(n)), {x.id}, [n](Tape& t, std::size_t self) {
        const std::size_t ix = t.nodes_[self].inputs[0];
        if (!t.nodes_[ix].requires_grad) return;
        const T g = t.nodes_[self].grad[0] / T(n);
        for (auto& d : t.grad_buffer(ix)) d += g;
    });
}

template <typename T>
Var Tape<T>::slice_cols(Var x, std::size_t begin, std::size_t end) {
    const auto& X = node(x).value;
    require_rank2("slice_cols", X);
    const std::size_t m = X.shape[0], n = X.shape[1];
    if (begin > end || end > n) throw DimensionError("slice_cols: range out of bounds");
    const std::size_t w = end - begin;
    auto out = Tensor<T>::zeros({m, w});
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < w; ++j) out.data[i * w + j] = X.data[i * n + begin + j];
    return push("slice_cols", std::move(out), {x.id}, [m, n, w, begin](Tape& t, std::size_t self) {
        const std::size_t ix = t.nodes_[self].inputs[0];
        if (!t.nodes_[ix].requires_grad) return;
        const auto& G = t.nodes_[self].grad;
        auto& d = t.grad_buffer(ix);
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < w; ++j) d[i * n + begin + j] += G[i * w + j];
    });
}

template <typename T>
Var Tape<T>::concat_cols(std::span<const Var> parts) {
    if (parts.empty()) throw ContractError("concat_cols of nothing");
    const std::size_t m = node(parts[0]).value.rows();
    std::vector<std::size_t> widths, inputs;
    std::size_t total = 0;
    for (const Var p : parts) {
        const auto& P = node(p).value;
        require_rank2("concat_cols", P);
        if (P.shape[0] != m) throw DimensionError("concat_cols: row counts differ");
        widths.push_back(P.shape[1]);
        inputs.push_back(p.id);
        total += P.shape[1];
    }
    auto out = Tensor<T>::zeros({m, total});
    std::size_t offset = 0;
    for (std::size_t k = 0; k < parts.size(); ++k) {
        const auto& P = node(parts[k]).value;
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < widths[k]; ++j)
                out.data[i * total + offset + j] = P.data[i * widths[k] + j];
        offset += widths[k];
    }
    return push("concat_cols", std::move(out), std::move(inputs),
                [m, total, widths = std::move(widths)](Tape& t, std::size_t self) {
                    const auto& G = t.nodes_[self].grad;
                    std::size_t offset = 0;
                    for (std::size_t k = 0; k < widths.size(); ++k) {
                        const std::size_t in = t.nodes_[self].inputs[k];
                        if (t.nodes_[in].requires_grad) {
                            auto& d = t.grad_buffer(in);
                            for (std::size_t i = 0; i < m; ++i)
                                for (std::size_t j = 0; j < widths[k]; ++j)
                                    d[i * widths[k] + j] += G[i * total + offset + j];
                        }
                        offset += widths[k];
                    }
                });
}

template <typename T>
Var Tape<T>::gather(Var x, std::vector<std::size_t> flat_indices) {
    const auto& X = node(x).value;
    auto out = Tensor<T>::zeros({flat_indices.size(), 1});
    for (std::size_t i = 0; i < flat_indices.size(); ++i) {
        if (flat_indices[i] >= X.numel()) throw DimensionError("gather: index out of range");
        out.data[i] = X.data[flat_indices[i]];
    }
    return push("gather", std::move(out), {x.id},
                [idx = std::move(flat_indices)](Tape& t, std::size_t self) {
                    const std::size_t ix = t.nodes_[self].inputs[0];
                    if (!t.nodes_[ix].requires_grad) return;
                    const auto& G = t.nodes_[self].grad;
                    auto& d = t.grad_buffer(ix);
                    for (std::size_t i = 0; i < idx.size(); ++i) d[idx[i]] += G[i];
                });
}

template <typename T>
Var Tape<T>::topk_mean(Var x, std::size_t k) {
    const auto& X = node(x).value;
    if (k == 0 || k > X.numel()) throw ContractError("topk_mean: k out of range");
    std::vector<std::size_t> order(X.numel());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k), order.end(),
                      [&](std::size_t a, std::size_t b) {
                          if (X.data[a] != X.data[b]) return X.data[a] > X.data[b];
                          return a < b;
                      });
    order.resize(k);
    T acc = 0;
    for (const std::size_t i : order) acc += X.data[i];
    return push("topk_mean", Tensor<T>::scalar(acc / T(k)), {x.id},
                [sel = std::move(order)](Tape& t, std::size_t self) {
                    const std::size_t ix = t.nodes_[self].inputs[0];
                    if (!t.nodes_[ix].requires_grad) return;
                    const T g = t.nodes_[self].grad[0] / T(sel.size());
                    auto& d = t.grad_buffer(ix);
                    for (const std::size_t i : sel) d[i] += g;
                });
}

template <typename T>
void Tape<T>::backward(Var loss) {
    if (loss.id >= nodes_.size()) throw ContractError("backward: unknown loss node");
    if (nodes_[loss.id].value.numel() != 1) {
        throw ContractError("backward: loss must be a scalar, got shape " +
                            shape_to_string(nodes_[loss.id].value.shape));
    }
    for (auto& n : nodes_) n.grad.clear();
    if (!nodes_[loss.id].requires_grad) return;
    grad_buffer(loss.id)[0] = T(1);
    for (std::size_t id = loss.id + 1; id-- > 0;) {
        Node& n = nodes_[id];
        if (!n.requires_grad || n.grad.empty()) continue;
        if (n.backward) n.backward(*this, id);
    }
    for (auto& n : nodes_) {
        if (!n.bound || !n.bound->requires_grad || n.grad.empty()) continue;
        auto& g = n.bound->grad;
        if (!g || g->size() != n.grad.size()) g.emplace(n.grad.size(), T(0));
        for (std::size_t i = 0; i < n.grad.size(); ++i) (*g)[i] += n.grad[i];
    }
}

template class Tape<float>;
template class Tape<double>;

}  // namespace deviant
