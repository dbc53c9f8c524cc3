#pragma once

#include <cmath>
#include <cstddef>
#include <span>

#include "deviant/errors.hpp"

namespace deviant {

// Norms below this are treated as the zero vector by cosine().
inline constexpr double kZeroNorm = 1e-12;

template <typename T>
T dot(std::span<const T> a, std::span<const T> b) {
    if (a.size() != b.size()) throw DimensionError("dot: length mismatch");
    T acc = 0;
    for (std::size_t i = 0; i < a.size(); ++i) acc += a[i] * b[i];
    return acc;
}

template <typename T>
T l2_norm(std::span<const T> a) {
    return std::sqrt(dot(a, a));
}

// Cosine similarity; 0 when either argument is (numerically) the zero vector.
template <typename T>
T cosine(std::span<const T> a, std::span<const T> b) {
    const T na = l2_norm(a), nb = l2_norm(b);
    if (na < T(kZeroNorm) || nb < T(kZeroNorm)) return T(0);
    const T c = dot(a, b) / (na * nb);
    return c > T(1) ? T(1) : (c < T(-1) ? T(-1) : c);
}

// Cosine distance 1 - cosine(a, b), in [0, 2].
template <typename T>
T cosine_distance(std::span<const T> a, std::span<const T> b) {
    return T(1) - cosine(a, b);
}

}  // namespace deviant
