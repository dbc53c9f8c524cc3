#pragma once

#include <cstddef>
#include <vector>

namespace deviant {

// Eigen-decomposition of a dense symmetric n x n matrix (row-major) by the
// cyclic Jacobi method. Eigenvalues are returned in descending order;
// vectors[i * n + j] is entry i of eigenvector j.
struct SymmetricEigen {
    std::vector<double> values;
    std::vector<double> vectors;
};

SymmetricEigen symmetric_eigen(std::vector<double> a, std::size_t n);

// Flips each column of a rows x cols row-major matrix so that its entry of
// largest magnitude is positive (first such entry on ties).
void fix_column_signs(std::vector<double>& m, std::size_t rows, std::size_t cols);

}  // namespace deviant
