#pragma once

// Data-parallel inner loops. Every kernel in `kernels` is OpenMP-parallel over
// independent output elements, so each output is computed by the same scalar
// sequence of operations regardless of thread count or batch size: results are
// bitwise reproducible. `kernels::reference` holds plain serial versions that
// the tests and the benchmark compare against.

#include <cstddef>
#include <span>
#include <vector>

#include "enprobe/tensor.hpp"

namespace enprobe::kernels {

float dot(const float* a, const float* b, std::size_t n);
double dot_f64(const double* a, const double* b, std::size_t n);

// y[t, j] = dot(x[t, :], w[j, :]) + bias[j]   (w is out x in, bias may be empty)
void linear(const Matrix& x, const Matrix& w, std::span<const float> bias, Matrix& y);

// Single-row variant used by the decoder and the unembedding.
void linear_row(std::span<const float> x, const Matrix& w, std::span<const float> bias, std::span<float> y);

// Gram matrix G = A^T A (cols x cols) accumulated in double.
std::vector<double> gram(const std::vector<double>& a, std::size_t rows, std::size_t cols);

// For each row w of `vectors` (n x d), returns w^T G w where G is d x d.
std::vector<double> quadratic_forms(const std::vector<double>& g, const std::vector<double>& vectors, std::size_t n,
                                    std::size_t d);

// For each row w of `vectors` (n x d), returns ||B^T w|| where B is d x k (row-major).
std::vector<double> projection_norms(const std::vector<double>& basis, std::size_t k, const std::vector<double>& vectors,
                                     std::size_t n, std::size_t d);

namespace reference {

void linear(const Matrix& x, const Matrix& w, std::span<const float> bias, Matrix& y);
std::vector<double> gram(const std::vector<double>& a, std::size_t rows, std::size_t cols);
std::vector<double> quadratic_forms(const std::vector<double>& g, const std::vector<double>& vectors, std::size_t n,
                                    std::size_t d);
std::vector<double> projection_norms(const std::vector<double>& basis, std::size_t k, const std::vector<double>& vectors,
                                     std::size_t n, std::size_t d);

} // namespace reference

// Thread-count control shared by all kernels (no-op without OpenMP).
void set_num_threads(int n);
int num_threads();

} // namespace enprobe::kernels
