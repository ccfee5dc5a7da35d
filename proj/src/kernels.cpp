#include "enprobe/kernels.hpp"

#include <cmath>
#include <stdexcept>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace enprobe::kernels {

float dot(const float* a, const float* b, std::size_t n) {
    float acc = 0.0f;
#pragma omp simd reduction(+ : acc)
    for (std::size_t i = 0; i < n; ++i) acc += a[i] * b[i];
    return acc;
}

double dot_f64(const double* a, const double* b, std::size_t n) {
    double acc = 0.0;
#pragma omp simd reduction(+ : acc)
    for (std::size_t i = 0; i < n; ++i) acc += a[i] * b[i];
    return acc;
}

static void check_linear(const Matrix& x, const Matrix& w, std::span<const float> bias, const Matrix& y) {
    if (x.cols != w.cols) throw std::invalid_argument("linear: input width does not match weight width");
    if (!bias.empty() && bias.size() != w.rows) throw std::invalid_argument("linear: bias length mismatch");
    if (y.rows != x.rows || y.cols != w.rows) throw std::invalid_argument("linear: output shape mismatch");
}

void linear(const Matrix& x, const Matrix& w, std::span<const float> bias, Matrix& y) {
    check_linear(x, w, bias, y);
    const std::size_t n_out = w.rows;
    const std::size_t n_in = w.cols;
    const std::size_t n_rows = x.rows;
    // Parallel over weight rows: each weight row stays hot while all inputs stream past it.
#pragma omp parallel for schedule(static) if (n_out * n_in * n_rows > 32768)
    for (std::ptrdiff_t j = 0; j < static_cast<std::ptrdiff_t>(n_out); ++j) {
        const float* wj = w.data.data() + j * n_in;
        const float b = bias.empty() ? 0.0f : bias[j];
        for (std::size_t t = 0; t < n_rows; ++t) {
            y.data[t * n_out + j] = dot(x.data.data() + t * n_in, wj, n_in) + b;
        }
    }
}

void linear_row(std::span<const float> x, const Matrix& w, std::span<const float> bias, std::span<float> y) {
    if (x.size() != w.cols || y.size() != w.rows) throw std::invalid_argument("linear_row: shape mismatch");
    if (!bias.empty() && bias.size() != w.rows) throw std::invalid_argument("linear_row: bias length mismatch");
    const std::size_t n_in = w.cols;
#pragma omp parallel for schedule(static) if (w.rows * n_in > 32768)
    for (std::ptrdiff_t j = 0; j < static_cast<std::ptrdiff_t>(w.rows); ++j) {
        y[j] = dot(x.data(), w.data.data() + j * n_in, n_in) + (bias.empty() ? 0.0f : bias[j]);
    }
}

std::vector<double> gram(const std::vector<double>& a, std::size_t rows, std::size_t cols) {
    if (a.size() != rows * cols) throw std::invalid_argument("gram: size mismatch");
    std::vector<double> g(cols * cols, 0.0);
    // Each thread owns a block of output rows i and walks the input once; the
    // upper triangle is mirrored afterwards.
    constexpr std::size_t kBlock = 256;
#pragma omp parallel for schedule(dynamic)
    for (std::ptrdiff_t i = 0; i < static_cast<std::ptrdiff_t>(cols); ++i) {
        double* gi = g.data() + i * cols;
        for (std::size_t r0 = 0; r0 < rows; r0 += kBlock) {
            const std::size_t r1 = std::min(rows, r0 + kBlock);
            for (std::size_t r = r0; r < r1; ++r) {
                const double* ar = a.data() + r * cols;
                const double ai = ar[i];
#pragma omp simd
                for (std::size_t j = static_cast<std::size_t>(i); j < cols; ++j) gi[j] += ai * ar[j];
            }
        }
    }
    for (std::size_t i = 0; i < cols; ++i)
        for (std::size_t j = 0; j < i; ++j) g[i * cols + j] = g[j * cols + i];
    return g;
}

std::vector<double> quadratic_forms(const std::vector<double>& g, const std::vector<double>& vectors, std::size_t n,
                                    std::size_t d) {
    if (g.size() != d * d || vectors.size() != n * d) throw std::invalid_argument("quadratic_forms: size mismatch");
    std::vector<double> out(n);
#pragma omp parallel
    {
        std::vector<double> gw(d);
#pragma omp for schedule(static)
        for (std::ptrdiff_t v = 0; v < static_cast<std::ptrdiff_t>(n); ++v) {
            const double* w = vectors.data() + v * d;
            for (std::size_t i = 0; i < d; ++i) gw[i] = dot_f64(g.data() + i * d, w, d);
            out[v] = dot_f64(w, gw.data(), d);
        }
    }
    return out;
}

std::vector<double> projection_norms(const std::vector<double>& basis, std::size_t k, const std::vector<double>& vectors,
                                     std::size_t n, std::size_t d) {
    if (basis.size() != d * k || vectors.size() != n * d) throw std::invalid_argument("projection_norms: size mismatch");
    std::vector<double> out(n);
#pragma omp parallel
    {
        std::vector<double> coeff(k);
#pragma omp for schedule(static)
        for (std::ptrdiff_t v = 0; v < static_cast<std::ptrdiff_t>(n); ++v) {
            const double* w = vectors.data() + v * d;
            std::fill(coeff.begin(), coeff.end(), 0.0);
            for (std::size_t r = 0; r < d; ++r) {
                const double* br = basis.data() + r * k;
                const double wr = w[r];
#pragma omp simd
                for (std::size_t c = 0; c < k; ++c) coeff[c] += br[c] * wr;
            }
            out[v] = std::sqrt(dot_f64(coeff.data(), coeff.data(), k));
        }
    }
    return out;
}

namespace reference {

void linear(const Matrix& x, const Matrix& w, std::span<const float> bias, Matrix& y) {
    check_linear(x, w, bias, y);
    for (std::size_t t = 0; t < x.rows; ++t) {
        for (std::size_t j = 0; j < w.rows; ++j) {
            double acc = bias.empty() ? 0.0 : bias[j];
            for (std::size_t i = 0; i < w.cols; ++i) acc += static_cast<double>(x(t, i)) * w(j, i);
            y(t, j) = static_cast<float>(acc);
        }
    }
}

std::vector<double> gram(const std::vector<double>& a, std::size_t rows, std::size_t cols) {
    std::vector<double> g(cols * cols, 0.0);
    for (std::size_t i = 0; i < cols; ++i)
        for (std::size_t j = 0; j < cols; ++j) {
            double acc = 0.0;
            for (std::size_t r = 0; r < rows; ++r) acc += a[r * cols + i] * a[r * cols + j];
            g[i * cols + j] = acc;
        }
    return g;
}

std::vector<double> quadratic_forms(const std::vector<double>& g, const std::vector<double>& vectors, std::size_t n,
                                    std::size_t d) {
    std::vector<double> out(n, 0.0);
    for (std::size_t v = 0; v < n; ++v)
        for (std::size_t i = 0; i < d; ++i)
            for (std::size_t j = 0; j < d; ++j) out[v] += vectors[v * d + i] * g[i * d + j] * vectors[v * d + j];
    return out;
}

std::vector<double> projection_norms(const std::vector<double>& basis, std::size_t k, const std::vector<double>& vectors,
                                     std::size_t n, std::size_t d) {
    std::vector<double> out(n, 0.0);
    for (std::size_t v = 0; v < n; ++v) {
        double sq = 0.0;
        for (std::size_t c = 0; c < k; ++c) {
            double coeff = 0.0;
            for (std::size_t r = 0; r < d; ++r) coeff += basis[r * k + c] * vectors[v * d + r];
            sq += coeff * coeff;
        }
        out[v] = std::sqrt(sq);
    }
    return out;
}

} // namespace reference

void set_num_threads(int n) {
#ifdef _OPENMP
    if (n > 0) omp_set_num_threads(n);
#else
    (void)n;
#endif
}

int num_threads() {
#ifdef _OPENMP
    return omp_get_max_threads();
#else
    return 1;
#endif
}

} // namespace enprobe::kernels
