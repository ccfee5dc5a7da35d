#pragma once

#include <cstddef>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace enprobe {

// Dense row-major float matrix. Row r occupies data[r*cols, (r+1)*cols).
struct Matrix {
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::vector<float> data;

    Matrix() = default;
    Matrix(std::size_t r, std::size_t c, float fill = 0.0f) : rows(r), cols(c), data(r * c, fill) {}

    float& operator()(std::size_t r, std::size_t c) { return data[r * cols + c]; }
    float operator()(std::size_t r, std::size_t c) const { return data[r * cols + c]; }

    std::span<float> row(std::size_t r) { return {data.data() + r * cols, cols}; }
    std::span<const float> row(std::size_t r) const { return {data.data() + r * cols, cols}; }

    bool empty() const { return data.empty(); }
    std::size_t size() const { return data.size(); }

    Matrix transposed() const {
        Matrix t(cols, rows);
        for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t c = 0; c < cols; ++c)
                t(c, r) = (*this)(r, c);
        return t;
    }

    bool operator==(const Matrix&) const = default;
};

inline void require_shape(const Matrix& m, std::size_t rows, std::size_t cols, const std::string& what) {
    if (m.rows != rows || m.cols != cols) {
        throw std::invalid_argument(what + ": expected shape [" + std::to_string(rows) + ", " +
                                    std::to_string(cols) + "], got [" + std::to_string(m.rows) + ", " +
                                    std::to_string(m.cols) + "]");
    }
}

inline void require_length(std::span<const float> v, std::size_t n, const std::string& what) {
    if (v.size() != n) {
        throw std::invalid_argument(what + ": expected length " + std::to_string(n) + ", got " +
                                    std::to_string(v.size()));
    }
}

} // namespace enprobe
