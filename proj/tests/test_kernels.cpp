#include "doctest.h"

#include "enprobe/kernels.hpp"
#include "helpers.hpp"

using namespace enprobe;

namespace {

std::vector<double> to_double(const Matrix& m) { return {m.data.begin(), m.data.end()}; }

void check_close(const std::vector<double>& a, const std::vector<double>& b, double rel) {
    REQUIRE(a.size() == b.size());
    for (std::size_t i = 0; i < a.size(); ++i) CHECK(a[i] == doctest::Approx(b[i]).epsilon(rel));
}

} // namespace

TEST_SUITE("kernels") {

TEST_CASE("parallel linear agrees with the double-precision reference") {
    std::mt19937_64 rng(1);
    const Matrix x = testutil::random_matrix(rng, 13, 37);
    const Matrix w = testutil::random_matrix(rng, 29, 37);
    const auto bias = testutil::random_vector(rng, 29);
    Matrix a(13, 29), b(13, 29);
    kernels::linear(x, w, bias, a);
    kernels::reference::linear(x, w, bias, b);
    CHECK(testutil::max_abs_diff(a.data, b.data) < 1e-4f);
    Matrix wrong(2, 2);
    CHECK_THROWS_AS(kernels::linear(x, w, bias, wrong), std::invalid_argument);

    std::vector<float> row(29);
    for (std::size_t t = 0; t < x.rows; ++t) {
        kernels::linear_row(x.row(t), w, bias, row);
        CHECK(std::equal(row.begin(), row.end(), a.row(t).begin()));
    }
    Matrix nb(13, 29);
    kernels::linear(x, w, {}, nb);
    CHECK(nb(0, 0) == kernels::dot(x.row(0).data(), w.row(0).data(), 37));
}

TEST_CASE("result does not depend on thread count") {
    std::mt19937_64 rng(2);
    const Matrix x = testutil::random_matrix(rng, 40, 64);
    const Matrix w = testutil::random_matrix(rng, 100, 64);
    const int saved = kernels::num_threads();
    Matrix one(40, 100), many(40, 100);
    kernels::set_num_threads(1);
    kernels::linear(x, w, {}, one);
    kernels::set_num_threads(4);
    kernels::linear(x, w, {}, many);
    kernels::set_num_threads(saved);
    CHECK(one == many);
}

TEST_CASE("gram, quadratic forms and projection norms agree with the references") {
    std::mt19937_64 rng(3);
    const auto a = to_double(testutil::random_matrix(rng, 50, 12));
    const auto g = kernels::gram(a, 50, 12);
    check_close(g, kernels::reference::gram(a, 50, 12), 1e-12);
    // Oracle: explicit sum over rows.
    for (std::size_t i = 0; i < 12; ++i)
        for (std::size_t j = 0; j < 12; ++j) {
            double s = 0.0;
            for (std::size_t r = 0; r < 50; ++r) s += a[r * 12 + i] * a[r * 12 + j];
            CHECK(g[i * 12 + j] == doctest::Approx(s).epsilon(1e-12));
        }

    const auto v = to_double(testutil::random_matrix(rng, 30, 12));
    check_close(kernels::quadratic_forms(g, v, 30, 12), kernels::reference::quadratic_forms(g, v, 30, 12), 1e-12);
    const auto basis = to_double(testutil::random_matrix(rng, 12, 4));
    check_close(kernels::projection_norms(basis, 4, v, 30, 12), kernels::reference::projection_norms(basis, 4, v, 30, 12), 1e-12);
}

} // TEST_SUITE
