#pragma once

#include <atomic>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "enprobe/log.hpp"
#include "enprobe/model.hpp"
#include "enprobe/tensor.hpp"

namespace testutil {

inline std::filesystem::path fixture(const std::string& name) { return std::filesystem::path(ENPROBE_FIXTURE_DIR) / name; }
inline std::filesystem::path data(const std::string& name) { return std::filesystem::path(ENPROBE_DATA_DIR) / name; }

// Fresh directory under the system temp dir, removed on scope exit.
class TempDir {
public:
    explicit TempDir(const std::string& tag = "t") {
        static std::atomic<int> counter{0};
        path_ = std::filesystem::temp_directory_path() /
                ("enprobe_" + tag + "_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
        std::filesystem::remove_all(path_);
        std::filesystem::create_directories(path_);
    }
    ~TempDir() {
        std::error_code ec;
        std::filesystem::remove_all(path_, ec);
    }
    TempDir(const TempDir&) = delete;
    TempDir& operator=(const TempDir&) = delete;
    const std::filesystem::path& path() const { return path_; }
    std::filesystem::path operator/(const std::string& rel) const { return path_ / rel; }

private:
    std::filesystem::path path_;
};

// Collects warnings for the lifetime of the object instead of printing them.
class CaptureLog {
public:
    CaptureLog() {
        previous_ = enprobe::log::set_sink([this](enprobe::log::Level l, const std::string& m) {
            if (l == enprobe::log::Level::Warning) warnings.push_back(m);
        });
    }
    ~CaptureLog() { enprobe::log::set_sink(previous_); }
    std::vector<std::string> warnings;

private:
    enprobe::log::Sink previous_;
};

inline enprobe::Matrix random_matrix(std::mt19937_64& rng, std::size_t rows, std::size_t cols, float scale = 1.0f) {
    std::normal_distribution<float> n(0.0f, scale);
    enprobe::Matrix m(rows, cols);
    for (float& v : m.data) v = n(rng);
    return m;
}

inline std::vector<float> random_vector(std::mt19937_64& rng, std::size_t n, float scale = 1.0f) {
    std::normal_distribution<float> d(0.0f, scale);
    std::vector<float> v(n);
    for (float& x : v) x = d(rng);
    return v;
}

inline enprobe::TokenSequence random_tokens(std::mt19937_64& rng, std::size_t len, std::size_t vocab) {
    std::uniform_int_distribution<int> d(0, static_cast<int>(vocab) - 1);
    enprobe::TokenSequence t(len);
    for (auto& x : t) x = d(rng);
    return t;
}

inline float max_abs_diff(std::span<const float> a, std::span<const float> b) {
    float m = 0.0f;
    for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
    return m;
}

inline std::string read_file(const std::filesystem::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

} // namespace testutil
