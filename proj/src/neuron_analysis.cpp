#include "enprobe/neuron_analysis.hpp"

#include <algorithm>
#include <cfloat>
#include <cmath>
#include <fstream>
#include <limits>
#include <sstream>
#include <stdexcept>

#include <Eigen/Dense>
#include <Eigen/SVD>

#include "enprobe/kernels.hpp"
#include "enprobe/log.hpp"

namespace enprobe {

std::string to_string(const NeuronId& id) { return std::to_string(id.layer) + "." + std::to_string(id.index); }

static double norm_of(std::span<const float> w) {
    double sq = 0.0;
    for (float v : w) sq += static_cast<double>(v) * v;
    return std::sqrt(sq);
}

// ---------------------------------------------------------------- LogitVar

LogitVarScorer::LogitVarScorer(const Matrix& w_u) : d_(w_u.cols) {
    std::vector<double> normalized;
    normalized.reserve(w_u.size());
    for (std::size_t t = 0; t < w_u.rows; ++t) {
        const auto row = w_u.row(t);
        const double n = norm_of(row);
        if (n == 0.0) {
            ++skipped_;
            continue;
        }
        for (float v : row) normalized.push_back(v / n);
    }
    n_ = w_u.rows - skipped_;
    if (n_ == 0) throw std::invalid_argument("logit_var: unembedding has no nonzero rows");
    if (skipped_ > 0) log::warn("logit_var: excluded " + std::to_string(skipped_) + " zero rows of W_U");
    gram_ = kernels::gram(normalized, n_, d_);
    colsum_.assign(d_, 0.0);
    for (std::size_t t = 0; t < n_; ++t)
        for (std::size_t c = 0; c < d_; ++c) colsum_[c] += normalized[t * d_ + c];
}

double LogitVarScorer::score(std::span<const float> w_out) const {
    require_length(w_out, d_, "logit_var w_out");
    Matrix single(1, d_);
    std::copy(w_out.begin(), w_out.end(), single.data.begin());
    return score_all(single).front();
}

std::vector<double> LogitVarScorer::score_all(const Matrix& w_out_rows) const {
    if (w_out_rows.cols != d_) throw std::invalid_argument("logit_var: output vectors have wrong width");
    const std::size_t n = w_out_rows.rows;
    std::vector<double> unit(n * d_);
    for (std::size_t i = 0; i < n; ++i) {
        const double nr = norm_of(w_out_rows.row(i));
        if (nr == 0.0) {
            throw std::invalid_argument("logit_var: zero output vector for neuron " + std::to_string(i) +
                                        " (cosine undefined)");
        }
        for (std::size_t c = 0; c < d_; ++c) unit[i * d_ + c] = w_out_rows(i, c) / nr;
    }
    const auto second = kernels::quadratic_forms(gram_, unit, n, d_);
    std::vector<double> out(n);
    const double inv_n = 1.0 / static_cast<double>(n_);
    for (std::size_t i = 0; i < n; ++i) {
        const double mean = kernels::dot_f64(colsum_.data(), unit.data() + i * d_, d_) * inv_n;
        out[i] = std::max(0.0, second[i] * inv_n - mean * mean);
    }
    return out;
}

double logit_var(std::span<const float> w_out, const Matrix& w_u) { return LogitVarScorer(w_u).score(w_out); }

// ---------------------------------------------------------------- null space

std::size_t knee_dimension(std::span<const double> s, const KneeOptions& knee) {
    const std::size_t n = s.size();
    if (n < 2) return 0;
    const auto window = static_cast<std::size_t>(std::ceil(knee.window_fraction * static_cast<double>(n)));
    const std::size_t start = n > window ? n - window : 0;
    double best = 0.0;
    std::size_t best_j = n;
    for (std::size_t j = (start == 0 ? 0 : start - 1); j + 1 < n; ++j) {
        if (s[j + 1] <= 0.0) break; // exact zeros handled as rank deficiency
        const double r = s[j] / s[j + 1];
        if (r > best) {
            best = r;
            best_j = j;
        }
    }
    if (best_j == n || best < knee.min_ratio) return 0;
    return n - 1 - best_j;
}

NullSpaceBasis effective_null_space(const std::vector<double>& a, std::size_t rows, std::size_t cols,
                                    std::optional<std::size_t> override_k, const KneeOptions& knee) {
    if (a.size() != rows * cols || cols == 0) throw std::invalid_argument("effective_null_space: bad shape");
    using RowMajorMap = Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;
    RowMajorMap A(a.data(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));

    // For a tall matrix A = QR, the singular values and right singular vectors
    // of A are those of the small triangular factor R.
    Eigen::MatrixXd small;
    if (rows > cols) {
        Eigen::HouseholderQR<Eigen::MatrixXd> qr(A);
        small = qr.matrixQR().topRows(static_cast<Eigen::Index>(cols)).triangularView<Eigen::Upper>();
    } else {
        small = A;
    }
    Eigen::BDCSVD<Eigen::MatrixXd> svd(small, Eigen::ComputeFullV);
    if (svd.info() != Eigen::Success) throw std::runtime_error("effective_null_space: SVD did not converge");

    NullSpaceBasis basis;
    basis.d = cols;
    basis.singular_values.assign(cols, 0.0);
    const auto& sv = svd.singularValues();
    for (Eigen::Index i = 0; i < sv.size(); ++i) basis.singular_values[static_cast<std::size_t>(i)] = sv[i];

    const double smax = basis.singular_values.front();
    // The weights are float32, so anything at float rounding level is a zero.
    const double tol = static_cast<double>(std::max(rows, cols)) * FLT_EPSILON * smax;
    const auto deficiency = static_cast<std::size_t>(
        std::count_if(basis.singular_values.begin(), basis.singular_values.end(), [&](double v) { return v <= tol; }));

    std::size_t k;
    if (override_k) {
        k = *override_k;
        basis.from_override = true;
    } else {
        std::vector<double> nonzero(basis.singular_values.begin(), basis.singular_values.end() - deficiency);
        const std::size_t knee_k = knee_dimension(nonzero, knee);
        basis.knee_found = knee_k > 0 || deficiency > 0;
        k = deficiency + knee_k;
        if (k == 0) {
            k = std::max<std::size_t>(1, static_cast<std::size_t>(std::lround(knee.floor_fraction * static_cast<double>(cols))));
            log::warn("effective_null_space: no sharp drop in the singular spectrum; using floor k = " + std::to_string(k));
        }
    }
    if (k == 0 || k >= cols) {
        throw std::invalid_argument("effective_null_space: null-space dimension " + std::to_string(k) +
                                    " must be in [1, " + std::to_string(cols) + ")");
    }
    basis.k = k;
    basis.v0.resize(cols * k);
    const auto& V = svd.matrixV();
    for (std::size_t r = 0; r < cols; ++r)
        for (std::size_t c = 0; c < k; ++c)
            basis.v0[r * k + c] = V(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(cols - k + c));
    return basis;
}

NullSpaceBasis effective_null_space(const Matrix& w_u, std::optional<std::size_t> override_k, const KneeOptions& knee) {
    std::vector<double> a(w_u.data.begin(), w_u.data.end());
    return effective_null_space(a, w_u.rows, w_u.cols, override_k, knee);
}

double null_space_projection(std::span<const float> w_out, const NullSpaceBasis& basis) {
    if (w_out.size() != basis.d) throw std::invalid_argument("null_space_projection: dimension mismatch");
    const double n = norm_of(w_out);
    if (n == 0.0) throw std::invalid_argument("null_space_projection: zero vector");
    std::vector<double> w(w_out.begin(), w_out.end());
    const double proj = kernels::projection_norms(basis.v0, basis.k, w, 1, basis.d).front();
    return std::min(1.0, proj / n);
}

std::vector<NeuronScore> score_neurons(const Matrix& w_out_rows, const Matrix& w_u, const NullSpaceBasis& basis,
                                       std::size_t layer) {
    if (w_out_rows.cols != basis.d || w_u.cols != basis.d) throw std::invalid_argument("score_neurons: dimension mismatch");
    const std::size_t n = w_out_rows.rows;
    const LogitVarScorer scorer(w_u);
    const auto lv = scorer.score_all(w_out_rows);
    std::vector<double> w(w_out_rows.data.begin(), w_out_rows.data.end());
    const auto proj = kernels::projection_norms(basis.v0, basis.k, w, n, basis.d);
    std::vector<NeuronScore> out(n);
    for (std::size_t i = 0; i < n; ++i) {
        const double nr = norm_of(w_out_rows.row(i));
        out[i] = {{layer, i}, lv[i], std::min(1.0, proj[i] / nr), nr};
    }
    return out;
}

// ---------------------------------------------------------------- selection

double percentile(std::vector<double> v, double p) {
    if (v.empty()) throw std::invalid_argument("percentile: empty input");
    std::sort(v.begin(), v.end());
    const double x = std::clamp(p, 0.0, 100.0) / 100.0 * static_cast<double>(v.size() - 1);
    const auto i = static_cast<std::size_t>(std::floor(x));
    const std::size_t j = std::min(i + 1, v.size() - 1);
    return v[i] + (v[j] - v[i]) * (x - static_cast<double>(i));
}

SelectionConfig SelectionPolicy::resolve(std::span<const NeuronScore> scores) const {
    std::vector<double> rho, lv;
    for (const auto& s : scores) {
        rho.push_back(s.rho);
        lv.push_back(s.logit_var);
    }
    SelectionConfig cfg;
    cfg.rho_min = percentile(rho, rho_percentile);
    cfg.logit_var_max = percentile(lv, logit_var_percentile);
    cfg.max_neurons = static_cast<std::size_t>(std::ceil(permille / 1000.0 * static_cast<double>(scores.size()) - 1e-9));
    return cfg;
}

std::vector<NeuronId> select_entropy_neurons(std::span<const NeuronScore> scores, const SelectionConfig& cfg) {
    if (cfg.rho_min < 0.0 || cfg.rho_min > 1.0) throw std::invalid_argument("selection: rho_min must be in [0, 1]");
    std::vector<NeuronScore> pass;
    for (const auto& s : scores) {
        if (s.rho >= cfg.rho_min && s.logit_var <= cfg.logit_var_max) pass.push_back(s);
    }
    std::sort(pass.begin(), pass.end(), [](const NeuronScore& a, const NeuronScore& b) {
        return a.logit_var != b.logit_var ? a.logit_var < b.logit_var : a.id < b.id;
    });
    if (pass.size() > cfg.max_neurons) pass.resize(cfg.max_neurons);
    std::vector<NeuronId> out;
    for (const auto& s : pass) out.push_back(s.id);
    std::sort(out.begin(), out.end());
    if (out.empty()) log::warn("select_entropy_neurons: no neuron meets the selection thresholds");
    return out;
}

// ---------------------------------------------------------------- norm report

static std::vector<double> density(const std::vector<std::size_t>& counts) {
    std::size_t total = 0;
    for (auto c : counts) total += c;
    std::vector<double> out(counts.size(), 0.0);
    if (total == 0) return out;
    for (std::size_t i = 0; i < counts.size(); ++i) out[i] = static_cast<double>(counts[i]) / static_cast<double>(total);
    return out;
}

std::vector<double> WeightNormHistogram::entropy_density() const { return density(entropy_counts); }
std::vector<double> WeightNormHistogram::other_density() const { return density(other_counts); }

WeightNormHistogram weight_norm_report(std::span<const NeuronScore> scores, std::span<const NeuronId> selected,
                                       std::size_t n_bins) {
    if (n_bins == 0) throw std::invalid_argument("weight_norm_report: n_bins must be >= 1");
    WeightNormHistogram h;
    if (scores.empty()) return h;
    double lo = std::numeric_limits<double>::infinity();
    double hi = -lo;
    for (const auto& s : scores) {
        lo = std::min(lo, s.weight_norm);
        hi = std::max(hi, s.weight_norm);
    }
    if (hi == lo) n_bins = 1;
    h.edges.resize(n_bins + 1);
    for (std::size_t b = 0; b <= n_bins; ++b) h.edges[b] = lo + (hi - lo) * static_cast<double>(b) / static_cast<double>(n_bins);
    h.entropy_counts.assign(n_bins, 0);
    h.other_counts.assign(n_bins, 0);
    for (const auto& s : scores) {
        std::size_t b = hi == lo ? 0 : static_cast<std::size_t>((s.weight_norm - lo) / (hi - lo) * static_cast<double>(n_bins));
        b = std::min(b, n_bins - 1);
        const bool is_entropy = std::find(selected.begin(), selected.end(), s.id) != selected.end();
        (is_entropy ? h.entropy_counts : h.other_counts)[b]++;
    }
    return h;
}

// ---------------------------------------------------------------- CSV

void write_scores_csv(const std::filesystem::path& path, std::span<const NeuronScore> scores,
                      std::span<const NeuronId> selected) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    out.precision(17);
    out << "layer,index,logit_var,rho,weight_norm,selected\n";
    for (const auto& s : scores) {
        const bool sel = std::find(selected.begin(), selected.end(), s.id) != selected.end();
        out << s.id.layer << ',' << s.id.index << ',' << s.logit_var << ',' << s.rho << ',' << s.weight_norm << ','
            << (sel ? 1 : 0) << '\n';
    }
}

std::vector<NeuronScore> read_scores_csv(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot read " + path.string());
    std::string line;
    std::getline(in, line);
    if (line.rfind("layer,index,logit_var,rho,weight_norm", 0) != 0) {
        throw std::runtime_error(path.string() + ": unexpected header");
    }
    std::vector<NeuronScore> out;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        std::stringstream ss(line);
        std::string field;
        std::vector<std::string> f;
        while (std::getline(ss, field, ',')) f.push_back(field);
        if (f.size() < 5) throw std::runtime_error(path.string() + ": malformed row '" + line + "'");
        out.push_back({{std::stoul(f[0]), std::stoul(f[1])}, std::stod(f[2]), std::stod(f[3]), std::stod(f[4])});
    }
    return out;
}

void write_singular_values_csv(const std::filesystem::path& path, const NullSpaceBasis& basis) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    out.precision(17);
    out << "index,singular_value,in_null_space\n";
    const std::size_t n = basis.singular_values.size();
    for (std::size_t i = 0; i < n; ++i) {
        out << i << ',' << basis.singular_values[i] << ',' << (i >= n - basis.k ? 1 : 0) << '\n';
    }
}

void write_weight_norms_csv(const std::filesystem::path& path, const WeightNormHistogram& hist) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    out.precision(17);
    out << "bin_lo,bin_hi,entropy_count,other_count\n";
    for (std::size_t b = 0; b + 1 < hist.edges.size(); ++b) {
        out << hist.edges[b] << ',' << hist.edges[b + 1] << ',' << hist.entropy_counts[b] << ',' << hist.other_counts[b]
            << '\n';
    }
}

} // namespace enprobe
