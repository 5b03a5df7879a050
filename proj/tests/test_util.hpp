#pragma once

#include <Eigen/Dense>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

// Shared helpers for the test suites. The solvers here are deliberately
// independent of the library implementation: they act as oracles.

namespace testutil {

inline std::filesystem::path temp_dir(const std::string& tag) {
    auto dir = std::filesystem::temp_directory_path() / ("qcate_" + tag);
    std::filesystem::remove_all(dir);
    std::filesystem::create_directories(dir);
    return dir;
}

inline void write_file(const std::filesystem::path& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary);
    out << text;
}

inline std::string read_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

// Plain Gaussian elimination with partial pivoting; no Eigen decompositions,
// so it checks the library's solver through an independent route.
inline Eigen::VectorXd solve_dense(Eigen::MatrixXd a, Eigen::VectorXd b) {
    const auto n = a.rows();
    for (Eigen::Index k = 0; k < n; ++k) {
        Eigen::Index pivot = k;
        for (Eigen::Index i = k + 1; i < n; ++i)
            if (std::abs(a(i, k)) > std::abs(a(pivot, k))) pivot = i;
        a.row(k).swap(a.row(pivot));
        std::swap(b[k], b[pivot]);
        for (Eigen::Index i = k + 1; i < n; ++i) {
            const double f = a(i, k) / a(k, k);
            a.row(i).tail(n - k) -= f * a.row(k).tail(n - k);
            b[i] -= f * b[k];
        }
    }
    Eigen::VectorXd x(n);
    for (Eigen::Index i = n - 1; i >= 0; --i) {
        double s = b[i];
        for (Eigen::Index j = i + 1; j < n; ++j) s -= a(i, j) * x[j];
        x[i] = s / a(i, i);
    }
    return x;
}

// Ridge oracle: minimize ||y - Xw - b||^2 + lambda ||w||^2 via the augmented
// normal equations, intercept unpenalized.
inline std::pair<Eigen::VectorXd, double> ridge_oracle(const Eigen::MatrixXd& x,
                                                       const Eigen::VectorXd& y, double lambda) {
    const auto d = x.cols();
    Eigen::MatrixXd a(x.rows(), d + 1);
    a.leftCols(d) = x;
    a.col(d).setOnes();
    Eigen::MatrixXd lhs = a.transpose() * a;
    for (Eigen::Index j = 0; j < d; ++j) lhs(j, j) += lambda;
    const Eigen::VectorXd w = solve_dense(lhs, a.transpose() * y);
    return {w.head(d), w[d]};
}

inline double mean(const std::vector<double>& v) {
    double s = 0.0;
    for (double x : v) s += x;
    return s / static_cast<double>(v.size());
}

inline double sample_var(const std::vector<double>& v) {
    const double m = mean(v);
    double s = 0.0;
    for (double x : v) s += (x - m) * (x - m);
    return s / static_cast<double>(v.size() - 1);
}

inline double se_of_mean(const std::vector<double>& v) {
    return std::sqrt(sample_var(v) / static_cast<double>(v.size()));
}

inline double median(std::vector<double> v) {
    std::sort(v.begin(), v.end());
    const std::size_t n = v.size();
    return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

}  // namespace testutil
