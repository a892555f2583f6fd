#include "kmfpe/wls.hpp"

#include "kmfpe/error.hpp"

#include <Eigen/Dense>

#include <cmath>

namespace kmfpe {

double PolyFit::stderr_of(std::size_t k) const {
    const std::size_t m = coeffs.size();
    return std::sqrt(std::max(0.0, covariance[k * m + k]));
}

double PolyFit::eval(double x) const {
    double acc = 0.0;
    for (std::size_t k = coeffs.size(); k-- > 0;) acc = acc * x + coeffs[k];
    return acc;
}

PolyFit weighted_polyfit(std::span<const double> x, std::span<const double> y,
                         std::span<const double> w, int degree) {
    const auto n = static_cast<Eigen::Index>(x.size());
    const Eigen::Index m = degree + 1;
    if (degree < 0 || y.size() != x.size() || w.size() != x.size())
        throw FitError("weighted_polyfit: mismatched inputs");
    if (n < m) throw FitError("weighted_polyfit: fewer points than coefficients");

    // Scale the abscissa so the Vandermonde columns are O(1).
    double xs = 0.0;
    for (double v : x) xs = std::max(xs, std::abs(v));
    if (xs == 0.0) xs = 1.0;

    Eigen::MatrixXd a(n, m);
    Eigen::VectorXd b(n);
    for (Eigen::Index i = 0; i < n; ++i) {
        const auto u = static_cast<std::size_t>(i);
        if (!(w[u] > 0.0) || !std::isfinite(w[u])) throw FitError("weighted_polyfit: weights must be finite and > 0");
        const double sw = std::sqrt(w[u]);
        double p = 1.0;
        for (Eigen::Index k = 0; k < m; ++k) {
            a(i, k) = sw * p;
            p *= x[u] / xs;
        }
        b(i) = sw * y[u];
    }
    Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(a);
    qr.setThreshold(1e-12);
    if (qr.rank() < m) throw FitError("weighted_polyfit: rank-deficient design");
    const Eigen::VectorXd beta_s = qr.solve(b);
    const Eigen::VectorXd resid = a * beta_s - b;

    // (A^T A)^-1 via R: cov = P R^-1 R^-T P^T
    const Eigen::MatrixXd r = qr.matrixR().topLeftCorner(m, m).triangularView<Eigen::Upper>();
    const Eigen::MatrixXd rinv = r.triangularView<Eigen::Upper>().solve(Eigen::MatrixXd::Identity(m, m));
    const Eigen::MatrixXd cov_perm = rinv * rinv.transpose();
    const Eigen::MatrixXd cov_s = qr.colsPermutation() * cov_perm * qr.colsPermutation().transpose();

    PolyFit fit;
    fit.coeffs.resize(static_cast<std::size_t>(m));
    fit.covariance.resize(static_cast<std::size_t>(m * m));
    for (Eigen::Index k = 0; k < m; ++k) {
        const double sk = std::pow(xs, -static_cast<double>(k));
        fit.coeffs[static_cast<std::size_t>(k)] = beta_s(k) * sk;
        for (Eigen::Index l = 0; l < m; ++l)
            fit.covariance[static_cast<std::size_t>(k * m + l)] =
                cov_s(k, l) * sk * std::pow(xs, -static_cast<double>(l));
    }
    fit.chi2 = resid.squaredNorm();
    fit.dof = static_cast<int>(n - m);
    return fit;
}

} // namespace kmfpe
