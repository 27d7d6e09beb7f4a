#pragma once

// Observation-noise models Z with smooth densities f_Z = exp(-phi).
//
// Three families: Gaussian with mean 1, Gaussian with mean 0, and
// exp-polynomial densities exp(-(p(z) + log N)) for an even-degree
// polynomial p with positive leading coefficient.  Density evaluations are
// truncated to a finite support window whose excluded tail mass is
// negligible (< 1e-30 for the Gaussians, < 1e-12 for exp-polynomials);
// samples are drawn untruncated.

#include <cmath>
#include <cstddef>
#include <numbers>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "quadrature.hpp"
#include "rng.hpp"

namespace mulctl {

enum class NoiseKind { gaussian_mean_one, gaussian_mean_zero, exp_poly };

class NoiseModel {
public:
    static NoiseModel gaussian_mean_one(double sigma) { return gaussian(1.0, sigma, NoiseKind::gaussian_mean_one); }
    static NoiseModel gaussian_mean_zero(double sigma) { return gaussian(0.0, sigma, NoiseKind::gaussian_mean_zero); }

    // p(z) = sum_i coeffs[i] * z^i; requires even degree >= 2 and a positive
    // leading coefficient.  tail_delta is the caller's certificate for the
    // tail condition exp(-phi(z)) <= |z|^(-1-delta); without it the
    // phi tail bound is unavailable.
    static NoiseModel exp_poly(std::vector<double> coeffs,
                               std::optional<double> tail_delta = std::nullopt) {
        while (coeffs.size() > 1 && coeffs.back() == 0.0) coeffs.pop_back();
        const std::size_t deg = coeffs.size() - 1;
        if (deg < 2 || deg % 2 != 0)
            throw std::invalid_argument("exp_poly: polynomial degree must be even and >= 2");
        if (coeffs.back() <= 0.0)
            throw std::invalid_argument("exp_poly: leading coefficient must be positive");
        if (tail_delta && *tail_delta <= 0.0)
            throw std::invalid_argument("exp_poly: tail delta must be positive");
        NoiseModel m;
        m.kind_ = NoiseKind::exp_poly;
        m.coeffs_ = std::move(coeffs);
        m.delta_ = tail_delta;
        m.init_exp_poly();
        return m;
    }

    NoiseKind kind() const { return kind_; }
    double mean() const { return mean_; }
    double variance() const { return variance_; }
    double sigma() const { return std::sqrt(variance_); }
    double second_moment() const { return variance_ + mean_ * mean_; }
    double support_lo() const { return lo_; }
    double support_hi() const { return hi_; }
    std::optional<double> tail_delta() const { return delta_; }

    // Analytic exponent of the density: f_Z(z) = exp(-phi(z)) on the window.
    double phi(double z) const {
        if (kind_ == NoiseKind::exp_poly) return poly(z) + log_norm_;
        const double d = (z - mu_) / sd_;
        return 0.5 * d * d + std::log(sd_ * std::sqrt(2.0 * std::numbers::pi));
    }

    double phi_prime(double z) const {
        if (kind_ == NoiseKind::exp_poly) return poly_deriv(z);
        return (z - mu_) / (sd_ * sd_);
    }

    // Truncated density.  For the Gaussians this is evaluated through the
    // direct bell-curve formula, independently of phi().
    double density(double z) const {
        if (z < lo_ || z > hi_) return 0.0;
        if (kind_ == NoiseKind::exp_poly) return std::exp(-poly(z) - log_norm_);
        const double d = (z - mu_) / sd_;
        return std::exp(-0.5 * d * d) / (sd_ * std::sqrt(2.0 * std::numbers::pi));
    }

    double sample(RandomStream& rng) const {
        if (kind_ != NoiseKind::exp_poly) return mu_ + sd_ * rng.normal();
        // Rejection from the Gaussian envelope matched at the density mode.
        for (;;) {
            const double z = env_mode_ + env_sd_ * rng.normal();
            const double u = rng.uniform01();
            if (z < lo_ || z > hi_) continue;
            const double log_f = -poly(z) - log_norm_;
            const double ez = (z - env_mode_) / env_sd_;
            const double log_g = -0.5 * ez * ez - std::log(env_sd_ * std::sqrt(2.0 * std::numbers::pi));
            if (std::log(u) < log_f - log_g - env_log_ratio_) return z;
        }
    }

    // Tail certificate P(phi(Z) >= t) <= (2/delta') exp(-delta' t) with
    // delta' = delta / (1 + delta).
    double phi_tail_bound(double t) const {
        if (!delta_)
            throw std::logic_error("phi_tail_bound: model carries no tail delta");
        const double dp = *delta_ / (1.0 + *delta_);
        return (2.0 / dp) * std::exp(-dp * t);
    }

private:
    NoiseModel() = default;

    static NoiseModel gaussian(double mu, double sigma, NoiseKind kind) {
        if (sigma <= 0.0) throw std::invalid_argument("gaussian noise: sigma must be positive");
        NoiseModel m;
        m.kind_ = kind;
        m.mu_ = mu;
        m.sd_ = sigma;
        m.mean_ = mu;
        m.variance_ = sigma * sigma;
        m.lo_ = mu - 12.0 * sigma;
        m.hi_ = mu + 12.0 * sigma;
        m.delta_ = 1.0;  // any delta certifies a Gaussian tail; 1 is the stored default
        return m;
    }

    double poly(double z) const {
        double acc = 0.0;
        for (std::size_t i = coeffs_.size(); i-- > 0;) acc = acc * z + coeffs_[i];
        return acc;
    }
    double poly_deriv(double z) const {
        double acc = 0.0;
        for (std::size_t i = coeffs_.size(); i-- > 1;)
            acc = acc * z + coeffs_[i] * static_cast<double>(i);
        return acc;
    }
    double poly_second_deriv(double z) const {
        double acc = 0.0;
        for (std::size_t i = coeffs_.size(); i-- > 2;)
            acc = acc * z + coeffs_[i] * static_cast<double>(i) * static_cast<double>(i - 1);
        return acc;
    }

    void init_exp_poly() {
        // Find the global minimum of p on a growing window, then extend the
        // window until the excluded tail is provably below 1e-12 relative.
        double R = 1.0;
        double pmin = 0.0, zmode = 0.0;
        for (int iter = 0; iter < 200; ++iter) {
            auto scan = quad::grid_scan_min([&](double z) { return poly(z); }, -R, R, 2049, false);
            zmode = quad::golden_min([&](double z) { return poly(z); },
                                     scan.grid_lo, scan.grid_hi, R * 1e-12);
            pmin = poly(zmode);
            const bool tails_dead = poly(R) - pmin >= 120.0 && poly(-R) - pmin >= 120.0 &&
                                    poly_deriv(R) >= 1.0 && poly_deriv(-R) <= -1.0;
            if (tails_dead && std::abs(zmode) < 0.9 * R) break;
            R *= 1.5;
            if (R > 1e6) throw std::invalid_argument("exp_poly: support window search failed");
        }
        lo_ = -R;
        hi_ = R;

        // Normalisation in two passes: rough scale first, then to 1e-13 relative.
        auto unnorm = [&](double z) { return std::exp(-(poly(z) - pmin)); };
        const double rough = quad::integrate(unnorm, lo_, hi_, 1e-6).value;
        const double scaled = quad::integrate(unnorm, lo_, hi_, rough * 1e-13, 20000).value;
        log_norm_ = std::log(scaled) - pmin;

        mean_ = quad::integrate([&](double z) { return z * std::exp(-poly(z) - log_norm_); },
                                lo_, hi_, 1e-12, 20000).value;
        const double m2 = quad::integrate(
            [&](double z) { return z * z * std::exp(-poly(z) - log_norm_); },
            lo_, hi_, 1e-12, 20000).value;
        variance_ = m2 - mean_ * mean_;

        // Rejection envelope: Gaussian at the mode, width from the local
        // curvature (widened), height calibrated by a grid maximum of the
        // log density ratio plus a safety margin.
        const double curv = poly_second_deriv(zmode);
        env_mode_ = zmode;
        env_sd_ = 1.5 / std::sqrt(std::max(curv, 1e-12));
        env_sd_ = std::min(std::max(env_sd_, R * 1e-4), R);
        double worst = -std::numeric_limits<double>::infinity();
        const int grid_n = 8192;
        for (int i = 0; i <= grid_n; ++i) {
            const double z = lo_ + (hi_ - lo_) * static_cast<double>(i) / grid_n;
            const double ez = (z - env_mode_) / env_sd_;
            const double log_g = -0.5 * ez * ez - std::log(env_sd_ * std::sqrt(2.0 * std::numbers::pi));
            worst = std::max(worst, (-poly(z) - log_norm_) - log_g);
        }
        env_log_ratio_ = worst + 1e-3;  // margin keeps acceptance <= 1 between grid points
    }

    NoiseKind kind_ = NoiseKind::gaussian_mean_one;
    double mu_ = 1.0, sd_ = 1.0;       // Gaussian parameters
    std::vector<double> coeffs_;       // exp_poly parameters
    double log_norm_ = 0.0;
    double env_mode_ = 0.0, env_sd_ = 1.0, env_log_ratio_ = 0.0;
    double mean_ = 1.0, variance_ = 1.0;
    double lo_ = -11.0, hi_ = 13.0;
    std::optional<double> delta_;
};

}  // namespace mulctl
