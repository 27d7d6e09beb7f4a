#pragma once

// Quadrature-backed thresholds, certificates and searches.
//
// Everything here is deterministic numerics on NoiseModel densities:
// second-moment and tightness thresholds, the two-step contraction factor
// and its epsilon searches, the sign-alignment certificate, and the
// alpha_k / no-contraction witness machinery.

#include <algorithm>
#include <cmath>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "noise.hpp"
#include "quadrature.hpp"

namespace mulctl::analysis {

namespace detail {

// Split points for integrals against the density: the window edges, a ladder
// of mean +- k sigma breakpoints so narrow densities cannot hide between
// quadrature nodes, and caller-supplied structural points (kinks,
// singularities) which are preserved exactly.
inline std::vector<double> density_splits(const NoiseModel& m, double a, double b,
                                          const std::vector<double>& forced) {
    struct Pt {
        double x;
        bool force;
    };
    std::vector<Pt> pts{{a, true}, {b, true}};
    for (double k : {-8.0, -4.0, -2.0, -1.0, 0.0, 1.0, 2.0, 4.0, 8.0})
        pts.push_back({m.mean() + k * m.sigma(), false});
    for (double x : forced) pts.push_back({x, true});
    std::vector<Pt> in;
    for (const auto& p : pts)
        if (p.x >= a && p.x <= b) in.push_back(p);
    std::sort(in.begin(), in.end(), [](const Pt& l, const Pt& r) {
        if (l.x != r.x) return l.x < r.x;
        return l.force && !r.force;
    });
    const double gap = (b - a) * 1e-13;
    std::vector<double> out;
    for (const auto& p : in) {
        if (!out.empty() && p.x - out.back() <= gap && !p.force) continue;
        if (!out.empty() && p.x == out.back()) continue;
        out.push_back(p.x);
    }
    if (out.empty() || out.front() != a) out.insert(out.begin(), a);
    if (out.back() != b) out.push_back(b);
    return out;
}

}  // namespace detail

// E[g(Z)] over the density window, splitting at the supplied structural points.
template <class G>
quad::Result expectation(const NoiseModel& m, const G& g, const std::vector<double>& forced,
                         double abs_tol) {
    auto f = [&](double z) { return g(z) * m.density(z); };
    const auto pts = detail::density_splits(m, m.support_lo(), m.support_hi(), forced);
    return quad::integrate_split(f, pts, abs_tol);
}

// Second-moment critical gain and threshold for the memoryless-linear family:
// min_d E(a - dZ)^2 = a^2 (1 - (EZ)^2 / EZ^2), so the threshold is
// a* = sqrt(1 + (EZ)^2 / Var Z) with optimal gain d* = a EZ / EZ^2.
inline double critical_a(const NoiseModel& m) {
    return std::sqrt(1.0 + m.mean() * m.mean() / m.variance());
}
inline double optimal_linear_gain(const NoiseModel& m, double a) {
    return a * m.mean() / m.second_moment();
}
inline double per_step_sm_factor(const NoiseModel& m, double a) {
    return a * a * m.variance() / m.second_moment();
}

// mu_d = E log|1 - dZ|.  The integrable log singularity at z = 1/d is
// handled with dyadic shells; d = 0 short-circuits to 0.
inline double expected_log_gap(const NoiseModel& m, double d, double abs_tol = 1e-10) {
    if (d == 0.0) return 0.0;
    const double zs = 1.0 / d;
    const double lo = m.support_lo(), hi = m.support_hi();
    // fma keeps 1 - dz exact near the pole, where the plain expression
    // collapses to 0 several ulps early; a node landing exactly on the
    // singularity has measure zero and contributes nothing.
    auto f = [&](double z) {
        const double r = std::fma(-d, z, 1.0);
        if (r == 0.0) return 0.0;
        return std::log(std::abs(r)) * m.density(z);
    };
    std::vector<double> forced;
    const bool singular = zs > lo && zs < hi;
    if (singular) forced.push_back(zs);
    const auto pts = detail::density_splits(m, lo, hi, forced);
    const double per = abs_tol / static_cast<double>(pts.size() - 1);
    double total = 0.0;
    for (std::size_t i = 0; i + 1 < pts.size(); ++i) {
        const double p = pts[i], q = pts[i + 1];
        if (singular && (p == zs || q == zs))
            total += quad::integrate_log_singular(f, p, q, p == zs ? p : q, per).value;
        else
            total += quad::integrate(f, p, q, per).value;
    }
    return total;
}

// E[(log|1 - dZ|)^2], used for the CLT scale sigma_d^2 = E W^2 - mu_d^2.
inline double log_gap_second_moment(const NoiseModel& m, double d, double abs_tol = 1e-10) {
    if (d == 0.0) return 0.0;
    const double zs = 1.0 / d;
    const double lo = m.support_lo(), hi = m.support_hi();
    auto f = [&](double z) {
        const double r = std::fma(-d, z, 1.0);
        if (r == 0.0) return 0.0;
        const double l = std::log(std::abs(r));
        return l * l * m.density(z);
    };
    std::vector<double> forced;
    const bool singular = zs > lo && zs < hi;
    if (singular) forced.push_back(zs);
    const auto pts = detail::density_splits(m, lo, hi, forced);
    const double per = abs_tol / static_cast<double>(pts.size() - 1);
    double total = 0.0;
    for (std::size_t i = 0; i + 1 < pts.size(); ++i) {
        const double p = pts[i], q = pts[i + 1];
        if (singular && (p == zs || q == zs))
            total += quad::integrate_log_singular(f, p, q, p == zs ? p : q, per).value;
        else
            total += quad::integrate(f, p, q, per).value;
    }
    return total;
}

struct TightnessGain {
    double d_dagger = 0.0;   // argmin of mu_d
    double mu = 0.0;         // mu at d_dagger
    double a_dagger = 1.0;   // exp(-mu)
    bool unimodal = true;    // grid scan saw a single local minimum
};

// Minimise mu_d over d in (0, d_hi], d_hi = 4 / sqrt(E Z^2): 256-point
// geometric scan (three decades below d_hi) plus golden-section refinement.
inline TightnessGain optimize_tightness_gain(const NoiseModel& m, int grid_n = 256,
                                             double d_tol = 1e-6) {
    const double d_hi = 4.0 / std::sqrt(m.second_moment());
    auto f = [&](double d) { return expected_log_gap(m, d, 1e-9); };
    const auto scan = quad::grid_scan_min(f, d_hi * 1e-3, d_hi, grid_n, true);
    TightnessGain g;
    g.unimodal = scan.unimodal;
    g.d_dagger = quad::golden_min(f, scan.grid_lo, scan.grid_hi, d_tol);
    g.mu = expected_log_gap(m, g.d_dagger, 1e-11);
    g.a_dagger = std::exp(-g.mu);
    return g;
}

struct CertValue {
    double value = 0.0;
    double err = 0.0;
};

// E[sgn(Z)(1 - Z/(1+sigma^2))] for Z ~ N(1, sigma^2); positivity is the
// hypothesis behind the mean-one two-step improvement.
inline CertValue certify_gaussian_sgn_bound(double sigma, double abs_tol = 1e-10) {
    const NoiseModel m = NoiseModel::gaussian_mean_one(sigma);
    const double m2 = 1.0 + sigma * sigma;
    auto r = expectation(
        m, [&](double z) { return (z < 0.0 ? -1.0 : 1.0) * (1.0 - z / m2); }, {0.0}, abs_tol);
    return {r.value, r.err};
}

struct TwoStepParts {
    double EA2 = 0.0;    // (Var Z / E Z^2)^2, closed form
    double EB2 = 0.0;    // E Z^2, closed form
    double EgZ = 0.0;    // E|g(Z) Z| by quadrature
    double Esgng = 0.0;  // E[sgn(Z) g(Z)] by quadrature
    double EAB = 0.0;    // EgZ * Esgng
};

// Components of the two-step contraction for the mean-one family, with
// g(x) = 1 - x / E Z^2.  The |Z/g(Z)| pole cancels against g(Z)^2, leaving
// |g(Z) Z| integrated directly.
inline TwoStepParts two_step_parts(const NoiseModel& m, double abs_tol = 1e-11) {
    if (std::abs(m.mean() - 1.0) > 1e-9)
        throw std::invalid_argument("two_step_parts: requires a mean-one noise model");
    const double m2 = m.second_moment();
    TwoStepParts p;
    p.EA2 = (m.variance() / m2) * (m.variance() / m2);
    p.EB2 = m2;
    p.EgZ = expectation(
                m, [&](double z) { return std::abs((1.0 - z / m2) * z); }, {0.0, m2}, abs_tol)
                .value;
    p.Esgng = expectation(
                  m, [&](double z) { return (z < 0.0 ? -1.0 : 1.0) * (1.0 - z / m2); }, {0.0},
                  abs_tol)
                  .value;
    p.EAB = p.EgZ * p.Esgng;
    return p;
}

// E X_{n+2}^2 / E X_n^2 for the mean-one two-step scheme:
// a^4 E A^2 - 2 eps a^2 E AB + eps^2 E B^2.
inline double two_step_contraction(const NoiseModel& m, double a, double eps,
                                   double abs_tol = 1e-11) {
    const TwoStepParts p = two_step_parts(m, abs_tol);
    return a * a * a * a * p.EA2 - 2.0 * eps * a * a * p.EAB + eps * eps * p.EB2;
}

struct EpsilonChoice {
    double eps = 0.0;
    double factor = 1.0;
    bool improvement = false;  // factor < 1 found
    double eps0 = 0.0;         // zero-mean variant only
    double a = 0.0;            // zero-mean variant: the certified a = 1 + eps^2
};

// Pick eps in (0, 1/2] minimising the mean-one two-step factor at fixed a:
// 64-point geometric grid, then golden-section refinement.
inline EpsilonChoice search_epsilon_mean_one(const NoiseModel& m, double a) {
    const TwoStepParts p = two_step_parts(m);
    auto factor = [&](double e) {
        return a * a * a * a * p.EA2 - 2.0 * e * a * a * p.EAB + e * e * p.EB2;
    };
    const auto scan = quad::grid_scan_min(factor, 1e-4, 0.5, 64, true);
    EpsilonChoice c;
    c.eps = quad::golden_min(factor, scan.grid_lo, scan.grid_hi, 1e-10);
    c.factor = factor(c.eps);
    c.improvement = c.factor < 1.0;
    c.a = a;
    return c;
}

// F(t) = E[Z |t/Z - 1|] = E[sgn(Z) |t - Z|]; for zero-mean Z it has
// F(0) = E Z = 0 and F'(0) = -1, so F(eps0) < 0 for small eps0 > 0.
inline double zero_mean_F(const NoiseModel& m, double t, double abs_tol = 1e-12) {
    return expectation(
               m, [&](double z) { return (z < 0.0 ? -1.0 : 1.0) * std::abs(t - z); }, {0.0, t},
               abs_tol)
        .value;
}

inline double abs_moment(const NoiseModel& m, double abs_tol = 1e-12) {
    return expectation(m, [](double z) { return std::abs(z); }, {0.0}, abs_tol).value;
}

// Zero-mean variant: joint search over eps0 (through F) and eps of the full
// two-step factor (1+eps^2)^2 E(1+eps^2+eps A)^2 at a = 1 + eps^2, where
// E A = E|Z| F(eps0) / eps0 and E A^2 = EZ^2 (eps0^2 + EZ^2) / eps0^2.
inline EpsilonChoice search_epsilon_zero_mean(const NoiseModel& m) {
    if (std::abs(m.mean()) > 1e-9)
        throw std::invalid_argument("search_epsilon_zero_mean: requires a zero-mean noise model");
    const double v = m.second_moment();
    const double eabs = abs_moment(m);
    const double sd = std::sqrt(v);

    auto factor_at = [&](double eps0, double eps) {
        const double EA = eabs * zero_mean_F(m, eps0) / eps0;
        const double EA2 = v * (eps0 * eps0 + v) / (eps0 * eps0);
        const double q = 1.0 + eps * eps;
        return q * q * (q * q + 2.0 * eps * q * EA + eps * eps * EA2);
    };
    auto best_eps_for = [&](double eps0) {
        auto f = [&](double e) { return factor_at(eps0, e); };
        const auto scan = quad::grid_scan_min(f, 1e-4, 0.5, 64, true);
        const double e = quad::golden_min(f, scan.grid_lo, scan.grid_hi, 1e-10);
        return std::pair<double, double>{e, f(e)};
    };

    auto objective = [&](double eps0) { return best_eps_for(eps0).second; };
    const auto scan = quad::grid_scan_min(objective, 1e-3 * sd, 2.0 * sd, 64, true);
    const double eps0 = quad::golden_min(objective, scan.grid_lo, scan.grid_hi, 1e-8 * sd);
    const auto [eps, factor] = best_eps_for(eps0);

    EpsilonChoice c;
    c.eps0 = eps0;
    c.eps = eps;
    c.factor = factor;
    c.improvement = factor < 1.0;
    c.a = 1.0 + eps * eps;
    return c;
}

enum class EpsilonVariant { mean_one, zero_mean };

// Unified entry point.  For the zero-mean variant the scheme certifies its
// own growth rate a = 1 + eps^2, so the `a` argument is ignored there.
inline EpsilonChoice search_epsilon(const NoiseModel& m, double a, EpsilonVariant variant) {
    return variant == EpsilonVariant::mean_one ? search_epsilon_mean_one(m, a)
                                               : search_epsilon_zero_mean(m);
}

struct Alphas {
    double a0 = 0.0, a1 = 0.0, a2 = 0.0;
};

// alpha_k(y), k = 0,1,2, for the inverse-cubic X density on 1 <= |x| <= M:
// alpha_k(y) = (1 - M^-2)^-1 y^-(3-k) Int_{y/M}^{y} [s^{2-k} f(s) +
// (-s)^{2-k} f(-s)] ds, evaluated with a coarse pass to set an absolute
// tolerance targeting `rel` relative accuracy.  All three moments share one
// split set, so computing them together costs little more than one.
inline Alphas alpha_all(const NoiseModel& m, double y, double M, double rel = 1e-9) {
    Alphas al;
    if (y == 0.0) return al;
    const double pref = 1.0 / (1.0 - 1.0 / (M * M));
    double sA = std::min(y / M, y), sB = std::max(y / M, y);
    const double w = std::max(std::abs(m.support_lo()), std::abs(m.support_hi()));
    sA = std::max(sA, -w);
    sB = std::min(sB, w);
    if (sA >= sB) return al;
    std::vector<double> forced{0.0};
    const double orient = y > 0.0 ? 1.0 : -1.0;

    struct Pt {
        double x;
        bool force;
    };
    std::vector<double> marks;
    for (double k : {-8.0, -4.0, -2.0, -1.0, 0.0, 1.0, 2.0, 4.0, 8.0}) {
        marks.push_back(m.mean() + k * m.sigma());
        marks.push_back(-(m.mean() + k * m.sigma()));
    }
    marks.push_back(0.0);
    std::sort(marks.begin(), marks.end());
    std::vector<double> pts{sA};
    for (double x : marks)
        if (x > sA && x < sB && x - pts.back() > (sB - sA) * 1e-13) pts.push_back(x);
    pts.push_back(sB);

    for (int k = 0; k <= 2; ++k) {
        auto f = [&, k](double s) {
            const double fp = m.density(s), fn = m.density(-s);
            switch (k) {
                case 0: return s * s * (fp + fn);
                case 1: return s * (fp - fn);
                default: return fp + fn;
            }
        };
        double coarse = 0.0;
        for (std::size_t i = 0; i + 1 < pts.size(); ++i) {
            double v, e;
            quad::detail::gk15_panel(f, pts[i], pts[i + 1], v, e);
            coarse += v;
        }
        const double tol = std::max(std::abs(coarse) * rel, 1e-300);
        const double J = quad::integrate_split(f, pts, tol).value * orient;
        const double denom = (k == 0) ? y * y * y : (k == 1) ? y * y : y;
        const double val = pref * J / denom;
        if (k == 0)
            al.a0 = val;
        else if (k == 1)
            al.a1 = val;
        else
            al.a2 = val;
    }
    return al;
}

// Single conditional observation moment: k selects the component of
// alpha_all.
inline double alpha_k(const NoiseModel& m, double M, int k, double y, double rel = 1e-10) {
    if (k < 0 || k > 2) throw std::invalid_argument("alpha_k: k must be 0, 1 or 2");
    const Alphas al = alpha_all(m, y, M, rel);
    return k == 0 ? al.a0 : k == 1 ? al.a1 : al.a2;
}

// Direct x-space form Int_{1<=|x|<=M} x^k rho(x) f(y/x)/|x| dx for
// cross-checking the substituted formula.
inline double alpha_k_direct(const NoiseModel& m, int k, double y, double M, double rel = 1e-9) {
    const double pref = 1.0 / (1.0 - 1.0 / (M * M));
    auto f = [&](double x) {
        const double xk4 = std::pow(x, k - 4);
        const double sgn_k = (k % 2 == 0) ? 1.0 : -1.0;
        return xk4 * (m.density(y / x) + sgn_k * m.density(-y / x));
    };
    std::vector<double> pts{1.0};
    for (double x = 1.0; x < M; x *= std::sqrt(10.0)) {
        const double nx = std::min(x * std::sqrt(10.0), M);
        if (nx > pts.back()) pts.push_back(nx);
    }
    if (pts.back() != M) pts.push_back(M);
    // refine where y/x crosses the density's mass
    std::vector<double> marks;
    for (double t : {m.mean() - 2 * m.sigma(), m.mean(), m.mean() + 2 * m.sigma()}) {
        if (t != 0.0) {
            marks.push_back(y / t);
            marks.push_back(-y / t);
        }
    }
    for (double x : marks)
        if (x > 1.0 && x < M) pts.push_back(x);
    std::sort(pts.begin(), pts.end());
    pts.erase(std::unique(pts.begin(), pts.end()), pts.end());
    double coarse = 0.0;
    for (std::size_t i = 0; i + 1 < pts.size(); ++i) {
        double v, e;
        quad::detail::gk15_panel(f, pts[i], pts[i + 1], v, e);
        coarse += v;
    }
    const double tol = std::max(std::abs(coarse) * rel, 1e-300);
    return pref * quad::integrate_split(f, pts, tol).value;
}

// Cauchy-Schwarz defect alpha_2 - alpha_1^2 / alpha_0 >= 0; this is the
// pointwise minimum over h of the estimation error integrand.
inline double cs_defect(const Alphas& al) {
    if (al.a0 <= 0.0) return 0.0;
    return al.a2 - al.a1 * al.a1 / al.a0;
}

// Pointwise optimal estimator h(y) = alpha_1(y) / alpha_0(y).
inline double h_opt(const NoiseModel& m, double y, double M) {
    const Alphas al = alpha_all(m, y, M);
    return al.a0 > 0.0 ? al.a1 / al.a0 : 0.0;
}

// Int (alpha_2 - alpha_1^2/alpha_0) dy over the whole line: segments
// {0, 1e-3, 1e-2, 0.1} then geometric up to M * window, each sign, with a
// coarse pass fixing the fine tolerances.
inline double defect_integral(const NoiseModel& m, double M, double rel = 1e-6,
                              double alpha_rel = 1e-8) {
    const double w = std::max(std::abs(m.support_lo()), std::abs(m.support_hi()));
    const double ymax = M * w;
    std::vector<double> pts{0.0, 1e-3, 1e-2, 0.1};
    for (double y = 0.1; y < ymax;) {
        y *= std::pow(10.0, 0.125);
        pts.push_back(std::min(y, ymax));
    }
    auto defect = [&](double y) { return cs_defect(alpha_all(m, y, M, alpha_rel)); };
    double total = 0.0;
    for (double sign : {1.0, -1.0}) {
        auto f = [&](double y) { return defect(sign * y); };
        double coarse = 0.0;
        for (std::size_t i = 0; i + 1 < pts.size(); ++i) {
            double v, e;
            quad::detail::gk15_panel(f, pts[i], pts[i + 1], v, e);
            coarse += v;
        }
        const double tol =
            std::max(std::abs(coarse), 1e-3) * rel / static_cast<double>(pts.size());
        for (std::size_t i = 0; i + 1 < pts.size(); ++i)
            total += quad::integrate(f, pts[i], pts[i + 1], tol, 200).value;
    }
    return total;
}

struct WitnessPoint {
    double M = 0.0;
    double defect = 0.0;  // Int (alpha_2 - alpha_1^2/alpha_0) dy
    double ex2 = 0.0;     // E X^2 = 2 log M / (1 - M^-2), exact
    double ratio = 0.0;   // a^2 defect / ex2
};

struct Witness {
    bool found = false;
    WitnessPoint at;
    std::vector<WitnessPoint> scan;
};

// Scan M geometrically until a^2 min_h E(X - h(XZ))^2 > E X^2; the defect
// integral is the exact minimum of E(X - h(XZ))^2 over all maps h, so the
// first M with ratio > 1 certifies that no memoryless map contracts at rate
// a.  Below the critical rate no M qualifies and the scan simply reports
// ratios < 1 throughout, which is itself a useful consistency observation.
inline Witness no_contraction_witness(const NoiseModel& m, double a, double m_lo = 1e2,
                                      double m_hi = 1e12, int per_decade = 2) {
    Witness wit;
    const double step = std::pow(10.0, 1.0 / per_decade);
    for (double M = m_lo; M <= m_hi * 1.0000001; M *= step) {
        WitnessPoint p;
        p.M = M;
        p.defect = defect_integral(m, M);
        p.ex2 = 2.0 * std::log(M) / (1.0 - 1.0 / (M * M));
        p.ratio = a * a * p.defect / p.ex2;
        wit.scan.push_back(p);
        if (p.ratio > 1.0) {
            wit.found = true;
            wit.at = p;
            break;
        }
    }
    return wit;
}

// Throwing variant for callers that need a certificate, not a survey.
inline Witness require_witness(const NoiseModel& m, double a, double m_lo = 1e2,
                               double m_hi = 1e12, int per_decade = 2) {
    Witness wit = no_contraction_witness(m, a, m_lo, m_hi, per_decade);
    if (!wit.found) throw std::runtime_error("witness not found at desk scale");
    return wit;
}

// Final display of the no-contraction argument: for small delta, eps the
// bound (1-delta)(1-2 eps)/(1+delta) * a^2 sigma^2/(1+sigma^2) exceeds 1
// once a > a*.
inline double witness_ratio_lower_bound(const NoiseModel& m, double a, double delta,
                                        double eps) {
    const double m2 = m.second_moment();
    return (1.0 - delta) * (1.0 - 2.0 * eps) / (1.0 + delta) * a * a * (m2 - 1.0) / m2;
}

struct ThresholdReport {
    double a_star = 0.0;
    double d_star = 0.0;    // optimal memoryless gain evaluated at a_star
    double d_dagger = 0.0;  // argmin_d E log|1 - dZ|
    double a_dagger = 0.0;  // exp(-mu), the rate the log criterion certifies
    double mu = 0.0;        // min_d E log|1 - dZ|
    double sigma_d = 0.0;   // std dev of log|1 - d_dagger Z|
    bool unimodal = false;  // the d scan saw a single basin
    std::map<std::string, double> certificates;  // lemma id -> margin (>0 passes)
};

inline ThresholdReport thresholds(const NoiseModel& m) {
    ThresholdReport r;
    r.a_star = critical_a(m);
    r.d_star = optimal_linear_gain(m, r.a_star);
    const TightnessGain tg = optimize_tightness_gain(m);
    r.d_dagger = tg.d_dagger;
    r.a_dagger = tg.a_dagger;
    r.mu = tg.mu;
    r.unimodal = tg.unimodal;
    const double m2w = log_gap_second_moment(m, r.d_dagger);
    r.sigma_d = std::sqrt(std::max(0.0, m2w - r.mu * r.mu));
    r.certificates["tightness_gain"] = -r.mu;
    if (m.kind() == NoiseKind::gaussian_mean_one)
        r.certificates["gaussian_sgn_bound"] = certify_gaussian_sgn_bound(m.sigma()).value;
    if (std::abs(m.mean()) <= 1e-9) {
        const double h = 1e-5 * m.sigma();
        const double slope = (zero_mean_F(m, h) - zero_mean_F(m, -h)) / (2.0 * h);
        r.certificates["zero_mean_F_slope"] = -slope;  // hypothesis: slope = -1 < 0
    }
    return r;
}

}  // namespace mulctl::analysis
