#pragma once

// Adaptive Gauss-Kronrod (G7,K15) quadrature with explicit handling for
// integrable log-type singularities, plus small deterministic scalar
// optimizers used by the threshold searches.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <queue>
#include <stdexcept>
#include <vector>

namespace mulctl::quad {

struct Result {
    double value = 0.0;
    double err = 0.0;        // estimated absolute error
    long evals = 0;
    bool converged = true;
};

namespace detail {

// Kronrod 15 abscissae on [0,1] (positive half) and weights; the embedded
// Gauss 7 rule uses the odd-indexed abscissae.
inline constexpr double xgk[8] = {
    0.991455371120813, 0.949107912342759, 0.864864423359769, 0.741531185599394,
    0.586087235467691, 0.405845151377397, 0.207784955007898, 0.0};
inline constexpr double wgk[8] = {
    0.022935322010529, 0.063092092629979, 0.104790010322250, 0.140653259715525,
    0.169004726639267, 0.190350578064785, 0.204432940075298, 0.209482141084728};
inline constexpr double wg[4] = {
    0.129484966168870, 0.279705391489277, 0.381830050505119, 0.417959183673469};

template <class F>
inline void gk15_panel(const F& f, double a, double b, double& value, double& err) {
    const double c = 0.5 * (a + b);
    const double h = 0.5 * (b - a);
    const double fc = f(c);
    double resg = wg[3] * fc;
    double resk = wgk[7] * fc;
    for (int i = 0; i < 7; ++i) {
        const double dx = h * xgk[i];
        const double fsum = f(c - dx) + f(c + dx);
        resk += wgk[i] * fsum;
        if (i % 2 == 1) resg += wg[i / 2] * fsum;
    }
    value = resk * h;
    err = std::abs((resk - resg) * h);
}

struct Panel {
    double a, b, value, err;
    long id;
    bool operator<(const Panel& o) const {
        if (err != o.err) return err < o.err;
        return id > o.id;  // deterministic tie-break: older panel first
    }
};

}  // namespace detail

template <class F>
Result integrate(const F& f, double a, double b, double abs_tol, int max_panels = 4000) {
    Result res;
    if (a == b) return res;
    double v, e;
    detail::gk15_panel(f, a, b, v, e);
    res.evals = 15;
    long next_id = 0;
    std::priority_queue<detail::Panel> heap;
    heap.push({a, b, v, e, next_id++});
    double total_v = v, total_e = e;
    int panels = 1;
    while (total_e > abs_tol && panels < max_panels) {
        detail::Panel p = heap.top();
        heap.pop();
        const double mid = 0.5 * (p.a + p.b);
        if (mid <= p.a || mid >= p.b) {  // interval exhausted at double resolution
            total_v -= 0.0;              // keep the panel's contribution as-is
            detail::Panel stuck = p;
            stuck.err = 0.0;
            heap.push(stuck);
            total_e -= p.err;
            continue;
        }
        double v1, e1, v2, e2;
        detail::gk15_panel(f, p.a, mid, v1, e1);
        detail::gk15_panel(f, mid, p.b, v2, e2);
        res.evals += 30;
        total_v += v1 + v2 - p.value;
        total_e += e1 + e2 - p.err;
        heap.push({p.a, mid, v1, e1, next_id++});
        heap.push({mid, p.b, v2, e2, next_id++});
        ++panels;
    }
    // Recompute the totals in a deterministic order to shed heap round-off.
    std::vector<detail::Panel> all;
    all.reserve(static_cast<std::size_t>(panels));
    while (!heap.empty()) {
        all.push_back(heap.top());
        heap.pop();
    }
    std::sort(all.begin(), all.end(),
              [](const detail::Panel& x, const detail::Panel& y) { return x.a < y.a; });
    double sv = 0.0, se = 0.0;
    for (const auto& p : all) {
        sv += p.value;
        se += p.err;
    }
    res.value = sv;
    res.err = se;
    res.converged = se <= abs_tol * 1.001 + 1e-300;
    return res;
}

// Integrate over [pts.front(), pts.back()] splitting at every interior point
// (kinks, sign changes of the integrand's derivative, support edges).
template <class F>
Result integrate_split(const F& f, const std::vector<double>& pts, double abs_tol) {
    if (pts.size() < 2) throw std::invalid_argument("integrate_split: need >= 2 points");
    Result total;
    const double per = abs_tol / static_cast<double>(pts.size() - 1);
    for (std::size_t i = 0; i + 1 < pts.size(); ++i) {
        if (!(pts[i] <= pts[i + 1]))
            throw std::invalid_argument("integrate_split: points must be sorted");
        Result r = integrate(f, pts[i], pts[i + 1], per);
        total.value += r.value;
        total.err += r.err;
        total.evals += r.evals;
        total.converged = total.converged && r.converged;
    }
    return total;
}

namespace detail {

// One side of a log singularity at s: integrate f over (s, s+width] (dir=+1)
// or [s-width, s) (dir=-1) on dyadic shells shrinking toward s.  Shells of a
// log-type integrand decay geometrically once the regular factor has settled,
// so the loop stops after two consecutive shells below tolerance/10 (or 64
// shells, by which point the unreached sliver is ~2^-64 * width wide); the
// sliver is estimated by the last shell's contribution and also charged to
// the reported error.
template <class F>
Result log_shells(const F& f, double s, double width, int dir, double abs_tol) {
    Result total;
    if (width <= 0.0) return total;
    constexpr int max_shells = 64;
    const double shell_tol = abs_tol / 10.0;
    const double panel_tol = abs_tol / max_shells;
    double hi = width;  // offset from s
    int quiet = 0;
    double last = 0.0;
    for (int j = 0; j < max_shells; ++j) {
        const double lo = hi * 0.5;
        const double a = dir > 0 ? s + lo : s - hi;
        const double b = dir > 0 ? s + hi : s - lo;
        if (a >= b) break;
        Result r = integrate(f, a, b, panel_tol);
        total.value += r.value;
        total.err += r.err;
        total.evals += r.evals;
        total.converged = total.converged && r.converged;
        last = r.value;
        quiet = std::abs(r.value) < shell_tol ? quiet + 1 : 0;
        if (quiet >= 2) break;
        hi = lo;
    }
    total.value += last;  // geometric-tail estimate for the unreached sliver
    total.err += std::abs(last);
    return total;
}

}  // namespace detail

// Integrand with one integrable log-type singularity at s inside [a,b].
// f is never evaluated at s itself.
template <class F>
Result integrate_log_singular(const F& f, double a, double b, double s, double abs_tol) {
    if (!(a <= s && s <= b))
        throw std::invalid_argument("integrate_log_singular: singularity outside range");
    Result left = detail::log_shells(f, s, s - a, -1, abs_tol / 2);
    Result right = detail::log_shells(f, s, b - s, +1, abs_tol / 2);
    Result total;
    total.value = left.value + right.value;
    total.err = left.err + right.err;
    total.evals = left.evals + right.evals;
    total.converged = left.converged && right.converged;
    return total;
}

// Golden-section minimum of a unimodal f on [lo, hi] to |x - x*| <= xtol.
template <class F>
double golden_min(const F& f, double lo, double hi, double xtol) {
    const double phi = 0.6180339887498949;
    double a = lo, b = hi;
    double x1 = b - phi * (b - a);
    double x2 = a + phi * (b - a);
    double f1 = f(x1), f2 = f(x2);
    while (b - a > xtol) {
        if (f1 <= f2) {
            b = x2;
            x2 = x1;
            f2 = f1;
            x1 = b - phi * (b - a);
            f1 = f(x1);
        } else {
            a = x1;
            x1 = x2;
            f1 = f2;
            x2 = a + phi * (b - a);
            f2 = f(x2);
        }
    }
    return 0.5 * (a + b);
}

struct ScanResult {
    double x = 0.0;      // grid argmin
    double fx = 0.0;
    bool unimodal = true;  // at most one strict local minimum on the grid
    double grid_lo = 0.0, grid_hi = 0.0;  // neighbours bracketing the argmin
};

// Scan f on an n-point grid over [lo, hi] (geometric when log_spaced) and
// report the argmin, a refinement bracket, and a unimodality flag.
template <class F>
ScanResult grid_scan_min(const F& f, double lo, double hi, int n, bool log_spaced) {
    if (n < 3) throw std::invalid_argument("grid_scan_min: need n >= 3");
    std::vector<double> xs(static_cast<std::size_t>(n)), fs(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) {
        const double t = static_cast<double>(i) / (n - 1);
        xs[static_cast<std::size_t>(i)] =
            log_spaced ? lo * std::pow(hi / lo, t) : lo + (hi - lo) * t;
        fs[static_cast<std::size_t>(i)] = f(xs[static_cast<std::size_t>(i)]);
    }
    int best = 0;
    int local_minima = 0;
    for (int i = 0; i < n; ++i) {
        if (fs[static_cast<std::size_t>(i)] < fs[static_cast<std::size_t>(best)]) best = i;
        if (i > 0 && i + 1 < n && fs[static_cast<std::size_t>(i)] < fs[static_cast<std::size_t>(i - 1)] &&
            fs[static_cast<std::size_t>(i)] < fs[static_cast<std::size_t>(i + 1)])
            ++local_minima;
    }
    ScanResult r;
    r.x = xs[static_cast<std::size_t>(best)];
    r.fx = fs[static_cast<std::size_t>(best)];
    r.unimodal = local_minima <= 1;
    r.grid_lo = xs[static_cast<std::size_t>(std::max(0, best - 1))];
    r.grid_hi = xs[static_cast<std::size_t>(std::min(n - 1, best + 1))];
    return r;
}

}  // namespace mulctl::quad
