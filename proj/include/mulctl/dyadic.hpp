#pragma once

// Exact dyadic-interval arithmetic on IEEE doubles.
//
// The genie construction in converse.hpp tracks half-open intervals
// I = [h/2^k, (h+1)/2^k) and needs containment and separation predicates that
// are *exact*, not merely accurate: a decision flipped by one rounding error
// would silently break the invariants the rest of the pipeline certifies.
// Everything here therefore reduces to two primitives that are exact in IEEE
// arithmetic:
//
//   - dyadic_floor(x, k): the largest multiple of 2^-k that is <= x.  For
//     moderate |k| this is floor(ldexp(x, k)) scaled back (every intermediate
//     is exact because |x * 2^k| < 2^53); once 2^-k falls below the ulp of x,
//     x already lies on the grid and is returned unchanged.
//
//   - exact_sign(terms): the sign of an exact sum of doubles, via repeated
//     error-free VecSum transformations (each pass rewrites the vector while
//     preserving its exact sum) until the leading component dominates the
//     rest in absolute value.
//
// Levels are capped at |k| <= 1000 so that 2^-k, 2^(1-k) and h * 2^-k all stay
// inside the double range with margin.

#include <cmath>
#include <cstddef>
#include <stdexcept>
#include <vector>

namespace mulctl::dyadic {

inline constexpr int kMaxLevel = 1000;

// Error-free transform: a + b == sum + err exactly, for any finite doubles.
struct TwoSum {
    double sum, err;
};

inline TwoSum two_sum(double a, double b) {
    const double s = a + b;
    const double bv = s - a;
    const double av = s - bv;
    return {s, (a - av) + (b - bv)};
}

// Sign of the exact (infinitely precise) value of sum(terms).
// Terms must be finite.  Runs repeated VecSum distillation passes; each pass
// is a chain of two_sum transforms that leaves the exact sum unchanged and
// concentrates magnitude in the last slot.  Once |last| > 2 * sum|rest| the
// sign of the exact sum equals the sign of the last slot: the exact sum is
// last + r with |r| <= sum|rest| * (1 + eps)^n < |last|.
inline int exact_sign(std::vector<double> terms) {
    for (int pass = 0; pass < 200; ++pass) {
        std::size_t m = 0;
        for (double t : terms)
            if (t != 0.0) terms[m++] = t;
        terms.resize(m);
        if (m == 0) return 0;
        if (m == 1) return terms[0] > 0.0 ? 1 : -1;
        for (std::size_t i = 1; i < m; ++i) {
            const TwoSum ts = two_sum(terms[i], terms[i - 1]);
            terms[i] = ts.sum;
            terms[i - 1] = ts.err;
        }
        const double top = terms[m - 1];
        double rest = 0.0;
        for (std::size_t i = 0; i + 1 < m; ++i) rest += std::abs(terms[i]);
        if (std::abs(top) > 2.0 * rest) return top > 0.0 ? 1 : -1;
    }
    throw std::logic_error("exact_sign: distillation did not converge");
}

inline int exact_sign(double a, double b, double c) {
    return exact_sign(std::vector<double>{a, b, c});
}

// Largest multiple of 2^-k not exceeding x.  Exact for |k| <= kMaxLevel.
inline double dyadic_floor(double x, int k) {
    if (k < -kMaxLevel || k > kMaxLevel)
        throw std::invalid_argument("dyadic_floor: level out of range");
    if (!std::isfinite(x))
        throw std::invalid_argument("dyadic_floor: non-finite input");
    if (x == 0.0) return 0.0;
    int e = 0;
    (void)std::frexp(x, &e);  // x = m * 2^e with |m| in [1/2, 1)
    // ulp(x) = 2^(e-53); if it is at least the grid step, x is on the grid.
    if (e - 53 >= -k) return x;
    const double scaled = std::ldexp(x, k);  // exact: |scaled| < 2^53
    return std::ldexp(std::floor(scaled), -k);
}

// Half-open interval [h * 2^-k, (h+1) * 2^-k).  h is an integer held exactly
// in a double (its magnitude can exceed 2^53 bits-of-index territory only via
// the exponent, never the mantissa, so the representation stays exact).
struct DyadicInterval {
    int k = 0;
    double h = 0.0;

    double lo() const { return std::ldexp(h, -k); }
    double width() const { return std::ldexp(1.0, -k); }
    // Midpoint, rounded; used only for monitored statistics, never decisions.
    double mid() const { return lo() + std::ldexp(1.0, -(k + 1)); }

    // The level-k interval containing x.
    static DyadicInterval level_of(double x, int k) {
        const double lo = dyadic_floor(x, k);
        const double h = std::ldexp(lo, k);  // exact: same mantissa as lo
        if (!std::isfinite(h))
            throw std::overflow_error("DyadicInterval: index overflow");
        return {k, h};
    }

    // Exact: lo <= x < lo + 2^-k.  (lo + 2^-k need not be representable,
    // hence the exact_sign form.)
    bool contains(double x) const {
        const double l = lo();
        if (x < l) return false;
        return exact_sign(l, width(), -x) > 0;
    }

    // Exact test of d([lo, hi), s) >= 2^-k, i.e.
    //   s <= lo - 2^-k   or   s >= lo + 2 * 2^-k.
    bool separated_from(double s) const {
        const double l = lo();
        const double w = width();
        if (exact_sign(l, -w, -s) >= 0) return true;
        return exact_sign(s, -l, -2.0 * w) >= 0;
    }
};

}  // namespace mulctl::dyadic
