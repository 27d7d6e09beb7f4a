#pragma once

// Scalar plant X' = aX - u with multiplicative observation Y = ZX.
//
// States carry sign, log-magnitude and (while representable) the plain
// magnitude.  Stepping happens in real arithmetic, so exact cancellation
// lands on sign = 0; trajectories that leave |X| <= DIVERGENCE_CAP are
// frozen and flagged instead of erroring, which keeps the log-magnitude
// history usable for growth-rate estimates.

#include <cmath>
#include <cstdint>
#include <limits>
#include <memory>
#include <stdexcept>
#include <vector>

#include "noise.hpp"
#include "rng.hpp"

namespace mulctl {

inline constexpr double DIVERGENCE_CAP = 1e280;

struct SignedLogState {
    int sign = 0;            // -1, 0, +1
    double log_mag = -std::numeric_limits<double>::infinity();
    double mag = 0.0;        // |X| cached for exact real round-trips

    static SignedLogState from_real(double x) {
        SignedLogState s;
        if (x == 0.0) return s;
        s.sign = x > 0.0 ? 1 : -1;
        s.mag = std::abs(x);
        s.log_mag = std::log(s.mag);
        return s;
    }
    // Construct from log-domain data; used by closed-form log-domain
    // evolutions whose magnitudes may not be representable as doubles.
    static SignedLogState from_log(int sign, double log_mag) {
        SignedLogState s;
        if (sign == 0) return s;
        s.sign = sign > 0 ? 1 : -1;
        s.log_mag = log_mag;
        s.mag = std::exp(log_mag);
        return s;
    }
    static SignedLogState zero() { return SignedLogState{}; }

    double to_real() const { return sign * mag; }
    bool is_zero() const { return sign == 0; }
};

struct StepResult {
    SignedLogState next;
    double y = 0.0;  // observation emitted from the pre-step state
};

// One step of S_a.  Real-arithmetic contract: when |aX| and u are ordinary
// doubles the update is a single rounded subtraction (<= 1 ulp), so exact
// cancellation yields the absorbing zero state.
inline StepResult step(double a, const SignedLogState& x, double z, double u) {
    if (!std::isfinite(u))
        throw std::invalid_argument("step: control must be finite");
    const double xr = x.to_real();
    const double ax = a * xr;
    if (!std::isfinite(ax))
        throw std::overflow_error(
            "step: |a*X| exceeds the real range; drive this trajectory through a "
            "log-domain controller path instead");
    const double v = ax - u;
    if (!std::isfinite(v))
        throw std::overflow_error(
            "step: intermediate real difference overflowed; drive this trajectory "
            "through a log-domain controller path instead");
    StepResult r;
    r.y = z * xr;
    r.next = SignedLogState::from_real(v);
    return r;
}

// The time-rescaled system S has unit dynamics.
inline StepResult scaled_step(const SignedLogState& x, double z, double u) {
    return step(1.0, x, z, u);
}

// Initial-state law for X_0.
struct InitialState {
    enum class Kind { gaussian, point, inverse_cubic } kind = Kind::gaussian;
    double value = 0.0;  // point mass location
    double M = 10.0;     // inverse-cubic support edge: density c|x|^-3 on 1<=|x|<=M

    static InitialState standard_gaussian() { return InitialState{}; }
    static InitialState point(double v) { return InitialState{Kind::point, v, 0.0}; }
    static InitialState inverse_cubic(double M) {
        if (M <= 1.0) throw std::invalid_argument("inverse_cubic: need M > 1");
        return InitialState{Kind::inverse_cubic, 0.0, M};
    }

    double sample(RandomStream& rng) const {
        switch (kind) {
            case Kind::gaussian: return rng.normal();
            case Kind::point: return value;
            case Kind::inverse_cubic: {
                const double sign = rng.uniform01() < 0.5 ? -1.0 : 1.0;
                const double u = rng.uniform01();
                return sign / std::sqrt(1.0 - u * (1.0 - 1.0 / (M * M)));
            }
        }
        return 0.0;
    }

    double mean_sq() const {
        switch (kind) {
            case Kind::gaussian: return 1.0;
            case Kind::point: return value * value;
            case Kind::inverse_cubic: return 2.0 * std::log(M) / (1.0 - 1.0 / (M * M));
        }
        return 0.0;
    }
};

// Feedback strategy fed only (n, Y_n); anything else it wants must be
// constructor state.  Instances hold per-trajectory memory: clone per trial.
class Strategy {
public:
    virtual ~Strategy() = default;
    virtual double control(int n, double y) = 0;
    virtual std::unique_ptr<Strategy> clone() const = 0;
};

struct Trajectory {
    std::vector<SignedLogState> states;  // length horizon + 1
    std::vector<double> y, u, z;         // length horizon (z kept for oracles)
    std::uint64_t seed = 0;
    bool diverged = false;
    int diverged_at = -1;
};

// Simulate S_a for `horizon` steps.  After divergence the state freezes, the
// strategy is no longer consulted and placeholder y/u/z rows are recorded.
inline Trajectory simulate(double a, const NoiseModel& model, Strategy& strategy,
                           double x0, int horizon, RandomStream& rng,
                           std::uint64_t seed_tag = 0) {
    Trajectory t;
    t.seed = seed_tag;
    t.states.reserve(static_cast<std::size_t>(horizon) + 1);
    t.y.reserve(static_cast<std::size_t>(horizon));
    t.u.reserve(static_cast<std::size_t>(horizon));
    t.z.reserve(static_cast<std::size_t>(horizon));
    SignedLogState x = SignedLogState::from_real(x0);
    t.states.push_back(x);
    const double nan = std::numeric_limits<double>::quiet_NaN();
    for (int n = 0; n < horizon; ++n) {
        if (t.diverged) {
            t.states.push_back(x);
            t.y.push_back(nan);
            t.u.push_back(0.0);
            t.z.push_back(nan);
            continue;
        }
        const double z = model.sample(rng);
        const double y = z * x.to_real();
        const double u = strategy.control(n, y);
        const StepResult r = step(a, x, z, u);
        x = r.next;
        t.states.push_back(x);
        t.y.push_back(y);
        t.u.push_back(u);
        t.z.push_back(z);
        if (x.mag > DIVERGENCE_CAP) {
            t.diverged = true;
            t.diverged_at = n + 1;
        }
    }
    return t;
}

}  // namespace mulctl
