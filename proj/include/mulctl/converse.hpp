#pragma once

// Genie-aided converse experiments on the scaled system.
//
// A trace follows one closed-loop run of the scaled plant X_{n+1} = X_n - U_n
// from the controller's point of view and, in parallel, a "genie" that always
// knows the initial state X_0.  At each step n the genie publishes the dyadic
// interval I_n = [H_n / 2^{K_n}, (H_n + 1) / 2^{K_n}) around X_0, choosing the
// minimal level K_n > K_{n-1} (K_0 >= 0) whose interval is separated from the
// controller's running control sum S_n = sum_{i<n} U_i by at least its own
// width.  That single refinement rule yields the invariants the experiments
// certify:
//
//   - X_0 in I_n and K_n strictly increasing;
//   - 2^{-K_n} <= |X_0 - S_n|, and |X_0 - S_n| <= 2^{2-K_n} whenever the
//     level jumped by more than one;
//   - the interval-ratio property: X_n / t in [1/2, 2] for all t in I_n - S_n.
//
// Interval decisions are exact (see dyadic.hpp); the trace is flagged
// "captured" if some S_n equals X_0 bit for bit (no separating level exists)
// and "truncated" if the level search passes the dyadic cap.
//
// Alongside the intervals the trace carries two monitored statistics:
// eta_n, the standard-normal log-density increment across I_n, and Psi_n, a
// level-weighted sum of the noise scores |z phi'(z)|.  Psi_n is a running
// diagnostic for the density-ratio argument, not a certified bound: the
// constants (c1, c2, c3, delta) are configuration inputs and psilem_check
// reports how e^{Psi_n 2^{-T}} behaves under them.

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <exception>
#include <limits>
#include <memory>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include "dyadic.hpp"
#include "montecarlo.hpp"

namespace mulctl::converse {

struct GenieConstants {
    double c1 = 2.0;
    double c2 = 2.0;
    double c3 = 1.0;
    double delta = 1.0;

    double delta_prime() const { return delta / (1.0 + delta); }
};

// Smallest integer T satisfying the psi-lemma precondition
// 2^{1-T} c2 c3 < delta'/2.
inline int minimal_psilem_t(const GenieConstants& c) {
    if (!(c.c2 > 0.0) || !(c.c3 > 0.0) || !(c.delta > 0.0))
        throw std::invalid_argument("minimal_psilem_t: constants must be positive");
    const double bound = c.delta_prime() / (2.0 * c.c2 * c.c3);
    int t = static_cast<int>(std::floor(1.0 - std::log2(bound))) + 1;
    while (std::ldexp(1.0, 1 - t) >= bound) ++t;
    while (std::ldexp(1.0, 1 - (t - 1)) < bound) --t;
    return t;
}

struct GenieTrace {
    double x0 = 0.0;
    std::vector<double> s;    // S_n = sum_{i<n} U_i
    std::vector<int> k;       // K_n, strictly increasing
    std::vector<double> h;    // H_n, exact integer-valued doubles
    std::vector<double> eta;  // N(0,1) log-density increment across I_n
    std::vector<double> psi;  // Psi_n; one entry per observation (n = 0..N-1)
    GenieConstants constants{};
    bool captured = false;   // some S_n equalled X_0 bit for bit
    bool truncated = false;  // level search exceeded the dyadic cap
};

// Appends the genie state for the next step.  s_next is the controller's
// running control sum S_n.  Finds the minimal admissible level, records
// (S_n, K_n, H_n, eta_n), and returns true.  Returns false without appending
// when the step cannot be produced: S_n == X_0 exactly (captured; the state
// lies inside every interval around itself, so no level separates) or no
// level under the dyadic cap separates (truncated).
inline bool advance_genie(GenieTrace& tr, double x0, double s_next) {
    if (tr.captured || tr.truncated)
        throw std::logic_error("advance_genie: trace already ended");
    if (s_next == x0) {
        tr.captured = true;
        return false;
    }
    const int k_start = tr.k.empty() ? 0 : tr.k.back() + 1;
    for (int k = k_start; k <= dyadic::kMaxLevel; ++k) {
        const auto iv = dyadic::DyadicInterval::level_of(x0, k);
        if (!iv.separated_from(s_next)) continue;
        if (!iv.contains(x0))
            throw std::logic_error("advance_genie: containment invariant violated");
        tr.s.push_back(s_next);
        tr.k.push_back(k);
        tr.h.push_back(iv.h);
        // eta_n = log f(lo) - log f(hi) for the standard-normal density f:
        // (hi^2 - lo^2) / 2 = 2^{-k} * (lo + 2^{-(k+1)}).
        tr.eta.push_back(std::ldexp(iv.mid(), -k));
        return true;
    }
    tr.truncated = true;
    return false;
}

// Appends Psi_n = Psi_{n-1} 2^{K_{n-1}-K_n} + 2 c3 |z_n phi'(z_n)| (with
// Psi_0 = 2 c3 |z_0 phi'(z_0)|) and returns it.  Must be called once per
// observation, after advance_genie has produced K_n.
inline double psi_update(GenieTrace& tr, double z, const NoiseModel& model) {
    if (tr.k.size() != tr.psi.size() + 1)
        throw std::logic_error("psi_update: called out of phase with advance_genie");
    double psi = 2.0 * tr.constants.c3 * std::abs(z * model.phi_prime(z));
    if (!tr.psi.empty()) {
        const std::size_t n = tr.psi.size();
        psi += std::ldexp(tr.psi.back(), tr.k[n - 1] - tr.k[n]);
    }
    tr.psi.push_back(psi);
    return psi;
}

// Direct (non-incremental) evaluation of the same quantity from the raw
// observations: Psi_n = sum_{i<=n} 2^{K_i+1-K_n} c3 |z_i phi'(z_i)|.
inline double psi_direct(const GenieTrace& tr, const std::vector<double>& z,
                         const NoiseModel& model, std::size_t n) {
    if (n >= tr.k.size() || n >= z.size())
        throw std::out_of_range("psi_direct: step out of range");
    double acc = 0.0;
    for (std::size_t i = 0; i <= n; ++i) {
        const double w = 2.0 * tr.constants.c3 * std::abs(z[i] * model.phi_prime(z[i]));
        acc += std::ldexp(w, tr.k[i] - tr.k[n]);
    }
    return acc;
}

// Endpoint form of the interval-ratio check: both ratios x / t_lo and
// x / t_hi must lie in [1/2, 2].
inline bool ratiot_endpoints_ok(double t_lo, double t_hi, double x) {
    if (t_lo == 0.0 || t_hi == 0.0) return false;
    const double r_lo = x / t_lo;
    const double r_hi = x / t_hi;
    return r_lo >= 0.5 && r_lo <= 2.0 && r_hi >= 0.5 && r_hi <= 2.0;
}

// Interval-ratio property at step n: for every t in I_n - S_n the ratio
// x_n / t lies in [1/2, 2]; monotonicity in t makes the endpoints sufficient.
// x_n is the scaled state (x0 - S_n in exact arithmetic).  The difference
// lo - S_n is computed in plain doubles: whenever it is small enough for
// rounding to matter the two operands are within a factor of two of each
// other and the subtraction is exact (Sterbenz).
inline bool verify_ratiot(const GenieTrace& tr, std::size_t n, double x_n) {
    if (n >= tr.k.size())
        throw std::out_of_range("verify_ratiot: step out of range");
    const dyadic::DyadicInterval iv{tr.k[n], tr.h[n]};
    const double t_lo = iv.lo() - tr.s[n];
    const double t_hi = t_lo + iv.width();
    return ratiot_endpoints_ok(t_lo, t_hi, x_n);
}

struct InvariantAudit {
    long traces = 0;
    long captured = 0;
    long truncated = 0;
    long steps = 0;       // genie steps audited
    long violations = 0;  // total failed checks
    std::string first_failure;
};

// Re-checks every deterministic trace invariant from scratch: containment,
// strict level growth, separation, the inbound distance in both directions
// (exact sign arithmetic), the interval-ratio property, and the eta bound.
// The eta bound 2^{3-n}|x0| is derived for starts with |x0| bounded by a few
// units (standard-normal territory); it is audited when |x0| <= 5 and skipped
// beyond, where the constant 8 in its derivation no longer dominates.
inline InvariantAudit audit_invariants(const std::vector<GenieTrace>& traces) {
    InvariantAudit audit;
    auto fail = [&](const char* what, std::size_t n) {
        ++audit.violations;
        if (audit.first_failure.empty())
            audit.first_failure = std::string(what) + " at step " + std::to_string(n) +
                                  " of trace " + std::to_string(audit.traces);
    };
    for (const auto& tr : traces) {
        audit.captured += tr.captured;
        audit.truncated += tr.truncated;
        for (std::size_t n = 0; n < tr.k.size(); ++n) {
            const dyadic::DyadicInterval iv{tr.k[n], tr.h[n]};
            if (n > 0 && tr.k[n] <= tr.k[n - 1]) fail("level growth", n);
            if (!iv.contains(tr.x0)) fail("containment", n);
            if (!iv.separated_from(tr.s[n])) fail("separation", n);
            const int sgn = dyadic::exact_sign(std::vector<double>{tr.x0, -tr.s[n]});
            if (sgn == 0) {
                fail("inbound sign", n);
                continue;
            }
            const double sx0 = sgn > 0 ? tr.x0 : -tr.x0;
            const double ss = sgn > 0 ? -tr.s[n] : tr.s[n];
            if (dyadic::exact_sign(sx0, ss, -std::ldexp(1.0, -tr.k[n])) < 0)
                fail("inbound lower", n);
            if (n > 0 && tr.k[n] > tr.k[n - 1] + 1 &&
                dyadic::exact_sign(std::ldexp(1.0, 2 - tr.k[n]), -sx0, -ss) < 0)
                fail("inbound upper", n);
            if (!verify_ratiot(tr, n, tr.x0 - tr.s[n])) fail("interval ratio", n);
            if (std::abs(tr.x0) <= 5.0 &&
                std::abs(tr.eta[n]) >
                    std::ldexp(std::abs(tr.x0), 3 - static_cast<int>(n)))
                fail("eta bound", n);
            ++audit.steps;
        }
        ++audit.traces;
    }
    return audit;
}

// One closed-loop trace of the scaled system with the genie alongside.
// On a clean run s/k/h/eta have horizon+1 entries and psi has horizon; a
// captured or truncated trace ends at the step where the flag was raised.
inline GenieTrace run_genie(const NoiseModel& model, Strategy& strategy, double x0,
                            int horizon, RandomStream& rng,
                            GenieConstants constants = {}) {
    if (horizon < 1) throw std::invalid_argument("run_genie: horizon must be >= 1");
    GenieTrace tr;
    tr.constants = constants;
    tr.x0 = x0;
    double s = 0.0;
    for (int n = 0; n <= horizon; ++n) {
        if (!advance_genie(tr, x0, s)) break;
        if (n == horizon) break;
        const double z = model.sample(rng);
        psi_update(tr, z, model);
        const double u = strategy.control(n, z * (x0 - s));
        if (!std::isfinite(u))
            throw std::invalid_argument("run_genie: strategy produced a non-finite control");
        s += u;
    }
    return tr;
}

struct GenieConfig {
    long trials = 1000;
    int horizon = 100;
    NoiseModel model = NoiseModel::gaussian_mean_one(1.0);
    std::shared_ptr<const Strategy> strategy;  // scaled-form control law
    InitialState x0 = InitialState::standard_gaussian();
    std::uint64_t base_seed = 1;
    GenieConstants constants{};
    long step_budget = 1'000'000'000;
    int threads = 1;
};

inline std::vector<GenieTrace> run_genie_ensemble(const GenieConfig& cfg) {
    if (!cfg.strategy) throw std::invalid_argument("genie ensemble: strategy is required");
    if (cfg.trials < 1) throw std::invalid_argument("genie ensemble: trials must be >= 1");
    if (cfg.horizon < 1) throw std::invalid_argument("genie ensemble: horizon must be >= 1");
    if (cfg.threads < 1) throw std::invalid_argument("genie ensemble: threads must be >= 1");
    if (cfg.step_budget < 1 || cfg.trials > cfg.step_budget / (cfg.horizon + 1))
        throw std::invalid_argument(
            "genie ensemble: trials * horizon exceeds step_budget; raise the budget "
            "or shrink the run");

    std::vector<GenieTrace> out(static_cast<std::size_t>(cfg.trials));
    std::atomic<long> next{0};
    std::vector<std::exception_ptr> errors(static_cast<std::size_t>(cfg.threads));
    auto worker = [&](std::size_t slot) {
        try {
            for (;;) {
                const long t = next.fetch_add(1);
                if (t >= cfg.trials) return;
                RandomStream noise_rng =
                    RandomStream::for_trial(cfg.base_seed, static_cast<std::uint64_t>(t), 0);
                RandomStream x0_rng =
                    RandomStream::for_trial(cfg.base_seed, static_cast<std::uint64_t>(t), 1);
                const double x0 = cfg.x0.sample(x0_rng);
                auto strat = cfg.strategy->clone();
                out[static_cast<std::size_t>(t)] =
                    run_genie(cfg.model, *strat, x0, cfg.horizon, noise_rng, cfg.constants);
            }
        } catch (...) {
            errors[slot] = std::current_exception();
        }
    };
    if (cfg.threads == 1) {
        worker(0);
    } else {
        std::vector<std::thread> pool;
        pool.reserve(static_cast<std::size_t>(cfg.threads));
        for (int i = 0; i < cfg.threads; ++i) pool.emplace_back(worker, static_cast<std::size_t>(i));
        for (auto& th : pool) th.join();
    }
    for (const auto& err : errors)
        if (err) std::rethrow_exception(err);
    return out;
}

struct PsilemReport {
    int t = 0;          // statistic is exp(Psi_n * 2^{-t})
    int minimal_t = 0;  // smallest admissible t for these constants
    double max_mean = 0.0;
    int argmax_n = 0;
    double slope = std::numeric_limits<double>::quiet_NaN();  // tail trend of the mean
    double slope_lo = std::numeric_limits<double>::quiet_NaN();
    double slope_hi = std::numeric_limits<double>::quiet_NaN();
    bool pass = false;  // slope CI contains zero or is entirely negative
    double analytic_cap = 0.0;
    long traces_used = 0;
};

namespace detail {

// Complete traces: the ones whose series reached the full horizon.  Captured
// or truncated runs end early and would bias the per-step means.
template <typename Len>
inline std::vector<const GenieTrace*> complete_traces(const std::vector<GenieTrace>& traces,
                                                      Len len_of, std::size_t& len_out) {
    std::size_t len = 0;
    for (const auto& tr : traces) len = std::max(len, len_of(tr));
    std::vector<const GenieTrace*> use;
    for (const auto& tr : traces)
        if (len_of(tr) == len) use.push_back(&tr);
    len_out = len;
    return use;
}

}  // namespace detail

// Ensemble diagnostic for the psi lemma at exponent t: the per-step ensemble
// means of exp(Psi_n 2^{-t}), their maximum over n, and the trend of the mean
// over the tail half of the horizon (per-trace slope bootstrap CI).  The
// analytic cap is the geometric-domination ceiling
//   exp(4 c3 c1) * prod_{i>=0} (1 + C 2^{-i}),  C = 2^{3-t} c2 c3 / delta'^2,
// valid when the score obeys |z phi'(z)| <= c1 + c2 phi(z) on the support.
inline PsilemReport psilem_check(const std::vector<GenieTrace>& traces, int t,
                                 int bootstrap_resamples = 1000,
                                 std::uint64_t bootstrap_seed = 1) {
    if (traces.empty()) throw std::invalid_argument("psilem_check: empty ensemble");
    const GenieConstants c = traces.front().constants;
    PsilemReport rep;
    rep.t = t;
    rep.minimal_t = minimal_psilem_t(c);
    if (t < rep.minimal_t)
        throw std::invalid_argument(
            "psilem_check: T=" + std::to_string(t) +
            " violates 2^(1-T) c2 c3 < delta'/2; minimal admissible T is " +
            std::to_string(rep.minimal_t));

    std::size_t len = 0;
    const auto use = detail::complete_traces(
        traces, [](const GenieTrace& tr) { return tr.psi.size(); }, len);
    if (len < 4) throw std::invalid_argument("psilem_check: traces too short");
    rep.traces_used = static_cast<long>(use.size());

    const double scale = std::ldexp(1.0, -t);
    const double inv = 1.0 / static_cast<double>(use.size());
    std::vector<double> mean(len, 0.0);
    for (const GenieTrace* tr : use)
        for (std::size_t n = 0; n < len; ++n) mean[n] += std::exp(tr->psi[n] * scale);
    for (std::size_t n = 0; n < len; ++n) {
        mean[n] *= inv;
        if (mean[n] > rep.max_mean) {
            rep.max_mean = mean[n];
            rep.argmax_n = static_cast<int>(n);
        }
    }

    const std::size_t tail_start = len / 2;
    std::vector<double> xs;
    for (std::size_t n = tail_start; n < len; ++n) xs.push_back(static_cast<double>(n));
    std::vector<double> trace_slopes;
    trace_slopes.reserve(use.size());
    std::vector<double> ys(xs.size());
    mc::detail::Kahan slope_sum;
    for (const GenieTrace* tr : use) {
        for (std::size_t j = 0; j < xs.size(); ++j)
            ys[j] = std::exp(tr->psi[tail_start + j] * scale);
        const double sl = mc::detail::ols_slope(xs, ys);
        trace_slopes.push_back(sl);
        slope_sum.add(sl);
    }
    rep.slope = slope_sum.value() / static_cast<double>(use.size());
    if (bootstrap_resamples > 0 && use.size() > 1) {
        RandomStream boot = RandomStream::for_trial(bootstrap_seed, 0, 2);
        std::vector<double> means;
        means.reserve(static_cast<std::size_t>(bootstrap_resamples));
        for (int r = 0; r < bootstrap_resamples; ++r) {
            mc::detail::Kahan acc;
            for (std::size_t i = 0; i < trace_slopes.size(); ++i)
                acc.add(trace_slopes[static_cast<std::size_t>(boot.next_u64() %
                                                              trace_slopes.size())]);
            means.push_back(acc.value() / static_cast<double>(trace_slopes.size()));
        }
        const auto ci = mc::detail::percentile_ci(means);
        rep.slope_lo = ci.first;
        rep.slope_hi = ci.second;
    } else {
        rep.slope_lo = rep.slope;
        rep.slope_hi = rep.slope;
    }
    rep.pass = rep.slope_lo <= 0.0;

    const double dp = c.delta_prime();
    const double cap_c = std::ldexp(1.0, 3 - t) * c.c2 * c.c3 / (dp * dp);
    double prod = 1.0;
    for (int i = 0; i < 1200; ++i) {
        const double term = cap_c * std::ldexp(1.0, -i);
        if (term < 1e-18) break;
        prod *= 1.0 + term;
    }
    rep.analytic_cap = std::exp(4.0 * c.c3 * c.c1) * prod;
    return rep;
}

struct KnGrowthReport {
    double slope = std::numeric_limits<double>::quiet_NaN();  // mean (K_n - K_0) per step
    std::vector<int> ns;                           // exceedance checkpoints
    std::vector<double> candidates;                // linear-rate candidates C
    std::vector<std::vector<double>> exceedance;   // [candidate][checkpoint]
    long traces_used = 0;
};

// Growth rate of the refinement level: OLS slope of the ensemble mean of
// K_n - K_0 against n, plus exceedance frequencies P(K_n - K_0 > C n) on a
// candidate grid (default: slope, slope+1, slope+2) at quarter-horizon
// checkpoints.  A candidate whose exceedance vanishes with n witnesses a
// linear cap on the genie's refinement rate.
inline KnGrowthReport kn_growth(const std::vector<GenieTrace>& traces,
                                std::vector<double> candidates = {}) {
    if (traces.empty()) throw std::invalid_argument("kn_growth: empty ensemble");
    std::size_t len = 0;
    const auto use = detail::complete_traces(
        traces, [](const GenieTrace& tr) { return tr.k.size(); }, len);
    if (len < 4) throw std::invalid_argument("kn_growth: traces too short");
    KnGrowthReport rep;
    rep.traces_used = static_cast<long>(use.size());

    std::vector<double> xs(len), mean_gap(len, 0.0);
    const double inv = 1.0 / static_cast<double>(use.size());
    for (std::size_t n = 0; n < len; ++n) xs[n] = static_cast<double>(n);
    for (const GenieTrace* tr : use)
        for (std::size_t n = 0; n < len; ++n)
            mean_gap[n] += static_cast<double>(tr->k[n] - tr->k[0]);
    for (double& g : mean_gap) g *= inv;
    rep.slope = mc::detail::ols_slope(xs, mean_gap);

    if (candidates.empty())
        candidates = {rep.slope, rep.slope + 1.0, rep.slope + 2.0};
    rep.candidates = candidates;
    for (std::size_t q = 1; q <= 4; ++q) {
        const int n = static_cast<int>((len - 1) * q / 4);
        if (n >= 1 && (rep.ns.empty() || rep.ns.back() != n)) rep.ns.push_back(n);
    }
    rep.exceedance.assign(candidates.size(), std::vector<double>(rep.ns.size(), 0.0));
    for (std::size_t ci = 0; ci < candidates.size(); ++ci) {
        for (std::size_t j = 0; j < rep.ns.size(); ++j) {
            const int n = rep.ns[j];
            long over = 0;
            for (const GenieTrace* tr : use)
                if (static_cast<double>(tr->k[static_cast<std::size_t>(n)] - tr->k[0]) >
                    candidates[ci] * n)
                    ++over;
            rep.exceedance[ci][j] = static_cast<double>(over) * inv;
        }
    }
    return rep;
}

// Tightness probe on the scaled system: empirical P(|X_n| < M a^{-n}) for
// each n, which equals the probability that the unscaled state of the
// corresponding growth-a plant sits below M.  The strategy must be supplied
// in scaled form.
inline std::vector<double> instability_probe(double a, double m_bound,
                                             const NoiseModel& model,
                                             const std::shared_ptr<const Strategy>& strategy,
                                             const InitialState& x0, long trials, int horizon,
                                             std::uint64_t base_seed,
                                             long step_budget = 1'000'000'000) {
    if (!(a > 1.0)) throw std::invalid_argument("instability_probe: a must exceed 1");
    if (!(m_bound > 0.0)) throw std::invalid_argument("instability_probe: M must be positive");
    if (!strategy) throw std::invalid_argument("instability_probe: strategy is required");
    if (trials < 1 || horizon < 1)
        throw std::invalid_argument("instability_probe: trials and horizon must be >= 1");
    if (step_budget < 1 || trials > step_budget / (horizon + 1))
        throw std::invalid_argument(
            "instability_probe: trials * horizon exceeds step_budget");

    const double log_a = std::log(a);
    std::vector<double> log_thr(static_cast<std::size_t>(horizon) + 1);
    for (int n = 0; n <= horizon; ++n)
        log_thr[static_cast<std::size_t>(n)] = std::log(m_bound) - n * log_a;

    std::vector<long> hits(static_cast<std::size_t>(horizon) + 1, 0);
    for (long t = 0; t < trials; ++t) {
        RandomStream noise_rng =
            RandomStream::for_trial(base_seed, static_cast<std::uint64_t>(t), 0);
        RandomStream x0_rng =
            RandomStream::for_trial(base_seed, static_cast<std::uint64_t>(t), 1);
        auto strat = strategy->clone();
        const Trajectory tr =
            simulate(1.0, model, *strat, x0.sample(x0_rng), horizon, noise_rng);
        for (int n = 0; n <= horizon; ++n) {
            const auto& st = tr.states[static_cast<std::size_t>(n)];
            if (st.is_zero() || st.log_mag < log_thr[static_cast<std::size_t>(n)])
                ++hits[static_cast<std::size_t>(n)];
        }
    }
    std::vector<double> prob(hits.size());
    for (std::size_t n = 0; n < hits.size(); ++n)
        prob[n] = static_cast<double>(hits[n]) / static_cast<double>(trials);
    return prob;
}

}  // namespace mulctl::converse
