#pragma once

// Seeded Monte Carlo ensembles over the controlled plant: second-moment
// series kept in log-sum-exp form, tightness probability curves, growth-rate
// slopes with bootstrap confidence intervals, stability verdicts, bisection
// for the empirical stability transition, and CLT diagnostics for the
// log-magnitude random walk under memoryless linear control.
//
// Reproducibility contract: the streams for trial t are derived from
// (base_seed, t) alone, trials are aggregated per block in index order, and
// blocks are merged in index order, so a given config produces bit-identical
// reports regardless of thread count or scheduling.
//
// Heavy-tail honesty: sampled second moments of near-critical ensembles are
// dominated by a handful of trials.  Every per-step mean carries an effective
// sample size ESS_n = (sum w)^2 / sum w^2 with w = X_n^2, and growth/decay is
// certified only from the pooled one-step ratio over the window of steps
// whose ESS stays above ess_min; outside that window the verdict machinery
// refuses to certify and falls back to inconclusive.

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <map>
#include <memory>
#include <stdexcept>
#include <thread>
#include <utility>
#include <vector>

#include "controllers.hpp"
#include "noise.hpp"
#include "rng.hpp"
#include "system.hpp"

namespace mulctl::mc {

enum class Verdict { second_moment_stable, tight_only, unstable, inconclusive };

inline const char* to_string(Verdict v) {
    switch (v) {
        case Verdict::second_moment_stable: return "second_moment_stable";
        case Verdict::tight_only: return "tight_only";
        case Verdict::unstable: return "unstable";
        case Verdict::inconclusive: return "inconclusive";
    }
    return "inconclusive";
}

struct EnsembleConfig {
    long trials = 1000;
    int horizon = 100;
    double a = 1.0;
    NoiseModel model = NoiseModel::gaussian_mean_one(1.0);
    std::shared_ptr<const Strategy> strategy;  // prototype; cloned per trial
    InitialState x0 = InitialState::standard_gaussian();
    std::uint64_t base_seed = 1;
    int report_every = 1;
    std::vector<double> probes{1e-2, 1.0, 1e2, 1e4};  // tightness thresholds M
    long step_budget = 1'000'000'000;  // horizon * trials guard, checked up front
    int threads = 1;
    double ess_min = 100.0;  // per-step effective-sample-size floor
    int slope_stride = 1;    // fit mean log|X_n| on every stride-th step
    int bootstrap_resamples = 1000;
};

struct SecondMomentRow {
    int n = 0;
    double log_mean = -std::numeric_limits<double>::infinity();  // log E X_n^2
    double mean = 0.0;  // exp(log_mean); may overflow to inf, log_mean is primary
    double se = 0.0;    // standard error of mean; may overflow to inf
    double ess = 0.0;   // effective sample size of the X_n^2 average
};

struct StabilityReport {
    long trials = 0;
    int horizon = 0;
    std::vector<int> ns;  // reported steps: 0, report_every, ..., horizon
    std::vector<SecondMomentRow> second_moment;  // aligned with ns
    std::vector<double> mean_log;     // mean log|X_n| over nonzero trials; NaN if none
    std::vector<double> mean_signed;  // signed mean of X_n (for E X_n checks)
    std::map<double, std::vector<double>> tightness;  // M -> P(|X_n| < M) per ns

    // OLS slope of mean log|X_n| over the last half of the horizon (every
    // slope_stride-th step); CI from 1000-resample per-trial slope bootstrap.
    double slope = std::numeric_limits<double>::quiet_NaN();
    double slope_lo = std::numeric_limits<double>::quiet_NaN();
    double slope_hi = std::numeric_limits<double>::quiet_NaN();
    long slope_trials = 0;  // trials contributing a finite per-trial slope

    // Pooled one-step second-moment log-ratio over the ESS-trusted window:
    // log(sum_{n in W} S2_{n+1} / sum_{n in W} S2_n) with S2_n = sum_t X_n^2.
    double pooled_log_ratio = std::numeric_limits<double>::quiet_NaN();
    double pooled_lo = std::numeric_limits<double>::quiet_NaN();
    double pooled_hi = std::numeric_limits<double>::quiet_NaN();
    int pooled_window = 0;

    double min_ess = 0.0;
    long diverged = 0;
    long end_zero = 0;
    Verdict verdict = Verdict::inconclusive;
};

namespace detail {

inline constexpr double kNegInf = -std::numeric_limits<double>::infinity();
inline constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

// Streaming log-sum-exp accumulator: after add(l_1)...add(l_k),
// log_value() = log(e^{l_1} + ... + e^{l_k}).
struct LogSum {
    double mx = kNegInf;
    double s = 0.0;
    void add(double l) {
        if (s == 0.0) {
            mx = l;
            s = 1.0;
            return;
        }
        if (l <= mx) {
            s += std::exp(l - mx);
        } else {
            s = s * std::exp(mx - l) + 1.0;
            mx = l;
        }
    }
    void merge(const LogSum& o) {
        if (o.s == 0.0) return;
        if (s == 0.0) {
            *this = o;
            return;
        }
        if (o.mx <= mx) {
            s += o.s * std::exp(o.mx - mx);
        } else {
            s = s * std::exp(mx - o.mx) + o.s;
            mx = o.mx;
        }
    }
    double log_value() const { return s <= 0.0 ? kNegInf : mx + std::log(s); }
};

// Signed companion for E X_n: value() = sum_i sign_i e^{l_i}.
struct SignedSum {
    double mx = kNegInf;
    double s = 0.0;
    bool any = false;
    void add(int sign, double l) {
        if (sign == 0) return;
        if (!any) {
            mx = l;
            s = sign;
            any = true;
            return;
        }
        if (l <= mx) {
            s += sign * std::exp(l - mx);
        } else {
            s = s * std::exp(mx - l) + sign;
            mx = l;
        }
    }
    void merge(const SignedSum& o) {
        if (!o.any) return;
        if (!any) {
            *this = o;
            return;
        }
        if (o.mx <= mx) {
            s += o.s * std::exp(o.mx - mx);
        } else {
            s = s * std::exp(mx - o.mx) + o.s;
            mx = o.mx;
        }
    }
    double real_value() const { return any ? s * std::exp(mx) : 0.0; }
};

struct Kahan {
    double s = 0.0, c = 0.0;
    void add(double x) {
        const double y = x - c;
        const double t = s + y;
        c = (t - s) - y;
        s = t;
    }
    double value() const { return s; }
};

// Per-block partial aggregates; one block is always processed by one thread
// in trial-index order, so the final merge over blocks is deterministic.
struct BlockAgg {
    std::vector<LogSum> ls2, ls4;
    std::vector<SignedSum> sgn;
    std::vector<Kahan> sum_log;
    std::vector<long> nonzero;
    std::vector<std::vector<long>> hits;  // [probe][n]
    std::vector<double> trial_slopes;     // in trial order
    long diverged = 0, end_zero = 0;

    BlockAgg(int len, std::size_t n_probes)
        : ls2(len), ls4(len), sgn(len), sum_log(len), nonzero(len, 0),
          hits(n_probes, std::vector<long>(len, 0)) {}
};

inline double ols_slope(const std::vector<double>& xs, const std::vector<double>& ys) {
    const std::size_t n = xs.size();
    if (n < 2) return kNaN;
    double mx = 0.0, my = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        mx += xs[i];
        my += ys[i];
    }
    mx /= static_cast<double>(n);
    my /= static_cast<double>(n);
    double sxx = 0.0, sxy = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        sxx += (xs[i] - mx) * (xs[i] - mx);
        sxy += (xs[i] - mx) * (ys[i] - my);
    }
    if (sxx <= 0.0) return kNaN;
    return sxy / sxx;
}

// 2.5%/97.5% percentile interval by nearest rank.
inline std::pair<double, double> percentile_ci(std::vector<double>& v) {
    if (v.empty()) return {kNaN, kNaN};
    std::sort(v.begin(), v.end());
    const auto r = v.size();
    const auto i_lo = static_cast<std::size_t>(0.025 * static_cast<double>(r - 1));
    const auto i_hi =
        static_cast<std::size_t>(std::ceil(0.975 * static_cast<double>(r - 1)));
    return {v[i_lo], v[i_hi]};
}

inline void validate(const EnsembleConfig& cfg) {
    if (cfg.trials < 1) throw std::invalid_argument("run_ensemble: trials must be >= 1");
    if (cfg.horizon < 1) throw std::invalid_argument("run_ensemble: horizon must be >= 1");
    if (!cfg.strategy) throw std::invalid_argument("run_ensemble: strategy is required");
    if (cfg.report_every < 1)
        throw std::invalid_argument("run_ensemble: report_every must be >= 1");
    if (cfg.slope_stride < 1)
        throw std::invalid_argument("run_ensemble: slope_stride must be >= 1");
    if (cfg.probes.empty())
        throw std::invalid_argument("run_ensemble: need at least one tightness probe");
    for (std::size_t i = 0; i < cfg.probes.size(); ++i) {
        if (!(cfg.probes[i] > 0.0))
            throw std::invalid_argument("run_ensemble: probes must be positive");
        if (i > 0 && !(cfg.probes[i] > cfg.probes[i - 1]))
            throw std::invalid_argument("run_ensemble: probes must be strictly increasing");
    }
    const double steps = static_cast<double>(cfg.trials) * cfg.horizon;
    if (steps > static_cast<double>(cfg.step_budget))
        throw std::invalid_argument(
            "run_ensemble: trials*horizon exceeds step_budget; raise the budget "
            "explicitly to run an ensemble this large");
}

}  // namespace detail

inline StabilityReport run_ensemble(const EnsembleConfig& cfg) {
    using namespace detail;
    validate(cfg);

    const int h = cfg.horizon;
    const int len = h + 1;
    const std::size_t n_probes = cfg.probes.size();

    // Steps whose mean log|X_n| enters the growth-rate fit: every
    // slope_stride-th step in the last half of the horizon.
    std::vector<int> fit_ns;
    {
        const int start = h - h / 2;
        int n0 = ((start + cfg.slope_stride - 1) / cfg.slope_stride) * cfg.slope_stride;
        for (int n = n0; n <= h; n += cfg.slope_stride) fit_ns.push_back(n);
    }
    std::vector<double> fit_xs(fit_ns.begin(), fit_ns.end());

    const long bt = std::clamp<long>((cfg.trials + 63) / 64, 64, 4096);
    const long n_blocks = (cfg.trials + bt - 1) / bt;

    std::vector<BlockAgg> blocks;
    blocks.reserve(static_cast<std::size_t>(n_blocks));
    for (long b = 0; b < n_blocks; ++b) blocks.emplace_back(len, n_probes);

    auto run_block = [&](long b) {
        BlockAgg& agg = blocks[static_cast<std::size_t>(b)];
        std::vector<double> xs, ys;  // per-trial slope scratch
        const long t_end = std::min(cfg.trials, (b + 1) * bt);
        for (long t = b * bt; t < t_end; ++t) {
            RandomStream noise_rng =
                RandomStream::for_trial(cfg.base_seed, static_cast<std::uint64_t>(t), 0);
            RandomStream x0_rng =
                RandomStream::for_trial(cfg.base_seed, static_cast<std::uint64_t>(t), 1);
            const double x0 = cfg.x0.sample(x0_rng);
            auto strat = cfg.strategy->clone();
            const Trajectory tr = simulate(cfg.a, cfg.model, *strat, x0, h, noise_rng,
                                           static_cast<std::uint64_t>(t));
            for (int n = 0; n < len; ++n) {
                const SignedLogState& s = tr.states[static_cast<std::size_t>(n)];
                for (std::size_t p = 0; p < n_probes; ++p)
                    if (s.mag < cfg.probes[p]) ++agg.hits[p][static_cast<std::size_t>(n)];
                agg.sgn[static_cast<std::size_t>(n)].add(s.sign, s.log_mag);
                if (s.sign != 0) {
                    agg.ls2[static_cast<std::size_t>(n)].add(2.0 * s.log_mag);
                    agg.ls4[static_cast<std::size_t>(n)].add(4.0 * s.log_mag);
                    agg.sum_log[static_cast<std::size_t>(n)].add(s.log_mag);
                    ++agg.nonzero[static_cast<std::size_t>(n)];
                }
            }
            if (tr.diverged) ++agg.diverged;
            if (tr.states.back().is_zero()) ++agg.end_zero;

            // Per-trial growth slope over the fit window; frozen post-cap
            // states and absorbing zeros are excluded rather than letting
            // stale values flatten the fit.
            xs.clear();
            ys.clear();
            for (std::size_t i = 0; i < fit_ns.size(); ++i) {
                const int n = fit_ns[i];
                const SignedLogState& s = tr.states[static_cast<std::size_t>(n)];
                if (s.sign == 0) continue;
                if (tr.diverged && n > tr.diverged_at) continue;
                xs.push_back(fit_xs[i]);
                ys.push_back(s.log_mag);
            }
            const double sl = ols_slope(xs, ys);
            if (std::isfinite(sl)) agg.trial_slopes.push_back(sl);
        }
    };

    const int n_workers =
        static_cast<int>(std::min<long>(std::max(1, cfg.threads), n_blocks));
    if (n_workers <= 1) {
        for (long b = 0; b < n_blocks; ++b) run_block(b);
    } else {
        std::atomic<long> next{0};
        std::vector<std::exception_ptr> errors(static_cast<std::size_t>(n_workers));
        std::vector<std::thread> pool;
        pool.reserve(static_cast<std::size_t>(n_workers));
        for (int w = 0; w < n_workers; ++w) {
            pool.emplace_back([&, w] {
                try {
                    long b;
                    while ((b = next.fetch_add(1)) < n_blocks) run_block(b);
                } catch (...) {
                    errors[static_cast<std::size_t>(w)] = std::current_exception();
                }
            });
        }
        for (auto& th : pool) th.join();
        for (const auto& e : errors)
            if (e) std::rethrow_exception(e);
    }

    // Merge blocks in index order (bit-stable reduction tree).
    std::vector<LogSum> ls2(static_cast<std::size_t>(len)),
        ls4(static_cast<std::size_t>(len));
    std::vector<SignedSum> sgn(static_cast<std::size_t>(len));
    std::vector<Kahan> sum_log(static_cast<std::size_t>(len));
    std::vector<long> nonzero(static_cast<std::size_t>(len), 0);
    std::vector<std::vector<long>> hits(n_probes,
                                        std::vector<long>(static_cast<std::size_t>(len), 0));
    std::vector<double> trial_slopes;
    long diverged = 0, end_zero = 0;
    for (const BlockAgg& b : blocks) {
        for (int n = 0; n < len; ++n) {
            const auto un = static_cast<std::size_t>(n);
            ls2[un].merge(b.ls2[un]);
            ls4[un].merge(b.ls4[un]);
            sgn[un].merge(b.sgn[un]);
            sum_log[un].add(b.sum_log[un].value());
            nonzero[un] += b.nonzero[un];
            for (std::size_t p = 0; p < n_probes; ++p) hits[p][un] += b.hits[p][un];
        }
        trial_slopes.insert(trial_slopes.end(), b.trial_slopes.begin(),
                            b.trial_slopes.end());
        diverged += b.diverged;
        end_zero += b.end_zero;
    }

    StabilityReport rep;
    rep.trials = cfg.trials;
    rep.horizon = h;
    rep.diverged = diverged;
    rep.end_zero = end_zero;
    rep.slope_trials = static_cast<long>(trial_slopes.size());

    rep.ns.clear();
    for (int n = 0; n <= h; n += cfg.report_every) rep.ns.push_back(n);
    if (rep.ns.back() != h) rep.ns.push_back(h);

    const double logN = std::log(static_cast<double>(cfg.trials));
    std::vector<double> ess(static_cast<std::size_t>(len), 0.0);
    for (int n = 0; n < len; ++n) {
        const auto un = static_cast<std::size_t>(n);
        if (ls2[un].s > 0.0)
            ess[un] = std::exp(2.0 * ls2[un].log_value() - ls4[un].log_value());
    }
    rep.min_ess = *std::min_element(ess.begin(), ess.end());

    for (int n : rep.ns) {
        const auto un = static_cast<std::size_t>(n);
        SecondMomentRow row;
        row.n = n;
        row.log_mean = ls2[un].log_value() - logN;
        row.mean = std::exp(row.log_mean);
        const double m4 = std::exp(ls4[un].log_value() - logN);
        const double var = m4 - row.mean * row.mean;
        row.se = cfg.trials > 1
                     ? std::sqrt(std::max(0.0, var) / static_cast<double>(cfg.trials - 1))
                     : 0.0;
        row.ess = ess[un];
        rep.second_moment.push_back(row);
        rep.mean_log.push_back(nonzero[un] > 0
                                   ? sum_log[un].value() / static_cast<double>(nonzero[un])
                                   : detail::kNaN);
        rep.mean_signed.push_back(sgn[un].real_value() /
                                  static_cast<double>(cfg.trials));
    }
    for (std::size_t p = 0; p < n_probes; ++p) {
        auto& curve = rep.tightness[cfg.probes[p]];
        for (int n : rep.ns)
            curve.push_back(static_cast<double>(hits[p][static_cast<std::size_t>(n)]) /
                            static_cast<double>(cfg.trials));
    }

    // Growth-rate slope: OLS on the mean-log series over the fit window.
    {
        std::vector<double> xs, ys;
        for (std::size_t i = 0; i < fit_ns.size(); ++i) {
            const auto un = static_cast<std::size_t>(fit_ns[i]);
            if (nonzero[un] == 0) continue;
            xs.push_back(fit_xs[i]);
            ys.push_back(sum_log[un].value() / static_cast<double>(nonzero[un]));
        }
        rep.slope = ols_slope(xs, ys);
    }

    // Pooled one-step second-moment ratio over the ESS-trusted window.
    std::vector<int> window;
    for (int n = 0; n < h; ++n) {
        const auto un = static_cast<std::size_t>(n);
        if (ess[un] >= cfg.ess_min && ess[un + 1] >= cfg.ess_min) window.push_back(n);
    }
    rep.pooled_window = static_cast<int>(window.size());
    if (!window.empty()) {
        LogSum num, den;
        for (int n : window) {
            num.merge(ls2[static_cast<std::size_t>(n) + 1]);
            den.merge(ls2[static_cast<std::size_t>(n)]);
        }
        rep.pooled_log_ratio = num.log_value() - den.log_value();
    }

    // Bootstrap CIs: per-trial slope resampling for the growth rate, block
    // resampling for the pooled ratio.  One reserved stream, fixed draw order.
    if (cfg.bootstrap_resamples > 0) {
        RandomStream boot = RandomStream::for_trial(cfg.base_seed, 0, 2);
        if (!trial_slopes.empty()) {
            const std::size_t ts = trial_slopes.size();
            std::vector<double> means;
            means.reserve(static_cast<std::size_t>(cfg.bootstrap_resamples));
            for (int r = 0; r < cfg.bootstrap_resamples; ++r) {
                double s = 0.0;
                for (std::size_t i = 0; i < ts; ++i)
                    s += trial_slopes[static_cast<std::size_t>(boot.next_u64() % ts)];
                means.push_back(s / static_cast<double>(ts));
            }
            const auto ci = percentile_ci(means);
            rep.slope_lo = ci.first;
            rep.slope_hi = ci.second;
        }
        if (!window.empty() && n_blocks > 1) {
            const auto nb = static_cast<std::uint64_t>(n_blocks);
            std::vector<double> ratios;
            ratios.reserve(static_cast<std::size_t>(cfg.bootstrap_resamples));
            std::vector<std::size_t> pick(static_cast<std::size_t>(n_blocks));
            for (int r = 0; r < cfg.bootstrap_resamples; ++r) {
                for (auto& id : pick) id = static_cast<std::size_t>(boot.next_u64() % nb);
                LogSum num, den;
                for (std::size_t id : pick) {
                    for (int n : window) {
                        num.merge(blocks[id].ls2[static_cast<std::size_t>(n) + 1]);
                        den.merge(blocks[id].ls2[static_cast<std::size_t>(n)]);
                    }
                }
                ratios.push_back(num.log_value() - den.log_value());
            }
            const auto ci = percentile_ci(ratios);
            rep.pooled_lo = ci.first;
            rep.pooled_hi = ci.second;
        } else if (!window.empty()) {
            // Single block: no between-block variability to resample.
            rep.pooled_lo = rep.pooled_hi = rep.pooled_log_ratio;
        }
    }

    // Verdict.  Stability and growth certifications come only from the
    // ESS-trusted pooled ratio; tightness probabilities use every trial.
    const auto& tight_max = rep.tightness.at(cfg.probes.back());
    bool tight_held = false;
    {
        const int q = h - h / 4;
        bool any = false, all = true;
        for (std::size_t i = 0; i < rep.ns.size(); ++i) {
            if (rep.ns[i] < q) continue;
            any = true;
            if (tight_max[i] < 0.9) all = false;
        }
        tight_held = any && all;
    }
    bool vanishing = true;
    for (const auto& [m, curve] : rep.tightness) {
        (void)m;
        if (!(curve.back() <= 0.1 && curve.back() <= curve.front() + 0.01))
            vanishing = false;
    }
    if (rep.pooled_window >= 1 && std::isfinite(rep.pooled_hi) && rep.pooled_hi <= 0.0)
        rep.verdict = Verdict::second_moment_stable;
    else if (tight_held && std::isfinite(rep.pooled_lo) && rep.pooled_lo > 0.0)
        rep.verdict = Verdict::tight_only;
    else if (vanishing)
        rep.verdict = Verdict::unstable;
    else
        rep.verdict = Verdict::inconclusive;
    return rep;
}

// --- Stability-transition bisection -----------------------------------------

struct BisectionProbe {
    double a = 0.0;
    double pooled_log_ratio = 0.0;
    int pooled_window = 0;
};

struct BisectionResult {
    double lo = 0.0, hi = 0.0;  // final bracket around the empirical transition
    std::vector<BisectionProbe> history;
};

// Strategy used at a bisection probe, as a function of the probe's growth
// factor.  The default (empty) factory is the memoryless-optimal linear
// scheme U_n = d*(a) Y_n.
using StrategyFactory = std::function<std::shared_ptr<const Strategy>(double)>;

// Bisect the growth factor a for a strategy family.  All probes reuse the
// same base_seed (common random numbers).  Under the default d*(a) family the
// per-trial factor is a^2 (1 - (EZ/EZ^2) Z)^2, so the a-dependence cancels
// from every ESS weight and the pooled ratio is exactly monotone in a for a
// fixed seed; bisection converges to the single root of the sampled curve.
// Custom families keep the shared seed, which still renders the sampled
// ratio smooth in a, but monotonicity is then statistical, not exact.
inline BisectionResult bisect_critical_a(const NoiseModel& model, double a_lo, double a_hi,
                                         long trials, int horizon,
                                         std::uint64_t base_seed, double width_tol = 5e-3,
                                         int threads = 1,
                                         long step_budget = 4'000'000'000,
                                         const StrategyFactory& strategy_factory = {}) {
    if (!(a_lo > 0.0) || !(a_hi > a_lo))
        throw std::invalid_argument("bisect_critical_a: need 0 < a_lo < a_hi");
    if (!(width_tol > 0.0))
        throw std::invalid_argument("bisect_critical_a: width_tol must be positive");
    const int max_probes =
        2 + static_cast<int>(std::ceil(std::log2((a_hi - a_lo) / width_tol)));
    const double steps =
        static_cast<double>(max_probes) * static_cast<double>(trials) * horizon;
    if (steps > static_cast<double>(step_budget))
        throw std::invalid_argument(
            "bisect_critical_a: probe schedule exceeds step_budget; raise the "
            "budget explicitly to run a bisection this large");

    BisectionResult res;
    auto probe = [&](double a) {
        EnsembleConfig cfg;
        cfg.trials = trials;
        cfg.horizon = horizon;
        cfg.a = a;
        cfg.model = model;
        cfg.strategy = strategy_factory
                           ? strategy_factory(a)
                           : std::make_shared<LinearMemoryless>(a * model.mean() /
                                                                model.second_moment());
        cfg.x0 = InitialState::point(1.0);  // ESS_0 = trials
        cfg.base_seed = base_seed;
        cfg.report_every = std::max(1, horizon / 4);
        // Steer on the minimum-variance window.  Per-step ESS decays
        // geometrically while the pooled estimator's gain from extra steps is
        // only linear, so the informative increments are the first few; an
        // ESS floor of trials/16 keeps roughly three steps for Gaussian-like
        // weight decay.  The window is ESS-selected, hence a-independent, so
        // the exact-monotonicity property above is preserved.
        cfg.ess_min = std::max(cfg.ess_min, static_cast<double>(trials) / 16.0);
        cfg.threads = threads;
        cfg.step_budget = std::numeric_limits<long>::max();
        cfg.bootstrap_resamples = 0;  // bisection steers on point estimates
        const StabilityReport rep = run_ensemble(cfg);
        if (rep.pooled_window < 1)
            throw std::runtime_error(
                "bisect_critical_a: no ESS-trusted window at a probe; increase trials");
        res.history.push_back({a, rep.pooled_log_ratio, rep.pooled_window});
        return rep.pooled_log_ratio;
    };

    if (!(probe(a_lo) <= 0.0))
        throw std::invalid_argument(
            "bisect_critical_a: lower endpoint is already second-moment unstable");
    if (!(probe(a_hi) > 0.0))
        throw std::invalid_argument(
            "bisect_critical_a: upper endpoint is still second-moment stable");

    double lo = a_lo, hi = a_hi;
    while (hi - lo > width_tol) {
        const double mid = 0.5 * (lo + hi);
        if (probe(mid) <= 0.0)
            lo = mid;
        else
            hi = mid;
    }
    res.lo = lo;
    res.hi = hi;
    return res;
}

// --- CLT diagnostics ---------------------------------------------------------

// Under TightnessLinear(a, d) the closed loop is X_{n+1} = a (1 - d Z_n) X_n,
// so log|X_n| = log|X_0| + n log a + S_n with S_n = sum_{i<n} W_i and
// W_i = log|1 - d Z_i|.  The walk is evolved directly in the log domain —
// the real-arithmetic simulator saturates at exp(+-745) long before the
// 10^4-step horizons used here.
struct CltConfig {
    long trials = 4000;
    double a = 1.0;
    double d = 1.0;  // TightnessLinear(a, d) closed loop
    NoiseModel model = NoiseModel::gaussian_mean_one(1.0);
    InitialState x0 = InitialState::standard_gaussian();
    std::uint64_t base_seed = 1;
    std::vector<int> checkpoints{100, 1000, 10000};
    long step_budget = 1'000'000'000;
};

struct CltCheckpoint {
    int n = 0;
    double mean_stat = 0.0;  // mean of n^{-1/2} (S_n - n mu)
    double var_stat = 0.0;   // sample variance of the same
    double z_mean = 0.0;     // mean_stat / (sigma / sqrt(trials))
    double z_var = 0.0;      // (var_stat - sigma^2) / (sigma^2 sqrt(2/(trials-1)))
    double jb_p = 1.0;       // Jarque-Bera moment-normality p-value
    double tail_freq = 0.0;  // empirical P(log|X_n| > n^{1/4})
};

struct CltReport {
    double mu = 0.0;     // sampled E W
    double sigma = 0.0;  // sampled sd of W
    double mu_se = 0.0;
    double p_value = 1.0;  // normality p at the largest checkpoint
    std::vector<CltCheckpoint> checkpoints;
};

inline CltReport clt_statistics(const CltConfig& cfg) {
    if (cfg.trials < 2) throw std::invalid_argument("clt_statistics: trials must be >= 2");
    if (cfg.checkpoints.empty())
        throw std::invalid_argument("clt_statistics: need at least one checkpoint");
    for (std::size_t i = 0; i < cfg.checkpoints.size(); ++i) {
        if (cfg.checkpoints[i] < 1)
            throw std::invalid_argument("clt_statistics: checkpoints must be >= 1");
        if (i > 0 && cfg.checkpoints[i] <= cfg.checkpoints[i - 1])
            throw std::invalid_argument("clt_statistics: checkpoints must increase");
    }
    const int n_max = cfg.checkpoints.back();
    const double steps = static_cast<double>(cfg.trials) * n_max;
    if (steps > static_cast<double>(cfg.step_budget))
        throw std::invalid_argument(
            "clt_statistics: trials*horizon exceeds step_budget; raise the budget "
            "explicitly to run a walk this long");

    const std::size_t n_cp = cfg.checkpoints.size();
    const auto ut = static_cast<std::size_t>(cfg.trials);
    std::vector<double> s_at(ut * n_cp, 0.0);
    std::vector<long> tail_hits(n_cp, 0);
    detail::Kahan sum_w, sum_w2;
    const double log_a = std::log(cfg.a);

    for (long t = 0; t < cfg.trials; ++t) {
        RandomStream noise_rng =
            RandomStream::for_trial(cfg.base_seed, static_cast<std::uint64_t>(t), 0);
        RandomStream x0_rng =
            RandomStream::for_trial(cfg.base_seed, static_cast<std::uint64_t>(t), 1);
        const double l0 = std::log(std::abs(cfg.x0.sample(x0_rng)));
        double s = 0.0;
        std::size_t cp = 0;
        for (int n = 1; n <= n_max; ++n) {
            const double z = cfg.model.sample(noise_rng);
            // Single-rounding residual: 1 - d z collapses to 0 several ulps
            // early when evaluated directly near the pole z = 1/d.
            double r = std::fma(-cfg.d, z, 1.0);
            if (r == 0.0) r = std::numeric_limits<double>::min();
            const double w = std::log(std::abs(r));
            sum_w.add(w);
            sum_w2.add(w * w);
            s += w;
            if (n == cfg.checkpoints[cp]) {
                s_at[static_cast<std::size_t>(t) * n_cp + cp] = s;
                if (l0 + n * log_a + s > std::pow(static_cast<double>(n), 0.25))
                    ++tail_hits[cp];
                ++cp;
            }
        }
    }

    CltReport rep;
    const double draws = static_cast<double>(cfg.trials) * n_max;
    rep.mu = sum_w.value() / draws;
    rep.sigma = std::sqrt(std::max(0.0, sum_w2.value() / draws - rep.mu * rep.mu));
    rep.mu_se = rep.sigma / std::sqrt(draws);

    const auto trials_d = static_cast<double>(cfg.trials);
    for (std::size_t cp = 0; cp < n_cp; ++cp) {
        CltCheckpoint c;
        c.n = cfg.checkpoints[cp];
        const double rt = std::sqrt(static_cast<double>(c.n));
        detail::Kahan m1;
        for (std::size_t t = 0; t < ut; ++t)
            m1.add((s_at[t * n_cp + cp] - c.n * rep.mu) / rt);
        c.mean_stat = m1.value() / trials_d;
        detail::Kahan m2, m3, m4;
        for (std::size_t t = 0; t < ut; ++t) {
            const double dlt = (s_at[t * n_cp + cp] - c.n * rep.mu) / rt - c.mean_stat;
            m2.add(dlt * dlt);
            m3.add(dlt * dlt * dlt);
            m4.add(dlt * dlt * dlt * dlt);
        }
        c.var_stat = m2.value() / (trials_d - 1.0);
        if (rep.sigma > 0.0 && c.var_stat > 0.0) {
            c.z_mean = c.mean_stat / (rep.sigma / std::sqrt(trials_d));
            c.z_var = (c.var_stat - rep.sigma * rep.sigma) /
                      (rep.sigma * rep.sigma * std::sqrt(2.0 / (trials_d - 1.0)));
            const double v = m2.value() / trials_d;
            const double skew = (m3.value() / trials_d) / std::pow(v, 1.5);
            const double kurt = (m4.value() / trials_d) / (v * v);
            const double jb =
                trials_d * (skew * skew / 6.0 + (kurt - 3.0) * (kurt - 3.0) / 24.0);
            c.jb_p = std::exp(-0.5 * jb);  // chi^2(2) survival function
        }
        c.tail_freq = static_cast<double>(tail_hits[cp]) / trials_d;
        rep.checkpoints.push_back(c);
    }
    rep.p_value = rep.checkpoints.back().jb_p;
    return rep;
}

}  // namespace mulctl::mc
