// mulctl: experiment runner for the multiplicative-noise control laboratory.
//
// Every subcommand reads a single JSON config file, applies any command-line
// overrides (--seed, --threads) to that document, and writes its outputs into
// <out>/<command>-<hash>/ where <hash> tags the effective config.  Runs are
// deterministic given the config; the thread count changes scheduling only,
// never results.
//
// Exit codes: 0 = run completed and every asserted check passed,
//             1 = usage, configuration, or runtime error,
//             2 = a certified inequality or trace invariant failed.

#include <CLI11.hpp>

#include <mulctl/analysis.hpp>
#include <mulctl/config.hpp>
#include <mulctl/converse.hpp>
#include <mulctl/io.hpp>
#include <mulctl/montecarlo.hpp>

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <iostream>
#include <memory>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

namespace fs = std::filesystem;
using nlohmann::json;
using namespace mulctl;

namespace {

struct CmdResult {
    json summary;
    std::string headline;
    std::string failure;  // nonempty => exit 2 after outputs are written
};

std::string brief(double v) {
    std::ostringstream os;
    os.precision(6);
    os << v;
    return os.str();
}

// ---------------------------------------------------------------------------
// thresholds: closed-form quantities plus their quadrature certificates.
// ---------------------------------------------------------------------------

CmdResult cmd_thresholds(const json& cfg, const fs::path& dir) {
    config::ObjectReader r(cfg, "config");
    const NoiseModel model = config::parse_model(r.raw("model"));
    r.finish();

    const analysis::ThresholdReport rep = analysis::thresholds(model);

    io::CsvWriter csv(dir / "thresholds.csv", {"quantity", "value"});
    csv.row({"a_star", rep.a_star});
    csv.row({"d_star_at_a_star", rep.d_star});
    csv.row({"d_dagger", rep.d_dagger});
    csv.row({"a_dagger", rep.a_dagger});
    csv.row({"mu", rep.mu});
    csv.row({"sigma_d", rep.sigma_d});
    csv.row({"unimodal", static_cast<long long>(rep.unimodal ? 1 : 0)});

    io::CsvWriter certs(dir / "certificates.csv", {"name", "margin", "pass"});
    bool all_pass = true;
    std::string failed;
    for (const auto& [name, margin] : rep.certificates) {
        const bool ok = margin > 0.0;
        all_pass = all_pass && ok;
        if (!ok && failed.empty()) failed = name;
        certs.row({name, margin, static_cast<long long>(ok ? 1 : 0)});
    }

    CmdResult res;
    res.summary = {{"a_star", rep.a_star},
                   {"d_star_at_a_star", rep.d_star},
                   {"d_dagger", rep.d_dagger},
                   {"a_dagger", rep.a_dagger},
                   {"mu", rep.mu},
                   {"sigma_d", rep.sigma_d},
                   {"unimodal", rep.unimodal},
                   {"certificates", rep.certificates}};
    res.headline = "a_star=" + io::format_double(rep.a_star) +
                   " d_star=" + io::format_double(rep.d_star) +
                   " a_dagger=" + brief(rep.a_dagger);
    if (!all_pass)
        res.failure = "threshold certificate '" + failed + "' has nonpositive margin";
    return res;
}

// ---------------------------------------------------------------------------
// simulate: one Monte Carlo stability report for a (model, strategy, a).
// ---------------------------------------------------------------------------

mc::EnsembleConfig parse_ensemble(config::ObjectReader& r) {
    mc::EnsembleConfig e;
    e.model = config::parse_model(r.raw("model"));
    e.a = r.require<double>("a");
    e.strategy = config::parse_strategy(r.raw("strategy"), e.a, e.model);
    e.trials = r.get<long>("trials", e.trials);
    e.horizon = r.get<int>("horizon", e.horizon);
    e.base_seed = r.get<std::uint64_t>("base_seed", e.base_seed);
    e.report_every = r.get<int>("report_every", e.report_every);
    if (r.has("probes")) e.probes = r.require<std::vector<double>>("probes");
    if (r.has("x0")) e.x0 = config::parse_x0(r.raw("x0"));
    e.step_budget = r.get<long>("step_budget", e.step_budget);
    e.threads = r.get<int>("threads", e.threads);
    e.ess_min = r.get<double>("ess_min", e.ess_min);
    e.slope_stride = r.get<int>("slope_stride", e.slope_stride);
    e.bootstrap_resamples = r.get<int>("bootstrap_resamples", e.bootstrap_resamples);
    return e;
}

CmdResult cmd_simulate(const json& cfg, const fs::path& dir) {
    config::ObjectReader r(cfg, "config");
    const mc::EnsembleConfig e = parse_ensemble(r);
    r.finish();

    const mc::StabilityReport rep = mc::run_ensemble(e);

    std::vector<std::string> header = {"n",   "log_mean_x2",  "mean_x2",    "se_log_mean",
                                       "ess", "mean_log_abs", "mean_signed"};
    std::vector<double> probes;
    for (const auto& [m, curve] : rep.tightness) {
        header.push_back("p_lt_" + io::format_double(m));
        probes.push_back(m);
    }
    io::CsvWriter csv(dir / "report.csv", header);
    for (std::size_t i = 0; i < rep.ns.size(); ++i) {
        std::vector<io::Cell> row = {static_cast<long long>(rep.ns[i]),
                                     rep.second_moment[i].log_mean,
                                     rep.second_moment[i].mean,
                                     rep.second_moment[i].se,
                                     rep.second_moment[i].ess,
                                     rep.mean_log[i],
                                     rep.mean_signed[i]};
        for (double m : probes) row.emplace_back(rep.tightness.at(m)[i]);
        csv.row(row);
    }

    CmdResult res;
    res.summary = {{"a", e.a},
                   {"trials", rep.trials},
                   {"horizon", rep.horizon},
                   {"verdict", mc::to_string(rep.verdict)},
                   {"pooled_log_ratio", rep.pooled_log_ratio},
                   {"pooled_lo", rep.pooled_lo},
                   {"pooled_hi", rep.pooled_hi},
                   {"pooled_window", rep.pooled_window},
                   {"slope", rep.slope},
                   {"slope_lo", rep.slope_lo},
                   {"slope_hi", rep.slope_hi},
                   {"slope_trials", rep.slope_trials},
                   {"min_ess", rep.min_ess},
                   {"diverged", rep.diverged},
                   {"end_zero", rep.end_zero}};
    res.headline = std::string("verdict=") + mc::to_string(rep.verdict) +
                   " pooled_log_ratio=" + brief(rep.pooled_log_ratio) + " in [" +
                   brief(rep.pooled_lo) + ", " + brief(rep.pooled_hi) + "]";
    return res;
}

// ---------------------------------------------------------------------------
// sweep: bisection bracket for the stability transition in a.
// ---------------------------------------------------------------------------

CmdResult cmd_sweep(const json& cfg, const fs::path& dir) {
    config::ObjectReader r(cfg, "config");
    const NoiseModel model = config::parse_model(r.raw("model"));
    const std::string family = r.get<std::string>("family", "linear_memoryless");
    const double a_lo = r.require<double>("a_lo");
    const double a_hi = r.require<double>("a_hi");
    const long trials = r.get<long>("trials", 20000);
    const int horizon = r.get<int>("horizon", 200);
    const std::uint64_t base_seed = r.get<std::uint64_t>("base_seed", 1);
    const double width_tol = r.get<double>("width_tol", 1e-2);
    const int threads = r.get<int>("threads", 1);
    const long step_budget = r.get<long>("step_budget", 1000000000L);
    r.finish();

    mc::StrategyFactory factory{};
    if (family == "two_step_mean_one") {
        factory = [model](double a) -> std::shared_ptr<const Strategy> {
            const analysis::EpsilonChoice c = analysis::search_epsilon_mean_one(model, a);
            return std::make_shared<TwoStepMeanOne>(a, model.variance(), c.eps);
        };
    } else if (family != "linear_memoryless") {
        throw std::invalid_argument("sweep: unknown family '" + family + "'");
    }

    const mc::BisectionResult bis = mc::bisect_critical_a(
        model, a_lo, a_hi, trials, horizon, base_seed, width_tol, threads, step_budget,
        factory);

    io::CsvWriter csv(dir / "history.csv", {"a", "pooled_log_ratio", "pooled_window"});
    for (const auto& p : bis.history)
        csv.row({p.a, p.pooled_log_ratio, p.pooled_window});

    CmdResult res;
    res.summary = {{"family", family},
                   {"bracket_lo", bis.lo},
                   {"bracket_hi", bis.hi},
                   {"bracket_width", bis.hi - bis.lo},
                   {"probes", bis.history.size()}};
    res.headline = "bracket=[" + io::format_double(bis.lo) + ", " +
                   io::format_double(bis.hi) + "] width=" + brief(bis.hi - bis.lo);
    return res;
}

// ---------------------------------------------------------------------------
// verify: every analysis certificate, loud failure on any violation.
// ---------------------------------------------------------------------------

CmdResult cmd_verify(const json& cfg, const fs::path& dir) {
    config::ObjectReader r(cfg, "config");
    const NoiseModel model = config::parse_model(r.raw("model"));
    const double witness_a_factor = r.get<double>("witness_a_factor", 1.1);
    // Default two-step probe: just above the memoryless threshold, inside the
    // band where the two-step contraction factor is still certifiably < 1.
    const double two_step_bump = r.get<double>("two_step_bump", 1.13e-3);
    std::vector<double> sgn_sigmas;
    if (r.has("sgn_sigma_grid"))
        sgn_sigmas = r.require<std::vector<double>>("sgn_sigma_grid");
    r.finish();

    const analysis::ThresholdReport rep = analysis::thresholds(model);

    struct Row {
        std::string name;
        double value;
        double margin;
        bool pass;
    };
    std::vector<Row> rows;
    for (const auto& [name, margin] : rep.certificates)
        rows.push_back({name, margin, margin, margin > 0.0});

    if (model.kind() == NoiseKind::gaussian_mean_one) {
        if (sgn_sigmas.empty()) sgn_sigmas.push_back(model.sigma());
        for (double s : sgn_sigmas) {
            const analysis::CertValue c = analysis::certify_gaussian_sgn_bound(s);
            rows.push_back({"sgn_bound_sigma_" + brief(s), c.value, c.value - c.err,
                            c.value - c.err > 0.0});
        }
    }

    {
        const double a_w = witness_a_factor * rep.a_star;
        const analysis::Witness w = analysis::no_contraction_witness(model, a_w);
        const double ratio = w.found ? w.at.ratio : 0.0;
        rows.push_back({"no_contraction_witness", ratio, ratio - 1.0, w.found});
    }

    const bool mean_one = std::abs(model.mean() - 1.0) <= 1e-9;
    const bool mean_zero = std::abs(model.mean()) <= 1e-9;
    double two_step_a = std::numeric_limits<double>::quiet_NaN();
    if (mean_one) {
        two_step_a = rep.a_star * (1.0 + two_step_bump);
        const analysis::EpsilonChoice c = analysis::search_epsilon_mean_one(model, two_step_a);
        rows.push_back({"two_step_factor_above_a_star", c.factor, 1.0 - c.factor,
                        c.improvement && c.factor < 1.0});
    } else if (mean_zero) {
        const analysis::EpsilonChoice c = analysis::search_epsilon_zero_mean(model);
        two_step_a = c.a;
        rows.push_back({"zero_mean_two_step_factor", c.factor, 1.0 - c.factor,
                        c.improvement && c.factor < 1.0});
    }

    io::CsvWriter csv(dir / "certificates.csv", {"name", "value", "margin", "pass"});
    json cert_json = json::object();
    bool all_pass = true;
    std::string failed;
    for (const auto& row : rows) {
        all_pass = all_pass && row.pass;
        if (!row.pass && failed.empty()) failed = row.name;
        csv.row({row.name, row.value, row.margin, static_cast<long long>(row.pass ? 1 : 0)});
        cert_json[row.name] = {{"value", row.value}, {"margin", row.margin}, {"pass", row.pass}};
    }

    CmdResult res;
    res.summary = {{"a_star", rep.a_star},
                   {"witness_a", witness_a_factor * rep.a_star},
                   {"two_step_a", two_step_a},
                   {"checks", rows.size()},
                   {"certificates", cert_json}};
    std::size_t passed = 0;
    for (const auto& row : rows) passed += row.pass;
    res.headline = std::to_string(passed) + "/" + std::to_string(rows.size()) +
                   " certificates pass";
    if (!all_pass) res.failure = "certificate '" + failed + "' failed";
    return res;
}

// ---------------------------------------------------------------------------
// converse: genie-aided trace invariants, Psi monitoring, K_n growth, and the
// instability probe.
// ---------------------------------------------------------------------------

CmdResult cmd_converse(const json& cfg, const fs::path& dir) {
    config::ObjectReader r(cfg, "config");
    converse::GenieConfig g;
    g.model = config::parse_model(r.raw("model"));
    const double scaled_a = 1.0;  // genie runs on the scaled, unit-dynamics system
    g.strategy = config::parse_strategy(r.raw("strategy"), scaled_a, g.model);
    if (!g.strategy) throw std::invalid_argument("converse: strategy must not be null");
    g.trials = r.get<long>("trials", g.trials);
    g.horizon = r.get<int>("horizon", g.horizon);
    g.base_seed = r.get<std::uint64_t>("base_seed", g.base_seed);
    if (r.has("constants")) g.constants = config::parse_constants(r.raw("constants"));
    g.step_budget = r.get<long>("step_budget", g.step_budget);
    g.threads = r.get<int>("threads", g.threads);
    const int t_psilem =
        r.get<int>("psilem_t", converse::minimal_psilem_t(g.constants));
    const double probe_a = r.get<double>("probe_a", 1.1);
    std::vector<double> m_grid = {1.0, 100.0};
    if (r.has("m_grid")) m_grid = r.require<std::vector<double>>("m_grid");
    const int bootstrap_resamples = r.get<int>("bootstrap_resamples", 1000);
    r.finish();

    // Validate everything before any sampling starts.
    if (t_psilem < converse::minimal_psilem_t(g.constants))
        throw std::invalid_argument(
            "converse: psilem_t " + std::to_string(t_psilem) +
            " is below the minimal admissible horizon " +
            std::to_string(converse::minimal_psilem_t(g.constants)));
    if (!(probe_a > 1.0))
        throw std::invalid_argument("converse: probe_a must exceed 1");
    if (m_grid.empty())
        throw std::invalid_argument("converse: m_grid must not be empty");
    for (double m : m_grid)
        if (!(m > 0.0))
            throw std::invalid_argument("converse: m_grid entries must be positive");

    const std::vector<converse::GenieTrace> traces = converse::run_genie_ensemble(g);
    const converse::InvariantAudit audit = converse::audit_invariants(traces);
    const converse::PsilemReport psilem =
        converse::psilem_check(traces, t_psilem, bootstrap_resamples, g.base_seed);
    const converse::KnGrowthReport growth = converse::kn_growth(traces);

    {  // First trace, step by step.  psi has one fewer entry on complete traces.
        const converse::GenieTrace& tr = traces.front();
        io::CsvWriter csv(dir / "trace.csv", {"n", "s", "k", "h", "eta", "psi"});
        for (std::size_t n = 0; n < tr.k.size(); ++n) {
            std::vector<io::Cell> row = {static_cast<long long>(n), tr.s[n],
                                         static_cast<long long>(tr.k[n]), tr.h[n],
                                         tr.eta[n]};
            if (n < tr.psi.size())
                row.emplace_back(tr.psi[n]);
            else
                row.emplace_back(std::string());
            csv.row(row);
        }
    }

    json probe_json = json::object();
    {
        std::vector<std::string> head = {"n"};
        for (double m : m_grid) head.push_back("p_below_" + io::format_double(m));
        io::CsvWriter csv(dir / "probes.csv", head);
        std::vector<std::vector<double>> curves;
        for (double m : m_grid) {
            curves.push_back(converse::instability_probe(probe_a, m, g.model, g.strategy,
                                                         g.x0, g.trials, g.horizon,
                                                         g.base_seed, g.step_budget));
            probe_json["m_" + io::format_double(m)] = curves.back();
        }
        for (int n = 1; n <= g.horizon; ++n) {
            std::vector<io::Cell> row = {static_cast<long long>(n)};
            for (const auto& c : curves) row.emplace_back(c[static_cast<std::size_t>(n)]);
            csv.row(row);
        }
    }

    CmdResult res;
    res.summary = {{"trials", g.trials},
                   {"horizon", g.horizon},
                   {"invariants",
                    {{"traces", audit.traces},
                     {"captured", audit.captured},
                     {"truncated", audit.truncated},
                     {"steps", audit.steps},
                     {"violations", audit.violations},
                     {"first_failure", audit.first_failure}}},
                   {"psilem",
                    {{"t", psilem.t},
                     {"minimal_t", psilem.minimal_t},
                     {"max_mean", psilem.max_mean},
                     {"argmax_n", psilem.argmax_n},
                     {"slope", psilem.slope},
                     {"slope_lo", psilem.slope_lo},
                     {"slope_hi", psilem.slope_hi},
                     {"analytic_cap", psilem.analytic_cap},
                     {"traces_used", psilem.traces_used},
                     {"pass", psilem.pass}}},
                   {"kn_growth",
                    {{"slope", growth.slope},
                     {"candidates", growth.candidates},
                     {"ns", growth.ns},
                     {"exceedance", growth.exceedance},
                     {"traces_used", growth.traces_used}}},
                   {"probe", {{"a", probe_a}, {"m_grid", m_grid}, {"curves", probe_json}}}};
    res.headline = "invariants " +
                   std::string(audit.violations == 0 ? "ok" : "VIOLATED") + " (" +
                   std::to_string(audit.steps) + " steps, " +
                   std::to_string(audit.captured) + " captured); psilem " +
                   (psilem.pass ? "pass" : "FAIL") + " (max_mean=" +
                   brief(psilem.max_mean) + "); kn slope=" + brief(growth.slope);
    if (audit.violations > 0)
        res.failure = "trace invariant violated: " + audit.first_failure;
    else if (!psilem.pass)
        res.failure = "psilem check failed: bootstrap slope CI excludes 0 from above";
    return res;
}

// ---------------------------------------------------------------------------
// clt: log-walk central-limit diagnostics for the tightness closed loop.
// ---------------------------------------------------------------------------

CmdResult cmd_clt(const json& cfg, const fs::path& dir) {
    config::ObjectReader r(cfg, "config");
    mc::CltConfig c;
    c.model = config::parse_model(r.raw("model"));
    c.a = r.require<double>("a");
    c.d = r.get<double>("d", c.a * c.model.mean() / c.model.second_moment());
    c.trials = r.get<long>("trials", c.trials);
    c.base_seed = r.get<std::uint64_t>("base_seed", c.base_seed);
    if (r.has("checkpoints")) c.checkpoints = r.require<std::vector<int>>("checkpoints");
    if (r.has("x0")) c.x0 = config::parse_x0(r.raw("x0"));
    c.step_budget = r.get<long>("step_budget", c.step_budget);
    r.finish();

    const mc::CltReport rep = mc::clt_statistics(c);

    io::CsvWriter csv(dir / "checkpoints.csv",
                      {"n", "mean_stat", "var_stat", "z_mean", "z_var", "jb_p",
                       "tail_freq"});
    json cps = json::array();
    for (const auto& cp : rep.checkpoints) {
        csv.row({static_cast<long long>(cp.n), cp.mean_stat, cp.var_stat, cp.z_mean,
                 cp.z_var, cp.jb_p, cp.tail_freq});
        cps.push_back({{"n", cp.n},
                       {"mean_stat", cp.mean_stat},
                       {"var_stat", cp.var_stat},
                       {"z_mean", cp.z_mean},
                       {"z_var", cp.z_var},
                       {"jb_p", cp.jb_p},
                       {"tail_freq", cp.tail_freq}});
    }

    CmdResult res;
    res.summary = {{"a", c.a},
                   {"d", c.d},
                   {"mu", rep.mu},
                   {"sigma", rep.sigma},
                   {"mu_se", rep.mu_se},
                   {"p_value", rep.p_value},
                   {"checkpoints", cps}};
    res.headline = "mu=" + brief(rep.mu) + " sigma=" + brief(rep.sigma) +
                   " p=" + brief(rep.p_value);
    return res;
}

CmdResult dispatch(const std::string& cmd, const json& cfg, const fs::path& dir) {
    if (cmd == "thresholds") return cmd_thresholds(cfg, dir);
    if (cmd == "simulate") return cmd_simulate(cfg, dir);
    if (cmd == "sweep") return cmd_sweep(cfg, dir);
    if (cmd == "verify") return cmd_verify(cfg, dir);
    if (cmd == "converse") return cmd_converse(cfg, dir);
    if (cmd == "clt") return cmd_clt(cfg, dir);
    throw std::logic_error("unreachable subcommand");
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"mulctl: scalar control under multiplicative observation noise"};
    app.require_subcommand(1);

    std::string config_path;
    std::string out_root = "runs";
    bool print_summary = false;
    std::optional<std::uint64_t> seed_override;
    std::optional<int> threads_override;

    const std::vector<std::pair<std::string, std::string>> cmds = {
        {"thresholds", "closed-form thresholds and quadrature certificates"},
        {"simulate", "Monte Carlo stability report for one (model, strategy, a)"},
        {"sweep", "bisect the stability transition over a"},
        {"verify", "run every analysis certificate; fail loudly on violation"},
        {"converse", "genie-aided converse diagnostics and instability probe"},
        {"clt", "central-limit diagnostics for the tightness log-walk"},
    };
    for (const auto& [name, desc] : cmds) {
        CLI::App* sub = app.add_subcommand(name, desc);
        sub->add_option("--config", config_path, "JSON config file")
            ->required()
            ->check(CLI::ExistingFile);
        sub->add_option("--seed", seed_override, "override base_seed in the config");
        sub->add_option("--out", out_root, "output root directory");
        sub->add_option("--threads", threads_override,
                        "override the worker thread count in the config");
        sub->add_flag("--summary", print_summary, "print the flattened summary table");
    }

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? 0 : 1;
    }
    const std::string cmd = app.get_subcommands().front()->get_name();

    json cfg;
    try {
        cfg = json::parse(io::read_text(config_path));
    } catch (const std::exception& e) {
        std::cerr << "error: cannot parse config '" << config_path << "': " << e.what()
                  << "\n";
        return 1;
    }
    if (!cfg.is_object()) {
        std::cerr << "error: config must be a JSON object\n";
        return 1;
    }
    if (seed_override) cfg["base_seed"] = *seed_override;
    if (threads_override) cfg["threads"] = *threads_override;

    try {
        const std::string effective = cfg.dump(2) + "\n";
        const fs::path dir = fs::path(out_root) / (cmd + "-" + io::hash_tag(effective));
        fs::create_directories(dir);
        io::write_text(dir / "config.json", effective);

        CmdResult res = dispatch(cmd, cfg, dir);
        res.summary["schema_version"] = 1;
        res.summary["command"] = cmd;
        io::write_json(dir / "summary.json", res.summary);

        std::cout << cmd << ": " << res.headline << "\n";
        std::cout << "outputs: " << dir.string() << "\n";
        if (print_summary) std::cout << io::summary_table(res.summary);
        if (!res.failure.empty()) {
            std::cerr << "CERTIFICATION FAILURE: " << res.failure << "\n";
            return 2;
        }
        return 0;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
}
