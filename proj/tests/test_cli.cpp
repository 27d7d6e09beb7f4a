// End-to-end tests of the mulctl command-line tool plus unit tests of the
// config and io helpers it is built from.  The binary path arrives through
// the MULCTL_BIN compile definition; every invocation writes into a fresh
// directory under the system temp root.

#include <catch2/catch_amalgamated.hpp>

#include <mulctl/analysis.hpp>
#include <mulctl/config.hpp>
#include <mulctl/controllers.hpp>
#include <mulctl/io.hpp>

#include <sys/wait.h>
#include <unistd.h>

#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <string>
#include <typeinfo>
#include <vector>

namespace fs = std::filesystem;
using Catch::Approx;
using Catch::Matchers::ContainsSubstring;
using nlohmann::json;
using namespace mulctl;

namespace {

fs::path test_root() {
    static const fs::path root = [] {
        fs::path p = fs::temp_directory_path() /
                     ("mulctl_cli_test_" + std::to_string(::getpid()));
        fs::remove_all(p);
        fs::create_directories(p);
        return p;
    }();
    return root;
}

int unique_id() {
    static int n = 0;
    return ++n;
}

fs::path write_config(const json& j) {
    const fs::path p = test_root() / ("cfg" + std::to_string(unique_id()) + ".json");
    io::write_json(p, j);
    return p;
}

int run_cli(const std::string& args) {
    const std::string cmd = std::string(MULCTL_BIN) + " " + args + " >/dev/null 2>&1";
    const int rc = std::system(cmd.c_str());
    REQUIRE(rc != -1);
    REQUIRE(WIFEXITED(rc));
    return WEXITSTATUS(rc);
}

struct CliRun {
    int code = -1;
    fs::path dir;   // the hash-named run directory, if one was created
    json summary;   // parsed summary.json, if one was written
};

CliRun run_command(const std::string& cmd, const json& cfg, const std::string& extra = "") {
    const fs::path cfg_path = write_config(cfg);
    const fs::path out = test_root() / ("out" + std::to_string(unique_id()));
    CliRun r;
    r.code = run_cli(cmd + " --config " + cfg_path.string() + " --out " + out.string() +
                     (extra.empty() ? "" : " " + extra));
    if (fs::exists(out))
        for (const auto& e : fs::directory_iterator(out)) r.dir = e.path();
    if (!r.dir.empty() && fs::exists(r.dir / "summary.json"))
        r.summary = json::parse(io::read_text(r.dir / "summary.json"));
    return r;
}

std::size_t line_count(const fs::path& p) {
    const std::string text = io::read_text(p);
    std::size_t n = 0;
    for (char c : text) n += (c == '\n');
    return n;
}

json gaussian_model(double sigma, const char* kind = "gaussian_mean_one") {
    return {{"kind", kind}, {"sigma", sigma}};
}

}  // namespace

// ---------------------------------------------------------------------------
// config.hpp
// ---------------------------------------------------------------------------

TEST_CASE("config readers enforce the schema strictly") {
    const NoiseModel m = config::parse_model(gaussian_model(0.5));
    REQUIRE(m.kind() == NoiseKind::gaussian_mean_one);
    REQUIRE(m.sigma() == 0.5);
    REQUIRE(m.mean() == 1.0);

    REQUIRE_THROWS_WITH(config::parse_model(json{{"kind", "gaussian_mean_one"}}),
                        ContainsSubstring("missing required key 'sigma'"));
    REQUIRE_THROWS_WITH(
        config::parse_model(json{{"kind", "gaussian_mean_one"}, {"sigma", "one"}}),
        ContainsSubstring("wrong type"));
    REQUIRE_THROWS_WITH(
        config::parse_model(
            json{{"kind", "gaussian_mean_one"}, {"sigma", 1.0}, {"mean", 1.0}}),
        ContainsSubstring("unknown key 'mean'"));
    REQUIRE_THROWS_WITH(config::parse_model(json{{"kind", "cauchy"}}),
                        ContainsSubstring("unknown kind"));
    REQUIRE_THROWS_WITH(config::parse_model(json::array()),
                        ContainsSubstring("expected a JSON object"));

    const NoiseModel poly =
        config::parse_model(json{{"kind", "exp_poly"}, {"coeffs", {0.0, 0.0, 1.0}}});
    REQUIRE(poly.kind() == NoiseKind::exp_poly);

    RandomStream rng(99);
    REQUIRE(config::parse_x0(json{{"kind", "point"}, {"value", 2.5}}).sample(rng) == 2.5);
    REQUIRE(config::parse_x0(json{{"kind", "standard_gaussian"}}).mean_sq() == 1.0);
    REQUIRE_THROWS_WITH(config::parse_x0(json{{"kind", "uniform"}}),
                        ContainsSubstring("unknown kind"));
}

TEST_CASE("strategy blocks resolve gains, searches, and reject junk") {
    const NoiseModel m = config::parse_model(gaussian_model(1.0));
    const double a = 1.2;

    auto opt = config::parse_strategy(
        json{{"kind", "linear_memoryless"}, {"gain", "optimal"}}, a, m);
    REQUIRE(opt != nullptr);
    // d*(a) = a E Z / E Z^2 = 1.2 / 2 for the unit-variance mean-one Gaussian.
    REQUIRE(opt->clone()->control(0, 1.0) == Approx(0.6).margin(1e-15));

    auto fixed = config::parse_strategy(
        json{{"kind", "linear_memoryless"}, {"gain", 0.25}}, a, m);
    REQUIRE(fixed->clone()->control(3, 2.0) == Approx(0.5).margin(1e-15));

    auto two = config::parse_strategy(
        json{{"kind", "two_step_mean_one"}, {"epsilon", "search"}}, a, m);
    REQUIRE(typeid(*two) == typeid(TwoStepMeanOne));

    auto null = config::parse_strategy(json{{"kind", "null"}}, a, m);
    REQUIRE(null->clone()->control(0, 5.0) == 0.0);

    REQUIRE_THROWS_WITH(config::parse_strategy(json{{"kind", "pid"}}, a, m),
                        ContainsSubstring("unknown kind"));
    REQUIRE_THROWS_WITH(
        config::parse_strategy(
            json{{"kind", "linear_memoryless"}, {"gain", 0.5}, {"bias", 1.0}}, a, m),
        ContainsSubstring("unknown key 'bias'"));

    const converse::GenieConstants defaults = config::parse_constants(json::object());
    REQUIRE(defaults.c1 == 2.0);
    REQUIRE(defaults.c2 == 2.0);
    REQUIRE(defaults.c3 == 1.0);
    REQUIRE(defaults.delta == 1.0);
    const converse::GenieConstants tweaked =
        config::parse_constants(json{{"c3", 0.5}});
    REQUIRE(tweaked.c3 == 0.5);
    REQUIRE_THROWS_WITH(config::parse_constants(json{{"c4", 1.0}}),
                        ContainsSubstring("unknown key 'c4'"));
}

// ---------------------------------------------------------------------------
// io.hpp
// ---------------------------------------------------------------------------

TEST_CASE("csv and json helpers round-trip exactly") {
    for (double x : {1.0 / 3.0, 1e-300, -2.5, 0.1, 12345.678901234567,
                     5e-324, std::sqrt(2.0)}) {
        const std::string s = io::format_double(x);
        REQUIRE(std::strtod(s.c_str(), nullptr) == x);
    }
    REQUIRE(io::format_double(1.0) == "1");

    // FNV-1a 64-bit reference vectors.
    REQUIRE(io::hash_tag("") == "cbf29ce48422");
    REQUIRE(io::hash_tag("a") == "af63dc4c8601");
    REQUIRE(io::hash_tag("abc") != io::hash_tag("abd"));

    const fs::path csv_path = test_root() / "unit.csv";
    {
        io::CsvWriter w(csv_path, {"a", "b"});
        w.row({static_cast<long long>(1), 2.5});
        w.row({std::string("x"), std::string()});
        REQUIRE_THROWS_AS(w.row({1.0}), std::logic_error);
    }
    REQUIRE(io::read_text(csv_path) == "a,b\n1,2.5\nx,\n");

    const json doc = {{"b", {{"c", 1}}}, {"a", 2}};
    const auto rows = io::flatten_json(doc);
    REQUIRE(rows.size() == 2);
    REQUIRE(rows[0] == std::pair<std::string, std::string>{"a", "2"});
    REQUIRE(rows[1] == std::pair<std::string, std::string>{"b.c", "1"});
    REQUIRE_THAT(io::summary_table(doc), ContainsSubstring("b.c  1\n"));
}

// ---------------------------------------------------------------------------
// End-to-end runs of the binary
// ---------------------------------------------------------------------------

TEST_CASE("thresholds command reproduces the closed-form landmarks") {
    const CliRun half = run_command("thresholds", {{"model", gaussian_model(0.5)}});
    REQUIRE(half.code == 0);
    REQUIRE(half.summary.at("a_star").get<double>() ==
            Approx(std::sqrt(5.0)).margin(1e-12));
    REQUIRE(half.summary.at("schema_version").get<int>() == 1);
    REQUIRE(half.summary.at("command").get<std::string>() == "thresholds");
    REQUIRE(fs::exists(half.dir / "config.json"));
    REQUIRE(io::read_text(half.dir / "thresholds.csv").rfind("quantity,value\n", 0) == 0);

    const CliRun unit = run_command("thresholds", {{"model", gaussian_model(1.0)}});
    REQUIRE(unit.code == 0);
    REQUIRE(unit.summary.at("a_star").get<double>() ==
            Approx(std::sqrt(2.0)).margin(1e-12));
    REQUIRE(unit.summary.at("d_star_at_a_star").get<double>() ==
            Approx(std::sqrt(2.0) / 2.0).margin(1e-12));

    // Determinism: the same config again yields byte-identical outputs under
    // an identically named run directory.
    const CliRun again = run_command("thresholds", {{"model", gaussian_model(1.0)}});
    REQUIRE(again.dir.filename() == unit.dir.filename());
    REQUIRE(io::read_text(again.dir / "summary.json") ==
            io::read_text(unit.dir / "summary.json"));
    REQUIRE(io::read_text(again.dir / "thresholds.csv") ==
            io::read_text(unit.dir / "thresholds.csv"));
}

TEST_CASE("usage and configuration errors exit with code 1") {
    REQUIRE(run_cli("") == 1);
    REQUIRE(run_cli("frobnicate --config nowhere.json") == 1);
    REQUIRE(run_cli("thresholds") == 1);
    REQUIRE(run_cli("thresholds --config /nonexistent/x.json") == 1);
    REQUIRE(run_cli("--help") == 0);
    REQUIRE(run_cli("thresholds --help") == 0);

    const fs::path broken = test_root() / "broken.json";
    io::write_text(broken, "{not json");
    REQUIRE(run_cli("thresholds --config " + broken.string()) == 1);

    const fs::path array_cfg = test_root() / "array.json";
    io::write_text(array_cfg, "[1,2]\n");
    REQUIRE(run_cli("thresholds --config " + array_cfg.string()) == 1);

    REQUIRE(run_command("thresholds",
                        {{"model", gaussian_model(1.0)}, {"bogus", 1}})
                .code == 1);
    // thresholds takes no seed; the override lands in the config and the
    // strict schema rejects it.
    REQUIRE(run_command("thresholds", {{"model", gaussian_model(1.0)}}, "--seed 4")
                .code == 1);
}

TEST_CASE("simulate is deterministic and thread-count independent") {
    const json cfg = {{"model", gaussian_model(1.0)},
                      {"a", 1.2},
                      {"strategy", {{"kind", "linear_memoryless"}, {"gain", "optimal"}}},
                      {"trials", 2000},
                      {"horizon", 60},
                      {"base_seed", 7}};
    const CliRun one = run_command("simulate", cfg);
    REQUIRE(one.code == 0);
    REQUIRE(one.summary.at("verdict").get<std::string>() == "second_moment_stable");
    REQUIRE(one.summary.at("pooled_hi").get<double>() < 0.0);
    REQUIRE(line_count(one.dir / "report.csv") == 1 + 61);  // header + n = 0..60
    REQUIRE_THAT(io::read_text(one.dir / "report.csv"),
                 ContainsSubstring("p_lt_10000"));

    // Sparse reporting keeps only every tenth step in the table.
    json sparse = cfg;
    sparse["trials"] = 200;
    sparse["report_every"] = 10;
    const CliRun sparse_run = run_command("simulate", sparse);
    REQUIRE(sparse_run.code == 0);
    REQUIRE(line_count(sparse_run.dir / "report.csv") == 1 + 7);  // n = 0,10,...,60

    const CliRun rerun = run_command("simulate", cfg);
    REQUIRE(io::read_text(rerun.dir / "report.csv") ==
            io::read_text(one.dir / "report.csv"));
    REQUIRE(io::read_text(rerun.dir / "summary.json") ==
            io::read_text(one.dir / "summary.json"));

    // A different worker count must relabel the run directory (the effective
    // config changed) without changing a single output byte.
    const CliRun threaded = run_command("simulate", cfg, "--threads 3");
    REQUIRE(threaded.code == 0);
    REQUIRE(threaded.dir.filename() != one.dir.filename());
    REQUIRE(io::read_text(threaded.dir / "report.csv") ==
            io::read_text(one.dir / "report.csv"));

    const CliRun reseeded = run_command("simulate", cfg, "--seed 8");
    REQUIRE(reseeded.code == 0);
    REQUIRE(reseeded.summary.at("pooled_log_ratio").get<double>() !=
            one.summary.at("pooled_log_ratio").get<double>());
}

TEST_CASE("simulate certifies zero-mean second-moment growth just above a = 1") {
    // With E Z = 0 every linear gain leaves E X^2 growing: the per-step factor
    // is a^2 + d^2 E Z^2 = 1.3525 here, while |X_n| itself drifts down, so the
    // loop is tight but second-moment unstable.
    const json cfg = {{"model", gaussian_model(1.0, "gaussian_mean_zero")},
                      {"a", 1.05},
                      {"strategy", {{"kind", "linear_memoryless"}, {"gain", 0.5}}},
                      {"trials", 2000},
                      {"horizon", 150},
                      {"base_seed", 9}};
    const CliRun r = run_command("simulate", cfg);
    REQUIRE(r.code == 0);
    REQUIRE(r.summary.at("verdict").get<std::string>() == "tight_only");
    REQUIRE(r.summary.at("pooled_lo").get<double>() > 0.0);
    REQUIRE(r.summary.at("pooled_log_ratio").get<double>() ==
            Approx(std::log(1.3525)).margin(0.1));
}

TEST_CASE("sweep brackets the memoryless transition near sqrt(2)") {
    const json cfg = {{"model", gaussian_model(1.0)},
                      {"a_lo", 1.30},
                      {"a_hi", 1.55},
                      {"trials", 20000},
                      {"horizon", 100},
                      {"width_tol", 0.02},
                      {"base_seed", 13}};
    const CliRun r = run_command("sweep", cfg);
    REQUIRE(r.code == 0);
    const double lo = r.summary.at("bracket_lo").get<double>();
    const double hi = r.summary.at("bracket_hi").get<double>();
    REQUIRE(hi - lo <= 0.02 + 1e-12);
    REQUIRE(lo <= std::sqrt(2.0) + 0.03);
    REQUIRE(hi >= std::sqrt(2.0) - 0.03);
    REQUIRE(line_count(r.dir / "history.csv") ==
            1 + r.summary.at("probes").get<std::size_t>());

    REQUIRE(run_command("sweep",
                        {{"model", gaussian_model(1.0)},
                         {"family", "bogus"},
                         {"a_lo", 1.3},
                         {"a_hi", 1.5}})
                .code == 1);

    // The two-step family plugs into the same bisection.
    const json two_cfg = {{"model", gaussian_model(1.0)},
                          {"family", "two_step_mean_one"},
                          {"a_lo", 1.35},
                          {"a_hi", 1.50},
                          {"trials", 2000},
                          {"horizon", 60},
                          {"width_tol", 0.04},
                          {"base_seed", 13}};
    const CliRun two = run_command("sweep", two_cfg);
    REQUIRE(two.code == 0);
    REQUIRE(two.summary.at("bracket_lo").get<double>() >= 1.35);
    REQUIRE(two.summary.at("bracket_hi").get<double>() <= 1.50);
}

TEST_CASE("verify passes on the certified band and fails loudly off it") {
    const CliRun ok = run_command("verify", {{"model", gaussian_model(1.0)}});
    REQUIRE(ok.code == 0);
    const json& certs = ok.summary.at("certificates");
    REQUIRE(certs.size() >= 4);
    for (const auto& [name, c] : certs.items()) {
        INFO(name);
        REQUIRE(c.at("pass").get<bool>());
        REQUIRE(c.at("margin").get<double>() > 0.0);
    }
    REQUIRE(certs.at("sgn_bound_sigma_1").at("value").get<double>() ==
            Approx(0.09937402154939959).margin(1e-9));
    REQUIRE(certs.at("no_contraction_witness").at("margin").get<double>() > 0.0);

    // Far enough above the threshold the two-step contraction factor crosses
    // one; the certificate must fail and the exit code must say so, with the
    // summary still on disk for the post-mortem.
    const CliRun bad =
        run_command("verify", {{"model", gaussian_model(1.0)}, {"two_step_bump", 0.01}});
    REQUIRE(bad.code == 2);
    REQUIRE(fs::exists(bad.dir / "summary.json"));
    REQUIRE_FALSE(bad.summary.at("certificates")
                      .at("two_step_factor_above_a_star")
                      .at("pass")
                      .get<bool>());
}

TEST_CASE("converse command audits every trace invariant and writes probe curves") {
    const json cfg = {{"model", gaussian_model(1.0)},
                      {"strategy", {{"kind", "linear_memoryless"}, {"gain", 0.2}}},
                      {"trials", 150},
                      {"horizon", 50},
                      {"base_seed", 11},
                      {"probe_a", 1.25},
                      {"m_grid", {1.0, 100.0}}};
    const CliRun r = run_command("converse", cfg);
    REQUIRE(r.code == 0);
    const json& inv = r.summary.at("invariants");
    REQUIRE(inv.at("traces").get<long>() == 150);
    REQUIRE(inv.at("violations").get<long>() == 0);
    REQUIRE(inv.at("steps").get<long>() > 150 * 40);
    const json& psilem = r.summary.at("psilem");
    REQUIRE(psilem.at("pass").get<bool>());
    REQUIRE(psilem.at("t").get<int>() == 5);
    REQUIRE(psilem.at("minimal_t").get<int>() == 5);
    REQUIRE(r.summary.at("kn_growth").at("slope").get<double>() >= 0.99);
    REQUIRE(line_count(r.dir / "probes.csv") == 1 + 50);  // header + n = 1..horizon
    REQUIRE(io::read_text(r.dir / "trace.csv").rfind("n,s,k,h,eta,psi\n", 0) == 0);
    REQUIRE(line_count(r.dir / "trace.csv") >= 2);

    json bad_t = cfg;
    bad_t["psilem_t"] = 3;
    REQUIRE(run_command("converse", bad_t).code == 1);

    json bad_m = cfg;
    bad_m["m_grid"] = {-1.0};
    REQUIRE(run_command("converse", bad_m).code == 1);
}

TEST_CASE("clt command reports the log-walk diagnostics") {
    const json cfg = {{"model", gaussian_model(1.0)},
                      {"a", 1.1},
                      {"trials", 500},
                      {"checkpoints", {50, 200}},
                      {"base_seed", 17}};
    const CliRun r = run_command("clt", cfg);
    REQUIRE(r.code == 0);
    REQUIRE(r.summary.at("d").get<double>() == Approx(0.55).margin(1e-15));
    REQUIRE(std::isfinite(r.summary.at("mu").get<double>()));
    REQUIRE(r.summary.at("sigma").get<double>() > 0.0);
    const double p = r.summary.at("p_value").get<double>();
    REQUIRE(p >= 0.0);
    REQUIRE(p <= 1.0);
    REQUIRE(line_count(r.dir / "checkpoints.csv") == 1 + 2);
}
