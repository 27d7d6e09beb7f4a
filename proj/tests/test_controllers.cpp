#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <stdexcept>
#include <vector>

#include "mulctl/controllers.hpp"

using namespace mulctl;

TEST_CASE("sign convention maps zero to plus one") {
    REQUIRE(sgn(-3.0) == -1.0);
    REQUIRE(sgn(0.0) == 1.0);
    REQUIRE(sgn(2.5) == 1.0);
}

TEST_CASE("linear memoryless gain") {
    REQUIRE(LinearMemoryless::optimal_gain(std::sqrt(2.0), 1.0) ==
            Catch::Approx(std::sqrt(2.0) / 2.0));
    LinearMemoryless c(0.75);
    REQUIRE(c.control(0, 2.0) == 1.5);
    REQUIRE(c.control(5, -4.0) == -3.0);
    REQUIRE(c.gain() == 0.75);
}

TEST_CASE("tightness linear uses the scaled gain a d") {
    TightnessLinear c(2.6, 0.5);
    REQUIRE(c.control(0, 2.0) == Catch::Approx(2.6));
    REQUIRE(c.control(9, -1.0) == Catch::Approx(-1.3));
}

TEST_CASE("linear with memory applies the triangular schedule") {
    LinearWithMemory c({{0.5}, {0.25, 0.125}});
    REQUIRE(c.control(0, 2.0) == Catch::Approx(1.0));
    REQUIRE(c.control(1, 4.0) == Catch::Approx(0.25 * 2.0 + 0.125 * 4.0));
    REQUIRE_THROWS_AS(c.control(2, 1.0), std::out_of_range);
    REQUIRE_THROWS_AS(LinearWithMemory({{0.5, 0.5}}), std::invalid_argument);
}

TEST_CASE("linear with memory scaled variant discounts old observations") {
    LinearWithMemory c({{0.5}, {0.25, 0.125}}, /*scaled_a=*/2.0);
    REQUIRE(c.control(0, 2.0) == Catch::Approx(1.0));
    // weight on y_0 becomes 0.25 * 2^(0-1)
    REQUIRE(c.control(1, 4.0) == Catch::Approx(0.125 * 2.0 + 0.125 * 4.0));
}

TEST_CASE("clone resets controller memory") {
    LinearWithMemory c({{0.5}, {0.25, 0.125}});
    REQUIRE(c.control(0, 2.0) == Catch::Approx(1.0));
    auto fresh = c.clone();
    REQUIRE(fresh->control(0, 6.0) == Catch::Approx(3.0));
}

TEST_CASE("two step mean one parity behaviour") {
    const double a = std::sqrt(2.0) + 1.6e-3;
    const double eps = 0.1;
    TwoStepMeanOne c(a, 1.0, eps);
    const double dstar = LinearMemoryless::optimal_gain(a, 1.0);

    const double u0 = c.control(0, 3.0);
    REQUIRE(u0 == Catch::Approx(dstar * 3.0));
    // odd step adds eps * sgn(Y_1) |Y_0|
    const double u1 = c.control(1, -2.0);
    REQUIRE(u1 == Catch::Approx(dstar * -2.0 + eps * -1.0 * 3.0));
    const double u2 = c.control(2, 1.0);
    REQUIRE(u2 == Catch::Approx(dstar * 1.0));
}

TEST_CASE("two step mean one with eps zero is bit-identical to memoryless") {
    const double a = 1.3;
    TwoStepMeanOne two(a, 1.0, 0.0);
    LinearMemoryless lin(LinearMemoryless::optimal_gain(a, 1.0));
    for (int n = 0; n < 10; ++n) {
        const double y = std::sin(1.0 + n) * 3.0;
        REQUIRE(two.control(n, y) == lin.control(n, y));
    }
}

TEST_CASE("two step mean one scaled form divides eps by a") {
    const double a = 2.0, eps = 0.2;
    TwoStepMeanOne plain(a, 1.0, eps);
    TwoStepMeanOne scaled(a, 1.0, eps, /*scaled=*/true);
    plain.control(0, 1.0);
    scaled.control(0, 1.0);
    const double dstar = LinearMemoryless::optimal_gain(a, 1.0);
    REQUIRE(plain.control(1, 1.0) == Catch::Approx(dstar + eps));
    REQUIRE(scaled.control(1, 1.0) == Catch::Approx(dstar + eps / a));
}

TEST_CASE("two step zero mean parities and conventions") {
    const double a = 1.05, eps0 = 0.5, eps = 0.3;
    TwoStepZeroMean c(a, eps0, eps);
    REQUIRE(c.control(0, 2.0) == Catch::Approx(a / eps0 * 2.0));
    // odd: -a^2/eps0 * y_prev - eps * sgn(y_prev) |y|
    REQUIRE(c.control(1, -3.0) == Catch::Approx(-a * a / eps0 * 2.0 - eps * 3.0));
    // zero previous observation shorts the odd step to zero
    TwoStepZeroMean z(a, eps0, eps);
    REQUIRE(z.control(0, 0.0) == 0.0);
    REQUIRE(z.control(1, 5.0) == 0.0);
    REQUIRE_THROWS_AS(TwoStepZeroMean(a, 0.0, eps), std::invalid_argument);
}

TEST_CASE("two step zero mean scaled form lowers the odd gain") {
    const double a = 1.05, eps0 = 0.5, eps = 0.3;
    TwoStepZeroMean scaled(a, eps0, eps, /*scaled=*/true);
    scaled.control(0, 2.0);
    REQUIRE(scaled.control(1, -3.0) == Catch::Approx(-a / eps0 * 2.0 - eps * 3.0));
}

TEST_CASE("tabulated memoryless map interpolates and clamps") {
    MemorylessH h({-1.0, 0.0, 2.0}, {-3.0, 1.0, 5.0});
    REQUIRE(h.control(0, -1.0) == -3.0);
    REQUIRE(h.control(0, -0.5) == Catch::Approx(-1.0));
    REQUIRE(h.control(0, 1.0) == Catch::Approx(3.0));
    REQUIRE(h.control(0, -10.0) == -3.0);   // clamped left
    REQUIRE(h.control(0, 10.0) == 5.0);     // clamped right
    REQUIRE_THROWS_AS(MemorylessH({0.0, 0.0}, {1.0, 2.0}), std::invalid_argument);
    REQUIRE_THROWS_AS(MemorylessH({0.0, 1.0}, {1.0}), std::invalid_argument);
}

TEST_CASE("rademacher two point check of the odd step identity") {
    // For Z in {-1, +1} equally likely and unit y-scales the sign-aligned
    // term evaluates to E[sgn(Z) |t - Z|] = ((t-1>=0?t-1:1-t) - (t+1)) / 2
    // at t = 0: F(0) = (1 - 1) / 2 = 0 for the symmetric law.
    auto F = [](double t) {
        return 0.5 * (std::abs(t - 1.0) - std::abs(t + 1.0));
    };
    REQUIRE(F(0.0) == 0.0);
    REQUIRE(F(0.5) == Catch::Approx(-0.5));
    REQUIRE(F(1.0) == Catch::Approx(-1.0));
    // slope at 0 is -1, the zero-mean improvement hypothesis
    REQUIRE((F(1e-6) - F(-1e-6)) / 2e-6 == Catch::Approx(-1.0));
}
