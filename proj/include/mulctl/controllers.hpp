#pragma once

// Control strategies.  Each one sees only (n, Y_n) at run time.
//
// Every family also has a "scaled" form for driving the unit-dynamics
// system S: substituting U_n = a^{-n} U_{a,n} and Y_{a,i} = a^i Y_i into the
// S_a control law leaves past observations weighted by a^{i-n} <= 1, so the
// scaled coefficients below are exactly the original laws transported to S.

#include <cmath>
#include <memory>
#include <stdexcept>
#include <vector>

#include "system.hpp"

namespace mulctl {

// sgn with sgn(0) = +1, matching the tie convention used throughout.
inline double sgn(double x) { return x < 0.0 ? -1.0 : 1.0; }

class NullStrategy final : public Strategy {
public:
    double control(int, double) override { return 0.0; }
    std::unique_ptr<Strategy> clone() const override {
        return std::make_unique<NullStrategy>(*this);
    }
};

// U_n = d Y_n.  The second-moment-optimal choice is d = a/(1 + sigma^2).
class LinearMemoryless final : public Strategy {
public:
    explicit LinearMemoryless(double d) : d_(d) {}
    static double optimal_gain(double a, double sigma_sq) { return a / (1.0 + sigma_sq); }
    double control(int, double y) override { return d_ * y; }
    std::unique_ptr<Strategy> clone() const override {
        return std::make_unique<LinearMemoryless>(*this);
    }
    double gain() const { return d_; }

private:
    double d_;
};

// U_n = a d Y_n; with d at the argmin of E log|1 - dZ| this achieves the
// tightness threshold.
class TightnessLinear final : public Strategy {
public:
    TightnessLinear(double a, double d) : ad_(a * d) {}
    double control(int, double y) override { return ad_ * y; }
    std::unique_ptr<Strategy> clone() const override {
        return std::make_unique<TightnessLinear>(*this);
    }

private:
    double ad_;
};

// U_n = sum_{i<=n} alpha[n][i] Y_i with a dense lower-triangular schedule.
class LinearWithMemory final : public Strategy {
public:
    // scaled_a > 0 runs the schedule on the unit-dynamics system, weighting
    // past observations by scaled_a^(i-n).
    explicit LinearWithMemory(std::vector<std::vector<double>> alpha, double scaled_a = 0.0)
        : alpha_(std::move(alpha)), scaled_a_(scaled_a) {
        for (std::size_t n = 0; n < alpha_.size(); ++n)
            if (alpha_[n].size() != n + 1)
                throw std::invalid_argument("LinearWithMemory: schedule must be lower-triangular");
    }
    double control(int n, double y) override {
        const auto un = static_cast<std::size_t>(n);
        if (un >= alpha_.size())
            throw std::out_of_range("LinearWithMemory: step beyond schedule horizon");
        past_.push_back(y);
        double u = 0.0;
        for (std::size_t i = 0; i <= un; ++i) {
            double w = alpha_[un][i];
            if (scaled_a_ > 0.0)
                w *= std::pow(scaled_a_, static_cast<double>(i) - static_cast<double>(un));
            u += w * past_[i];
        }
        return u;
    }
    std::unique_ptr<Strategy> clone() const override {
        auto c = std::make_unique<LinearWithMemory>(*this);
        c->past_.clear();
        return c;
    }

private:
    std::vector<std::vector<double>> alpha_;
    double scaled_a_;
    std::vector<double> past_;
};

// Mean-one two-step scheme: even steps use the memoryless optimum, odd steps
// add the sign-aligned perturbation eps * sgn(Y_n) |Y_{n-1}|.
class TwoStepMeanOne final : public Strategy {
public:
    TwoStepMeanOne(double a, double sigma_sq, double eps, bool scaled = false)
        : dstar_(LinearMemoryless::optimal_gain(a, sigma_sq)),
          eps_(scaled ? eps / a : eps) {}
    double control(int n, double y) override {
        double u = dstar_ * y;
        if (n % 2 == 1 && eps_ != 0.0) u += eps_ * sgn(y) * std::abs(y_prev_);
        y_prev_ = y;
        return u;
    }
    std::unique_ptr<Strategy> clone() const override {
        auto c = std::make_unique<TwoStepMeanOne>(*this);
        c->y_prev_ = 0.0;
        return c;
    }

private:
    double dstar_;
    double eps_;
    double y_prev_ = 0.0;
};

// Zero-mean two-step scheme.  Even step: a/eps0 * Y_n.  Odd step:
// -a^2/eps0 * Y_{n-1} - eps * Y_{n-1} |Y_n / Y_{n-1}|; when Y_{n-1} = 0 the
// odd-step control is 0 by convention.
class TwoStepZeroMean final : public Strategy {
public:
    TwoStepZeroMean(double a, double eps0, double eps, bool scaled = false)
        : even_gain_(a / eps0),
          odd_gain_((scaled ? a : a * a) / eps0),
          eps_(eps) {
        if (eps0 <= 0.0) throw std::invalid_argument("TwoStepZeroMean: eps0 must be positive");
    }
    double control(int n, double y) override {
        double u;
        if (n % 2 == 0) {
            u = even_gain_ * y;
        } else if (y_prev_ == 0.0) {
            u = 0.0;
        } else {
            u = -odd_gain_ * y_prev_ - eps_ * sgn(y_prev_) * std::abs(y);
        }
        y_prev_ = y;
        return u;
    }
    std::unique_ptr<Strategy> clone() const override {
        auto c = std::make_unique<TwoStepZeroMean>(*this);
        c->y_prev_ = 0.0;
        return c;
    }

private:
    double even_gain_, odd_gain_, eps_;
    double y_prev_ = 0.0;
};

// U_n = h(Y_n) for a tabulated h, linearly interpolated with clamped
// extrapolation at the grid edges.
class MemorylessH final : public Strategy {
public:
    MemorylessH(std::vector<double> grid, std::vector<double> values)
        : grid_(std::move(grid)), values_(std::move(values)) {
        if (grid_.size() != values_.size() || grid_.size() < 2)
            throw std::invalid_argument("MemorylessH: grid/value size mismatch");
        for (std::size_t i = 1; i < grid_.size(); ++i)
            if (!(grid_[i] > grid_[i - 1]))
                throw std::invalid_argument("MemorylessH: grid must be strictly increasing");
    }
    double control(int, double y) override {
        if (y <= grid_.front()) return values_.front();
        if (y >= grid_.back()) return values_.back();
        std::size_t hi = 1;
        while (grid_[hi] < y) ++hi;
        const double t = (y - grid_[hi - 1]) / (grid_[hi] - grid_[hi - 1]);
        return values_[hi - 1] + t * (values_[hi] - values_[hi - 1]);
    }
    std::unique_ptr<Strategy> clone() const override {
        return std::make_unique<MemorylessH>(*this);
    }

private:
    std::vector<double> grid_, values_;
};

}  // namespace mulctl
