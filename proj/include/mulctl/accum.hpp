#pragma once

// Compensated and log-domain accumulators.  Ensemble statistics are folded
// per block and blocks are merged in a fixed order, so totals do not depend
// on how work was scheduled across threads.

#include <cmath>
#include <cstdint>
#include <limits>

namespace mulctl {

// Neumaier variant of Kahan summation.
class KahanSum {
public:
    void add(double x) {
        const double t = sum_ + x;
        if (std::abs(sum_) >= std::abs(x))
            comp_ += (sum_ - t) + x;
        else
            comp_ += (x - t) + sum_;
        sum_ = t;
    }
    void merge(const KahanSum& o) {
        add(o.sum_);
        add(o.comp_);
    }
    double value() const { return sum_ + comp_; }

private:
    double sum_ = 0.0;
    double comp_ = 0.0;
};

// Streaming log(sum(exp(x_i))).  Tracks the running maximum and a
// compensated sum of rescaled exponentials; -inf entries are no-ops beyond
// the count, so zero magnitudes fold in naturally.
class LogSumExp {
public:
    void add(double x) {
        ++count_;
        if (std::isinf(x) && x < 0.0) return;
        if (x <= max_) {
            sum_.add(std::exp(x - max_));
        } else {
            const double scale = std::isinf(max_) ? 0.0 : std::exp(max_ - x);
            KahanSum rescaled;
            rescaled.add(sum_.value() * scale);
            rescaled.add(1.0);
            sum_ = rescaled;
            max_ = x;
        }
    }

    void merge(const LogSumExp& o) {
        count_ += o.count_;
        if (o.empty_terms()) return;
        if (o.max_ <= max_) {
            sum_.add(o.sum_.value() * std::exp(o.max_ - max_));
        } else {
            const double scale = std::isinf(max_) ? 0.0 : std::exp(max_ - o.max_);
            KahanSum rescaled;
            rescaled.add(sum_.value() * scale);
            rescaled.add(o.sum_.value());
            sum_ = rescaled;
            max_ = o.max_;
        }
    }

    // log(sum exp(x_i)); -inf when every entry was -inf or nothing was added.
    double log_sum() const {
        if (empty_terms()) return -std::numeric_limits<double>::infinity();
        return max_ + std::log(sum_.value());
    }
    // log of the mean over all added entries (including -inf ones).
    double log_mean() const {
        if (count_ == 0) return -std::numeric_limits<double>::infinity();
        return log_sum() - std::log(static_cast<double>(count_));
    }
    std::uint64_t count() const { return count_; }

private:
    bool empty_terms() const { return std::isinf(max_) && max_ < 0.0; }
    double max_ = -std::numeric_limits<double>::infinity();
    KahanSum sum_;
    std::uint64_t count_ = 0;
};

}  // namespace mulctl
