#pragma once

// Strict JSON configuration loading for the experiment runner.  Every
// recognized key is consumed exactly once and anything left over is an
// error, so a misspelled knob can never silently fall back to a default.

#include <cstdint>
#include <memory>
#include <optional>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "analysis.hpp"
#include "controllers.hpp"
#include "converse.hpp"
#include "montecarlo.hpp"
#include "noise.hpp"
#include "system.hpp"

namespace mulctl::config {

using nlohmann::json;

// Wraps one JSON object; typed getters mark keys as consumed and finish()
// rejects anything unconsumed.
class ObjectReader {
public:
    ObjectReader(const json& j, std::string ctx) : j_(&j), ctx_(std::move(ctx)) {
        if (!j.is_object())
            throw std::invalid_argument(ctx_ + ": expected a JSON object");
    }

    bool has(const char* key) const { return j_->contains(key); }

    const json& raw(const char* key) {
        auto it = j_->find(key);
        if (it == j_->end())
            throw std::invalid_argument(ctx_ + ": missing required key '" +
                                        std::string(key) + "'");
        seen_.insert(key);
        return *it;
    }

    template <typename T>
    T require(const char* key) {
        return convert<T>(raw(key), key);
    }

    template <typename T>
    T get(const char* key, T fallback) {
        if (!has(key)) return fallback;
        return require<T>(key);
    }

    void finish() const {
        for (const auto& [k, v] : j_->items()) {
            (void)v;
            if (!seen_.count(k))
                throw std::invalid_argument(ctx_ + ": unknown key '" + k + "'");
        }
    }

private:
    template <typename T>
    T convert(const json& v, const char* key) const {
        try {
            return v.get<T>();
        } catch (const json::exception&) {
            throw std::invalid_argument(ctx_ + ": key '" + std::string(key) +
                                        "' has the wrong type");
        }
    }

    const json* j_;
    std::string ctx_;
    std::set<std::string> seen_;
};

inline NoiseModel parse_model(const json& j) {
    ObjectReader r(j, "model");
    const auto kind = r.require<std::string>("kind");
    if (kind == "gaussian_mean_one") {
        const double sigma = r.require<double>("sigma");
        r.finish();
        return NoiseModel::gaussian_mean_one(sigma);
    }
    if (kind == "gaussian_mean_zero") {
        const double sigma = r.require<double>("sigma");
        r.finish();
        return NoiseModel::gaussian_mean_zero(sigma);
    }
    if (kind == "exp_poly") {
        const auto coeffs = r.require<std::vector<double>>("coeffs");
        std::optional<double> tail;
        if (r.has("tail_delta")) tail = r.require<double>("tail_delta");
        r.finish();
        return NoiseModel::exp_poly(coeffs, tail);
    }
    throw std::invalid_argument("model: unknown kind '" + kind + "'");
}

inline InitialState parse_x0(const json& j) {
    ObjectReader r(j, "x0");
    const auto kind = r.require<std::string>("kind");
    if (kind == "standard_gaussian") {
        r.finish();
        return InitialState::standard_gaussian();
    }
    if (kind == "point") {
        const double v = r.require<double>("value");
        r.finish();
        return InitialState::point(v);
    }
    if (kind == "inverse_cubic") {
        const double m = r.require<double>("m");
        r.finish();
        return InitialState::inverse_cubic(m);
    }
    throw std::invalid_argument("x0: unknown kind '" + kind + "'");
}

// Strategy block.  "a" is the growth factor the strategy is built for; gains
// given as the string "optimal" or "search" are filled in from the model.
inline std::shared_ptr<const Strategy> parse_strategy(const json& j, double a,
                                                      const NoiseModel& model) {
    ObjectReader r(j, "strategy");
    const auto kind = r.require<std::string>("kind");
    if (kind == "null") {
        r.finish();
        return std::make_shared<NullStrategy>();
    }
    if (kind == "linear_memoryless") {
        const json& g = r.raw("gain");
        double gain = 0.0;
        if (g.is_string()) {
            if (g.get<std::string>() != "optimal")
                throw std::invalid_argument(
                    "strategy: gain must be a number or \"optimal\"");
            gain = a * model.mean() / model.second_moment();
        } else if (g.is_number()) {
            gain = g.get<double>();
        } else {
            throw std::invalid_argument("strategy: gain must be a number or \"optimal\"");
        }
        r.finish();
        return std::make_shared<LinearMemoryless>(gain);
    }
    if (kind == "tightness_linear") {
        const double d = r.require<double>("gain");
        r.finish();
        return std::make_shared<TightnessLinear>(a, d);
    }
    if (kind == "two_step_mean_one") {
        const json& e = r.raw("epsilon");
        double eps = 0.0;
        if (e.is_string()) {
            if (e.get<std::string>() != "search")
                throw std::invalid_argument(
                    "strategy: epsilon must be a number or \"search\"");
            eps = analysis::search_epsilon_mean_one(model, a).eps;
        } else if (e.is_number()) {
            eps = e.get<double>();
        } else {
            throw std::invalid_argument("strategy: epsilon must be a number or \"search\"");
        }
        const bool scaled = r.get<bool>("scaled", false);
        r.finish();
        return std::make_shared<TwoStepMeanOne>(a, model.variance(), eps, scaled);
    }
    if (kind == "two_step_zero_mean") {
        double eps0 = 0.0, eps = 0.0;
        const json& e = r.raw("epsilon");
        if (e.is_string()) {
            if (e.get<std::string>() != "search")
                throw std::invalid_argument(
                    "strategy: epsilon must be a number or \"search\"");
            const auto choice = analysis::search_epsilon_zero_mean(model);
            eps = choice.eps;
            eps0 = choice.eps0;
        } else if (e.is_number()) {
            eps = e.get<double>();
            eps0 = r.require<double>("eps0");
        } else {
            throw std::invalid_argument("strategy: epsilon must be a number or \"search\"");
        }
        const bool scaled = r.get<bool>("scaled", false);
        r.finish();
        return std::make_shared<TwoStepZeroMean>(a, eps0, eps, scaled);
    }
    if (kind == "linear_with_memory") {
        const auto alpha = r.require<std::vector<std::vector<double>>>("alpha");
        const bool scaled = r.get<bool>("scaled", false);
        r.finish();
        return std::make_shared<LinearWithMemory>(alpha, scaled ? a : 0.0);
    }
    throw std::invalid_argument("strategy: unknown kind '" + kind + "'");
}

inline converse::GenieConstants parse_constants(const json& j) {
    ObjectReader r(j, "constants");
    converse::GenieConstants c;
    c.c1 = r.get<double>("c1", c.c1);
    c.c2 = r.get<double>("c2", c.c2);
    c.c3 = r.get<double>("c3", c.c3);
    c.delta = r.get<double>("delta", c.delta);
    r.finish();
    return c;
}

}  // namespace mulctl::config
