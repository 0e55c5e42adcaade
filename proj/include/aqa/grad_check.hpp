// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "aqa/rng.hpp"
#include "aqa/tensor.hpp"

namespace aqa {

struct GradCheckConfig {
    double h = 1e-5;
    double tol = 1e-5;
    // 0 = check every coordinate; otherwise subsample this many per parameter.
    int max_coords_per_param = 0;
    uint64_t subsample_seed = 0;
    // Relative error denominator floor; errors below this scale are judged
    // absolutely, which keeps finite-difference noise from near-zero
    // gradients out of the ratio.
    double denom_floor = 1e-3;
};

struct GradCheckReport {
    double max_abs_err = 0.0;
    double max_rel_err = 0.0;
    bool passed = false;
    std::string worst_path; // offending coordinate (worst error or first non-finite)
    // parameter path -> (analytic, numeric) at that parameter's worst coordinate
    std::map<std::string, std::pair<double, double>> per_param_errors;

    std::string to_string() const {
        std::string s = cat("grad check: ", passed ? "PASS" : "FAIL",
                            "  max_abs_err=", max_abs_err, "  max_rel_err=", max_rel_err, "\n");
        for (const auto& [path, an] : per_param_errors)
            s += cat("  ", path, ": analytic=", an.first, " numeric=", an.second, "\n");
        if (!passed && !worst_path.empty()) s += cat("  worst: ", worst_path, "\n");
        return s;
    }
};

// Central-difference check of d(f)/d(param) for every named parameter.
// f must rebuild its graph on each call, reading the parameters' current
// values, and must be deterministic (freeze dropout masks and RNG draws).
template <class F, class Real = double>
GradCheckReport grad_check(F&& f, std::vector<std::pair<std::string, TensorT<Real>>> params,
                           GradCheckConfig cfg = {}) {
    GradCheckReport report;
    bool finite_ok = true;

    for (auto& [path, p] : params) p.zero_grad();
    TensorT<Real> loss = f();
    if (!std::isfinite(static_cast<double>(loss.item()))) {
        report.worst_path = "<loss>";
        report.passed = false;
        return report;
    }
    backward(loss);

    std::vector<std::vector<Real>> analytic;
    analytic.reserve(params.size());
    for (auto& [path, p] : params) analytic.push_back(p.grad());

    for (size_t pi = 0; pi < params.size(); ++pi) {
        auto& [path, p] = params[pi];
        std::vector<Real>& vals = p.mutable_value();
        const std::int64_t n = p.size();

        std::vector<std::int64_t> coords;
        if (cfg.max_coords_per_param > 0 && n > cfg.max_coords_per_param) {
            Rng rng(mix_seed({cfg.subsample_seed, 0x6772616463686bULL, pi}));
            std::vector<std::int64_t> all(static_cast<size_t>(n));
            for (std::int64_t i = 0; i < n; ++i) all[static_cast<size_t>(i)] = i;
            rng.shuffle(all);
            coords.assign(all.begin(), all.begin() + cfg.max_coords_per_param);
        } else {
            coords.resize(static_cast<size_t>(n));
            for (std::int64_t i = 0; i < n; ++i) coords[static_cast<size_t>(i)] = i;
        }

        double worst_rel = -1.0;
        for (std::int64_t c : coords) {
            const Real old = vals[static_cast<size_t>(c)];
            vals[static_cast<size_t>(c)] = old + static_cast<Real>(cfg.h);
            const double lp = static_cast<double>(f().item());
            vals[static_cast<size_t>(c)] = old - static_cast<Real>(cfg.h);
            const double lm = static_cast<double>(f().item());
            vals[static_cast<size_t>(c)] = old;

            const double numeric = (lp - lm) / (2.0 * cfg.h);
            const double an = static_cast<double>(analytic[pi][static_cast<size_t>(c)]);
            const std::string coord_path = cat(path, "[", c, "]");

            if (!std::isfinite(numeric) || !std::isfinite(an)) {
                finite_ok = false;
                if (report.worst_path.empty()) report.worst_path = coord_path;
                report.per_param_errors[path] = {an, numeric};
                continue;
            }
            const double abs_err = std::fabs(an - numeric);
            const double denom = std::max({cfg.denom_floor, std::fabs(an), std::fabs(numeric)});
            const double rel_err = abs_err / denom;
            report.max_abs_err = std::max(report.max_abs_err, abs_err);
            if (rel_err > report.max_rel_err) {
                report.max_rel_err = rel_err;
                report.worst_path = coord_path;
            }
            if (rel_err > worst_rel) {
                worst_rel = rel_err;
                report.per_param_errors[path] = {an, numeric};
            }
        }
    }

    report.passed = finite_ok && report.max_rel_err <= cfg.tol;
    return report;
}

} // namespace aqa
