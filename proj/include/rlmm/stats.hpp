#pragma once
#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <span>
#include <string>
#include <vector>
#include <rlmm/error.hpp>

namespace rlmm {

// sqrt(mean((log beta_hat - log beta)^2)) over the persons in estimates.
inline double rmse_log_beta(const std::map<std::string, double>& beta_hat, const std::map<std::string, double>& truth)
{
    if (beta_hat.empty()) throw precondition_error("no estimates to score");
    double s = 0.0;
    for (const auto& [id, b] : beta_hat) {
        auto it = truth.find(id);
        if (it == truth.end()) throw lookup_error("no true beta for person '" + id + "'");
        const double d = std::log(b) - std::log(it->second);
        s += d * d;
    }
    return std::sqrt(s / static_cast<double>(beta_hat.size()));
}

inline double pearson(std::span<const double> x, std::span<const double> y)
{
    if (x.size() != y.size()) throw precondition_error("correlation inputs differ in length");
    if (x.size() < 3) throw precondition_error("correlation needs at least 3 pairs");
    const double n = static_cast<double>(x.size());
    const double mx = std::accumulate(x.begin(), x.end(), 0.0) / n;
    const double my = std::accumulate(y.begin(), y.end(), 0.0) / n;
    double sxy = 0.0, sxx = 0.0, syy = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        sxy += (x[i] - mx) * (y[i] - my);
        sxx += (x[i] - mx) * (x[i] - mx);
        syy += (y[i] - my) * (y[i] - my);
    }
    if (sxx == 0.0 || syy == 0.0) throw undefined_correlation("correlation undefined: zero variance input");
    return sxy / std::sqrt(sxx * syy);
}

// 1-based ranks; tied values share the mean of their positions.
inline std::vector<double> average_ranks(std::span<const double> x)
{
    std::vector<std::size_t> order(x.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return x[a] < x[b]; });
    std::vector<double> r(x.size());
    std::size_t i = 0;
    while (i < order.size()) {
        std::size_t j = i;
        while (j + 1 < order.size() && x[order[j + 1]] == x[order[i]]) ++j;
        const double avg = 0.5 * static_cast<double>(i + j) + 1.0;
        for (std::size_t k = i; k <= j; ++k) r[order[k]] = avg;
        i = j + 1;
    }
    return r;
}

inline double spearman(std::span<const double> x, std::span<const double> y)
{
    if (x.size() != y.size()) throw precondition_error("correlation inputs differ in length");
    const auto rx = average_ranks(x), ry = average_ranks(y);
    return pearson(rx, ry);
}

struct Correlations
{
    double pearson = 0.0;
    double spearman = 0.0;
};

inline Correlations correlations(std::span<const double> x, std::span<const double> y)
{
    return {pearson(x, y), spearman(x, y)};
}

// Linear-interpolated percentile, p in [0, 100].
inline double percentile(std::vector<double> x, double p)
{
    if (x.empty()) throw precondition_error("percentile of an empty sample");
    std::sort(x.begin(), x.end());
    const double pos = p / 100.0 * static_cast<double>(x.size() - 1);
    const auto lo = static_cast<std::size_t>(std::floor(pos));
    const auto hi = std::min(lo + 1, x.size() - 1);
    return x[lo] + (pos - static_cast<double>(lo)) * (x[hi] - x[lo]);
}

} // namespace rlmm
