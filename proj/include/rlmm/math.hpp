#pragma once
#include <algorithm>
#include <cmath>
#include <limits>
#include <span>
#include <vector>
#include <rlmm/error.hpp>

namespace rlmm {

inline double logsumexp(std::span<const double> x)
{
    if (x.empty()) return -std::numeric_limits<double>::infinity();
    const double m = *std::max_element(x.begin(), x.end());
    if (!std::isfinite(m)) return m;
    double s = 0.0;
    for (double v : x) s += std::exp(v - m);
    return m + std::log(s);
}

// out[i] = softmax(scale * x)[i], max-subtracted.
inline void softmax(std::span<const double> x, double scale, std::span<double> out)
{
    if (x.empty()) throw precondition_error("softmax over an empty set");
    double m = -std::numeric_limits<double>::infinity();
    for (double v : x) m = std::max(m, scale * v);
    double s = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        out[i] = std::exp(scale * x[i] - m);
        s += out[i];
    }
    for (auto& p : out) p /= s;
}

inline std::vector<double> softmax(std::span<const double> x, double scale = 1.0)
{
    std::vector<double> out(x.size());
    softmax(x, scale, out);
    return out;
}

inline double mean(std::span<const double> x)
{
    if (x.empty()) throw precondition_error("mean of an empty sample");
    double s = 0.0;
    for (double v : x) s += v;
    return s / static_cast<double>(x.size());
}

// Population variance (divides by n).
inline double population_variance(std::span<const double> x)
{
    const double m = mean(x);
    double s = 0.0;
    for (double v : x) s += (v - m) * (v - m);
    return s / static_cast<double>(x.size());
}

/*
 * Golden-section maximization of a unimodal f on [lo, hi]; stops when the
 * bracket is narrower than tol. Returns the midpoint of the final bracket.
 */
template <class F>
double golden_section_max(F&& f, double lo, double hi, double tol, int* evals = nullptr)
{
    constexpr double invphi = 0.6180339887498949;
    double a = lo, b = hi;
    double c = b - invphi * (b - a), d = a + invphi * (b - a);
    double fc = f(c), fd = f(d);
    int n = 2;
    while (b - a > tol) {
        if (fc >= fd) {
            b = d;
            d = c;
            fd = fc;
            c = b - invphi * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + invphi * (b - a);
            fd = f(d);
        }
        ++n;
    }
    if (evals) *evals += n;
    return 0.5 * (a + b);
}

/*
 * Maximizes f on [lo, hi] by a uniform scan of grid_points points followed
 * by golden section inside the bracket around the best grid point.
 */
template <class F>
double bracketed_max(F&& f, double lo, double hi, double tol, int grid_points = 17, int* evals = nullptr)
{
    if (grid_points < 3) grid_points = 3;
    const double h = (hi - lo) / (grid_points - 1);
    int best = 0;
    double fbest = -std::numeric_limits<double>::infinity();
    for (int i = 0; i < grid_points; ++i) {
        const double v = f(lo + i * h);
        if (v > fbest) {
            fbest = v;
            best = i;
        }
    }
    if (evals) *evals += grid_points;
    const double a = lo + std::max(0, best - 1) * h;
    const double b = lo + std::min(grid_points - 1, best + 1) * h;
    const double x = golden_section_max(f, a, b, tol, evals);
    const double fx = f(x);
    if (evals) ++*evals;
    return fx >= fbest ? x : lo + best * h;
}

} // namespace rlmm
