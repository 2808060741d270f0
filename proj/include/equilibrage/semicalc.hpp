#pragma once

#include <cmath>
#include <fstream>
#include <functional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "equilibrage/lattice.hpp"
#include "equilibrage/preferences.hpp"

namespace equilibrage {

// ---------------------------------------------------------------------------
// Grid functions
// ---------------------------------------------------------------------------

struct GridFunction {
    std::vector<double> t;                       // strictly increasing, on [0,T]
    std::vector<double> x;                       // strictly increasing, on [x1,x2]
    std::vector<std::vector<double>> values;     // values[j][m] = f(t_j, x_m)
    std::vector<std::vector<double>> dvalues;    // x-derivative samples, optional
    bool analytic_derivative = false;            // whether dvalues are analytic
};

inline void validate_grid_function(const GridFunction& f) {
    if (f.t.empty() || f.x.size() < 2)
        throw std::invalid_argument("grid function needs a time grid and >= 2 space points");
    for (std::size_t j = 0; j + 1 < f.t.size(); ++j)
        if (!(f.t[j] < f.t[j + 1]))
            throw std::invalid_argument("grid function: time grid must be increasing");
    for (std::size_t m = 0; m + 1 < f.x.size(); ++m)
        if (!(f.x[m] < f.x[m + 1]))
            throw std::invalid_argument("grid function: space grid must be increasing");
    if (f.values.size() != f.t.size())
        throw std::invalid_argument("grid function: one value row per time point required");
    for (const auto& row : f.values) {
        if (row.size() != f.x.size())
            throw std::invalid_argument("grid function: value row length mismatch");
        for (double v : row)
            if (!std::isfinite(v))
                throw std::invalid_argument("grid function: values must be finite");
    }
    if (!f.dvalues.empty() && f.dvalues.size() != f.t.size())
        throw std::invalid_argument("grid function: derivative rows mismatch");
}

/// Derivative samples of one time slice: analytic when given, central
/// differences otherwise.
inline std::vector<double> slice_derivative(const GridFunction& f, std::size_t j) {
    if (!f.dvalues.empty()) return f.dvalues[j];
    return central_differences(f.x, f.values[j]);
}

// ---------------------------------------------------------------------------
// CSV: header row carries the space grid, first column the time grid
// ---------------------------------------------------------------------------

inline void write_grid_function_csv(const GridFunction& f, std::ostream& os) {
    os << "t\\x";
    for (double xv : f.x) os << ',' << format_double(xv);
    os << '\n';
    for (std::size_t j = 0; j < f.t.size(); ++j) {
        os << format_double(f.t[j]);
        for (double v : f.values[j]) os << ',' << format_double(v);
        os << '\n';
    }
}

inline GridFunction read_grid_function_csv(std::istream& is) {
    GridFunction f;
    std::string line;
    if (!std::getline(is, line))
        throw std::invalid_argument("grid csv: empty input");
    {
        std::stringstream ss(line);
        std::string cell;
        std::getline(ss, cell, ',');  // corner label
        while (std::getline(ss, cell, ',')) f.x.push_back(std::stod(cell));
    }
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        std::stringstream ss(line);
        std::string cell;
        std::getline(ss, cell, ',');
        f.t.push_back(std::stod(cell));
        std::vector<double> row;
        while (std::getline(ss, cell, ',')) row.push_back(std::stod(cell));
        f.values.push_back(std::move(row));
    }
    validate_grid_function(f);
    return f;
}

// ---------------------------------------------------------------------------
// Convexity split: f = f1 - f2 with both pieces convex per time slice
// ---------------------------------------------------------------------------

struct ConvexitySplit {
    GridFunction f1, f2;  // dvalues carry the running Jordan parts of f_x
    double reconstruction_error = 0.0;
    std::string warning;  // set when the grid looks too coarse for the split
};

/// Running Jordan decomposition of the derivative into non-decreasing,
/// non-negative parts, integrated back by the trapezoid rule:
///   f1 = f(t,x1) + int up, f2 = int down.
inline ConvexitySplit convexity_split(const GridFunction& f) {
    validate_grid_function(f);
    ConvexitySplit out;
    out.f1.t = out.f2.t = f.t;
    out.f1.x = out.f2.x = f.x;
    out.f1.analytic_derivative = out.f2.analytic_derivative = f.analytic_derivative;
    const std::size_t nx = f.x.size();
    for (std::size_t j = 0; j < f.t.size(); ++j) {
        const std::vector<double> fx = slice_derivative(f, j);
        std::vector<double> up(nx), dn(nx);
        up[0] = std::max(fx[0], 0.0);
        dn[0] = std::max(-fx[0], 0.0);
        for (std::size_t m = 1; m < nx; ++m) {
            const double d = fx[m] - fx[m - 1];
            up[m] = up[m - 1] + std::max(d, 0.0);
            dn[m] = dn[m - 1] + std::max(-d, 0.0);
        }
        std::vector<double> v1(nx), v2(nx);
        v1[0] = f.values[j][0];
        v2[0] = 0.0;
        for (std::size_t m = 1; m < nx; ++m) {
            const double h = f.x[m] - f.x[m - 1];
            v1[m] = v1[m - 1] + 0.5 * h * (up[m - 1] + up[m]);
            v2[m] = v2[m - 1] + 0.5 * h * (dn[m - 1] + dn[m]);
        }
        double scale = 1.0;
        for (double v : f.values[j]) scale = std::max(scale, std::abs(v));
        for (std::size_t m = 0; m < nx; ++m)
            out.reconstruction_error = std::max(
                out.reconstruction_error, std::abs(v1[m] - v2[m] - f.values[j][m]) / scale);
        out.f1.values.push_back(std::move(v1));
        out.f2.values.push_back(std::move(v2));
        out.f1.dvalues.push_back(std::move(up));
        out.f2.dvalues.push_back(std::move(dn));
    }
    if (out.reconstruction_error > 1e-6)
        out.warning = "grid too coarse: split reconstructs f only to " +
                      format_double(out.reconstruction_error);
    return out;
}

// ---------------------------------------------------------------------------
// Inverse-function split
// ---------------------------------------------------------------------------

struct InverseSplit {
    GridFunction g1, g2;  // convex per slice; g1 - g2 = g up to O(grid^2)
    double reconstruction_error = 0.0;
};

namespace detail {

inline double lerp(const std::vector<double>& xs, const std::vector<double>& ys, double x) {
    if (x <= xs.front()) return ys.front();
    if (x >= xs.back()) return ys.back();
    std::size_t k = std::upper_bound(xs.begin(), xs.end(), x) - xs.begin() - 1;
    const double w = (x - xs[k]) / (xs[k + 1] - xs[k]);
    return ys[k] + w * (ys[k + 1] - ys[k]);
}

}  // namespace detail

/// Splits the inverse g of a strictly increasing f through the measures
/// induced by the Jordan parts of f_x composed with g:
///   g1 = g(y1) + g_y(y1)(y - y1) + double-int g_y^2 dh2 dz,
///   g2 = double-int g_y^2 dh1 dz.
/// Stieltjes sums carry trapezoid weights in g_y^2, so the reconstruction
/// error decreases at second order in the grid spacing.
inline InverseSplit inverse_split(const GridFunction& f, const GridFunction& g) {
    validate_grid_function(f);
    validate_grid_function(g);
    if (f.t != g.t)
        throw std::invalid_argument("inverse_split: f and g must share the time grid");
    for (std::size_t j = 0; j < f.t.size(); ++j)
        for (double d : slice_derivative(f, j))
            if (!(d > 0.0))
                throw std::invalid_argument("inverse_split: f is not strictly increasing "
                                            "(non-positive derivative sample)");
    // consistency of the pair: f(t, g(t,y)) must give back y
    for (std::size_t j = 0; j < f.t.size(); ++j) {
        const MonotoneCubic interp(f.x, f.values[j]);
        for (std::size_t m = 0; m < g.x.size(); ++m) {
            const double y = g.x[m];
            if (std::abs(interp(g.values[j][m]) - y) > 1e-6 * std::max(1.0, std::abs(y)))
                throw std::invalid_argument("inverse_split: g is not the inverse of f near y = " +
                                            format_double(y));
        }
    }

    const ConvexitySplit fsplit = convexity_split(f);
    InverseSplit out;
    out.g1.t = out.g2.t = g.t;
    out.g1.x = out.g2.x = g.x;
    const std::size_t ny = g.x.size();
    for (std::size_t j = 0; j < g.t.size(); ++j) {
        std::vector<double> h1(ny), h2(ny), gy(ny);
        for (std::size_t m = 0; m < ny; ++m) {
            const double xm = g.values[j][m];
            h1[m] = detail::lerp(f.x, fsplit.f1.dvalues[j], xm);
            h2[m] = detail::lerp(f.x, fsplit.f2.dvalues[j], xm);
            gy[m] = 1.0 / (h1[m] - h2[m]);  // g_y = 1 / f_x(g)
        }
        std::vector<double> s1(ny, 0.0), s2(ny, 0.0);
        for (std::size_t m = 1; m < ny; ++m) {
            const double w = 0.5 * (gy[m - 1] * gy[m - 1] + gy[m] * gy[m]);
            s1[m] = s1[m - 1] + w * (h1[m] - h1[m - 1]);
            s2[m] = s2[m - 1] + w * (h2[m] - h2[m - 1]);
        }
        std::vector<double> v1(ny), v2(ny);
        v1[0] = g.values[j][0];
        v2[0] = 0.0;
        for (std::size_t m = 1; m < ny; ++m) {
            const double dy = g.x[m] - g.x[m - 1];
            v1[m] = v1[m - 1] + gy[0] * dy + 0.5 * dy * (s2[m - 1] + s2[m]);
            v2[m] = v2[m - 1] + 0.5 * dy * (s1[m - 1] + s1[m]);
        }
        double scale = 1.0;
        for (double v : g.values[j]) scale = std::max(scale, std::abs(v));
        for (std::size_t m = 0; m < ny; ++m)
            out.reconstruction_error =
                std::max(out.reconstruction_error,
                         std::abs(v1[m] - v2[m] - g.values[j][m]) / scale);
        out.g1.values.push_back(std::move(v1));
        out.g2.values.push_back(std::move(v2));
    }
    return out;
}

// ---------------------------------------------------------------------------
// Semimartingale-function decomposition on trees
// ---------------------------------------------------------------------------

/// f(t,x) together with its right x-derivative; either analytic closures or
/// a grid function sampled with right difference quotients.
struct SpaceTimeFunction {
    std::function<double(double, double)> value;
    std::function<double(double, double)> right_dx;
    double x_lo = -kInf, x_hi = kInf;  // admissible range for the state
};

inline SpaceTimeFunction analytic_function(std::function<double(double, double)> value,
                                           std::function<double(double, double)> right_dx) {
    return SpaceTimeFunction{std::move(value), std::move(right_dx), -kInf, kInf};
}

inline SpaceTimeFunction from_grid(const GridFunction& f) {
    validate_grid_function(f);
    auto grid = std::make_shared<GridFunction>(f);
    auto slice = [grid](double t, std::size_t m) {
        // linear interpolation across time slices
        const auto& ts = grid->t;
        if (t <= ts.front()) return grid->values.front()[m];
        if (t >= ts.back()) return grid->values.back()[m];
        std::size_t j = std::upper_bound(ts.begin(), ts.end(), t) - ts.begin() - 1;
        const double w = (t - ts[j]) / (ts[j + 1] - ts[j]);
        return grid->values[j][m] + w * (grid->values[j + 1][m] - grid->values[j][m]);
    };
    SpaceTimeFunction fn;
    fn.x_lo = f.x.front();
    fn.x_hi = f.x.back();
    fn.value = [grid, slice](double t, double x) {
        const auto& xs = grid->x;
        if (x <= xs.front()) return slice(t, 0);
        if (x >= xs.back()) return slice(t, xs.size() - 1);
        std::size_t m = std::upper_bound(xs.begin(), xs.end(), x) - xs.begin() - 1;
        const double w = (x - xs[m]) / (xs[m + 1] - xs[m]);
        return (1.0 - w) * slice(t, m) + w * slice(t, m + 1);
    };
    fn.right_dx = [grid, slice](double t, double x) {
        const auto& xs = grid->x;
        std::size_t m;
        if (x < xs.front())
            m = 0;
        else if (x >= xs[xs.size() - 2])
            m = xs.size() - 2;
        else
            m = std::upper_bound(xs.begin(), xs.end(), x) - xs.begin() - 1;
        return (slice(t, m + 1) - slice(t, m)) / (xs[m + 1] - xs[m]);
    };
    return fn;
}

struct SemifunDecomposition {
    TreeProcess martingale_part;  // starts at zero; exact martingale
    TreeProcess drift_part;       // f(t,X) - f(0,X_0) - martingale part
};

/// f(t, X_t) = f(0, X_0) + M~ + A~ with dM~ = f_{x+}(t_{k-1}, X_{k-1}) dM;
/// the predictable integrand keeps M~ an exact martingale on the tree.
inline SemifunDecomposition semifun_decompose(const EventTree& tree,
                                              const SpaceTimeFunction& f,
                                              const TreeProcess& x) {
    check_finite(tree, x, "semifun_decompose");
    for (const auto& n : tree.nodes)
        if (x.values[n.id] < f.x_lo || x.values[n.id] > f.x_hi)
            throw std::invalid_argument("semifun_decompose: state leaves the grid at node " +
                                        std::to_string(n.id));
    const Decomposition doob = doob_decompose(tree, x);
    SemifunDecomposition out;
    out.martingale_part = TreeProcess{Flavor::Adapted, std::vector<double>(tree.size(), 0.0)};
    out.drift_part = TreeProcess{Flavor::Adapted, std::vector<double>(tree.size(), 0.0)};
    const double f0 = f.value(tree.grid.times[0], x.values[0]);
    for (const auto& n : tree.nodes) {
        if (n.children.empty()) continue;
        const double slope = f.right_dx(tree.grid.times[n.level], x.values[n.id]);
        for (int c : n.children)
            out.martingale_part.values[c] =
                out.martingale_part.values[n.id] +
                slope * (doob.martingale_part.values[c] - doob.martingale_part.values[n.id]);
    }
    for (const auto& n : tree.nodes)
        out.drift_part.values[n.id] = f.value(tree.grid.times[n.level], x.values[n.id]) - f0 -
                                      out.martingale_part.values[n.id];
    return out;
}

// ---------------------------------------------------------------------------
// Min-stability of the N-functional
// ---------------------------------------------------------------------------

struct MinStabilityReport {
    double n_min = 0.0, n_first = 0.0, n_second = 0.0;
    double ratio = 0.0;       // n_min / (n_first + n_second), empirical
    bool factor2_bound = false;

    double bound() const { return 2.0 * (n_first + n_second) + 1e-10; }
};

/// Discrete stability of X -> N(X) under pointwise minima. The factor-2
/// bound is provable in discrete time via the 1-Lipschitz property of min;
/// the sharper continuous-time constant is reported as a ratio only.
inline MinStabilityReport min_stability(const EventTree& tree, const TreeProcess& x1,
                                        const TreeProcess& x2) {
    check_finite(tree, x1, "min_stability");
    check_finite(tree, x2, "min_stability");
    TreeProcess xmin{Flavor::Adapted, std::vector<double>(tree.size(), 0.0)};
    for (std::size_t i = 0; i < tree.size(); ++i)
        xmin.values[i] = std::min(x1.values[i], x2.values[i]);
    MinStabilityReport rep;
    rep.n_min = n_functional(tree, xmin);
    rep.n_first = n_functional(tree, x1);
    rep.n_second = n_functional(tree, x2);
    const double denom = rep.n_first + rep.n_second;
    rep.ratio = denom > 0.0 ? rep.n_min / denom : 0.0;
    rep.factor2_bound = rep.n_min <= rep.bound();
    return rep;
}

}  // namespace equilibrage
