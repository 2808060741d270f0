#pragma once

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

#include "equilibrage/lattice.hpp"
#include "equilibrage/util.hpp"

namespace equilibrage {

// ---------------------------------------------------------------------------
// Monotone cubic interpolation (Fritsch-Butland slopes) for tabulated
// inverse marginal utilities
// ---------------------------------------------------------------------------

class MonotoneCubic {
public:
    MonotoneCubic() = default;

    MonotoneCubic(std::vector<double> xs, std::vector<double> ys)
        : x_(std::move(xs)), y_(std::move(ys)) {
        const std::size_t n = x_.size();
        if (n < 2 || y_.size() != n)
            throw std::invalid_argument("monotone cubic needs >= 2 matching samples");
        for (std::size_t k = 0; k + 1 < n; ++k)
            if (!(x_[k] < x_[k + 1]))
                throw std::invalid_argument("monotone cubic grid must be increasing");
        std::vector<double> h(n - 1), d(n - 1);
        for (std::size_t k = 0; k + 1 < n; ++k) {
            h[k] = x_[k + 1] - x_[k];
            d[k] = (y_[k + 1] - y_[k]) / h[k];
        }
        m_.assign(n, 0.0);
        for (std::size_t k = 1; k + 1 < n; ++k) {
            if (d[k - 1] * d[k] <= 0.0) continue;
            const double w1 = 2.0 * h[k] + h[k - 1];
            const double w2 = h[k] + 2.0 * h[k - 1];
            m_[k] = (w1 + w2) / (w1 / d[k - 1] + w2 / d[k]);
        }
        auto end_slope = [](double dm, double dn, double hm, double hn) {
            double s = ((2.0 * hm + hn) * dm - hm * dn) / (hm + hn);
            if (s * dm <= 0.0) return 0.0;
            if (std::abs(s) > 3.0 * std::abs(dm)) return 3.0 * dm;
            return s;
        };
        m_[0] = n == 2 ? d[0] : end_slope(d[0], d[1], h[0], h[1]);
        m_[n - 1] = n == 2 ? d[n - 2]
                           : end_slope(d[n - 2], d[n - 3], h[n - 2], h[n - 3]);
    }

    double operator()(double x) const {
        const std::size_t n = x_.size();
        if (x <= x_.front()) return y_.front() + m_.front() * (x - x_.front());
        if (x >= x_.back()) return y_.back() + m_.back() * (x - x_.back());
        std::size_t k =
            std::upper_bound(x_.begin(), x_.end(), x) - x_.begin() - 1;
        k = std::min(k, n - 2);
        const double h = x_[k + 1] - x_[k];
        const double s = (x - x_[k]) / h;
        const double s2 = s * s, s3 = s2 * s;
        return y_[k] * (2 * s3 - 3 * s2 + 1) + h * m_[k] * (s3 - 2 * s2 + s) +
               y_[k + 1] * (-2 * s3 + 3 * s2) + h * m_[k + 1] * (s3 - s2);
    }

    double front_x() const { return x_.front(); }
    double back_x() const { return x_.back(); }

private:
    std::vector<double> x_, y_, m_;
};

// ---------------------------------------------------------------------------
// Utility families
// ---------------------------------------------------------------------------

/// Discounted utility U(t,x) = exp(-beta t) * u(x) with
///   log:       u(x) = log x
///   power(p):  u(x) = sgn(p) x^p, p in (-inf,1) \ {0}
///   tabulated: specified through the inverse marginal I on a log-spaced
///              y-grid; u recovered by quadrature of u' where needed.
struct UtilitySpec {
    enum class Family { Log, Power, Tabulated };

    Family family = Family::Log;
    double p = 0.0;
    double beta = 0.0;
    double x_min = 1e-10;  // domain floor for the tabulated family

    std::vector<double> table_y;  // increasing, strictly positive
    std::vector<double> table_i;  // strictly decreasing, strictly positive

    // interpolant of log I0 against log y (built lazily by validate())
    MonotoneCubic log_interp;
    bool built = false;
};

inline void validate_utility(UtilitySpec& u) {
    if (u.beta < 0.0) throw std::invalid_argument("utility: beta must be >= 0");
    switch (u.family) {
        case UtilitySpec::Family::Log:
            break;
        case UtilitySpec::Family::Power:
            if (!(u.p < 1.0) || u.p == 0.0)
                throw std::invalid_argument("utility: power exponent must lie in (-inf,1), p != 0");
            break;
        case UtilitySpec::Family::Tabulated: {
            const std::size_t n = u.table_y.size();
            if (n < 4 || u.table_i.size() != n)
                throw std::invalid_argument("utility: tabulated family needs >= 4 samples");
            std::vector<double> lx(n), li(n);
            for (std::size_t k = 0; k < n; ++k) {
                if (!(u.table_y[k] > 0.0) || !(u.table_i[k] > 0.0))
                    throw std::invalid_argument("utility: table entries must be positive");
                if (k > 0 && !(u.table_y[k] > u.table_y[k - 1]))
                    throw std::invalid_argument("utility: table y-grid must be increasing");
                if (k > 0 && !(u.table_i[k] < u.table_i[k - 1]))
                    throw std::invalid_argument("utility: tabulated I must be strictly decreasing");
                lx[k] = std::log(u.table_y[k]);
                li[k] = std::log(u.table_i[k]);
            }
            u.log_interp = MonotoneCubic(std::move(lx), std::move(li));
            u.built = true;
            break;
        }
    }
}

namespace detail {

inline double discount(const UtilitySpec& u, double t) { return std::exp(-u.beta * t); }

/// Base inverse marginal I0 = (u')^{-1}, so that I(t,y) = I0(y e^{beta t}).
inline double base_inverse_marginal(const UtilitySpec& u, double y) {
    switch (u.family) {
        case UtilitySpec::Family::Log:
            return 1.0 / y;
        case UtilitySpec::Family::Power:
            return std::pow(y / std::abs(u.p), 1.0 / (u.p - 1.0));
        case UtilitySpec::Family::Tabulated:
            return std::exp(u.log_interp(std::log(y)));
    }
    return 0.0;
}

/// Base marginal u'(x); for the tabulated family this inverts I0 by
/// bisection on the log-log interpolant.
inline double base_marginal(const UtilitySpec& u, double x) {
    switch (u.family) {
        case UtilitySpec::Family::Log:
            return 1.0 / x;
        case UtilitySpec::Family::Power:
            return std::abs(u.p) * std::pow(x, u.p - 1.0);
        case UtilitySpec::Family::Tabulated: {
            const double target = std::log(x);
            // log I0 is strictly decreasing in log y; widen the bracket until
            // it straddles the target, then bisect
            double lo = u.log_interp.front_x() - 40.0;
            double hi = u.log_interp.back_x() + 40.0;
            for (int n = 0; u.log_interp(lo) < target && n < 40; ++n) lo -= 80.0;
            for (int n = 0; u.log_interp(hi) > target && n < 40; ++n) hi += 80.0;
            for (int it = 0; it < 200; ++it) {
                const double mid = 0.5 * (lo + hi);
                if (u.log_interp(mid) > target)
                    lo = mid;
                else
                    hi = mid;
                if (hi - lo < 1e-15 * std::max(1.0, std::abs(lo))) break;
            }
            return std::exp(0.5 * (lo + hi));
        }
    }
    return 0.0;
}

/// Base utility u(x), normalized so that u(1) = 0 for the tabulated family.
inline double base_value(const UtilitySpec& u, double x) {
    switch (u.family) {
        case UtilitySpec::Family::Log:
            return std::log(x);
        case UtilitySpec::Family::Power:
            return (u.p > 0.0 ? 1.0 : -1.0) * std::pow(x, u.p);
        case UtilitySpec::Family::Tabulated:
            return adaptive_simpson([&](double s) { return base_marginal(u, s); },
                                    1.0, x, 1e-12);
    }
    return 0.0;
}

}  // namespace detail

inline double u_value(const UtilitySpec& u, double t, double x) {
    return detail::discount(u, t) * detail::base_value(u, x);
}

inline double u_marginal(const UtilitySpec& u, double t, double x) {
    return detail::discount(u, t) * detail::base_marginal(u, x);
}

/// I(t,y) = U_x(t,.)^{-1}(y); strictly decreasing in y.
inline double eval_inverse_marginal(const UtilitySpec& u, double t, double y) {
    if (!(y > 0.0))
        throw std::invalid_argument("inverse marginal utility needs y > 0");
    return detail::base_inverse_marginal(u, y / detail::discount(u, t));
}

/// True when U(t, 0+) = -inf, which poisons the utility functional.
inline bool unbounded_below_at_zero(const UtilitySpec& u) {
    switch (u.family) {
        case UtilitySpec::Family::Log:
            return true;
        case UtilitySpec::Family::Power:
            return u.p < 0.0;
        case UtilitySpec::Family::Tabulated:
            return true;
    }
    return true;
}

/// V(t,lambda; xi) = sup_{x in [0,xi)} (U(t,x) - x lambda); the capped branch
/// is taken at ties, where both branches coincide.
inline double dual_value(const UtilitySpec& u, double t, double lam, double cap) {
    if (!(lam > 0.0)) throw std::invalid_argument("dual value needs lambda > 0");
    if (std::isfinite(cap) && lam <= u_marginal(u, t, cap))
        return u_value(u, t, cap) - lam * cap;
    const double x = eval_inverse_marginal(u, t, lam);
    return u_value(u, t, x) - lam * x;
}

// ---------------------------------------------------------------------------
// The utility functional
// ---------------------------------------------------------------------------

/// E integral of U(t, c_t) dkappa. Returns -inf when consumption hits zero
/// while the family is unbounded below there; that sentinel is only ever
/// compared against, never used in arithmetic.
inline double utility_functional(const EventTree& tree, const UtilitySpec& u,
                                 const TreeProcess& c) {
    check_sized(tree, c, "utility_functional");
    for (const auto& n : tree.nodes)
        if (c.values[n.id] < 0.0)
            throw std::invalid_argument("utility_functional: negative consumption at node " +
                                        std::to_string(n.id));
    if (unbounded_below_at_zero(u))
        for (const auto& n : tree.nodes)
            if (c.values[n.id] == 0.0) return -kInf;
    double total = 0.0;
    for (const auto& n : tree.nodes)
        total += n.p_path * tree.grid.kappa[n.level] *
                 u_value(u, tree.grid.times[n.level], c.values[n.id]);
    return total;
}

// ---------------------------------------------------------------------------
// Total convexity norm
// ---------------------------------------------------------------------------

inline double total_variation(const std::vector<double>& v) {
    double tv = 0.0;
    for (std::size_t k = 0; k + 1 < v.size(); ++k) tv += std::abs(v[k + 1] - v[k]);
    return tv;
}

/// |f(x1)| + |f'(x1)| + TV(f'); exact for piecewise-monotone derivatives
/// sampled at their turning points.
inline double convexity_norm(const std::vector<double>& x, const std::vector<double>& f,
                             const std::vector<double>& df) {
    if (x.size() < 2 || f.size() != x.size() || df.size() != x.size())
        throw std::invalid_argument("convexity_norm: need >= 2 matching samples");
    for (std::size_t k = 0; k + 1 < x.size(); ++k)
        if (!(x[k] < x[k + 1]))
            throw std::invalid_argument("convexity_norm: grid must be sorted");
    return std::abs(f.front()) + std::abs(df.front()) + total_variation(df);
}

/// Central differences (one-sided at the ends) for callers without an
/// analytic derivative.
inline std::vector<double> central_differences(const std::vector<double>& x,
                                               const std::vector<double>& f) {
    const std::size_t n = x.size();
    if (n < 2 || f.size() != n)
        throw std::invalid_argument("central_differences: need >= 2 matching samples");
    std::vector<double> df(n);
    df[0] = (f[1] - f[0]) / (x[1] - x[0]);
    df[n - 1] = (f[n - 1] - f[n - 2]) / (x[n - 1] - x[n - 2]);
    for (std::size_t k = 1; k + 1 < n; ++k)
        df[k] = (f[k + 1] - f[k - 1]) / (x[k + 1] - x[k - 1]);
    return df;
}

// ---------------------------------------------------------------------------
// Agents
// ---------------------------------------------------------------------------

struct AgentSpec {
    UtilitySpec utility;
    TreeProcess endowment;  // adapted, in [epsilon, 1/epsilon]
    TreeProcess cap;        // adapted, (0, +inf]; +inf on the final level
    double epsilon = 0.0;   // 0: derive the largest valid bound from the endowment
};

inline void validate_agent(const EventTree& tree, AgentSpec& a) {
    validate_utility(a.utility);
    check_finite(tree, a.endowment, "endowment");
    check_sized(tree, a.cap, "cap");
    double lo = kInf, hi = 0.0;
    for (double v : a.endowment.values) {
        lo = std::min(lo, v);
        hi = std::max(hi, v);
    }
    // the tiny shrink keeps 1/epsilon >= hi after the fp round trip
    if (a.epsilon == 0.0) a.epsilon = std::min(lo, 1.0 / hi) * (1.0 - 1e-12);
    if (!(a.epsilon > 0.0))
        throw std::invalid_argument("agent: endowment bound epsilon must be positive");
    for (const auto& n : tree.nodes) {
        const double e = a.endowment.values[n.id];
        if (e < a.epsilon || e > 1.0 / a.epsilon)
            throw std::invalid_argument("agent: endowment at node " + std::to_string(n.id) +
                                        " violates the [eps, 1/eps] bounds");
        const double g = a.cap.values[n.id];
        if (!(g > e))
            throw std::invalid_argument("agent: cap must exceed the endowment at node " +
                                        std::to_string(n.id));
        if (n.level == tree.max_level() && std::isfinite(g))
            throw std::invalid_argument("agent: cap must be infinite at the final level (node " +
                                        std::to_string(n.id) + ")");
    }
}

// ---------------------------------------------------------------------------
// Regularity report
// ---------------------------------------------------------------------------

struct RegularityProbe {
    double y_hi = 1e6;      // Inada probe points and pass thresholds
    double y_lo = 1e-6;
    double i_at_y_hi_max = 1e-3;
    double i_at_y_lo_min = 1e3;
    double y1 = 0.1, y2 = 10.0;  // window for the convexity-Lipschitz estimate
    int ny = 41;
    std::vector<double> cap_probes = {2.0, 10.0};
};

struct RegularityItem {
    std::string check;
    double measured = 0.0;
    double threshold = 0.0;
    bool pass = false;
    std::string note;
};

struct RegularityReport {
    std::vector<std::vector<RegularityItem>> per_agent;

    bool all_pass() const {
        for (const auto& items : per_agent)
            for (const auto& it : items)
                if (!it.pass && it.note != "informational") return false;
        return true;
    }
};

/// Numerical verification of the standing assumptions on endowments, caps
/// and utilities. A report, not a gate; callers decide what to do with it.
inline RegularityReport regularity_report(const EventTree& tree,
                                          const std::vector<AgentSpec>& agents,
                                          const RegularityProbe& probe = {}) {
    RegularityReport rep;
    for (const auto& a : agents) {
        std::vector<RegularityItem> items;
        double e_lo = kInf, e_hi = 0.0;
        for (double v : a.endowment.values) {
            e_lo = std::min(e_lo, v);
            e_hi = std::max(e_hi, v);
        }
        items.push_back({"endowment lower bound", e_lo, a.epsilon, e_lo >= a.epsilon, ""});
        items.push_back({"endowment upper bound", e_hi, 1.0 / a.epsilon,
                         e_hi <= 1.0 / a.epsilon, ""});

        const double ne = n_functional(tree, a.endowment);
        items.push_back({"N(endowment)", ne, 0.0, std::isfinite(ne), "informational"});

        {
            double worst = kInf;
            int worst_node = -1;
            for (const auto& n : tree.nodes) {
                const double slack = a.cap.values[n.id] - a.endowment.values[n.id];
                if (slack < worst) {
                    worst = slack;
                    worst_node = n.id;
                }
            }
            items.push_back({"cap dominates endowment", worst, 0.0, worst > 0.0,
                             worst > 0.0 ? "" : "violated at node " + std::to_string(worst_node)});
        }
        {
            bool horizon_free = true;
            for (int id : tree.leaves()) horizon_free &= !std::isfinite(a.cap.values[id]);
            items.push_back({"cap unconstrained at horizon", horizon_free ? 1.0 : 0.0, 1.0,
                             horizon_free, ""});
        }
        for (double cprobe : probe.cap_probes) {
            TreeProcess capped{Flavor::Adapted, std::vector<double>(tree.size(), 0.0)};
            for (std::size_t i = 0; i < tree.size(); ++i)
                capped.values[i] = std::min(a.cap.values[i], cprobe);
            const double nv = n_functional(tree, capped);
            items.push_back({"N(min(cap, " + format_double(cprobe) + "))", nv, 0.0,
                             std::isfinite(nv), "informational"});
        }
        {
            double worst_hi = 0.0, worst_lo = kInf;
            for (double t : tree.grid.times) {
                worst_hi = std::max(worst_hi, eval_inverse_marginal(a.utility, t, probe.y_hi));
                worst_lo = std::min(worst_lo, eval_inverse_marginal(a.utility, t, probe.y_lo));
            }
            items.push_back({"Inada at large y", worst_hi, probe.i_at_y_hi_max,
                             worst_hi < probe.i_at_y_hi_max, ""});
            items.push_back({"Inada at small y", worst_lo, probe.i_at_y_lo_min,
                             worst_lo > probe.i_at_y_lo_min, ""});
        }
        {
            // convexity-Lipschitz constant of I estimated over grid time pairs
            std::vector<double> ys(probe.ny);
            for (int k = 0; k < probe.ny; ++k)
                ys[k] = probe.y1 * std::pow(probe.y2 / probe.y1,
                                            static_cast<double>(k) / (probe.ny - 1));
            double worst = 0.0;
            const auto& times = tree.grid.times;
            for (std::size_t i = 0; i < times.size(); ++i)
                for (std::size_t j = i + 1; j < times.size(); ++j) {
                    std::vector<double> diff(ys.size());
                    for (std::size_t k = 0; k < ys.size(); ++k)
                        diff[k] = eval_inverse_marginal(a.utility, times[i], ys[k]) -
                                  eval_inverse_marginal(a.utility, times[j], ys[k]);
                    const double nrm = convexity_norm(ys, diff, central_differences(ys, diff));
                    worst = std::max(worst, nrm / (times[j] - times[i]));
                }
            items.push_back({"convexity-Lipschitz constant of I", worst, 0.0,
                             std::isfinite(worst), "informational"});
        }
        if (a.utility.family == UtilitySpec::Family::Tabulated)
            items.push_back({"time-boundedness of U", 0.0, 0.0, true,
                             "informational; not verified for tabulated inputs"});
        rep.per_agent.push_back(std::move(items));
    }
    return rep;
}

}  // namespace equilibrage
