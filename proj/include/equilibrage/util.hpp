#pragma once

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <functional>
#include <limits>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace equilibrage {

inline constexpr double kInf = std::numeric_limits<double>::infinity();

/// Deterministic RNG. mt19937_64 output is fixed by the standard; the
/// uniform mapping below avoids std::uniform_real_distribution, whose
/// stream is implementation-defined.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : gen_(seed) {}

    /// Uniform in [0, 1).
    double uniform() {
        return static_cast<double>(gen_() >> 11) * 0x1.0p-53;
    }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    /// Uniform integer in [0, n).
    std::uint64_t uniform_int(std::uint64_t n) {
        // modulo bias is irrelevant for scenario generation; keep it simple
        return gen_() % n;
    }

private:
    std::mt19937_64 gen_;
};

/// Stable seed mixing for derived generator streams.
inline std::uint64_t mix_seed(std::uint64_t master, std::uint64_t salt) {
    std::uint64_t x = master ^ (salt * 0x9e3779b97f4a7c15ULL);
    x ^= x >> 30;
    x *= 0xbf58476d1ce4e5b9ULL;
    x ^= x >> 27;
    x *= 0x94d049bb133111ebULL;
    x ^= x >> 31;
    return x;
}

/// FNV-1a 64-bit content hash, used for output manifests.
inline std::uint64_t fnv1a64(const std::string& data) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : data) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

struct BisectionFailure : std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// Root of a strictly decreasing continuous function on (0, inf).
/// Expands a bracket geometrically from `guess`, then bisects until
/// |f(x)| <= f_tol or the bracket width falls below machine resolution.
inline double bisect_decreasing(const std::function<double(double)>& f,
                                double guess, double f_tol,
                                int max_doublings = 200) {
    double lo = guess, hi = guess;
    double flo = f(lo);
    int n = 0;
    while (flo <= 0.0) {
        lo *= 0.5;
        flo = f(lo);
        if (++n > max_doublings)
            throw BisectionFailure("bracket expansion failed (lower): f(" +
                                   std::to_string(lo) + ") = " + std::to_string(flo));
    }
    double fhi = f(hi);
    n = 0;
    while (fhi >= 0.0) {
        hi *= 2.0;
        fhi = f(hi);
        if (++n > max_doublings)
            throw BisectionFailure("bracket expansion failed (upper): f(" +
                                   std::to_string(hi) + ") = " + std::to_string(fhi));
    }
    double mid = 0.5 * (lo + hi);
    for (int it = 0; it < 200; ++it) {
        mid = 0.5 * (lo + hi);
        const double fm = f(mid);
        if (std::abs(fm) <= f_tol) return mid;
        if (fm > 0.0)
            lo = mid;
        else
            hi = mid;
        if (hi - lo <= 1e-15 * std::min(std::abs(lo), std::abs(hi))) break;
    }
    return 0.5 * (lo + hi);
}

/// Solves A x = b by Gaussian elimination with partial pivoting.
/// Returns false (leaving x untouched) when a pivot falls below
/// rank_tol * max|A|, i.e. the system is rank deficient.
inline bool solve_dense(std::vector<std::vector<double>> a, std::vector<double> b,
                        std::vector<double>& x, double rank_tol = 1e-12) {
    const std::size_t n = a.size();
    double scale = 0.0;
    for (const auto& row : a)
        for (double v : row) scale = std::max(scale, std::abs(v));
    if (scale == 0.0) return false;

    for (std::size_t col = 0; col < n; ++col) {
        std::size_t piv = col;
        for (std::size_t r = col + 1; r < n; ++r)
            if (std::abs(a[r][col]) > std::abs(a[piv][col])) piv = r;
        if (std::abs(a[piv][col]) < rank_tol * scale) return false;
        std::swap(a[piv], a[col]);
        std::swap(b[piv], b[col]);
        for (std::size_t r = col + 1; r < n; ++r) {
            const double m = a[r][col] / a[col][col];
            for (std::size_t c = col; c < n; ++c) a[r][c] -= m * a[col][c];
            b[r] -= m * b[col];
        }
    }
    x.assign(n, 0.0);
    for (std::size_t i = n; i-- > 0;) {
        double s = b[i];
        for (std::size_t c = i + 1; c < n; ++c) s -= a[i][c] * x[c];
        x[i] = s / a[i][i];
    }
    return true;
}

/// Adaptive Simpson quadrature (recursive bisection on the error estimate).
inline double adaptive_simpson(const std::function<double(double)>& f, double a,
                               double b, double tol, int depth = 40) {
    struct Impl {
        static double rec(const std::function<double(double)>& f, double a, double b,
                          double fa, double fm, double fb, double whole, double tol,
                          int depth) {
            const double m = 0.5 * (a + b);
            const double lm = 0.5 * (a + m), rm = 0.5 * (m + b);
            const double flm = f(lm), frm = f(rm);
            const double left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
            const double right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
            if (depth <= 0 || std::abs(left + right - whole) <= 15.0 * tol)
                return left + right + (left + right - whole) / 15.0;
            return rec(f, a, m, fa, flm, fm, left, 0.5 * tol, depth - 1) +
                   rec(f, m, b, fm, frm, fb, right, 0.5 * tol, depth - 1);
        }
    };
    if (a == b) return 0.0;
    const double fa = f(a), fb = f(b), fm = f(0.5 * (a + b));
    const double whole = (b - a) / 6.0 * (fa + 4.0 * fm + fb);
    return Impl::rec(f, a, b, fa, fm, fb, whole, tol, depth);
}

/// 17-significant-digit decimal form; round-trips IEEE doubles exactly.
inline std::string format_double(double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

}  // namespace equilibrage
