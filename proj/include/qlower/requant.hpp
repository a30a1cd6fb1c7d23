#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <string>
#include <utility>

#include "qlower/errors.hpp"
#include "qlower/tensor.hpp"

namespace qlower {

/// Integer approximation of a quantum ratio: eps_a/eps_b ~= m / 2^d.
/// Applying it as (m * q) >> d moves a value from the eps_a space into the
/// eps_b space with relative error at most 1/requantization_factor when the
/// shift was chosen by choose_shift.
struct RequantParams {
    std::int64_t m = 1;
    int d = 0;
    double source_eps = 1.0; // eps_a
    double target_eps = 1.0; // eps_b
};

namespace detail {

/// Every finite positive double is mant * 2^exp2 with odd integer mant < 2^53.
struct Pow2Rational {
    std::int64_t mant;
    int exp2;
};

inline Pow2Rational decompose(double v) {
    if (!(v > 0.0) || !std::isfinite(v))
        throw OutOfRangeError("quantum must be positive and finite, got " + std::to_string(v));
    int e = 0;
    double f = std::frexp(v, &e); // v = f * 2^e, f in [0.5, 1)
    auto mant = static_cast<std::int64_t>(std::ldexp(f, 53));
    int exp2 = e - 53;
    while ((mant & 1) == 0) {
        mant >>= 1;
        ++exp2;
    }
    return {mant, exp2};
}

/// floor(A * 2^s / B) with exact remainder: A*2^s = q*B + rem, 0 <= rem < B.
/// A, B > 0, s >= 0. Throws OverflowError once q stops fitting in 63 bits.
inline std::pair<std::int64_t, std::int64_t> floor_shift_div(std::int64_t A, int s, std::int64_t B) {
    unsigned __int128 q = static_cast<unsigned __int128>(A) / static_cast<unsigned __int128>(B);
    auto r = static_cast<std::int64_t>(A % B);
    while (s > 0) {
        int k = std::min(s, 40);
        unsigned __int128 rs = static_cast<unsigned __int128>(r) << k;
        q = (q << k) + rs / static_cast<unsigned __int128>(B);
        r = static_cast<std::int64_t>(rs % static_cast<unsigned __int128>(B));
        s -= k;
        if (q > (static_cast<unsigned __int128>(1) << 62))
            throw OverflowError("requantization multiplier exceeds 63 bits");
    }
    return {static_cast<std::int64_t>(q), r};
}

/// sign of a*2^ea - b*2^eb for positive a, b < 2^120.
inline int compare_scaled(unsigned __int128 a, int ea, unsigned __int128 b, int eb) {
    int s = ea - eb;
    const unsigned __int128 limit = static_cast<unsigned __int128>(1) << 120;
    while (s > 0) {
        if (a >= limit) return 1; // a*2^s >= 2^121 > b
        a <<= std::min(s, 7);
        s -= std::min(s, 7);
    }
    while (s < 0) {
        if (b >= limit) return -1;
        b <<= std::min(-s, 7);
        s += std::min(-s, 7);
    }
    return a < b ? -1 : (a == b ? 0 : 1);
}

/// 192-bit little-endian words, just enough for the exact error-bound audit.
struct U192 {
    std::uint64_t w[3] = {0, 0, 0};
};

inline U192 mul_128_64(unsigned __int128 a, std::uint64_t b) {
    std::uint64_t a0 = static_cast<std::uint64_t>(a);
    std::uint64_t a1 = static_cast<std::uint64_t>(a >> 64);
    unsigned __int128 p0 = static_cast<unsigned __int128>(a0) * b;
    unsigned __int128 p1 = static_cast<unsigned __int128>(a1) * b;
    U192 r;
    r.w[0] = static_cast<std::uint64_t>(p0);
    unsigned __int128 mid = (p0 >> 64) + static_cast<std::uint64_t>(p1);
    r.w[1] = static_cast<std::uint64_t>(mid);
    r.w[2] = static_cast<std::uint64_t>((p1 >> 64) + (mid >> 64));
    return r;
}

inline U192 add_u192(U192 a, unsigned __int128 b) {
    unsigned __int128 lo = static_cast<unsigned __int128>(a.w[0]) + static_cast<std::uint64_t>(b);
    a.w[0] = static_cast<std::uint64_t>(lo);
    unsigned __int128 mid = static_cast<unsigned __int128>(a.w[1]) + static_cast<std::uint64_t>(b >> 64) + (lo >> 64);
    a.w[1] = static_cast<std::uint64_t>(mid);
    a.w[2] += static_cast<std::uint64_t>(mid >> 64);
    return a;
}

inline int compare_u192(const U192& a, const U192& b) {
    for (int i = 2; i >= 0; --i) {
        if (a.w[i] != b.w[i]) return a.w[i] < b.w[i] ? -1 : 1;
    }
    return 0;
}

} // namespace detail

/// Exact decomposition eps_a * 2^d / eps_b = m + rem/den with 0 <= rem < den.
/// rem == 0 iff the requantization multiplier reproduces the ratio exactly.
struct RatioParts {
    std::int64_t m = 0;
    unsigned __int128 rem = 0;
    unsigned __int128 den = 1;
    bool exact() const { return rem == 0; }
};

inline RatioParts ratio_parts(double eps_a, int d, double eps_b) {
    auto a = detail::decompose(eps_a);
    auto b = detail::decompose(eps_b);
    int s = a.exp2 - b.exp2 + d;
    RatioParts out;
    if (s >= 0) {
        auto [q, r] = detail::floor_shift_div(a.mant, s, b.mant);
        out.m = q;
        out.rem = static_cast<unsigned __int128>(r);
        out.den = static_cast<unsigned __int128>(b.mant);
        return out;
    }
    if (-s > 70) throw OverflowUnsatisfiableError("requantization shift too small for exact decomposition");
    unsigned __int128 den = static_cast<unsigned __int128>(b.mant) << (-s);
    unsigned __int128 A = static_cast<unsigned __int128>(a.mant);
    out.m = static_cast<std::int64_t>(A / den);
    out.rem = A % den;
    out.den = den;
    return out;
}

/// True iff |eps_a/eps_b - m/2^d| / (eps_a/eps_b) <= 1/factor, decided in
/// exact integer arithmetic. The condition reduces to (factor-1)*rem <= m*den.
inline bool relative_error_within(double eps_a, int d, double eps_b, std::int64_t factor) {
    RatioParts p = ratio_parts(eps_a, d, eps_b);
    if (p.m >= factor) return true; // rem < den makes the inequality immediate
    detail::U192 lhs = detail::mul_128_64(p.rem, static_cast<std::uint64_t>(factor - 1));
    detail::U192 rhs = detail::mul_128_64(p.den, static_cast<std::uint64_t>(p.m));
    return detail::compare_u192(lhs, rhs) <= 0;
}

/// Smallest d >= 0 with 2^d >= eps_b * factor / eps_a, decided exactly.
/// Guarantees the floored multiplier m = floor(eps_a*2^d/eps_b) carries a
/// relative error of at most 1/factor. Throws OverflowUnsatisfiable when no
/// d <= 62 works.
inline int choose_shift(double eps_a, double eps_b, std::int64_t factor) {
    if (factor < 1) throw OutOfRangeError("requantization factor must be >= 1");
    auto a = detail::decompose(eps_a);
    auto b = detail::decompose(eps_b);
    unsigned __int128 bf = static_cast<unsigned __int128>(b.mant) * static_cast<unsigned __int128>(factor);
    auto satisfied = [&](int d) {
        return detail::compare_scaled(static_cast<unsigned __int128>(a.mant), a.exp2 + d, bf, b.exp2) >= 0;
    };
    double guess = std::log2(eps_b / eps_a) + std::log2(static_cast<double>(factor));
    int d = std::clamp(static_cast<int>(std::ceil(guess)) + 1, 0, 62);
    while (d > 0 && satisfied(d - 1)) --d;
    while (d <= 62 && !satisfied(d)) ++d;
    if (d > 62) throw OverflowUnsatisfiableError("no shift <= 62 reaches the requested error factor");
    return d;
}

/// choose_shift plus the multiplier, with an overflow audit: m times the
/// largest source magnitude must fit a signed 64-bit product. Raising d only
/// grows m, so failing the audit at the minimal d means no parameters exist.
inline RequantParams make_requant_params(double eps_a, double eps_b, std::int64_t factor,
                                         std::int64_t max_abs_source) {
    RequantParams p;
    p.d = choose_shift(eps_a, eps_b, factor);
    RatioParts parts = [&] {
        try {
            return ratio_parts(eps_a, p.d, eps_b);
        } catch (const OverflowError&) {
            throw OverflowUnsatisfiableError("requantization multiplier exceeds 63 bits at the minimal shift");
        }
    }();
    p.m = parts.m;
    p.source_eps = eps_a;
    p.target_eps = eps_b;
    std::int64_t mag = std::max<std::int64_t>(1, max_abs_source);
    unsigned __int128 prod = static_cast<unsigned __int128>(p.m) * static_cast<unsigned __int128>(mag);
    if (prod > static_cast<unsigned __int128>(std::numeric_limits<std::int64_t>::max()))
        throw OverflowUnsatisfiableError("requantized product would overflow 63 bits for source magnitude " +
                                         std::to_string(mag));
    return p;
}

/// (m * q) >> d. The arithmetic right shift is exactly floor division by 2^d,
/// for negative values included.
inline std::int64_t requantize_scalar(std::int64_t q, const RequantParams& p) {
    return checked_mul(p.m, q) >> p.d;
}

inline Tensor requantize(const Tensor& q, const RequantParams& p) {
    const auto& iv = q.ints();
    std::vector<std::int64_t> out(iv.size());
    for (std::size_t i = 0; i < iv.size(); ++i) out[i] = requantize_scalar(iv[i], p);
    return Tensor::integer(q.shape(), std::move(out));
}

} // namespace qlower
