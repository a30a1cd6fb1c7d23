#pragma once

#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <limits>
#include <numeric>
#include <string>
#include <vector>

#include "qlower/errors.hpp"

namespace qlower {

// ---------------------------------------------------------------------------
// checked 64-bit arithmetic
//
// Deployable integer arithmetic must never wrap around: a wraparound would
// silently corrupt an inference result, so every multiply/add on the integer
// path goes through these helpers and overflow is a hard error.
// ---------------------------------------------------------------------------

inline std::int64_t checked_add(std::int64_t a, std::int64_t b) {
    std::int64_t r;
    if (__builtin_add_overflow(a, b, &r))
        throw OverflowError("integer addition overflowed: " + std::to_string(a) + " + " + std::to_string(b));
    return r;
}

inline std::int64_t checked_sub(std::int64_t a, std::int64_t b) {
    std::int64_t r;
    if (__builtin_sub_overflow(a, b, &r))
        throw OverflowError("integer subtraction overflowed: " + std::to_string(a) + " - " + std::to_string(b));
    return r;
}

inline std::int64_t checked_mul(std::int64_t a, std::int64_t b) {
    std::int64_t r;
    if (__builtin_mul_overflow(a, b, &r))
        throw OverflowError("integer multiplication overflowed: " + std::to_string(a) + " * " + std::to_string(b));
    return r;
}

// ---------------------------------------------------------------------------
// Tensor
// ---------------------------------------------------------------------------

enum class ValueKind : std::uint8_t { Real = 0, Integer = 1 };

inline const char* to_string(ValueKind k) { return k == ValueKind::Real ? "real" : "integer"; }

/// Dense row-major tensor holding either real (double) or integer (int64)
/// values. Exactly one payload is populated; accessing the other kind throws
/// KindMismatch. Treat tensors as immutable values once built: passes that
/// change data construct a new tensor.
class Tensor {
public:
    Tensor() = default;

    static Tensor real(std::vector<std::int64_t> shape, std::vector<double> values) {
        Tensor t;
        t.kind_ = ValueKind::Real;
        t.shape_ = std::move(shape);
        t.re_ = std::move(values);
        t.check_sizes(t.re_.size());
        return t;
    }

    static Tensor real(std::vector<std::int64_t> shape) {
        std::int64_t n = numel(shape);
        return real(std::move(shape), std::vector<double>(static_cast<std::size_t>(n), 0.0));
    }

    static Tensor integer(std::vector<std::int64_t> shape, std::vector<std::int64_t> values) {
        Tensor t;
        t.kind_ = ValueKind::Integer;
        t.shape_ = std::move(shape);
        t.iv_ = std::move(values);
        t.check_sizes(t.iv_.size());
        return t;
    }

    static Tensor integer(std::vector<std::int64_t> shape) {
        std::int64_t n = numel(shape);
        return integer(std::move(shape), std::vector<std::int64_t>(static_cast<std::size_t>(n), 0));
    }

    static Tensor zeros(ValueKind kind, std::vector<std::int64_t> shape) {
        std::int64_t n = numel(shape);
        if (kind == ValueKind::Real) return real(std::move(shape), std::vector<double>(static_cast<std::size_t>(n), 0.0));
        return integer(std::move(shape), std::vector<std::int64_t>(static_cast<std::size_t>(n), 0));
    }

    static std::int64_t numel(const std::vector<std::int64_t>& shape) {
        std::int64_t n = 1;
        for (std::int64_t e : shape) {
            if (e <= 0) throw ShapeMismatchError("tensor extents must be positive");
            n = checked_mul(n, e);
        }
        return n;
    }

    ValueKind kind() const { return kind_; }
    const std::vector<std::int64_t>& shape() const { return shape_; }
    std::int64_t size() const { return kind_ == ValueKind::Real ? static_cast<std::int64_t>(re_.size())
                                                                : static_cast<std::int64_t>(iv_.size()); }

    const std::vector<double>& reals() const {
        if (kind_ != ValueKind::Real) throw KindMismatchError("expected a real tensor");
        return re_;
    }
    std::vector<double>& reals() {
        if (kind_ != ValueKind::Real) throw KindMismatchError("expected a real tensor");
        return re_;
    }
    const std::vector<std::int64_t>& ints() const {
        if (kind_ != ValueKind::Integer) throw KindMismatchError("expected an integer tensor");
        return iv_;
    }
    std::vector<std::int64_t>& ints() {
        if (kind_ != ValueKind::Integer) throw KindMismatchError("expected an integer tensor");
        return iv_;
    }

    bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

private:
    void check_sizes(std::size_t have) const {
        if (static_cast<std::int64_t>(have) != numel(shape_))
            throw ShapeMismatchError("value count does not match tensor extents");
    }

    ValueKind kind_ = ValueKind::Real;
    std::vector<std::int64_t> shape_;
    std::vector<double> re_;
    std::vector<std::int64_t> iv_;
};

/// Bit-level equality (distinguishes -0.0 from 0.0; NaNs compare by payload).
/// Used by round-trip and determinism tests.
inline bool bitwise_equal(const Tensor& a, const Tensor& b) {
    if (a.kind() != b.kind() || a.shape() != b.shape()) return false;
    if (a.kind() == ValueKind::Real)
        return std::memcmp(a.reals().data(), b.reals().data(), a.reals().size() * sizeof(double)) == 0;
    return std::memcmp(a.ints().data(), b.ints().data(), a.ints().size() * sizeof(std::int64_t)) == 0;
}

// ---------------------------------------------------------------------------
// Quantized spaces
// ---------------------------------------------------------------------------

/// Description of a quantized space: the lattice { alpha + eps * q } together
/// with the usable integer range [lo, hi]. The upper bound is inclusive, so a
/// Q-bit space spans at most 2^Q integers and the real value alpha + eps * hi
/// is representable.
struct QuantSpec {
    double eps = 1.0;        // quantum, > 0
    double alpha = 0.0;      // offset
    int bits = 8;            // nominal bit width Q
    std::int64_t lo = 0;     // smallest admissible integer
    std::int64_t hi = 255;   // largest admissible integer (inclusive)

    void validate() const {
        if (!(eps > 0.0) || !std::isfinite(eps)) throw OutOfRangeError("quantum must be positive and finite");
        if (!std::isfinite(alpha)) throw OutOfRangeError("offset must be finite");
        if (bits < 1 || bits > 62) throw OutOfRangeError("bit width must be in [1, 62]");
        if (lo > hi) throw OutOfRangeError("integer range is empty");
        unsigned __int128 span = static_cast<unsigned __int128>(static_cast<__int128>(hi) - static_cast<__int128>(lo));
        if (span >= (static_cast<unsigned __int128>(1) << bits))
            throw OutOfRangeError("integer range exceeds the declared bit width");
    }

    std::int64_t max_abs_int() const { return std::max(std::llabs(lo), std::llabs(hi)); }

    /// Unsigned activation space: lattice multiples of eps covering [0, eps*(2^Q-1)].
    static QuantSpec activation(double eps, int bits) {
        return QuantSpec{eps, 0.0, bits, 0, (std::int64_t(1) << bits) - 1};
    }

    /// Signed symmetric space with eps = 2*bound/(2^Q-1); images of values in
    /// [-bound, bound] land in [-2^(Q-1), 2^(Q-1)-1] under floor quantization.
    static QuantSpec symmetric(double bound, int bits) {
        double eps = 2.0 * bound / static_cast<double>((std::int64_t(1) << bits) - 1);
        return QuantSpec{eps, 0.0, bits, -(std::int64_t(1) << (bits - 1)), (std::int64_t(1) << (bits - 1)) - 1};
    }

    bool operator==(const QuantSpec& o) const = default;
};

/// t = alpha + eps * q. Every q must lie in [lo, hi].
inline Tensor dequantize(const Tensor& q, const QuantSpec& spec) {
    spec.validate();
    const auto& iv = q.ints();
    std::vector<double> out(iv.size());
    for (std::size_t i = 0; i < iv.size(); ++i) {
        if (iv[i] < spec.lo || iv[i] > spec.hi)
            throw OutOfRangeError("quantized value " + std::to_string(iv[i]) + " outside [" +
                                  std::to_string(spec.lo) + ", " + std::to_string(spec.hi) + "]");
        out[i] = spec.alpha + spec.eps * static_cast<double>(iv[i]);
    }
    return Tensor::real(q.shape(), std::move(out));
}

inline std::int64_t quantize_linear_scalar(double t, const QuantSpec& spec) {
    double x = (t - spec.alpha) / spec.eps;
    // Lattice points do not always divide back to an exact integer: dequantize
    // rounds alpha + eps*q once per operation, and the subtraction and division
    // here round again, so x can land a few ulp below q. Snap when x is within
    // that error cone of an integer, otherwise keep floor semantics. The cone
    // is orders of magnitude narrower than the spacing of doubles around any
    // representable boundary, so monotonicity is unaffected.
    double n = std::nearbyint(x);
    if (std::abs(x - n) <= 0x1p-50 * (std::abs(x) + std::abs(spec.alpha) / spec.eps + 1.0)) x = n;
    else x = std::floor(x);
    if (!(x > static_cast<double>(spec.lo))) return spec.lo;   // also catches NaN
    if (x >= static_cast<double>(spec.hi)) return spec.hi;
    return static_cast<std::int64_t>(x);
}

/// Canonical linear quantization: q = clip(floor((t - alpha)/eps), lo, hi).
/// Pointwise, monotonically non-decreasing, piecewise constant.
inline Tensor quantize_linear(const Tensor& t, const QuantSpec& spec) {
    spec.validate();
    const auto& rv = t.reals();
    std::vector<std::int64_t> out(rv.size());
    for (std::size_t i = 0; i < rv.size(); ++i) out[i] = quantize_linear_scalar(rv[i], spec);
    return Tensor::integer(t.shape(), std::move(out));
}

// ---------------------------------------------------------------------------
// Tensor blobs
//
// Layout: 8-byte magic "QLTENSR\0", u8 kind (0 = real, 1 = integer), u8 rank,
// rank little-endian u64 extents, then the raw 64-bit values row-major
// (IEEE-754 doubles or two's-complement int64, little endian).
// ---------------------------------------------------------------------------

namespace detail {
inline constexpr char kBlobMagic[8] = {'Q', 'L', 'T', 'E', 'N', 'S', 'R', '\0'};
static_assert(std::endian::native == std::endian::little, "blob i/o assumes a little-endian host");
} // namespace detail

inline void write_tensor_blob(const std::filesystem::path& path, const Tensor& t) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw MissingBlobError("cannot open blob for writing: " + path.string());
    os.write(detail::kBlobMagic, 8);
    std::uint8_t kind = static_cast<std::uint8_t>(t.kind());
    std::uint8_t rank = static_cast<std::uint8_t>(t.shape().size());
    os.write(reinterpret_cast<const char*>(&kind), 1);
    os.write(reinterpret_cast<const char*>(&rank), 1);
    for (std::int64_t e : t.shape()) {
        std::uint64_t u = static_cast<std::uint64_t>(e);
        os.write(reinterpret_cast<const char*>(&u), 8);
    }
    if (t.kind() == ValueKind::Real)
        os.write(reinterpret_cast<const char*>(t.reals().data()),
                 static_cast<std::streamsize>(t.reals().size() * sizeof(double)));
    else
        os.write(reinterpret_cast<const char*>(t.ints().data()),
                 static_cast<std::streamsize>(t.ints().size() * sizeof(std::int64_t)));
    if (!os) throw MissingBlobError("failed writing blob: " + path.string());
}

inline Tensor read_tensor_blob(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw MissingBlobError("cannot open blob: " + path.string());
    char magic[8];
    is.read(magic, 8);
    if (!is || std::memcmp(magic, detail::kBlobMagic, 8) != 0)
        throw ParseError("bad blob magic in " + path.string());
    std::uint8_t kind_u8 = 0, rank = 0;
    is.read(reinterpret_cast<char*>(&kind_u8), 1);
    is.read(reinterpret_cast<char*>(&rank), 1);
    if (!is || kind_u8 > 1) throw ParseError("bad blob header in " + path.string());
    std::vector<std::int64_t> shape(rank);
    for (int i = 0; i < rank; ++i) {
        std::uint64_t u = 0;
        is.read(reinterpret_cast<char*>(&u), 8);
        shape[i] = static_cast<std::int64_t>(u);
    }
    if (!is) throw ParseError("truncated blob header in " + path.string());
    std::int64_t n = Tensor::numel(shape);
    if (kind_u8 == 0) {
        std::vector<double> v(static_cast<std::size_t>(n));
        is.read(reinterpret_cast<char*>(v.data()), static_cast<std::streamsize>(v.size() * sizeof(double)));
        if (!is) throw ParseError("truncated blob payload in " + path.string());
        return Tensor::real(std::move(shape), std::move(v));
    }
    std::vector<std::int64_t> v(static_cast<std::size_t>(n));
    is.read(reinterpret_cast<char*>(v.data()), static_cast<std::streamsize>(v.size() * sizeof(std::int64_t)));
    if (!is) throw ParseError("truncated blob payload in " + path.string());
    return Tensor::integer(std::move(shape), std::move(v));
}

} // namespace qlower
