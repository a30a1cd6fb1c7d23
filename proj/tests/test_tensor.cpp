#include <gtest/gtest.h>

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <limits>

#include "qlower/rng.hpp"
#include "qlower/tensor.hpp"

using namespace qlower;

TEST(CheckedArithmetic, ThrowsOnOverflow) {
    std::int64_t big = std::numeric_limits<std::int64_t>::max();
    EXPECT_THROW(checked_add(big, 1), OverflowError);
    EXPECT_THROW(checked_mul(big, 2), OverflowError);
    EXPECT_THROW(checked_sub(std::numeric_limits<std::int64_t>::min(), 1), OverflowError);
    EXPECT_EQ(checked_add(2, 3), 5);
    EXPECT_EQ(checked_mul(-4, 5), -20);
}

TEST(Tensor, FactoriesAndAccessors) {
    Tensor r = Tensor::real({2, 3});
    EXPECT_EQ(r.size(), 6);
    EXPECT_EQ(r.kind(), ValueKind::Real);
    EXPECT_THROW(r.ints(), KindMismatchError);

    Tensor i = Tensor::integer({4}, {1, 2, 3, 4});
    EXPECT_EQ(i.ints()[2], 3);
    EXPECT_THROW(i.reals(), KindMismatchError);

    EXPECT_THROW(Tensor::real({0, 3}), ShapeMismatchError);
    EXPECT_THROW(Tensor::real({2}, {1.0}), ShapeMismatchError);
}

TEST(QuantSpec, Validation) {
    QuantSpec ok{0.1, 0.0, 8, 0, 255};
    EXPECT_NO_THROW(ok.validate());
    EXPECT_THROW((QuantSpec{0.0, 0.0, 8, 0, 255}).validate(), OutOfRangeError);
    EXPECT_THROW((QuantSpec{-0.1, 0.0, 8, 0, 255}).validate(), OutOfRangeError);
    EXPECT_THROW((QuantSpec{0.1, 0.0, 0, 0, 1}).validate(), OutOfRangeError);
    EXPECT_THROW((QuantSpec{0.1, 0.0, 8, 0, 256}).validate(), OutOfRangeError);
    EXPECT_THROW((QuantSpec{0.1, 0.0, 8, 10, 9}).validate(), OutOfRangeError);
}

TEST(QuantSpec, ActivationWindowIsInclusiveAtTheTop) {
    // beta = eps * (2^Q - 1) must land on the largest level, not fall out.
    QuantSpec s = QuantSpec::activation(0.25, 4);
    EXPECT_EQ(s.lo, 0);
    EXPECT_EQ(s.hi, 15);
    EXPECT_EQ(quantize_linear_scalar(0.25 * 15, s), 15);
    EXPECT_EQ(quantize_linear_scalar(0.25 * 15 + 1.0, s), 15);
    EXPECT_EQ(quantize_linear_scalar(-0.5, s), 0);
}

TEST(QuantSpec, SymmetricWindow) {
    QuantSpec s = QuantSpec::symmetric(2.0, 8);
    EXPECT_DOUBLE_EQ(s.eps, 4.0 / 255.0);
    EXPECT_EQ(s.lo, -128);
    EXPECT_EQ(s.hi, 127);
    EXPECT_EQ(quantize_linear_scalar(2.0, s), 127);
    EXPECT_EQ(quantize_linear_scalar(-2.0, s), -128);
}

TEST(QuantizeLinear, HandlesNonFinite) {
    QuantSpec s = QuantSpec::activation(0.1, 4);
    EXPECT_EQ(quantize_linear_scalar(std::nan(""), s), s.lo);
    EXPECT_EQ(quantize_linear_scalar(std::numeric_limits<double>::infinity(), s), s.hi);
    EXPECT_EQ(quantize_linear_scalar(-std::numeric_limits<double>::infinity(), s), s.lo);
}

TEST(QuantizeLinear, RoundTripStaysWithinOneStep) {
    Rng rng(11);
    QuantSpec s{0.013, -0.4, 10, 0, 1023};
    for (int i = 0; i < 10000; ++i) {
        double t = rng.uniform(s.alpha, s.alpha + s.eps * static_cast<double>(s.hi));
        std::int64_t q = quantize_linear_scalar(t, s);
        ASSERT_GE(q, s.lo);
        ASSERT_LE(q, s.hi);
        double back = s.alpha + s.eps * static_cast<double>(q);
        ASSERT_LE(back, t + 1e-12);
        ASSERT_GT(back, t - s.eps * (1.0 + 1e-9));
    }
}

TEST(QuantizeLinear, RecoversEveryLatticePointExactly) {
    Rng rng(13);
    for (int trial = 0; trial < 400; ++trial) {
        double eps = std::exp(rng.uniform(std::log(1e-6), std::log(8.0)));
        double alpha = (trial % 3 == 0) ? 0.0 : rng.uniform(-1000.0, 1000.0);
        QuantSpec s{eps, alpha, 12, -2048, 2047};
        for (int k = 0; k < 64; ++k) {
            std::int64_t q = rng.range(s.lo, s.hi);
            Tensor img = dequantize(Tensor::integer({1}, {q}), s);
            ASSERT_EQ(quantize_linear(img, s).ints()[0], q)
                << "eps=" << eps << " alpha=" << alpha << " q=" << q;
        }
    }
    QuantSpec s = QuantSpec::symmetric(0.7, 8);
    for (std::int64_t q = s.lo; q <= s.hi; ++q) {
        Tensor img = dequantize(Tensor::integer({1}, {q}), s);
        EXPECT_EQ(quantize_linear(img, s).ints()[0], q);
    }
}

TEST(QuantizeLinear, Monotone) {
    Rng rng(12);
    QuantSpec s = QuantSpec::symmetric(1.0, 6);
    double prev_t = -2.0;
    std::int64_t prev_q = quantize_linear_scalar(prev_t, s);
    for (int i = 0; i < 2000; ++i) {
        double t = prev_t + rng.uniform(0.0, 0.01);
        std::int64_t q = quantize_linear_scalar(t, s);
        ASSERT_GE(q, prev_q);
        prev_t = t;
        prev_q = q;
    }
}

TEST(Dequantize, RangeChecked) {
    QuantSpec s = QuantSpec::activation(0.5, 2);
    Tensor q = Tensor::integer({2}, {0, 3});
    Tensor t = dequantize(q, s);
    EXPECT_DOUBLE_EQ(t.reals()[1], 1.5);
    Tensor bad = Tensor::integer({1}, {4});
    EXPECT_THROW(dequantize(bad, s), OutOfRangeError);
}

TEST(BlobIo, RoundTripIsBitwise) {
    namespace fs = std::filesystem;
    fs::path dir = fs::temp_directory_path() / "qlower_blob_test";
    fs::create_directories(dir);

    Rng rng(3);
    Tensor r = Tensor::real({3, 5});
    for (double& v : r.reals()) v = rng.normal();
    r.reals()[0] = -0.0;
    write_tensor_blob(dir / "r.bin", r);
    EXPECT_TRUE(bitwise_equal(read_tensor_blob(dir / "r.bin"), r));

    Tensor i = Tensor::integer({7});
    for (auto& v : i.ints()) v = static_cast<std::int64_t>(rng.next());
    write_tensor_blob(dir / "i.bin", i);
    EXPECT_TRUE(bitwise_equal(read_tensor_blob(dir / "i.bin"), i));

    EXPECT_FALSE(bitwise_equal(r, i));
    fs::remove_all(dir);
}

TEST(BlobIo, RejectsMissingAndCorrupt) {
    namespace fs = std::filesystem;
    fs::path dir = fs::temp_directory_path() / "qlower_blob_bad";
    fs::create_directories(dir);

    EXPECT_THROW(read_tensor_blob(dir / "absent.bin"), MissingBlobError);

    {
        std::ofstream f(dir / "short.bin", std::ios::binary);
        f << "QLTENSR";
    }
    EXPECT_THROW(read_tensor_blob(dir / "short.bin"), ParseError);

    Tensor t = Tensor::integer({2}, {1, 2});
    write_tensor_blob(dir / "magic.bin", t);
    {
        std::fstream f(dir / "magic.bin", std::ios::binary | std::ios::in | std::ios::out);
        f.seekp(0);
        f << "XXXXXXXX";
    }
    EXPECT_THROW(read_tensor_blob(dir / "magic.bin"), ParseError);

    write_tensor_blob(dir / "trunc.bin", t);
    fs::resize_file(dir / "trunc.bin", fs::file_size(dir / "trunc.bin") - 4);
    EXPECT_THROW(read_tensor_blob(dir / "trunc.bin"), ParseError);
    fs::remove_all(dir);
}
