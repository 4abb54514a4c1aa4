#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <limits>
#include <random>
#include <sstream>

#include "fixtures.hpp"
#include "metast/params.hpp"

using namespace metast;

namespace {

ParamSet sample_set(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  ParamSet p;
  p.set("a", uniform_tensor({2, 3}, -1.0, 1.0, rng));
  p.set("b", uniform_tensor({4}, -1.0, 1.0, rng));
  p.set("s", Tensor::scalar(0.25));
  return p;
}

}  // namespace

TEST(ParamSet, LayoutAndAxpy) {
  ParamSet p = sample_set(1), q = sample_set(2);
  EXPECT_TRUE(p.same_layout(q));
  EXPECT_EQ(p.numel(), 11u);
  const ParamSet before = p;
  p.axpy(2.0, q);
  for (const auto& n : p.names())
    for (std::size_t i = 0; i < p.at(n).size(); ++i)
      EXPECT_DOUBLE_EQ(p.at(n)[i], before.at(n)[i] + 2.0 * q.at(n)[i]);
  ParamSet r = q;
  r.set("extra", Tensor::scalar(1.0));
  EXPECT_FALSE(p.same_layout(r));
  EXPECT_THROW(p.axpy(1.0, r), std::invalid_argument);
}

TEST(ParamSet, MergeAndPrefix) {
  ParamSet a, b;
  a.set("net.w", Tensor::scalar(1.0));
  b.set("mem.M", Tensor::scalar(2.0));
  const ParamSet m = ParamSet::merge(a, b);
  EXPECT_EQ(m.size(), 2u);
  EXPECT_EQ(m.with_prefix("mem.").names(), std::vector<std::string>{"mem.M"});
  EXPECT_EQ(m.with_prefix("mem.", false).names(), std::vector<std::string>{"net.w"});
  EXPECT_THROW(ParamSet::merge(a, a), std::invalid_argument);
  EXPECT_THROW(m.at("missing"), std::out_of_range);
}

TEST(Sgd, StepLeavesInputUntouched) {
  const ParamSet p = sample_set(3), g = sample_set(4);
  const ParamSet copy = p;
  const ParamSet out = sgd_step(p, g, 0.1);
  EXPECT_TRUE(fixture::bitwise_equal(p, copy));
  EXPECT_DOUBLE_EQ(out.at("s")[0], 0.25 - 0.1 * 0.25);
  EXPECT_TRUE(fixture::bitwise_equal(sgd_step(p, g, 0.0), p));
}

TEST(Adam, FirstStepMovesByLearningRateTimesSign) {
  ParamSet p;
  p.set("x", Tensor::vector({1.0, -2.0, 0.5}));
  ParamSet g;
  g.set("x", Tensor::vector({3.0, -0.01, 0.0}));
  Adam opt(Adam::Options{0.1});
  const ParamSet out = opt.step(p, g);
  // With bias correction the first update is lr * g / (|g| + eps).
  EXPECT_NEAR(out.at("x")[0], 1.0 - 0.1, 1e-8);
  EXPECT_NEAR(out.at("x")[1], -2.0 + 0.1, 1e-6);
  EXPECT_EQ(out.at("x")[2], 0.5);
}

TEST(Adam, MatchesScalarRecurrence) {
  ParamSet p;
  p.set("x", Tensor::scalar(4.0));
  Adam opt(Adam::Options{0.05, 0.8, 0.9, 1e-8});
  double x = 4.0, m = 0.0, v = 0.0;
  for (int t = 1; t <= 25; ++t) {
    ParamSet g;
    g.set("x", Tensor::scalar(2.0 * p.at("x")[0]));
    p = opt.step(p, g);
    const double gr = 2.0 * x;
    m = 0.8 * m + 0.2 * gr;
    v = 0.9 * v + 0.1 * gr * gr;
    x -= 0.05 * (m / (1.0 - std::pow(0.8, t))) / (std::sqrt(v / (1.0 - std::pow(0.9, t))) + 1e-8);
    EXPECT_NEAR(p.at("x")[0], x, 1e-12);
  }
}

TEST(Checkpoint, RoundTripIsBitExact) {
  ParamSet p = sample_set(5);
  p.at("b")[0] = -0.0;
  p.at("b")[1] = std::numeric_limits<double>::denorm_min();
  p.at("b")[2] = std::numeric_limits<double>::quiet_NaN();
  std::stringstream ss;
  write_checkpoint(ss, p);
  const ParamSet q = read_checkpoint(ss);
  EXPECT_TRUE(fixture::bitwise_equal(p, q));
}

TEST(Checkpoint, FileRoundTrip) {
  const auto path = std::filesystem::temp_directory_path() / "metast_ckpt_test.bin";
  const ParamSet p = sample_set(6);
  save_checkpoint(path.string(), p);
  EXPECT_TRUE(fixture::bitwise_equal(load_checkpoint(path.string()), p));
  std::filesystem::remove(path);
  EXPECT_THROW(load_checkpoint(path.string()), DataError);
}

TEST(Checkpoint, RejectsCorruptInput) {
  std::stringstream bad_magic("XXXX");
  EXPECT_THROW(read_checkpoint(bad_magic), DataError);

  std::stringstream ss;
  write_checkpoint(ss, sample_set(7));
  std::string bytes = ss.str();
  std::stringstream truncated(bytes.substr(0, bytes.size() - 3));
  EXPECT_THROW(read_checkpoint(truncated), DataError);

  bytes[4] = 9;  // version field
  std::stringstream wrong_version(bytes);
  EXPECT_THROW(read_checkpoint(wrong_version), DataError);
}

TEST(Checkpoint, LittleEndianHeader) {
  std::stringstream ss;
  write_checkpoint(ss, ParamSet{});
  const std::string b = ss.str();
  ASSERT_EQ(b.size(), 12u);
  EXPECT_EQ(b.substr(0, 4), "MSTT");
  EXPECT_EQ(b[4], 1);
  EXPECT_EQ(b[5], 0);
  EXPECT_EQ(b[8], 0);
}
