#include <gtest/gtest.h>

#include <set>

#include "psbd/common.hpp"
#include "psbd/io.hpp"
#include "psbd/rng.hpp"

using namespace psbd;

TEST(Percentile, LinearInterpolationQuarter) {
    EXPECT_DOUBLE_EQ(percentile({0.1, 0.2, 0.3, 0.4}, 25.0), 0.175);
    EXPECT_DOUBLE_EQ(percentile({0.4, 0.1, 0.3, 0.2}, 25.0), 0.175);
}

TEST(Percentile, Endpoints) {
    const std::vector<double> v{5.0, -1.0, 2.0};
    EXPECT_DOUBLE_EQ(percentile(v, 0.0), -1.0);
    EXPECT_DOUBLE_EQ(percentile(v, 100.0), 5.0);
    EXPECT_DOUBLE_EQ(percentile(v, 50.0), 2.0);
    EXPECT_DOUBLE_EQ(percentile({3.5}, 25.0), 3.5);
}

TEST(Percentile, MatchesHandComputedOrderStatistics) {
    // n = 5, q = 30: position 1.2 between 2nd (20) and 3rd (30) values.
    EXPECT_NEAR(percentile({10, 20, 30, 40, 50}, 30.0), 22.0, 1e-12);
}

TEST(Percentile, RejectsBadInput) {
    EXPECT_THROW(percentile({}, 25.0), ParameterError);
    EXPECT_THROW(percentile({1.0}, 101.0), ParameterError);
}

TEST(Rng, SameSeedSameStream) {
    Rng a(42), b(42);
    for (int i = 0; i < 100; ++i) EXPECT_EQ(a.next(), b.next());
}

TEST(Rng, UniformRangeAndBelow) {
    Rng r(1);
    for (int i = 0; i < 10000; ++i) {
        const double u = r.uniform();
        EXPECT_GE(u, 0.0);
        EXPECT_LT(u, 1.0);
        EXPECT_LT(r.below(7), 7u);
    }
}

TEST(Rng, SampleWithoutReplacementIsDistinct) {
    Rng r(3);
    const auto s = r.sample_without_replacement(50, 20);
    EXPECT_EQ(s.size(), 20u);
    EXPECT_EQ(std::set<std::size_t>(s.begin(), s.end()).size(), 20u);
    for (auto i : s) EXPECT_LT(i, 50u);
}

TEST(Rng, SubSeedsDifferByLabel) {
    EXPECT_NE(sub_seed(7, "data"), sub_seed(7, "poison"));
    EXPECT_EQ(sub_seed(7, "data"), sub_seed(7, "data"));
    EXPECT_NE(combine_seed(1, 2, 3), combine_seed(1, 3, 2));
}

TEST(Io, ShortestRoundTripFormatting) {
    EXPECT_EQ(io::fmt(0.175), "0.175");
    EXPECT_EQ(io::fmt(1.0), "1.0");
    const double v = 0.1 + 0.2;
    EXPECT_EQ(std::stod(io::fmt(v)), v);
}
