#include <gtest/gtest.h>

#include <sstream>

#include "test_util.hpp"

using namespace focusbench;

namespace {

int mirror(int i, int n)
{
    if (i < 0)
        return -i;
    if (i >= n)
        return 2 * n - 2 - i;
    return i;
}

// Sobel by explicit 3x3 kernels, mirrored borders.
double sobel_oracle(const Image& img)
{
    const int kx[3][3] = {{-1, 0, 1}, {-2, 0, 2}, {-1, 0, 1}};
    const int ky[3][3] = {{-1, -2, -1}, {0, 0, 0}, {1, 2, 1}};
    double acc = 0.0;
    for (int y = 0; y < img.height; ++y)
        for (int x = 0; x < img.width; ++x) {
            double gx = 0.0, gy = 0.0;
            for (int j = -1; j <= 1; ++j)
                for (int i = -1; i <= 1; ++i) {
                    const double v = img.at(mirror(x + i, img.width), mirror(y + j, img.height));
                    gx += kx[j + 1][i + 1] * v;
                    gy += ky[j + 1][i + 1] * v;
                }
            acc += gx * gx + gy * gy;
        }
    return acc / static_cast<double>(img.size());
}

// Haar detail energy fraction via explicit 2x2 block transforms.
double haar_oracle(const Image& img, int levels, int detail_levels)
{
    const int b = 1 << levels;
    int w = img.width / b * b, h = img.height / b * b;
    std::vector<std::vector<double>> a(h, std::vector<double>(w));
    double m = 0.0;
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x)
            m += a[y][x] = img.at(x, y);
    m /= w * h;
    double total = 0.0;
    for (auto& row : a)
        for (double& v : row) {
            v -= m;
            total += v * v;
        }
    double detail = 0.0;
    for (int l = 0; l < levels; ++l) {
        std::vector<std::vector<double>> ll(h / 2, std::vector<double>(w / 2));
        for (int y = 0; y < h / 2; ++y)
            for (int x = 0; x < w / 2; ++x) {
                const double p = a[2 * y][2 * x], q = a[2 * y][2 * x + 1], r = a[2 * y + 1][2 * x],
                             s = a[2 * y + 1][2 * x + 1];
                ll[y][x] = (p + q + r + s) / 2;
                if (l < detail_levels)
                    detail += (std::pow(p - q + r - s, 2) + std::pow(p + q - r - s, 2) + std::pow(p - q - r + s, 2)) / 4;
            }
        a = ll;
        w /= 2;
        h /= 2;
    }
    return detail / total;
}

ZStack quiet_stack(std::uint64_t seed, double zmin, double zmax, double step, double focus = 0.0)
{
    auto scope = testutil::quiet_scope(seed, 128, std::max(std::abs(zmin), std::abs(zmax)), focus);
    return acquire_stack(scope, zmin, zmax, step, scope.centered(128, 128));
}

}  // namespace

TEST(ScoreImage, ConstantImageHasNoGradient)
{
    const Image flat(32, 32, 0.4);
    EXPECT_EQ(score_image(MetricKind::TENENGRAD, flat), 0.0);
    EXPECT_EQ(score_image(MetricKind::LAPV, flat), 0.0);
    for (MetricKind m : all_metrics)
        EXPECT_GE(score_image(m, flat), 0.0) << to_string(m);
}

TEST(ScoreImage, TenengradStepEdgeMatchesSobelOracle)
{
    Image img(16, 16, 0.0);
    for (int y = 0; y < 16; ++y)
        for (int x = 8; x < 16; ++x)
            img.at(x, y) = 1.0;
    // column 7|8 edge: |gx| = 4 on both sides, everything else 0
    EXPECT_DOUBLE_EQ(sobel_oracle(img), 2 * 16 * 16.0 / 256.0);
    EXPECT_DOUBLE_EQ(score_image(MetricKind::TENENGRAD, img), sobel_oracle(img));
}

TEST(ScoreImage, TenengradRandomMatchesSobelOracle)
{
    const Image img = testutil::random_image(23, 17, 4);
    EXPECT_NEAR(score_image(MetricKind::TENENGRAD, img), sobel_oracle(img), 1e-12);
}

TEST(ScoreImage, LaplacianMetricsMatchStencils)
{
    const Image img = testutil::random_image(20, 18, 8);
    std::vector<double> lap;
    double sml = 0.0;
    for (int y = 0; y < img.height; ++y)
        for (int x = 0; x < img.width; ++x) {
            auto p = [&](int i, int j) { return img.at(mirror(i, img.width), mirror(j, img.height)); };
            lap.push_back(p(x - 1, y) + p(x + 1, y) + p(x, y - 1) + p(x, y + 1) - 4 * p(x, y));
            sml += std::abs(2 * p(x, y) - p(x - 1, y) - p(x + 1, y)) + std::abs(2 * p(x, y) - p(x, y - 1) - p(x, y + 1));
        }
    double m = 0.0;
    for (double v : lap)
        m += v;
    m /= lap.size();
    double var = 0.0;
    for (double v : lap)
        var += (v - m) * (v - m);
    var /= lap.size();
    EXPECT_NEAR(score_image(MetricKind::LAPV, img), var, 1e-12);
    EXPECT_NEAR(score_image(MetricKind::SML, img), sml / img.size(), 1e-12);
}

TEST(ScoreImage, HpfMatchesDirectDft)
{
    const Image img = testutil::random_image(24, 20, 3);
    std::vector<double> v(img.pixels);
    const double m = mean(v);
    for (double& p : v)
        p -= m;
    const auto spec = testutil::naive_dft(v, 24, 20);
    double high = 0.0, total = 0.0;
    for (int ky = 0; ky < 20; ++ky)
        for (int kx = 0; kx < 24; ++kx) {
            const double fx = (kx <= 12 ? kx : kx - 24) / 24.0, fy = (ky <= 10 ? ky : ky - 20) / 20.0;
            const double p = std::norm(spec[static_cast<std::size_t>(ky) * 24 + kx]);
            total += p;
            if (std::hypot(fx, fy) > 0.25 * 0.5)
                high += p;
        }
    EXPECT_NEAR(score_image(MetricKind::HPF, img), high / total, 1e-12);
}

TEST(ScoreImage, WaveletRatiosMatchBlockOracle)
{
    const Image img = testutil::random_image(37, 29, 12);
    EXPECT_NEAR(score_image(MetricKind::EWC, img), haar_oracle(img, 1, 1), 1e-12);
    EXPECT_NEAR(score_image(MetricKind::WS, img), haar_oracle(img, 3, 2), 1e-12);
}

TEST(ScoreImage, TooSmallThrows)
{
    EXPECT_THROW(score_image(MetricKind::SML, Image(15, 40)), Error);
}

TEST(ScoreImage, InvariantToIntensityOffset)
{
    const Image img = make_texture(TextureKind::Blobs, 128, 128, 21);
    Image shifted = img;
    for (double& p : shifted.pixels)
        p += 0.375;
    for (MetricKind m : all_metrics) {
        const double a = score_image(m, img), b = score_image(m, shifted);
        EXPECT_NEAR(a, b, 1e-9 * std::max(1.0, std::abs(a))) << to_string(m);
    }
}

TEST(ScoreImage, MetricNamesRoundTrip)
{
    for (MetricKind m : all_metrics)
        EXPECT_EQ(metric_from_string(to_string(m)), m);
    EXPECT_THROW(metric_from_string("VOLLATH"), Error);
}

TEST(MetricCurve, SingleSlice)
{
    ZStack s;
    s.slices.push_back({2.0, testutil::random_image(32, 32, 1)});
    const auto c = metric_curve(MetricKind::LAPV, s);
    ASSERT_EQ(c.samples.size(), 1u);
    EXPECT_EQ(c.samples[0].z_um, 2.0);
}

TEST(MetricCurve, TenengradPeaksAtTrueFocus)
{
    const auto stack = quiet_stack(6, -30.0, 30.0, 3.0, 4.2);
    const auto c = metric_curve(MetricKind::TENENGRAD, stack);
    std::size_t best = 0, nearest = 0;
    for (std::size_t i = 0; i < c.samples.size(); ++i) {
        if (c.samples[i].value > c.samples[best].value)
            best = i;
        if (std::abs(c.samples[i].z_um - 4.2) < std::abs(c.samples[nearest].z_um - 4.2))
            nearest = i;
    }
    EXPECT_EQ(best, nearest);
}

TEST(MetricCurve, RejectsReversedStack)
{
    ZStack s;
    s.spacing_um = 1.0;
    s.slices = {{1.0, Image(32, 32)}, {0.0, Image(32, 32)}};
    EXPECT_THROW(metric_curve(MetricKind::HPF, s), Error);
}

TEST(MetricCurve, ErrorsNameTheSlice)
{
    ZStack s;
    s.spacing_um = 1.0;
    s.slices = {{0.0, Image(32, 32)}, {1.0, Image(8, 8)}};
    try {
        metric_curve(MetricKind::SML, s);
        FAIL();
    } catch (const Error& e) {
        EXPECT_NE(std::string(e.what()).find("slice 1"), std::string::npos);
    }
}

TEST(MetricCurve, NoiseFreeCurvesAreUnimodalAroundFocus)
{
    const double step = 2.0;
    const auto stack = quiet_stack(8, -40.0, 40.0, step);
    for (MetricKind m : all_metrics) {
        const auto c = metric_curve(m, stack);
        std::size_t peak = 0;
        for (std::size_t i = 0; i < c.samples.size(); ++i)
            if (c.samples[i].value > c.samples[peak].value)
                peak = i;
        EXPECT_LE(std::abs(c.samples[peak].z_um), step) << to_string(m);
        // HPF sees the wrap-around edge of a smooth patch, so its tail climbs
        // again past about 20 um; only the core is unimodal
        const double reach = m == MetricKind::HPF ? 18.0 : 40.0;
        for (std::size_t i = 1; i <= peak; ++i) {
            if (std::abs(c.samples[i - 1].z_um) <= reach) {
                EXPECT_GE(c.samples[i].value, c.samples[i - 1].value * (1 - 1e-9)) << to_string(m) << " rising " << i;
            }
        }
        for (std::size_t i = peak + 1; i < c.samples.size(); ++i) {
            if (std::abs(c.samples[i].z_um) <= reach) {
                EXPECT_LE(c.samples[i].value, c.samples[i - 1].value * (1 + 1e-9)) << to_string(m) << " falling " << i;
            }
        }
    }
}

TEST(MetricCurve, HpfTailRisesOnSmoothPatches)
{
    const auto c = metric_curve(MetricKind::HPF, quiet_stack(8, 0.0, 40.0, 4.0));
    EXPECT_GT(c.samples.back().value, c.samples[5].value);
}

TEST(Normalize, AffineMap)
{
    ScoreCurve raw;
    raw.samples = {{0, 2}, {1, 8}, {2, 4}};
    const auto n = normalize_to_blurriness(raw);
    EXPECT_TRUE(n.normalized);
    EXPECT_FALSE(n.degenerate);
    EXPECT_DOUBLE_EQ(n.samples[0].value, 1.0);
    EXPECT_DOUBLE_EQ(n.samples[1].value, 0.0);
    EXPECT_DOUBLE_EQ(n.samples[2].value, 2.0 / 3.0);
    EXPECT_EQ(n.z(), raw.z());
}

TEST(Normalize, ConstantIsDegenerate)
{
    ScoreCurve raw;
    raw.samples = {{0, 5}, {1, 5}, {2, 5}};
    const auto n = normalize_to_blurriness(raw);
    EXPECT_TRUE(n.degenerate);
    for (const auto& s : n.samples)
        EXPECT_EQ(s.value, 0.5);
}

TEST(Normalize, ArgminIsRawArgmaxAndIdempotent)
{
    const auto stack = quiet_stack(2, -20.0, 20.0, 2.0);
    for (MetricKind m : all_metrics) {
        const auto raw = metric_curve(m, stack);
        const auto n = normalize_to_blurriness(raw);
        const auto raw_v = raw.values(), n_v = n.values();
        EXPECT_EQ(std::max_element(raw_v.begin(), raw_v.end()) - raw_v.begin(),
                  std::min_element(n_v.begin(), n_v.end()) - n_v.begin());
        EXPECT_EQ(*std::min_element(n_v.begin(), n_v.end()), 0.0);
        EXPECT_EQ(*std::max_element(n_v.begin(), n_v.end()), 1.0);
        const auto again = normalize_to_blurriness(n);
        for (std::size_t i = 0; i < n_v.size(); ++i)
            EXPECT_NEAR(again.samples[i].value, n_v[i], 1e-15);
    }
}

TEST(Normalize, NeedsTwoSamples)
{
    ScoreCurve raw;
    raw.samples = {{0, 1}};
    EXPECT_THROW(normalize_to_blurriness(raw), Error);
}

TEST(CurveCsv, HeaderAndNineDigits)
{
    ScoreCurve c;
    c.samples = {{-1.5, 1.0 / 3.0}, {0.25, 2.0}};
    std::ostringstream os;
    write_curve_csv(os, c);
    EXPECT_EQ(os.str(), "z_um,score\n-1.5,0.333333333\n0.25,2\n");
}
