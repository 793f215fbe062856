#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "tlshield/dssim.hpp"

using namespace tlshield;

namespace {

Tensor random_image(std::mt19937& rng, std::size_t C = 1, std::size_t H = 16, std::size_t W = 16) {
    Tensor t(Shape{C, H, W});
    std::uniform_real_distribution<float> d(0.0f, 1.0f);
    for (float& v : t.data) v = d(rng);
    return t;
}

}  // namespace

TEST_CASE("dssim metric axioms") {
    std::mt19937 rng(2);
    SUBCASE("identity gives zero") {
        for (int t = 0; t < 10; ++t) {
            Tensor a = random_image(rng);
            CHECK(dssim(a, a) == doctest::Approx(0.0).epsilon(1e-7));
        }
    }
    SUBCASE("symmetry and range over 500 random pairs") {
        for (int t = 0; t < 500; ++t) {
            Tensor a = random_image(rng);
            Tensor b = random_image(rng);
            float ab = dssim(a, b), ba = dssim(b, a);
            CHECK(ab == doctest::Approx(ba).epsilon(1e-6));
            CHECK(ab >= 0.0f);
            CHECK(ab <= 1.0f);
        }
    }
    SUBCASE("shape mismatch is rejected") {
        Tensor a(Shape{1, 8, 8}), b(Shape{1, 8, 9});
        CHECK_THROWS_AS(dssim(a, b), std::invalid_argument);
    }
}

TEST_CASE("constant-image closed form") {
    // For a constant pair (all zeros vs all ones) every window has zero
    // variance and covariance, so SSIM = C1*C2 / ((1+C1)*C2) = C1/(1+C1) and
    // dssim = (1 - C1/(1+C1)) / 2.
    SsimParams p;
    Tensor z(Shape{1, 8, 8});
    Tensor o = ones(Shape{1, 8, 8});
    double ssim = p.c1 / (1.0 + p.c1);
    double want = (1.0 - ssim) / 2.0;
    CHECK(dssim(z, o, p) == doctest::Approx(want).epsilon(1e-6));
    CHECK(want == doctest::Approx(0.4995).epsilon(1e-3));  // ~ 0.49995 for C1 = 1e-4
}

TEST_CASE("windowing covers edges and shrinks to small images") {
    std::mt19937 rng(5);
    SUBCASE("image smaller than the window still works") {
        Tensor a = random_image(rng, 1, 5, 5);
        Tensor b = random_image(rng, 1, 5, 5);
        float d = dssim(a, b);
        CHECK(d >= 0.0f);
        CHECK(d <= 1.0f);
        CHECK(dssim(a, a) == doctest::Approx(0.0));
    }
    SUBCASE("a perturbation near the bottom-right corner is detected") {
        // 24x24 with stride 4: the tail window [16,24) covers the corner
        Tensor a(Shape{1, 24, 24});
        for (float& v : a.data) v = 0.5f;
        Tensor b = a;
        b.data[23 * 24 + 23] = 1.0f;
        CHECK(dssim(a, b) > 0.0f);
    }
    SUBCASE("multi-channel averages across channels") {
        Tensor a = random_image(rng, 3, 12, 12);
        Tensor b = a;
        // change only channel 2; distance must be one third of the same change
        // applied to every channel (channel-mean aggregation)
        Tensor b_all = a;
        for (std::size_t i = 0; i < 144; ++i) {
            b.data[2 * 144 + i] = std::min(1.0f, a.data[2 * 144 + i] + 0.3f);
            for (std::size_t c = 0; c < 3; ++c)
                b_all.data[c * 144 + i] = std::min(1.0f, a.data[c * 144 + i] + 0.3f);
        }
        // not exactly 1/3 because clamping differs per channel; assert ordering
        CHECK(dssim(a, b) > 0.0f);
        CHECK(dssim(a, b_all) > dssim(a, b));
    }
}

TEST_CASE("dssim gradient matches central finite differences") {
    std::mt19937 rng(7);
    Tensor a = random_image(rng, 1, 12, 12);
    Tensor b = random_image(rng, 1, 12, 12);
    Tensor g;
    dssim_with_grad(a, b, g);
    const float h = 1e-3f;
    std::uniform_int_distribution<std::size_t> pick(0, a.numel() - 1);
    for (int t = 0; t < 30; ++t) {
        std::size_t i = pick(rng);
        float orig = a.data[i];
        a.data[i] = orig + h;
        float dp = dssim(a, b);
        a.data[i] = orig - h;
        float dm = dssim(a, b);
        a.data[i] = orig;
        double fd = (dp - dm) / (2.0 * h);
        CHECK(std::abs(g.data[i] - fd) < 1e-3 * std::max(1.0, std::abs(fd)));
    }
}
