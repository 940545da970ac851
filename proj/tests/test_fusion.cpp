#include <catch2/catch_amalgamated.hpp>

#include <random>

#include "evifuse/dst.hpp"
#include "evifuse/fusion.hpp"

using namespace evifuse;
using namespace evifuse::fusion;

namespace {

Volume prob_volume(Dims dims, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<float> u(0.0f, 1.0f);
    Volume v(dims, Modality::PROB);
    for (float& x : v.data) x = u(rng);
    return v;
}

Volume single_voxel(float p) {
    Volume v({1, 1, 1}, Modality::PROB);
    v.data[0] = p;
    return v;
}

}  // namespace

TEST_CASE("fuse_voxel reproduces the worked example") {
    const auto f = fuse_voxel(0.26, 0.85);
    CHECK(f.fused == Catch::Approx(0.221 / 0.332).margin(1e-9));
    CHECK(f.conflict == Catch::Approx(0.668).margin(1e-9));

    const auto g = fuse_voxel(0.6, 0.6);
    CHECK(g.fused == Catch::Approx(0.36 / 0.52).margin(1e-12));
}

TEST_CASE("0.5 is the neutral second input") {
    std::mt19937_64 rng(17);
    std::uniform_real_distribution<double> u(0.01, 0.99);
    for (int i = 0; i < 500; ++i) {
        const double p = u(rng);
        CHECK(fuse_voxel(p, 0.5).fused == Catch::Approx(p).margin(1e-12));
    }
}

TEST_CASE("volume fusion matches the dst_core scalar path voxelwise") {
    const auto A = prob_volume({4, 5, 6}, 100);
    const auto B = prob_volume({4, 5, 6}, 200);
    const auto r = fuse_volumes(A, B);
    for (std::size_t i = 0; i < A.data.size(); ++i) {
        const double p = clamp_prob(A.data[i]);
        const double q = clamp_prob(B.data[i]);
        const auto fused =
            dst::combine(dst::mass_from_prob(p), dst::mass_from_prob(q));
        CHECK(static_cast<double>(r.fused.data[i]) ==
              Catch::Approx(dst::prob_from_mass(fused.mass)).margin(1e-6));
        CHECK(static_cast<double>(r.conflict.data[i]) ==
              Catch::Approx(fused.conflict).margin(1e-6));
        // The double-precision scalar paths agree to machine accuracy.
        CHECK(fuse_voxel(p, q).fused ==
              Catch::Approx(dst::prob_from_mass(fused.mass)).margin(1e-12));
        CHECK(fuse_voxel(p, q).conflict == Catch::Approx(fused.conflict).margin(1e-12));
    }
}

TEST_CASE("fusion is symmetric and monotone") {
    const auto A = prob_volume({3, 4, 4}, 1);
    const auto B = prob_volume({3, 4, 4}, 2);
    const auto ab = fuse_volumes(A, B);
    const auto ba = fuse_volumes(B, A);
    CHECK(ab.fused.data == ba.fused.data);
    CHECK(ab.conflict.data == ba.conflict.data);

    std::mt19937_64 rng(33);
    std::uniform_real_distribution<double> u(0.01, 0.98);
    for (int i = 0; i < 500; ++i) {
        const double q = u(rng);
        const double p = u(rng);
        CHECK(fuse_voxel(p + 0.01, q).fused > fuse_voxel(p, q).fused);
    }
}

TEST_CASE("reinforcement and attenuation") {
    std::mt19937_64 rng(71);
    std::uniform_real_distribution<double> hi(0.5001, 0.999);
    std::uniform_real_distribution<double> lo(0.001, 0.4999);
    for (int i = 0; i < 500; ++i) {
        const double p = hi(rng), q = hi(rng);
        CHECK(fuse_voxel(p, q).fused >= std::max(p, q) - 1e-12);
        const double a = lo(rng), b = lo(rng);
        CHECK(fuse_voxel(a, b).fused <= std::min(a, b) + 1e-12);
    }
}

TEST_CASE("clamping keeps conflict away from 0 and 1") {
    const double bound = 2.0 * kClampEps * (1.0 - kClampEps);
    for (double p : {0.0, 1.0}) {
        for (double q : {0.0, 1.0}) {
            const auto f = fuse_voxel(p, q);
            CHECK(f.conflict >= bound - 1e-15);
            CHECK(f.conflict <= 1.0 - bound + 1e-15);
            CHECK(std::isfinite(f.fused));
        }
    }
}

TEST_CASE("closed-form gradient matches central finite differences") {
    std::mt19937_64 rng(55);
    std::uniform_real_distribution<double> u(0.01, 0.99);
    const double h = 1e-5;
    for (int i = 0; i < 1000; ++i) {
        const double p = u(rng), q = u(rng);
        const auto g = fuse_voxel_grad(p, q);
        const double fd_p = (fuse_voxel(p + h, q).fused - fuse_voxel(p - h, q).fused) / (2 * h);
        const double fd_q = (fuse_voxel(p, q + h).fused - fuse_voxel(p, q - h).fused) / (2 * h);
        CHECK(std::abs(g.d_p - fd_p) / std::max(std::abs(fd_p), 1e-12) < 1e-5);
        CHECK(std::abs(g.d_q - fd_q) / std::max(std::abs(fd_q), 1e-12) < 1e-5);
    }
}

TEST_CASE("fuse_backward scales linearly with upstream") {
    const auto A = prob_volume({3, 3, 3}, 5);
    const auto B = prob_volume({3, 3, 3}, 6);
    Volume zero(A.dims, Modality::PET);
    const auto gz = fuse_backward(A, B, zero);
    for (float x : gz.dA.data) CHECK(x == 0.0f);
    for (float x : gz.dB.data) CHECK(x == 0.0f);

    Volume one(A.dims, Modality::PET, {}, 1.0f);
    Volume two(A.dims, Modality::PET, {}, 2.0f);
    const auto g1 = fuse_backward(A, B, one);
    const auto g2 = fuse_backward(A, B, two);
    for (std::size_t i = 0; i < g1.dA.data.size(); ++i) {
        CHECK(g2.dA.data[i] == Catch::Approx(2.0f * g1.dA.data[i]).margin(1e-6));
    }
    CHECK(g1.dA.data[0] != 0.0f);

    // At (0.5, 0.5) the partial is exactly 1.
    const auto point = fuse_backward(single_voxel(0.5f), single_voxel(0.5f),
                                     single_voxel(1.0f));
    CHECK(point.dA.data[0] == Catch::Approx(1.0).margin(1e-9));
}

TEST_CASE("shape and domain errors") {
    const auto A = prob_volume({2, 2, 2}, 1);
    const auto B = prob_volume({2, 2, 3}, 2);
    CHECK_THROWS_AS(fuse_volumes(A, B), shape_error);
    CHECK_THROWS_AS(baseline_fuse(BaselineStrategy::Average, A, B), shape_error);
    CHECK_THROWS_AS(fuse_backward(A, B, A), shape_error);

    Volume bad = A;
    bad.data[0] = std::numeric_limits<float>::quiet_NaN();
    CHECK_THROWS_AS(fuse_volumes(bad, A), domain_error);
}

TEST_CASE("baseline strategies") {
    const auto A = single_voxel(0.26f);
    const auto B = single_voxel(0.85f);
    CHECK(baseline_fuse(BaselineStrategy::Average, A, B).data[0] ==
          Catch::Approx(0.555f).margin(1e-6));
    CHECK(baseline_fuse(BaselineStrategy::Vote, A, B).data[0] == 0.5f);
    CHECK(baseline_fuse(BaselineStrategy::Max, A, B).data[0] == 0.85f);

    CHECK(baseline_fuse(BaselineStrategy::Vote, single_voxel(0.7f), single_voxel(0.6f)).data[0] ==
          1.0f);
    CHECK(baseline_fuse(BaselineStrategy::Vote, single_voxel(0.2f), single_voxel(0.5f)).data[0] ==
          0.0f);
}

TEST_CASE("binarize uses a strict threshold") {
    CHECK(fusion::binarize(single_voxel(0.6657f), 0.5).data[0] == 1.0f);
    CHECK(fusion::binarize(single_voxel(0.5f), 0.5).data[0] == 0.0f);
    CHECK(fusion::binarize(single_voxel(0.0f)).data[0] == 0.0f);
    CHECK(fusion::binarize(single_voxel(0.4f)).modality == Modality::MASK);
    CHECK_THROWS_AS(fusion::binarize(single_voxel(0.5f), 0.0), domain_error);
    CHECK_THROWS_AS(fusion::binarize(single_voxel(0.5f), 1.0), domain_error);
}
