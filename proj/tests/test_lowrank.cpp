#include <gtest/gtest.h>

#include <random>

#include "support.hpp"

using namespace dtcmr;

namespace {

Eigen::MatrixXd random_matrix(int rows, int cols, unsigned seed) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> n(0.0, 1.0);
    Eigen::MatrixXd m(rows, cols);
    for (int j = 0; j < cols; ++j)
        for (int i = 0; i < rows; ++i) m(i, j) = n(rng);
    return m;
}

ImageStack stack_from_frames(const std::vector<Image>& frames) {
    std::vector<DiffusionConfig> e;
    for (std::size_t k = 0; k < frames.size(); ++k) e.push_back({k == 0 ? 0.0 : 100.0, k == 0 ? std::nullopt : std::optional<Vec3>(Vec3{0, 0, 1})});
    ImageStack s(frames[0].nx(), frames[0].ny(), 1, int(frames.size()), Protocol{e});
    for (std::size_t k = 0; k < frames.size(); ++k) s.set_frame(int(k), frames[k]);
    return s;
}

}  // namespace

TEST(Lowrank, RankOneInputIsReproducedExactly) {
    const Eigen::VectorXd u = random_matrix(50, 1, 1).col(0);
    const Eigen::VectorXd v = random_matrix(7, 1, 2).col(0);
    const Eigen::MatrixXd a = u * v.transpose();
    const auto f = truncated_svd(a, 1);
    EXPECT_LT((f.reconstruct() - a).cwiseAbs().maxCoeff(), 1e-10);
}

TEST(Lowrank, FullRankReconstructionIsIdentity) {
    for (auto [r, c] : {std::pair{30, 8}, std::pair{8, 30}}) {
        const Eigen::MatrixXd a = random_matrix(r, c, 3);
        const auto f = truncated_svd(a, std::min(r, c));
        EXPECT_LT((f.reconstruct() - a).cwiseAbs().maxCoeff(), 1e-9);
    }
}

TEST(Lowrank, TailEnergyMatchesGramOracle) {
    const Eigen::MatrixXd a = random_matrix(6, 4, 4);
    Eigen::SelfAdjointEigenSolver<Eigen::Matrix4d> oracle(a.transpose() * a);
    // Ascending eigenvalues: the two smallest are sigma_4^2 and sigma_3^2.
    const double tail = std::sqrt(oracle.eigenvalues()(0) + oracle.eigenvalues()(1));
    const auto f = truncated_svd(a, 2);
    EXPECT_NEAR((a - f.reconstruct()).norm(), tail, 1e-8 * std::max(1.0, tail));
}

TEST(Lowrank, FactorsAreOrthonormalAndSorted) {
    const Eigen::MatrixXd a = random_matrix(200, 12, 5);
    const auto f = truncated_svd(a, 5);
    EXPECT_LT((f.spatial_basis.transpose() * f.spatial_basis - Eigen::MatrixXd::Identity(5, 5)).norm(), 1e-10);
    EXPECT_LT((f.dynamic_factors * f.dynamic_factors.transpose() - Eigen::MatrixXd::Identity(5, 5)).norm(), 1e-10);
    for (int k = 1; k < 5; ++k) EXPECT_GE(f.singular_values(k - 1), f.singular_values(k));
    const Eigen::JacobiSVD<Eigen::MatrixXd> ref(a);
    for (int k = 0; k < 5; ++k) EXPECT_NEAR(f.singular_values(k), ref.singularValues()(k), 1e-9 * ref.singularValues()(0));
}

TEST(Lowrank, SignConventionMakesLargestEntryPositive) {
    const auto f = truncated_svd(random_matrix(40, 6, 6), 3);
    for (int k = 0; k < 3; ++k) {
        Eigen::Index i = 0;
        f.spatial_basis.col(k).cwiseAbs().maxCoeff(&i);
        EXPECT_GT(f.spatial_basis(i, k), 0.0);
    }
}

TEST(Lowrank, ZeroSingularValuesCompleteTheBasis) {
    const Eigen::MatrixXd a = random_matrix(20, 2, 7) * random_matrix(2, 6, 8);  // rank 2
    const auto f = truncated_svd(a, 4);
    EXPECT_EQ(f.singular_values(2), 0.0);
    EXPECT_EQ(f.singular_values(3), 0.0);
    EXPECT_LT((f.spatial_basis.transpose() * f.spatial_basis - Eigen::MatrixXd::Identity(4, 4)).norm(), 1e-10);
    EXPECT_LT((f.reconstruct() - a).cwiseAbs().maxCoeff(), 1e-10);
}

TEST(Lowrank, RankOutOfRangeIsRejected) {
    const Eigen::MatrixXd a = random_matrix(10, 4, 9);
    EXPECT_THROW(truncated_svd(a, 0), ValidationError);
    EXPECT_THROW(truncated_svd(a, 5), ValidationError);
}

TEST(Lowrank, IdenticalFramesAreRankOne) {
    const Image img = dtcmr::testing::smooth_image(24, 20);
    const auto s = stack_from_frames({img, img, img, img});
    const auto r = reconstruct_rank(s, 1);
    EXPECT_LT(dtcmr::testing::max_abs_diff(r.data(), s.data()), 1e-9);
    const auto full = reconstruct_rank(s, 4);
    EXPECT_LT(dtcmr::testing::max_abs_diff(full.data(), s.data()), 1e-9);
}

TEST(Lowrank, RankSixDenoisesAPhantom) {
    PhantomSpec spec;
    spec.n_ave = 3;
    const auto ph = make_phantom(spec);
    ImageStack noisy = ph.stack;
    std::mt19937_64 rng(11);
    std::normal_distribution<double> n(0.0, 0.05 * spec.s0);
    for (double& v : noisy.data()) v += n(rng);
    const auto den = reconstruct_rank(noisy, 6);
    double e_noisy = 0.0, e_den = 0.0;
    const auto clean = ph.truth.noiseless.data();
    for (std::size_t i = 0; i < clean.size(); ++i) {
        e_noisy += std::pow(noisy.data()[i] - clean[i], 2.0);
        e_den += std::pow(den.data()[i] - clean[i], 2.0);
    }
    EXPECT_LT(e_den, e_noisy);
}

TEST(Lowrank, ReferenceOfCopiesIsTheImage) {
    const Image img = dtcmr::testing::smooth_image(24, 20);
    const auto ref = rank1_reference(stack_from_frames({img, img, img}));
    EXPECT_LT(dtcmr::testing::max_abs_diff(ref.pixels(), img.pixels()), 1e-9);
}

TEST(Lowrank, ReferenceIsGeometricMeanOfWeights) {
    const Image img = dtcmr::testing::smooth_image(24, 20);
    std::vector<Image> frames;
    for (double c : {1.0, 2.0, 4.0}) {
        Image f = img;
        for (double& v : f.pixels()) v *= c;
        frames.push_back(f);
    }
    const auto ref = rank1_reference(stack_from_frames(frames));
    for (std::size_t i = 0; i < img.size(); ++i) ASSERT_NEAR(ref[i], 2.0 * img[i], 1e-9);
}

TEST(Lowrank, ReferenceResemblesTheB0Mean) {
    PhantomSpec spec;
    spec.n_ave = 3;
    spec.noise_sigma = 0.02;
    const auto ph = make_phantom(spec);
    const auto ref = rank1_reference(ph.stack);
    std::vector<double> b0(ref.size(), 0.0);
    for (int k = 0; k < ph.stack.frames(); ++k)
        if (ph.stack.config_of_frame(k).is_b0())
            for (std::size_t i = 0; i < b0.size(); ++i) b0[i] += ph.stack.frame_span(k)[i];
    EXPECT_GT(pearson(ref.pixels(), b0), 0.95);
}

TEST(Lowrank, HigherRankReferenceIsPositive) {
    PhantomSpec spec;
    spec.n_ave = 2;
    spec.noise_sigma = 0.02;
    const auto ref = lowrank_reference(make_phantom(spec).stack, 3);
    for (double v : ref.pixels()) ASSERT_GT(v, 0.0);
}

TEST(LowrankInvariants, ReconstructionErrorIsMonotoneInRank) {
    for (unsigned seed : {21u, 22u, 23u}) {
        const Eigen::MatrixXd a = random_matrix(40, 9, seed);
        double prev = std::numeric_limits<double>::infinity();
        for (int l = 1; l <= 9; ++l) {
            const double err = (truncated_svd(a, l).reconstruct() - a).norm();
            EXPECT_LE(err, prev + 1e-12) << "rank " << l;
            prev = err;
        }
        EXPECT_LT(prev, 1e-9);
    }
}

TEST(LowrankInvariants, TruncatedSvdIsBitReproducible) {
    const Eigen::MatrixXd a = random_matrix(60, 12, 31);
    const auto f1 = truncated_svd(a, 5), f2 = truncated_svd(a, 5);
    EXPECT_TRUE(f1.spatial_basis == f2.spatial_basis);
    EXPECT_TRUE(f1.singular_values == f2.singular_values);
    EXPECT_TRUE(f1.dynamic_factors == f2.dynamic_factors);
}

TEST(LowrankInvariants, ReferenceIgnoresFrameOrderAndScalesLinearly) {
    PhantomSpec spec;
    spec.n_ave = 2;
    spec.noise_sigma = 0.02;
    const auto ph = make_phantom(spec);
    std::vector<Image> frames, reversed, scaled;
    for (int k = 0; k < ph.stack.frames(); ++k) frames.push_back(ph.stack.frame(k));
    reversed.assign(frames.rbegin(), frames.rend());
    for (const auto& f : frames) {
        Image g = f;
        for (double& v : g.pixels()) v *= 3.5;
        scaled.push_back(g);
    }
    const Image ref = rank1_reference(stack_from_frames(frames));
    const Image ref_rev = rank1_reference(stack_from_frames(reversed));
    const Image ref_scaled = rank1_reference(stack_from_frames(scaled));
    double vmax = 0.0;
    for (double v : ref.pixels()) vmax = std::max(vmax, v);
    for (std::size_t i = 0; i < ref.size(); ++i) {
        ASSERT_NEAR(ref_rev[i], ref[i], 1e-9 * vmax);
        ASSERT_NEAR(ref_scaled[i], 3.5 * ref[i], 1e-9 * vmax);
    }
}

TEST(LowrankInvariants, FrameVarianceGrowsWithRank) {
    PhantomSpec spec;
    spec.n_ave = 3;
    spec.noise_sigma = 0.03;
    spec.motion.max_shift = 2.0;
    const auto ph = make_phantom(spec);
    auto frame_variance = [](const ImageStack& s) {
        double total = 0.0;
        for (int y = 0; y < s.ny(); ++y)
            for (int x = 0; x < s.nx(); ++x) {
                double m = 0.0, mm = 0.0;
                for (int k = 0; k < s.frames(); ++k) {
                    const double v = s.at(x, y, k);
                    m += v;
                    mm += v * v;
                }
                m /= s.frames();
                total += mm / s.frames() - m * m;
            }
        return total;
    };
    const double v1 = frame_variance(reconstruct_rank(ph.stack, 1));
    const double v6 = frame_variance(reconstruct_rank(ph.stack, 6));
    const double vfull = frame_variance(ph.stack);
    EXPECT_LT(v1, v6);
    EXPECT_LT(v6, vfull);
}
