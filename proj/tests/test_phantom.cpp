#include <gtest/gtest.h>

#include "support.hpp"

using namespace dtcmr;
using dtcmr::testing::TempDir;

namespace {

std::vector<bool> all_kept(const ImageStack& s) { return std::vector<bool>(std::size_t(s.frames()), true); }

TransformSet as_set(const std::vector<PlanarTransform>& ts) {
    TransformSet out;
    for (const auto& t : ts) out.frames.push_back({t});
    return out;
}

TensorField fit_stack(const ImageStack& s, const Annotations& ann) {
    auto f = fit_tensor(average_by_config(s, all_kept(s)), ann.myo_mask);
    compute_helix_angles(f, ann.blood_pool_center);
    return f;
}

}  // namespace

TEST(Phantom, SameSpecGivesIdenticalOutput) {
    PhantomSpec spec;
    spec.n_ave = 2;
    spec.noise_sigma = 0.05;
    spec.motion.max_shift = 3.0;
    spec.motion.max_rotation_deg = 2.0;
    spec.n_corrupted = 3;
    const auto a = make_phantom(spec), b = make_phantom(spec);
    EXPECT_EQ(a.stack, b.stack);
    EXPECT_EQ(a.truth.corrupted, b.truth.corrupted);
    for (std::size_t k = 0; k < a.truth.transforms.size(); ++k) {
        EXPECT_EQ(a.truth.transforms[k].offset(), b.truth.transforms[k].offset());
        EXPECT_EQ(a.truth.transforms[k].matrix(), b.truth.transforms[k].matrix());
    }
    spec.seed = 2;
    EXPECT_FALSE(make_phantom(spec).stack == a.stack);
}

TEST(Phantom, FixedShiftIsAppliedAndLogged) {
    PhantomSpec spec;
    spec.n_ave = 1;
    const Vec2 c{47.5, 47.5};
    spec.motion.fixed[3] = PlanarTransform::translation(2.0, -1.0, c);
    const auto ph = make_phantom(spec);
    EXPECT_EQ(ph.truth.transforms[3].offset(), (Vec2{2.0, -1.0}));
    EXPECT_EQ(ph.truth.transforms[2].offset(), Vec2{});
    // Content moves by (+2, -1): frame(x + 2, y - 1) = anatomy(x, y).
    spec.motion.fixed.clear();
    const auto still = make_phantom(spec);
    for (int y = 10; y < 86; y += 3)
        for (int x = 10; x < 86; x += 3)
            ASSERT_NEAR(ph.stack.at(x + 2, y - 1, 3), still.stack.at(x, y, 3), 1e-9);
}

TEST(Phantom, MotionStaysInsideTheBoundsWithZeroMean) {
    PhantomSpec spec;
    spec.n_ave = 3;
    spec.motion.max_shift = 4.0;
    spec.motion.max_rotation_deg = 3.0;
    const auto ph = make_phantom(spec);
    Vec2 mean{};
    double mean_th = 0.0;
    for (const auto& t : ph.truth.transforms) {
        EXPECT_LE(std::abs(t.offset().x), 4.0 + 1e-12);
        EXPECT_LE(std::abs(t.offset().y), 4.0 + 1e-12);
        EXPECT_LE(std::abs(t.theta()) * 180.0 / std::numbers::pi, 3.0 + 1e-9);
        EXPECT_EQ(t.kind(), TransformKind::rigid);
        mean = mean + t.offset();
        mean_th += t.theta();
    }
    const double n = double(ph.truth.transforms.size());
    EXPECT_NEAR(mean.x / n, 0.0, 1e-12);
    EXPECT_NEAR(mean.y / n, 0.0, 1e-12);
    EXPECT_NEAR(mean_th / n, 0.0, 1e-12);
}

TEST(Phantom, BloodSignalFollowsTheMonoexponential) {
    PhantomSpec spec;
    spec.n_ave = 1;
    spec.background_blobs = false;
    spec.protocol = Protocol{{{0.0, std::nullopt}, {300.0, Vec3{0.0, 0.0, 1.0}}}};
    const auto ph = make_phantom(spec);
    const int x = 45, y = 48;  // half a pixel from the LV center
    EXPECT_NEAR(ph.stack.at(x, y, 1) / ph.stack.at(x, y, 0), std::exp(-0.9), 1e-12);
    EXPECT_NEAR(ph.stack.at(x, y, 0), spec.blood_s0 * spec.s0, 1e-9);
}

TEST(Phantom, NoiselessFitRecoversPrescribedEigenvalues) {
    PhantomSpec spec;
    spec.n_ave = 1;
    const auto ph = make_phantom(spec);
    const auto f = fit_stack(ph.stack, ph.annotations);
    int checked = 0;
    for (std::size_t i = 0; i < f.size(); ++i) {
        if (!ph.annotations.myo_mask[i]) continue;
        for (int k = 0; k < 3; ++k)
            ASSERT_NEAR(f.eig[i].values(k), spec.eigenvalues[std::size_t(k)], 1e-9 * spec.eigenvalues[0]);
        EXPECT_NEAR(f.s0[i], spec.s0, 1e-6);
        EXPECT_NEAR(std::abs(ha_difference(f.ha[i], ph.truth.ha_map[i])), 0.0, 1e-6);
        ++checked;
    }
    EXPECT_GT(checked, 900);
}

TEST(PhantomInvariants, RicianFloorMatchesTheory) {
    PhantomSpec spec;
    spec.n_ave = 4;
    spec.noise_sigma = 0.02;
    spec.background_blobs = false;
    const auto ph = make_phantom(spec);
    double sum = 0.0;
    std::size_t n = 0;
    for (int k = 0; k < ph.stack.frames(); ++k)
        for (int y = 0; y < spec.ny; ++y)
            for (int x = 0; x < spec.nx; ++x) {
                if (std::hypot(x - spec.center.x, y - spec.center.y) < spec.epi_radius + 4.0) continue;
                ASSERT_EQ(ph.truth.noiseless.at(x, y, k), 0.0);
                sum += ph.stack.at(x, y, k);
                ++n;
            }
    const double sigma = spec.noise_sigma * spec.s0;
    EXPECT_NEAR(sum / double(n), sigma * std::sqrt(std::numbers::pi / 2.0), 0.05 * sigma * std::sqrt(std::numbers::pi / 2.0));
}

TEST(Phantom, CorruptedFramesLoseMyocardialSignalOnly) {
    PhantomSpec spec;
    spec.n_ave = 2;
    spec.corrupted_frames = {5};
    spec.background_blobs = false;
    const auto ph = make_phantom(spec);
    ASSERT_EQ(ph.truth.corrupted, std::vector<int>{5});
    const int other = 4;  // same configuration, clean
    ASSERT_EQ(ph.stack.dwi_of(other), ph.stack.dwi_of(5));
    const int mx = int(spec.center.x + 17.0), my = int(spec.center.y);
    EXPECT_NEAR(ph.stack.at(mx, my, 5), spec.corruption_factor * ph.stack.at(mx, my, other), 1e-9);
    EXPECT_EQ(ph.stack.at(2, 2, 5), ph.stack.at(2, 2, other));
}

TEST(Phantom, RandomCorruptionUsesDistinctConfigurations) {
    PhantomSpec spec;
    spec.n_ave = 3;
    spec.n_corrupted = 8;
    const auto ph = make_phantom(spec);
    ASSERT_EQ(ph.truth.corrupted.size(), 8u);
    std::set<int> dwis;
    for (int k : ph.truth.corrupted) dwis.insert(ph.stack.dwi_of(k));
    EXPECT_EQ(dwis.size(), 8u);
}

TEST(Phantom, InvalidSpecsAreRejected) {
    PhantomSpec spec;
    spec.endo_radius = 30.0;
    EXPECT_THROW(make_phantom(spec), ValidationError);
    spec = PhantomSpec{};
    spec.corruption_factor = 1.0;
    EXPECT_THROW(make_phantom(spec), ValidationError);
    spec = PhantomSpec{};
    spec.corrupted_frames = {9 * 13};
    EXPECT_THROW(make_phantom(spec), ValidationError);
    spec = PhantomSpec{};
    spec.noise_sigma = -0.1;
    EXPECT_THROW(make_phantom(spec), ValidationError);
}

// ------------------------------------------------------------ truth comparison

TEST(TruthComparison, MotionFreeIdentityHasNoResidual) {
    PhantomSpec spec;
    spec.n_ave = 1;
    const auto ph = make_phantom(spec);
    const auto f = fit_stack(ph.stack, ph.annotations);
    const auto tc = compare_to_truth(as_set(ph.truth.transforms), keep_all_verdicts(ph.stack.frames()), f, ph.truth);
    EXPECT_LT(tc.max_residual_px(), 1e-6);
    EXPECT_LT(tc.max_residual_deg(), 1e-3);
    EXPECT_LT(tc.ha_mae_deg, 1e-6);
    EXPECT_EQ(tc.fp + tc.fn + tc.tp, 0);
}

TEST(TruthComparison, InverseTruthCancelsTheMotion) {
    PhantomSpec spec;
    spec.n_ave = 2;
    spec.motion.max_shift = 4.0;
    spec.motion.max_rotation_deg = 3.0;
    const auto ph = make_phantom(spec);
    std::vector<PlanarTransform> inv;
    for (const auto& t : ph.truth.transforms) inv.push_back(t.inverse());
    std::vector<double> px, deg;
    residual_motion(as_set(inv), ph.truth.transforms, ph.annotations.myo_mask, px, deg);
    for (std::size_t k = 0; k < px.size(); ++k) {
        EXPECT_LT(px[k], 1e-9);
        EXPECT_LT(deg[k], 1e-9);
    }
    // A common offset on every estimate is not residual motion.
    std::vector<PlanarTransform> shifted;
    for (const auto& t : inv) shifted.push_back(compose(PlanarTransform::translation(1.5, -0.5, t.center()), t));
    residual_motion(as_set(shifted), ph.truth.transforms, ph.annotations.myo_mask, px, deg);
    for (double v : px) EXPECT_LT(v, 1e-9);
    // Doing nothing leaves the true motion.
    residual_motion(as_set(std::vector<PlanarTransform>(inv.size(), PlanarTransform::identity(inv[0].center()))),
                    ph.truth.transforms, ph.annotations.myo_mask, px, deg);
    EXPECT_GT(*std::max_element(px.begin(), px.end()), 1.0);
}

TEST(TruthComparison, ExactSelectionHasNoFalseCalls) {
    PhantomSpec spec;
    spec.n_ave = 3;
    spec.noise_sigma = 0.03;
    spec.n_corrupted = 6;
    const auto ph = make_phantom(spec);
    const auto v = reject_outliers(frame_correlations(ph.stack, donut_roi(ph.annotations), Grouping::per_config));
    const auto f = fit_stack(ph.stack, ph.annotations);
    std::vector<PlanarTransform> id(ph.truth.transforms.size(), PlanarTransform::identity());
    const auto tc = compare_to_truth(as_set(id), v, f, ph.truth);
    EXPECT_EQ(tc.tp, 6);
    EXPECT_EQ(tc.fn, 0);
    EXPECT_EQ(tc.fp, 0);
    EXPECT_EQ(tc.sensitivity(), 1.0);
    EXPECT_EQ(tc.specificity(), 1.0);
}

TEST(TruthComparison, RigidCorrectionImprovesHelixAngles) {
    PhantomSpec spec;
    spec.n_ave = 3;
    spec.noise_sigma = 0.02;
    spec.motion.max_shift = 3.0;
    spec.motion.max_rotation_deg = 2.0;
    const auto ph = make_phantom(spec);
    RegisterConfig rc;
    const auto [reg, ts] = register_stack(ph.stack, rc);
    rc.engine = Engine::none;
    const auto [unreg, ts0] = register_stack(ph.stack, rc);
    const auto keep = keep_all_verdicts(ph.stack.frames());
    const auto corrected = compare_to_truth(ts, keep, fit_stack(reg, ph.annotations), ph.truth);
    const auto raw = compare_to_truth(ts0, keep, fit_stack(unreg, ph.annotations), ph.truth);
    EXPECT_LT(corrected.ha_mae_deg, raw.ha_mae_deg);
    EXPECT_LT(corrected.tensor_rmse, raw.tensor_rmse);
    EXPECT_LT(corrected.max_residual_px(), 0.5);
}

TEST(TruthIo, RoundTripKeepsTransformsAndLabels) {
    PhantomSpec spec;
    spec.n_ave = 2;
    spec.noise_sigma = 0.02;
    spec.motion.max_shift = 2.0;
    spec.motion.max_rotation_deg = 2.0;
    spec.n_corrupted = 2;
    const auto ph = make_phantom(spec);
    TempDir dir("phantom");
    const auto path = save_phantom(dir.path(), "p", ph);
    const auto t = load_truth(path);
    EXPECT_EQ(t.corrupted, ph.truth.corrupted);
    ASSERT_EQ(t.transforms.size(), ph.truth.transforms.size());
    for (std::size_t k = 0; k < t.transforms.size(); ++k) {
        EXPECT_EQ(t.transforms[k].kind(), ph.truth.transforms[k].kind());
        EXPECT_NEAR((t.transforms[k].matrix() - ph.truth.transforms[k].matrix()).norm(), 0.0, 1e-12);
        EXPECT_EQ(t.transforms[k].offset(), ph.truth.transforms[k].offset());
    }
    ImageStack noiseless = ph.truth.noiseless;
    round_to_float32(noiseless);
    EXPECT_EQ(t.noiseless, noiseless);
    EXPECT_EQ(t.annotations, ph.annotations);
    for (std::size_t i = 0; i < t.ha_map.size(); ++i) EXPECT_EQ(t.ha_map[i], double(float(ph.truth.ha_map[i])));
    io::write_text(dir / "bad_truth.json", "{\"dataset\": \"p.json\"}");
    EXPECT_THROW(load_truth(dir / "bad_truth.json"), ValidationError);
}
