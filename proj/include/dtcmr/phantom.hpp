#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <map>
#include <numbers>
#include <random>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include "dtcmr/common.hpp"
#include "dtcmr/dti.hpp"
#include "dtcmr/image.hpp"
#include "dtcmr/stack.hpp"
#include "dtcmr/transform.hpp"

namespace dtcmr {

/// Compact smooth bump: cos^2 falloff from 1 at the center to 0 at unit
/// normalized radius.
struct Blob {
    Vec2 center;
    double radius_x = 6.0, radius_y = 6.0;
    double amplitude = 0.5;      ///< relative to the myocardial S0
    double diffusivity = 1.0e-3; ///< isotropic, mm^2/s
};

struct MotionModel {
    double max_shift = 0.0;         ///< px, uniform per axis in [-max, max]
    double max_rotation_deg = 0.0;  ///< uniform in [-max, max]
    double max_scale = 0.0;         ///< affine: isotropic scale 1 + U[-max, max]
    double max_shear = 0.0;         ///< affine: off-diagonal U[-max, max]
    std::map<int, PlanarTransform> fixed;  ///< explicit per-frame transforms (override random draws)
    bool zero_mean = true;  ///< center the random draws so the anatomy frame is the mean frame position

    bool any() const {
        return max_shift > 0.0 || max_rotation_deg > 0.0 || max_scale > 0.0 || max_shear > 0.0 || !fixed.empty();
    }
};

struct PhantomSpec {
    int nx = 96, ny = 96;
    Vec2 center{45.5, 48.5};   ///< LV (blood-pool) center
    double endo_radius = 12.0;
    double epi_radius = 22.0;
    double edge_width = 1.0;   ///< px, raised-cosine falloff outside [endo, epi]
    double ha_endo_deg = 60.0;
    double ha_epi_deg = -60.0;
    std::array<double, 3> eigenvalues{1.5e-3, 0.8e-3, 0.4e-3};
    double s0 = 1000.0;
    double blood_s0 = 0.3;            ///< relative to s0
    double blood_diffusivity = 3.0e-3;
    Protocol protocol = Protocol::standard();
    int n_ave = 9;
    MotionModel motion;
    double noise_sigma = 0.0;         ///< Rician sigma relative to s0
    std::vector<int> corrupted_frames;
    int n_corrupted = 0;              ///< extra frames drawn at random, at most one per configuration
    double corruption_factor = 0.5;   ///< myocardial signal multiplier on corrupted frames
    bool background_blobs = true;
    bool chest_wall = false;
    std::vector<Blob> extra_blobs;
    double pixel_spacing_mm = 2.8;
    std::string sequence = "STEAM";
    std::uint64_t seed = 1;

    void validate() const {
        if (nx < 8 || ny < 8) throw ValidationError("phantom: grid too small");
        if (!(endo_radius > 0.0 && endo_radius < epi_radius && epi_radius < 0.5 * std::min(nx, ny)))
            throw ValidationError("phantom: need 0 < endo < epi < grid/2");
        if (!(corruption_factor >= 0.0 && corruption_factor < 1.0))
            throw ValidationError("phantom: corruption factor must lie in [0, 1)");
        if (n_ave < 1) throw ValidationError("phantom: n_ave must be >= 1");
        if (noise_sigma < 0.0) throw ValidationError("phantom: noise sigma must be >= 0");
        if (!(edge_width > 0.0)) throw ValidationError("phantom: edge width must be > 0");
        protocol.validate();
        const int frames = n_ave * int(protocol.size());
        for (int k : corrupted_frames)
            if (k < 0 || k >= frames) throw ValidationError("phantom: corrupted frame out of range");
        for (const auto& [k, t] : motion.fixed)
            if (k < 0 || k >= frames) throw ValidationError("phantom: motion override frame out of range");
    }
};

struct GroundTruth {
    ImageStack noiseless;
    std::vector<PlanarTransform> transforms;  ///< anatomy -> frame, per frame
    TensorField tensors;                      ///< true tensors on the myocardium mask
    Image ha_map;                             ///< degrees, 0 off the mask
    Annotations annotations;
    std::vector<int> corrupted;               ///< sorted frame indices
};

struct Phantom {
    ImageStack stack;
    Annotations annotations;
    GroundTruth truth;
};

namespace detail {

inline std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9E3779B97F4A7C15ull;
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
    x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
    return x ^ (x >> 31);
}

/// Independent generator per (seed, stream, index).
inline std::mt19937_64 stream_rng(std::uint64_t seed, std::uint64_t stream, std::uint64_t index) {
    return std::mt19937_64(splitmix64(splitmix64(seed ^ (stream * 0xD1B54A32D192ED03ull)) + index));
}

inline double uniform(std::mt19937_64& rng, double lo, double hi) {
    // Explicit 53-bit mapping so results do not depend on the library's distribution.
    const double u = double(rng() >> 11) * 0x1.0p-53;
    return lo + (hi - lo) * u;
}

inline double normal(std::mt19937_64& rng) {
    // Box-Muller; u1 in (0, 1].
    const double u1 = 1.0 - double(rng() >> 11) * 0x1.0p-53;
    const double u2 = double(rng() >> 11) * 0x1.0p-53;
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

inline double blob_weight(const Blob& b, double x, double y) {
    const double u = (x - b.center.x) / b.radius_x, v = (y - b.center.y) / b.radius_y;
    const double r = std::sqrt(u * u + v * v);
    if (r >= 1.0) return 0.0;
    const double c = std::cos(0.5 * std::numbers::pi * r);
    return c * c;
}

/// Raised-cosine ramp: 0 at edge - 1, 1 at edge (inner side rising outward when rising = true).
inline double taper(double dist_outside) {
    if (dist_outside <= 0.0) return 1.0;
    if (dist_outside >= 1.0) return 0.0;
    const double c = std::cos(0.5 * std::numbers::pi * dist_outside);
    return c * c;
}

}  // namespace detail

/// Tensor with e1 at helix angle `ha_deg` in the local (c, z) plane, e3 radial.
inline Sym3 prescribed_tensor(const PhantomSpec& spec, Vec2 pixel, double ha_deg) {
    const auto ax = CardiacFrame{spec.center}.axes_at(pixel);
    const double h = ha_deg * std::numbers::pi / 180.0;
    const Eigen::Vector3d e1 = std::cos(h) * ax.circumferential + std::sin(h) * ax.longitudinal;
    const Eigen::Vector3d e3 = ax.radial;
    const Eigen::Vector3d e2 = e3.cross(e1);
    const auto& l = spec.eigenvalues;
    const Eigen::Matrix3d d = l[0] * e1 * e1.transpose() + l[1] * e2 * e2.transpose() + l[2] * e3 * e3.transpose();
    return from_matrix(d);
}

inline double prescribed_ha(const PhantomSpec& spec, double r) {
    const double depth = std::clamp((r - spec.endo_radius) / (spec.epi_radius - spec.endo_radius), 0.0, 1.0);
    return spec.ha_endo_deg + (spec.ha_epi_deg - spec.ha_endo_deg) * depth;
}

inline std::vector<Blob> phantom_blobs(const PhantomSpec& spec) {
    std::vector<Blob> blobs;
    const double W = spec.nx, H = spec.ny;
    if (spec.background_blobs) {
        blobs.push_back({{0.17 * W, 0.80 * H}, 7.0, 5.0, 0.45, 1.0e-3});
        blobs.push_back({{0.84 * W, 0.78 * H}, 6.0, 8.0, 0.35, 1.2e-3});
        blobs.push_back({{0.20 * W, 0.16 * H}, 5.0, 5.0, 0.30, 0.9e-3});
    }
    if (spec.chest_wall) blobs.push_back({{0.70 * W, 0.12 * H}, 16.0, 6.0, 5.0, 0.6e-3});
    blobs.insert(blobs.end(), spec.extra_blobs.begin(), spec.extra_blobs.end());
    return blobs;
}

/// Synthetic short-axis LV slice with known tensors, motion, noise and
/// corrupted frames.
inline Phantom make_phantom(const PhantomSpec& spec) {
    spec.validate();
    const int nx = spec.nx, ny = spec.ny;
    const int ndwi = int(spec.protocol.size());
    const int frames = spec.n_ave * ndwi;
    const auto blobs = phantom_blobs(spec);

    Phantom ph;
    auto& truth = ph.truth;

    // Annotations and ground-truth tensors.
    Annotations ann{Mask(nx, ny), spec.center};
    truth.tensors = TensorField(nx, ny);
    truth.ha_map = Image(nx, ny);
    std::vector<double> w_myo(std::size_t(nx) * ny, 0.0), w_blood(std::size_t(nx) * ny, 0.0);
    std::vector<Sym3> d_myo(std::size_t(nx) * ny);
    for (int y = 0; y < ny; ++y)
        for (int x = 0; x < nx; ++x) {
            const std::size_t i = std::size_t(y) * nx + x;
            const double r = std::hypot(x - spec.center.x, y - spec.center.y);
            const bool in_myo = r >= spec.endo_radius && r <= spec.epi_radius;
            w_myo[i] = detail::taper(std::max(spec.endo_radius - r, r - spec.epi_radius) / spec.edge_width);
            w_blood[i] = r < spec.endo_radius ? 1.0 - w_myo[i] : 0.0;
            if (w_myo[i] > 0.0 && r > 0.0) {
                const double ha = prescribed_ha(spec, r);
                d_myo[i] = prescribed_tensor(spec, {double(x), double(y)}, ha);
                if (in_myo) {
                    ann.myo_mask[i] = 1;
                    truth.ha_map[i] = ha;
                    truth.tensors.s0[i] = spec.s0;
                    truth.tensors.d[i] = d_myo[i];
                    truth.tensors.eig[i] = eig3_sym(to_matrix(d_myo[i]));
                    truth.tensors.ha[i] = ha;
                    truth.tensors.flags[i] = kFitValid | kHaValid;
                }
            }
        }

    // Noiseless, motion-free images per DWI: myocardium and everything else.
    std::vector<Image> myo_part(std::size_t(ndwi), Image(nx, ny)), rest_part(std::size_t(ndwi), Image(nx, ny));
    for (int d = 0; d < ndwi; ++d) {
        const auto& cfg = spec.protocol[std::size_t(d)];
        for (int y = 0; y < ny; ++y)
            for (int x = 0; x < nx; ++x) {
                const std::size_t i = std::size_t(y) * nx + x;
                if (w_myo[i] > 0.0) myo_part[std::size_t(d)][i] = w_myo[i] * forward_signal(spec.s0, d_myo[i], cfg);
                double rest = w_blood[i] * spec.blood_s0 * spec.s0 * std::exp(-cfg.b * spec.blood_diffusivity);
                for (const auto& b : blobs) {
                    const double w = detail::blob_weight(b, x, y);
                    if (w > 0.0) rest += w * b.amplitude * spec.s0 * std::exp(-cfg.b * b.diffusivity);
                }
                rest_part[std::size_t(d)][i] = rest;
            }
    }

    // Corrupted frames: explicit list plus random draws in distinct configurations.
    std::vector<int> corrupted = spec.corrupted_frames;
    if (spec.n_corrupted > 0) {
        auto rng = detail::stream_rng(spec.seed, 3, 0);
        std::vector<int> dwis(static_cast<std::size_t>(ndwi));
        for (int d = 0; d < ndwi; ++d) dwis[std::size_t(d)] = d;
        for (int d = ndwi - 1; d > 0; --d) std::swap(dwis[std::size_t(d)], dwis[rng() % std::uint64_t(d + 1)]);
        for (int c = 0; c < spec.n_corrupted; ++c) {
            const int dwi = dwis[std::size_t(c % ndwi)];
            int k = 0;
            do {
                k = ImageStack::frame_index(int(rng() % std::uint64_t(spec.n_ave)), dwi, spec.n_ave);
            } while (std::find(corrupted.begin(), corrupted.end(), k) != corrupted.end());
            corrupted.push_back(k);
        }
    }
    std::sort(corrupted.begin(), corrupted.end());
    corrupted.erase(std::unique(corrupted.begin(), corrupted.end()), corrupted.end());

    // Per-frame motion.
    const Vec2 img_center{(nx - 1) / 2.0, (ny - 1) / 2.0};
    truth.transforms.resize(std::size_t(frames));
    const auto& m = spec.motion;
    std::vector<int> drawn;
    std::array<std::vector<double>, 5> par;  // tx, ty, theta, scale, shear
    const std::array<double, 5> bound{m.max_shift, m.max_shift, m.max_rotation_deg * std::numbers::pi / 180.0,
                                      m.max_scale, m.max_shear};
    for (int k = 0; k < frames; ++k) {
        auto it = m.fixed.find(k);
        if (it != m.fixed.end()) {
            truth.transforms[std::size_t(k)] = it->second;
            continue;
        }
        drawn.push_back(k);
        auto rng = detail::stream_rng(spec.seed, 1, std::uint64_t(k));
        for (std::size_t j = 0; j < 5; ++j) par[j].push_back(detail::uniform(rng, -bound[j], bound[j]));
    }
    if (m.zero_mean && !drawn.empty()) {
        // Remove the mean, then shrink the deviations back inside the bound.
        for (std::size_t j = 0; j < 5; ++j) {
            double mean = 0.0;
            for (double v : par[j]) mean += v;
            mean /= double(par[j].size());
            double peak = 0.0;
            for (double& v : par[j]) peak = std::max(peak, std::abs(v -= mean));
            if (peak > bound[j])
                for (double& v : par[j]) v *= bound[j] / peak;
        }
    }
    for (std::size_t i = 0; i < drawn.size(); ++i) {
        const double tx = par[0][i], ty = par[1][i], th = par[2][i], sc = par[3][i], sh = par[4][i];
        auto& out = truth.transforms[std::size_t(drawn[i])];
        if (m.max_scale > 0.0 || m.max_shear > 0.0) {
            Eigen::Matrix2d rot;
            rot << std::cos(th), -std::sin(th), std::sin(th), std::cos(th);
            Eigen::Matrix2d a;
            a << 1.0 + sc, sh, 0.0, 1.0 + sc;
            out = PlanarTransform::affine(rot * a, tx, ty, img_center);
        } else if (m.max_rotation_deg > 0.0) {
            out = PlanarTransform::rigid(th, tx, ty, img_center);
        } else {
            out = PlanarTransform::translation(tx, ty, img_center);
        }
    }

    ImageStack noiseless(nx, ny, spec.n_ave, ndwi, spec.protocol, spec.pixel_spacing_mm);
    noiseless.set_sequence(spec.sequence);
    ImageStack noisy = noiseless.blank_like();
    const double sigma = spec.noise_sigma * spec.s0;
    for (int k = 0; k < frames; ++k) {
        const int d = k / spec.n_ave;
        const bool bad = std::binary_search(corrupted.begin(), corrupted.end(), k);
        Image img(nx, ny);
        for (std::size_t i = 0; i < img.size(); ++i)
            img[i] = (bad ? spec.corruption_factor : 1.0) * myo_part[std::size_t(d)][i] + rest_part[std::size_t(d)][i];
        const auto& t = truth.transforms[std::size_t(k)];
        const bool moved = t.offset() != Vec2{} || !t.matrix().isIdentity(0.0);
        if (moved) img = apply_transform(img, t);
        noiseless.set_frame(k, img);
        if (sigma > 0.0) {
            auto rng = detail::stream_rng(spec.seed, 2, std::uint64_t(k));
            for (std::size_t i = 0; i < img.size(); ++i) {
                const double re = img[i] + sigma * detail::normal(rng);
                const double im = sigma * detail::normal(rng);
                img[i] = std::hypot(re, im);
            }
        }
        noisy.set_frame(k, img);
    }

    truth.noiseless = std::move(noiseless);
    truth.annotations = ann;
    truth.corrupted = corrupted;
    ph.stack = std::move(noisy);
    ph.annotations = std::move(ann);
    return ph;
}

// ------------------------------------------------------------ truth files

inline nlohmann::json transform_to_json(const PlanarTransform& t) {
    const auto& a = t.matrix();
    return {{"kind", to_string(t.kind())},
            {"tx", t.offset().x},
            {"ty", t.offset().y},
            {"a", {a(0, 0), a(0, 1), a(1, 0), a(1, 1)}},
            {"center", {t.center().x, t.center().y}}};
}

inline PlanarTransform transform_from_json(const nlohmann::json& j) {
    const auto kind = transform_kind_from_string(j.at("kind").get<std::string>());
    const auto a = j.at("a").get<std::vector<double>>();
    const auto c = j.at("center").get<std::vector<double>>();
    const double tx = j.at("tx").get<double>(), ty = j.at("ty").get<double>();
    if (kind == TransformKind::translation) return PlanarTransform::translation(tx, ty, {c[0], c[1]});
    Eigen::Matrix2d m;
    m << a[0], a[1], a[2], a[3];
    if (kind == TransformKind::rigid) return PlanarTransform::rigid(std::atan2(m(1, 0), m(0, 0)), tx, ty, {c[0], c[1]});
    return PlanarTransform::affine(m, tx, ty, {c[0], c[1]});
}

/// Dataset manifest `<name>.json` plus `<name>_truth.json`, the noiseless
/// stack and the true tensor field. Returns the truth manifest path.
inline std::filesystem::path save_phantom(const std::filesystem::path& dir, const std::string& name,
                                          const Phantom& ph) {
    save_dataset(dir, name, ph.stack, ph.annotations);
    io::write_f32(dir / (name + "_noiseless.bin"), ph.truth.noiseless.data());
    save_tensor_field(dir / (name + "_truth_tensor.bin"), ph.truth.tensors);
    nlohmann::json j;
    j["dataset"] = name + ".json";
    j["noiseless_file"] = name + "_noiseless.bin";
    j["tensor_file"] = name + "_truth_tensor.bin";
    j["corrupted"] = ph.truth.corrupted;
    auto tr = nlohmann::json::array();
    for (const auto& t : ph.truth.transforms) tr.push_back(transform_to_json(t));
    j["transforms"] = tr;
    const auto path = dir / (name + "_truth.json");
    io::write_text(path, j.dump(2) + "\n");
    return path;
}

inline GroundTruth load_truth(const std::filesystem::path& truth_path) {
    nlohmann::json j;
    try {
        std::ifstream f(truth_path);
        if (!f) throw ValidationError("missing file: " + truth_path.string());
        j = nlohmann::json::parse(f);
    } catch (const nlohmann::json::exception& e) {
        throw ValidationError("malformed truth manifest: " + std::string(e.what()));
    }
    const auto base = truth_path.parent_path();
    GroundTruth t;
    try {
        auto ds = load_dataset(base / j.at("dataset").get<std::string>());
        t.noiseless = ds.stack.blank_like();
        const auto v = io::read_f32(base / j.at("noiseless_file").get<std::string>(), t.noiseless.data().size());
        std::copy(v.begin(), v.end(), t.noiseless.data().begin());
        t.tensors = load_tensor_field(base / j.at("tensor_file").get<std::string>(), ds.stack.nx(), ds.stack.ny());
        t.ha_map = t.tensors.ha_image();
        t.annotations = ds.annotations;
        t.corrupted = j.at("corrupted").get<std::vector<int>>();
        std::sort(t.corrupted.begin(), t.corrupted.end());
        for (const auto& tj : j.at("transforms")) t.transforms.push_back(transform_from_json(tj));
    } catch (const nlohmann::json::exception& e) {
        throw ValidationError("malformed truth manifest: " + std::string(e.what()));
    }
    if (int(t.transforms.size()) != t.noiseless.frames())
        throw ValidationError("truth manifest: transform count does not match the stack");
    return t;
}

}  // namespace dtcmr
