#pragma once

#include <complex>
#include <fstream>
#include <numbers>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <unsupported/Eigen/FFT>

#include "dtcmr/common.hpp"
#include "dtcmr/image.hpp"
#include "dtcmr/lowrank.hpp"
#include "dtcmr/stack.hpp"
#include "dtcmr/transform.hpp"

namespace dtcmr {

struct RegistrationResult {
    PlanarTransform transform;
    double metric = 0.0;  ///< final similarity (normalized cross-correlation)
    int iterations = 0;
    bool converged = true;
};

// ============================================================ DFT subpixel

namespace detail {

using CMatrix = Eigen::Matrix<std::complex<double>, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// 2-D forward FFT of a real image; result is ny x nx.
inline CMatrix fft2(const Image& img) {
    Eigen::FFT<double> fft;
    CMatrix out(img.ny(), img.nx());
    std::vector<std::complex<double>> in_row(std::size_t(img.nx())), out_row;
    for (int y = 0; y < img.ny(); ++y) {
        for (int x = 0; x < img.nx(); ++x) in_row[std::size_t(x)] = img(x, y);
        fft.fwd(out_row, in_row);
        for (int x = 0; x < img.nx(); ++x) out(y, x) = out_row[std::size_t(x)];
    }
    std::vector<std::complex<double>> in_col(std::size_t(img.ny())), out_col;
    for (int x = 0; x < img.nx(); ++x) {
        for (int y = 0; y < img.ny(); ++y) in_col[std::size_t(y)] = out(y, x);
        fft.fwd(out_col, in_col);
        for (int y = 0; y < img.ny(); ++y) out(y, x) = out_col[std::size_t(y)];
    }
    return out;
}

inline CMatrix ifft2(const CMatrix& spec) {
    Eigen::FFT<double> fft;
    CMatrix out = spec;
    std::vector<std::complex<double>> buf, res;
    for (Eigen::Index y = 0; y < out.rows(); ++y) {
        buf.assign(out.row(y).data(), out.row(y).data() + out.cols());
        fft.inv(res, buf);
        for (Eigen::Index x = 0; x < out.cols(); ++x) out(y, x) = res[std::size_t(x)];
    }
    buf.resize(std::size_t(out.rows()));
    for (Eigen::Index x = 0; x < out.cols(); ++x) {
        for (Eigen::Index y = 0; y < out.rows(); ++y) buf[std::size_t(y)] = out(y, x);
        fft.inv(res, buf);
        for (Eigen::Index y = 0; y < out.rows(); ++y) out(y, x) = res[std::size_t(y)];
    }
    return out;
}

/// Signed frequency index of FFT bin k for length n.
inline double signed_freq(Eigen::Index k, Eigen::Index n) { return double(k > (n - 1) / 2 ? k - n : k); }

}  // namespace detail

/// Translation mapping `moving` onto `reference`: integer peak of the FFT
/// cross-correlation, refined to 1/upsample px by a matrix-multiply DFT over
/// a 1.5 px neighbourhood.
inline RegistrationResult dft_register(const Image& reference, const Image& moving, int upsample = 100) {
    using detail::CMatrix;
    if (reference.nx() != moving.nx() || reference.ny() != moving.ny())
        throw ValidationError("dft_register: image shapes differ");
    if (upsample < 1) throw ValidationError("dft_register: upsample must be >= 1");
    double e_ref = 0.0, e_mov = 0.0;
    for (std::size_t i = 0; i < reference.size(); ++i) {
        e_ref += reference[i] * reference[i];
        e_mov += moving[i] * moving[i];
    }
    if (e_ref == 0.0 || e_mov == 0.0) throw ComputeError("dft_register: all-zero image, correlation undefined");

    const Eigen::Index nx = reference.nx(), ny = reference.ny();
    const CMatrix product = detail::fft2(reference).cwiseProduct(detail::fft2(moving).conjugate());
    const CMatrix cc = detail::ifft2(product);

    Eigen::Index px = 0, py = 0;
    double best = -1.0;
    for (Eigen::Index y = 0; y < ny; ++y)
        for (Eigen::Index x = 0; x < nx; ++x)
            if (std::abs(cc(y, x)) > best) {
                best = std::abs(cc(y, x));
                px = x;
                py = y;
            }
    double sx = detail::signed_freq(px, nx);
    double sy = detail::signed_freq(py, ny);
    double peak = best;

    if (upsample > 1) {
        sx = std::round(sx * upsample) / upsample;
        sy = std::round(sy * upsample) / upsample;
        const Eigen::Index region = Eigen::Index(std::ceil(upsample * 1.5));
        const double dftshift = std::floor(double(region) / 2.0);
        const std::complex<double> i2pi(0.0, 2.0 * std::numbers::pi);

        // cc(s) = sum_k P(k) exp(+2 pi i k s / N), separable in x and y.
        CMatrix kx(nx, region), ky(region, ny);
        for (Eigen::Index u = 0; u < region; ++u) {
            const double s = sx + (double(u) - dftshift) / upsample;
            for (Eigen::Index k = 0; k < nx; ++k) kx(k, u) = std::exp(i2pi * detail::signed_freq(k, nx) * s / double(nx));
        }
        for (Eigen::Index v = 0; v < region; ++v) {
            const double s = sy + (double(v) - dftshift) / upsample;
            for (Eigen::Index k = 0; k < ny; ++k) ky(v, k) = std::exp(i2pi * detail::signed_freq(k, ny) * s / double(ny));
        }
        const CMatrix up = ky * product * kx;
        Eigen::Index bu = 0, bv = 0;
        double bup = -1.0;
        for (Eigen::Index v = 0; v < region; ++v)
            for (Eigen::Index u = 0; u < region; ++u)
                if (std::abs(up(v, u)) > bup) {
                    bup = std::abs(up(v, u));
                    bu = u;
                    bv = v;
                }
        sx += (double(bu) - dftshift) / upsample;
        sy += (double(bv) - dftshift) / upsample;
        peak = bup / double(nx * ny);
    }

    RegistrationResult r;
    r.transform = PlanarTransform::translation(sx, sy, reference.center());
    r.metric = peak / std::sqrt(e_ref * e_mov);
    r.iterations = 1;
    return r;
}

// ============================================================ NCC optimizer

struct OptimizerOptions {
    int pyramid_levels = 3;
    int max_iterations = 200;       ///< per pyramid level
    double initial_step = 1.0;      ///< px (rotation/affine terms scaled by half the image size)
    double min_step = 1e-4;         ///< convergence threshold on the finest level
    double coarse_min_step = 1e-2;  ///< convergence threshold on coarser levels
    /// Match gradient-magnitude images instead of intensities. Edges then
    /// dominate the metric, so smooth diffusion-contrast ramps inside the
    /// myocardium no longer bias the estimate.
    bool edge_metric = true;
};

namespace detail {

/// Separable Gaussian blur (sigma 1 px, radius 3), edges clamped.
inline Image gaussian_blur(const Image& img) {
    constexpr int radius = 3;
    double k[2 * radius + 1];
    double norm = 0.0;
    for (int i = -radius; i <= radius; ++i) norm += k[i + radius] = std::exp(-0.5 * i * i);
    for (double& v : k) v /= norm;
    Image tmp(img.nx(), img.ny()), out(img.nx(), img.ny());
    for (int y = 0; y < img.ny(); ++y)
        for (int x = 0; x < img.nx(); ++x) {
            double acc = 0.0;
            for (int i = -radius; i <= radius; ++i) acc += k[i + radius] * img(std::clamp(x + i, 0, img.nx() - 1), y);
            tmp(x, y) = acc;
        }
    for (int y = 0; y < img.ny(); ++y)
        for (int x = 0; x < img.nx(); ++x) {
            double acc = 0.0;
            for (int i = -radius; i <= radius; ++i) acc += k[i + radius] * tmp(x, std::clamp(y + i, 0, img.ny() - 1));
            out(x, y) = acc;
        }
    return out;
}

/// Gaussian smoothing then 2x2 block decimation: coarse pixel x sits at fine 2x + 0.5.
inline Image downsample2(const Image& img) {
    const Image s = gaussian_blur(img);
    const int nx = img.nx() / 2, ny = img.ny() / 2;
    Image out(nx, ny);
    for (int y = 0; y < ny; ++y)
        for (int x = 0; x < nx; ++x)
            out(x, y) = 0.25 * (s(2 * x, 2 * y) + s(2 * x + 1, 2 * y) + s(2 * x, 2 * y + 1) + s(2 * x + 1, 2 * y + 1));
    return out;
}

inline std::pair<Image, Image> gradient(const Image& img) {
    Image gx(img.nx(), img.ny()), gy(img.nx(), img.ny());
    for (int y = 0; y < img.ny(); ++y)
        for (int x = 0; x < img.nx(); ++x) {
            const int xm = std::max(x - 1, 0), xp = std::min(x + 1, img.nx() - 1);
            const int ym = std::max(y - 1, 0), yp = std::min(y + 1, img.ny() - 1);
            gx(x, y) = (xp > xm) ? (img(xp, y) - img(xm, y)) / double(xp - xm) : 0.0;
            gy(x, y) = (yp > ym) ? (img(x, yp) - img(x, ym)) / double(yp - ym) : 0.0;
        }
    return {std::move(gx), std::move(gy)};
}

/// Gradient magnitude of the sigma-1 smoothed image.
inline Image edge_map(const Image& img) {
    const auto [gx, gy] = gradient(gaussian_blur(img));
    Image out(img.nx(), img.ny());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::hypot(gx[i], gy[i]);
    return out;
}

/// Sampling map W(p) = B (p - c) + c + s applied to the moving image.
/// Rigid: B = R(phi). Affine: B = I + M.
struct WarpParams {
    TransformKind kind = TransformKind::rigid;
    double sx = 0.0, sy = 0.0;
    double phi = 0.0;
    Eigen::Matrix2d m = Eigen::Matrix2d::Zero();

    int size() const { return kind == TransformKind::rigid ? 3 : 6; }

    Eigen::Matrix2d linear() const {
        if (kind == TransformKind::rigid) {
            Eigen::Matrix2d r;
            r << std::cos(phi), -std::sin(phi), std::sin(phi), std::cos(phi);
            return r;
        }
        return Eigen::Matrix2d::Identity() + m;
    }

    /// Scaled parameter vector: translations in px, linear terms times `radius`.
    Eigen::VectorXd to_vector(double radius) const {
        Eigen::VectorXd q(size());
        q(0) = sx;
        q(1) = sy;
        if (kind == TransformKind::rigid) {
            q(2) = phi * radius;
        } else {
            q(2) = m(0, 0) * radius;
            q(3) = m(0, 1) * radius;
            q(4) = m(1, 0) * radius;
            q(5) = m(1, 1) * radius;
        }
        return q;
    }

    static WarpParams from_vector(TransformKind kind, const Eigen::VectorXd& q, double radius) {
        WarpParams w;
        w.kind = kind;
        w.sx = q(0);
        w.sy = q(1);
        if (kind == TransformKind::rigid) {
            w.phi = q(2) / radius;
        } else {
            w.m << q(2) / radius, q(3) / radius, q(4) / radius, q(5) / radius;
        }
        return w;
    }
};

struct Level {
    Image ref, mov, gx, gy;
    Vec2 center;
    std::vector<double> ref_centered;
    double ref_norm = 0.0;
    double radius = 1.0;
};

/// Gauss-Newton system for matching the normalized moving samples to the
/// normalized reference: h = Jc^T Jc, b = Jc^T (lambda a - m_c).
struct GnSystem {
    Eigen::MatrixXd h;
    Eigen::VectorXd b;
};

/// NCC and its gradient with respect to the scaled parameter vector;
/// optionally the Gauss-Newton system used to precondition the ascent.
inline double ncc_and_gradient(const Level& lv, const WarpParams& w, Eigen::VectorXd* grad, GnSystem* gn = nullptr) {
    const int np = w.size();
    const Eigen::Matrix2d b = w.linear();
    Eigen::Matrix2d db = Eigen::Matrix2d::Zero();  // dB/dphi for rigid
    if (w.kind == TransformKind::rigid) db << -std::sin(w.phi), -std::cos(w.phi), std::cos(w.phi), -std::sin(w.phi);
    const bool need_jac = grad || gn;

    const std::size_t n = lv.ref.size();
    double sum_m = 0.0, sum_mm = 0.0, sum_am = 0.0;
    Eigen::VectorXd sum_aj = Eigen::VectorXd::Zero(np), sum_mj = Eigen::VectorXd::Zero(np),
                    sum_j = Eigen::VectorXd::Zero(np);
    Eigen::MatrixXd sum_jj = Eigen::MatrixXd::Zero(np, np);
    Eigen::VectorXd jac(np);
    std::size_t i = 0;
    for (int y = 0; y < lv.ref.ny(); ++y) {
        for (int x = 0; x < lv.ref.nx(); ++x, ++i) {
            const double dx = x - lv.center.x, dy = y - lv.center.y;
            const double wx = b(0, 0) * dx + b(0, 1) * dy + lv.center.x + w.sx;
            const double wy = b(1, 0) * dx + b(1, 1) * dy + lv.center.y + w.sy;
            const double m = sample_bilinear(lv.mov, wx, wy);
            const double a = lv.ref_centered[i];
            sum_m += m;
            sum_mm += m * m;
            sum_am += a * m;
            if (!need_jac) continue;
            const double gx = sample_bilinear(lv.gx, wx, wy);
            const double gy = sample_bilinear(lv.gy, wx, wy);
            jac(0) = gx;
            jac(1) = gy;
            if (w.kind == TransformKind::rigid) {
                jac(2) = (gx * (db(0, 0) * dx + db(0, 1) * dy) + gy * (db(1, 0) * dx + db(1, 1) * dy)) / lv.radius;
            } else {
                jac(2) = gx * dx / lv.radius;
                jac(3) = gx * dy / lv.radius;
                jac(4) = gy * dx / lv.radius;
                jac(5) = gy * dy / lv.radius;
            }
            sum_aj += a * jac;
            sum_mj += m * jac;
            sum_j += jac;
            if (gn) sum_jj.selfadjointView<Eigen::Lower>().rankUpdate(jac);
        }
    }
    const double mean_m = sum_m / double(n);
    const double bb = sum_mm - double(n) * mean_m * mean_m;
    if (bb <= 0.0 || lv.ref_norm == 0.0) {
        if (grad) grad->setZero(np);
        if (gn) {
            gn->h = Eigen::MatrixXd::Identity(np, np);
            gn->b = Eigen::VectorXd::Zero(np);
        }
        return -1.0;
    }
    const double bnorm = std::sqrt(bb);
    const double ab = sum_am;  // sum a = 0, so sum a (m - mean) = sum a m
    const double ncc = ab / (lv.ref_norm * bnorm);
    const Eigen::VectorXd mj_c = sum_mj - mean_m * sum_j;  // sum (m - mean) jac
    if (grad) {
        const double c = ab / (lv.ref_norm * bnorm * bb);
        *grad = sum_aj / (lv.ref_norm * bnorm) - c * mj_c;
    }
    if (gn) {
        gn->h = sum_jj.selfadjointView<Eigen::Lower>();
        gn->h -= sum_j * sum_j.transpose() / double(n);
        const double lambda = bnorm / lv.ref_norm;
        gn->b = lambda * sum_aj - mj_c;
    }
    return ncc;
}

inline bool admissible(const WarpParams& w) {
    if (w.kind != TransformKind::affine) return true;
    const double det = w.linear().determinant();
    return det > 0.5 && det < 2.0;
}

}  // namespace detail

/// Rigid or affine registration maximizing normalized cross-correlation
/// (of gradient magnitudes when opts.edge_metric is set),
/// coarse-to-fine over a x2 pyramid, by regular-step gradient ascent.
/// `init` (moving -> reference) seeds the search.
inline RegistrationResult optimize_transform(const Image& reference, const Image& moving, TransformKind kind,
                                             const OptimizerOptions& opts = {},
                                             const std::optional<PlanarTransform>& init = std::nullopt) {
    if (kind == TransformKind::translation) throw ValidationError("optimize_transform: kind must be rigid or affine");
    if (reference.nx() != moving.nx() || reference.ny() != moving.ny())
        throw ValidationError("optimize_transform: image shapes differ");
    if (opts.pyramid_levels < 1 || opts.max_iterations < 1) throw ValidationError("optimize_transform: bad options");

    // Pyramid, finest first.
    std::vector<detail::Level> levels;
    {
        Image r = opts.edge_metric ? detail::edge_map(reference) : reference;
        Image m = opts.edge_metric ? detail::edge_map(moving) : moving;
        Vec2 c = reference.center();
        for (int l = 0; l < opts.pyramid_levels; ++l) {
            if (l > 0) {
                if (r.nx() < 16 || r.ny() < 16) break;
                r = detail::downsample2(r);
                m = detail::downsample2(m);
                c = {(c.x - 0.5) / 2.0, (c.y - 0.5) / 2.0};
            }
            detail::Level lv;
            lv.ref = r;
            lv.mov = m;
            std::tie(lv.gx, lv.gy) = detail::gradient(m);
            lv.center = c;
            lv.radius = 0.5 * std::max(r.nx(), r.ny());
            double mean = 0.0;
            for (double v : r.pixels()) mean += v;
            mean /= double(r.size());
            lv.ref_centered.resize(r.size());
            double ss = 0.0;
            for (std::size_t i = 0; i < r.size(); ++i) {
                lv.ref_centered[i] = r[i] - mean;
                ss += lv.ref_centered[i] * lv.ref_centered[i];
            }
            lv.ref_norm = std::sqrt(ss);
            levels.push_back(std::move(lv));
        }
    }
    if (levels.front().ref_norm == 0.0) throw ComputeError("optimize_transform: constant reference image");

    // Initial sampling map W = T^-1, in finest-level units.
    const Vec2 c0 = reference.center();
    detail::WarpParams w;
    w.kind = kind;
    if (init) {
        const PlanarTransform winv = init->recentered(c0).inverse();
        w.sx = winv.offset().x;
        w.sy = winv.offset().y;
        if (kind == TransformKind::rigid)
            w.phi = winv.theta();
        else
            w.m = winv.matrix() - Eigen::Matrix2d::Identity();
    }
    const double scale0 = std::pow(2.0, double(levels.size() - 1));
    w.sx /= scale0;
    w.sy /= scale0;

    RegistrationResult result;
    bool converged_fine = false;
    double metric = -1.0;
    for (int l = int(levels.size()) - 1; l >= 0; --l) {
        const auto& lv = levels[std::size_t(l)];
        const double min_step = (l == 0) ? opts.min_step : opts.coarse_min_step;
        Eigen::VectorXd q = w.to_vector(lv.radius);
        detail::GnSystem gn;
        double f = detail::ncc_and_gradient(lv, w, nullptr, &gn);
        double step = opts.initial_step;
        bool converged = false;
        int it = 0;
        for (; it < opts.max_iterations; ++it) {
            // Ascent direction: gradient preconditioned by the Gauss-Newton
            // matrix, capped at `step` in scaled parameter units.
            Eigen::VectorXd dir = gn.h.ldlt().solve(gn.b);
            if (!dir.allFinite()) dir = gn.b;
            const double len = dir.norm();
            if (len == 0.0) {
                converged = true;
                break;
            }
            const double taken = std::min(step, len);
            if (taken < min_step) {
                converged = true;
                break;
            }
            const Eigen::VectorXd q_new = q + (taken / len) * dir;
            const auto w_new = detail::WarpParams::from_vector(kind, q_new, lv.radius);
            detail::GnSystem gn_new;
            const double f_new = detail::admissible(w_new) ? detail::ncc_and_gradient(lv, w_new, nullptr, &gn_new) : -2.0;
            if (f_new > f) {
                q = q_new;
                w = w_new;
                f = f_new;
                gn = std::move(gn_new);
            } else {
                step = 0.5 * taken;  // halve on metric decrease
            }
        }
        result.iterations += it + 1;
        metric = f;
        if (l == 0) converged_fine = converged;
        if (l > 0) {
            w.sx *= 2.0;
            w.sy *= 2.0;
        }
    }

    const detail::WarpParams& wf = w;
    const Eigen::Matrix2d b = wf.linear();
    PlanarTransform warp = (kind == TransformKind::rigid)
                               ? PlanarTransform::rigid(wf.phi, wf.sx, wf.sy, c0)
                               : PlanarTransform::affine(b, wf.sx, wf.sy, c0);
    result.transform = warp.inverse();
    result.metric = metric;
    result.converged = converged_fine;
    if (!converged_fine) log::warn("optimize_transform: iteration cap reached, returning best-so-far");
    return result;
}

// ============================================================ stack driver

enum class Engine { none, dft, rigid, affine };

inline std::string to_string(Engine e) {
    switch (e) {
        case Engine::none: return "none";
        case Engine::dft: return "dft";
        case Engine::rigid: return "rigid";
        case Engine::affine: return "affine";
    }
    return "?";
}

inline Engine engine_from_string(const std::string& s) {
    if (s == "none") return Engine::none;
    if (s == "dft") return Engine::dft;
    if (s == "rigid") return Engine::rigid;
    if (s == "affine") return Engine::affine;
    throw ValidationError("unknown engine: " + s);
}

/// Where the registration target and the frames it is matched against come from.
enum class ReferenceMode {
    lowrank,    ///< rank-1 geometric-average reference, rank-L denoised moving frames
    brightest,  ///< brightest original frame as reference, original moving frames
};

inline std::string to_string(ReferenceMode m) { return m == ReferenceMode::lowrank ? "lowrank" : "brightest"; }

inline ReferenceMode reference_mode_from_string(const std::string& s) {
    if (s == "lowrank") return ReferenceMode::lowrank;
    if (s == "brightest") return ReferenceMode::brightest;
    throw ValidationError("unknown reference mode: " + s);
}

struct RegisterConfig {
    Engine engine = Engine::rigid;
    ReferenceMode reference = ReferenceMode::lowrank;
    int rank = 6;
    int reference_rank = 1;
    int upsample = 100;
    int passes = 2;       ///< low-rank mode: total estimation passes (later passes work on the corrected stack)
    int refine_rank = 20; ///< rank of the moving frames in refinement passes
    bool anchor_mean = true; ///< express the output in the mean frame position
    OptimizerOptions optimizer;
    unsigned threads = 1;
};

/// One transform plus its metric trace per frame.
struct TransformSet {
    std::vector<RegistrationResult> frames;

    std::size_t size() const { return frames.size(); }
    const PlanarTransform& operator[](std::size_t k) const { return frames[k].transform; }
};

/// Index of the frame with the largest summed signal (first on ties).
inline int brightest_frame(const ImageStack& stack) {
    int best = 0;
    double best_sum = -std::numeric_limits<double>::infinity();
    for (int k = 0; k < stack.frames(); ++k) {
        double s = 0.0;
        for (double v : stack.frame_span(k)) s += v;
        if (s > best_sum) {
            best_sum = s;
            best = k;
        }
    }
    return best;
}

/// Registration target plus the frames matched against it.
struct RegistrationInputs {
    Image reference;
    std::optional<ImageStack> denoised;  ///< rank-L moving frames; empty means the original frames

    Image moving_frame(const ImageStack& original, int k) const {
        return denoised ? denoised->frame(k) : original.frame(k);
    }
};

/// `rank` overrides cfg.rank for the moving frames (used by refinement passes).
inline RegistrationInputs make_registration_inputs(const ImageStack& stack, const RegisterConfig& cfg,
                                                   std::optional<int> rank = std::nullopt) {
    RegistrationInputs in;
    if (cfg.reference == ReferenceMode::lowrank) {
        in.reference = lowrank_reference(stack, cfg.reference_rank);
        const int r = rank.value_or(cfg.rank);
        if (r < std::min(stack.frames(), stack.nx() * stack.ny())) in.denoised = reconstruct_rank(stack, r);
    } else {
        in.reference = stack.frame(brightest_frame(stack));
    }
    return in;
}

inline RegistrationResult estimate_frame(const Image& reference, const Image& moving, Engine engine,
                                         const RegisterConfig& cfg) {
    switch (engine) {
        case Engine::dft: return dft_register(reference, moving, cfg.upsample);
        case Engine::rigid: return optimize_transform(reference, moving, TransformKind::rigid, cfg.optimizer);
        case Engine::affine: return optimize_transform(reference, moving, TransformKind::affine, cfg.optimizer);
        case Engine::none: break;
    }
    RegistrationResult r;
    r.transform = PlanarTransform::identity(reference.center());
    return r;
}

namespace detail {

inline TransformSet estimate_all(const ImageStack& stack, const RegistrationInputs& in, const RegisterConfig& cfg) {
    TransformSet ts;
    ts.frames.resize(std::size_t(stack.frames()));
    parallel_for(std::size_t(stack.frames()), cfg.threads, [&](std::size_t k) {
        ts.frames[k] = estimate_frame(in.reference, in.moving_frame(stack, int(k)), cfg.engine, cfg);
    });
    return ts;
}

inline ImageStack resample_stack(const ImageStack& stack, const TransformSet& ts, unsigned threads) {
    ImageStack out = stack.blank_like();
    parallel_for(std::size_t(stack.frames()), threads, [&](std::size_t k) {
        out.set_frame(int(k), apply_transform(stack.frame(int(k)), ts[k]));
    });
    return out;
}

}  // namespace detail

/// Estimate one transform per frame from prepared inputs, then resample the
/// ORIGINAL frames. In low-rank mode the estimate is refined: the reference
/// is rebuilt from the corrected stack and matched against higher-rank
/// frames, since rank-L frames of a moving stack keep part of the motion
/// averaged across frames. Increments are composed onto the estimate.
namespace detail {

/// Element-wise mean of the transforms (angle mean for rigid), about the first center.
inline PlanarTransform mean_transform(const TransformSet& ts) {
    const Vec2 c = ts[0].center();
    Eigen::Matrix2d a = Eigen::Matrix2d::Zero();
    double tx = 0.0, ty = 0.0, theta = 0.0;
    TransformKind kind = TransformKind::translation;
    for (std::size_t k = 0; k < ts.size(); ++k) {
        const PlanarTransform t = ts[k].recentered(c);
        a += t.matrix();
        tx += t.offset().x;
        ty += t.offset().y;
        theta += t.theta();
        kind = std::max(kind, t.kind());
    }
    const double n = double(ts.size());
    if (kind == TransformKind::translation) return PlanarTransform::translation(tx / n, ty / n, c);
    if (kind == TransformKind::rigid) return PlanarTransform::rigid(theta / n, tx / n, ty / n, c);
    return PlanarTransform::affine(a / n, tx / n, ty / n, c);
}

}  // namespace detail

inline std::pair<ImageStack, TransformSet> register_stack_with(const ImageStack& stack, const RegistrationInputs& in,
                                                               const RegisterConfig& cfg) {
    if (cfg.passes < 1) throw ValidationError("register: passes must be >= 1");
    if (cfg.refine_rank < 1) throw ValidationError("register: refine rank must be >= 1");
    TransformSet ts = detail::estimate_all(stack, in, cfg);
    const int passes = (cfg.reference == ReferenceMode::lowrank && cfg.engine != Engine::none) ? cfg.passes : 1;
    for (int pass = 1; pass < passes; ++pass) {
        const ImageStack cur = detail::resample_stack(stack, ts, cfg.threads);
        const TransformSet inc = detail::estimate_all(cur, make_registration_inputs(cur, cfg, cfg.refine_rank), cfg);
        for (std::size_t k = 0; k < ts.size(); ++k) {
            auto& f = ts.frames[k];
            f.transform = compose(inc[k], f.transform);
            f.metric = inc.frames[k].metric;
            f.iterations += inc.frames[k].iterations;
            f.converged = inc.frames[k].converged;
        }
    }
    // Express the output in the mean frame position, the frame the dataset
    // annotations are drawn in, whatever target the estimates were made against.
    if (cfg.anchor_mean && cfg.engine != Engine::none && ts.size() > 0) {
        const PlanarTransform undo = detail::mean_transform(ts).inverse();
        for (auto& f : ts.frames) f.transform = compose(undo, f.transform);
    }
    return {detail::resample_stack(stack, ts, cfg.threads), std::move(ts)};
}

/// Estimate one transform per frame between the reference and moving frames
/// chosen by cfg.reference, then resample the ORIGINAL frames.
inline std::pair<ImageStack, TransformSet> register_stack(const ImageStack& stack, const RegisterConfig& cfg) {
    if (cfg.engine == Engine::none) {
        TransformSet ts;
        ts.frames.resize(std::size_t(stack.frames()));
        for (auto& f : ts.frames) f.transform = PlanarTransform::identity(Image(stack.nx(), stack.ny()).center());
        return {stack, std::move(ts)};
    }
    return register_stack_with(stack, make_registration_inputs(stack, cfg), cfg);
}

// ============================================================ CSV

inline std::string transforms_to_csv(const TransformSet& ts) {
    std::ostringstream os;
    os << "frame_index,kind,tx,ty,theta,a11,a12,a21,a22,metric,iterations\n";
    for (std::size_t k = 0; k < ts.size(); ++k) {
        const auto& r = ts.frames[k];
        const auto& t = r.transform;
        const auto& a = t.matrix();
        os << k << ',' << to_string(t.kind()) << ',' << format_double(t.offset().x) << ','
           << format_double(t.offset().y) << ',' << format_double(t.theta()) << ',' << format_double(a(0, 0)) << ','
           << format_double(a(0, 1)) << ',' << format_double(a(1, 0)) << ',' << format_double(a(1, 1)) << ','
           << format_double(r.metric) << ',' << r.iterations << '\n';
    }
    return os.str();
}

/// Parses transforms_to_csv output; transforms are centered on `center`.
inline TransformSet transforms_from_csv(const std::string& text, Vec2 center) {
    std::istringstream is(text);
    std::string line;
    std::getline(is, line);
    if (line.rfind("frame_index,kind,", 0) != 0) throw ValidationError("transform CSV: bad header");
    TransformSet ts;
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        std::vector<std::string> cols;
        std::stringstream ls(line);
        for (std::string c; std::getline(ls, c, ',');) cols.push_back(c);
        if (cols.size() != 11) throw ValidationError("transform CSV: expected 11 columns");
        if (std::stoul(cols[0]) != ts.size()) throw ValidationError("transform CSV: frame indices out of order");
        const auto kind = transform_kind_from_string(cols[1]);
        const double tx = std::stod(cols[2]), ty = std::stod(cols[3]), theta = std::stod(cols[4]);
        Eigen::Matrix2d a;
        a << std::stod(cols[5]), std::stod(cols[6]), std::stod(cols[7]), std::stod(cols[8]);
        RegistrationResult r;
        if (kind == TransformKind::translation)
            r.transform = PlanarTransform::translation(tx, ty, center);
        else if (kind == TransformKind::rigid)
            r.transform = PlanarTransform::rigid(theta, tx, ty, center);
        else
            r.transform = PlanarTransform::affine(a, tx, ty, center);
        r.metric = std::stod(cols[9]);
        r.iterations = std::stoi(cols[10]);
        ts.frames.push_back(r);
    }
    return ts;
}

}  // namespace dtcmr
