#pragma once

#include <array>
#include <cmath>
#include <filesystem>
#include <numbers>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "dtcmr/common.hpp"
#include "dtcmr/image.hpp"
#include "dtcmr/stack.hpp"
#include "dtcmr/transform.hpp"

namespace dtcmr {

/// Symmetric 3x3 tensor as (xx, yy, zz, xy, xz, yz).
using Sym3 = std::array<double, 6>;

inline Eigen::Matrix3d to_matrix(const Sym3& d) {
    Eigen::Matrix3d m;
    m << d[0], d[3], d[4], d[3], d[1], d[5], d[4], d[5], d[2];
    return m;
}

inline Sym3 from_matrix(const Eigen::Matrix3d& m) { return {m(0, 0), m(1, 1), m(2, 2), m(0, 1), m(0, 2), m(1, 2)}; }

struct Eigensystem {
    Eigen::Vector3d values;   ///< descending
    Eigen::Matrix3d vectors;  ///< column i pairs with values(i)
};

/// Symmetric 3x3 eigen-decomposition by cyclic Jacobi rotations.
/// Eigenvalues are sorted descending; each eigenvector's largest-magnitude
/// component is positive. Inside a repeated eigenvalue the basis is the
/// projection of x, then y, then z onto the eigenspace.
inline Eigensystem eig3_sym(const Eigen::Matrix3d& d_in) {
    Eigen::Matrix3d a = 0.5 * (d_in + d_in.transpose());
    Eigen::Matrix3d v = Eigen::Matrix3d::Identity();
    for (int sweep = 0; sweep < 64; ++sweep) {
        const double off = a(0, 1) * a(0, 1) + a(0, 2) * a(0, 2) + a(1, 2) * a(1, 2);
        if (off == 0.0) break;
        if (std::sqrt(off) <= 1e-17 * a.cwiseAbs().maxCoeff()) break;
        for (int p = 0; p < 2; ++p)
            for (int q = p + 1; q < 3; ++q) {
                if (a(p, q) == 0.0) continue;
                const double theta = (a(q, q) - a(p, p)) / (2.0 * a(p, q));
                const double t = (theta >= 0 ? 1.0 : -1.0) / (std::abs(theta) + std::sqrt(theta * theta + 1.0));
                const double c = 1.0 / std::sqrt(t * t + 1.0), s = t * c;
                Eigen::Matrix3d j = Eigen::Matrix3d::Identity();
                j(p, p) = c;
                j(q, q) = c;
                j(p, q) = s;
                j(q, p) = -s;
                a = j.transpose() * a * j;
                a(p, q) = a(q, p) = 0.0;
                v = v * j;
            }
    }

    std::array<int, 3> order{0, 1, 2};
    std::stable_sort(order.begin(), order.end(), [&](int i, int j) { return a(i, i) > a(j, j); });
    Eigensystem es;
    for (int i = 0; i < 3; ++i) {
        es.values(i) = a(order[std::size_t(i)], order[std::size_t(i)]);
        es.vectors.col(i) = v.col(order[std::size_t(i)]);
    }

    // Canonical basis inside degenerate eigenspaces.
    const double tol = 1e-10 * std::max(d_in.cwiseAbs().maxCoeff(), std::numeric_limits<double>::min());
    for (int i = 0; i < 3;) {
        int j = i + 1;
        while (j < 3 && es.values(j - 1) - es.values(j) <= tol) ++j;
        if (j - i > 1) {
            Eigen::Matrix3d proj = Eigen::Matrix3d::Zero();
            for (int k = i; k < j; ++k) proj += es.vectors.col(k) * es.vectors.col(k).transpose();
            int filled = i;
            for (int axis = 0; axis < 3 && filled < j; ++axis) {
                const Eigen::Vector3d cand = proj * Eigen::Vector3d::Unit(axis);
                if (cand.norm() < 1e-6) continue;
                const Eigen::Vector3d u = cand.normalized();
                es.vectors.col(filled++) = u;
                proj -= u * u.transpose();
            }
            const double mean = es.values.segment(i, j - i).mean();
            for (int k = i; k < j; ++k) es.values(k) = mean;
        }
        i = j;
    }
    for (int i = 0; i < 3; ++i) {
        Eigen::Index imax = 0;
        es.vectors.col(i).cwiseAbs().maxCoeff(&imax);
        if (es.vectors(imax, i) < 0.0) es.vectors.col(i) *= -1.0;
    }
    return es;
}

// ------------------------------------------------------------ cardiac frame

/// Local radial / circumferential / longitudinal axes around the LV center;
/// the slice normal is +z and c = z x r.
struct CardiacFrame {
    Vec2 lv_center;

    struct Axes {
        Eigen::Vector3d radial, circumferential, longitudinal;
    };

    Axes axes_at(Vec2 pixel) const {
        const Vec2 d = pixel - lv_center;
        const double n = d.norm();
        if (n == 0.0) throw ValidationError("cardiac frame undefined at the LV center");
        Axes ax;
        ax.radial = Eigen::Vector3d(d.x / n, d.y / n, 0.0);
        ax.longitudinal = Eigen::Vector3d::UnitZ();
        ax.circumferential = ax.longitudinal.cross(ax.radial);
        return ax;
    }
};

/// Helix angle in degrees, [-90, 90]. Empty when e1 is radial (undefined).
inline std::optional<double> helix_angle(const Eigen::Vector3d& e1, Vec2 pixel, const CardiacFrame& frame) {
    const auto ax = frame.axes_at(pixel);
    const double n = e1.norm();
    if (n == 0.0) return std::nullopt;
    double c = e1.dot(ax.circumferential) / n;
    double z = e1.dot(ax.longitudinal) / n;
    if (std::hypot(c, z) <= 1e-9) return std::nullopt;
    if (c < 0.0 || (std::abs(c) <= 1e-12 && z < 0.0)) {
        c = -c;
        z = -z;
    }
    return std::atan2(z, c) * 180.0 / std::numbers::pi;
}

// ------------------------------------------------------------ tensor field

enum PixelFlags : unsigned {
    kFitValid = 1u,  ///< tensor fitted on a mask pixel
    kHaValid = 2u,   ///< helix angle defined
    kClamped = 4u,   ///< at least one signal clamped before the log
};

struct TensorField {
    int nx = 0, ny = 0;
    std::vector<double> s0;
    std::vector<Sym3> d;
    std::vector<Eigensystem> eig;
    std::vector<double> ha;  ///< degrees; 0 where undefined
    std::vector<unsigned> flags;

    TensorField() = default;
    TensorField(int nx_, int ny_)
        : nx(nx_), ny(ny_), s0(std::size_t(nx_) * ny_, 0.0), d(std::size_t(nx_) * ny_, Sym3{}),
          eig(std::size_t(nx_) * ny_, Eigensystem{Eigen::Vector3d::Zero(), Eigen::Matrix3d::Identity()}),
          ha(std::size_t(nx_) * ny_, 0.0), flags(std::size_t(nx_) * ny_, 0u) {}

    std::size_t size() const { return s0.size(); }
    std::size_t index(int x, int y) const { return std::size_t(y) * nx + x; }
    bool fit_valid(std::size_t i) const { return flags[i] & kFitValid; }
    bool ha_valid(std::size_t i) const { return flags[i] & kHaValid; }

    Image ha_image() const { return Image(nx, ny, ha); }
};

/// Fill ha and kHaValid for every fitted pixel.
inline void compute_helix_angles(TensorField& field, Vec2 lv_center) {
    const CardiacFrame frame{lv_center};
    for (int y = 0; y < field.ny; ++y)
        for (int x = 0; x < field.nx; ++x) {
            const auto i = field.index(x, y);
            field.flags[i] &= ~unsigned(kHaValid);
            field.ha[i] = 0.0;
            if (!field.fit_valid(i)) continue;
            if (Vec2{double(x), double(y)} == lv_center) continue;
            if (const auto h = helix_angle(field.eig[i].vectors.col(0), {double(x), double(y)}, frame)) {
                field.ha[i] = *h;
                field.flags[i] |= kHaValid;
            }
        }
}

// ------------------------------------------------------------ averaging

/// Mean image per distinct diffusion configuration.
struct ConfigMeans {
    std::vector<DiffusionConfig> configs;
    std::vector<Image> images;
    std::vector<int> counts;  ///< kept frames per configuration
};

inline ConfigMeans average_by_config(const ImageStack& stack, const std::vector<bool>& keep) {
    if (keep.size() != std::size_t(stack.frames())) throw ValidationError("keep flags do not match frame count");
    auto [configs, index_of] = stack.protocol().distinct();
    ConfigMeans out;
    out.configs = configs;
    out.images.assign(configs.size(), Image(stack.nx(), stack.ny()));
    out.counts.assign(configs.size(), 0);
    for (int k = 0; k < stack.frames(); ++k) {
        if (!keep[std::size_t(k)]) continue;
        const std::size_t c = index_of[std::size_t(stack.dwi_of(k))];
        auto f = stack.frame_span(k);
        auto& img = out.images[c];
        for (std::size_t i = 0; i < img.size(); ++i) img[i] += f[i];
        ++out.counts[c];
    }
    std::string empty;
    for (std::size_t c = 0; c < configs.size(); ++c) {
        if (out.counts[c] == 0) {
            empty += (empty.empty() ? "" : ", ") + std::to_string(c) + " (b=" + format_double(configs[c].b) + ")";
            continue;
        }
        for (double& v : out.images[c].pixels()) v /= double(out.counts[c]);
    }
    if (!empty.empty()) throw ComputeError("no kept frames for configuration(s): " + empty);
    return out;
}

// ------------------------------------------------------------ fitting

/// Rows [1, -b gx^2, -b gy^2, -b gz^2, -2b gx gy, -2b gx gz, -2b gy gz].
inline Eigen::MatrixXd design_matrix(const std::vector<DiffusionConfig>& configs) {
    Eigen::MatrixXd x(Eigen::Index(configs.size()), 7);
    for (std::size_t r = 0; r < configs.size(); ++r) {
        const double b = configs[r].b;
        const Vec3 g = configs[r].direction.value_or(Vec3{0.0, 0.0, 0.0});
        x.row(Eigen::Index(r)) << 1.0, -b * g[0] * g[0], -b * g[1] * g[1], -b * g[2] * g[2], -2.0 * b * g[0] * g[1],
            -2.0 * b * g[0] * g[2], -2.0 * b * g[1] * g[2];
    }
    return x;
}

/// Log-linear OLS tensor fit on every mask pixel.
inline TensorField fit_tensor(const ConfigMeans& means, const Mask& mask, unsigned threads = 1) {
    if (means.images.empty()) throw ValidationError("fit_tensor: no configurations");
    const int nx = means.images.front().nx(), ny = means.images.front().ny();
    if (mask.nx() != nx || mask.ny() != ny) throw ValidationError("fit_tensor: mask shape mismatch");

    const Eigen::MatrixXd x = design_matrix(means.configs);
    Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(x);
    if (x.rows() < 7 || qr.rank() < 7)
        throw ComputeError("fit_tensor: rank-deficient design matrix (rank " + std::to_string(qr.rank()) +
                           "); the protocol needs b0 plus >= 6 non-collinear directions");
    const Eigen::MatrixXd pinv = qr.solve(Eigen::MatrixXd::Identity(x.rows(), x.rows()));

    double smax = 0.0;
    for (const auto& img : means.images)
        for (double v : img.pixels()) smax = std::max(smax, v);
    const double eps = smax > 0.0 ? 1e-6 * smax : std::numeric_limits<double>::min();

    TensorField field(nx, ny);
    const std::size_t nconf = means.images.size();
    parallel_for(std::size_t(ny), threads, [&](std::size_t row) {
        Eigen::VectorXd logs(static_cast<Eigen::Index>(nconf));
        for (int xx = 0; xx < nx; ++xx) {
            const std::size_t i = row * std::size_t(nx) + std::size_t(xx);
            if (!mask[i]) continue;
            bool clamped = false;
            for (std::size_t c = 0; c < nconf; ++c) {
                double s = means.images[c][i];
                if (s < eps) {
                    s = eps;
                    clamped = true;
                }
                logs(Eigen::Index(c)) = std::log(s);
            }
            const Eigen::VectorXd coef = pinv * logs;
            field.s0[i] = std::exp(coef(0));
            field.d[i] = {coef(1), coef(2), coef(3), coef(4), coef(5), coef(6)};
            field.eig[i] = eig3_sym(to_matrix(field.d[i]));
            field.flags[i] = kFitValid | (clamped ? unsigned(kClamped) : 0u);
        }
    });
    return field;
}

/// S = S0 exp(-b g^T D g).
inline double forward_signal(double s0, const Sym3& d, const DiffusionConfig& c) {
    if (c.is_b0()) return s0;
    const auto& g = *c.direction;
    const double q = d[0] * g[0] * g[0] + d[1] * g[1] * g[1] + d[2] * g[2] * g[2] + 2.0 * d[3] * g[0] * g[1] +
                     2.0 * d[4] * g[0] * g[2] + 2.0 * d[5] * g[1] * g[2];
    return s0 * std::exp(-c.b * q);
}

// ------------------------------------------------------------ serialization

/// Nine float32 planes: S0, Dxx, Dyy, Dzz, Dxy, Dxz, Dyz, HA, flags.
inline void save_tensor_field(const std::filesystem::path& path, const TensorField& f) {
    const std::size_t n = f.size();
    std::vector<double> planes(9 * n);
    for (std::size_t i = 0; i < n; ++i) {
        planes[i] = f.s0[i];
        for (int c = 0; c < 6; ++c) planes[std::size_t(c + 1) * n + i] = f.d[i][std::size_t(c)];
        planes[7 * n + i] = f.ha[i];
        planes[8 * n + i] = double(f.flags[i]);
    }
    io::write_f32(path, planes);
}

/// Inverse of save_tensor_field; eigensystems are recomputed from the stored tensors.
inline TensorField load_tensor_field(const std::filesystem::path& path, int nx, int ny) {
    const std::size_t n = std::size_t(nx) * ny;
    const auto planes = io::read_f32(path, 9 * n);
    TensorField f(nx, ny);
    for (std::size_t i = 0; i < n; ++i) {
        f.s0[i] = planes[i];
        for (int c = 0; c < 6; ++c) f.d[i][std::size_t(c)] = planes[std::size_t(c + 1) * n + i];
        f.ha[i] = planes[7 * n + i];
        f.flags[i] = unsigned(planes[8 * n + i]);
        if (f.fit_valid(i)) f.eig[i] = eig3_sym(to_matrix(f.d[i]));
    }
    return f;
}

}  // namespace dtcmr
