#pragma once

#include <charconv>
#include <cmath>
#include <string>

#include <Eigen/Dense>

#include "dtcmr/common.hpp"
#include "dtcmr/image.hpp"

namespace dtcmr {

enum class TransformKind { translation, rigid, affine };

inline std::string to_string(TransformKind k) {
    switch (k) {
        case TransformKind::translation: return "translation";
        case TransformKind::rigid: return "rigid";
        case TransformKind::affine: return "affine";
    }
    return "?";
}

inline TransformKind transform_kind_from_string(const std::string& s) {
    if (s == "translation") return TransformKind::translation;
    if (s == "rigid") return TransformKind::rigid;
    if (s == "affine") return TransformKind::affine;
    throw ValidationError("unknown transform kind: " + s);
}

/// Planar map p -> A (p - c) + c + t. Registration results map moving-image
/// coordinates onto reference coordinates.
class PlanarTransform {
public:
    PlanarTransform() = default;

    static PlanarTransform identity(Vec2 center = {}) { return translation(0.0, 0.0, center); }

    static PlanarTransform translation(double tx, double ty, Vec2 center = {}) {
        PlanarTransform t;
        t.kind_ = TransformKind::translation;
        t.t_ = {tx, ty};
        t.c_ = center;
        return t;
    }

    static PlanarTransform rigid(double theta, double tx, double ty, Vec2 center) {
        PlanarTransform t;
        t.kind_ = TransformKind::rigid;
        t.a_ << std::cos(theta), -std::sin(theta), std::sin(theta), std::cos(theta);
        t.t_ = {tx, ty};
        t.c_ = center;
        return t;
    }

    static PlanarTransform affine(const Eigen::Matrix2d& a, double tx, double ty, Vec2 center) {
        const double det = a.determinant();
        if (!(det > 0.5 && det < 2.0))
            throw ValidationError("affine determinant " + std::to_string(det) + " outside (0.5, 2.0)");
        PlanarTransform t;
        t.kind_ = TransformKind::affine;
        t.a_ = a;
        t.t_ = {tx, ty};
        t.c_ = center;
        return t;
    }

    TransformKind kind() const { return kind_; }
    const Eigen::Matrix2d& matrix() const { return a_; }
    Vec2 offset() const { return t_; }
    Vec2 center() const { return c_; }

    /// Rotation angle of the linear part (exact for rigid, polar estimate otherwise).
    double theta() const { return std::atan2(a_(1, 0) - a_(0, 1), a_(0, 0) + a_(1, 1)); }

    Vec2 apply(Vec2 p) const {
        const double dx = p.x - c_.x, dy = p.y - c_.y;
        return {a_(0, 0) * dx + a_(0, 1) * dy + c_.x + t_.x, a_(1, 0) * dx + a_(1, 1) * dy + c_.y + t_.y};
    }

    PlanarTransform inverse() const {
        PlanarTransform r = *this;
        if (kind_ == TransformKind::translation) {
            r.t_ = {-t_.x, -t_.y};
            return r;
        }
        r.a_ = a_.inverse();
        const Eigen::Vector2d t = -(r.a_ * Eigen::Vector2d(t_.x, t_.y));
        r.t_ = {t.x(), t.y()};
        return r;
    }

    /// Same map expressed about another center.
    PlanarTransform recentered(Vec2 center) const {
        PlanarTransform r = *this;
        const Eigen::Vector2d d(c_.x - center.x, c_.y - center.y);
        const Eigen::Vector2d shift = a_ * (-d) + d;  // A(c' - c) + c - c'
        r.t_ = {t_.x + shift.x(), t_.y + shift.y()};
        r.c_ = center;
        return r;
    }

    /// outer o inner (inner applied first), expressed about inner's center.
    friend PlanarTransform compose(const PlanarTransform& outer, const PlanarTransform& inner) {
        const PlanarTransform o = outer.recentered(inner.c_);
        PlanarTransform r;
        r.c_ = inner.c_;
        r.a_ = o.a_ * inner.a_;
        const Eigen::Vector2d t = o.a_ * Eigen::Vector2d(inner.t_.x, inner.t_.y) + Eigen::Vector2d(o.t_.x, o.t_.y);
        r.t_ = {t.x(), t.y()};
        r.kind_ = std::max(outer.kind_, inner.kind_);
        return r;
    }

    void validate() const {
        if (kind_ == TransformKind::rigid) {
            if (std::abs(a_.determinant() - 1.0) > 1e-9 ||
                (a_.transpose() * a_ - Eigen::Matrix2d::Identity()).cwiseAbs().maxCoeff() > 1e-9)
                throw ValidationError("rigid transform matrix is not a rotation");
        } else if (kind_ == TransformKind::affine) {
            const double det = a_.determinant();
            if (!(det > 0.5 && det < 2.0)) throw ValidationError("affine determinant outside (0.5, 2.0)");
        }
    }

private:
    TransformKind kind_ = TransformKind::translation;
    Eigen::Matrix2d a_ = Eigen::Matrix2d::Identity();
    Vec2 t_{};
    Vec2 c_{};
};

/// Bilinear sample with zero outside the image.
inline double sample_bilinear(const Image& img, double x, double y) {
    if (!(x > -1.0 && y > -1.0 && x < img.nx() && y < img.ny())) return 0.0;
    const double fx0 = std::floor(x), fy0 = std::floor(y);
    const int x0 = int(fx0), y0 = int(fy0);
    const double fx = x - fx0, fy = y - fy0;
    auto at = [&](int xi, int yi) {
        return (xi >= 0 && yi >= 0 && xi < img.nx() && yi < img.ny()) ? img(xi, yi) : 0.0;
    };
    const double top = (1.0 - fx) * at(x0, y0) + fx * at(x0 + 1, y0);
    const double bottom = (1.0 - fx) * at(x0, y0 + 1) + fx * at(x0 + 1, y0 + 1);
    return (1.0 - fy) * top + fy * bottom;
}

/// Resample `img` into the target grid of `t`: out(p) = img(t^-1(p)).
inline Image apply_transform(const Image& img, const PlanarTransform& t) {
    Image out(img.nx(), img.ny());
    if (t.kind() == TransformKind::translation) {
        const Vec2 d = t.offset();
        for (int y = 0; y < img.ny(); ++y)
            for (int x = 0; x < img.nx(); ++x) out(x, y) = sample_bilinear(img, x - d.x, y - d.y);
        return out;
    }
    const PlanarTransform inv = t.inverse();
    for (int y = 0; y < img.ny(); ++y)
        for (int x = 0; x < img.nx(); ++x) {
            const Vec2 q = inv.apply({double(x), double(y)});
            out(x, y) = sample_bilinear(img, q.x, q.y);
        }
    return out;
}

/// Shortest round-trip decimal form of a double.
inline std::string format_double(double v) {
    char buf[64];
    auto res = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, res.ptr);
}

}  // namespace dtcmr
