#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "dtcmr/common.hpp"

namespace dtcmr {

/// Planar real image, row-major (y, x) with x fastest. Pixel (x, y) has its
/// center at coordinate (x, y).
class Image {
public:
    Image() = default;
    Image(int nx, int ny, double fill = 0.0) : nx_(nx), ny_(ny), px_(std::size_t(nx) * ny, fill) {
        if (nx < 1 || ny < 1) throw ValidationError("image dimensions must be >= 1");
    }
    Image(int nx, int ny, std::vector<double> px) : nx_(nx), ny_(ny), px_(std::move(px)) {
        if (nx < 1 || ny < 1 || px_.size() != std::size_t(nx) * ny)
            throw ValidationError("image buffer does not match dimensions");
    }

    int nx() const { return nx_; }
    int ny() const { return ny_; }
    std::size_t size() const { return px_.size(); }

    double& operator()(int x, int y) { return px_[std::size_t(y) * nx_ + x]; }
    double operator()(int x, int y) const { return px_[std::size_t(y) * nx_ + x]; }
    double& operator[](std::size_t i) { return px_[i]; }
    double operator[](std::size_t i) const { return px_[i]; }

    std::span<double> pixels() { return px_; }
    std::span<const double> pixels() const { return px_; }

    /// Geometric center in pixel coordinates.
    Vec2 center() const { return {(nx_ - 1) / 2.0, (ny_ - 1) / 2.0}; }

    friend bool operator==(const Image&, const Image&) = default;

private:
    int nx_ = 0;
    int ny_ = 0;
    std::vector<double> px_;
};

/// Binary planar mask with the same layout as Image; values are 0 or 1.
class Mask {
public:
    Mask() = default;
    Mask(int nx, int ny) : nx_(nx), ny_(ny), px_(std::size_t(nx) * ny, 0) {
        if (nx < 1 || ny < 1) throw ValidationError("mask dimensions must be >= 1");
    }

    int nx() const { return nx_; }
    int ny() const { return ny_; }
    std::size_t size() const { return px_.size(); }

    std::uint8_t& operator()(int x, int y) { return px_[std::size_t(y) * nx_ + x]; }
    std::uint8_t operator()(int x, int y) const { return px_[std::size_t(y) * nx_ + x]; }
    std::uint8_t& operator[](std::size_t i) { return px_[i]; }
    std::uint8_t operator[](std::size_t i) const { return px_[i]; }

    bool inside(int x, int y) const { return x >= 0 && y >= 0 && x < nx_ && y < ny_; }

    std::size_t count() const {
        std::size_t n = 0;
        for (auto v : px_) n += v != 0;
        return n;
    }

    std::span<std::uint8_t> pixels() { return px_; }
    std::span<const std::uint8_t> pixels() const { return px_; }

    friend bool operator==(const Mask&, const Mask&) = default;

private:
    int nx_ = 0;
    int ny_ = 0;
    std::vector<std::uint8_t> px_;
};

}  // namespace dtcmr
