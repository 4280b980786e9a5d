#pragma once

#include <atomic>
#include <filesystem>
#include <string>

#include <unistd.h>

#include "dtcmr/dtcmr.hpp"

namespace dtcmr::testing {

/// Scratch directory removed on destruction.
class TempDir {
public:
    explicit TempDir(const std::string& tag = "t") {
        static std::atomic<int> counter{0};
        path_ = std::filesystem::temp_directory_path() /
                ("dtcmr_" + tag + "_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
        std::filesystem::remove_all(path_);
        std::filesystem::create_directories(path_);
    }
    ~TempDir() {
        std::error_code ec;
        std::filesystem::remove_all(path_, ec);
    }
    TempDir(const TempDir&) = delete;
    TempDir& operator=(const TempDir&) = delete;

    const std::filesystem::path& path() const { return path_; }
    std::filesystem::path operator/(const std::string& s) const { return path_ / s; }

private:
    std::filesystem::path path_;
};

inline double max_abs_diff(std::span<const double> a, std::span<const double> b) {
    double m = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
    return m;
}

inline std::string slurp(const std::filesystem::path& p) {
    const auto raw = io::read_file(p);
    return std::string(raw.begin(), raw.end());
}

/// Smooth test image: a ring plus two off-center Gaussian blobs.
inline Image smooth_image(int nx = 64, int ny = 64) {
    Image img(nx, ny);
    const double cx = 0.47 * nx, cy = 0.52 * ny;
    for (int y = 0; y < ny; ++y)
        for (int x = 0; x < nx; ++x) {
            const double r = std::hypot(x - cx, y - cy);
            double v = std::exp(-0.5 * std::pow((r - 0.2 * nx) / 2.5, 2.0));
            v += 0.7 * std::exp(-0.5 * (std::pow(x - 0.25 * nx, 2.0) + std::pow(y - 0.3 * ny, 2.0)) / 16.0);
            v += 0.4 * std::exp(-0.5 * (std::pow(x - 0.75 * nx, 2.0) + std::pow(y - 0.7 * ny, 2.0)) / 25.0);
            img(x, y) = v;
        }
    return img;
}

}  // namespace dtcmr::testing
