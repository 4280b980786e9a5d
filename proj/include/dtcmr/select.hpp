#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>
#include <string>
#include <vector>

#include "dtcmr/common.hpp"
#include "dtcmr/image.hpp"
#include "dtcmr/stack.hpp"
#include "dtcmr/transform.hpp"

namespace dtcmr {

/// Annulus around the blood-pool center bounding the myocardium.
struct DonutRoi {
    Mask mask;
    double inner_radius = 0.0;
    double outer_radius = 0.0;
    Vec2 center;
};

/// Inner radius 0.95 x the closest boundary pixel, outer radius 1.05 x the
/// farthest one; boundary pixels are mask pixels with a non-mask 4-neighbour.
inline DonutRoi donut_roi(const Annotations& ann) {
    const Mask& m = ann.myo_mask;
    if (m.count() == 0) throw ValidationError("donut_roi: myocardium mask is empty");
    const Vec2 c = ann.blood_pool_center;
    double dmin = std::numeric_limits<double>::infinity(), dmax = 0.0;
    for (int y = 0; y < m.ny(); ++y)
        for (int x = 0; x < m.nx(); ++x) {
            if (!m(x, y)) continue;
            const bool boundary = !(m.inside(x - 1, y) && m(x - 1, y)) || !(m.inside(x + 1, y) && m(x + 1, y)) ||
                                  !(m.inside(x, y - 1) && m(x, y - 1)) || !(m.inside(x, y + 1) && m(x, y + 1));
            if (!boundary) continue;
            const double d = std::hypot(x - c.x, y - c.y);
            dmin = std::min(dmin, d);
            dmax = std::max(dmax, d);
        }
    const int cx = int(std::lround(c.x)), cy = int(std::lround(c.y));
    if (dmin == 0.0 || (m.inside(cx, cy) && m(cx, cy)))
        throw ValidationError("donut_roi: blood-pool center lies inside the myocardium mask");

    DonutRoi roi{Mask(m.nx(), m.ny()), 0.95 * dmin, 1.05 * dmax, c};
    for (int y = 0; y < m.ny(); ++y)
        for (int x = 0; x < m.nx(); ++x) {
            const double d = std::hypot(x - c.x, y - c.y);
            roi.mask(x, y) = (d >= roi.inner_radius && d <= roi.outer_radius) ? 1 : 0;
        }
    return roi;
}

enum class Grouping { per_config, global };

inline double pearson(std::span<const double> a, std::span<const double> b) {
    const double n = double(a.size());
    double ma = 0.0, mb = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        ma += a[i];
        mb += b[i];
    }
    ma /= n;
    mb /= n;
    double sab = 0.0, saa = 0.0, sbb = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const double da = a[i] - ma, db = b[i] - mb;
        sab += da * db;
        saa += da * da;
        sbb += db * db;
    }
    if (saa == 0.0 || sbb == 0.0) return std::numeric_limits<double>::quiet_NaN();
    return std::clamp(sab / std::sqrt(saa * sbb), -1.0, 1.0);
}

/// Pearson r of each frame's ROI vector against the mean ROI vector of its
/// comparison group (itself included). A frame constant on the ROI gets -1.
inline std::vector<double> frame_correlations(const ImageStack& stack, const DonutRoi& roi,
                                              Grouping grouping = Grouping::per_config) {
    if (roi.mask.nx() != stack.nx() || roi.mask.ny() != stack.ny())
        throw ValidationError("frame_correlations: ROI shape mismatch");
    std::vector<std::size_t> idx;
    for (std::size_t i = 0; i < roi.mask.size(); ++i)
        if (roi.mask[i]) idx.push_back(i);
    if (idx.size() < 10) throw ValidationError("frame_correlations: ROI has fewer than 10 pixels");

    const int nf = stack.frames();
    const auto index_of = stack.protocol().distinct().second;
    std::vector<std::size_t> group(std::size_t(nf), 0);
    if (grouping == Grouping::per_config)
        for (int k = 0; k < nf; ++k) group[std::size_t(k)] = index_of[std::size_t(stack.dwi_of(k))];
    const std::size_t ngroups = *std::max_element(group.begin(), group.end()) + 1;

    std::vector<std::vector<double>> vecs(std::size_t(nf), std::vector<double>(idx.size()));
    std::vector<std::vector<double>> means(ngroups, std::vector<double>(idx.size(), 0.0));
    std::vector<int> counts(ngroups, 0);
    for (int k = 0; k < nf; ++k) {
        const auto f = stack.frame_span(k);
        auto& v = vecs[std::size_t(k)];
        auto& m = means[group[std::size_t(k)]];
        for (std::size_t j = 0; j < idx.size(); ++j) {
            v[j] = f[idx[j]];
            m[j] += v[j];
        }
        ++counts[group[std::size_t(k)]];
    }
    for (std::size_t g = 0; g < ngroups; ++g)
        for (double& x : means[g]) x /= double(std::max(counts[g], 1));

    std::vector<double> r(static_cast<std::size_t>(nf));
    for (int k = 0; k < nf; ++k) {
        const double val = pearson(vecs[std::size_t(k)], means[group[std::size_t(k)]]);
        if (std::isnan(val)) {
            log::warn("frame " + std::to_string(k) + " is constant on the ROI; correlation set to -1");
            r[std::size_t(k)] = -1.0;
        } else {
            r[std::size_t(k)] = val;
        }
    }
    return r;
}

inline double median(std::vector<double> v) {
    if (v.empty()) throw ValidationError("median of empty set");
    const std::size_t n = v.size();
    std::sort(v.begin(), v.end());
    return (n % 2) ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

inline constexpr double kMadScale = 1.4826;

struct FrameVerdicts {
    std::vector<double> r;
    std::vector<bool> keep;
    double threshold = std::numeric_limits<double>::quiet_NaN();
    double median = std::numeric_limits<double>::quiet_NaN();
    double scaled_mad = std::numeric_limits<double>::quiet_NaN();

    std::size_t rejected() const { return std::size_t(std::count(keep.begin(), keep.end(), false)); }
};

/// One-sided rule: reject r < median(r) - 3 * 1.4826 * MAD(r).
inline FrameVerdicts reject_outliers(const std::vector<double>& r) {
    if (r.size() < 3) throw ValidationError("reject_outliers: need at least 3 values");
    FrameVerdicts v;
    v.r = r;
    v.median = median(r);
    std::vector<double> dev(r.size());
    for (std::size_t i = 0; i < r.size(); ++i) dev[i] = std::abs(r[i] - v.median);
    v.scaled_mad = kMadScale * median(dev);
    v.threshold = v.median - 3.0 * v.scaled_mad;
    v.keep.resize(r.size());
    for (std::size_t i = 0; i < r.size(); ++i) v.keep[i] = r[i] >= v.threshold;
    return v;
}

/// Verdicts from a manual keep-list (frame indices); correlations are not computed.
inline FrameVerdicts manual_verdicts(int frames, const std::vector<int>& keep_list) {
    FrameVerdicts v;
    v.r.assign(std::size_t(frames), std::numeric_limits<double>::quiet_NaN());
    v.keep.assign(std::size_t(frames), false);
    for (int k : keep_list) {
        if (k < 0 || k >= frames) throw ValidationError("manual keep-list index out of range: " + std::to_string(k));
        v.keep[std::size_t(k)] = true;
    }
    return v;
}

inline FrameVerdicts keep_all_verdicts(int frames) {
    std::vector<int> all(static_cast<std::size_t>(frames));
    for (int k = 0; k < frames; ++k) all[std::size_t(k)] = k;
    return manual_verdicts(frames, all);
}

/// Newline-separated frame indices; blank lines and '#' comments ignored.
inline std::vector<int> parse_keep_list(const std::string& text) {
    std::vector<int> out;
    std::istringstream is(text);
    std::string line;
    while (std::getline(is, line)) {
        const auto hash = line.find('#');
        if (hash != std::string::npos) line.resize(hash);
        line.erase(0, line.find_first_not_of(" \t\r"));
        line.erase(line.find_last_not_of(" \t\r") + 1);
        if (line.empty()) continue;
        try {
            std::size_t used = 0;
            out.push_back(std::stoi(line, &used));
            if (used != line.size()) throw std::invalid_argument(line);
        } catch (const std::exception&) {
            throw ValidationError("manual keep-list: not a frame index: '" + line + "'");
        }
    }
    return out;
}

/// CSV: frame_index, b, direction_index, r, threshold, kept. direction_index
/// is 0 for b0 and 1-based over distinct directions otherwise.
inline std::string verdicts_to_csv(const FrameVerdicts& v, const ImageStack& stack) {
    std::vector<Vec3> dirs;
    std::ostringstream os;
    os << "frame_index,b,direction_index,r,threshold,kept\n";
    for (int k = 0; k < stack.frames(); ++k) {
        const auto& cfg = stack.config_of_frame(k);
        int di = 0;
        if (cfg.direction) {
            auto it = std::find(dirs.begin(), dirs.end(), *cfg.direction);
            if (it == dirs.end()) {
                dirs.push_back(*cfg.direction);
                it = dirs.end() - 1;
            }
            di = int(it - dirs.begin()) + 1;
        }
        os << k << ',' << format_double(cfg.b) << ',' << di << ',' << format_double(v.r[std::size_t(k)]) << ','
           << format_double(v.threshold) << ',' << (v.keep[std::size_t(k)] ? 1 : 0) << '\n';
    }
    return os.str();
}

/// Reads the kept column of verdicts_to_csv output.
inline FrameVerdicts verdicts_from_csv(const std::string& text) {
    std::istringstream is(text);
    std::string line;
    std::getline(is, line);
    if (line.rfind("frame_index,b,", 0) != 0) throw ValidationError("verdict CSV: bad header");
    FrameVerdicts v;
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        std::vector<std::string> cols;
        std::stringstream ls(line);
        for (std::string c; std::getline(ls, c, ',');) cols.push_back(c);
        if (cols.size() != 6) throw ValidationError("verdict CSV: expected 6 columns");
        v.r.push_back(std::stod(cols[3]));
        v.threshold = std::stod(cols[4]);
        v.keep.push_back(cols[5] == "1");
    }
    return v;
}

}  // namespace dtcmr
