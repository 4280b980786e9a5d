#pragma once

#include <cmath>
#include <filesystem>
#include <numbers>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "dtcmr/common.hpp"
#include "dtcmr/dti.hpp"
#include "dtcmr/image.hpp"
#include "dtcmr/stack.hpp"
#include "dtcmr/transform.hpp"

namespace dtcmr {

struct ProfileSample {
    double depth = 0.0;
    double ha = 0.0;
};

struct Spoke {
    double angle_deg = 0.0;
    double r_endo = 0.0;
    double r_epi = 0.0;
    std::vector<ProfileSample> samples;  ///< sorted by depth
    bool skipped = false;                ///< fewer than 3 pixels
};

struct TransmuralProfiles {
    std::vector<Spoke> spokes;
    int skipped = 0;
};

/// Collect (normalized depth, HA) samples along `n_spokes` equally spaced
/// angular sectors of half-width 180/n_spokes degrees. `valid` (optional)
/// restricts samples to pixels with a defined HA.
inline TransmuralProfiles transmural_profiles(const Image& ha_map, const Mask& myo_mask, Vec2 center, int n_spokes,
                                              const Mask* valid = nullptr) {
    if (n_spokes < 8) throw ValidationError("transmural_profiles: need at least 8 spokes");
    if (myo_mask.count() == 0) throw ValidationError("transmural_profiles: mask is empty");
    if (ha_map.nx() != myo_mask.nx() || ha_map.ny() != myo_mask.ny())
        throw ValidationError("transmural_profiles: shape mismatch");

    const double width = 360.0 / n_spokes;
    TransmuralProfiles out;
    out.spokes.resize(std::size_t(n_spokes));
    struct Px {
        double r, ha;
    };
    std::vector<std::vector<Px>> bins(static_cast<std::size_t>(n_spokes));
    for (int y = 0; y < myo_mask.ny(); ++y)
        for (int x = 0; x < myo_mask.nx(); ++x) {
            if (!myo_mask(x, y)) continue;
            if (valid && !(*valid)(x, y)) continue;
            const double dx = x - center.x, dy = y - center.y;
            const double r = std::hypot(dx, dy);
            if (r == 0.0) continue;
            double ang = std::atan2(dy, dx) * 180.0 / std::numbers::pi;
            if (ang < 0.0) ang += 360.0;
            // Sector s covers [s*width - width/2, s*width + width/2).
            int s = int(std::floor((ang + 0.5 * width) / width)) % n_spokes;
            bins[std::size_t(s)].push_back({r, ha_map(x, y)});
        }

    for (int s = 0; s < n_spokes; ++s) {
        Spoke& sp = out.spokes[std::size_t(s)];
        sp.angle_deg = s * width;
        const auto& px = bins[std::size_t(s)];
        if (px.size() < 3) {
            sp.skipped = true;
            ++out.skipped;
            continue;
        }
        sp.r_endo = px.front().r;
        sp.r_epi = px.front().r;
        for (const auto& p : px) {
            sp.r_endo = std::min(sp.r_endo, p.r);
            sp.r_epi = std::max(sp.r_epi, p.r);
        }
        const double span = sp.r_epi - sp.r_endo;
        for (const auto& p : px) {
            const double depth = span > 0.0 ? std::clamp((p.r - sp.r_endo) / span, 0.0, 1.0) : 0.0;
            sp.samples.push_back({depth, p.ha});
        }
        std::stable_sort(sp.samples.begin(), sp.samples.end(),
                         [](const ProfileSample& a, const ProfileSample& b) { return a.depth < b.depth; });
    }
    return out;
}

struct LineFit {
    double slope = 0.0;
    double intercept = 0.0;
    double r_square = 0.0;
    double rmse = 0.0;
    int n_samples = 0;
};

/// OLS line HA = slope * depth + intercept with R^2 and RMSE.
inline LineFit fit_line_profile(const std::vector<ProfileSample>& samples) {
    const std::size_t n = samples.size();
    if (n < 3) throw ValidationError("fit_line_profile: need at least 3 samples");
    double md = 0.0, mh = 0.0;
    for (const auto& s : samples) {
        md += s.depth;
        mh += s.ha;
    }
    md /= double(n);
    mh /= double(n);
    double sdd = 0.0, sdh = 0.0, shh = 0.0;
    for (const auto& s : samples) {
        sdd += (s.depth - md) * (s.depth - md);
        sdh += (s.depth - md) * (s.ha - mh);
        shh += (s.ha - mh) * (s.ha - mh);
    }
    if (sdd == 0.0) throw ValidationError("fit_line_profile: need at least 2 distinct depths");
    LineFit f;
    f.n_samples = int(n);
    f.slope = sdh / sdd;
    f.intercept = mh - f.slope * md;
    double ss_res = 0.0;
    for (const auto& s : samples) {
        const double e = s.ha - (f.slope * s.depth + f.intercept);
        ss_res += e * e;
    }
    f.rmse = std::sqrt(ss_res / double(n));
    if (shh == 0.0)
        f.r_square = ss_res == 0.0 ? 1.0 : 0.0;
    else
        f.r_square = std::clamp(1.0 - ss_res / shh, 0.0, 1.0);
    return f;
}

struct ProfileFit {
    std::vector<LineFit> spokes;  ///< fitted spokes only
    std::vector<double> spoke_angles;
    double r_square_mean = 0.0, r_square_std = 0.0;
    double rmse_mean = 0.0, rmse_std = 0.0;
    int spokes_fitted = 0;
    int spokes_skipped = 0;  ///< too few pixels or a single depth
};

inline std::pair<double, double> mean_std(const std::vector<double>& v) {
    if (v.empty()) return {std::numeric_limits<double>::quiet_NaN(), std::numeric_limits<double>::quiet_NaN()};
    double m = 0.0;
    for (double x : v) m += x;
    m /= double(v.size());
    if (v.size() < 2) return {m, 0.0};
    double ss = 0.0;
    for (double x : v) ss += (x - m) * (x - m);
    return {m, std::sqrt(ss / double(v.size() - 1))};
}

/// Fit every usable spoke and aggregate by unweighted mean / sample std.
inline ProfileFit fit_profiles(const TransmuralProfiles& profiles) {
    ProfileFit pf;
    std::vector<double> r2, rmse;
    for (const auto& sp : profiles.spokes) {
        bool usable = !sp.skipped && sp.samples.size() >= 3 &&
                      sp.samples.front().depth != sp.samples.back().depth;
        if (!usable) {
            ++pf.spokes_skipped;
            continue;
        }
        const auto f = fit_line_profile(sp.samples);
        pf.spokes.push_back(f);
        pf.spoke_angles.push_back(sp.angle_deg);
        r2.push_back(f.r_square);
        rmse.push_back(f.rmse);
    }
    pf.spokes_fitted = int(pf.spokes.size());
    std::tie(pf.r_square_mean, pf.r_square_std) = mean_std(r2);
    std::tie(pf.rmse_mean, pf.rmse_std) = mean_std(rmse);
    return pf;
}

struct NegCounts {
    double nega1 = 0.0;  ///< per mille of valid myocardium pixels with exactly one negative eigenvalue
    double nega2 = 0.0;  ///< ... exactly two
    std::size_t pixels = 0;
};

inline NegCounts negative_eig_counts(const TensorField& field, const Mask& myo_mask) {
    if (myo_mask.count() == 0) throw ValidationError("negative_eig_counts: mask is empty");
    std::size_t total = 0, one = 0, two = 0;
    for (std::size_t i = 0; i < field.size(); ++i) {
        if (!myo_mask[i] || !field.fit_valid(i)) continue;
        ++total;
        int neg = 0;
        for (int k = 0; k < 3; ++k) neg += field.eig[i].values(k) < 0.0;
        one += neg == 1;
        two += neg == 2;
    }
    NegCounts n;
    n.pixels = total;
    if (total == 0) return n;
    n.nega1 = 1000.0 * double(one) / double(total);
    n.nega2 = 1000.0 * double(two) / double(total);
    return n;
}

// ------------------------------------------------------------ report

struct EvaluationReport {
    ProfileFit profile;
    NegCounts neg;
    std::size_t frames_rejected = 0;
    std::size_t frames_total = 0;

    nlohmann::json to_json() const {
        nlohmann::json j;
        j["r_square_mean"] = profile.r_square_mean;
        j["r_square_std"] = profile.r_square_std;
        j["rmse_mean"] = profile.rmse_mean;
        j["rmse_std"] = profile.rmse_std;
        j["nega1"] = neg.nega1;
        j["nega2"] = neg.nega2;
        j["frames_rejected"] = frames_rejected;
        j["frames_total"] = frames_total;
        j["spokes_fitted"] = profile.spokes_fitted;
        j["spokes_skipped"] = profile.spokes_skipped;
        j["myocardium_pixels"] = neg.pixels;
        return j;
    }
};

/// Evaluate a fitted field: transmural HA profiles and negative-eigenvalue rates.
inline EvaluationReport evaluate_field(const TensorField& field, const Annotations& ann, int n_spokes) {
    Mask valid(field.nx, field.ny);
    for (std::size_t i = 0; i < field.size(); ++i) valid[i] = field.ha_valid(i) ? 1 : 0;
    EvaluationReport rep;
    rep.profile = fit_profiles(
        transmural_profiles(field.ha_image(), ann.myo_mask, ann.blood_pool_center, n_spokes, &valid));
    rep.neg = negative_eig_counts(field, ann.myo_mask);
    return rep;
}

inline std::string profiles_to_csv(const ProfileFit& pf) {
    std::ostringstream os;
    os << "spoke_angle_deg,slope,intercept,r_square,rmse,n_samples\n";
    for (std::size_t i = 0; i < pf.spokes.size(); ++i) {
        const auto& f = pf.spokes[i];
        os << format_double(pf.spoke_angles[i]) << ',' << format_double(f.slope) << ',' << format_double(f.intercept)
           << ',' << format_double(f.r_square) << ',' << format_double(f.rmse) << ',' << f.n_samples << '\n';
    }
    return os.str();
}

/// 8-bit PGM with HA mapped linearly [-90, 90] -> [0, 255]; pixels without a
/// valid HA are written as 0.
inline void write_ha_pgm(const std::filesystem::path& path, const TensorField& field) {
    std::string buf = "P5\n" + std::to_string(field.nx) + " " + std::to_string(field.ny) + "\n255\n";
    const std::size_t header = buf.size();
    buf.resize(header + field.size());
    for (std::size_t i = 0; i < field.size(); ++i) {
        unsigned char v = 0;
        if (field.ha_valid(i)) v = static_cast<unsigned char>(std::lround(std::clamp((field.ha[i] + 90.0) / 180.0, 0.0, 1.0) * 255.0));
        buf[header + i] = static_cast<char>(v);
    }
    io::write_text(path, buf);
}

/// report.json, profiles.csv and ha_map.pgm in `dir`.
inline void emit_report(const std::filesystem::path& dir, const EvaluationReport& rep, const TensorField& field) {
    std::filesystem::create_directories(dir);
    io::write_text(dir / "report.json", rep.to_json().dump(2) + "\n");
    io::write_text(dir / "profiles.csv", profiles_to_csv(rep.profile));
    write_ha_pgm(dir / "ha_map.pgm", field);
}

}  // namespace dtcmr
