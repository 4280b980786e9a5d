#pragma once

#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include "dtcmr/common.hpp"
#include "dtcmr/image.hpp"

namespace dtcmr {

static_assert(std::endian::native == std::endian::little, "binary formats assume a little-endian host");

using Vec3 = std::array<double, 3>;

/// One diffusion configuration: b-value in s/mm^2 and a unit gradient
/// direction (absent for b0).
struct DiffusionConfig {
    double b = 0.0;
    std::optional<Vec3> direction;

    bool is_b0() const { return !direction.has_value(); }
    friend bool operator==(const DiffusionConfig&, const DiffusionConfig&) = default;
};

/// Diffusion configurations indexing the DWI axis of a stack.
struct Protocol {
    std::vector<DiffusionConfig> entries;

    std::size_t size() const { return entries.size(); }
    const DiffusionConfig& operator[](std::size_t i) const { return entries[i]; }

    void validate() const {
        if (entries.empty()) throw ValidationError("protocol has no entries");
        for (std::size_t i = 0; i < entries.size(); ++i) {
            const auto& e = entries[i];
            if (!std::isfinite(e.b) || e.b < 0.0)
                throw ValidationError("protocol entry " + std::to_string(i) + ": invalid b-value");
            if (e.direction) {
                const auto& g = *e.direction;
                const double n = std::sqrt(g[0] * g[0] + g[1] * g[1] + g[2] * g[2]);
                if (std::abs(n - 1.0) > 1e-9)
                    throw ValidationError("protocol entry " + std::to_string(i) + ": direction is not unit length");
                if (e.b == 0.0)
                    throw ValidationError("protocol entry " + std::to_string(i) + ": direction given for b = 0");
            } else if (e.b != 0.0) {
                throw ValidationError("protocol entry " + std::to_string(i) + ": b > 0 without a direction");
            }
        }
    }

    /// Distinct configurations in order of first appearance, and for each
    /// DWI index the position of its configuration in that list.
    std::pair<std::vector<DiffusionConfig>, std::vector<std::size_t>> distinct() const {
        std::vector<DiffusionConfig> uniq;
        std::vector<std::size_t> index_of(entries.size());
        for (std::size_t i = 0; i < entries.size(); ++i) {
            auto it = std::find(uniq.begin(), uniq.end(), entries[i]);
            if (it == uniq.end()) {
                index_of[i] = uniq.size();
                uniq.push_back(entries[i]);
            } else {
                index_of[i] = std::size_t(it - uniq.begin());
            }
        }
        return {uniq, index_of};
    }

    /// b0 plus the classic 6 non-collinear directions at every listed b-value.
    static Protocol standard(const std::vector<double>& b_values = {150.0, 600.0}) {
        const double s = 1.0 / std::sqrt(2.0);
        const std::array<Vec3, 6> dirs = {Vec3{s, s, 0.0}, Vec3{s, -s, 0.0}, Vec3{s, 0.0, s},
                                          Vec3{s, 0.0, -s}, Vec3{0.0, s, s}, Vec3{0.0, s, -s}};
        Protocol p;
        p.entries.push_back({0.0, std::nullopt});
        for (double b : b_values)
            for (const auto& g : dirs) p.entries.push_back({b, g});
        return p;
    }

    friend bool operator==(const Protocol&, const Protocol&) = default;
};

/// 4-D stack [Nx, Ny, Nave, Ndwi]. Frame k = dwi * Nave + ave is stored
/// contiguously as a (y, x) plane, which makes the raw buffer the
/// column-major Casorati matrix.
class ImageStack {
public:
    ImageStack() = default;
    ImageStack(int nx, int ny, int nave, int ndwi, Protocol protocol, double pixel_spacing_mm = 1.0)
        : nx_(nx), ny_(ny), nave_(nave), ndwi_(ndwi), spacing_(pixel_spacing_mm), protocol_(std::move(protocol)),
          data_(std::size_t(nx) * ny * nave * ndwi, 0.0) {
        if (nx < 1 || ny < 1 || nave < 1 || ndwi < 1) throw ValidationError("stack dimensions must be >= 1");
        if (protocol_.size() != std::size_t(ndwi))
            throw ValidationError("protocol lists " + std::to_string(protocol_.size()) + " entries but stack has " +
                                  std::to_string(ndwi) + " DWIs");
    }

    int nx() const { return nx_; }
    int ny() const { return ny_; }
    int nave() const { return nave_; }
    int ndwi() const { return ndwi_; }
    int frames() const { return nave_ * ndwi_; }
    std::size_t plane_size() const { return std::size_t(nx_) * ny_; }
    double pixel_spacing() const { return spacing_; }
    const Protocol& protocol() const { return protocol_; }
    const std::string& sequence() const { return sequence_; }
    void set_sequence(std::string s) { sequence_ = std::move(s); }

    static constexpr int frame_index(int ave, int dwi, int nave) { return dwi * nave + ave; }
    int frame_index(int ave, int dwi) const { return frame_index(ave, dwi, nave_); }
    int dwi_of(int frame) const { return frame / nave_; }
    const DiffusionConfig& config_of_frame(int frame) const { return protocol_[std::size_t(dwi_of(frame))]; }

    double& at(int x, int y, int frame) { return data_[std::size_t(frame) * plane_size() + std::size_t(y) * nx_ + x]; }
    double at(int x, int y, int frame) const {
        return data_[std::size_t(frame) * plane_size() + std::size_t(y) * nx_ + x];
    }

    std::span<double> frame_span(int k) { return {data_.data() + std::size_t(k) * plane_size(), plane_size()}; }
    std::span<const double> frame_span(int k) const {
        return {data_.data() + std::size_t(k) * plane_size(), plane_size()};
    }

    Image frame(int k) const {
        auto s = frame_span(k);
        return Image(nx_, ny_, std::vector<double>(s.begin(), s.end()));
    }

    void set_frame(int k, const Image& img) {
        if (img.nx() != nx_ || img.ny() != ny_) throw ValidationError("frame shape mismatch");
        std::copy(img.pixels().begin(), img.pixels().end(), frame_span(k).begin());
    }

    std::span<double> data() { return data_; }
    std::span<const double> data() const { return data_; }

    /// Same geometry and protocol, zero data.
    ImageStack blank_like() const {
        ImageStack s(nx_, ny_, nave_, ndwi_, protocol_, spacing_);
        s.sequence_ = sequence_;
        return s;
    }

    friend bool operator==(const ImageStack&, const ImageStack&) = default;

private:
    int nx_ = 0, ny_ = 0, nave_ = 0, ndwi_ = 0;
    double spacing_ = 1.0;
    Protocol protocol_;
    std::string sequence_;
    std::vector<double> data_;
};

/// Myocardium mask and blood-pool center for one slice.
struct Annotations {
    Mask myo_mask;
    Vec2 blood_pool_center;

    void validate() const {
        if (myo_mask.count() == 0) throw ValidationError("myocardium mask is empty");
        const auto& c = blood_pool_center;
        if (!std::isfinite(c.x) || !std::isfinite(c.y) || c.x < 0 || c.y < 0 || c.x > myo_mask.nx() - 1 ||
            c.y > myo_mask.ny() - 1)
            throw ValidationError("blood-pool center lies outside the image");
        const int px = int(std::lround(c.x)), py = int(std::lround(c.y));
        if (myo_mask(px, py)) throw ValidationError("blood-pool center lies on a myocardium pixel");
    }

    friend bool operator==(const Annotations&, const Annotations&) = default;
};

struct Dataset {
    ImageStack stack;
    Annotations annotations;
};

// ---------------------------------------------------------------- Casorati

/// (Nx*Ny) x (Nave*Ndwi) unfolding; column k holds frame k = dwi*Nave + ave.
inline Eigen::MatrixXd flatten_casorati(const ImageStack& stack) {
    return Eigen::Map<const Eigen::MatrixXd>(stack.data().data(), Eigen::Index(stack.plane_size()),
                                             Eigen::Index(stack.frames()));
}

/// Inverse of flatten_casorati using `like` for geometry and protocol.
inline ImageStack unflatten_casorati(const Eigen::MatrixXd& m, const ImageStack& like) {
    if (m.rows() != Eigen::Index(like.plane_size()) || m.cols() != like.frames())
        throw ValidationError("Casorati matrix shape does not match stack");
    ImageStack out = like.blank_like();
    std::copy(m.data(), m.data() + m.size(), out.data().begin());
    return out;
}

// ---------------------------------------------------------------- cropping

struct CropResult {
    ImageStack stack;
    int x0 = 0;  ///< column of the window origin in the input
    int y0 = 0;  ///< row of the window origin in the input
};

/// Window of size (w, h) centered on the image center (floor bias on odd
/// remainders) plus `offset`.
inline CropResult central_crop(const ImageStack& stack, int w, int h, int dx = 0, int dy = 0) {
    if (w < 1 || h < 1 || w > stack.nx() || h > stack.ny())
        throw ValidationError("crop size exceeds stack dimensions");
    const int x0 = (stack.nx() - w) / 2 + dx;
    const int y0 = (stack.ny() - h) / 2 + dy;
    if (x0 < 0 || y0 < 0 || x0 + w > stack.nx() || y0 + h > stack.ny())
        throw ValidationError("crop window out of bounds");
    ImageStack out(w, h, stack.nave(), stack.ndwi(), stack.protocol(), stack.pixel_spacing());
    out.set_sequence(stack.sequence());
    for (int k = 0; k < stack.frames(); ++k)
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x) out.at(x, y, k) = stack.at(x0 + x, y0 + y, k);
    return {std::move(out), x0, y0};
}

/// Re-express annotations in the coordinates of a crop window.
inline Annotations crop_annotations(const Annotations& ann, int x0, int y0, int w, int h) {
    Annotations out{Mask(w, h), {ann.blood_pool_center.x - x0, ann.blood_pool_center.y - y0}};
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x)
            if (ann.myo_mask.inside(x0 + x, y0 + y)) out.myo_mask(x, y) = ann.myo_mask(x0 + x, y0 + y);
    return out;
}

// ---------------------------------------------------------------- binary I/O

namespace io {

inline std::vector<char> read_file(const std::filesystem::path& p) {
    std::ifstream f(p, std::ios::binary);
    if (!f) throw ValidationError("cannot open file: " + p.string());
    return std::vector<char>(std::istreambuf_iterator<char>(f), {});
}

inline void write_file(const std::filesystem::path& p, const void* data, std::size_t bytes) {
    std::ofstream f(p, std::ios::binary | std::ios::trunc);
    if (!f) throw ValidationError("cannot write file: " + p.string());
    f.write(static_cast<const char*>(data), std::streamsize(bytes));
    if (!f) throw ValidationError("write failed: " + p.string());
}

inline void write_text(const std::filesystem::path& p, const std::string& text) {
    write_file(p, text.data(), text.size());
}

/// Little-endian float32 planes, no header.
inline void write_f32(const std::filesystem::path& p, std::span<const double> values) {
    std::vector<float> buf(values.begin(), values.end());
    write_file(p, buf.data(), buf.size() * sizeof(float));
}

inline std::vector<double> read_f32(const std::filesystem::path& p, std::size_t expected_count) {
    const auto raw = read_file(p);
    if (raw.size() != expected_count * sizeof(float))
        throw ValidationError("dimension mismatch: " + p.string() + " holds " + std::to_string(raw.size()) +
                              " bytes, expected " + std::to_string(expected_count * sizeof(float)));
    std::vector<double> out(expected_count);
    for (std::size_t i = 0; i < expected_count; ++i) {
        float v;
        std::memcpy(&v, raw.data() + i * sizeof(float), sizeof(float));
        out[i] = v;
    }
    return out;
}

inline void write_mask(const std::filesystem::path& p, const Mask& m) {
    write_file(p, m.pixels().data(), m.size());
}

inline Mask read_mask(const std::filesystem::path& p, int nx, int ny) {
    const auto raw = read_file(p);
    if (raw.size() != std::size_t(nx) * ny) throw ValidationError("dimension mismatch: " + p.string());
    Mask m(nx, ny);
    for (std::size_t i = 0; i < raw.size(); ++i) {
        const auto v = static_cast<std::uint8_t>(raw[i]);
        if (v > 1) throw ValidationError("mask values must be 0 or 1: " + p.string());
        m[i] = v;
    }
    return m;
}

}  // namespace io

/// Round every sample to float32 precision, i.e. what a save/load cycle keeps.
inline void round_to_float32(ImageStack& stack) {
    for (double& v : stack.data()) v = double(float(v));
}

// ---------------------------------------------------------------- manifest

inline nlohmann::json protocol_to_json(const Protocol& p) {
    auto arr = nlohmann::json::array();
    for (const auto& e : p.entries) {
        const Vec3 g = e.direction.value_or(Vec3{0.0, 0.0, 0.0});
        arr.push_back({{"b", e.b}, {"gx", g[0]}, {"gy", g[1]}, {"gz", g[2]}});
    }
    return arr;
}

inline Protocol protocol_from_json(const nlohmann::json& arr) {
    if (!arr.is_array()) throw ValidationError("protocol must be an array");
    Protocol p;
    for (const auto& e : arr) {
        DiffusionConfig c;
        c.b = e.at("b").get<double>();
        const Vec3 g{e.at("gx").get<double>(), e.at("gy").get<double>(), e.at("gz").get<double>()};
        if (c.b != 0.0 || g != Vec3{0.0, 0.0, 0.0}) c.direction = g;
        p.entries.push_back(c);
    }
    p.validate();
    return p;
}

/// Writes <dir>/<name>.json plus <name>_stack.bin and <name>_mask.bin.
inline std::filesystem::path save_dataset(const std::filesystem::path& dir, const std::string& name,
                                          const ImageStack& stack, const Annotations& ann) {
    std::filesystem::create_directories(dir);
    const std::string stack_file = name + "_stack.bin";
    const std::string mask_file = name + "_mask.bin";
    io::write_f32(dir / stack_file, stack.data());
    io::write_mask(dir / mask_file, ann.myo_mask);
    nlohmann::json j;
    j["stack_file"] = stack_file;
    j["dims"] = {stack.nx(), stack.ny(), stack.nave(), stack.ndwi()};
    j["pixel_spacing_mm"] = stack.pixel_spacing();
    j["protocol"] = protocol_to_json(stack.protocol());
    j["mask_file"] = mask_file;
    j["center"] = {ann.blood_pool_center.x, ann.blood_pool_center.y};
    if (!stack.sequence().empty()) j["sequence"] = stack.sequence();
    const auto path = dir / (name + ".json");
    io::write_text(path, j.dump(2) + "\n");
    return path;
}

inline Dataset load_dataset(const std::filesystem::path& manifest_path) {
    if (!std::filesystem::exists(manifest_path))
        throw ValidationError("missing file: " + manifest_path.string());
    nlohmann::json j;
    try {
        std::ifstream f(manifest_path);
        j = nlohmann::json::parse(f);
    } catch (const nlohmann::json::exception& e) {
        throw ValidationError("malformed manifest " + manifest_path.string() + ": " + e.what());
    }
    try {
        const auto base = manifest_path.parent_path();
        const auto dims = j.at("dims").get<std::vector<int>>();
        if (dims.size() != 4) throw ValidationError("dims must list [Nx, Ny, Nave, Ndwi]");
        Protocol protocol = protocol_from_json(j.at("protocol"));
        if (protocol.size() != std::size_t(dims[3]))
            throw ValidationError("dimension mismatch: manifest declares " + std::to_string(dims[3]) +
                                  " DWIs but protocol lists " + std::to_string(protocol.size()));
        ImageStack stack(dims[0], dims[1], dims[2], dims[3], std::move(protocol),
                         j.value("pixel_spacing_mm", 1.0));
        if (j.contains("sequence")) stack.set_sequence(j["sequence"].get<std::string>());

        const auto values = io::read_f32(base / j.at("stack_file").get<std::string>(), stack.data().size());
        for (std::size_t i = 0; i < values.size(); ++i) {
            if (!std::isfinite(values[i])) throw ValidationError("stack contains NaN/Inf");
            if (values[i] < 0.0) throw ValidationError("stack contains negative signal");
        }
        std::copy(values.begin(), values.end(), stack.data().begin());

        Annotations ann;
        ann.myo_mask = io::read_mask(base / j.at("mask_file").get<std::string>(), dims[0], dims[1]);
        const auto c = j.at("center").get<std::vector<double>>();
        if (c.size() != 2) throw ValidationError("center must be [x, y]");
        ann.blood_pool_center = {c[0], c[1]};
        ann.validate();
        return {std::move(stack), std::move(ann)};
    } catch (const nlohmann::json::exception& e) {
        throw ValidationError("invalid manifest " + manifest_path.string() + ": " + e.what());
    }
}

}  // namespace dtcmr
