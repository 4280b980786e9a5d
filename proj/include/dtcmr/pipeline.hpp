#pragma once

#include <chrono>
#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "dtcmr/common.hpp"
#include "dtcmr/dti.hpp"
#include "dtcmr/evalm.hpp"
#include "dtcmr/lowrank.hpp"
#include "dtcmr/phantom.hpp"
#include "dtcmr/register.hpp"
#include "dtcmr/select.hpp"
#include "dtcmr/stack.hpp"

namespace dtcmr {

/// A failure inside a named pipeline stage.
class StageError : public std::runtime_error {
public:
    StageError(std::string stage, const std::string& what)
        : std::runtime_error("stage '" + stage + "' failed: " + what), stage_(std::move(stage)) {}
    const std::string& stage() const { return stage_; }

private:
    std::string stage_;
};

enum class Selection { automatic, manual, none };

inline std::string to_string(Selection s) {
    switch (s) {
        case Selection::automatic: return "auto";
        case Selection::manual: return "manual";
        case Selection::none: return "none";
    }
    return "?";
}

inline Selection selection_from_string(const std::string& s) {
    if (s == "auto") return Selection::automatic;
    if (s == "manual") return Selection::manual;
    if (s == "none") return Selection::none;
    throw ValidationError("unknown selection mode: " + s);
}

/// Default engine for a sequence label: affine for SE, rigid otherwise.
inline Engine engine_for_sequence(const std::string& sequence) {
    return (sequence == "SE" || sequence == "SE-EPI") ? Engine::affine : Engine::rigid;
}

struct PipelineConfig {
    std::filesystem::path dataset;
    std::string arm = "lowrank+auto";
    std::optional<Engine> engine;  ///< empty: chosen from the dataset's sequence label
    ReferenceMode reference = ReferenceMode::lowrank;
    int rank = 6;
    int reference_rank = 1;
    int passes = 2;
    int upsample = 100;
    int pyramid_levels = 3;
    int max_iter = 200;
    bool edge_metric = true;  ///< rigid/affine match gradient magnitudes
    Selection selection = Selection::automatic;
    std::filesystem::path manual_keep;
    Grouping grouping = Grouping::per_config;
    int spokes = 24;
    std::optional<std::array<int, 2>> crop;  ///< (w, h); empty keeps the full frame
    std::array<int, 2> crop_offset{0, 0};
    std::filesystem::path output = "out";
    unsigned threads = 0;
    std::uint64_t seed = 1;
    std::optional<std::string> resume;  ///< register | select | fit | evaluate
    std::filesystem::path truth;        ///< optional phantom truth manifest

    RegisterConfig register_config(const std::string& sequence) const {
        RegisterConfig rc;
        rc.engine = engine.value_or(engine_for_sequence(sequence));
        rc.reference = reference;
        rc.rank = rank;
        rc.reference_rank = reference_rank;
        rc.passes = passes;
        rc.upsample = upsample;
        rc.optimizer.pyramid_levels = pyramid_levels;
        rc.optimizer.max_iterations = max_iter;
        rc.optimizer.edge_metric = edge_metric;
        rc.threads = threads;
        return rc;
    }

    void validate() const {
        if (rank < 1) throw ValidationError("rank must be >= 1");
        if (reference_rank < 1) throw ValidationError("reference rank must be >= 1");
        if (passes < 1) throw ValidationError("passes must be >= 1");
        if (upsample < 1) throw ValidationError("upsample must be >= 1");
        if (pyramid_levels < 1) throw ValidationError("pyramid levels must be >= 1");
        if (max_iter < 1) throw ValidationError("max iterations must be >= 1");
        if (spokes < 8) throw ValidationError("spokes must be >= 8");
        if (selection == Selection::manual && manual_keep.empty())
            throw ValidationError("manual selection needs a keep-list (--manual-keep)");
        if (resume && *resume != "register" && *resume != "select" && *resume != "fit" && *resume != "evaluate")
            throw ValidationError("unknown resume stage: " + *resume);
    }
};

inline const std::vector<std::string>& arm_names() {
    static const std::vector<std::string> names{"dft+manual", "lowrank+manual", "lowrank+auto", "custom"};
    return names;
}

/// Arm presets: the only differences between the compared pipelines.
inline void apply_arm(PipelineConfig& cfg, const std::string& arm) {
    cfg.arm = arm;
    if (arm == "dft+manual") {
        cfg.engine = Engine::dft;
        cfg.reference = ReferenceMode::brightest;
        cfg.selection = Selection::manual;
    } else if (arm == "lowrank+manual") {
        cfg.engine.reset();
        cfg.reference = ReferenceMode::lowrank;
        cfg.selection = Selection::manual;
    } else if (arm == "lowrank+auto") {
        cfg.engine.reset();
        cfg.reference = ReferenceMode::lowrank;
        cfg.selection = Selection::automatic;
    } else if (arm != "custom") {
        throw ValidationError("unknown arm: " + arm);
    }
}

inline bool metric_is_edge(const std::string& m) {
    if (m == "edge") return true;
    if (m == "intensity") return false;
    throw ValidationError("unknown metric: " + m);
}

/// Apply config-file keys; unknown keys are rejected.
inline void apply_config_json(PipelineConfig& cfg, const nlohmann::json& j) {
    if (!j.is_object()) throw ValidationError("config file must hold a JSON object");
    try {
        for (const auto& [key, val] : j.items()) {
            if (key == "dataset") cfg.dataset = val.get<std::string>();
            else if (key == "arm") apply_arm(cfg, val.get<std::string>());
            else if (key == "engine") {
                const auto e = val.get<std::string>();
                if (e == "auto") cfg.engine.reset(); else cfg.engine = engine_from_string(e);
            }
            else if (key == "reference") cfg.reference = reference_mode_from_string(val.get<std::string>());
            else if (key == "rank") cfg.rank = val.get<int>();
            else if (key == "reference_rank") cfg.reference_rank = val.get<int>();
            else if (key == "passes") cfg.passes = val.get<int>();
            else if (key == "upsample") cfg.upsample = val.get<int>();
            else if (key == "pyramid_levels") cfg.pyramid_levels = val.get<int>();
            else if (key == "max_iter") cfg.max_iter = val.get<int>();
            else if (key == "metric") cfg.edge_metric = metric_is_edge(val.get<std::string>());
            else if (key == "selection") cfg.selection = selection_from_string(val.get<std::string>());
            else if (key == "manual_keep") cfg.manual_keep = val.get<std::string>();
            else if (key == "grouping") {
                const auto g = val.get<std::string>();
                if (g == "per_config") cfg.grouping = Grouping::per_config;
                else if (g == "global") cfg.grouping = Grouping::global;
                else throw ValidationError("unknown grouping: " + g);
            }
            else if (key == "spokes") cfg.spokes = val.get<int>();
            else if (key == "crop") cfg.crop = val.get<std::array<int, 2>>();
            else if (key == "crop_offset") cfg.crop_offset = val.get<std::array<int, 2>>();
            else if (key == "output") cfg.output = val.get<std::string>();
            else if (key == "threads") cfg.threads = val.get<unsigned>();
            else if (key == "seed") cfg.seed = val.get<std::uint64_t>();
            else if (key == "truth") cfg.truth = val.get<std::string>();
            else throw ValidationError("unknown config key: " + key);
        }
    } catch (const nlohmann::json::exception& e) {
        throw ValidationError(std::string("config file: ") + e.what());
    }
}

// ------------------------------------------------------------ truth comparison

struct TruthComparison {
    std::vector<double> residual_px;   ///< per frame, RMS over the myocardium
    std::vector<double> residual_deg;  ///< per frame
    double ha_mae_deg = 0.0;
    int tp = 0, fp = 0, tn = 0, fn = 0;  ///< positive = corrupted and rejected
    double tensor_rmse = 0.0;

    double sensitivity() const { return tp + fn > 0 ? double(tp) / double(tp + fn) : 1.0; }
    double specificity() const { return tn + fp > 0 ? double(tn) / double(tn + fp) : 1.0; }
    double max_residual_px() const {
        return residual_px.empty() ? 0.0 : *std::max_element(residual_px.begin(), residual_px.end());
    }
    double max_residual_deg() const {
        return residual_deg.empty() ? 0.0 : *std::max_element(residual_deg.begin(), residual_deg.end());
    }

    nlohmann::json to_json() const {
        double mean_px = 0.0;
        for (double v : residual_px) mean_px += v;
        if (!residual_px.empty()) mean_px /= double(residual_px.size());
        return {{"residual_px_mean", mean_px},        {"residual_px_max", max_residual_px()},
                {"residual_deg_max", max_residual_deg()}, {"ha_mae_deg", ha_mae_deg},
                {"true_positive", tp},                {"false_positive", fp},
                {"true_negative", tn},                {"false_negative", fn},
                {"tensor_rmse", tensor_rmse}};
    }
};

/// Residual motion of each frame after correction: the composite of the
/// estimated and true transforms, relative to the mean composite (the
/// reference's own placement is arbitrary), measured over `region`.
inline void residual_motion(const TransformSet& estimated, const std::vector<PlanarTransform>& truth,
                            const Mask& region, std::vector<double>& px, std::vector<double>& deg) {
    if (estimated.size() != truth.size()) throw ValidationError("compare_to_truth: frame count mismatch");
    const std::size_t n = truth.size();
    std::vector<PlanarTransform> comp(n);
    Eigen::Matrix2d mean_a = Eigen::Matrix2d::Zero();
    Vec2 mean_t{};
    Vec2 c = truth.empty() ? Vec2{} : truth.front().center();
    for (std::size_t k = 0; k < n; ++k) {
        comp[k] = compose(estimated[k], truth[k]).recentered(c);
        mean_a += comp[k].matrix();
        mean_t = mean_t + comp[k].offset();
    }
    mean_a /= double(std::max<std::size_t>(n, 1));
    mean_t = (1.0 / double(std::max<std::size_t>(n, 1))) * mean_t;
    const double mean_theta = std::atan2(mean_a(1, 0) - mean_a(0, 1), mean_a(0, 0) + mean_a(1, 1));

    std::vector<Vec2> pts;
    for (int y = 0; y < region.ny(); ++y)
        for (int x = 0; x < region.nx(); ++x)
            if (region(x, y)) pts.push_back({double(x), double(y)});
    px.assign(n, 0.0);
    deg.assign(n, 0.0);
    for (std::size_t k = 0; k < n; ++k) {
        double ss = 0.0;
        for (const auto& p : pts) {
            const Vec2 d = p - c;
            const Vec2 q = comp[k].apply(p);
            const Vec2 m{mean_a(0, 0) * d.x + mean_a(0, 1) * d.y + c.x + mean_t.x,
                         mean_a(1, 0) * d.x + mean_a(1, 1) * d.y + c.y + mean_t.y};
            const Vec2 e = q - m;
            ss += e.x * e.x + e.y * e.y;
        }
        px[k] = pts.empty() ? 0.0 : std::sqrt(ss / double(pts.size()));
        double dth = comp[k].theta() - mean_theta;
        deg[k] = std::abs(std::remainder(dth, 2.0 * std::numbers::pi)) * 180.0 / std::numbers::pi;
    }
}

/// HA error is axial: differences are wrapped into [-90, 90].
inline double ha_difference(double a, double b) { return std::remainder(a - b, 180.0); }

inline TruthComparison compare_to_truth(const TransformSet& transforms, const FrameVerdicts& verdicts,
                                        const TensorField& field, const GroundTruth& truth) {
    const Mask& mask = truth.annotations.myo_mask;
    if (field.nx != mask.nx() || field.ny != mask.ny()) throw ValidationError("compare_to_truth: shape mismatch");
    TruthComparison tc;
    residual_motion(transforms, truth.transforms, mask, tc.residual_px, tc.residual_deg);

    double ha_sum = 0.0, d_ss = 0.0;
    std::size_t ha_n = 0, d_n = 0;
    for (std::size_t i = 0; i < field.size(); ++i) {
        if (!mask[i]) continue;
        if (field.ha_valid(i)) {
            ha_sum += std::abs(ha_difference(field.ha[i], truth.ha_map[i]));
            ++ha_n;
        }
        if (field.fit_valid(i)) {
            for (int c = 0; c < 6; ++c) {
                const double e = field.d[i][std::size_t(c)] - truth.tensors.d[i][std::size_t(c)];
                d_ss += e * e;
            }
            d_n += 6;
        }
    }
    tc.ha_mae_deg = ha_n ? ha_sum / double(ha_n) : std::numeric_limits<double>::quiet_NaN();
    tc.tensor_rmse = d_n ? std::sqrt(d_ss / double(d_n)) : std::numeric_limits<double>::quiet_NaN();

    for (std::size_t k = 0; k < verdicts.keep.size(); ++k) {
        const bool corrupted = std::binary_search(truth.corrupted.begin(), truth.corrupted.end(), int(k));
        const bool rejected = !verdicts.keep[k];
        tc.tp += corrupted && rejected;
        tc.fn += corrupted && !rejected;
        tc.fp += !corrupted && rejected;
        tc.tn += !corrupted && !rejected;
    }
    return tc;
}

// ------------------------------------------------------------ pipeline

struct StageTiming {
    std::string stage;
    double seconds = 0.0;
};

struct PipelineResult {
    Dataset cropped;
    ImageStack registered;
    TransformSet transforms;
    FrameVerdicts verdicts;
    TensorField field;
    EvaluationReport report;
    std::vector<StageTiming> timings;
    std::optional<TruthComparison> truth;
};

/// Round fitted quantities to their float32 file representation and
/// recompute the eigensystems, so a resumed run sees identical values.
inline void round_field_to_float32(TensorField& f) {
    for (std::size_t i = 0; i < f.size(); ++i) {
        f.s0[i] = double(float(f.s0[i]));
        f.ha[i] = double(float(f.ha[i]));
        for (double& v : f.d[i]) v = double(float(v));
        if (f.fit_valid(i)) f.eig[i] = eig3_sym(to_matrix(f.d[i]));
    }
}

namespace detail {

template <class Fn>
auto run_stage(const std::string& name, std::vector<StageTiming>& timings, Fn&& fn) {
    const auto t0 = std::chrono::steady_clock::now();
    auto finish = [&] {
        const double s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        timings.push_back({name, s});
        log::info("stage " + name + ": " + std::to_string(s) + " s");
    };
    try {
        if constexpr (std::is_void_v<decltype(fn())>) {
            fn();
            finish();
        } else {
            auto r = fn();
            finish();
            return r;
        }
    } catch (const StageError&) {
        throw;
    } catch (const std::exception& e) {
        throw StageError(name, e.what());
    }
}

inline std::string read_text(const std::filesystem::path& p) {
    std::ifstream f(p);
    if (!f) throw ValidationError("missing file: " + p.string());
    std::stringstream ss;
    ss << f.rdbuf();
    return ss.str();
}

inline int resume_rank(const std::optional<std::string>& r) {
    if (!r) return 0;
    if (*r == "register") return 1;
    if (*r == "select") return 2;
    if (*r == "fit") return 3;
    return 4;  // evaluate
}

}  // namespace detail

/// crop -> low-rank -> register -> select -> average -> fit -> evaluate ->
/// report. Every intermediate is written to cfg.output.
inline PipelineResult run_pipeline(const PipelineConfig& cfg) {
    cfg.validate();
    namespace fs = std::filesystem;
    const fs::path out = cfg.output;
    fs::create_directories(out);
    PipelineResult res;
    auto& tm = res.timings;
    const int resume = detail::resume_rank(cfg.resume);

    // Inputs that are validated before any stage runs.
    std::vector<int> keep_list;
    if (cfg.selection == Selection::manual && resume <= 2)
        keep_list = parse_keep_list(detail::read_text(cfg.manual_keep));

    if (resume == 0) {
        Dataset ds = load_dataset(cfg.dataset);
        res.cropped = detail::run_stage("crop", tm, [&] {
            if (!cfg.crop) return ds;
            auto c = central_crop(ds.stack, (*cfg.crop)[0], (*cfg.crop)[1], cfg.crop_offset[0], cfg.crop_offset[1]);
            Dataset d{std::move(c.stack),
                      crop_annotations(ds.annotations, c.x0, c.y0, (*cfg.crop)[0], (*cfg.crop)[1])};
            d.annotations.validate();
            return d;
        });
        save_dataset(out, "cropped", res.cropped.stack, res.cropped.annotations);
    } else {
        res.cropped = load_dataset(out / "cropped.json");
    }
    const ImageStack& stack = res.cropped.stack;
    const Annotations& ann = res.cropped.annotations;
    const RegisterConfig rc = cfg.register_config(stack.sequence());

    if (resume <= 1) {
        RegistrationInputs inputs = detail::run_stage("lowrank", tm, [&] {
            auto in = make_registration_inputs(stack, rc);
            io::write_f32(out / "reference.bin", in.reference.pixels());
            return in;
        });
        detail::run_stage("register", tm, [&] {
            auto [reg, ts] = register_stack_with(stack, inputs, rc);
            round_to_float32(reg);
            res.registered = std::move(reg);
            res.transforms = std::move(ts);
            save_dataset(out, "registered", res.registered, ann);
            io::write_text(out / "transforms.csv", transforms_to_csv(res.transforms));
        });
    } else {
        res.registered = load_dataset(out / "registered.json").stack;
        res.transforms = transforms_from_csv(detail::read_text(out / "transforms.csv"), Image(stack.nx(), stack.ny()).center());
    }

    if (resume <= 2) {
        res.verdicts = detail::run_stage("select", tm, [&] {
            FrameVerdicts v;
            switch (cfg.selection) {
                case Selection::automatic:
                    v = reject_outliers(frame_correlations(res.registered, donut_roi(ann), cfg.grouping));
                    break;
                case Selection::manual: v = manual_verdicts(res.registered.frames(), keep_list); break;
                case Selection::none: v = keep_all_verdicts(res.registered.frames()); break;
            }
            io::write_text(out / "verdicts.csv", verdicts_to_csv(v, res.registered));
            return v;
        });
    } else {
        res.verdicts = verdicts_from_csv(detail::read_text(out / "verdicts.csv"));
    }

    if (resume <= 3) {
        const ConfigMeans means = detail::run_stage("average", tm, [&] {
            auto m = average_by_config(res.registered, res.verdicts.keep);
            std::vector<double> planes;
            for (const auto& img : m.images) planes.insert(planes.end(), img.pixels().begin(), img.pixels().end());
            io::write_f32(out / "means.bin", planes);
            return m;
        });
        res.field = detail::run_stage("fit", tm, [&] {
            auto f = fit_tensor(means, ann.myo_mask, cfg.threads);
            compute_helix_angles(f, ann.blood_pool_center);
            round_field_to_float32(f);
            save_tensor_field(out / "tensor.bin", f);
            return f;
        });
    } else {
        res.field = load_tensor_field(out / "tensor.bin", stack.nx(), stack.ny());
    }

    res.report = detail::run_stage("evaluate", tm, [&] {
        auto r = evaluate_field(res.field, ann, cfg.spokes);
        r.frames_rejected = res.verdicts.rejected();
        r.frames_total = res.verdicts.keep.size();
        return r;
    });
    detail::run_stage("report", tm, [&] {
        emit_report(out, res.report, res.field);
        std::ostringstream os;
        os << "stage,seconds\n";
        for (const auto& t : tm) os << t.stage << ',' << t.seconds << '\n';
        io::write_text(out / "timings.csv", os.str());
    });

    if (!cfg.truth.empty()) {
        const GroundTruth truth = load_truth(cfg.truth);
        res.truth = compare_to_truth(res.transforms, res.verdicts, res.field, truth);
        io::write_text(out / "truth_comparison.json", res.truth->to_json().dump(2) + "\n");
    }
    return res;
}

// ------------------------------------------------------------ arm comparison

struct ArmRow {
    std::string registration;  ///< dft | lowrank
    std::string selection;     ///< auto | manual | none
    EvaluationReport report;
};

/// One pipeline per {dft, lowrank} x {auto, manual, none}; manual rows are
/// skipped when no keep-list is configured.
inline std::vector<ArmRow> compare_arms(const PipelineConfig& base) {
    std::vector<ArmRow> rows;
    for (const std::string reg : {"dft", "lowrank"})
        for (const std::string sel : {"auto", "manual", "none"}) {
            if (sel == "manual" && base.manual_keep.empty()) continue;
            PipelineConfig cfg = base;
            cfg.resume.reset();
            cfg.arm = reg + "+" + sel;
            if (reg == "dft") {
                cfg.engine = Engine::dft;
                cfg.reference = ReferenceMode::brightest;
            } else {
                cfg.engine = base.engine;
                cfg.reference = ReferenceMode::lowrank;
            }
            cfg.selection = selection_from_string(sel);
            cfg.output = base.output / (reg + "_" + sel);
            rows.push_back({reg, sel, run_pipeline(cfg).report});
        }
    return rows;
}

inline std::string arms_to_csv(const std::vector<ArmRow>& rows) {
    std::ostringstream os;
    os << "registration,selection,r_square_mean,r_square_std,rmse_mean,rmse_std,nega1,nega2,frames_rejected\n";
    for (const auto& r : rows) {
        const auto& p = r.report.profile;
        os << r.registration << ',' << r.selection << ',' << format_double(p.r_square_mean) << ','
           << format_double(p.r_square_std) << ',' << format_double(p.rmse_mean) << ',' << format_double(p.rmse_std)
           << ',' << format_double(r.report.neg.nega1) << ',' << format_double(r.report.neg.nega2) << ','
           << r.report.frames_rejected << '\n';
    }
    return os.str();
}

// ------------------------------------------------------------ benchmark

struct BenchRow {
    std::string engine;
    int frame_index = 0;
    double seconds = 0.0;
};

struct BenchTable {
    std::vector<BenchRow> rows;  ///< one per engine per frame
    std::map<std::string, double> totals;
};

/// Times dft, rigid and affine on the same low-rank inputs, single-threaded.
inline BenchTable bench_registration(const ImageStack& stack, int max_frames, RegisterConfig rc) {
    rc.threads = 1;
    rc.reference = ReferenceMode::lowrank;
    const RegistrationInputs inputs = make_registration_inputs(stack, rc);
    const int n = std::min(max_frames, stack.frames());
    BenchTable table;
    for (Engine e : {Engine::dft, Engine::rigid, Engine::affine}) {
        double total = 0.0;
        for (int k = 0; k < n; ++k) {
            const auto t0 = std::chrono::steady_clock::now();
            estimate_frame(inputs.reference, inputs.moving_frame(stack, k), e, rc);
            const double s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
            table.rows.push_back({to_string(e), k, s});
            total += s;
        }
        table.totals[to_string(e)] = total;
    }
    return table;
}

inline std::string bench_to_csv(const BenchTable& t) {
    std::ostringstream os;
    os << "engine,frame_index,seconds\n";
    for (const auto& r : t.rows) os << r.engine << ',' << r.frame_index << ',' << r.seconds << '\n';
    return os.str();
}

inline std::string bench_totals_to_csv(const BenchTable& t) {
    std::ostringstream os;
    os << "engine,frames,total_seconds\n";
    for (const std::string e : {"dft", "rigid", "affine"}) {
        const auto frames = std::count_if(t.rows.begin(), t.rows.end(), [&](const BenchRow& r) { return r.engine == e; });
        os << e << ',' << frames << ',' << t.totals.at(e) << '\n';
    }
    return os.str();
}

}  // namespace dtcmr
