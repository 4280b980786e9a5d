// dtcmr: command-line front end for the DT-CMR processing pipeline.

#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "dtcmr/dtcmr.hpp"

namespace {

using namespace dtcmr;
namespace fs = std::filesystem;

constexpr int kOk = 0;
constexpr int kValidation = 2;
constexpr int kStage = 3;

// Options shared by run and compare-arms. Empty optionals were not given.
struct PipelineFlags {
    std::string dataset;
    fs::path config;
    std::optional<std::string> arm, engine, reference, metric, selection, manual_keep, grouping, output, resume, truth;
    std::optional<int> rank, reference_rank, passes, upsample, pyramid_levels, max_iter, spokes;
    std::vector<int> crop, crop_offset;
    std::optional<unsigned> threads;
    std::optional<std::uint64_t> seed;

    void add_to(CLI::App* app, bool with_resume) {
        app->add_option("--dataset", dataset, "dataset manifest (JSON)");
        app->add_option("--config", config, "JSON config file with pipeline keys");
        app->add_option("--arm", arm, "dft+manual | lowrank+manual | lowrank+auto | custom");
        app->add_option("--engine", engine, "none | dft | rigid | affine | auto");
        app->add_option("--reference", reference, "lowrank | brightest");
        app->add_option("--rank", rank, "rank of the denoised moving frames");
        app->add_option("--reference-rank", reference_rank, "rank of the registration reference");
        app->add_option("--passes", passes, "low-rank registration passes");
        app->add_option("--upsample", upsample, "DFT upsampling factor");
        app->add_option("--pyramid-levels", pyramid_levels);
        app->add_option("--max-iter", max_iter, "optimizer iterations per pyramid level");
        app->add_option("--metric", metric, "edge | intensity (rigid/affine similarity)");
        app->add_option("--selection", selection, "auto | manual | none");
        app->add_option("--manual-keep", manual_keep, "keep-list file for manual selection");
        app->add_option("--grouping", grouping, "per_config | global");
        app->add_option("--spokes", spokes, "number of transmural spokes");
        app->add_option("--crop", crop, "crop width and height")->expected(2);
        app->add_option("--crop-offset", crop_offset, "crop offset dx dy")->expected(2);
        app->add_option("--output", output, "output directory");
        app->add_option("--threads", threads, "worker threads (0 = all cores)");
        app->add_option("--seed", seed);
        app->add_option("--truth", truth, "phantom truth manifest to compare against");
        if (with_resume) app->add_option("--resume", resume, "register | select | fit | evaluate");
    }

    // defaults < arm preset < config file < flags
    PipelineConfig resolve() const {
        PipelineConfig cfg;
        nlohmann::json file = nlohmann::json::object();
        if (!config.empty()) {
            std::ifstream f(config);
            if (!f) throw ValidationError("missing config file: " + config.string());
            try {
                file = nlohmann::json::parse(f);
            } catch (const nlohmann::json::exception& e) {
                throw ValidationError(std::string("config file: ") + e.what());
            }
            if (!file.is_object()) throw ValidationError("config file must hold a JSON object");
        }
        std::string arm_name = cfg.arm;
        if (arm) arm_name = *arm;
        else if (file.contains("arm")) arm_name = file["arm"].get<std::string>();
        apply_arm(cfg, arm_name);
        file.erase("arm");
        apply_config_json(cfg, file);

        if (!dataset.empty()) cfg.dataset = dataset;
        if (engine) {
            if (*engine == "auto") cfg.engine.reset(); else cfg.engine = engine_from_string(*engine);
        }
        if (reference) cfg.reference = reference_mode_from_string(*reference);
        if (rank) cfg.rank = *rank;
        if (reference_rank) cfg.reference_rank = *reference_rank;
        if (passes) cfg.passes = *passes;
        if (upsample) cfg.upsample = *upsample;
        if (pyramid_levels) cfg.pyramid_levels = *pyramid_levels;
        if (max_iter) cfg.max_iter = *max_iter;
        if (metric) cfg.edge_metric = metric_is_edge(*metric);
        if (selection) cfg.selection = selection_from_string(*selection);
        if (manual_keep) cfg.manual_keep = *manual_keep;
        if (grouping) apply_config_json(cfg, {{"grouping", *grouping}});
        if (spokes) cfg.spokes = *spokes;
        if (!crop.empty()) cfg.crop = std::array<int, 2>{crop[0], crop[1]};
        if (!crop_offset.empty()) cfg.crop_offset = {crop_offset[0], crop_offset[1]};
        if (output) cfg.output = *output;
        if (threads) cfg.threads = *threads;
        if (seed) cfg.seed = *seed;
        if (resume) cfg.resume = *resume;
        if (truth) cfg.truth = *truth;
        if (cfg.dataset.empty() && !cfg.resume) throw ValidationError("no dataset given (--dataset or config key)");
        return cfg;
    }
};

void print_report(const EvaluationReport& r) {
    std::cout << "R2 " << format_double(r.profile.r_square_mean) << " +/- " << format_double(r.profile.r_square_std)
              << "  RMSE " << format_double(r.profile.rmse_mean) << " +/- " << format_double(r.profile.rmse_std)
              << " deg  Nega1 " << format_double(r.neg.nega1) << "  Nega2 " << format_double(r.neg.nega2)
              << "  rejected " << r.frames_rejected << "/" << r.frames_total << "\n";
}

Grouping parse_grouping(const std::string& g) {
    PipelineConfig tmp;
    apply_config_json(tmp, {{"grouping", g}});
    return tmp.grouping;
}

std::string read_text(const fs::path& p) { return detail::read_text(p); }

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Diffusion tensor cardiac MRI processing: registration, frame selection, tensor fitting, evaluation"};
    app.require_subcommand(1);
    bool verbose = false;
    app.add_flag("-v,--verbose", verbose, "log stage progress");

    // run
    PipelineFlags run_flags;
    auto* run = app.add_subcommand("run", "full pipeline on one dataset");
    run_flags.add_to(run, true);

    // compare-arms
    PipelineFlags arm_flags;
    auto* arms = app.add_subcommand("compare-arms", "run every registration x selection combination");
    arm_flags.add_to(arms, false);

    // phantom
    auto* phantom = app.add_subcommand("phantom", "write a synthetic dataset with ground truth");
    std::string ph_out = "phantom", ph_name = "phantom", ph_sequence = "STEAM";
    std::uint64_t ph_seed = 1;
    double ph_noise = 0.02, ph_shift = 0.0, ph_rot = 0.0, ph_scale = 0.0, ph_shear = 0.0, ph_factor = 0.5;
    int ph_corrupt = 0, ph_nave = 9, ph_size = 96;
    bool ph_chest = false;
    std::vector<int> ph_bad;
    phantom->add_option("--output", ph_out, "output directory");
    phantom->add_option("--name", ph_name, "file name stem");
    phantom->add_option("--seed", ph_seed);
    phantom->add_option("--noise", ph_noise, "Rician sigma relative to myocardial S0");
    phantom->add_option("--max-shift", ph_shift, "px");
    phantom->add_option("--max-rotation", ph_rot, "degrees");
    phantom->add_option("--max-scale", ph_scale, "affine isotropic scale amplitude");
    phantom->add_option("--max-shear", ph_shear, "affine shear amplitude");
    phantom->add_option("--corrupt", ph_corrupt, "random corrupted frames (one per configuration at most)");
    phantom->add_option("--corrupt-frames", ph_bad, "explicit corrupted frame indices");
    phantom->add_option("--corruption-factor", ph_factor, "myocardial signal multiplier on corrupted frames");
    phantom->add_option("--averages", ph_nave);
    phantom->add_option("--size", ph_size, "image width and height");
    phantom->add_option("--sequence", ph_sequence, "STEAM | SE");
    phantom->add_flag("--chest-wall", ph_chest, "add a bright moving structure near the FOV edge");

    // register
    auto* reg = app.add_subcommand("register", "register a dataset, write the registered stack and transforms");
    std::string reg_dataset, reg_out = "registered", reg_engine = "auto", reg_reference = "lowrank";
    int reg_rank = 6, reg_upsample = 100;
    unsigned reg_threads = 0;
    reg->add_option("--dataset", reg_dataset)->required();
    reg->add_option("--output", reg_out);
    reg->add_option("--engine", reg_engine, "none | dft | rigid | affine | auto");
    reg->add_option("--reference", reg_reference, "lowrank | brightest");
    reg->add_option("--rank", reg_rank);
    reg->add_option("--upsample", reg_upsample);
    reg->add_option("--threads", reg_threads);

    // select
    auto* sel = app.add_subcommand("select", "frame selection by correlation outlier rejection");
    std::string sel_dataset, sel_out = "selection", sel_grouping = "per_config";
    sel->add_option("--dataset", sel_dataset)->required();
    sel->add_option("--output", sel_out);
    sel->add_option("--grouping", sel_grouping, "per_config | global");

    // fit
    auto* fit = app.add_subcommand("fit", "average kept frames and fit tensors");
    std::string fit_dataset, fit_out = "fit", fit_verdicts;
    unsigned fit_threads = 0;
    fit->add_option("--dataset", fit_dataset)->required();
    fit->add_option("--verdicts", fit_verdicts, "verdict CSV; all frames kept when absent");
    fit->add_option("--output", fit_out);
    fit->add_option("--threads", fit_threads);

    // evaluate
    auto* ev = app.add_subcommand("evaluate", "transmural HA profiles and negative-eigenvalue rates");
    std::string ev_dataset, ev_tensor, ev_out = "evaluation";
    int ev_spokes = 24;
    ev->add_option("--dataset", ev_dataset, "dataset manifest providing the annotations")->required();
    ev->add_option("--tensor", ev_tensor, "tensor field written by fit")->required();
    ev->add_option("--output", ev_out);
    ev->add_option("--spokes", ev_spokes);

    // bench
    auto* bench = app.add_subcommand("bench", "time the registration engines");
    std::string bench_dataset, bench_out = "bench";
    int bench_frames = 63;
    bench->add_option("--dataset", bench_dataset)->required();
    bench->add_option("--frames", bench_frames, "number of frames to time");
    bench->add_option("--output", bench_out);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? kOk : kValidation;
    }
    if (verbose) log::set_level(log::Level::info);

    try {
        if (*run) {
            const PipelineConfig cfg = run_flags.resolve();
            const auto res = run_pipeline(cfg);
            print_report(res.report);
            if (res.truth) std::cout << res.truth->to_json().dump() << "\n";
        } else if (*arms) {
            const PipelineConfig cfg = arm_flags.resolve();
            const auto rows = compare_arms(cfg);
            fs::create_directories(cfg.output);
            const std::string csv = arms_to_csv(rows);
            io::write_text(cfg.output / "arms.csv", csv);
            std::cout << csv;
        } else if (*phantom) {
            PhantomSpec spec;
            spec.nx = spec.ny = ph_size;
            spec.center = {ph_size * 0.474, ph_size * 0.505};
            spec.seed = ph_seed;
            spec.noise_sigma = ph_noise;
            spec.motion.max_shift = ph_shift;
            spec.motion.max_rotation_deg = ph_rot;
            spec.motion.max_scale = ph_scale;
            spec.motion.max_shear = ph_shear;
            spec.n_corrupted = ph_corrupt;
            spec.corrupted_frames = ph_bad;
            spec.corruption_factor = ph_factor;
            spec.n_ave = ph_nave;
            spec.chest_wall = ph_chest;
            spec.sequence = ph_sequence;
            spec.validate();
            const Phantom ph = make_phantom(spec);
            const auto truth = save_phantom(ph_out, ph_name, ph);
            std::ostringstream keep;
            keep << "# frames without simulated corruption\n";
            for (int k = 0; k < ph.stack.frames(); ++k)
                if (!std::binary_search(ph.truth.corrupted.begin(), ph.truth.corrupted.end(), k)) keep << k << "\n";
            io::write_text(fs::path(ph_out) / (ph_name + "_keep.txt"), keep.str());
            std::cout << truth.string() << "\n";
        } else if (*reg) {
            const Dataset ds = load_dataset(reg_dataset);
            RegisterConfig rc;
            rc.engine = reg_engine == "auto" ? engine_for_sequence(ds.stack.sequence()) : engine_from_string(reg_engine);
            rc.reference = reference_mode_from_string(reg_reference);
            rc.rank = reg_rank;
            rc.upsample = reg_upsample;
            rc.threads = reg_threads;
            auto [out, ts] = register_stack(ds.stack, rc);
            save_dataset(reg_out, "registered", out, ds.annotations);
            io::write_text(fs::path(reg_out) / "transforms.csv", transforms_to_csv(ts));
        } else if (*sel) {
            const Dataset ds = load_dataset(sel_dataset);
            const auto v = reject_outliers(frame_correlations(ds.stack, donut_roi(ds.annotations), parse_grouping(sel_grouping)));
            fs::create_directories(sel_out);
            io::write_text(fs::path(sel_out) / "verdicts.csv", verdicts_to_csv(v, ds.stack));
            std::cout << "rejected " << v.rejected() << "/" << v.keep.size() << " (threshold "
                      << format_double(v.threshold) << ")\n";
        } else if (*fit) {
            const Dataset ds = load_dataset(fit_dataset);
            FrameVerdicts v = fit_verdicts.empty() ? keep_all_verdicts(ds.stack.frames())
                                                   : verdicts_from_csv(read_text(fit_verdicts));
            if (int(v.keep.size()) != ds.stack.frames()) throw ValidationError("verdict count does not match the stack");
            auto field = fit_tensor(average_by_config(ds.stack, v.keep), ds.annotations.myo_mask, fit_threads);
            compute_helix_angles(field, ds.annotations.blood_pool_center);
            fs::create_directories(fit_out);
            save_tensor_field(fs::path(fit_out) / "tensor.bin", field);
            write_ha_pgm(fs::path(fit_out) / "ha_map.pgm", field);
        } else if (*ev) {
            const Dataset ds = load_dataset(ev_dataset);
            const auto field = load_tensor_field(ev_tensor, ds.stack.nx(), ds.stack.ny());
            const auto rep = evaluate_field(field, ds.annotations, ev_spokes);
            emit_report(ev_out, rep, field);
            print_report(rep);
        } else if (*bench) {
            const Dataset ds = load_dataset(bench_dataset);
            if (bench_frames < 1) throw ValidationError("--frames must be >= 1");
            const auto table = bench_registration(ds.stack, bench_frames, RegisterConfig{});
            fs::create_directories(bench_out);
            io::write_text(fs::path(bench_out) / "bench_frames.csv", bench_to_csv(table));
            const std::string totals = bench_totals_to_csv(table);
            io::write_text(fs::path(bench_out) / "bench_totals.csv", totals);
            std::cout << totals;
        }
    } catch (const ValidationError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kValidation;
    } catch (const nlohmann::json::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kValidation;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kStage;
    }
    return kOk;
}
