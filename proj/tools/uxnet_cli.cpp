// uxnet: command-line front end for dataset synthesis, training, evaluation,
// inference, cost analysis and gradient checking.
//
// Exit codes: 0 success, 1 usage or configuration error, 2 runtime failure.

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <map>

#include "uxnet/analysis.hpp"
#include "uxnet/checkpoint.hpp"
#include "uxnet/gradcheck.hpp"
#include "uxnet/inference.hpp"
#include "uxnet/parallel.hpp"
#include "uxnet/train.hpp"

namespace {

using namespace uxnet;

constexpr int kExitOk = 0;
constexpr int kExitUsage = 1;
constexpr int kExitRuntime = 2;

struct UsageError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct Globals {
    std::string config_path;
    uint64_t seed = 0;
    bool deterministic = false;
    bool print_config = false;
};

struct SynthArgs {
    int64_t classes = 0, volumes = 0, extent = -1, shapes = 0;
    double noise = -1;
    std::string out;
};

struct TrainArgs {
    std::string manifest, out, resume;
    int64_t steps = 0, eval_interval = 0, checkpoint_interval = -1;
};

struct EvalArgs {
    std::string checkpoint, manifest, split = "val";
};

struct InferArgs {
    std::string checkpoint, input, output;
    double overlap = -1;
};

struct AnalyzeArgs {
    std::vector<int64_t> sweep;
    std::vector<std::string> variants;
    std::string format = "markdown";
};

struct GradArgs {
    std::string scope = "all";
    bool inject_fault = false;
};

UXNetModel<float> build_model(const CliConfig& cfg) { return UXNetModel<float>(cfg.model, cfg.seed); }

std::string require_manifest(const CliConfig& cfg, const std::string& flag_value) {
    const std::string m = flag_value.empty() ? cfg.data.manifest : flag_value;
    if (m.empty()) throw UsageError("no dataset manifest: pass --manifest or set data.manifest in the config");
    return m;
}

int cmd_synth(CliConfig cfg, const SynthArgs& a) {
    if (a.classes) cfg.synth.num_classes = a.classes;
    if (a.volumes) cfg.synth.num_volumes = a.volumes;
    if (a.extent >= 0) cfg.synth.extents = {a.extent, a.extent, a.extent};
    if (a.shapes) cfg.synth.shapes_per_volume = a.shapes;
    if (a.noise >= 0) cfg.synth.noise_sigma = a.noise;
    cfg.synth.validate();
    const std::string out = a.out.empty() ? cfg.out_dir : a.out;
    const SynthResult r = synth_generate(cfg.synth, out, cfg.seed);
    for (const auto& w : r.warnings) std::cerr << "warning: " << w << '\n';
    std::cout << r.manifest_path << '\n';
    return kExitOk;
}

int cmd_train(CliConfig cfg, const TrainArgs& a) {
    if (a.steps) cfg.train.steps = a.steps;
    if (a.eval_interval) cfg.train.eval_interval = a.eval_interval;
    if (a.checkpoint_interval >= 0) cfg.train.checkpoint_interval = a.checkpoint_interval;
    if (!a.out.empty()) cfg.out_dir = a.out;
    cfg.validate();
    const std::string manifest_path = require_manifest(cfg, a.manifest);
    const DatasetManifest manifest = load_manifest(manifest_path);

    UXNetModel<float> model = build_model(cfg);
    TrainOptions opts;
    opts.out_dir = cfg.out_dir;
    opts.seed = cfg.seed;
    opts.deterministic = cfg.deterministic;
    if (!a.resume.empty()) opts.resume_from = a.resume;
    opts.on_log = [](const json& rec) {
        if (!rec["dice"].is_null()) std::cerr << rec.dump() << '\n';
    };
    try {
        const TrainResult r = train(model, manifest, cfg.train, cfg.augment, opts);
        json summary{{"last_step", r.last_step},     {"last_loss", r.last_loss},
                     {"best_dice", r.best_dice},     {"best_step", r.best_step},
                     {"log", r.log_path},            {"best_checkpoint", r.best_checkpoint},
                     {"last_checkpoint", r.last_checkpoint}};
        std::cout << summary.dump(2) << '\n';
    } catch (const NonFiniteError& e) {
        std::cerr << "error: " << e.what() << '\n';
        return kExitRuntime;
    }
    return kExitOk;
}

int cmd_eval(CliConfig cfg, const EvalArgs& a) {
    cfg.validate();
    const DatasetManifest manifest = load_manifest(require_manifest(cfg, a.manifest));
    Split split;
    try {
        split = split_from_string(a.split);
    } catch (const VolumeError& e) {
        throw UsageError(e.what());
    }
    UXNetModel<float> model = build_model(cfg);
    load_weights(model, a.checkpoint);
    const std::vector<Sample> samples = load_split(manifest, split);
    const EvalResult r = evaluate(model, samples, cfg.train.eval_overlap);
    json dice = json::object();
    for (size_t c = 1; c < r.per_class.size(); ++c) dice["class_" + std::to_string(c)] = r.per_class[c];
    json out{{"split", a.split},
             {"volumes", r.volumes},
             {"dice", dice},
             {"background", r.per_class.empty() ? 0.0 : r.per_class[0]},
             {"mean", r.mean_foreground}};
    std::cout << out.dump(2) << '\n';
    return kExitOk;
}

int cmd_infer(CliConfig cfg, const InferArgs& a) {
    cfg.validate();
    UXNetModel<float> model = build_model(cfg);
    load_weights(model, a.checkpoint);
    const std::string ext = std::filesystem::path(a.input).extension().string();
    Volume v = (ext == ".nii" || ext == ".gz") ? load_nifti(a.input) : load_raw_image(a.input);
    v = preprocess(v, cfg.data.clip, cfg.data.percentiles);
    const auto& ps = cfg.model.patch_size;
    const double overlap = a.overlap >= 0 ? a.overlap : cfg.train.eval_overlap;
    const LabelVolume pred = sliding_window_infer(model, v, {ps[0], ps[1], ps[2]}, overlap).argmax();
    save_raw(a.output, pred);
    std::cout << a.output << '\n';
    return kExitOk;
}

int cmd_analyze(const CliConfig& cfg, const AnalyzeArgs& a) {
    TableFormat format;
    try {
        format = parse_table_format(a.format);
    } catch (const std::invalid_argument& e) {
        throw UsageError(e.what());
    }
    std::vector<AblationRow> rows;
    if (!a.sweep.empty()) rows = kernel_sweep(cfg.model, a.sweep);
    for (const auto& v : a.variants) {
        try {
            rows.push_back(named_variant(v));
        } catch (const std::invalid_argument& e) {
            throw UsageError(e.what());
        }
    }
    if (rows.empty()) rows.push_back({"config", cfg.model});
    const auto& ps = cfg.model.patch_size;
    const AblationTable t = emit_ablation_table(rows, format, {ps[0], ps[1], ps[2]});
    std::cout << t.document;
    if (!t.document.empty() && t.document.back() != '\n') std::cout << '\n';
    for (const auto& f : t.failures) std::cerr << "row failed: " << f << '\n';
    return t.failures.empty() ? kExitOk : kExitRuntime;
}

int cmd_gradcheck(const CliConfig& cfg, const GradArgs& a) {
    const auto ops = gradcheck_ops(a.inject_fault);
    if (a.scope != "all" && std::find(ops.begin(), ops.end(), a.scope) == ops.end()) {
        std::string known;
        for (const auto& o : ops) known += (known.empty() ? "" : ", ") + o;
        throw UsageError("unknown gradcheck scope \"" + a.scope + "\"; known ops: all, " + known);
    }
    const auto results = run_gradcheck(a.scope, cfg.seed, a.inject_fault);
    std::map<std::string, GradCompare> per_op;
    std::map<std::string, int> cases;
    for (const auto& r : results) {
        per_op[r.op].merge(r.cmp);
        ++cases[r.op];
        if (!r.cmp.passed()) {
            std::fprintf(stderr, "FAIL %s: %lld of %lld elements out of tolerance (max rel %.3e, max abs %.3e)\n",
                         r.case_name.c_str(), static_cast<long long>(r.cmp.failures),
                         static_cast<long long>(r.cmp.checked), r.cmp.max_rel, r.cmp.max_abs);
        }
    }
    bool ok = true;
    std::printf("%-22s %5s %12s %12s  %s\n", "op", "cases", "worst_rel", "worst_abs", "result");
    for (const auto& [op, c] : per_op) {
        const bool pass = c.passed();
        ok = ok && pass;
        std::printf("%-22s %5d %12.3e %12.3e  %s\n", op.c_str(), cases[op], c.max_rel, c.max_abs,
                    pass ? "PASS" : "FAIL");
    }
    return ok ? kExitOk : kExitRuntime;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"uxnet: large-kernel volumetric segmentation toolkit"};
    app.require_subcommand(0, 1);
    // Global flags may follow the subcommand name.
    app.fallthrough();
    Globals g;
    app.add_option("--config", g.config_path, "JSON configuration file")->check(CLI::ExistingFile);
    auto* seed_opt = app.add_option("--seed", g.seed, "Seed for initialization, sampling and synthesis");
    app.add_flag("--deterministic", g.deterministic, "Fixed-order reductions and zeroed wall times in logs");
    app.add_flag("--print-config", g.print_config, "Print the merged configuration as JSON and exit");

    SynthArgs sa;
    auto* synth = app.add_subcommand("synth", "Generate a synthetic labelled dataset");
    synth->add_option("--classes", sa.classes, "Number of classes including background");
    synth->add_option("--volumes", sa.volumes, "Number of image/label pairs");
    synth->add_option("--extent", sa.extent, "Cube edge length in voxels");
    synth->add_option("--shapes", sa.shapes, "Shapes per volume");
    synth->add_option("--noise", sa.noise, "Gaussian noise sigma");
    synth->add_option("--out", sa.out, "Output directory (default: out_dir from the config)");

    TrainArgs ta;
    auto* trn = app.add_subcommand("train", "Train a model on a dataset manifest");
    trn->add_option("--manifest", ta.manifest, "Dataset manifest (overrides data.manifest)");
    trn->add_option("--steps", ta.steps, "Number of optimizer steps");
    trn->add_option("--eval-interval", ta.eval_interval, "Steps between validation passes");
    trn->add_option("--checkpoint-interval", ta.checkpoint_interval, "Steps between resume checkpoints (0 = off)");
    trn->add_option("--out", ta.out, "Run directory (overrides out_dir)");
    trn->add_option("--resume", ta.resume, "Resume from a step checkpoint")->check(CLI::ExistingFile);

    EvalArgs ea;
    auto* evl = app.add_subcommand("eval", "Dice of a checkpoint on a dataset split");
    evl->add_option("--checkpoint", ea.checkpoint, "Weights file")->required()->check(CLI::ExistingFile);
    evl->add_option("--manifest", ea.manifest, "Dataset manifest (overrides data.manifest)");
    evl->add_option("--split", ea.split, "train, val or test");

    InferArgs ia;
    auto* inf = app.add_subcommand("infer", "Sliding-window segmentation of one volume");
    inf->add_option("--checkpoint", ia.checkpoint, "Weights file")->required()->check(CLI::ExistingFile);
    inf->add_option("--input", ia.input, "Image (.uxv or .nii)")->required()->check(CLI::ExistingFile);
    inf->add_option("--output", ia.output, "Label volume to write (.uxv)")->required();
    inf->add_option("--overlap", ia.overlap, "Window overlap in [0, 1)");

    AnalyzeArgs aa;
    auto* ana = app.add_subcommand("analyze", "Parameter, FLOP and receptive-field table");
    ana->add_option("--sweep-kernel", aa.sweep, "Comma-separated kernel sizes")->delimiter(',');
    ana->add_option("--variant", aa.variants, "Named variant: " + [] {
        std::string s;
        for (const auto& n : variant_names()) s += (s.empty() ? "" : ", ") + n;
        return s;
    }());
    ana->add_option("--format", aa.format, "markdown, csv or json");

    GradArgs ga;
    auto* grd = app.add_subcommand("gradcheck", "Finite-difference gradient suite in float64");
    grd->add_option("scope", ga.scope, "all or a single op name");
    grd->add_flag("--inject-fault", ga.inject_fault, "Include a deliberately wrong backward rule");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? kExitOk : kExitUsage;
    }

    CliConfig cfg;
    try {
        if (!g.config_path.empty()) cfg = load_cli_config(g.config_path);
        if (seed_opt->count()) cfg.seed = g.seed;
        if (g.deterministic) cfg.deterministic = true;
        cfg.validate();
    } catch (const std::exception& e) {
        std::cerr << "config error: " << e.what() << '\n';
        return kExitUsage;
    }
    if (g.print_config) {
        std::cout << to_json(cfg).dump(2) << '\n';
        return kExitOk;
    }
    if (app.get_subcommands().empty()) {
        std::cerr << app.help();
        return kExitUsage;
    }
    set_deterministic(cfg.deterministic);

    try {
        if (*synth) return cmd_synth(cfg, sa);
        if (*trn) return cmd_train(cfg, ta);
        if (*evl) return cmd_eval(cfg, ea);
        if (*inf) return cmd_infer(cfg, ia);
        if (*ana) return cmd_analyze(cfg, aa);
        if (*grd) return cmd_gradcheck(cfg, ga);
    } catch (const UsageError& e) {
        std::cerr << "usage error: " << e.what() << '\n';
        return kExitUsage;
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << '\n';
        return kExitUsage;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return kExitRuntime;
    }
    return kExitUsage;
}
