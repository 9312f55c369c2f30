// Acceptance run: prints one PASS/FAIL line per criterion and exits nonzero if
// any criterion fails. Criteria 5, 6 and 8 drive the command-line tool end to
// end on a generated dataset and take several minutes on one core.

#include <sys/wait.h>

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <set>
#include <sstream>

#include "test_util.hpp"
#include "uxnet/analysis.hpp"
#include "uxnet/gradcheck.hpp"
#include "uxnet/inference.hpp"
#include "uxnet/ops.hpp"
#include "uxnet/train.hpp"
#include "uxnet/volume.hpp"

using namespace uxnet;
namespace fs = std::filesystem;

namespace {

struct Outcome {
    bool pass = false;
    std::string detail;
};

std::string fmt(double v, int digits = 4) {
    std::ostringstream s;
    s.precision(digits);
    s << std::fixed << v;
    return s.str();
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

int run_cli(const std::string& args) {
    const std::string cmd = std::string(UXNET_CLI_PATH) + " " + args + " >/dev/null 2>&1";
    const int status = std::system(cmd.c_str());
    return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::string slurp(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

std::vector<std::string> lines(const std::string& path) {
    std::ifstream in(path);
    std::vector<std::string> out;
    for (std::string l; std::getline(in, l);) out.push_back(l);
    return out;
}

/// Last validation record of a metrics log.
json last_eval(const std::string& log) {
    json last;
    for (const auto& l : lines(log)) {
        json rec = json::parse(l);
        if (!rec["dice"].is_null()) last = rec;
    }
    return last;
}

// ---------------------------------------------------------------------------

Outcome gradient_suite() {
    const auto t0 = std::chrono::steady_clock::now();
    const auto results = run_gradcheck("all", 0);
    const double secs = seconds_since(t0);
    std::map<std::string, int> cases;
    double worst = 0;
    std::string failed;
    for (const auto& r : results) {
        ++cases[r.op];
        worst = std::max(worst, r.cmp.max_rel);
        if (!r.cmp.passed()) failed += " " + r.op + "/" + r.case_name;
    }
    const char* required[] = {"add", "sub", "mul", "sum", "mean", "softmax_channels", "conv3d", "conv3d_depthwise",
                              "conv3d_grouped", "depthwise_multiplier", "conv_transpose3d", "layer_norm_channel",
                              "instance_norm", "gelu", "leaky_relu", "dice_loss", "uxnet_block"};
    std::string missing;
    for (const char* op : required) {
        if (cases[op] < 3) missing += std::string(" ") + op;
    }
    Outcome o;
    o.pass = failed.empty() && missing.empty() && secs < 300;
    o.detail = std::to_string(results.size()) + " cases over " + std::to_string(cases.size()) + " ops, worst rel " +
               fmt(worst, 8) + ", " + fmt(secs, 1) + " s";
    if (!failed.empty()) o.detail += "; failed:" + failed;
    if (!missing.empty()) o.detail += "; fewer than 3 cases:" + missing;
    return o;
}

Outcome parameter_deltas() {
    const Shape in{1, 1, 96, 96, 96};
    const auto rows = kernel_sweep(UXNetConfig::reference(), {3, 7, 9, 11, 13});
    std::vector<double> p;
    for (const auto& r : rows) p.push_back(double(count_flops(r.config, in).total_params));
    auto within = [](double got, double want, double tol) { return std::abs(got - want) <= tol * want; };
    const double d37 = p[1] - p[0], d79 = p[2] - p[1], d911 = p[3] - p[2], d1113 = p[4] - p[3];
    const double ref = p[1];
    const double dense = double(count_flops(named_variant("standard-conv").config, in).total_params) - ref;
    const double mlp = double(count_flops(named_variant("mlp").config, in).total_params) - ref;

    // Closed forms against the registry of freshly built blocks.
    bool closed = true;
    for (int64_t c : {8, 48, 96}) {
        for (int64_t k : {3, 7}) {
            ParamStore<float> dcs, mlps, dense_store;
            Rng rng(0);
            UXNetBlock<float>::make(dcs, "b", c, k, ScalingMode::DCS, ConvMode::DEPTHWISE, rng);
            UXNetBlock<float>::make(mlps, "b", c, k, ScalingMode::MLP, ConvMode::DEPTHWISE, rng);
            UXNetBlock<float>::make(dense_store, "b", c, k, ScalingMode::NONE, ConvMode::STANDARD, rng);
            auto prefixed = [](ParamStore<float>& s, const std::string& pre) {
                int64_t n = 0;
                for (const auto& q : s.all())
                    if (q->name.rfind(pre, 0) == 0) n += q->value.numel();
                return n;
            };
            closed &= prefixed(dcs, "b.dwc") == c * k * k * k + c;
            closed &= prefixed(dcs, "b.expand") + prefixed(dcs, "b.compress") == 13 * c;
            closed &= prefixed(mlps, "b.expand") + prefixed(mlps, "b.compress") == 8 * c * c + 5 * c;
            closed &= prefixed(dense_store, "b.dwc") == c * c * k * k * k + c;
        }
    }
    Outcome o;
    o.pass = within(d37, 0.5e6, 0.10) && within(d79, 0.6e6, 0.10) && within(d911, 0.8e6, 0.10) &&
             within(d1113, 1.3e6, 0.10) && within(dense, 133.9e6, 0.10) && within(mlp, 3.3e6, 0.15) && closed;
    o.detail = "3->7 " + fmt(d37 / 1e6, 3) + "M, 7->9 " + fmt(d79 / 1e6, 3) + "M, 9->11 " + fmt(d911 / 1e6, 3) +
               "M, 11->13 " + fmt(d1113 / 1e6, 3) + "M, standard-depthwise " + fmt(dense / 1e6, 2) + "M, mlp-dcs " +
               fmt(mlp / 1e6, 3) + "M, closed forms " + (closed ? "exact" : "MISMATCH");
    return o;
}

Outcome absolute_costs() {
    const Shape in{1, 1, 96, 96, 96};
    const UXNetConfig ref = UXNetConfig::reference();
    const CostReport r = count_flops(ref, in);
    const CostReport o7 = count_flops(UXNetConfig::optimized(), in);
    const double rp = double(r.total_params) / 1e6, rf = double(r.flops_2mac()) / 1e9;
    const double op = double(o7.total_params) / 1e6, of = double(o7.flops_2mac()) / 1e9;
    Outcome o;
    o.pass = ref.num_classes == 5 && std::abs(rp - 53.0) <= 5.3 && std::abs(rf - 639.4) <= 127.88 &&
             std::abs(op - 32.1) <= 3.21 && std::abs(of - 536.8) <= 107.36;
    o.detail = "reference " + fmt(rp, 2) + "M / " + fmt(rf, 1) + "G, optimized " + fmt(op, 2) + "M / " + fmt(of, 1) +
               "G (" + CostReport::kConvention + ")";
    return o;
}

Outcome structural_invariants() {
    NoGradScope<float> off;
    Rng rng(4);
    // Identity at zero, every scaling mode.
    bool identity = true;
    for (ScalingMode mode : {ScalingMode::DCS, ScalingMode::MLP, ScalingMode::NONE}) {
        ParamStore<float> store;
        const auto block = UXNetBlock<float>::make(store, "b", 8, 7, mode, ConvMode::DEPTHWISE, rng);
        for (const auto& p : store.all()) p->value.fill(0.0f);
        const auto z = Var<float>::constant(uxnet::testing::random_tensor<float>({1, 8, 6, 5, 4}, rng));
        identity &= block(z).value() == z.value();
    }
    // Encoder ladder of the reference model at 96^3.
    UXNetModel<float> ref(UXNetConfig::reference(), 0);
    const auto f = ref.encode(Var<float>::constant(uxnet::testing::random_tensor<float>({1, 1, 96, 96, 96}, rng)));
    const std::vector<Shape> want{{1, 48, 48, 48, 48}, {1, 96, 24, 24, 24}, {1, 192, 12, 12, 12}, {1, 384, 6, 6, 6}};
    bool ladder = f.stages.size() == 4 && f.bottleneck.shape() == Shape{1, 768, 3, 3, 3};
    for (size_t s = 0; s < 4 && ladder; ++s) ladder &= f.stages[s].shape() == want[s];
    // Logits shape and softmax normalization on the tiny model.
    UXNetModel<float> tiny(UXNetConfig::tiny(), 1);
    const Shape xs{1, 1, 32, 48, 16};
    const auto logits = tiny.forward(Var<float>::constant(uxnet::testing::random_tensor<float>(xs, rng))).logits;
    const bool shape_ok = logits.shape() == Shape{1, tiny.config().num_classes, 32, 48, 16};
    const auto p = softmax_channels(logits).value();
    const int64_t k = p.dim(1), n = p.numel() / k;
    double worst = 0;
    for (int64_t i = 0; i < n; ++i) {
        double s = 0;
        for (int64_t c = 0; c < k; ++c) s += p[c * n + i];
        worst = std::max(worst, std::abs(s - 1.0));
    }
    Outcome o;
    o.pass = identity && ladder && shape_ok && worst <= 1e-6;
    o.detail = std::string("identity ") + (identity ? "bitwise" : "BROKEN") + ", ladder " + (ladder ? "ok" : "WRONG") +
               ", logits " + shape_str(logits.shape()) + ", softmax max |sum-1| " + fmt(worst, 9);
    return o;
}

/// Dataset shared by the training criteria.
struct TrainingSetup {
    uxnet::testing::TempDir dir;
    std::string manifest;
    bool ok = false;

    TrainingSetup() {
        ok = run_cli("--seed 7 synth --classes 3 --volumes 20 --extent 64 --out " + dir.file("data")) == 0;
        manifest = dir.file("data/manifest.json");
    }

    /// Criterion-5 configuration: tiny model, optimizer at its defaults.
    std::string config(int64_t kernel, const std::string& name, int64_t steps, int64_t eval_interval) const {
        json j{{"model",
                {{"num_classes", 3},
                 {"stage_channels", {8, 16, 32, 64}},
                 {"bottleneck_channels", nullptr},
                 {"bottleneck_block", false},
                 {"patch_size", {32, 32, 32}},
                 {"kernel_size", kernel}}},
               {"train", {{"steps", steps}, {"eval_interval", eval_interval}, {"loss_mode", "DICE_CE"}}},
               {"data", {{"manifest", manifest}}},
               {"out_dir", dir.file(name)}};
        const std::string path = dir.file(name + ".json");
        std::ofstream(path) << j.dump(2);
        return path;
    }
};

struct DiceRun {
    bool ok = false;
    double final_dice = 0, best_dice = 0, seconds = 0;
};

DiceRun train_for_dice(const TrainingSetup& setup, int64_t kernel) {
    const std::string name = "k" + std::to_string(kernel);
    const auto t0 = std::chrono::steady_clock::now();
    DiceRun r;
    r.ok = run_cli("--config " + setup.config(kernel, name, 500, 50) + " --deterministic --seed 1 train") == 0;
    r.seconds = seconds_since(t0);
    if (!r.ok) return r;
    const std::string log = setup.dir.file(name + "/metrics.jsonl");
    r.final_dice = last_eval(log)["dice"]["mean"].get<double>();
    for (const auto& l : lines(log)) {
        const json rec = json::parse(l);
        if (!rec["dice"].is_null()) r.best_dice = std::max(r.best_dice, rec["dice"]["mean"].get<double>());
    }
    return r;
}

Outcome desk_scale_dice(const DiceRun& k7) {
    Outcome o;
    o.pass = k7.ok && k7.final_dice >= 0.80 && k7.seconds <= 1800;
    o.detail = k7.ok ? "k=7, 500 steps: val foreground mean Dice " + fmt(k7.final_dice) + " at the final step (best " +
                           fmt(k7.best_dice) + "), " + fmt(k7.seconds / 60, 1) + " min"
                     : "training command failed";
    return o;
}

Outcome kernel_non_inferiority(const DiceRun& k7, const DiceRun& k3) {
    Outcome o;
    o.pass = k7.ok && k3.ok && k7.final_dice >= k3.final_dice - 0.02;
    o.detail = "k=7 " + fmt(k7.final_dice) + " vs k=3 " + fmt(k3.final_dice) + " (margin 0.02)";
    return o;
}

Outcome conv_oracle() {
    Rng rng(11);
    const int64_t channel_cases[][3] = {{2, 3, 1}, {4, 2, 2}, {3, 3, 3}, {2, 4, 2}, {4, 4, 4}};
    const Tensor<double>* no_bias = nullptr;
    int64_t checked = 0, mismatched = 0;
    for (int64_t h = 1; h <= 6; ++h)
        for (int64_t w = 1; w <= 6; ++w)
            for (int64_t d = 1; d <= 6; ++d)
                for (const auto& cc : channel_cases)
                    for (int64_t k : {1, 2, 3})
                        for (int64_t stride : {1, 2})
                            for (int64_t pad : {0, 1}) {
                                if (h + 2 * pad < k || w + 2 * pad < k || d + 2 * pad < k) continue;
                                const auto spec = Conv3dSpec::cube(cc[0], cc[1], k, stride, pad, cc[2]);
                                const auto x = uxnet::testing::integer_tensor<double>({1, cc[0], h, w, d}, rng, -3, 3);
                                const auto wt = uxnet::testing::integer_tensor<double>(spec.weight_shape(), rng, -2, 2);
                                const auto b = uxnet::testing::integer_tensor<double>({cc[1]}, rng, -5, 5);
                                const bool with_bias = (checked % 2) == 0;
                                const auto* bp = with_bias ? &b : no_bias;
                                mismatched += conv3d_forward(x, wt, bp, spec).storage() !=
                                              uxnet::testing::conv3d_reference(x, wt, bp, spec).storage();
                                ++checked;
                            }
    Outcome o;
    o.pass = mismatched == 0 && checked > 0;
    o.detail = std::to_string(checked) + " geometries (dense, grouped, depthwise, depthwise x2), " +
               std::to_string(mismatched) + " mismatches";
    return o;
}

Outcome determinism(const TrainingSetup& setup) {
    const std::string cfg = setup.config(7, "det_a", 50, 25);
    const std::string flags = " --deterministic --seed 1 train --checkpoint-interval 25 --out ";
    bool ok = run_cli("--config " + cfg + flags + setup.dir.file("det_a")) == 0;
    ok &= run_cli("--config " + cfg + flags + setup.dir.file("det_b")) == 0;
    const std::string resume = setup.dir.file("det_a/" + resume_checkpoint_name(25));
    ok &= run_cli("--config " + cfg + " --deterministic --seed 1 train --out " + setup.dir.file("det_c") +
                  " --resume " + resume) == 0;
    Outcome o;
    if (!ok) {
        o.detail = "a training command failed";
        return o;
    }
    const auto a = lines(setup.dir.file("det_a/metrics.jsonl"));
    const auto b = lines(setup.dir.file("det_b/metrics.jsonl"));
    const auto c = lines(setup.dir.file("det_c/metrics.jsonl"));
    const bool same = a == b && a.size() == 50;
    const bool resumed = c.size() == 25 && std::equal(c.begin(), c.end(), a.begin() + 25);
    const bool weights = slurp(setup.dir.file("det_a/last.uxck")) == slurp(setup.dir.file("det_c/last.uxck"));
    o.pass = same && resumed && weights;
    o.detail = std::string("two 50-step logs ") + (same ? "identical" : "DIFFER") + ", resume at 25 " +
               (resumed ? "reproduces steps 26-50" : "DIVERGES") + ", final weights " +
               (weights ? "identical" : "DIFFER");
    return o;
}

Outcome pipeline_contracts() {
    std::vector<std::string> bad;
    // Sliding window equals a direct forward on a single tile.
    {
        UXNetModel<float> m(UXNetConfig::tiny(), 3);
        Rng rng(1);
        Volume v({32, 32, 32});
        for (auto& x : v.data) x = float(rng.uniform());
        const auto pm = sliding_window_infer(m, v, {32, 32, 32});
        NoGradScope<float> off;
        const auto direct = softmax_channels(m.forward(Var<float>::constant(
                                                            Tensor<float>({1, 1, 32, 32, 32}, std::vector<float>(v.data))))
                                                 .logits)
                                .value();
        if (uxnet::testing::max_abs_diff(pm.probs, direct.reshaped(pm.probs.shape())) > 1e-6) bad.push_back("sliding");
    }
    // Clip and percentile examples.
    {
        Volume v({3, 1, 1});
        v.data = {300.0f, -200.0f, 0.0f};
        if (clip_intensity(v, -175, 250).data != std::vector<float>{250.0f, -175.0f, 0.0f}) bad.push_back("clip");
        Volume r({101, 1, 1});
        for (int i = 0; i <= 100; ++i) r.data[size_t(i)] = float(i);
        const Volume n = percentile_normalize(r);
        if (std::abs(n.data[50] - 49.0 / 98.0) > 1e-6 || n.data[1] != 0.0f || n.data[99] != 1.0f) bad.push_back("percentile");
        bool threw = false;
        try {
            percentile_normalize(Volume({2, 2, 2}, 1.0f));
        } catch (const std::invalid_argument&) {
            threw = true;
        }
        if (!threw) bad.push_back("percentile-constant");
    }
    // Augment: identity, quarter-turn permutation, offset.
    {
        Rng rng(2);
        Volume v({8, 8, 8});
        LabelVolume l({8, 8, 8}, 2);
        for (int64_t i = 3; i < 5; ++i)
            for (int64_t j = 2; j < 6; ++j)
                for (int64_t k = 1; k < 7; ++k) {
                    l.at(i, j, k) = 1;
                    v.at(i, j, k) = 1.0f;
                }
        AugmentParams neutral;
        neutral.rotation_deg = neutral.scale = neutral.intensity_offset = 0;
        neutral.p_rotate = neutral.p_scale = neutral.p_offset = 1;
        const auto id = augment(v, l, neutral, rng);
        if (id.first.data != v.data || id.second.data != l.data) bad.push_back("augment-identity");
        const auto rot = rotate_axis(v, l, 0, 90.0);
        int64_t count = 0, lo_k = 99, hi_k = -1;
        for (int64_t i = 0; i < 8; ++i)
            for (int64_t j = 0; j < 8; ++j)
                for (int64_t k = 0; k < 8; ++k)
                    if (rot.second.at(i, j, k) == 1) {
                        ++count;
                        lo_k = std::min(lo_k, k);
                        hi_k = std::max(hi_k, k);
                    }
        if (count != 48 || hi_k - lo_k + 1 != 4) bad.push_back("augment-rotation");
        const Volume s = shift_intensity(v, 0.1);
        double mean_shift = 0;
        for (size_t i = 0; i < v.data.size(); ++i) mean_shift += s.data[i] - v.data[i];
        if (std::abs(mean_shift / double(v.data.size()) - 0.1) > 1e-6) bad.push_back("augment-offset");
    }
    // Raw and NIfTI round trips.
    {
        uxnet::testing::TempDir dir;
        Volume v({3, 4, 5});
        for (size_t i = 0; i < v.data.size(); ++i) v.data[i] = float(i) * 0.37f - 2.0f;
        save_raw(dir.file("v.uxv"), v);
        if (load_raw_image(dir.file("v.uxv")).data != v.data) bad.push_back("raw");
        Volume ints({3, 4, 5});
        for (size_t i = 0; i < ints.data.size(); ++i) ints.data[i] = float(int(i) - 30);
        save_nifti(dir.file("a.nii"), ints, NiftiType::Int16, 2.0f, 1.0f);
        const Volume back = load_nifti(dir.file("a.nii"));
        for (size_t i = 0; i < ints.data.size(); ++i)
            if (back.data[i] != 2.0f * ints.data[i] + 1.0f) {
                bad.push_back("nifti");
                break;
            }
    }
    Outcome o;
    o.pass = bad.empty();
    o.detail = bad.empty() ? "sliding window, clip, percentile, augment, raw and NIfTI checks hold" : "failed:";
    for (const auto& b : bad) o.detail += " " + b;
    return o;
}

Outcome receptive_fields() {
    std::string detail;
    bool ok = true;
    for (const auto& row : kernel_sweep(UXNetConfig::reference(), {3, 5, 7, 9, 11, 13})) {
        const auto trace = receptive_field(row.config);
        int64_t r = 1, j = 1;
        for (const auto& st : trace) {
            r += (st.kernel - 1) * j;
            j *= st.stride;
            ok &= st.rf == r && st.jump == j;
        }
        // Independent layer list: patch embed, blocks, 2x2x2 downsamples, bottleneck conv.
        int64_t r2 = 1, j2 = 1;
        auto step = [&](int64_t k, int64_t s) {
            r2 += (k - 1) * j2;
            j2 *= s;
        };
        step(row.config.effective_patch_kernel(), 2);
        for (size_t s = 0; s < 4; ++s) {
            for (int64_t b = 0; b < row.config.stage_depths[s]; ++b) step(row.config.kernel_size, 1);
            step(2, 2);
        }
        if (row.config.bottleneck_block) step(3, 1);
        ok &= trace.back().rf == r2;
        detail += row.name + ":" + std::to_string(trace.back().rf) + " ";
    }
    const auto k7 = receptive_field(UXNetConfig::reference());
    ok &= k7[0].rf == 7 && k7[1].rf == 19 && k7[2].rf == 31;
    Outcome o;
    o.pass = ok;
    o.detail = "exit rf " + detail + "; stage 1 at k=7: " + std::to_string(k7[0].rf) + "->" + std::to_string(k7[1].rf) +
               "->" + std::to_string(k7[2].rf);
    return o;
}

}  // namespace

int main() {
    int failures = 0;
    auto report = [&](int n, const std::function<Outcome()>& fn) {
        Outcome o;
        try {
            o = fn();
        } catch (const std::exception& e) {
            o.pass = false;
            o.detail = std::string("exception: ") + e.what();
        }
        failures += !o.pass;
        std::cout << "CRITERION " << n << ": " << (o.pass ? "PASS" : "FAIL") << " - " << o.detail << std::endl;
    };

    report(1, gradient_suite);
    report(2, parameter_deltas);
    report(3, absolute_costs);
    report(4, structural_invariants);

    TrainingSetup setup;
    DiceRun k7, k3;
    if (setup.ok) {
        k7 = train_for_dice(setup, 7);
        k3 = train_for_dice(setup, 3);
    }
    report(5, [&] { return setup.ok ? desk_scale_dice(k7) : Outcome{false, "dataset generation failed"}; });
    report(6, [&] { return setup.ok ? kernel_non_inferiority(k7, k3) : Outcome{false, "dataset generation failed"}; });
    report(7, conv_oracle);
    report(8, [&] { return setup.ok ? determinism(setup) : Outcome{false, "dataset generation failed"}; });
    report(9, pipeline_contracts);
    report(10, receptive_fields);
    return failures == 0 ? 0 : 1;
}
