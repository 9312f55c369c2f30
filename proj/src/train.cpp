#include "uxnet/train.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>

namespace uxnet {

namespace fs = std::filesystem;

std::vector<Sample> load_split(const DatasetManifest& manifest, Split split) {
    std::vector<Sample> out;
    for (const auto& e : manifest.split(split)) {
        Sample s;
        s.name = fs::path(e.image).filename().string();
        s.image = preprocess(load_raw_image(e.image), manifest.clip, manifest.percentiles);
        s.label = load_raw_label(e.label, manifest.num_classes);
        if (s.image.extents != s.label.extents) {
            throw VolumeError("image " + e.image + " and label " + e.label + " have different extents");
        }
        out.push_back(std::move(s));
    }
    return out;
}

template <typename T>
EvalResult evaluate(const UXNetModel<T>& model, const std::vector<Sample>& samples, double overlap) {
    if (samples.empty()) throw std::invalid_argument("evaluate: the split is empty");
    const int64_t k = model.config().num_classes;
    const auto& ps = model.config().patch_size;
    std::vector<std::vector<double>> scores(static_cast<size_t>(k));
    for (const auto& s : samples) {
        if (s.label.num_classes != k) {
            throw std::invalid_argument("evaluate: " + s.name + " has " + std::to_string(s.label.num_classes) +
                                        " classes, model predicts " + std::to_string(k));
        }
        const LabelVolume pred = sliding_window_infer(model, s.image, {ps[0], ps[1], ps[2]}, overlap).argmax();
        const auto d = dice_per_class(pred.data, s.label.data, k);
        for (int64_t c = 0; c < k; ++c) scores[static_cast<size_t>(c)].push_back(d[static_cast<size_t>(c)]);
    }
    EvalResult r;
    r.volumes = static_cast<int64_t>(samples.size());
    for (auto& col : scores) {
        std::sort(col.begin(), col.end());
        double sum = 0;
        for (double x : col) sum += x;
        r.per_class.push_back(sum / static_cast<double>(col.size()));
    }
    r.mean_foreground = foreground_mean(r.per_class);
    return r;
}

Tensor<float> stack_images(const std::vector<Volume>& patches) {
    if (patches.empty()) throw std::invalid_argument("stack_images: no patches");
    const Extents e = patches[0].extents;
    const int64_t n = extents_numel(e);
    Tensor<float> out(Shape{static_cast<int64_t>(patches.size()), 1, e[0], e[1], e[2]});
    for (size_t i = 0; i < patches.size(); ++i) {
        if (patches[i].extents != e) throw ShapeError("stack_images: patches differ in extents");
        std::copy(patches[i].data.begin(), patches[i].data.end(), out.data() + static_cast<int64_t>(i) * n);
    }
    return out;
}

LabelBatch stack_labels(const std::vector<LabelVolume>& patches) {
    if (patches.empty()) throw std::invalid_argument("stack_labels: no patches");
    const Extents e = patches[0].extents;
    std::vector<int32_t> data;
    data.reserve(patches.size() * static_cast<size_t>(extents_numel(e)));
    for (const auto& p : patches) {
        if (p.extents != e) throw ShapeError("stack_labels: patches differ in extents");
        data.insert(data.end(), p.data.begin(), p.data.end());
    }
    return LabelBatch(Shape{static_cast<int64_t>(patches.size()), e[0], e[1], e[2]}, std::move(data));
}

std::string resume_checkpoint_name(int64_t step) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "step_%06lld.uxck", static_cast<long long>(step));
    return buf;
}

namespace {

json dice_record(const EvalResult& r) {
    json d = json::object();
    for (size_t c = 1; c < r.per_class.size(); ++c) d["class_" + std::to_string(c)] = r.per_class[c];
    d["mean"] = r.mean_foreground;
    return d;
}

/// Keeps log records up to and including `last_step`, so a resumed run
/// continues the file in place.
void truncate_log(const std::string& path, int64_t last_step) {
    std::ifstream in(path);
    if (!in) return;
    std::vector<std::string> keep;
    for (std::string line; std::getline(in, line);) {
        if (line.empty()) continue;
        const json j = json::parse(line, nullptr, false);
        if (!j.is_discarded() && j.contains("step") && j["step"].get<int64_t>() <= last_step) keep.push_back(line);
    }
    in.close();
    std::ofstream out(path, std::ios::trunc);
    for (const auto& l : keep) out << l << '\n';
}

}  // namespace

TrainResult train(UXNetModel<float>& model, const DatasetManifest& manifest, const TrainConfig& cfg,
                  const AugmentParams& augment_params, const TrainOptions& opts) {
    cfg.validate();
    augment_params.validate();
    const UXNetConfig& mc = model.config();
    if (manifest.num_classes != mc.num_classes) {
        throw std::invalid_argument("dataset has " + std::to_string(manifest.num_classes) + " classes, model predicts " +
                                    std::to_string(mc.num_classes));
    }
    if (mc.in_channels != 1) throw std::invalid_argument("training expects a single-channel model");
    const std::vector<Sample> train_set = load_split(manifest, Split::Train);
    const std::vector<Sample> val_set = load_split(manifest, Split::Val);
    if (train_set.empty()) throw std::invalid_argument("dataset has no training volumes");
    if (val_set.empty()) throw std::invalid_argument("dataset has no validation volumes");

    std::error_code ec;
    fs::create_directories(opts.out_dir, ec);
    if (ec) throw std::runtime_error("cannot create " + opts.out_dir + ": " + ec.message());
    const fs::path dir(opts.out_dir);

    std::vector<Parameter<float>*> params;
    for (const auto& p : model.params().all()) params.push_back(p.get());
    AdamW<float> optim(params, {cfg.lr, cfg.betas[0], cfg.betas[1], cfg.eps, cfg.weight_decay});
    PlateauScheduler sched(cfg.lr, cfg.plateau_factor, cfg.plateau_patience);
    const std::vector<double> head_weights =
        mc.deep_supervision ? normalized_weights(cfg.deep_supervision_weights) : std::vector<double>{1.0};
    const DiceOptions dice_opts{1e-5, cfg.loss_include_background};
    const Extents patch{mc.patch_size[0], mc.patch_size[1], mc.patch_size[2]};

    TrainResult result;
    result.best_dice = -1;
    result.log_path = (dir / "metrics.jsonl").string();
    result.best_checkpoint = (dir / "best.uxck").string();
    result.last_checkpoint = (dir / "last.uxck").string();

    int64_t first_step = 1;
    if (opts.resume_from) {
        Checkpoint<float> ck = read_checkpoint<float>(*opts.resume_from);
        const json& meta = ck.meta;
        if (meta.value("kind", "") != "resume") {
            throw CheckpointError(*opts.resume_from + " is not a resume checkpoint (kind \"" +
                                  meta.value("kind", "") + "\")");
        }
        if (model_config_from_json(meta.at("model")) != mc) {
            throw CheckpointError(*opts.resume_from + " was written for a different model configuration");
        }
        assign_params(model.params(), ck);
        optim.load_state(ck, meta.at("optimizer"));
        sched.load(meta.at("scheduler"));
        first_step = meta.at("step").get<int64_t>() + 1;
        result.best_dice = meta.at("best_dice").get<double>();
        result.best_step = meta.at("best_step").get<int64_t>();
        truncate_log(result.log_path, first_step - 1);
    }
    std::ofstream log(result.log_path, opts.resume_from ? std::ios::app : std::ios::trunc);
    if (!log) throw std::runtime_error("cannot write " + result.log_path);

    const Rng root(opts.seed);
    const auto t0 = std::chrono::steady_clock::now();

    for (int64_t step = first_step; step <= cfg.steps; ++step) {
        Rng rng = root.split(static_cast<uint64_t>(step));
        std::vector<Volume> images;
        std::vector<LabelVolume> labels;
        for (int64_t b = 0; b < cfg.batch_size; ++b) {
            const Sample& s = train_set[rng.below(train_set.size())];
            for (int64_t c = 0; c < cfg.crops_per_volume; ++c) {
                auto crop = random_crop_foreground(s.image, s.label, patch, rng, cfg.foreground_prob);
                if (cfg.augment) crop = augment(crop.first, crop.second, augment_params, rng);
                images.push_back(std::move(crop.first));
                labels.push_back(std::move(crop.second));
            }
        }
        const LabelBatch batch_labels = stack_labels(labels);

        double loss_value = 0;
        {
            GradTape<float> tape;
            TapeScope<float> scope(tape);
            model.params().zero_grad();
            const ModelOutput<float> out = model.forward(Var<float>::constant(stack_images(images)));
            std::vector<Var<float>> heads{out.logits};
            heads.insert(heads.end(), out.aux.begin(), out.aux.end());
            const Var<float> loss =
                deep_supervised_loss(heads, batch_labels, head_weights, cfg.loss_mode, dice_opts);
            loss_value = static_cast<double>(loss.value()[0]);
            if (!std::isfinite(loss_value)) {
                const std::string diag = (dir / ("diagnostic_step_" + std::to_string(step) + ".uxck")).string();
                save_weights(model, diag);
                throw NonFiniteError("non-finite loss at step " + std::to_string(step) + "; weights saved to " + diag);
            }
            tape.backward(loss);
        }
        optim.set_lr(sched.lr());
        optim.step();

        json rec{{"step", step}, {"loss", loss_value}, {"lr", sched.lr()}, {"dice", nullptr}};
        const bool eval_now = step % cfg.eval_interval == 0 || step == cfg.steps;
        if (eval_now) {
            result.last_eval = evaluate(model, val_set, cfg.eval_overlap);
            rec["dice"] = dice_record(result.last_eval);
            sched.step(result.last_eval.mean_foreground);
            if (result.last_eval.mean_foreground > result.best_dice) {
                result.best_dice = result.last_eval.mean_foreground;
                result.best_step = step;
                save_weights(model, result.best_checkpoint);
            }
        }
        const auto ms = std::chrono::duration_cast<std::chrono::milliseconds>(std::chrono::steady_clock::now() - t0);
        rec["wall_ms"] = opts.deterministic ? 0 : ms.count();
        log << rec.dump() << '\n' << std::flush;
        if (opts.on_log) opts.on_log(rec);

        if (cfg.checkpoint_interval > 0 && step % cfg.checkpoint_interval == 0) {
            json meta{{"kind", "resume"},
                      {"model", to_json(mc)},
                      {"step", step},
                      {"seed", opts.seed},
                      {"optimizer", optim.state_meta()},
                      {"scheduler", sched.to_json()},
                      {"best_dice", result.best_dice},
                      {"best_step", result.best_step}};
            std::vector<CheckpointEntry<float>> entries = param_entries(model.params());
            for (auto& e : optim.state_entries()) entries.push_back(std::move(e));
            write_checkpoint((dir / resume_checkpoint_name(step)).string(), meta, entries);
        }
        result.last_step = step;
        result.last_loss = loss_value;
    }
    save_weights(model, result.last_checkpoint);
    return result;
}

template EvalResult evaluate<float>(const UXNetModel<float>&, const std::vector<Sample>&, double);
template EvalResult evaluate<double>(const UXNetModel<double>&, const std::vector<Sample>&, double);

}  // namespace uxnet
