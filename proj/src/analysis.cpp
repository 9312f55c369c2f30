#include "uxnet/analysis.hpp"

#include <cstdio>
#include <sstream>

namespace uxnet {

Shape reference_input_shape(const UXNetConfig& config) {
    return {1, config.in_channels, 96, 96, 96};
}

std::string param_group(const std::string& name) {
    const auto first = name.find('.');
    if (first == std::string::npos) return name;
    const std::string head = name.substr(0, first);
    if (head == "encoder" || head == "decoder") {
        const auto second = name.find('.', first + 1);
        return second == std::string::npos ? name : name.substr(0, second);
    }
    return head;
}

template <typename T>
CostReport count_params(const UXNetModel<T>& model) {
    CostReport r;
    for (const auto& p : model.params().all()) {
        r.group_params[param_group(p->name)] += p->value.numel();
        r.total_params += p->value.numel();
    }
    r.rf_trace = receptive_field(model.config());
    return r;
}

namespace {

int64_t voxels(const Shape& s) { return s[0] * s[2] * s[3] * s[4]; }

/// Mirrors UXNetModel's construction and forward pass layer by layer.
class Walker {
public:
    explicit Walker(CostReport& r) : r_(r) {}

    Shape conv(const std::string& name, const Conv3dSpec& spec, const Shape& in,
               bool transposed = false) {
        spec.validate();
        LayerCost l;
        l.name = name;
        l.kind = transposed ? "conv_transpose" : "conv";
        l.params = shape_numel(transposed ? spec.transposed_weight_shape() : spec.weight_shape()) +
                   (spec.bias ? spec.out_channels : 0);
        l.output_shape = transposed ? spec.transposed_output_shape(in) : spec.output_shape(in);
        if (transposed) {
            l.macs = voxels(in) * spec.in_channels * (spec.out_channels / spec.groups) *
                     spec.kernel_volume();
        } else {
            l.macs = voxels(l.output_shape) * spec.out_channels * (spec.in_channels / spec.groups) *
                     spec.kernel_volume();
        }
        return push(std::move(l));
    }

    Shape norm(const std::string& name, const Shape& in) {
        return push({name, "norm", 2 * in[1], 0, shape_numel(in) * ElementwiseCosts::norm, in});
    }

    Shape elementwise(const std::string& name, const char* kind, int64_t per, const Shape& in) {
        return push({name, kind, 0, 0, shape_numel(in) * per, in});
    }

    Shape concat(const Shape& a, const Shape& b) {
        Shape out = a;
        out[1] = a[1] + b[1];
        return out;
    }

    Shape block(const std::string& name, const UXNetConfig& c, int64_t ch, const Shape& in) {
        const int64_t k = c.kernel_size;
        const int64_t groups = c.conv_mode == ConvMode::DEPTHWISE ? ch : 1;
        Shape s = norm(name + ".ln1", in);
        s = conv(name + ".dwc", Conv3dSpec::cube(ch, ch, k, 1, (k - 1) / 2, groups), s);
        s = elementwise(name + ".residual1", "add", ElementwiseCosts::residual_add, s);
        if (c.scaling_mode == ScalingMode::NONE) return s;
        const int64_t g = c.scaling_mode == ScalingMode::DCS ? ch : 1;
        Shape h = norm(name + ".ln2", s);
        h = conv(name + ".expand", Conv3dSpec::cube(ch, 4 * ch, 1, 1, 0, g), h);
        h = elementwise(name + ".gelu", "gelu", ElementwiseCosts::gelu, h);
        h = conv(name + ".compress", Conv3dSpec::cube(4 * ch, ch, 1, 1, 0, g), h);
        return elementwise(name + ".residual2", "add", ElementwiseCosts::residual_add, h);
    }

    Shape res_unit(const std::string& name, int64_t in_c, int64_t out_c, const Shape& in,
                   bool single = false) {
        Shape h = conv(name + ".conv1", Conv3dSpec::cube(in_c, out_c, 3, 1, 1, 1, false), in);
        h = norm(name + ".norm1", h);
        if (single) {
            h = elementwise(name + ".residual", "add", ElementwiseCosts::residual_add, h);
            return elementwise(name + ".act", "leaky_relu", ElementwiseCosts::leaky_relu, h);
        }
        h = elementwise(name + ".act1", "leaky_relu", ElementwiseCosts::leaky_relu, h);
        h = conv(name + ".conv2", Conv3dSpec::cube(out_c, out_c, 3, 1, 1, 1, false), h);
        h = norm(name + ".norm2", h);
        if (in_c != out_c) {
            Shape p = conv(name + ".proj", Conv3dSpec::cube(in_c, out_c, 1, 1, 0, 1, false), in);
            norm(name + ".proj_norm", p);
        }
        h = elementwise(name + ".residual", "add", ElementwiseCosts::residual_add, h);
        return elementwise(name + ".act2", "leaky_relu", ElementwiseCosts::leaky_relu, h);
    }

private:
    Shape push(LayerCost l) {
        r_.total_params += l.params;
        r_.total_macs += l.macs;
        r_.elementwise_flops += l.elementwise_flops;
        r_.group_params[param_group(l.name + ".x")] += l.params;
        Shape out = l.output_shape;
        r_.layers.push_back(std::move(l));
        return out;
    }

    CostReport& r_;
};

}  // namespace

CostReport count_flops(const UXNetConfig& c, const Shape& input_shape) {
    c.validate();
    if (input_shape.size() != 5 || input_shape[1] != c.in_channels) {
        throw ShapeError("count_flops: input must be (N, " + std::to_string(c.in_channels) +
                         ", H, W, D), got " + shape_str(input_shape));
    }
    for (size_t a = 2; a < 5; ++a) {
        if (input_shape[a] % c.depth_factor() != 0) {
            throw ShapeError("count_flops: spatial extents must be multiples of " +
                             std::to_string(c.depth_factor()) + ", got " + shape_str(input_shape));
        }
    }
    CostReport r;
    r.input_shape = input_shape;
    Walker w(r);
    const auto& ch = c.stage_channels;
    const int64_t pk = c.effective_patch_kernel();

    Shape z = w.conv("encoder.patch_embed", Conv3dSpec::cube(c.in_channels, ch[0], pk, 2, (pk - 1) / 2),
                     input_shape);
    std::vector<Shape> stage_out;
    for (size_t s = 0; s < 4; ++s) {
        for (int64_t b = 0; b < c.stage_depths[s]; ++b) {
            z = w.block("encoder.stage" + std::to_string(s) + ".block" + std::to_string(b), c, ch[s], z);
        }
        stage_out.push_back(z);
        if (s == 3 && !c.has_bottleneck()) break;
        const int64_t next = s == 3 ? *c.bottleneck_channels : ch[s + 1];
        z = w.conv("encoder.downsample" + std::to_string(s), Conv3dSpec::cube(ch[s], next, 2, 2, 0), z);
    }
    if (c.has_bottleneck() && c.bottleneck_block) {
        z = w.res_unit("bottleneck", *c.bottleneck_channels, *c.bottleneck_channels, z, true);
    }

    std::vector<Shape> skips;
    skips.push_back(w.res_unit("decoder.input", c.in_channels, ch[0], input_shape));
    for (size_t s = 0; s < 4; ++s) {
        skips.push_back(w.res_unit("decoder.skip" + std::to_string(s), ch[s], ch[s], stage_out[s]));
    }
    std::vector<std::pair<int64_t, int64_t>> ups;
    if (c.has_bottleneck()) ups.push_back({*c.bottleneck_channels, ch[3]});
    ups.push_back({ch[3], ch[2]});
    ups.push_back({ch[2], ch[1]});
    ups.push_back({ch[1], ch[0]});
    ups.push_back({ch[0], ch[0]});
    Shape d = c.has_bottleneck() ? z : skips[4];
    size_t next_skip = c.has_bottleneck() ? 4 : 3;
    std::vector<Shape> levels;
    for (size_t i = 0; i < ups.size(); ++i, --next_skip) {
        const auto [from, to] = ups[i];
        const std::string name = "decoder.up" + std::to_string(i);
        Shape u = w.conv(name + ".transp", Conv3dSpec::cube(from, to, 2, 2, 0, 1, false), d, true);
        d = w.res_unit(name + ".res", 2 * to, to, w.concat(u, skips[next_skip]));
        levels.push_back(d);
    }
    w.conv("head", Conv3dSpec::cube(ch[0], c.num_classes, 1), d);
    if (c.deep_supervision) {
        const size_t n = levels.size();
        const int64_t aux_in[3] = {ch[0], ch[1], ch[2]};
        for (size_t i = 0; i < 3; ++i) {
            w.conv("aux" + std::to_string(i), Conv3dSpec::cube(aux_in[i], c.num_classes, 1),
                   levels[n - 2 - i]);
        }
    }
    r.rf_trace = receptive_field(c);
    return r;
}

std::vector<RfStep> receptive_field(const UXNetConfig& c) {
    c.validate();
    std::vector<RfStep> trace;
    int64_t rf = 1, jump = 1;
    auto step = [&](const std::string& layer, int64_t k, int64_t s) {
        rf += (k - 1) * jump;
        jump *= s;
        trace.push_back({layer, k, s, rf, jump});
    };
    step("encoder.patch_embed", c.effective_patch_kernel(), 2);
    for (size_t s = 0; s < 4; ++s) {
        for (int64_t b = 0; b < c.stage_depths[s]; ++b) {
            step("encoder.stage" + std::to_string(s) + ".block" + std::to_string(b) + ".dwc",
                 c.kernel_size, 1);
        }
        if (s == 3 && !c.has_bottleneck()) break;
        step("encoder.downsample" + std::to_string(s), 2, 2);
    }
    if (c.has_bottleneck() && c.bottleneck_block) step("bottleneck.conv1", 3, 1);
    return trace;
}

TableFormat parse_table_format(const std::string& s) {
    if (s == "markdown" || s == "md") return TableFormat::Markdown;
    if (s == "csv") return TableFormat::Csv;
    if (s == "json") return TableFormat::Json;
    throw ConfigError("unknown table format \"" + s + "\" (expected markdown, csv or json)");
}

namespace {

std::string fixed1(double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.1f", v);
    return buf;
}

}  // namespace

AblationTable emit_ablation_table(const std::vector<AblationRow>& rows, TableFormat format,
                                  const std::vector<int64_t>& spatial) {
    AblationTable out;
    std::ostringstream doc;
    json arr = json::array();
    if (format == TableFormat::Markdown) {
        doc << "| Name | Params (M) | FLOPs (G, 2xMAC) | FLOPs (G, 1xMAC) | RF exit |\n"
            << "|---|---:|---:|---:|---:|\n";
    } else if (format == TableFormat::Csv) {
        doc << "name,params,flops_2mac,flops_1mac,rf_exit\n";
    }
    for (const auto& row : rows) {
        try {
            if (spatial.size() != 3) throw ShapeError("reference input needs three spatial extents");
            const Shape input{1, row.config.in_channels, spatial[0], spatial[1], spatial[2]};
            const CostReport r = count_flops(row.config, input);
            const double pm = static_cast<double>(r.total_params) / 1e6;
            const double g2 = static_cast<double>(r.flops_2mac()) / 1e9;
            const double g1 = static_cast<double>(r.flops_1mac()) / 1e9;
            switch (format) {
                case TableFormat::Markdown:
                    doc << "| " << row.name << " | " << fixed1(pm) << " | " << fixed1(g2) << " | "
                        << fixed1(g1) << " | " << r.rf_exit() << " |\n";
                    break;
                case TableFormat::Csv:
                    doc << row.name << "," << fixed1(pm) << "," << fixed1(g2) << "," << fixed1(g1)
                        << "," << r.rf_exit() << "\n";
                    break;
                case TableFormat::Json:
                    arr.push_back({{"name", row.name},
                                   {"params", r.total_params},
                                   {"flops_2mac", r.flops_2mac()},
                                   {"flops_1mac", r.flops_1mac()},
                                   {"rf_exit", r.rf_exit()}});
                    break;
            }
        } catch (const std::exception& e) {
            out.failures.push_back(row.name + ": " + e.what());
            switch (format) {
                case TableFormat::Markdown:
                    doc << "| " << row.name << " | error: " << e.what() << " | | | |\n";
                    break;
                case TableFormat::Csv: doc << row.name << ",error,,,\n"; break;
                case TableFormat::Json: arr.push_back({{"name", row.name}, {"error", e.what()}}); break;
            }
        }
    }
    if (format == TableFormat::Json) {
        doc << arr.dump(2) << "\n";
    } else if (format == TableFormat::Markdown) {
        doc << "\n" << CostReport::kConvention << "; batch 1 at " << spatial.at(0) << "x"
            << spatial.at(1) << "x" << spatial.at(2) << ".\n";
    }
    out.document = doc.str();
    return out;
}

std::vector<AblationRow> kernel_sweep(const UXNetConfig& base, const std::vector<int64_t>& kernels,
                                      int64_t pinned_patch_kernel) {
    std::vector<AblationRow> rows;
    for (int64_t k : kernels) {
        UXNetConfig c = base;
        c.kernel_size = k;
        if (!c.patch_kernel) c.patch_kernel = pinned_patch_kernel;
        rows.push_back({"kernel=" + std::to_string(k), c});
    }
    return rows;
}

std::vector<std::string> variant_names() {
    return {"reference", "optimized", "standard-conv", "mlp", "no-scaling"};
}

AblationRow named_variant(const std::string& name) {
    UXNetConfig c = UXNetConfig::reference();
    if (name == "reference") return {name, c};
    if (name == "optimized") return {name, UXNetConfig::optimized()};
    if (name == "standard-conv") {
        c.conv_mode = ConvMode::STANDARD;
        return {name, c};
    }
    if (name == "mlp") {
        c.scaling_mode = ScalingMode::MLP;
        return {name, c};
    }
    if (name == "no-scaling") {
        c.scaling_mode = ScalingMode::NONE;
        return {name, c};
    }
    throw ConfigError("unknown variant \"" + name + "\"");
}

template CostReport count_params<float>(const UXNetModel<float>&);
template CostReport count_params<double>(const UXNetModel<double>&);

}  // namespace uxnet
