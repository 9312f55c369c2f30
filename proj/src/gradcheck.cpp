#include "uxnet/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <stdexcept>

#include "uxnet/loss.hpp"
#include "uxnet/model.hpp"
#include "uxnet/nn.hpp"
#include "uxnet/ops.hpp"
#include "uxnet/rng.hpp"

namespace uxnet {

Tensor<double> finite_diff_grad(const std::function<double(const Tensor<double>&)>& f,
                                const Tensor<double>& x, double h) {
    Tensor<double> probe = x;
    Tensor<double> g(x.shape());
    for (int64_t i = 0; i < x.numel(); ++i) {
        const double orig = probe[i];
        probe[i] = orig + h;
        const double fp = f(probe);
        probe[i] = orig - h;
        const double fm = f(probe);
        probe[i] = orig;
        g[i] = (fp - fm) / (2 * h);
    }
    return g;
}

void GradCompare::merge(const GradCompare& o) {
    max_rel = std::max(max_rel, o.max_rel);
    max_abs = std::max(max_abs, o.max_abs);
    checked += o.checked;
    failures += o.failures;
}

GradCompare compare_gradients(const Tensor<double>& analytic, const Tensor<double>& numeric,
                              const GradTolerance& tol) {
    if (analytic.shape() != numeric.shape()) {
        throw ShapeError("compare_gradients: shapes differ " + shape_str(analytic.shape()) + " vs " +
                         shape_str(numeric.shape()));
    }
    GradCompare c;
    for (int64_t i = 0; i < analytic.numel(); ++i) {
        const double a = analytic[i], n = numeric[i];
        const double err = std::abs(a - n);
        ++c.checked;
        c.max_abs = std::max(c.max_abs, err);
        if (!std::isfinite(a) || !std::isfinite(n)) {
            ++c.failures;
            continue;
        }
        const double scale = std::max(std::abs(a), std::abs(n));
        if (scale < tol.near_zero()) {
            if (err > tol.abs_tol) ++c.failures;
            continue;
        }
        const double rel = err / scale;
        c.max_rel = std::max(c.max_rel, rel);
        if (!(rel < tol.rel_tol)) ++c.failures;
    }
    return c;
}

GradCompare check_gradients(const GradProblem& pr, uint64_t seed, double h,
                            const GradTolerance& tol) {
    Rng rng(seed);
    std::vector<Tensor<double>> inputs = pr.inputs;

    // Analytic pass.
    Tensor<double> proj;
    std::vector<Tensor<double>> analytic;
    {
        GradTape<double> tape;
        TapeScope<double> scope(tape);
        std::vector<Var<double>> leaves;
        for (const auto& t : inputs) leaves.push_back(Var<double>::leaf(t, true));
        for (auto* p : pr.params) p->zero_grad();
        Var<double> out = pr.f(leaves);
        proj = Tensor<double>(out.shape());
        for (auto& v : proj.values()) v = rng.normal();
        Var<double> loss = sum(mul(out, Var<double>::constant(proj)));
        tape.backward(loss);
        for (const auto& l : leaves) analytic.push_back(l.grad());
        for (auto* p : pr.params) analytic.push_back(p->grad);
    }

    auto evaluate = [&]() {
        NoGradScope<double> off;
        std::vector<Var<double>> leaves;
        for (const auto& t : inputs) leaves.push_back(Var<double>::constant(t));
        const Var<double> result = pr.f(leaves);
        const Tensor<double>& out = result.value();
        long double s = 0;
        for (int64_t i = 0; i < out.numel(); ++i) s += static_cast<long double>(out[i]) * proj[i];
        return static_cast<double>(s);
    };

    GradCompare total;
    size_t slot = 0;
    for (size_t i = 0; i < inputs.size(); ++i, ++slot) {
        const Tensor<double> saved = inputs[i];
        Tensor<double> num = finite_diff_grad(
            [&](const Tensor<double>& t) {
                inputs[i] = t;
                return evaluate();
            },
            saved, h);
        inputs[i] = saved;
        total.merge(compare_gradients(analytic[slot], num, tol));
    }
    for (auto* p : pr.params) {
        const Tensor<double> saved = p->value;
        Tensor<double> num = finite_diff_grad(
            [&](const Tensor<double>& t) {
                p->value = t;
                return evaluate();
            },
            saved, h);
        p->value = saved;
        total.merge(compare_gradients(analytic[slot++], num, tol));
    }
    return total;
}

namespace {

using V = Var<double>;

// Small enough that central-difference truncation error stays well under the
// relative tolerance, large enough that round-off does not dominate.
constexpr double kCaseStep = 1e-5;

Tensor<double> randn(Rng& rng, Shape shape, double scale = 1.0) {
    Tensor<double> t(std::move(shape));
    for (auto& v : t.values()) v = scale * rng.normal();
    return t;
}

/// Values bounded away from zero, for kinks at the origin.
Tensor<double> randn_away(Rng& rng, Shape shape, double gap) {
    Tensor<double> t = randn(rng, std::move(shape));
    for (auto& v : t.values()) v = v >= 0 ? v + gap : v - gap;
    return t;
}

LabelBatch random_labels(Rng& rng, const Shape& logits) {
    Shape s{logits[0], logits[2], logits[3], logits[4]};
    std::vector<int32_t> d(static_cast<size_t>(shape_numel(s)));
    for (auto& v : d) v = static_cast<int32_t>(rng.below(static_cast<uint64_t>(logits[1])));
    return {s, d};
}

/// A scaling op whose backward deliberately overstates the gradient by 10%.
V faulty_scale(const V& x) {
    Tensor<double> y = x.value();
    for (auto& v : y.values()) v *= 2.0;
    return make_result<double>("faulty_scale", std::move(y), {x}, [](Node<double>& self) {
        Tensor<double> g = self.grad;
        for (auto& v : g.values()) v *= 2.2;
        self.inputs[0]->accumulate(std::move(g));
    });
}

struct CaseSet {
    std::vector<std::string> names;
    std::vector<std::function<GradCompare(uint64_t)>> runs;

    void add(std::string name, std::function<GradCompare(uint64_t)> fn) {
        names.push_back(std::move(name));
        runs.push_back(std::move(fn));
    }
};

/// Randomizes parameters so gradients are well away from zero; initial
/// weights are too small to exercise every branch.
void scramble(ParamStore<double>& store, Rng& rng) {
    for (const auto& p : store.all()) {
        const bool gamma = p->name.size() > 6 && p->name.substr(p->name.size() - 6) == ".gamma";
        for (auto& v : p->value.values()) v = gamma ? 1.0 + 0.3 * rng.normal() : 0.5 * rng.normal();
    }
}

std::vector<Parameter<double>*> param_list(ParamStore<double>& store) {
    std::vector<Parameter<double>*> out;
    for (const auto& p : store.all()) out.push_back(p.get());
    return out;
}

/// Smallest |pre-activation| feeding a leaky ReLU inside `unit`. Central
/// differences are only meaningful when no perturbation crosses the kink.
double kink_margin(const ResUnit<double>& unit, const Tensor<double>& x) {
    NoGradScope<double> off;
    const V in = V::constant(x);
    const V a = unit.norm1(unit.conv1(in));
    V s;
    if (unit.single_conv) {
        s = add(a, in);
    } else {
        const V h = unit.norm2(unit.conv2(leaky_relu(a, ResUnit<double>::kSlope)));
        s = add(h, unit.proj.weight ? unit.proj_norm(unit.proj(in)) : in);
    }
    double m = std::numeric_limits<double>::infinity();
    for (double v : a.value().values()) m = std::min(m, std::abs(v));
    for (double v : s.value().values()) m = std::min(m, std::abs(v));
    return m;
}

constexpr double kKinkMargin = 2e-3;

using Builder = std::function<GradProblem(Rng&)>;

void add_cases(CaseSet& set, const std::string& op, std::vector<std::pair<std::string, Builder>> cases,
               double h = kCaseStep) {
    for (auto& [name, build] : cases) {
        set.add(op + "/" + name, [build, h](uint64_t seed) {
            Rng rng(seed);
            GradProblem p = build(rng);
            return check_gradients(p, seed ^ 0x5bd1e995ULL, h);
        });
    }
}

std::map<std::string, CaseSet> build_registry(bool inject_fault) {
    std::map<std::string, CaseSet> reg;
    const std::vector<Shape> ew_shapes{{2, 3}, {1, 2, 3, 2, 2}, {5}};

    auto binary = [&](const std::string& op, std::function<V(const V&, const V&)> fn) {
        std::vector<std::pair<std::string, Builder>> cases;
        for (const auto& s : ew_shapes) {
            cases.push_back({shape_str(s), [s, fn](Rng& r) {
                                 return GradProblem{{randn(r, s), randn(r, s)}, {},
                                                    [fn](const std::vector<V>& in) { return fn(in[0], in[1]); }};
                             }});
        }
        cases.push_back({"scalar-operand", [fn](Rng& r) {
                             return GradProblem{{randn(r, {2, 3, 2}), randn(r, {})}, {},
                                                [fn](const std::vector<V>& in) { return fn(in[0], in[1]); }};
                         }});
        add_cases(reg[op], op, cases);
    };
    binary("add", [](const V& a, const V& b) { return add(a, b); });
    binary("sub", [](const V& a, const V& b) { return sub(a, b); });
    binary("mul", [](const V& a, const V& b) { return mul(a, b); });

    auto unary = [&](const std::string& op, std::function<V(const V&)> fn, std::vector<Shape> shapes,
                     double away = 0.0) {
        std::vector<std::pair<std::string, Builder>> cases;
        for (const auto& s : shapes) {
            cases.push_back({shape_str(s), [s, fn, away](Rng& r) {
                                 Tensor<double> x = away > 0 ? randn_away(r, s, away) : randn(r, s);
                                 return GradProblem{{x}, {}, [fn](const std::vector<V>& in) { return fn(in[0]); }};
                             }});
        }
        add_cases(reg[op], op, cases);
    };
    unary("mul_scalar", [](const V& x) { return mul_scalar(x, -1.7); }, ew_shapes);
    unary("add_scalar", [](const V& x) { return add_scalar(x, 0.3); }, ew_shapes);
    unary("gelu", [](const V& x) { return gelu(x); }, {{2, 3}, {1, 2, 3, 3, 2}, {7}});
    unary("leaky_relu", [](const V& x) { return leaky_relu(x, 0.01); }, {{2, 3}, {1, 2, 3, 3, 2}, {7}},
          0.05);
    unary("softmax_channels", [](const V& x) { return softmax_channels(x); },
          {{1, 3, 2, 2, 2}, {2, 5, 2, 3, 1}, {1, 2, 3, 3, 3}});

    {
        std::vector<std::pair<std::string, Builder>> sums, means;
        const std::vector<std::tuple<Shape, std::vector<int>, bool>> specs{
            {{2, 3}, {}, false}, {{2, 3, 4}, {1}, false}, {{1, 2, 3, 2, 2}, {0, 2}, true}};
        for (const auto& [s, axes, keep] : specs) {
            const std::string name = shape_str(s) + (axes.empty() ? "/all" : "/axes");
            sums.push_back({name, [s = s, axes = axes, keep = keep](Rng& r) {
                                return GradProblem{{randn(r, s)}, {},
                                                   [axes, keep](const std::vector<V>& in) { return sum(in[0], axes, keep); }};
                            }});
            means.push_back({name, [s = s, axes = axes, keep = keep](Rng& r) {
                                 return GradProblem{{randn(r, s)}, {},
                                                    [axes, keep](const std::vector<V>& in) { return mean(in[0], axes, keep); }};
                             }});
        }
        add_cases(reg["sum"], "sum", sums);
        add_cases(reg["mean"], "mean", means);
    }

    {
        std::vector<std::pair<std::string, Builder>> cases;
        const std::vector<std::pair<Shape, Shape>> pairs{{{1, 2, 3, 3, 3}, {1, 3, 3, 3, 3}},
                                                         {{2, 1, 2, 2, 2}, {2, 2, 2, 2, 2}},
                                                         {{1, 2, 4, 3, 2}, {1, 1, 4, 3, 2}}};
        for (const auto& [a, b] : pairs) {
            cases.push_back({shape_str(a) + "+" + shape_str(b), [a = a, b = b](Rng& r) {
                                 return GradProblem{{randn(r, a), randn(r, b)}, {},
                                                    [](const std::vector<V>& in) { return concat_channels(in[0], in[1]); }};
                             }});
        }
        add_cases(reg["concat_channels"], "concat_channels", cases);
    }

    auto conv_cases = [&](const std::string& op, std::vector<std::pair<Shape, Conv3dSpec>> specs,
                          bool transposed) {
        std::vector<std::pair<std::string, Builder>> cases;
        for (const auto& [xs, spec] : specs) {
            const std::string name = shape_str(xs) + "/k" + std::to_string(spec.kernel[0]) + "s" +
                                     std::to_string(spec.stride[0]) + "p" +
                                     std::to_string(spec.padding[0]) + "g" + std::to_string(spec.groups);
            cases.push_back({name, [xs = xs, spec = spec, transposed](Rng& r) {
                                 const Shape ws = transposed ? spec.transposed_weight_shape()
                                                             : spec.weight_shape();
                                 std::vector<Tensor<double>> in{randn(r, xs), randn(r, ws, 0.5)};
                                 if (spec.bias) in.push_back(randn(r, {spec.out_channels}));
                                 return GradProblem{in, {}, [spec, transposed](const std::vector<V>& v) {
                                                        V b = v.size() > 2 ? v[2] : V();
                                                        return transposed ? conv_transpose3d(v[0], spec, v[1], b)
                                                                          : conv3d(v[0], spec, v[1], b);
                                                    }};
                             }});
        }
        add_cases(reg[op], op, cases);
    };
    conv_cases("conv3d",
               {{{1, 2, 5, 5, 5}, Conv3dSpec::cube(2, 3, 3, 1, 1)},
                {{1, 3, 6, 5, 4}, Conv3dSpec::cube(3, 2, 2, 2, 0)},
                {{2, 2, 4, 4, 4}, Conv3dSpec::cube(2, 4, 3, 2, 1, 1, false)}},
               false);
    conv_cases("conv3d_depthwise",
               {{{1, 3, 5, 5, 5}, Conv3dSpec::cube(3, 3, 3, 1, 1, 3)},
                {{1, 2, 6, 6, 6}, Conv3dSpec::cube(2, 2, 5, 1, 2, 2)},
                {{2, 4, 5, 5, 5}, Conv3dSpec::cube(4, 4, 3, 2, 0, 4)}},
               false);
    conv_cases("conv3d_grouped",
               {{{1, 4, 4, 4, 4}, Conv3dSpec::cube(4, 6, 3, 1, 1, 2)},
                {{1, 6, 3, 3, 3}, Conv3dSpec::cube(6, 3, 1, 1, 0, 3)},
                {{1, 4, 4, 4, 4}, Conv3dSpec::cube(4, 8, 2, 2, 0, 2, false)}},
               false);
    conv_cases("conv_transpose3d",
               {{{1, 3, 3, 3, 3}, Conv3dSpec::cube(3, 2, 2, 2, 0, 1, false)},
                {{1, 2, 2, 3, 2}, Conv3dSpec::cube(2, 4, 3, 2, 1)},
                {{2, 2, 2, 2, 2}, Conv3dSpec::cube(2, 2, 2, 2, 0, 2)}},
               true);

    {
        std::vector<std::pair<std::string, Builder>> cases;
        for (auto [c, m] : {std::pair<int64_t, int64_t>{2, 4}, {3, 2}, {1, 3}}) {
            cases.push_back({"C" + std::to_string(c) + "xM" + std::to_string(m), [c = c, m = m](Rng& r) {
                                 return GradProblem{{randn(r, {1, c, 3, 2, 3}), randn(r, {c * m, 1, 1, 1, 1}),
                                                     randn(r, {c * m})},
                                                    {},
                                                    [m](const std::vector<V>& v) {
                                                        return conv3d_depthwise_multiplier(v[0], m, v[1], v[2]);
                                                    }};
                             }});
        }
        add_cases(reg["depthwise_multiplier"], "depthwise_multiplier", cases);
    }

    auto norm_cases = [&](const std::string& op, bool layer) {
        std::vector<std::pair<std::string, Builder>> cases;
        for (const Shape& s : std::vector<Shape>{{1, 4, 3, 3, 3}, {2, 3, 2, 2, 2}, {1, 6, 2, 3, 1}}) {
            cases.push_back({shape_str(s), [s, layer](Rng& r) {
                                 const int64_t c = s[1];
                                 Tensor<double> gamma = randn(r, {c}, 0.3);
                                 for (auto& g : gamma.values()) g += 1.0;
                                 return GradProblem{{randn(r, s, 2.0), gamma, randn(r, {c})}, {},
                                                    [c, layer](const std::vector<V>& v) {
                                                        return layer ? layer_norm_channel(v[0], NormSpec::layer_norm(c), v[1], v[2])
                                                                     : instance_norm(v[0], NormSpec::instance_norm(c), v[1], v[2]);
                                                    }};
                             }});
        }
        add_cases(reg[op], op, cases);
    };
    norm_cases("layer_norm_channel", true);
    norm_cases("instance_norm", false);

    {
        std::vector<std::pair<std::string, Builder>> cases;
        for (auto [s, f] : {std::pair<Shape, int64_t>{{1, 2, 2, 2, 2}, 2}, {{2, 1, 1, 2, 1}, 3}, {{1, 1, 2, 1, 1}, 4}}) {
            cases.push_back({shape_str(s) + "x" + std::to_string(f), [s = s, f = f](Rng& r) {
                                 return GradProblem{{randn(r, s)}, {},
                                                    [f](const std::vector<V>& v) { return upsample_nearest(v[0], f); }};
                             }});
        }
        add_cases(reg["upsample_nearest"], "upsample_nearest", cases);
    }

    {
        std::vector<std::pair<std::string, Builder>> dice, ce;
        for (auto [s, bg] : {std::pair<Shape, bool>{{1, 3, 4, 4, 4}, true}, {{2, 2, 3, 3, 3}, true},
                             {{1, 4, 2, 3, 4}, false}}) {
            const std::string name = shape_str(s) + (bg ? "" : "/no-background");
            dice.push_back({name, [s = s, bg = bg](Rng& r) {
                                LabelBatch labels = random_labels(r, s);
                                return GradProblem{{randn(r, s)}, {},
                                                   [labels, bg](const std::vector<V>& v) {
                                                       return dice_loss(v[0], labels, DiceOptions{1e-5, bg});
                                                   }};
                            }});
            ce.push_back({shape_str(s), [s = s](Rng& r) {
                              LabelBatch labels = random_labels(r, s);
                              return GradProblem{{randn(r, s)}, {},
                                                 [labels](const std::vector<V>& v) { return cross_entropy(v[0], labels); }};
                          }});
        }
        add_cases(reg["dice_loss"], "dice_loss", dice);
        add_cases(reg["cross_entropy"], "cross_entropy", ce);
    }

    {
        // Full encoder block: gradients w.r.t. the input and every parameter.
        struct BlockCase {
            std::string name;
            Shape x;
            int64_t k;
            ScalingMode scaling;
            ConvMode conv;
        };
        std::vector<BlockCase> specs{{"dcs/(1,4,5,5,5)/k3", {1, 4, 5, 5, 5}, 3, ScalingMode::DCS, ConvMode::DEPTHWISE},
                                     {"dcs/(1,3,6,6,6)/k5", {1, 3, 6, 6, 6}, 5, ScalingMode::DCS, ConvMode::DEPTHWISE},
                                     {"mlp/(1,3,4,4,4)/k3", {1, 3, 4, 4, 4}, 3, ScalingMode::MLP, ConvMode::DEPTHWISE},
                                     {"standard/(1,3,4,4,4)/k3", {1, 3, 4, 4, 4}, 3, ScalingMode::DCS, ConvMode::STANDARD}};
        for (const auto& bc : specs) {
            reg["uxnet_block"].add("uxnet_block/" + bc.name, [bc](uint64_t seed) {
                Rng rng(seed);
                ParamStore<double> store;
                auto block = UXNetBlock<double>::make(store, "block", bc.x[1], bc.k, bc.scaling, bc.conv, rng);
                scramble(store, rng);
                GradProblem p{{randn(rng, bc.x)}, param_list(store),
                              [&block](const std::vector<V>& v) { return block(v[0]); }};
                return check_gradients(p, seed ^ 0x5bd1e995ULL, kCaseStep);
            });
        }
        struct ResCase {
            std::string name;
            int64_t in, out;
            bool single;
        };
        for (const auto& rc : std::vector<ResCase>{{"2->3", 2, 3, false}, {"3->3", 3, 3, false}, {"single/2", 2, 2, true}}) {
            reg["res_unit"].add("res_unit/" + rc.name, [rc](uint64_t seed) {
                Rng rng(seed);
                ParamStore<double> store;
                auto unit = ResUnit<double>::make(store, "res", rc.in, rc.out, rng, rc.single);
                scramble(store, rng);
                Tensor<double> x = randn(rng, {1, rc.in, 4, 3, 4});
                for (int redraw = 0; redraw < 100 && kink_margin(unit, x) < kKinkMargin; ++redraw) {
                    x = randn(rng, x.shape());
                }
                GradProblem p{{x}, param_list(store), [&unit](const std::vector<V>& v) { return unit(v[0]); }};
                return check_gradients(p, seed ^ 0x5bd1e995ULL, kCaseStep);
            });
        }
    }

    if (inject_fault) {
        unary("faulty_scale", [](const V& x) { return faulty_scale(x); }, {{3}, {2, 2}, {1, 1, 2, 2, 1}});
    }
    return reg;
}

}  // namespace

std::vector<std::string> gradcheck_ops(bool include_fault_fixture) {
    std::vector<std::string> out;
    for (const auto& [name, set] : build_registry(include_fault_fixture)) out.push_back(name);
    return out;
}

std::vector<GradCheckResult> run_gradcheck(const std::string& scope, uint64_t seed, bool inject_fault) {
    const auto reg = build_registry(inject_fault);
    if (scope != "all" && !reg.count(scope)) {
        throw std::invalid_argument("gradcheck: unknown op \"" + scope + "\"");
    }
    std::vector<GradCheckResult> results;
    uint64_t case_seed = seed;
    for (const auto& [op, set] : reg) {
        if (scope != "all" && scope != op) continue;
        for (size_t i = 0; i < set.runs.size(); ++i) {
            results.push_back({op, set.names[i], set.runs[i](++case_seed * 0x9E3779B97F4A7C15ULL)});
        }
    }
    return results;
}

}  // namespace uxnet
