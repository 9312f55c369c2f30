#pragma once

#include <functional>
#include <string>
#include <vector>

#include "uxnet/autodiff.hpp"

namespace uxnet {

/// Central differences (f(x + h e_i) - f(x - h e_i)) / 2h for every element.
Tensor<double> finite_diff_grad(const std::function<double(const Tensor<double>&)>& f,
                                const Tensor<double>& x, double h = 1e-5);

/// Elements with max(|a|, |n|) below abs_tol / rel_tol are near zero and pass
/// when |a - n| <= abs_tol; all others need |a - n| / max(|a|, |n|) < rel_tol.
/// The two rules meet at the cut-over, so neither is looser than the other there.
struct GradTolerance {
    double rel_tol = 1e-4;
    double abs_tol = 1e-7;

    double near_zero() const { return abs_tol / rel_tol; }
};

struct GradCompare {
    double max_rel = 0;   // over elements judged relatively
    double max_abs = 0;   // over all elements
    int64_t checked = 0;
    int64_t failures = 0;
    bool passed() const { return failures == 0 && checked > 0; }
    void merge(const GradCompare& o);
};

GradCompare compare_gradients(const Tensor<double>& analytic, const Tensor<double>& numeric,
                              const GradTolerance& tol = {});

/// A differentiable function of leaf inputs and (optionally) parameters it
/// reads through Var::param. The check reduces its output to the scalar
/// sum(out * R) with a fixed random R so every output element matters.
struct GradProblem {
    std::vector<Tensor<double>> inputs;
    std::vector<Parameter<double>*> params;
    std::function<Var<double>(const std::vector<Var<double>>&)> f;
};

GradCompare check_gradients(const GradProblem& problem, uint64_t seed, double h = 1e-5,
                            const GradTolerance& tol = {});

struct GradCheckResult {
    std::string op;
    std::string case_name;
    GradCompare cmp;
};

/// Names accepted by run_gradcheck. `faulty_scale` is a deliberately wrong
/// backward rule used as a negative control; it only runs when requested.
std::vector<std::string> gradcheck_ops(bool include_fault_fixture = false);

/// Runs every case of `scope` ("all" or one op name), at least three random
/// shapes per op, in float64.
std::vector<GradCheckResult> run_gradcheck(const std::string& scope, uint64_t seed = 0,
                                           bool inject_fault = false);

}  // namespace uxnet
