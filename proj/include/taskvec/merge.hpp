#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstddef>
#include <mutex>
#include <stdexcept>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include "taskvec/checkpoint.hpp"
#include "taskvec/matrix.hpp"

namespace taskvec {

enum class MergeMethod { TaskArithmetic, Wudi, Amm };
enum class StepRule { Adaptive, Fixed };

inline const char* merge_method_name(MergeMethod m) {
    switch (m) {
        case MergeMethod::TaskArithmetic: return "task_arithmetic";
        case MergeMethod::Wudi: return "wudi";
        case MergeMethod::Amm: return "amm";
    }
    return "?";
}

struct MergeConfig {
    MergeMethod method = MergeMethod::Amm;
    int steps = 300;
    StepRule step_rule = StepRule::Adaptive;
    double adaptive_c = 0.1;  // step is adaptive_c / trace(H), H the loss Hessian
    double fixed_lr = 0.05;   // step under StepRule::Fixed
    double gamma = 1.0;       // compatibility-weight scale
    double lambda = 0.1;      // projection-penalty strength
    double ta_coefficient = 1.0;
    bool wudi_compat = false;  // forces w_i = 1 and lambda = 0 in the iterative path

    void validate() const {
        if (steps < 1) throw std::invalid_argument("MergeConfig: steps must be >= 1");
        if (gamma < 0.0) throw std::invalid_argument("MergeConfig: gamma must be >= 0");
        if (lambda < 0.0) throw std::invalid_argument("MergeConfig: lambda must be >= 0");
        if (!(adaptive_c > 0.0) || adaptive_c > 1.0)
            throw std::invalid_argument("MergeConfig: adaptive step factor must be in (0, 1]");
        if (step_rule == StepRule::Fixed && !(fixed_lr > 0.0))
            throw std::invalid_argument("MergeConfig: fixed learning rate must be > 0");
    }
};

/// Snapshot of one layer's iterative merge. The per-task arrays are aligned
/// with the input task order; tasks dropped for having a zero-norm layer keep
/// zero entries there and are listed in `dropped`.
struct LayerMergeState {
    Matrix tau_m;
    std::vector<double> alphas;
    std::vector<double> betas;
    std::vector<double> weights;
    std::vector<std::size_t> dropped;
    std::vector<double> loss_history;  // loss before each step
    double final_loss = 0.0;           // loss after the last step, at the last weights
    int steps_run = 0;
};

struct LayerReport {
    std::string name;
    int steps_run = 0;
    double initial_loss = 0.0;
    double final_loss = 0.0;
    std::vector<double> final_weights;
    std::vector<std::string> dropped_tasks;
};

struct MergeReport {
    MergeConfig config;
    std::vector<LayerReport> layers;
};

// ---------------------------------------------------------------------------
// Per-layer weights and objective
// ---------------------------------------------------------------------------

/// Norm-proportional task importance: alpha_i = |tau_i|_F^2 / sum_j |tau_j|_F^2.
inline std::vector<double> alpha_weights(const std::vector<Matrix>& taus) {
    if (taus.empty()) throw std::invalid_argument("alpha_weights: empty task list");
    std::vector<double> weights(taus.size());
    double total = 0.0;
    for (std::size_t i = 0; i < taus.size(); ++i) {
        weights[i] = frobenius_norm_sq(taus[i]);
        total += weights[i];
    }
    if (total == 0.0)
        throw std::invalid_argument("alpha_weights: every task layer has zero norm");
    for (auto& w : weights) w /= total;
    return weights;
}

/// Compatibility of each task with the current merged vector:
/// beta_i = exp(-gamma * |(tau_m - tau_i) tau_i^T|_F^2 / |tau_i|_F^2).
inline std::vector<double> beta_weights(const Matrix& tau_m_prev, const std::vector<Matrix>& taus,
                                        double gamma) {
    std::vector<double> betas(taus.size());
    for (std::size_t i = 0; i < taus.size(); ++i) {
        if (!taus[i].same_shape(tau_m_prev)) {
            throw std::invalid_argument("beta_weights: task " + std::to_string(i) + " is " +
                                        taus[i].shape_str() + ", merged vector is " +
                                        tau_m_prev.shape_str());
        }
        const double norm_sq = frobenius_norm_sq(taus[i]);
        if (norm_sq == 0.0)
            throw std::invalid_argument("beta_weights: task " + std::to_string(i) +
                                        " has a zero-norm layer");
        const Matrix diff = axpy(-1.0, taus[i], tau_m_prev);
        const double interference = frobenius_norm_sq(matmul(diff, transpose(taus[i])));
        betas[i] = std::exp(-gamma * interference / norm_sq);
    }
    return betas;
}

/// Weighted interference loss
///   L = sum_i (w_i / |tau_i|_F^2) * |(tau_m - tau_i) tau_i^T|_F^2,
/// which reduces to the plain merging loss when every w_i is 1.
inline double amm_loss(const Matrix& tau_m, const std::vector<Matrix>& taus,
                       const std::vector<double>& weights) {
    if (weights.size() != taus.size())
        throw std::invalid_argument("amm_loss: weights do not align with tasks");
    double loss = 0.0;
    for (std::size_t i = 0; i < taus.size(); ++i) {
        const double norm_sq = frobenius_norm_sq(taus[i]);
        if (norm_sq == 0.0)
            throw std::invalid_argument("amm_loss: task " + std::to_string(i) +
                                        " has a zero-norm layer");
        const Matrix diff = axpy(-1.0, taus[i], tau_m);
        loss += weights[i] / norm_sq * frobenius_norm_sq(matmul(diff, transpose(taus[i])));
    }
    return loss;
}

/// Analytic gradient of amm_loss:
///   grad = 2 * sum_i (w_i / |tau_i|_F^2) * (tau_m - tau_i) (tau_i^T tau_i).
inline Matrix amm_loss_gradient(const Matrix& tau_m, const std::vector<Matrix>& taus,
                                const std::vector<double>& weights) {
    if (weights.size() != taus.size())
        throw std::invalid_argument("amm_loss_gradient: weights do not align with tasks");
    Matrix grad(tau_m.rows, tau_m.cols);
    for (std::size_t i = 0; i < taus.size(); ++i) {
        const double norm_sq = frobenius_norm_sq(taus[i]);
        if (norm_sq == 0.0)
            throw std::invalid_argument("amm_loss_gradient: task " + std::to_string(i) +
                                        " has a zero-norm layer");
        const Matrix diff = axpy(-1.0, taus[i], tau_m);
        const Matrix gram = matmul(transpose(taus[i]), taus[i]);
        grad = axpy(2.0 * weights[i] / norm_sq, matmul(diff, gram), grad);
    }
    return grad;
}

/// Penalty on the gradient components orthogonal to each task's row structure:
///   R = lambda * sum_i |G - G (tau_i^T tau_i) / |tau_i|_F^2|_F^2  with G = grad.
inline double projection_penalty(const Matrix& grad, const std::vector<Matrix>& taus,
                                 double lambda) {
    double penalty = 0.0;
    for (std::size_t i = 0; i < taus.size(); ++i) {
        const double norm_sq = frobenius_norm_sq(taus[i]);
        if (norm_sq == 0.0)
            throw std::invalid_argument("projection_penalty: task " + std::to_string(i) +
                                        " has a zero-norm layer");
        const Matrix gram = matmul(transpose(taus[i]), taus[i]);
        const Matrix parallel = axpy(1.0 / norm_sq, matmul(grad, gram), Matrix(grad.rows, grad.cols));
        penalty += frobenius_norm_sq(axpy(-1.0, parallel, grad));
    }
    return lambda * penalty;
}

/// Analytic gradient of the composed penalty R(tau_m). The loss gradient is
/// affine in tau_m, G(tau_m) = tau_m H - C with H = 2 sum_j (w_j/|tau_j|^2)
/// tau_j^T tau_j, so differentiating through it gives
///   dR/dtau_m = 2 lambda * G * (sum_i M_i M_i^T) * H,  M_i = I - tau_i^T tau_i / |tau_i|^2.
inline Matrix penalty_gradient(const Matrix& tau_m, const std::vector<Matrix>& taus,
                               const std::vector<double>& weights, double lambda) {
    if (lambda == 0.0) return Matrix(tau_m.rows, tau_m.cols);
    const Matrix grad = amm_loss_gradient(tau_m, taus, weights);

    const std::size_t c = tau_m.cols;
    Matrix hessian(c, c);
    Matrix projector_sq(c, c);
    for (std::size_t i = 0; i < taus.size(); ++i) {
        const double norm_sq = frobenius_norm_sq(taus[i]);
        const Matrix gram = matmul(transpose(taus[i]), taus[i]);
        hessian = axpy(2.0 * weights[i] / norm_sq, gram, hessian);
        const Matrix ortho = axpy(-1.0 / norm_sq, gram, Matrix::identity(c));
        projector_sq = axpy(1.0, matmul(ortho, transpose(ortho)), projector_sq);
    }
    return axpy(2.0 * lambda, matmul(matmul(grad, projector_sq), hessian),
                Matrix(tau_m.rows, tau_m.cols));
}

// ---------------------------------------------------------------------------
// Layer merge loop
// ---------------------------------------------------------------------------

/// Iteratively merges one layer's task vectors.
///
/// Initialization uses beta^0 = 1, so the starting point is the alpha-weighted
/// sum (or the plain sum when wudi_compat forces unit weights). Each step then
/// recomputes beta from the previous iterate, renormalizes w = alpha*beta /
/// sum(alpha*beta), and descends the weighted loss plus the projection
/// penalty. Tasks whose layer has zero norm are dropped from the weighted
/// sums; if all drop, the merged vector is the plain mean of the inputs.
inline LayerMergeState merge_layer(const std::vector<Matrix>& taus, const MergeConfig& cfg) {
    cfg.validate();
    if (taus.empty()) throw std::invalid_argument("merge_layer: no task vectors");
    const std::size_t count = taus.size();
    for (const auto& t : taus) {
        if (!t.same_shape(taus[0])) {
            throw std::invalid_argument("merge_layer: inconsistent task shapes " +
                                        taus[0].shape_str() + " vs " + t.shape_str());
        }
    }

    LayerMergeState state;
    state.alphas.assign(count, 0.0);
    state.betas.assign(count, 0.0);
    state.weights.assign(count, 0.0);

    std::vector<std::size_t> kept;
    std::vector<Matrix> live;
    for (std::size_t i = 0; i < count; ++i) {
        if (frobenius_norm_sq(taus[i]) > 0.0) {
            kept.push_back(i);
            live.push_back(taus[i]);
        } else {
            state.dropped.push_back(i);
        }
    }

    if (live.empty()) {
        state.tau_m = Matrix(taus[0].rows, taus[0].cols);
        for (const auto& t : taus) state.tau_m = axpy(1.0 / static_cast<double>(count), t, state.tau_m);
        return state;
    }

    const std::vector<double> alphas = alpha_weights(live);
    std::vector<double> betas(live.size(), 1.0);
    std::vector<double> weights = cfg.wudi_compat ? std::vector<double>(live.size(), 1.0) : alphas;

    Matrix tau_m(taus[0].rows, taus[0].cols);
    for (std::size_t i = 0; i < live.size(); ++i) tau_m = axpy(weights[i], live[i], tau_m);

    const double lambda = cfg.wudi_compat ? 0.0 : cfg.lambda;
    for (int n = 1; n <= cfg.steps; ++n) {
        if (!cfg.wudi_compat) {
            betas = beta_weights(tau_m, live, cfg.gamma);
            double total = 0.0;
            for (std::size_t i = 0; i < live.size(); ++i) {
                weights[i] = alphas[i] * betas[i];
                total += weights[i];
            }
            for (auto& w : weights) w /= total;
        }

        state.loss_history.push_back(amm_loss(tau_m, live, weights));

        Matrix step = amm_loss_gradient(tau_m, live, weights);
        if (lambda > 0.0) step = axpy(1.0, penalty_gradient(tau_m, live, weights, lambda), step);

        double zeta = cfg.fixed_lr;
        if (cfg.step_rule == StepRule::Adaptive) {
            // trace(tau_j^T tau_j) = |tau_j|_F^2, so trace(H) collapses to 2*sum(w)
            double weight_sum = 0.0;
            for (double w : weights) weight_sum += w;
            zeta = cfg.adaptive_c / (2.0 * weight_sum);
        }
        tau_m = axpy(-zeta, step, tau_m);
    }

    state.final_loss = amm_loss(tau_m, live, weights);
    state.steps_run = cfg.steps;
    state.tau_m = std::move(tau_m);
    for (std::size_t i = 0; i < kept.size(); ++i) {
        state.alphas[kept[i]] = alphas[i];
        state.betas[kept[i]] = betas[i];
        state.weights[kept[i]] = weights[i];
    }
    return state;
}

// ---------------------------------------------------------------------------
// Whole-model merging
// ---------------------------------------------------------------------------

namespace detail {

inline void check_alignment(const Checkpoint& base, const TaskVector& tau) {
    for (const auto& [name, tensor] : base.tensors) {
        const bool in_linear = tau.linear_layers.count(name) > 0;
        const bool in_residual = tau.residual.count(name) > 0;
        if (in_linear == in_residual) {
            throw CheckpointError(CheckpointError::Kind::Mismatch,
                                  "task vector '" + tau.source_id +
                                      "' does not cover base tensor '" + name + "' exactly once");
        }
    }
}

inline const std::vector<double>& tau_values(const TaskVector& tau, const std::string& name) {
    const auto lin = tau.linear_layers.find(name);
    if (lin != tau.linear_layers.end()) return lin->second.data;
    return tau.residual.at(name);
}

}  // namespace detail

/// theta_m = theta_0 + coeff * sum_i tau_i, for every tensor.
inline Checkpoint merge_task_arithmetic(const Checkpoint& base, const std::vector<TaskVector>& taus,
                                        double coeff) {
    if (taus.empty()) throw std::invalid_argument("merge_task_arithmetic: no task vectors");
    for (const auto& tau : taus) detail::check_alignment(base, tau);

    Checkpoint out = base;
    for (auto& [name, tensor] : out.tensors) {
        // assemble coeff * sum(tau_i) first, then add to the base once
        std::vector<double> merged_delta(tensor.values.size(), 0.0);
        for (const auto& tau : taus) {
            const auto& delta = detail::tau_values(tau, name);
            for (std::size_t i = 0; i < merged_delta.size(); ++i) merged_delta[i] += delta[i];
        }
        for (std::size_t i = 0; i < tensor.values.size(); ++i)
            tensor.values[i] += coeff * merged_delta[i];
    }
    out.metadata["merge_method"] = "task_arithmetic";
    return out;
}

/// Merges fine-tuned checkpoints into one model. Linear layers go through the
/// iterative merge_layer optimization (in parallel across layers; the result
/// does not depend on the schedule), residual tensors take the alpha-weighted
/// average of the task deltas, and that choice is recorded in the output
/// metadata.
inline std::pair<Checkpoint, MergeReport> merge_models(const Checkpoint& base,
                                                       const std::vector<Checkpoint>& tuned,
                                                       const MergeConfig& cfg,
                                                       const std::vector<std::string>& ids = {},
                                                       unsigned threads = 0) {
    cfg.validate();
    if (tuned.empty()) throw std::invalid_argument("merge_models: no models to merge");
    const std::vector<TaskVector> taus = compute_task_vectors(base, tuned, ids);

    MergeReport report;
    report.config = cfg;

    if (cfg.method == MergeMethod::TaskArithmetic) {
        return {merge_task_arithmetic(base, taus, cfg.ta_coefficient), std::move(report)};
    }

    MergeConfig effective = cfg;
    if (cfg.method == MergeMethod::Wudi) effective.wudi_compat = true;
    report.config = effective;

    std::vector<std::string> linear_names;
    for (const auto& item : taus[0].linear_layers) linear_names.push_back(item.first);

    std::vector<LayerMergeState> states(linear_names.size());
    {
        unsigned worker_count = threads ? threads : std::thread::hardware_concurrency();
        worker_count = static_cast<unsigned>(
            std::max<std::size_t>(1, std::min<std::size_t>(worker_count, linear_names.size())));
        std::atomic<std::size_t> cursor{0};
        std::exception_ptr failure;
        std::mutex failure_mutex;
        auto work = [&] {
            for (;;) {
                const std::size_t at = cursor.fetch_add(1);
                if (at >= linear_names.size()) return;
                try {
                    std::vector<Matrix> layer;
                    layer.reserve(taus.size());
                    for (const auto& tau : taus) layer.push_back(tau.linear_layers.at(linear_names[at]));
                    states[at] = merge_layer(layer, effective);
                } catch (...) {
                    std::lock_guard<std::mutex> lock(failure_mutex);
                    if (!failure) failure = std::current_exception();
                    return;
                }
            }
        };
        std::vector<std::thread> pool;
        for (unsigned t = 1; t < worker_count; ++t) pool.emplace_back(work);
        work();
        for (auto& t : pool) t.join();
        if (failure) std::rethrow_exception(failure);
    }

    Checkpoint out = base;
    for (std::size_t at = 0; at < linear_names.size(); ++at) {
        const LayerMergeState& state = states[at];
        auto& tensor = out.tensors.at(linear_names[at]);
        for (std::size_t i = 0; i < tensor.values.size(); ++i)
            tensor.values[i] += state.tau_m.data[i];

        LayerReport layer;
        layer.name = linear_names[at];
        layer.steps_run = state.steps_run;
        layer.initial_loss = state.loss_history.empty() ? 0.0 : state.loss_history.front();
        layer.final_loss = state.final_loss;
        layer.final_weights = state.weights;
        for (std::size_t d : state.dropped) layer.dropped_tasks.push_back(taus[d].source_id);
        report.layers.push_back(std::move(layer));
    }

    // Residual tensors: alpha-weighted average of the task deltas, no iteration.
    for (const auto& item : taus[0].residual) {
        const std::string& name = item.first;
        std::vector<double> norms(taus.size());
        double total = 0.0;
        for (std::size_t i = 0; i < taus.size(); ++i) {
            for (double v : taus[i].residual.at(name)) norms[i] += v * v;
            total += norms[i];
        }
        if (total == 0.0) continue;  // all deltas zero, base stays
        auto& tensor = out.tensors.at(name);
        std::vector<double> merged_delta(tensor.values.size(), 0.0);
        for (std::size_t i = 0; i < taus.size(); ++i) {
            const double alpha = norms[i] / total;
            const auto& delta = taus[i].residual.at(name);
            for (std::size_t k = 0; k < merged_delta.size(); ++k)
                merged_delta[k] += alpha * delta[k];
        }
        for (std::size_t k = 0; k < tensor.values.size(); ++k)
            tensor.values[k] += merged_delta[k];
    }

    out.metadata["merge_method"] = merge_method_name(cfg.method);
    out.metadata["residual_merge"] = "alpha_weighted_average";
    return {std::move(out), std::move(report)};
}

}  // namespace taskvec
