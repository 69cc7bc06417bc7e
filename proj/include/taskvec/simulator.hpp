#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "taskvec/lipo.hpp"

namespace taskvec {

/// One discrete answer template for a synthetic question: responding with it
/// costs `length` tokens and earns `quality` reward before noise.
struct SimTemplate {
    std::int64_t length = 0;
    double quality = 0.0;
};

struct SimTask {
    std::vector<SimTemplate> templates;
};

/// Tabular softmax policy: one logit vector per task.
struct SimPolicy {
    std::vector<std::vector<double>> logits;
};

enum class AdvantageMethod { Grpo, Lipo };

struct SimConfig {
    int group_size = 5;
    int steps = 200;
    double clip = 0.2;
    double kl_coeff = 0.0;
    double step_size = 0.05;
    double reward_noise_sd = 0.02;
    std::uint64_t seed = 0;
    AdvantageMethod method = AdvantageMethod::Grpo;
    LipoConfig lipo;

    void validate() const {
        if (group_size < 2)
            throw std::invalid_argument("SimConfig: group size must be >= 2 for group advantages");
        if (steps < 0) throw std::invalid_argument("SimConfig: steps must be >= 0");
        if (!(clip > 0.0)) throw std::invalid_argument("SimConfig: clip must be > 0");
        if (kl_coeff < 0.0) throw std::invalid_argument("SimConfig: kl coefficient must be >= 0");
        if (!(step_size > 0.0)) throw std::invalid_argument("SimConfig: step size must be > 0");
        if (reward_noise_sd < 0.0)
            throw std::invalid_argument("SimConfig: reward noise sd must be >= 0");
        lipo.validate();
    }
};

struct MetricsRow {
    int step = 0;
    double mean_length = 0.0;
    double mean_reward = 0.0;
    double mean_entropy = 0.0;

    bool operator==(const MetricsRow&) const = default;
};

using MetricsSeries = std::vector<MetricsRow>;

/// Deterministic RNG. The mt19937_64 engine is fully specified by the
/// standard and the distributions are hand-rolled, so sequences are
/// reproducible across platforms and standard libraries.
class Rng {
  public:
    explicit Rng(std::uint64_t seed) : engine_(seed) {}

    double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

    double normal() {
        const double u1 = (static_cast<double>(engine_() >> 11) + 1.0) * 0x1.0p-53;
        const double u2 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * kPi * u2);
    }

    std::size_t categorical(const std::vector<double>& probs) {
        const double u = uniform();
        double acc = 0.0;
        for (std::size_t i = 0; i < probs.size(); ++i) {
            acc += probs[i];
            if (u < acc) return i;
        }
        return probs.size() - 1;
    }

  private:
    static constexpr double kPi = 3.14159265358979323846;
    std::mt19937_64 engine_;
};

inline std::vector<double> softmax(const std::vector<double>& logits) {
    double peak = logits[0];
    for (double z : logits) peak = std::max(peak, z);
    std::vector<double> probs(logits.size());
    double total = 0.0;
    for (std::size_t i = 0; i < logits.size(); ++i) {
        probs[i] = std::exp(logits[i] - peak);
        total += probs[i];
    }
    for (auto& p : probs) p /= total;
    return probs;
}

inline double entropy(const std::vector<double>& probs) {
    double h = 0.0;
    for (double p : probs)
        if (p > 0.0) h -= p * std::log(p);
    return h;
}

struct GroupSample {
    std::vector<ResponseRecord> records;   // length/reward per draw
    std::vector<std::size_t> indices;      // sampled template per draw
    std::vector<double> old_probs;         // full sampling distribution
};

/// Draws a rollout group for one task: G i.i.d. template picks from the
/// policy, rewards are quality plus clamped Gaussian noise.
inline GroupSample sample_group(const std::vector<double>& logits, const SimTask& task,
                                const SimConfig& cfg, Rng& rng) {
    if (logits.size() != task.templates.size())
        throw std::invalid_argument("sample_group: policy does not align with the task");
    GroupSample out;
    out.old_probs = softmax(logits);
    for (int g = 0; g < cfg.group_size; ++g) {
        const std::size_t pick = rng.categorical(out.old_probs);
        const SimTemplate& tpl = task.templates[pick];
        double reward = tpl.quality + cfg.reward_noise_sd * rng.normal();
        reward = std::min(1.0, std::max(0.0, reward));
        out.indices.push_back(pick);
        out.records.push_back({tpl.length, reward, "r" + std::to_string(g)});
    }
    return out;
}

/// Clipped-surrogate objective for one task at policy `logits`:
///   (1/G) sum_i min(r_i A_i, clip(r_i, 1-eps, 1+eps) A_i) - kl_coeff * KL(pi || pi_ref)
/// with r_i the probability ratio against the sampling policy.
inline double surrogate_value(const std::vector<double>& logits,
                              const std::vector<double>& ref_logits, const GroupSample& sample,
                              const std::vector<double>& advantages, const SimConfig& cfg) {
    const std::vector<double> probs = softmax(logits);
    double value = 0.0;
    for (std::size_t i = 0; i < sample.indices.size(); ++i) {
        const double ratio = probs[sample.indices[i]] / sample.old_probs[sample.indices[i]];
        const double clipped = std::min(1.0 + cfg.clip, std::max(1.0 - cfg.clip, ratio));
        value += std::min(ratio * advantages[i], clipped * advantages[i]);
    }
    value /= static_cast<double>(sample.indices.size());
    if (cfg.kl_coeff > 0.0) {
        const std::vector<double> ref = softmax(ref_logits);
        double kl = 0.0;
        for (std::size_t a = 0; a < probs.size(); ++a)
            if (probs[a] > 0.0) kl += probs[a] * std::log(probs[a] / ref[a]);
        value -= cfg.kl_coeff * kl;
    }
    return value;
}

/// Exact gradient of surrogate_value for the tabular softmax. A sample
/// contributes A_i * d(ratio)/d(logits) while the unclipped branch is active
/// (including ties, where both branches agree) and nothing once the min picks
/// the constant clipped branch.
inline std::vector<double> surrogate_gradient(const std::vector<double>& logits,
                                              const std::vector<double>& ref_logits,
                                              const GroupSample& sample,
                                              const std::vector<double>& advantages,
                                              const SimConfig& cfg) {
    const std::vector<double> probs = softmax(logits);
    const std::size_t arms = probs.size();
    const double group = static_cast<double>(sample.indices.size());
    std::vector<double> grad(arms, 0.0);

    for (std::size_t i = 0; i < sample.indices.size(); ++i) {
        const std::size_t a = sample.indices[i];
        const double ratio = probs[a] / sample.old_probs[a];
        const double clipped = std::min(1.0 + cfg.clip, std::max(1.0 - cfg.clip, ratio));
        const double adv = advantages[i];
        if (ratio * adv > clipped * adv) continue;  // clipped branch is flat
        const double coeff = adv / (group * sample.old_probs[a]);
        for (std::size_t b = 0; b < arms; ++b) {
            const double indicator = (a == b) ? 1.0 : 0.0;
            grad[b] += coeff * probs[a] * (indicator - probs[b]);
        }
    }

    if (cfg.kl_coeff > 0.0) {
        const std::vector<double> ref = softmax(ref_logits);
        double kl = 0.0;
        for (std::size_t a = 0; a < arms; ++a)
            if (probs[a] > 0.0) kl += probs[a] * std::log(probs[a] / ref[a]);
        for (std::size_t b = 0; b < arms; ++b)
            grad[b] -= cfg.kl_coeff * probs[b] * (std::log(probs[b] / ref[b]) - kl);
    }
    return grad;
}

/// One ascent step on the clipped surrogate.
inline std::vector<double> policy_update(const std::vector<double>& logits,
                                         const std::vector<double>& ref_logits,
                                         const GroupSample& sample,
                                         const std::vector<double>& advantages,
                                         const SimConfig& cfg) {
    const std::vector<double> grad = surrogate_gradient(logits, ref_logits, sample, advantages, cfg);
    std::vector<double> next = logits;
    for (std::size_t b = 0; b < next.size(); ++b) next[b] += cfg.step_size * grad[b];
    return next;
}

inline void validate_tasks(const std::vector<SimTask>& tasks, const LipoConfig& lipo) {
    if (tasks.empty()) throw std::invalid_argument("run_simulation: no tasks");
    for (std::size_t t = 0; t < tasks.size(); ++t) {
        const auto& templates = tasks[t].templates;
        if (templates.size() < 2)
            throw std::invalid_argument("task " + std::to_string(t) + " needs >= 2 templates");
        bool good_short = false, good_long = false;
        for (const auto& tpl : templates) {
            if (tpl.length <= 0)
                throw std::invalid_argument("task " + std::to_string(t) +
                                            " has a non-positive template length");
            if (tpl.quality < 0.0 || tpl.quality > 1.0)
                throw std::invalid_argument("task " + std::to_string(t) +
                                            " has a quality outside [0, 1]");
            if (tpl.quality >= 0.9 && tpl.length < lipo.length_threshold) good_short = true;
            if (tpl.quality >= 0.9 && tpl.length > lipo.length_threshold) good_long = true;
        }
        if (!good_short || !good_long)
            throw std::invalid_argument(
                "task " + std::to_string(t) +
                " needs high-quality templates on both sides of the length threshold");
    }
}

/// Runs the toy policy-optimization loop: per step and task, sample a group
/// under the current policy, compute advantages with the selected method, and
/// take one surrogate ascent step. Metrics describe each step's sampling
/// policy. Fully deterministic given (cfg, tasks, seed).
inline MetricsSeries run_simulation(const SimConfig& cfg, const std::vector<SimTask>& tasks) {
    cfg.validate();
    validate_tasks(tasks, cfg.lipo);

    SimPolicy policy;
    for (const auto& task : tasks) policy.logits.emplace_back(task.templates.size(), 0.0);
    const SimPolicy reference = policy;  // KL anchor is the initial policy

    Rng rng(cfg.seed);
    MetricsSeries series;
    series.reserve(cfg.steps);

    for (int step = 1; step <= cfg.steps; ++step) {
        double length_sum = 0.0, reward_sum = 0.0, entropy_sum = 0.0;
        std::size_t samples = 0;
        for (std::size_t t = 0; t < tasks.size(); ++t) {
            const GroupSample group = sample_group(policy.logits[t], tasks[t], cfg, rng);

            std::vector<double> advantages(group.records.size());
            if (cfg.method == AdvantageMethod::Grpo) {
                std::vector<double> rewards;
                rewards.reserve(group.records.size());
                for (const auto& r : group.records) rewards.push_back(r.reward);
                advantages = grpo_advantages(rewards, cfg.lipo.eps);
            } else {
                const AdvantageReport report = lipo_advantages(group.records, cfg.lipo);
                for (std::size_t i = 0; i < report.responses.size(); ++i)
                    advantages[i] = report.responses[i].advantage;
            }

            for (const auto& r : group.records) {
                length_sum += static_cast<double>(r.length);
                reward_sum += r.reward;
            }
            samples += group.records.size();
            entropy_sum += entropy(group.old_probs);

            policy.logits[t] =
                policy_update(policy.logits[t], reference.logits[t], group, advantages, cfg);
        }
        MetricsRow row;
        row.step = step;
        row.mean_length = length_sum / static_cast<double>(samples);
        row.mean_reward = reward_sum / static_cast<double>(samples);
        row.mean_entropy = entropy_sum / static_cast<double>(tasks.size());
        series.push_back(row);
    }
    return series;
}

/// Default synthetic question suite. Each task offers a concise and a verbose
/// high-quality answer (plus distractors), so a length preference is
/// observable while plain reward maximization stays ambivalent.
inline std::vector<SimTask> default_task_suite() {
    return {
        SimTask{{{60, 0.92}, {180, 0.93}, {320, 0.90}, {45, 0.50}}},
        SimTask{{{80, 0.91}, {150, 0.92}, {260, 0.93}, {30, 0.40}}},
        SimTask{{{50, 0.95}, {140, 0.94}, {400, 0.92}, {100, 0.60}}},
    };
}

}  // namespace taskvec
