#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

namespace taskvec {

/// One rollout response: token length plus its rule-based reward. Rewards are
/// required non-negative; the multiplicative boost below inverts meaning for
/// negative values.
struct ResponseRecord {
    std::int64_t length = 0;
    double reward = 0.0;
    std::string id;
};

struct LipoConfig {
    double eta = 0.2;                  // reward-gap threshold for the trigger
    double alpha = 0.1;                // base enhancement factor
    std::int64_t length_threshold = 120;  // L_T
    std::int64_t min_length = 16;         // L_min
    double phi = 0.01;                 // proximity-weight scale
    double eps = 1e-6;                 // variance guard

    /// alpha = 0 and phi = 0 are admitted although the nominal ranges are
    /// (0, 0.2] and > 0: that boundary configuration turns the pipeline into
    /// plain group-normalized advantages, which the tests rely on.
    void validate() const {
        if (!(eta > 0.0)) throw std::invalid_argument("LipoConfig: eta must be > 0");
        if (alpha < 0.0 || alpha > 0.2)
            throw std::invalid_argument("LipoConfig: alpha must be in [0, 0.2]");
        if (length_threshold < 1)
            throw std::invalid_argument("LipoConfig: length threshold must be positive");
        if (min_length < 1) throw std::invalid_argument("LipoConfig: min length must be positive");
        if (phi < 0.0) throw std::invalid_argument("LipoConfig: phi must be >= 0");
        if (!(eps > 0.0)) throw std::invalid_argument("LipoConfig: eps must be > 0");
    }
};

struct ResponseAdvantage {
    std::string id;
    double raw_reward = 0.0;
    double adjusted_reward = 0.0;
    double weight = 1.0;
    double advantage = 0.0;
};

struct AdvantageReport {
    std::vector<ResponseAdvantage> responses;  // original input order
    double l_opt = 0.0;
    double mu = 0.0;
    double sigma = 0.0;
    int pairs_triggered = 0;
};

/// Group-normalized advantages: (R_i - mean) / (population std + eps).
inline std::vector<double> grpo_advantages(const std::vector<double>& rewards, double eps) {
    if (rewards.empty()) throw std::invalid_argument("grpo_advantages: empty group");
    const double count = static_cast<double>(rewards.size());
    double mean = 0.0;
    for (double r : rewards) mean += r;
    mean /= count;
    double var = 0.0;
    for (double r : rewards) var += (r - mean) * (r - mean);
    var /= count;
    const double denom = std::sqrt(var) + eps;
    std::vector<double> advantages(rewards.size());
    for (std::size_t i = 0; i < rewards.size(); ++i) advantages[i] = (rewards[i] - mean) / denom;
    return advantages;
}

/// Ascending length, stable on ties.
inline std::vector<ResponseRecord> sort_group(std::vector<ResponseRecord> group) {
    std::stable_sort(group.begin(), group.end(),
                     [](const ResponseRecord& a, const ResponseRecord& b) {
                         return a.length < b.length;
                     });
    return group;
}

/// Trigger for boosting the shorter member of an adjacent sorted pair:
/// rewards within eta, strictly shorter, and short enough to matter but not
/// degenerate (length >= L_min). Always evaluated on raw rewards.
inline bool trigger(const ResponseRecord& shorter, const ResponseRecord& longer,
                    const LipoConfig& cfg) {
    return std::abs(longer.reward - shorter.reward) < cfg.eta &&
           longer.length - shorter.length > 0 && shorter.length >= cfg.min_length;
}

/// Decay for boosts above the length threshold:
/// omega = max(0, 1 - (L_short - L_T) / (L_long - L_T + eps)).
inline double decay_omega(std::int64_t len_short, std::int64_t len_long, const LipoConfig& cfg) {
    const double num = static_cast<double>(len_short - cfg.length_threshold);
    const double den = static_cast<double>(len_long - cfg.length_threshold) + cfg.eps;
    return std::max(0.0, 1.0 - num / den);
}

/// Single pass over adjacent pairs of a length-sorted group. When the trigger
/// holds, the shorter member's reward becomes R*(1+alpha) below the length
/// threshold and R*(1+alpha*omega) above it. Each response is adjusted at
/// most once, as the shorter member of its pair, and the trigger always reads
/// raw rewards, so the pass cannot compound boosts.
inline std::vector<double> adjust_rewards(const std::vector<ResponseRecord>& sorted_group,
                                          const LipoConfig& cfg) {
    std::vector<double> adjusted(sorted_group.size());
    for (std::size_t i = 0; i < sorted_group.size(); ++i) {
        if (sorted_group[i].reward < 0.0)
            throw std::invalid_argument("adjust_rewards: negative reward for response '" +
                                        sorted_group[i].id + "'");
        if (i > 0 && sorted_group[i].length < sorted_group[i - 1].length)
            throw std::invalid_argument("adjust_rewards: group is not sorted by length");
        adjusted[i] = sorted_group[i].reward;
    }
    for (std::size_t i = 0; i + 1 < sorted_group.size(); ++i) {
        const ResponseRecord& shorter = sorted_group[i];
        if (!trigger(shorter, sorted_group[i + 1], cfg)) continue;
        if (shorter.length < cfg.length_threshold) {
            adjusted[i] = shorter.reward * (1.0 + cfg.alpha);
        } else {
            const double omega = decay_omega(shorter.length, sorted_group[i + 1].length, cfg);
            adjusted[i] = shorter.reward * (1.0 + cfg.alpha * omega);
        }
    }
    return adjusted;
}

/// Group anchor: max(2*L_min, median length). Even-sized groups use the mean
/// of the two middle lengths.
inline double optimal_length(const std::vector<ResponseRecord>& sorted_group,
                             const LipoConfig& cfg) {
    if (sorted_group.empty()) throw std::invalid_argument("optimal_length: empty group");
    const std::size_t k = sorted_group.size();
    double median;
    if (k % 2 == 1) {
        median = static_cast<double>(sorted_group[k / 2].length);
    } else {
        median = 0.5 * (static_cast<double>(sorted_group[k / 2 - 1].length) +
                        static_cast<double>(sorted_group[k / 2].length));
    }
    return std::max(2.0 * static_cast<double>(cfg.min_length), median);
}

/// Proximity weights w_i = exp(-phi * |L_i - L_opt|), in (0, 1].
inline std::vector<double> length_weights(const std::vector<ResponseRecord>& group, double l_opt,
                                          const LipoConfig& cfg) {
    std::vector<double> weights(group.size());
    for (std::size_t i = 0; i < group.size(); ++i)
        weights[i] = std::exp(-cfg.phi * std::abs(static_cast<double>(group[i].length) - l_opt));
    return weights;
}

/// Full pipeline: sort by length, boost triggered short responses, anchor on
/// the group's optimal length, weight by proximity, and normalize the
/// adjusted rewards by the weighted mean and standard deviation. Results come
/// back in the original input order.
inline AdvantageReport lipo_advantages(const std::vector<ResponseRecord>& group,
                                       const LipoConfig& cfg) {
    cfg.validate();
    if (group.empty()) throw std::invalid_argument("lipo_advantages: empty group");
    for (const auto& r : group) {
        if (r.length < 0)
            throw std::invalid_argument("lipo_advantages: negative length for response '" + r.id +
                                        "'");
        if (r.reward < 0.0)
            throw std::invalid_argument("lipo_advantages: negative reward for response '" + r.id +
                                        "'");
    }

    const std::size_t k = group.size();
    std::vector<std::size_t> order(k);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        return group[a].length < group[b].length;
    });

    std::vector<ResponseRecord> sorted;
    sorted.reserve(k);
    for (std::size_t idx : order) sorted.push_back(group[idx]);

    const std::vector<double> adjusted = adjust_rewards(sorted, cfg);
    const double l_opt = optimal_length(sorted, cfg);
    const std::vector<double> weights = length_weights(sorted, l_opt, cfg);

    double weight_total = 0.0, weighted_reward = 0.0;
    for (std::size_t i = 0; i < k; ++i) {
        weight_total += weights[i];
        weighted_reward += weights[i] * adjusted[i];
    }
    const double mu = weighted_reward / weight_total;
    double weighted_var = 0.0;
    for (std::size_t i = 0; i < k; ++i)
        weighted_var += weights[i] * (adjusted[i] - mu) * (adjusted[i] - mu);
    weighted_var /= weight_total;
    const double sigma = std::sqrt(weighted_var);

    AdvantageReport report;
    report.l_opt = l_opt;
    report.mu = mu;
    report.sigma = sigma;
    for (std::size_t i = 0; i + 1 < k; ++i)
        if (trigger(sorted[i], sorted[i + 1], cfg)) ++report.pairs_triggered;

    report.responses.resize(k);
    for (std::size_t pos = 0; pos < k; ++pos) {
        const std::size_t original = order[pos];
        ResponseAdvantage& entry = report.responses[original];
        entry.id = group[original].id;
        entry.raw_reward = group[original].reward;
        entry.adjusted_reward = adjusted[pos];
        entry.weight = weights[pos];
        entry.advantage = (adjusted[pos] - mu) / (sigma + cfg.eps);
    }
    return report;
}

/// Plain GRPO packaged in the same report shape: raw rewards, unit weights,
/// unweighted group statistics. l_opt is meaningless here and left as NaN so
/// serializers can tell it apart.
inline AdvantageReport grpo_report(const std::vector<ResponseRecord>& group, double eps) {
    if (group.empty()) throw std::invalid_argument("grpo_report: empty group");
    std::vector<double> rewards(group.size());
    for (std::size_t i = 0; i < group.size(); ++i) rewards[i] = group[i].reward;
    const std::vector<double> advantages = grpo_advantages(rewards, eps);

    double mean = 0.0;
    for (double r : rewards) mean += r;
    mean /= static_cast<double>(rewards.size());
    double var = 0.0;
    for (double r : rewards) var += (r - mean) * (r - mean);
    var /= static_cast<double>(rewards.size());

    AdvantageReport report;
    report.l_opt = std::numeric_limits<double>::quiet_NaN();
    report.mu = mean;
    report.sigma = std::sqrt(var);
    report.pairs_triggered = 0;
    report.responses.resize(group.size());
    for (std::size_t i = 0; i < group.size(); ++i) {
        report.responses[i] = {group[i].id, group[i].reward, group[i].reward, 1.0, advantages[i]};
    }
    return report;
}

}  // namespace taskvec
