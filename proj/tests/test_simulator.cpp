#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "oracles.hpp"
#include "taskvec/simulator.hpp"

using taskvec::AdvantageMethod;
using taskvec::GroupSample;
using taskvec::Rng;
using taskvec::SimConfig;
using taskvec::SimTask;

namespace {

// Independent surrogate evaluator for finite differencing, written from the
// objective definition rather than the library code path.
double reference_surrogate(const std::vector<double>& logits, const std::vector<double>& ref_logits,
                           const GroupSample& sample, const std::vector<double>& advantages,
                           const SimConfig& cfg) {
    std::vector<double> probs(logits.size()), ref(logits.size());
    double zmax = *std::max_element(logits.begin(), logits.end());
    double rmax = *std::max_element(ref_logits.begin(), ref_logits.end());
    double zsum = 0, rsum = 0;
    for (std::size_t i = 0; i < logits.size(); ++i) {
        probs[i] = std::exp(logits[i] - zmax);
        ref[i] = std::exp(ref_logits[i] - rmax);
        zsum += probs[i];
        rsum += ref[i];
    }
    for (std::size_t i = 0; i < logits.size(); ++i) {
        probs[i] /= zsum;
        ref[i] /= rsum;
    }

    double acc = 0.0;
    for (std::size_t i = 0; i < sample.indices.size(); ++i) {
        const double r = probs[sample.indices[i]] / sample.old_probs[sample.indices[i]];
        double clipped = r;
        if (clipped < 1.0 - cfg.clip) clipped = 1.0 - cfg.clip;
        if (clipped > 1.0 + cfg.clip) clipped = 1.0 + cfg.clip;
        acc += std::min(r * advantages[i], clipped * advantages[i]);
    }
    acc /= static_cast<double>(sample.indices.size());

    double kl = 0.0;
    for (std::size_t i = 0; i < probs.size(); ++i) kl += probs[i] * std::log(probs[i] / ref[i]);
    return acc - cfg.kl_coeff * kl;
}

std::vector<double> fd_gradient(const std::vector<double>& logits,
                                const std::vector<double>& ref_logits, const GroupSample& sample,
                                const std::vector<double>& advantages, const SimConfig& cfg,
                                double h) {
    std::vector<double> grad(logits.size());
    std::vector<double> probe = logits;
    for (std::size_t b = 0; b < logits.size(); ++b) {
        probe[b] = logits[b] + h;
        const double up = reference_surrogate(probe, ref_logits, sample, advantages, cfg);
        probe[b] = logits[b] - h;
        const double down = reference_surrogate(probe, ref_logits, sample, advantages, cfg);
        probe[b] = logits[b];
        grad[b] = (up - down) / (2.0 * h);
    }
    return grad;
}

SimTask two_arm_task() { return SimTask{{{60, 0.9}, {200, 0.8}}}; }

}  // namespace

TEST_CASE("sample_group degenerate support", "[simulator]") {
    SimConfig cfg;
    cfg.reward_noise_sd = 0.0;
    Rng rng(7);
    const SimTask task{{{123, 0.75}}};
    const auto group = taskvec::sample_group({0.0}, task, cfg, rng);
    REQUIRE(group.records.size() == 5);
    for (const auto& r : group.records) {
        CHECK(r.length == 123);
        CHECK(r.reward == 0.75);
    }
}

TEST_CASE("sample_group is reproducible for a fixed seed", "[simulator]") {
    SimConfig cfg;
    cfg.reward_noise_sd = 0.0;
    const SimTask task = two_arm_task();
    Rng rng1(99), rng2(99);
    const auto a = taskvec::sample_group({0.0, 0.0}, task, cfg, rng1);
    const auto b = taskvec::sample_group({0.0, 0.0}, task, cfg, rng2);
    CHECK(a.indices == b.indices);
    for (std::size_t i = 0; i < a.records.size(); ++i)
        CHECK(a.records[i].reward == b.records[i].reward);
}

TEST_CASE("sampling frequencies match softmax probabilities", "[simulator]") {
    SimConfig cfg;
    cfg.group_size = 5;
    const std::vector<double> logits = {0.3, -0.4, 1.1};
    const std::vector<double> probs = taskvec::softmax(logits);
    const SimTask task{{{50, 0.9}, {100, 0.9}, {200, 0.9}}};

    Rng rng(2718);
    const int draws_total = 100000;
    std::vector<int> counts(3, 0);
    for (int i = 0; i < draws_total / cfg.group_size; ++i) {
        const auto group = taskvec::sample_group(logits, task, cfg, rng);
        for (std::size_t pick : group.indices) ++counts[pick];
    }
    for (std::size_t a = 0; a < probs.size(); ++a) {
        const double expected = probs[a] * draws_total;
        const double sigma = std::sqrt(draws_total * probs[a] * (1.0 - probs[a]));
        CHECK(std::abs(counts[a] - expected) <= 3.0 * sigma);
    }
}

TEST_CASE("policy_update with zero advantages leaves logits alone", "[simulator]") {
    SimConfig cfg;
    Rng rng(5);
    const SimTask task = two_arm_task();
    const std::vector<double> logits = {0.2, -0.1};
    const auto group = taskvec::sample_group(logits, task, cfg, rng);
    const auto next = taskvec::policy_update(logits, logits, group,
                                             std::vector<double>(group.indices.size(), 0.0), cfg);
    CHECK(next == logits);
}

TEST_CASE("positive-advantage action gains probability", "[simulator]") {
    SimConfig cfg;
    cfg.kl_coeff = 0.0;
    const std::vector<double> logits = {0.0, 0.0, 0.0};
    GroupSample sample;
    sample.old_probs = taskvec::softmax(logits);
    sample.indices = {1, 1, 1, 1, 1};
    const std::vector<double> advantages(5, 1.0);
    const auto next = taskvec::policy_update(logits, logits, sample, advantages, cfg);
    CHECK(taskvec::softmax(next)[1] > taskvec::softmax(logits)[1]);
}

TEST_CASE("surrogate gradient matches finite differences", "[simulator]") {
    oracles::TestRng rng(31415);
    const SimTask task{{{40, 0.9}, {90, 0.92}, {250, 0.91}, {400, 0.5}}};

    for (double kl : {0.0, 0.3}) {
        for (int trial = 0; trial < 10; ++trial) {
            SimConfig cfg;
            cfg.kl_coeff = kl;
            std::vector<double> old_logits(4), logits(4), ref(4);
            for (std::size_t b = 0; b < 4; ++b) {
                old_logits[b] = rng.uniform(-1.0, 1.0);
                // small offset keeps every ratio inside the clip band
                logits[b] = old_logits[b] + 0.02 * rng.uniform(-1.0, 1.0);
                ref[b] = rng.uniform(-1.0, 1.0);
            }
            Rng sample_rng(1000 + trial);
            const auto group = taskvec::sample_group(old_logits, task, cfg, sample_rng);
            std::vector<double> advantages;
            for (std::size_t i = 0; i < group.indices.size(); ++i)
                advantages.push_back(rng.uniform(-1.5, 1.5));

            const auto analytic = taskvec::surrogate_gradient(logits, ref, group, advantages, cfg);
            const auto numeric = fd_gradient(logits, ref, group, advantages, cfg, 1e-6);
            for (std::size_t b = 0; b < analytic.size(); ++b) {
                const double scale = std::max(std::abs(numeric[b]), 1e-6);
                REQUIRE(std::abs(analytic[b] - numeric[b]) / scale < 1e-5);
            }
        }
    }
}

TEST_CASE("clipped samples contribute no gradient", "[simulator]") {
    SimConfig cfg;
    cfg.clip = 0.2;
    // push the sampled arm's ratio far above 1 + clip with a positive advantage
    GroupSample sample;
    sample.old_probs = {0.05, 0.95};
    sample.indices = {0, 0};
    const std::vector<double> logits = {1.2, -1.2};  // prob[0] ~ 0.92, ratio ~ 18
    const std::vector<double> advantages = {1.0, 1.0};
    const auto grad = taskvec::surrogate_gradient(logits, logits, sample, advantages, cfg);
    for (double g : grad) CHECK(g == 0.0);

    const auto numeric = fd_gradient(logits, logits, sample, advantages, cfg, 1e-6);
    for (double g : numeric) CHECK(std::abs(g) < 1e-9);
}

TEST_CASE("fresh sample has unit ratios and plain policy-gradient direction", "[simulator]") {
    SimConfig cfg;
    Rng rng(77);
    const SimTask task{{{40, 0.9}, {90, 0.92}, {250, 0.91}}};
    const std::vector<double> logits = {0.4, -0.2, 0.1};
    const auto group = taskvec::sample_group(logits, task, cfg, rng);
    const std::vector<double> probs = taskvec::softmax(logits);

    for (std::size_t pick : group.indices)
        CHECK(probs[pick] / group.old_probs[pick] == Catch::Approx(1.0).margin(1e-15));

    std::vector<double> advantages;
    oracles::TestRng arng(78);
    for (std::size_t i = 0; i < group.indices.size(); ++i)
        advantages.push_back(arng.uniform(-1.0, 1.0));

    // vanilla REINFORCE estimate: (1/G) sum_i A_i grad log pi(a_i)
    std::vector<double> vanilla(logits.size(), 0.0);
    for (std::size_t i = 0; i < group.indices.size(); ++i) {
        for (std::size_t b = 0; b < logits.size(); ++b) {
            const double indicator = group.indices[i] == b ? 1.0 : 0.0;
            vanilla[b] += advantages[i] * (indicator - probs[b]) /
                          static_cast<double>(group.indices.size());
        }
    }
    const auto clipped = taskvec::surrogate_gradient(logits, logits, group, advantages, cfg);
    for (std::size_t b = 0; b < logits.size(); ++b)
        CHECK(clipped[b] == Catch::Approx(vanilla[b]).margin(1e-12));
}

TEST_CASE("probability conservation through a simulation", "[simulator]") {
    SimConfig cfg;
    cfg.steps = 50;
    cfg.seed = 3;
    const auto tasks = taskvec::default_task_suite();

    // re-run the loop manually to inspect the evolving policy
    taskvec::SimPolicy policy;
    for (const auto& task : tasks) policy.logits.emplace_back(task.templates.size(), 0.0);
    const taskvec::SimPolicy ref = policy;
    Rng rng(cfg.seed);
    for (int step = 0; step < cfg.steps; ++step) {
        for (std::size_t t = 0; t < tasks.size(); ++t) {
            const auto group = taskvec::sample_group(policy.logits[t], tasks[t], cfg, rng);
            std::vector<double> rewards;
            for (const auto& r : group.records) rewards.push_back(r.reward);
            const auto advantages = taskvec::grpo_advantages(rewards, cfg.lipo.eps);
            policy.logits[t] =
                taskvec::policy_update(policy.logits[t], ref.logits[t], group, advantages, cfg);
            double total = 0.0;
            for (double p : taskvec::softmax(policy.logits[t])) total += p;
            REQUIRE(std::abs(total - 1.0) <= 1e-12);
        }
    }
}

TEST_CASE("run_simulation basics", "[simulator]") {
    const auto tasks = taskvec::default_task_suite();

    SECTION("zero steps yield an empty series") {
        SimConfig cfg;
        cfg.steps = 0;
        cfg.seed = 1;
        CHECK(taskvec::run_simulation(cfg, tasks).empty());
    }

    SECTION("identical runs are bit-identical") {
        SimConfig cfg;
        cfg.steps = 60;
        cfg.seed = 42;
        cfg.method = AdvantageMethod::Lipo;
        const auto a = taskvec::run_simulation(cfg, tasks);
        const auto b = taskvec::run_simulation(cfg, tasks);
        REQUIRE(a == b);
    }

    SECTION("task validation") {
        SimConfig cfg;
        cfg.seed = 1;
        CHECK_THROWS_AS(taskvec::run_simulation(cfg, {}), std::invalid_argument);
        CHECK_THROWS_AS(taskvec::run_simulation(cfg, {SimTask{{{50, 0.95}}}}),
                        std::invalid_argument);
        // no high-quality template above the threshold
        CHECK_THROWS_AS(taskvec::run_simulation(cfg, {SimTask{{{50, 0.95}, {80, 0.95}}}}),
                        std::invalid_argument);
    }
}

TEST_CASE("lipo with alpha=0 phi=0 walks the grpo trajectory", "[simulator]") {
    const auto tasks = taskvec::default_task_suite();
    SimConfig cfg;
    cfg.steps = 100;
    cfg.seed = 11;
    cfg.method = AdvantageMethod::Grpo;
    const auto grpo = taskvec::run_simulation(cfg, tasks);

    cfg.method = AdvantageMethod::Lipo;
    cfg.lipo.alpha = 0.0;
    cfg.lipo.phi = 0.0;
    const auto reduced = taskvec::run_simulation(cfg, tasks);

    REQUIRE(grpo.size() == reduced.size());
    for (std::size_t i = 0; i < grpo.size(); ++i) {
        CHECK(reduced[i].mean_length == grpo[i].mean_length);
        CHECK(reduced[i].mean_reward == Catch::Approx(grpo[i].mean_reward).margin(1e-12));
        CHECK(reduced[i].mean_entropy == Catch::Approx(grpo[i].mean_entropy).margin(1e-9));
    }
}

TEST_CASE("directional check: lipo shortens responses at comparable reward", "[simulator]") {
    const auto tasks = taskvec::default_task_suite();
    SimConfig cfg;
    cfg.seed = 1;
    cfg.method = AdvantageMethod::Grpo;
    const auto grpo = taskvec::run_simulation(cfg, tasks);
    cfg.method = AdvantageMethod::Lipo;
    const auto lipo = taskvec::run_simulation(cfg, tasks);

    CHECK(lipo.back().mean_length < grpo.back().mean_length);
    CHECK(std::abs(lipo.back().mean_reward - grpo.back().mean_reward) <= 0.05);
}

TEST_CASE("lipo length curve sits below grpo over the final quarter", "[simulator]") {
    const auto tasks = taskvec::default_task_suite();
    int seeds_with_majority = 0;
    for (std::uint64_t seed = 1; seed <= 5; ++seed) {
        SimConfig cfg;
        cfg.seed = seed;
        cfg.method = AdvantageMethod::Grpo;
        const auto grpo = taskvec::run_simulation(cfg, tasks);
        cfg.method = AdvantageMethod::Lipo;
        const auto lipo = taskvec::run_simulation(cfg, tasks);

        const std::size_t tail_start = grpo.size() - grpo.size() / 4;
        int below = 0;
        for (std::size_t i = tail_start; i < grpo.size(); ++i)
            below += lipo[i].mean_length < grpo[i].mean_length;
        if (2 * below > static_cast<int>(grpo.size() - tail_start)) ++seeds_with_majority;
    }
    CHECK(seeds_with_majority >= 4);
}
