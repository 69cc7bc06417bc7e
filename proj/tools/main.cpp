// taskvec: merge fine-tuned checkpoints, score responses, and run the toy
// policy-optimization simulator from one binary. Every subcommand is a thin
// adapter over the library; outputs go to files named by flags and a short
// human summary goes to stdout.
//
// Exit codes: 0 success, 1 domain error (one machine-parseable line on
// stderr), 2 usage error.

#include <cstdio>
#include <iostream>
#include <map>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "taskvec/checkpoint.hpp"
#include "taskvec/lipo.hpp"
#include "taskvec/merge.hpp"
#include "taskvec/rewards.hpp"
#include "taskvec/serialize.hpp"
#include "taskvec/simulator.hpp"

namespace {

struct MergeOptions {
    std::string base;
    std::vector<std::string> models;
    taskvec::MergeMethod method = taskvec::MergeMethod::Amm;
    std::string out;
    std::string report;
    taskvec::MergeConfig cfg;
    std::string step_rule = "adaptive";
    unsigned threads = 0;
};

void run_merge(const MergeOptions& opt) {
    taskvec::MergeConfig cfg = opt.cfg;
    cfg.method = opt.method;
    cfg.step_rule = opt.step_rule == "fixed" ? taskvec::StepRule::Fixed
                                             : taskvec::StepRule::Adaptive;
    cfg.validate();

    const taskvec::Checkpoint base = taskvec::read_checkpoint(opt.base);
    std::vector<taskvec::Checkpoint> tuned;
    for (const auto& path : opt.models) tuned.push_back(taskvec::read_checkpoint(path));

    const auto [merged, report] = taskvec::merge_models(base, tuned, cfg, opt.models, opt.threads);
    taskvec::write_checkpoint(merged, opt.out);

    std::ofstream report_out(opt.report, std::ios::trunc);
    if (!report_out)
        throw std::runtime_error("cannot open report file '" + opt.report + "' for write");
    report_out << taskvec::merge_report_to_json(report).dump(2) << "\n";

    std::cout << "merged " << tuned.size() << " models with "
              << taskvec::merge_method_name(cfg.method) << ": " << report.layers.size()
              << " linear layers, " << merged.tensors.size() << " tensors total\n"
              << "model: " << opt.out << "\nreport: " << opt.report << "\n";
}

struct AdvantageOptions {
    std::string method = "lipo";
    std::string input;
    std::string output;
    taskvec::LipoConfig cfg;
};

void run_advantages(const AdvantageOptions& opt) {
    opt.cfg.validate();
    const auto groups = taskvec::read_groups_json(opt.input);

    nlohmann::json out_groups = nlohmann::json::array();
    for (const auto& group : groups) {
        const taskvec::AdvantageReport report =
            opt.method == "grpo" ? taskvec::grpo_report(group.responses, opt.cfg.eps)
                                 : taskvec::lipo_advantages(group.responses, opt.cfg);
        out_groups.push_back(taskvec::advantage_report_to_json(group.id, report));
    }

    std::ofstream out(opt.output, std::ios::trunc);
    if (!out) throw std::runtime_error("cannot open output file '" + opt.output + "' for write");
    out << nlohmann::json{{"groups", out_groups}}.dump(2) << "\n";
    std::cout << "computed " << opt.method << " advantages for " << groups.size() << " groups\n"
              << "report: " << opt.output << "\n";
}

struct RewardOptions {
    std::string kind = "exact";
    std::string pred;
    std::string target;
    bool no_normalize = false;
    bool extract = false;
};

void run_reward(const RewardOptions& opt) {
    taskvec::RewardSpec spec;
    spec.kind = opt.kind == "levenshtein" ? taskvec::RewardSpec::Kind::Levenshtein
                                          : taskvec::RewardSpec::Kind::Exact;
    spec.normalize = !opt.no_normalize;

    std::string pred = opt.pred;
    if (opt.extract) {
        // no extractable answer means no credit
        pred = taskvec::extract_boxed(pred).value_or("");
    }
    std::printf("%.17g\n", taskvec::compute_reward(pred, opt.target, spec));
}

struct SimulateOptions {
    std::string config;
    std::string out;
    std::uint64_t seed = 0;
    std::string method;  // empty: keep the config file's method
};

void run_simulate(const SimulateOptions& opt) {
    taskvec::SimConfig cfg = taskvec::read_sim_config(opt.config);
    cfg.seed = opt.seed;
    if (opt.method == "grpo") cfg.method = taskvec::AdvantageMethod::Grpo;
    if (opt.method == "lipo") cfg.method = taskvec::AdvantageMethod::Lipo;

    const auto series = taskvec::run_simulation(cfg, taskvec::default_task_suite());
    taskvec::write_metrics_csv(series, opt.out);

    std::cout << "simulated " << series.size() << " steps ("
              << (cfg.method == taskvec::AdvantageMethod::Grpo ? "grpo" : "lipo") << ", seed "
              << cfg.seed << ")\nmetrics: " << opt.out << "\n";
    if (!series.empty()) {
        char line[160];
        std::snprintf(line, sizeof(line), "final mean length %.2f, mean reward %.4f\n",
                      series.back().mean_length, series.back().mean_reward);
        std::cout << line;
    }
}

void run_inspect(const std::string& path) {
    const taskvec::Checkpoint c = taskvec::read_checkpoint(path);
    std::cout << path << ": " << c.tensors.size() << " tensors\n";
    for (const auto& [key, value] : c.metadata)
        std::cout << "  # " << key << " = " << value << "\n";
    for (const auto& [name, tensor] : c.tensors) {
        std::cout << "  " << name << "  " << taskvec::dtype_name(tensor.dtype) << "  [";
        for (std::size_t i = 0; i < tensor.shape.size(); ++i)
            std::cout << (i ? ", " : "") << tensor.shape[i];
        std::cout << "]\n";
    }
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{
        "task-vector merging, group advantages, rule-based rewards, and a toy RL simulator"};
    app.require_subcommand(1);

    const std::map<std::string, taskvec::MergeMethod> merge_methods{
        {"task_arithmetic", taskvec::MergeMethod::TaskArithmetic},
        {"wudi", taskvec::MergeMethod::Wudi},
        {"amm", taskvec::MergeMethod::Amm}};

    MergeOptions merge_opt;
    auto* merge_cmd = app.add_subcommand("merge", "merge fine-tuned checkpoints into one model");
    merge_cmd->add_option("--base", merge_opt.base, "base model checkpoint")->required();
    merge_cmd->add_option("--models", merge_opt.models, "fine-tuned checkpoints")
        ->required()
        ->expected(1, -1);
    merge_cmd->add_option("--method", merge_opt.method, "merging method")
        ->transform(CLI::CheckedTransformer(merge_methods, CLI::ignore_case))
        ->default_str("amm");
    merge_cmd->add_option("--out", merge_opt.out, "merged checkpoint path")->required();
    merge_cmd->add_option("--report", merge_opt.report, "merge report JSON path")->required();
    merge_cmd->add_option("--steps", merge_opt.cfg.steps, "optimization steps per layer")
        ->capture_default_str();
    merge_cmd->add_option("--gamma", merge_opt.cfg.gamma, "compatibility-weight scale")
        ->capture_default_str();
    merge_cmd->add_option("--lambda", merge_opt.cfg.lambda, "projection-penalty strength")
        ->capture_default_str();
    merge_cmd->add_option("--step-rule", merge_opt.step_rule, "adaptive or fixed step size")
        ->check(CLI::IsMember({"adaptive", "fixed"}))
        ->capture_default_str();
    merge_cmd->add_option("--lr", merge_opt.cfg.fixed_lr, "learning rate for --step-rule fixed")
        ->capture_default_str();
    merge_cmd->add_option("--coeff", merge_opt.cfg.ta_coefficient,
                          "scaling coefficient for task_arithmetic")
        ->capture_default_str();
    merge_cmd->add_flag("--wudi-compat", merge_opt.cfg.wudi_compat,
                        "force unit weights and no penalty in the iterative path");
    merge_cmd->add_option("--threads", merge_opt.threads, "worker threads across layers (0 = auto)")
        ->capture_default_str();
    merge_cmd->callback([&] { run_merge(merge_opt); });

    AdvantageOptions adv_opt;
    auto* adv_cmd = app.add_subcommand("advantages", "compute group advantages from a groups JSON");
    adv_cmd->add_option("--method", adv_opt.method, "grpo or lipo")
        ->check(CLI::IsMember({"grpo", "lipo"}))
        ->capture_default_str();
    adv_cmd->add_option("--input", adv_opt.input, "groups JSON path")->required();
    adv_cmd->add_option("--output", adv_opt.output, "advantage report JSON path")->required();
    adv_cmd->add_option("--eta", adv_opt.cfg.eta, "reward-gap trigger threshold")
        ->capture_default_str();
    adv_cmd->add_option("--alpha", adv_opt.cfg.alpha, "base enhancement factor")
        ->capture_default_str();
    adv_cmd->add_option("--lt", adv_opt.cfg.length_threshold, "length threshold")
        ->capture_default_str();
    adv_cmd->add_option("--lmin", adv_opt.cfg.min_length, "minimum length for boosts")
        ->capture_default_str();
    adv_cmd->add_option("--phi", adv_opt.cfg.phi, "proximity-weight scale")->capture_default_str();
    adv_cmd->add_option("--eps", adv_opt.cfg.eps, "variance guard")->capture_default_str();
    adv_cmd->callback([&] { run_advantages(adv_opt); });

    RewardOptions reward_opt;
    auto* reward_cmd = app.add_subcommand("reward", "score a prediction against a target");
    reward_cmd->add_option("--kind", reward_opt.kind, "exact or levenshtein")
        ->check(CLI::IsMember({"exact", "levenshtein"}))
        ->capture_default_str();
    reward_cmd->add_option("--pred", reward_opt.pred, "predicted answer")->required();
    reward_cmd->add_option("--target", reward_opt.target, "target answer")->required();
    reward_cmd->add_flag("--no-normalize", reward_opt.no_normalize,
                         "compare without whitespace/case normalization");
    reward_cmd->add_flag("--extract-boxed", reward_opt.extract,
                         "extract the last \\boxed{...} from the prediction first");
    reward_cmd->callback([&] { run_reward(reward_opt); });

    SimulateOptions sim_opt;
    auto* sim_cmd = app.add_subcommand("simulate", "run the toy policy-optimization simulator");
    sim_cmd->add_option("--config", sim_opt.config, "flat key=value simulator config")->required();
    sim_cmd->add_option("--out", sim_opt.out, "metrics CSV path")->required();
    sim_cmd->add_option("--seed", sim_opt.seed, "RNG seed (required for reproducibility)")
        ->required();
    sim_cmd->add_option("--method", sim_opt.method, "override the advantage method")
        ->check(CLI::IsMember({"grpo", "lipo"}));
    sim_cmd->callback([&] { run_simulate(sim_opt); });

    std::string inspect_path;
    auto* inspect_cmd = app.add_subcommand("inspect", "list a checkpoint's tensors");
    inspect_cmd->add_option("path", inspect_path, "checkpoint path")->required();
    inspect_cmd->callback([&] { run_inspect(inspect_path); });

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        std::cerr << "usage error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
