#pragma once

#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"
#include "taskvec/lipo.hpp"
#include "taskvec/merge.hpp"
#include "taskvec/simulator.hpp"

namespace taskvec {

struct ResponseGroup {
    std::string id;
    std::vector<ResponseRecord> responses;
};

/// Input schema: {"groups": [{"id": str, "responses": [{"id": str,
/// "length": int, "reward": float}]}]}.
inline std::vector<ResponseGroup> read_groups_json(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open groups file '" + path + "'");
    nlohmann::json root;
    try {
        in >> root;
    } catch (const nlohmann::json::exception& e) {
        throw std::runtime_error("groups file '" + path + "' is not valid JSON: " + e.what());
    }
    if (!root.is_object() || !root.contains("groups") || !root["groups"].is_array())
        throw std::runtime_error("groups file '" + path + "' must hold {\"groups\": [...]}");

    std::vector<ResponseGroup> groups;
    for (const auto& g : root["groups"]) {
        ResponseGroup group;
        group.id = g.value("id", "group-" + std::to_string(groups.size()));
        if (!g.contains("responses") || !g["responses"].is_array())
            throw std::runtime_error("group '" + group.id + "' has no responses array");
        for (const auto& r : g["responses"]) {
            ResponseRecord record;
            record.id = r.value("id", "r" + std::to_string(group.responses.size()));
            if (!r.contains("length") || !r.contains("reward"))
                throw std::runtime_error("response '" + record.id + "' in group '" + group.id +
                                         "' needs length and reward");
            record.length = r["length"].get<std::int64_t>();
            record.reward = r["reward"].get<double>();
            group.responses.push_back(std::move(record));
        }
        groups.push_back(std::move(group));
    }
    return groups;
}

inline nlohmann::json advantage_report_to_json(const std::string& group_id,
                                               const AdvantageReport& report) {
    nlohmann::json responses = nlohmann::json::array();
    for (const auto& r : report.responses) {
        responses.push_back({{"id", r.id},
                             {"raw_reward", r.raw_reward},
                             {"adjusted_reward", r.adjusted_reward},
                             {"weight", r.weight},
                             {"advantage", r.advantage}});
    }
    nlohmann::json stats = {{"mu_g", report.mu},
                            {"sigma_g", report.sigma},
                            {"pairs_triggered", report.pairs_triggered}};
    stats["l_opt"] = std::isnan(report.l_opt) ? nlohmann::json() : nlohmann::json(report.l_opt);
    return {{"id", group_id}, {"responses", responses}, {"stats", stats}};
}

inline nlohmann::json merge_config_to_json(const MergeConfig& cfg) {
    return {{"method", merge_method_name(cfg.method)},
            {"steps", cfg.steps},
            {"step_rule", cfg.step_rule == StepRule::Adaptive ? "adaptive" : "fixed"},
            {"adaptive_c", cfg.adaptive_c},
            {"fixed_lr", cfg.fixed_lr},
            {"gamma", cfg.gamma},
            {"lambda", cfg.lambda},
            {"ta_coefficient", cfg.ta_coefficient},
            {"wudi_compat", cfg.wudi_compat}};
}

inline nlohmann::json merge_report_to_json(const MergeReport& report) {
    nlohmann::json layers = nlohmann::json::array();
    for (const auto& layer : report.layers) {
        layers.push_back({{"name", layer.name},
                          {"steps_run", layer.steps_run},
                          {"initial_loss", layer.initial_loss},
                          {"final_loss", layer.final_loss},
                          {"final_weights", layer.final_weights},
                          {"dropped_tasks", layer.dropped_tasks}});
    }
    return {{"config", merge_config_to_json(report.config)}, {"layers", layers}};
}

inline void write_metrics_csv(const MetricsSeries& series, const std::string& path) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw std::runtime_error("cannot open metrics file '" + path + "' for write");
    out << "step,mean_length,mean_reward,mean_entropy\n";
    char line[160];
    for (const auto& row : series) {
        std::snprintf(line, sizeof(line), "%d,%.17g,%.17g,%.17g\n", row.step, row.mean_length,
                      row.mean_reward, row.mean_entropy);
        out << line;
    }
    if (!out) throw std::runtime_error("write failed for metrics file '" + path + "'");
}

/// Flat key=value config mirroring SimConfig (lipo fields as lipo.*).
/// '#' starts a comment; unknown keys are errors.
inline SimConfig read_sim_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open config file '" + path + "'");

    SimConfig cfg;
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        const std::size_t hash = line.find('#');
        if (hash != std::string::npos) line.erase(hash);
        const auto first = line.find_first_not_of(" \t\r");
        if (first == std::string::npos) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos)
            throw std::runtime_error("config line " + std::to_string(lineno) +
                                     " is not key=value: '" + line + "'");
        auto trim = [](std::string s) {
            const auto b = s.find_first_not_of(" \t\r");
            const auto e = s.find_last_not_of(" \t\r");
            return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
        };
        const std::string key = trim(line.substr(0, eq));
        const std::string value = trim(line.substr(eq + 1));

        try {
            if (key == "group_size") cfg.group_size = std::stoi(value);
            else if (key == "steps") cfg.steps = std::stoi(value);
            else if (key == "clip") cfg.clip = std::stod(value);
            else if (key == "kl_coeff") cfg.kl_coeff = std::stod(value);
            else if (key == "step_size") cfg.step_size = std::stod(value);
            else if (key == "reward_noise_sd") cfg.reward_noise_sd = std::stod(value);
            else if (key == "seed") cfg.seed = std::stoull(value);
            else if (key == "advantage_method") {
                if (value == "grpo") cfg.method = AdvantageMethod::Grpo;
                else if (value == "lipo") cfg.method = AdvantageMethod::Lipo;
                else throw std::runtime_error("advantage_method must be grpo or lipo");
            } else if (key == "lipo.eta") cfg.lipo.eta = std::stod(value);
            else if (key == "lipo.alpha") cfg.lipo.alpha = std::stod(value);
            else if (key == "lipo.length_threshold") cfg.lipo.length_threshold = std::stoll(value);
            else if (key == "lipo.min_length") cfg.lipo.min_length = std::stoll(value);
            else if (key == "lipo.phi") cfg.lipo.phi = std::stod(value);
            else if (key == "lipo.eps") cfg.lipo.eps = std::stod(value);
            else throw std::runtime_error("unknown config key '" + key + "'");
        } catch (const std::invalid_argument&) {
            throw std::runtime_error("config line " + std::to_string(lineno) +
                                     ": cannot parse value '" + value + "' for key '" + key + "'");
        }
    }
    return cfg;
}

}  // namespace taskvec
