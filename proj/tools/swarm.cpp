// SPDX-License-Identifier: Apache-2.0
//
// swarm: experiment runner and process roles.
//
//   swarm run <config> [--mode local|live] [--out DIR] [--steps N]
//   swarm ablation [--config FILE] [--levels 0,1,2,4] [--steps N] [--out DIR]
//   swarm fault <kind|all> [--config FILE]
//   swarm role <orchestrator|relay|trainer|worker|validator> --config FILE --run-dir DIR [--index I]
//
// Exit status is 0 iff every assertion of the invoked command holds.

#include <unistd.h>

#include <cstdio>
#include <fstream>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "swarm/harness.hpp"

namespace h = swarm::harness;

namespace {

std::filesystem::path self_exe() {
    return std::filesystem::read_symlink("/proc/self/exe");
}

void report(const std::string& name, bool ok, const std::string& detail = {}) {
    std::printf("%s  %s%s%s\n", ok ? "PASS" : "FAIL", name.c_str(), detail.empty() ? "" : "  ",
                detail.c_str());
}

void write_text(const std::filesystem::path& p, const std::string& text) {
    std::filesystem::create_directories(p.parent_path());
    std::ofstream(p, std::ios::binary | std::ios::trunc) << text;
}

std::string slurp(const std::filesystem::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

h::RunConfig config_or_default(const std::string& path) {
    return path.empty() ? h::RunConfig{} : h::load_config(path);
}

int cmd_run(h::RunConfig cfg) {
    bool ok = true;
    if (cfg.mode == "live") {
        const auto r = h::run_live(cfg, self_exe());
        report("live run finished", r.ok, r.message);
        ok = r.ok;
        const auto csv = slurp(r.run_dir / "metrics.csv");
        const auto rows = swarm::trainer::parse_csv(csv);
        const auto rewards = h::step_rewards(rows);
        const bool complete = rewards.size() == static_cast<std::size_t>(cfg.steps);
        report("every step trained", complete, std::to_string(rewards.size()) + " steps");
        const auto audit = swarm::trainer::audit_consumed_log(slurp(r.run_dir / "consumed.jsonl"));
        report("no degenerate group consumed", audit == 0);
        const auto events = swarm::orchestrator::Ledger::load(r.run_dir / "ledger.jsonl");
        const bool ledger_ok = !swarm::orchestrator::ledger_verify(events).has_value();
        report("ledger verifies", ledger_ok, std::to_string(events.size()) + " events");
        ok = ok && complete && audit == 0 && ledger_ok;
        if (!rewards.empty()) {
            write_text(r.run_dir / "reward.svg",
                       h::svg_plot("mean task reward", {"task reward", "length penalty"},
                                   {rewards, h::step_penalties(rows)}));
        }
        return ok ? 0 : 1;
    }
    const auto prepared = h::prepare(cfg);
    const auto r = h::run_local(cfg, prepared, [](const swarm::trainer::MetricsRow& row) {
        if (row.micro_step == 0 && row.step % 10 == 0) {
            std::fprintf(stderr, "step %llu reward %.3f grad_norm %.3g\n",
                         static_cast<unsigned long long>(row.step), row.task_reward, row.grad_norm);
        }
    });
    h::write_run_dir(cfg, r);
    if (r.liveness_failure) {
        report("liveness", false, r.halt_reason);
        return 1;
    }
    const bool complete = !r.halted && h::step_rewards(r.rows).size() == static_cast<std::size_t>(cfg.steps);
    report("every step trained", complete, r.halt_reason);
    const bool ledger_ok = !swarm::orchestrator::ledger_verify(r.ledger).has_value();
    report("ledger verifies", ledger_ok);
    const auto audit = swarm::trainer::audit_consumed_log(r.consumed_log);
    report("no degenerate group consumed", audit == 0);
    char buf[96];
    std::snprintf(buf, sizeof buf, "first10 %.3f final10 %.3f", r.first_mean(10), r.final_mean(10));
    std::printf("info  task reward %s\n", buf);
    return complete && ledger_ok && audit == 0 ? 0 : 1;
}

int cmd_ablation(h::RunConfig cfg, const std::vector<int>& levels) {
    const auto prepared = h::prepare(cfg);
    const auto a = h::run_ablation(cfg, levels, prepared);
    write_text(cfg.out_dir / "ablation.csv", a.csv);
    std::vector<std::string> names;
    std::vector<std::vector<double>> series;
    for (std::size_t i = 0; i < levels.size(); ++i) {
        names.push_back("k=" + std::to_string(levels[i]));
        series.push_back(h::step_rewards(a.runs[i].rows));
    }
    write_text(cfg.out_dir / "ablation.svg", h::svg_plot("task reward by async level", names, series));
    bool ok = true;
    const double base = a.runs.front().final_mean(20);
    for (std::size_t i = 0; i < levels.size(); ++i) {
        const double f = a.runs[i].final_mean(20);
        char buf[96];
        std::snprintf(buf, sizeof buf, "final20 %.4f (k=%d reference %.4f)", f, levels.front(), base);
        const bool pass = !a.runs[i].halted && std::abs(f - base) <= 0.05;
        report("k=" + std::to_string(levels[i]) + " within 0.05 of reference", pass, buf);
        ok = ok && pass;
    }
    return ok ? 0 : 1;
}

int cmd_fault(const h::RunConfig& cfg, const std::string& kind) {
    std::vector<std::string> kinds;
    if (kind == "all") {
        kinds = h::fault_kinds();
    } else {
        kinds = {kind};
    }
    const auto prepared = h::prepare(cfg);
    bool ok = true;
    for (const auto& k : kinds) {
        const auto rep = h::run_fault(k, cfg, prepared);
        for (const auto& a : rep.assertions) {
            report(k + ": " + a.name, a.passed, a.detail);
        }
        ok = ok && rep.passed();
    }
    return ok ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"desk-scale decentralized RL training fabric"};
    app.require_subcommand(1);

    std::string run_config;
    std::string mode;
    std::string out_dir;
    int steps = 0;
    auto* run = app.add_subcommand("run", "run one experiment from a config file");
    run->add_option("config", run_config, "INI config file")->required()->check(CLI::ExistingFile);
    run->add_option("--mode", mode, "local or live")->check(CLI::IsMember({"local", "live"}));
    run->add_option("--out", out_dir, "run directory");
    run->add_option("--steps", steps, "override step count");

    std::string abl_config;
    std::vector<int> levels = {0, 1, 2, 4};
    int abl_steps = 300;
    std::string abl_out = "runs/ablation";
    auto* abl = app.add_subcommand("ablation", "compare asynchrony levels on a shared seed");
    abl->add_option("--config", abl_config, "INI config file")->check(CLI::ExistingFile);
    abl->add_option("--levels", levels, "async levels")->delimiter(',');
    abl->add_option("--steps", abl_steps, "steps per run");
    abl->add_option("--out", abl_out, "output directory");

    std::string fault_kind;
    std::string fault_config;
    auto* fault = app.add_subcommand("fault", "run a scripted fault scenario");
    std::vector<std::string> kinds = h::fault_kinds();
    kinds.push_back("all");
    fault->add_option("kind", fault_kind, "scenario")->required()->check(CLI::IsMember(kinds));
    fault->add_option("--config", fault_config, "INI config file")->check(CLI::ExistingFile);

    std::string role_name;
    std::string role_config;
    std::string role_dir;
    int role_index = 0;
    auto* role = app.add_subcommand("role", "run one live-mode process");
    role->group("");
    role->add_option("name", role_name)->required()->check(
        CLI::IsMember({"orchestrator", "relay", "trainer", "worker", "validator"}));
    role->add_option("--config", role_config)->required();
    role->add_option("--run-dir", role_dir)->required();
    role->add_option("--index", role_index);

    CLI11_PARSE(app, argc, argv);

    try {
        if (*run) {
            auto cfg = h::load_config(run_config);
            if (!mode.empty()) {
                cfg.mode = mode;
            }
            if (!out_dir.empty()) {
                cfg.out_dir = out_dir;
            }
            if (steps > 0) {
                cfg.steps = steps;
            }
            return cmd_run(cfg);
        }
        if (*abl) {
            auto cfg = config_or_default(abl_config);
            cfg.steps = abl_steps;
            cfg.out_dir = abl_out;
            return cmd_ablation(cfg, levels);
        }
        if (*fault) {
            return cmd_fault(config_or_default(fault_config), fault_kind);
        }
        if (*role) {
            const auto cfg = h::load_config(role_config);
            const std::filesystem::path dir = role_dir;
            if (role_name == "orchestrator") return h::role_orchestrator(cfg, dir);
            if (role_name == "relay") return h::role_relay(cfg, dir, role_index);
            if (role_name == "trainer") return h::role_trainer(cfg, dir);
            if (role_name == "worker") return h::role_worker(cfg, dir, role_index);
            return h::role_validator(cfg, dir, role_index);
        }
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 2;
    }
    return 0;
}
