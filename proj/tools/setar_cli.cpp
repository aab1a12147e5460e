// setar: search, evaluate and fine-tune low-rank replacements on the toy
// dual encoder. Config keys can be overridden with --dotted.key=value.

#include <algorithm>
#include <cstdio>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "setar/errors.hpp"
#include "setar/pipeline.hpp"

using namespace setar;

namespace {

struct Common {
  std::string config_path;
  std::vector<std::pair<std::string, std::string>> overrides;
};

ExperimentConfig load_config(const Common& c) {
  json j = json::object();
  if (!c.config_path.empty()) {
    j = json::parse(read_text(c.config_path), nullptr, false);
    if (j.is_discarded()) throw InvalidInput(c.config_path + " is not valid JSON");
  }
  for (const auto& [k, v] : c.overrides) apply_override(j, k, v);
  ExperimentConfig cfg = experiment_config_from_json(j);
  cfg.validate();
  return cfg;
}

bool is_override(const std::string& arg) {
  if (arg.rfind("--", 0) != 0) return false;
  const auto eq = arg.find('=');
  if (eq == std::string::npos) return false;
  const std::string key = arg.substr(2, eq - 2);
  return key.find('.') != std::string::npos || key == "output_dir";
}

void print_json(const json& j) { std::cout << j.dump(2) << "\n"; }

}  // namespace

int main(int argc, char** argv) {
  Common common;
  std::vector<std::string> args;
  for (int i = 1; i < argc; ++i) {
    const std::string a = argv[i];
    if (is_override(a)) {
      const auto eq = a.find('=');
      common.overrides.emplace_back(a.substr(2, eq - 2), a.substr(eq + 1));
    } else {
      args.push_back(a);
    }
  }
  std::reverse(args.begin(), args.end());

  CLI::App app{"SeTAR: training-free OOD detection by selective low-rank approximation"};
  app.require_subcommand(1);
  app.footer("Any config key can be overridden with --dotted.key=value, e.g. --search.algorithm=interleaved.\n"
             "SETAR_THREADS caps worker threads.");

  const auto add_config = [&](CLI::App* sub) {
    sub->add_option("-c,--config", common.config_path, "experiment config (JSON)")->check(CLI::ExistingFile);
  };

  auto* validate = app.add_subcommand("validate", "check a config and print it with defaults filled in");
  add_config(validate);

  std::string task_out;
  auto* gen = app.add_subcommand("gen-task", "generate a synthetic task directory");
  add_config(gen);
  gen->add_option("-o,--out", task_out, "task directory")->required();

  auto* search = app.add_subcommand("search", "run the rank-ratio search; writes plan.json and trace.csv");
  add_config(search);

  std::string plan_path;
  auto* eval = app.add_subcommand("eval", "score vanilla (or a plan's) weights on every OOD set");
  add_config(eval);
  eval->add_option("-p,--plan", plan_path, "plan.json to apply before scoring")->check(CLI::ExistingFile);

  std::string ft_mode = "setar_ft";
  auto* finetune = app.add_subcommand("finetune", "train minor factors (or a LoRA baseline) and score the result");
  add_config(finetune);
  finetune->add_option("-p,--plan", plan_path, "plan.json from a previous search")->check(CLI::ExistingFile);
  finetune->add_option("-m,--mode", ft_mode, "setar_ft or lora_baseline")->check(CLI::IsMember({"setar_ft", "lora_baseline"}));

  bool validate_only = false;
  auto* pipeline = app.add_subcommand("pipeline", "search, evaluate, optionally fine-tune, and write report.json");
  add_config(pipeline);
  pipeline->add_flag("--validate", validate_only, "only validate the config");

  try {
    app.parse(args);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }

  ExperimentConfig cfg;
  try {
    cfg = load_config(common);
  } catch (const std::exception& e) {
    std::cerr << error_record(e).dump(2) << "\n";
    return 2;
  }

  try {
    const auto& out = cfg.output_dir;
    if (*validate || (*pipeline && validate_only)) {
      print_json(to_json(cfg));
      return 0;
    }
    if (*gen) {
      const TaskData data = prepare_task(cfg);
      save_task(data.task, task_out);
      std::cout << "task written to " << task_out << "\n";
      return 0;
    }
    if (*pipeline) {
      const json report = run_pipeline(cfg);
      for (const auto& m : report.at("methods")) {
        const json& avg = m.at("results").back();
        std::printf("%-14s %-7s FPR95 %.4f  AUROC %.4f\n", m.at("method").get<std::string>().c_str(),
                    m.at("score").get<std::string>().c_str(), avg.at("fpr95").get<double>(),
                    avg.at("auroc").get<double>());
      }
      return 0;
    }

    std::filesystem::create_directories(out);
    {
      const TaskData data = prepare_task(cfg);
      const SyntheticTask& t = data.task;
      if (*search) {
        const SearchResult sr = run_search(t.noisy_store, t.id_val, t.prompts, cfg.search);
        write_text(out / "plan.json", to_json(sr.plan).dump(2) + "\n");
        write_text(out / "trace.csv", trace_csv(sr.trace));
        save_weights(sr.final_store, out, "weights_setar");
        std::printf("loss %.6f -> %.6f after %zu evaluations\n", sr.initial.loss.total, sr.final.loss.total,
                    sr.loss_evaluations);
        return 0;
      }
      RankPlan plan;
      if (!plan_path.empty()) plan = rank_plan_from_json(json::parse(read_text(plan_path)));
      json methods = json::array();
      if (*eval) {
        const bool planned = !plan_path.empty();
        const WeightStore store = planned ? apply_plan(t.noisy_store, plan) : t.noisy_store;
        methods = evaluate_method(store, data, cfg, planned ? "setar" : "vanilla", out / (planned ? "setar" : "vanilla"));
      } else {
        if (plan_path.empty()) {
          plan = run_search(t.noisy_store, t.id_val, t.prompts, cfg.search).plan;
          write_text(out / "plan.json", to_json(plan).dump(2) + "\n");
        }
        FtConfig fc = cfg.ft.value_or(FtConfig{});
        fc.mode = ft_mode_from_string(ft_mode);
        const FtResult fr = ft_train(t.noisy_store, plan, t.id_train, t.prompts, fc);
        write_text(out / ("loss_curve_" + ft_mode + ".csv"), loss_curve_csv(fr.loss_curve));
        save_weights(fr.store, out, "weights_" + ft_mode);
        methods = evaluate_method(fr.store, data, cfg, ft_mode, out / ft_mode);
      }
      write_text(out / "report.json", json{{"status", "ok"}, {"methods", methods}}.dump(2) + "\n");
      print_json(methods);
      return 0;
    }
  } catch (const std::exception& e) {
    const json rec = error_record(e);
    if (!*gen) {
      std::error_code ec;
      std::filesystem::create_directories(cfg.output_dir, ec);
      if (!ec) write_text(cfg.output_dir / "report.json", rec.dump(2) + "\n");
    }
    std::cerr << rec.dump(2) << "\n";
    return 1;
  }
}
