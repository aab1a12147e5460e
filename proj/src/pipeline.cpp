#include "setar/pipeline.hpp"

#include <algorithm>
#include <set>

#include "setar/errors.hpp"
#include "setar/metrics.hpp"

namespace setar {

namespace {

void check_keys(const json& j, std::initializer_list<const char*> allowed, const std::string& where) {
  if (!j.is_object()) throw InvalidInput(where + ": expected an object");
  const std::set<std::string> ok(allowed.begin(), allowed.end());
  for (const auto& [k, _] : j.items()) {
    if (!ok.contains(k)) throw InvalidInput(where + ": unknown key '" + k + "'");
  }
}

LossParams loss_params_from_json(const json& j) {
  check_keys(j, {"lambda_ood", "top_k", "tau_local"}, "loss");
  LossParams p;
  p.lambda_ood = j.value("lambda_ood", p.lambda_ood);
  p.top_k = j.value("top_k", p.top_k);
  p.tau_local = j.value("tau_local", p.tau_local);
  return p;
}

json to_json(const LossParams& p) {
  return json{{"lambda_ood", p.lambda_ood}, {"top_k", p.top_k}, {"tau_local", p.tau_local}};
}

template <class F>
auto json_guard(const std::string& where, F&& f) {
  try {
    return f();
  } catch (const json::exception& e) {
    throw InvalidInput(where + ": " + e.what());
  }
}

}  // namespace

json to_json(const TaskSpec& spec) {
  json ood = json::array();
  for (const auto& o : spec.ood_sets)
    ood.push_back({{"name", o.name}, {"displacement", o.displacement}, {"n_samples", o.n_samples}});
  json layers = json::array();
  for (const auto& k : spec.noise.layers) layers.push_back(to_string(k));
  return json{{"seed", spec.seed},
              {"class_names", spec.class_names},
              {"cluster_spread", spec.cluster_spread},
              {"object_fraction", spec.object_fraction},
              {"background_scale", spec.background_scale},
              {"n_train_per_class", spec.n_train_per_class},
              {"n_val_per_class", spec.n_val_per_class},
              {"n_test_per_class", spec.n_test_per_class},
              {"ood_sets", ood},
              {"noise",
               {{"layers", layers},
                {"r_true", spec.noise.r_true},
                {"scale", spec.noise.scale},
                {"minor_shrink", spec.noise.minor_shrink},
                {"layer_gain", spec.noise.layer_gain}}},
              {"ridge", spec.ridge}};
}

TaskSpec task_spec_from_json(const json& j) {
  return json_guard("data", [&] {
    check_keys(j, {"seed", "class_names", "cluster_spread", "object_fraction", "background_scale", "n_train_per_class",
                   "n_val_per_class", "n_test_per_class", "ood_sets", "noise", "ridge", "task_dir"},
               "data");
    TaskSpec s;
    s.seed = j.value("seed", s.seed);
    s.class_names = j.value("class_names", s.class_names);
    s.cluster_spread = j.value("cluster_spread", s.cluster_spread);
    s.object_fraction = j.value("object_fraction", s.object_fraction);
    s.background_scale = j.value("background_scale", s.background_scale);
    s.n_train_per_class = j.value("n_train_per_class", s.n_train_per_class);
    s.n_val_per_class = j.value("n_val_per_class", s.n_val_per_class);
    s.n_test_per_class = j.value("n_test_per_class", s.n_test_per_class);
    s.ridge = j.value("ridge", s.ridge);
    if (j.contains("ood_sets")) {
      s.ood_sets.clear();
      for (const auto& o : j.at("ood_sets")) {
        check_keys(o, {"name", "displacement", "n_samples"}, "data.ood_sets");
        OodSetSpec os;
        os.name = o.at("name").get<std::string>();
        os.displacement = o.value("displacement", os.displacement);
        os.n_samples = o.value("n_samples", os.n_samples);
        s.ood_sets.push_back(os);
      }
    }
    if (j.contains("noise")) {
      const json& n = j.at("noise");
      check_keys(n, {"layers", "r_true", "scale", "minor_shrink", "layer_gain"}, "data.noise");
      for (const auto& k : n.value("layers", json::array())) s.noise.layers.push_back(weight_key_from_string(k));
      s.noise.r_true = n.value("r_true", s.noise.r_true);
      s.noise.scale = n.value("scale", s.noise.scale);
      s.noise.minor_shrink = n.value("minor_shrink", s.noise.minor_shrink);
      s.noise.layer_gain = n.value("layer_gain", s.noise.layer_gain);
    }
    return s;
  });
}

json to_json(const SearchConfig& cfg) {
  return json{{"candidates", cfg.candidates},
              {"weight_type", to_string(cfg.weight_type)},
              {"modality", to_string(cfg.modality)},
              {"algorithm", to_string(cfg.algorithm)},
              {"strategy", {{"kind", to_string(cfg.strategy.kind)}, {"seed", cfg.strategy.seed}}},
              {"loss", to_json(cfg.loss_params)},
              {"include_projection", cfg.include_projection}};
}

SearchConfig search_config_from_json(const json& j) {
  return json_guard("search", [&] {
    check_keys(j, {"candidates", "weight_type", "modality", "algorithm", "strategy", "loss", "include_projection"},
               "search");
    SearchConfig c;
    c.candidates = j.value("candidates", c.candidates);
    if (j.contains("weight_type")) c.weight_type = weight_type_from_string(j.at("weight_type").get<std::string>());
    if (j.contains("modality")) c.modality = modality_from_string(j.at("modality").get<std::string>());
    if (j.contains("algorithm")) c.algorithm = search_algorithm_from_string(j.at("algorithm").get<std::string>());
    if (j.contains("strategy")) {
      const json& s = j.at("strategy");
      check_keys(s, {"kind", "seed"}, "search.strategy");
      if (s.contains("kind")) c.strategy.kind = prune_kind_from_string(s.at("kind").get<std::string>());
      c.strategy.seed = s.value("seed", c.strategy.seed);
    }
    if (j.contains("loss")) c.loss_params = loss_params_from_json(j.at("loss"));
    c.include_projection = j.value("include_projection", c.include_projection);
    return c;
  });
}

json to_json(const FtConfig& cfg) {
  return json{{"learning_rate", cfg.learning_rate},   {"epochs", cfg.epochs},
              {"loss", to_json(cfg.loss_params)},      {"baseline_rank", cfg.baseline_rank},
              {"batch_size", cfg.batch_size},          {"seed", cfg.seed},
              {"lora_init_scale", cfg.lora_init_scale}};
}

FtConfig ft_config_from_json(const json& j) {
  return json_guard("ft", [&] {
    check_keys(j, {"learning_rate", "epochs", "loss", "baseline_rank", "batch_size", "seed", "lora_init_scale", "modes"},
               "ft");
    FtConfig c;
    c.learning_rate = j.value("learning_rate", c.learning_rate);
    c.epochs = j.value("epochs", c.epochs);
    if (j.contains("loss")) c.loss_params = loss_params_from_json(j.at("loss"));
    c.baseline_rank = j.value("baseline_rank", c.baseline_rank);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.seed = j.value("seed", c.seed);
    c.lora_init_scale = j.value("lora_init_scale", c.lora_init_scale);
    return c;
  });
}

void ExperimentConfig::validate() const {
  if (task_dir.empty()) {
    task.validate();
  } else {
    if (!std::filesystem::exists(task_dir / "task.json")) {
      throw InvalidInput("data.task_dir: no task.json under " + task_dir.string());
    }
    task.model.validate();
  }
  search.validate();
  search.loss_params.validate(task.model.n_classes);
  if (ft) {
    ft->validate();
    ft->loss_params.validate(task.model.n_classes);
    if (ft_modes.empty()) throw InvalidInput("ft.modes must list at least one mode");
  }
  if (scores.empty()) throw InvalidInput("scores: at least one score is required");
  for (ScoreKind k : scores) {
    if (requires_dual_encoder(k) == task.model.unimodal) {
      throw InvalidInput("scores: " + to_string(k) + " is not available for a " +
                         (task.model.unimodal ? "unimodal" : "dual-encoder") + " model");
    }
  }
  score_params.validate();
  if (output_dir.empty()) throw InvalidInput("output_dir must be set");
}

ExperimentConfig experiment_config_from_json(const json& j) {
  return json_guard("config", [&] {
    check_keys(j, {"model", "data", "search", "ft", "scores", "score_params", "output_dir"}, "config");
    ExperimentConfig c;
    if (j.contains("model")) {
      json m = j.at("model");
      if (m.contains("seed")) {
        c.task.model_seed = m.at("seed").get<std::uint64_t>();
        m.erase("seed");
      }
      check_keys(m,
                 {"n_vision_layers", "n_text_layers", "hidden_dim", "feature_dim", "n_patches", "ffn_dim", "n_classes",
                  "unimodal"},
                 "model");
      c.task.model = model_config_from_json(m);
    }
    if (j.contains("data")) {
      const json& d = j.at("data");
      const ModelConfig model = c.task.model;
      const std::uint64_t model_seed = c.task.model_seed;
      c.task = task_spec_from_json(d);
      c.task.model = model;
      c.task.model_seed = model_seed;
      if (d.contains("task_dir")) c.task_dir = d.at("task_dir").get<std::string>();
    }
    if (j.contains("search")) c.search = search_config_from_json(j.at("search"));
    if (j.contains("ft") && !j.at("ft").is_null()) {
      c.ft = ft_config_from_json(j.at("ft"));
      for (const auto& m : j.at("ft").value("modes", json::array({"setar_ft"})))
        c.ft_modes.push_back(ft_mode_from_string(m.get<std::string>()));
    }
    if (j.contains("scores")) {
      for (const auto& s : j.at("scores")) c.scores.push_back(score_kind_from_string(s.get<std::string>()));
    } else if (c.task.model.unimodal) {
      c.scores = {ScoreKind::msp, ScoreKind::energy};
    } else {
      c.scores = {ScoreKind::mcm, ScoreKind::glmcm};
    }
    if (j.contains("score_params")) {
      const json& p = j.at("score_params");
      check_keys(p, {"tau", "tau_local", "energy_T"}, "score_params");
      c.score_params.tau = p.value("tau", c.score_params.tau);
      c.score_params.tau_local = p.value("tau_local", c.score_params.tau_local);
      c.score_params.energy_T = p.value("energy_T", c.score_params.energy_T);
    }
    c.output_dir = j.value("output_dir", c.output_dir.string());
    return c;
  });
}

json to_json(const ExperimentConfig& cfg) {
  json model = to_json(cfg.task.model);
  model["seed"] = cfg.task.model_seed;
  json data = to_json(cfg.task);
  if (!cfg.task_dir.empty()) data["task_dir"] = cfg.task_dir.string();
  json scores = json::array();
  for (ScoreKind k : cfg.scores) scores.push_back(to_string(k));
  json j{{"model", model},
         {"data", data},
         {"search", to_json(cfg.search)},
         {"scores", scores},
         {"score_params",
          {{"tau", cfg.score_params.tau},
           {"tau_local", cfg.score_params.tau_local},
           {"energy_T", cfg.score_params.energy_T}}},
         {"output_dir", cfg.output_dir.string()}};
  if (cfg.ft) {
    j["ft"] = to_json(*cfg.ft);
    json modes = json::array();
    for (FtMode m : cfg.ft_modes) modes.push_back(to_string(m));
    j["ft"]["modes"] = modes;
  }
  return j;
}

void apply_override(json& cfg, const std::string& dotted_key, const std::string& value) {
  if (dotted_key.empty()) throw InvalidInput("empty override key");
  json* node = &cfg;
  std::size_t start = 0;
  while (true) {
    const auto dot = dotted_key.find('.', start);
    const std::string part = dotted_key.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
    if (part.empty()) throw InvalidInput("override key '" + dotted_key + "' has an empty segment");
    if (!node->is_object()) {
      if (!node->is_null()) throw InvalidInput("override key '" + dotted_key + "' descends into a non-object");
      *node = json::object();
    }
    node = &(*node)[part];
    if (dot == std::string::npos) break;
    start = dot + 1;
  }
  json parsed = json::parse(value, nullptr, false);
  *node = parsed.is_discarded() ? json(value) : parsed;
}

void save_task(const SyntheticTask& task, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  json ood = json::array();
  for (const auto& o : task.ood_test) ood.push_back(o.name);
  json layers = json::array();
  for (const auto& k : task.noise.layers) layers.push_back(to_string(k));
  const json meta{{"format", "setar-task"},
                  {"version", 1},
                  {"model", to_json(task.noisy_store.config())},
                  {"class_names", task.prompts.names},
                  {"ood_sets", ood},
                  {"noise_layers", layers},
                  {"r_true", task.noise.r_true}};
  write_text(dir / "task.json", meta.dump(2) + "\n");
  save_weights(task.noisy_store, dir, "weights_vanilla");
  save_weights(task.clean_store, dir, "weights_clean");
  save_samples(task.id_train, dir, "id_train");
  save_samples(task.id_val, dir, "id_val");
  save_samples(task.id_test, dir, "id_test");
  for (const auto& o : task.ood_test) save_samples(o.samples, dir, "ood_" + o.name);
}

TaskData load_task(const std::filesystem::path& dir) {
  return json_guard("task.json", [&] {
    const json meta = json::parse(read_text(dir / "task.json"));
    if (meta.value("format", "") != "setar-task") throw InvalidInput(dir.string() + "/task.json is not a task file");
    TaskData data;
    SyntheticTask& t = data.task;
    t.prompts = ClassPrompts::from_names(meta.at("class_names").get<std::vector<std::string>>());
    t.noisy_store = load_weights(dir, "weights_vanilla");
    if (t.noisy_store.config() != model_config_from_json(meta.at("model"))) {
      throw InvalidInput("task.json model config does not match weights_vanilla");
    }
    data.has_clean = std::filesystem::exists(dir / "weights_clean.manifest.json");
    t.clean_store = data.has_clean ? load_weights(dir, "weights_clean") : t.noisy_store;
    if (t.prompts.size() != t.noisy_store.config().n_classes) {
      throw InvalidInput("task.json lists " + std::to_string(t.prompts.size()) + " class names for " +
                         std::to_string(t.noisy_store.config().n_classes) + " classes");
    }
    t.id_train = load_samples(dir, "id_train");
    t.id_val = load_samples(dir, "id_val");
    t.id_test = load_samples(dir, "id_test");
    for (const auto& name : meta.at("ood_sets")) {
      t.ood_test.push_back({name.get<std::string>(), load_samples(dir, "ood_" + name.get<std::string>())});
    }
    for (const auto& k : meta.value("noise_layers", json::array())) t.noise.layers.push_back(weight_key_from_string(k));
    t.noise.r_true = meta.value("r_true", t.noise.r_true);
    return data;
  });
}

TaskData prepare_task(const ExperimentConfig& cfg) {
  if (!cfg.task_dir.empty()) {
    TaskData data = load_task(cfg.task_dir);
    if (data.task.noisy_store.config() != cfg.task.model) {
      throw InvalidInput("model config does not match the task directory " + cfg.task_dir.string());
    }
    return data;
  }
  return TaskData{generate_task(cfg.task), true};
}

json evaluate_method(const WeightStore& store, const TaskData& data, const ExperimentConfig& cfg,
                     const std::string& method, const std::filesystem::path& dir) {
  const SyntheticTask& t = data.task;
  if (t.ood_test.empty()) throw InvalidInput("task has no OOD sets");
  std::filesystem::create_directories(dir);
  json rows = json::array();
  for (ScoreKind kind : cfg.scores) {
    const std::vector<double> id = score_images(store, t.id_test, t.prompts, kind, cfg.score_params);
    json results = json::array();
    double fpr_sum = 0.0;
    double auroc_sum = 0.0;
    for (const auto& set : t.ood_test) {
      ScoreSet s{id, score_images(store, set.samples, t.prompts, kind, cfg.score_params), to_string(kind)};
      const std::string file = "scores_" + file_stem(kind) + "_" + set.name + ".csv";
      write_text(dir / file, scores_csv(s, "id_test", set.name));
      const EvalReport r = evaluate(s);
      json row = to_json(r);
      row["dataset"] = set.name;
      row["scores_file"] = (std::filesystem::path(method) / file).string();
      results.push_back(row);
      fpr_sum += r.fpr95;
      auroc_sum += r.auroc;
    }
    const double n = static_cast<double>(t.ood_test.size());
    results.push_back({{"dataset", "Average"}, {"fpr95", fpr_sum / n}, {"auroc", auroc_sum / n}});
    rows.push_back({{"method", method}, {"score", to_string(kind)}, {"results", results}});
  }
  return rows;
}

json error_record(const std::exception& e) {
  const auto* se = dynamic_cast<const Error*>(&e);
  return json{{"status", "error"}, {"error", {{"kind", se ? se->kind() : "internal"}, {"message", e.what()}}}};
}

namespace {

json eval_json(const DatasetEval& e) {
  return json{{"total", e.loss.total},
              {"id", e.loss.id_loss},
              {"ood", e.loss.ood_loss},
              {"ood_patch_fraction", e.loss.ood_patch_fraction},
              {"accuracy", e.accuracy}};
}

json run_stages(const ExperimentConfig& cfg) {
  const auto& out = cfg.output_dir;
  const TaskData data = prepare_task(cfg);
  const SyntheticTask& t = data.task;

  const SearchResult sr = run_search(t.noisy_store, t.id_val, t.prompts, cfg.search);
  write_text(out / "plan.json", to_json(sr.plan).dump(2) + "\n");
  write_text(out / "trace.csv", trace_csv(sr.trace));
  save_weights(t.noisy_store, out, "weights_vanilla");
  save_weights(sr.final_store, out, "weights_setar");

  json methods = json::array();
  const auto add = [&](const json& rows) {
    for (const auto& r : rows) methods.push_back(r);
  };
  add(evaluate_method(t.noisy_store, data, cfg, "vanilla", out / "vanilla"));
  add(evaluate_method(sr.final_store, data, cfg, "setar", out / "setar"));

  json ft_info = json::object();
  if (cfg.ft) {
    for (FtMode mode : cfg.ft_modes) {
      FtConfig fc = *cfg.ft;
      fc.mode = mode;
      const std::string name = to_string(mode);
      const FtResult fr = ft_train(t.noisy_store, sr.plan, t.id_train, t.prompts, fc);
      write_text(out / ("loss_curve_" + name + ".csv"), loss_curve_csv(fr.loss_curve));
      save_weights(fr.store, out, "weights_" + name);
      add(evaluate_method(fr.store, data, cfg, name, out / name));
      ft_info[name] = {{"initial_loss", fr.loss_curve.front().total}, {"final_loss", fr.loss_curve.back().total}};
    }
  }
  if (data.has_clean) add(evaluate_method(t.clean_store, data, cfg, "clean", out / "clean"));

  json ood_names = json::array();
  for (const auto& o : t.ood_test) ood_names.push_back(o.name);
  json report{{"status", "ok"},
              {"config", to_json(cfg)},
              {"ood_sets", ood_names},
              {"search",
               {{"initial", eval_json(sr.initial)},
                {"final", eval_json(sr.final)},
                {"loss_evaluations", sr.loss_evaluations},
                {"plan", to_json(sr.plan)}}},
              {"methods", methods}};
  if (cfg.ft) report["finetune"] = ft_info;
  return report;
}

}  // namespace

json run_pipeline(const ExperimentConfig& cfg) {
  std::filesystem::create_directories(cfg.output_dir);
  try {
    cfg.validate();
    json report = run_stages(cfg);
    write_text(cfg.output_dir / "report.json", report.dump(2) + "\n");
    return report;
  } catch (const std::exception& e) {
    write_text(cfg.output_dir / "report.json", error_record(e).dump(2) + "\n");
    throw;
  }
}

}  // namespace setar
