#include <channelkit/pipeline.hpp>

#include <channelkit/common.hpp>

#include <json.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>

namespace ck {

namespace {

using nlohmann::json;
namespace fs = std::filesystem;

void ensure_dir(const std::string& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create directory: " + dir);
}

TrainConfig train_config_from(const json& j, TrainConfig base) {
  base.epochs = j.value("epochs", base.epochs);
  base.batch_size = j.value("batch_size", base.batch_size);
  base.learning_rate = j.value("learning_rate", base.learning_rate);
  base.momentum = j.value("momentum", base.momentum);
  base.weight_decay = j.value("weight_decay", base.weight_decay);
  base.lambda = j.value("lambda", base.lambda);
  if (j.contains("mode")) base.mode = train_mode_from_string(j.at("mode").get<std::string>());
  return base;
}

json train_config_json(const TrainConfig& c) {
  return json{{"epochs", c.epochs},
              {"batch_size", c.batch_size},
              {"learning_rate", c.learning_rate},
              {"momentum", c.momentum},
              {"weight_decay", c.weight_decay},
              {"lambda", c.lambda},
              {"mode", to_string(c.mode)}};
}

}  // namespace

void PipelineConfig::validate() const {
  if (workdir.empty()) throw ConfigError("workdir must not be empty");
  if (train_samples < 1 || test_samples < 1) throw ConfigError("dataset sizes must be >= 1");
  if (scoring_batches < 1) throw ConfigError("scoring needs at least one batch");
  if (alphas.empty()) throw ConfigError("at least one alpha is required");
  for (double a : alphas) Alpha check(a);  // throws DomainError outside (0, 1)
  network.validate();
  train.validate();
  finetune.validate();
}

PipelineConfig load_pipeline_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file: " + path);
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw ConfigError("malformed config JSON: " + path + ": " + e.what());
  }

  PipelineConfig cfg;
  try {
    cfg.workdir = j.value("workdir", cfg.workdir);
    cfg.dataset_cache = j.value("dataset_cache", cfg.dataset_cache);
    cfg.seed = j.value("seed", cfg.seed);
    if (j.contains("dataset")) {
      const json& d = j.at("dataset");
      cfg.train_samples = d.value("train_samples", cfg.train_samples);
      cfg.test_samples = d.value("test_samples", cfg.test_samples);
    }
    cfg.scoring_batches = j.value("scoring_batches", cfg.scoring_batches);
    cfg.alphas = j.value("alphas", cfg.alphas);
    cfg.reports = j.value("reports", cfg.reports);
    if (j.contains("network")) {
      const json& n = j.at("network");
      cfg.network.in_channels = n.value("in_channels", cfg.network.in_channels);
      cfg.network.in_height = n.value("in_height", cfg.network.in_height);
      cfg.network.in_width = n.value("in_width", cfg.network.in_width);
      cfg.network.stage_channels = n.value("stage_channels", cfg.network.stage_channels);
      cfg.network.num_classes = n.value("num_classes", cfg.network.num_classes);
      cfg.network.ccm_target_layers = n.value("ccm_target_layers", cfg.network.ccm_target_layers);
    }
    if (j.contains("train")) cfg.train = train_config_from(j.at("train"), cfg.train);
    cfg.finetune = cfg.train;
    cfg.finetune.mode = TrainMode::Off;
    if (j.contains("finetune")) cfg.finetune = train_config_from(j.at("finetune"), cfg.finetune);
  } catch (const json::exception& e) {
    throw ConfigError("malformed config value in " + path + ": " + e.what());
  }
  cfg.train.seed = cfg.seed;
  cfg.finetune.seed = cfg.seed + 1;
  return cfg;
}

void write_effective_config(const PipelineConfig& cfg) {
  ensure_dir(cfg.workdir);
  json j{{"workdir", cfg.workdir},
         {"dataset_cache", cfg.cache_dir()},
         {"seed", cfg.seed},
         {"dataset", json{{"train_samples", cfg.train_samples}, {"test_samples", cfg.test_samples}}},
         {"scoring_batches", cfg.scoring_batches},
         {"alphas", cfg.alphas},
         {"reports", cfg.reports},
         {"network", json{{"in_channels", cfg.network.in_channels},
                          {"in_height", cfg.network.in_height},
                          {"in_width", cfg.network.in_width},
                          {"stage_channels", cfg.network.stage_channels},
                          {"num_classes", cfg.network.num_classes},
                          {"ccm_target_layers", cfg.network.ccm_target_layers}}},
         {"train", train_config_json(cfg.train)},
         {"finetune", train_config_json(cfg.finetune)}};
  const std::string path = cfg.workdir + "/config.json";
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write effective config: " + path);
  out << j.dump(2) << '\n';
  if (!out) throw IoError("short write on effective config: " + path);
}

std::string alpha_tag(double alpha) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%g", alpha);
  return buf;
}

std::string checkpoint_dir(const PipelineConfig& cfg) { return cfg.workdir + "/checkpoint"; }
std::string history_path(const PipelineConfig& cfg) { return cfg.workdir + "/history.csv"; }
std::string importance_dir(const PipelineConfig& cfg) { return cfg.workdir + "/importance"; }
std::string importance_path(const PipelineConfig& cfg, int layer) {
  return importance_dir(cfg) + "/layer_" + std::to_string(layer) + ".csv";
}
std::string gini_path(const PipelineConfig& cfg) { return importance_dir(cfg) + "/gini.csv"; }
std::string plan_path(const PipelineConfig& cfg, double alpha) {
  return cfg.workdir + "/plans/alpha_" + alpha_tag(alpha) + ".json";
}
std::string pruned_dir(const PipelineConfig& cfg, double alpha) {
  return cfg.workdir + "/alpha_" + alpha_tag(alpha);
}
std::string report_dir(const PipelineConfig& cfg) { return cfg.workdir + "/report"; }

namespace {

SynthDataset dataset_from_files(const std::string& images_path, const std::string& labels_path,
                                std::uint64_t seed, int samples, int height, int width) {
  auto [idims, images] = read_tensor(images_path);
  auto [ldims, labels] = read_tensor(labels_path);
  if (idims.size() != 4 || idims[0] != static_cast<std::uint32_t>(samples) || idims[1] != 1 ||
      idims[2] != static_cast<std::uint32_t>(height) || idims[3] != static_cast<std::uint32_t>(width))
    throw IoError("cached dataset images have unexpected dims: " + images_path);
  if (ldims.size() != 1 || ldims[0] != static_cast<std::uint32_t>(samples))
    throw IoError("cached dataset labels have unexpected dims: " + labels_path);
  SynthDataset d;
  d.samples = samples;
  d.height = height;
  d.width = width;
  d.seed = seed;
  d.images = std::move(images);
  d.labels.resize(static_cast<std::size_t>(samples));
  for (int i = 0; i < samples; ++i) {
    const double v = labels[i];
    d.labels[static_cast<std::size_t>(i)] = static_cast<int>(v);
    if (v != static_cast<double>(d.labels[static_cast<std::size_t>(i)]) || v < 0.0)
      throw IoError("cached dataset labels are not valid class ids: " + labels_path);
  }
  return d;
}

void write_dataset(const std::string& images_path, const std::string& labels_path,
                   const SynthDataset& d) {
  write_tensor(images_path,
               {static_cast<std::uint32_t>(d.samples), 1u, static_cast<std::uint32_t>(d.height),
                static_cast<std::uint32_t>(d.width)},
               d.images);
  Eigen::VectorXd labels(d.samples);
  for (int i = 0; i < d.samples; ++i) labels[i] = static_cast<double>(d.labels[static_cast<std::size_t>(i)]);
  write_tensor(labels_path, {static_cast<std::uint32_t>(d.samples)}, labels);
}

}  // namespace

DatasetPair load_or_create_datasets(const PipelineConfig& cfg) {
  const std::string dir = cfg.cache_dir();
  const std::string meta_path = dir + "/meta.json";

  // The test split draws from an unrelated stream so it never overlaps the
  // training data at any sample count.
  const std::uint64_t train_seed = cfg.seed;
  const std::uint64_t test_seed = cfg.seed ^ 0x7c3a9d2f51e86b04ull;

  std::ifstream meta_in(meta_path);
  if (meta_in) {
    try {
      json meta;
      meta_in >> meta;
      if (meta.value("seed", std::uint64_t(0)) == cfg.seed &&
          meta.value("train_samples", -1) == cfg.train_samples &&
          meta.value("test_samples", -1) == cfg.test_samples) {
        DatasetPair pair;
        pair.train = dataset_from_files(dir + "/train_images.ckt", dir + "/train_labels.ckt",
                                        train_seed, cfg.train_samples, 16, 16);
        pair.test = dataset_from_files(dir + "/test_images.ckt", dir + "/test_labels.ckt",
                                       test_seed, cfg.test_samples, 16, 16);
        return pair;
      }
    } catch (const json::exception&) {
      // fall through and rebuild the cache
    }
  }

  DatasetPair pair;
  pair.train = synth_dataset(train_seed, cfg.train_samples);
  pair.test = synth_dataset(test_seed, cfg.test_samples);

  ensure_dir(dir);
  write_dataset(dir + "/train_images.ckt", dir + "/train_labels.ckt", pair.train);
  write_dataset(dir + "/test_images.ckt", dir + "/test_labels.ckt", pair.test);
  json meta{{"seed", cfg.seed},
            {"train_samples", cfg.train_samples},
            {"test_samples", cfg.test_samples}};
  std::ofstream meta_out(meta_path, std::ios::trunc);
  if (!meta_out) throw IoError("cannot write dataset cache meta: " + meta_path);
  meta_out << meta.dump(2) << '\n';
  if (!meta_out) throw IoError("short write on dataset cache meta: " + meta_path);
  return pair;
}

std::vector<ImportanceList> score_checkpoint(const PipelineConfig& cfg, const Checkpoint& ckpt,
                                             const SynthDataset& data) {
  const int stages = ckpt.spec.stages();
  const int batch = ckpt.config.batch_size;
  std::vector<std::vector<ImportanceList>> per_stage(static_cast<std::size_t>(stages));
  int used = 0;
  for (int i = 0; i < cfg.scoring_batches; ++i) {
    const int begin = i * batch;
    if (begin >= data.samples) break;
    const int end = std::min(data.samples, begin + batch);
    const ForwardTrace trace = forward(ckpt.spec, ckpt.params, data.range_batch(begin, end));
    for (int s = 0; s < stages; ++s)
      per_stage[static_cast<std::size_t>(s)].push_back(
          chip_scores(flatten(batch_mean(trace.features[static_cast<std::size_t>(s)])), s));
    ++used;
  }
  if (used == 0) throw DomainError("dataset has no samples to score");

  std::vector<ImportanceList> out;
  out.reserve(static_cast<std::size_t>(stages));
  for (int s = 0; s < stages; ++s) out.push_back(average_scores(per_stage[static_cast<std::size_t>(s)]));
  return out;
}

void cmd_train(const PipelineConfig& cfg) {
  cfg.validate();
  write_effective_config(cfg);
  const DatasetPair data = load_or_create_datasets(cfg);

  TrainResult res = train(cfg.network, data.train, cfg.train);

  Checkpoint ckpt;
  ckpt.spec = cfg.network;
  ckpt.config = cfg.train;
  ckpt.epoch = cfg.train.epochs;
  ckpt.history = res.history;
  ckpt.params = std::move(res.params);
  ckpt.provenance = "trained from scratch";
  save_checkpoint(checkpoint_dir(cfg), ckpt);
  write_history_csv(history_path(cfg), ckpt.history);
  std::cout << "trained " << cfg.train.epochs << " epochs, final accuracy "
            << g17(ckpt.history.empty() ? 0.0 : ckpt.history.back().accuracy) << "\n";
}

void cmd_score(const PipelineConfig& cfg) {
  cfg.validate();
  const Checkpoint ckpt = load_checkpoint(checkpoint_dir(cfg));
  const DatasetPair data = load_or_create_datasets(cfg);

  const std::vector<ImportanceList> lists = score_checkpoint(cfg, ckpt, data.train);
  ensure_dir(importance_dir(cfg));
  for (const ImportanceList& list : lists)
    write_importance_csv(importance_path(cfg, list.layer), list);

  std::ofstream gini_out(gini_path(cfg), std::ios::trunc);
  if (!gini_out) throw IoError("cannot write gini CSV: " + gini_path(cfg));
  gini_out << "layer,gini\n";
  for (const ImportanceList& list : lists) gini_out << list.layer << ',' << g17(gini(list)) << '\n';
  if (!gini_out) throw IoError("short write on gini CSV: " + gini_path(cfg));
  std::cout << "scored " << lists.size() << " stages\n";
}

void cmd_select(const PipelineConfig& cfg, double alpha) {
  cfg.validate();
  const Alpha a(alpha);
  const Checkpoint ckpt = load_checkpoint(checkpoint_dir(cfg));

  std::vector<RetainSet> sets;
  for (int s = 0; s < ckpt.spec.stages(); ++s)
    sets.push_back(pcrr_select(read_importance_csv(importance_path(cfg, s)), a));

  PruningPlan plan = build_plan(sets, ckpt.spec);
  plan.alpha = alpha;
  ensure_dir(cfg.workdir + "/plans");
  write_plan_json(plan_path(cfg, alpha), plan);

  int before = 0, after = 0;
  for (const RetainSet& rs : plan.layers) {
    before += rs.original_width;
    after += rs.k();
  }
  std::cout << "alpha " << alpha_tag(alpha) << ": retaining " << after << " of " << before
            << " channels\n";
}

void cmd_prune(const PipelineConfig& cfg, double alpha) {
  cfg.validate();
  const Checkpoint ckpt = load_checkpoint(checkpoint_dir(cfg));
  const PruningPlan plan = read_plan_json(plan_path(cfg, alpha));
  const DatasetPair data = load_or_create_datasets(cfg);

  const PrunedModel pruned = apply_plan(ckpt.spec, ckpt.params, plan);
  CompressionReport report = compression_report(ckpt.spec, pruned.spec);
  report.accuracy_before = evaluate(ckpt.spec, ckpt.params, data.test);
  report.accuracy_pruned = evaluate(pruned.spec, pruned.params, data.test);

  const FinetuneResult ft = finetune(pruned, data.train, cfg.finetune);
  report.accuracy_finetuned = evaluate(ft.model.spec, ft.model.params, data.test);

  const std::string dir = pruned_dir(cfg, alpha);
  ensure_dir(dir);

  Checkpoint out;
  out.spec = ft.model.spec;
  out.config = cfg.finetune;
  out.epoch = cfg.finetune.epochs;
  out.history = ft.history;
  out.params = ft.model.params;
  out.provenance = "pruned at alpha " + alpha_tag(alpha) + " and finetuned";
  save_checkpoint(dir + "/checkpoint", out);
  write_history_csv(dir + "/finetune_history.csv", ft.history);
  write_report_json(dir + "/compression_report.json", report);
  write_report_csv(dir + "/layer_widths.csv", report);

  std::cout << "alpha " << alpha_tag(alpha) << ": params " << report.params_before << " -> "
            << report.params_after << ", accuracy " << g17(report.accuracy_before) << " -> "
            << g17(report.accuracy_finetuned) << "\n";
}

void cmd_pipeline(const PipelineConfig& cfg) {
  cfg.validate();
  write_effective_config(cfg);

  if (!fs::exists(checkpoint_dir(cfg) + "/manifest.json")) {
    cmd_train(cfg);
  } else {
    std::cout << "checkpoint present, skipping training\n";
  }

  bool have_scores = fs::exists(gini_path(cfg));
  for (int s = 0; have_scores && s < cfg.network.stages(); ++s)
    have_scores = fs::exists(importance_path(cfg, s));
  if (!have_scores) {
    cmd_score(cfg);
  } else {
    std::cout << "importance present, skipping scoring\n";
  }

  for (double alpha : cfg.alphas) {
    if (!fs::exists(plan_path(cfg, alpha))) {
      cmd_select(cfg, alpha);
    } else {
      std::cout << "plan for alpha " << alpha_tag(alpha) << " present, skipping selection\n";
    }
    if (!fs::exists(pruned_dir(cfg, alpha) + "/compression_report.json")) {
      cmd_prune(cfg, alpha);
    } else {
      std::cout << "pruned model for alpha " << alpha_tag(alpha) << " present, skipping\n";
    }
  }

  if (cfg.reports && !fs::exists(report_dir(cfg) + "/summary.json")) cmd_report(cfg);
}

}  // namespace ck
