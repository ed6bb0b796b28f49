#include "testdg/harness.hpp"

#include <algorithm>
#include <chrono>
#include <fstream>
#include <set>
#include <sstream>
#include <stdexcept>

#include "json.hpp"

namespace testdg {

using ordered_json = nlohmann::ordered_json;

BaselineSpec resolve_baseline(const std::string& name) {
  BaselineSpec spec;
  spec.name = name;
  AblationFlags off{false, false, false, false, false, false};
  if (name == "source-only") {
    spec.kind = BaselineKind::source_only;
    spec.flags = off;
    return spec;
  }
  if (name == "self-training-only") {
    spec.kind = BaselineKind::self_training_only;
    spec.flags = off;
    spec.flags.use_self_training = true;
    return spec;
  }
  if (name == "full-testdg") {
    spec.kind = BaselineKind::full_testdg;
    spec.flags = AblationFlags{};
    return spec;
  }
  spec.kind = BaselineKind::ablation;
  if (name == "no-amplifier") {
    spec.flags = AblationFlags{};
    spec.flags.use_amplifier = false;
    return spec;
  }
  if (name == "self-inv") {
    spec.flags = off;
    spec.flags.use_amplifier = true;
    spec.flags.use_self_training = true;
    spec.flags.use_invariance = true;
    return spec;
  }
  if (name == "self-inv-dis") {
    spec.flags = off;
    spec.flags.use_amplifier = true;
    spec.flags.use_self_training = true;
    spec.flags.use_invariance = true;
    spec.flags.use_discrimination = true;
    return spec;
  }
  if (name == "self-inv-dis-select") {
    spec.flags = AblationFlags{};
    spec.flags.use_prototype_update = false;
    return spec;
  }
  throw std::invalid_argument("unknown baseline: " + name);
}

std::vector<BaselineSpec> ablation_matrix() {
  std::vector<BaselineSpec> rows;
  for (const char* name : {"source-only", "self-training-only", "self-inv", "self-inv-dis",
                           "self-inv-dis-select", "full-testdg", "no-amplifier"})
    rows.push_back(resolve_baseline(name));
  return rows;
}

namespace {

std::size_t argmax_row(std::span<const double> row) {
  std::size_t best = 0;
  for (std::size_t c = 1; c < row.size(); ++c)
    if (row[c] > row[best]) best = c;
  return best;
}

double evaluate_error(const EncoderNet& enc, const LabeledBatch& data) {
  Var probs = classify(enc, enc.features(constant(data.inputs), nullptr, false));
  std::size_t correct = 0;
  for (std::size_t i = 0; i < data.labels.size(); ++i)
    if (static_cast<int>(argmax_row(probs->value.row(i))) == data.labels[i]) ++correct;
  return 1.0 - static_cast<double>(correct) / static_cast<double>(data.labels.size());
}

RealArray one_hot(const std::vector<int>& labels, std::size_t classes) {
  RealArray out({labels.size(), classes});
  for (std::size_t i = 0; i < labels.size(); ++i)
    out.at(i, static_cast<std::size_t>(labels[i])) = 1.0;
  return out;
}

}  // namespace

PretrainResult pretrain_source(const BaseTask& task, const ModelConfig& mcfg,
                               const PretrainOptions& opt, std::uint64_t seed) {
  if (mcfg.input_dim != task.input_dim)
    throw std::invalid_argument("model input_dim does not match task input_dim");
  if (mcfg.num_classes != task.num_classes)
    throw std::invalid_argument("model num_classes does not match task num_classes");
  if (opt.epochs == 0 || opt.batch_size == 0 || !(opt.lr > 0.0))
    throw std::invalid_argument("pretrain options need epochs, batch_size and lr positive");

  Rng rng(seed);
  Rng data_rng = rng.split("pretrain-data");
  Rng eval_rng = rng.split("pretrain-eval");
  LabeledBatch train = sample_source(task, task.train_size, data_rng);
  LabeledBatch held_out = sample_source(task, task.test_size, eval_rng);

  PretrainResult res;
  res.encoder = std::make_unique<EncoderNet>(mcfg, rng.split("pretrain-init"));

  try {
    Rng order_rng = rng.split("pretrain-order");
    for (std::size_t epoch = 0; epoch < opt.epochs; ++epoch) {
      std::vector<std::size_t> perm = order_rng.permutation(task.train_size);
      double epoch_loss = 0.0;
      std::size_t steps = 0;
      for (std::size_t start = 0; start < perm.size(); start += opt.batch_size) {
        std::size_t count = std::min(opt.batch_size, perm.size() - start);
        RealArray inputs({count, task.input_dim});
        std::vector<int> labels(count);
        for (std::size_t i = 0; i < count; ++i) {
          std::span<const double> src = train.inputs.row(perm[start + i]);
          std::copy(src.begin(), src.end(), inputs.row(i).begin());
          labels[i] = train.labels[perm[start + i]];
        }
        Var probs = classify(*res.encoder, res.encoder->features(constant(inputs), nullptr, false));
        Var picked = mul(constant(one_hot(labels, mcfg.num_classes)),
                         vlog(clamp(probs, kLogClamp, 1.0)));
        // mean() divides by batch * classes; rescale to plain cross-entropy.
        Var loss = scale(mean(picked), -static_cast<double>(mcfg.num_classes));
        res.encoder->params().zero_grad();
        backward(loss);
        res.encoder->params().step(opt.lr, OptMode::adaptive_moment);
        epoch_loss += loss->value.item();
        ++steps;
      }
      res.loss_trace.push_back(epoch_loss / static_cast<double>(steps));
    }
  } catch (const std::domain_error& err) {
    res.diverged = true;
    res.diagnostic = std::string{"pretraining diverged: "} + err.what();
    return res;
  }

  res.source_error = evaluate_error(*res.encoder, held_out);
  res.converged = res.source_error <= 0.05;
  if (!res.converged)
    res.diagnostic = "pretraining missed the 5% source error bar, got " +
                     std::to_string(res.source_error * 100.0) + "%";
  return res;
}

namespace {

ordered_json adaptation_to_json(const AdaptationConfig& a) {
  ordered_json j;
  j["lr_step1"] = a.lr_step1;
  j["opt_step1"] = a.opt_step1 == OptMode::adaptive_moment ? "adam" : "sgd";
  j["lr_step2"] = a.lr_step2;
  j["opt_step2"] = a.opt_step2 == OptMode::adaptive_moment ? "adam" : "sgd";
  j["lr_proto"] = a.lr_proto;
  j["opt_proto"] = a.opt_proto == OptMode::adaptive_moment ? "adam" : "sgd";
  j["lambda_inv"] = a.lambda_inv;
  j["momentum"] = a.momentum;
  j["threshold"] = a.threshold;
  j["amplified_prediction"] = a.amplified_prediction;
  j["queue_capacity"] = a.queue_capacity;
  j["num_prototypes"] = a.num_prototypes;
  j["proto_steps"] = a.proto_steps;
  j["augment_noise"] = a.augment_noise;
  j["augment_rotation_deg"] = a.augment_rotation_deg;
  j["augment_copies"] = a.augment_copies;
  j["seed"] = a.seed;
  return j;
}

ordered_json model_to_json(const ModelConfig& m) {
  ordered_json j;
  j["input_dim"] = m.input_dim;
  j["hidden_width"] = m.hidden_width;
  j["feature_dim"] = m.feature_dim;
  j["encoder_layers"] = m.encoder_layers;
  j["num_classes"] = m.num_classes;
  j["bottleneck"] = m.bottleneck;
  j["domain_dim"] = m.domain_dim;
  j["extractor_hidden"] = m.extractor_hidden;
  j["discriminator_depth"] = m.discriminator_depth;
  j["discriminator_hidden"] = m.discriminator_hidden;
  return j;
}

ordered_json flags_to_json(const AblationFlags& f) {
  ordered_json j;
  j["use_amplifier"] = f.use_amplifier;
  j["use_self_training"] = f.use_self_training;
  j["use_invariance"] = f.use_invariance;
  j["use_discrimination"] = f.use_discrimination;
  j["use_greedy_selection"] = f.use_greedy_selection;
  j["use_prototype_update"] = f.use_prototype_update;
  return j;
}

std::string config_echo_text(const ScenarioConfig& scenario, const AdaptationConfig& acfg,
                             const BaselineSpec& baseline) {
  ordered_json j;
  j["baseline"] = baseline.name;
  j["flags"] = flags_to_json(baseline.flags);
  j["adaptation"] = adaptation_to_json(acfg);
  j["scenario"] = ordered_json::parse(scenario_to_json_text(scenario));
  return j.dump();
}

struct ScenarioRunState {
  RunReport report;
  std::unique_ptr<AdaptationEngine> engine;   // null for source-only
  std::unique_ptr<EncoderNet> plain_encoder;  // set for source-only
};

ScenarioRunState run_scenario_impl(const EncoderNet& pretrained, ScenarioConfig scenario,
                                   AdaptationConfig acfg, const BaselineSpec& baseline,
                                   std::uint64_t seed) {
  scenario.seed = seed;
  acfg.seed = seed;
  ScenarioStream stream(scenario);

  ScenarioRunState state;
  state.report.scenario_name = scenario.name;
  state.report.baseline = baseline.name;
  state.report.seed = seed;
  state.report.config_echo = config_echo_text(scenario, acfg, baseline);

  auto start = std::chrono::steady_clock::now();
  if (baseline.kind == BaselineKind::source_only) {
    state.plain_encoder = pretrained.clone();
    for (std::size_t i = 0; i < stream.total_batches(); ++i) {
      StreamBatch sb = stream.batch(i);
      Var probs = classify(*state.plain_encoder,
                           state.plain_encoder->features(constant(sb.data.inputs), nullptr, false));
      BatchRecord rec;
      rec.index = i;
      rec.domain_tag = sb.domain_tag;
      rec.truth_change = sb.change_flag;
      rec.confidence = batch_confidence(probs->value);
      rec.total = sb.data.labels.size();
      for (std::size_t s = 0; s < sb.data.labels.size(); ++s)
        if (static_cast<int>(argmax_row(probs->value.row(s))) == sb.data.labels[s]) ++rec.correct;
      state.report.batches.push_back(std::move(rec));
    }
  } else {
    state.engine =
        std::make_unique<AdaptationEngine>(pretrained.clone(), acfg, baseline.flags);
    for (std::size_t i = 0; i < stream.total_batches(); ++i) {
      StreamBatch sb = stream.batch(i);
      BatchRecord rec = state.engine->adapt_batch(sb.data.inputs, &sb.data.labels);
      rec.domain_tag = sb.domain_tag;
      rec.truth_change = sb.change_flag;
      state.report.batches.push_back(std::move(rec));
    }
  }
  state.report.wall_clock_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  finalize_report(state.report);
  return state;
}

}  // namespace

RunReport run_scenario(const EncoderNet& pretrained, const ScenarioConfig& scenario,
                       const AdaptationConfig& acfg, const BaselineSpec& baseline,
                       std::uint64_t seed) {
  return run_scenario_impl(pretrained, scenario, acfg, baseline, seed).report;
}

RunReport run_generalization(const EncoderNet& pretrained, const ScenarioConfig& scenario,
                             const AdaptationConfig& acfg, const BaselineSpec& baseline,
                             std::uint64_t seed) {
  ScenarioRunState state = run_scenario_impl(pretrained, scenario, acfg, baseline, seed);
  state.report.has_generalization = true;

  std::size_t eval_batches =
      std::max<std::size_t>(1, scenario.task.test_size / scenario.batch_size);
  for (const DomainSpec& spec : scenario.held_out) {
    DomainErrorRow row;
    row.domain = spec.name;
    for (std::size_t i = 0; i < eval_batches; ++i) {
      LabeledBatch data = eval_batch(scenario.task, spec, scenario.batch_size, seed, i);
      RealArray probs =
          state.engine
              ? state.engine->predict(data.inputs)
              : classify(*state.plain_encoder,
                         state.plain_encoder->features(constant(data.inputs), nullptr, false))
                    ->value;
      row.batches += 1;
      row.samples += data.labels.size();
      for (std::size_t s = 0; s < data.labels.size(); ++s)
        if (static_cast<int>(argmax_row(probs.row(s))) == data.labels[s]) ++row.correct;
    }
    row.error =
        row.samples == 0 ? 0.0 : 1.0 - static_cast<double>(row.correct) / static_cast<double>(row.samples);
    state.report.generalization.push_back(row);
  }
  finalize_report(state.report);
  return state.report;
}

namespace {

void reject_unknown_keys(const ordered_json& j, const std::set<std::string>& allowed,
                         const std::string& where) {
  for (const auto& item : j.items())
    if (!allowed.contains(item.key()))
      throw std::invalid_argument("unknown config field '" + item.key() + "' in " + where);
}

OptMode opt_from_string(const std::string& s) {
  if (s == "adam") return OptMode::adaptive_moment;
  if (s == "sgd") return OptMode::sgd;
  throw std::invalid_argument("unknown optimizer mode: " + s);
}

}  // namespace

HarnessConfig harness_config_from_json_text(const std::string& text) {
  try {
    ordered_json j = ordered_json::parse(text);
    reject_unknown_keys(j, {"schema_version", "model", "adaptation", "pretrain"}, "config");
    int version = j.at("schema_version").get<int>();
    if (version != kConfigSchemaVersion)
      throw std::invalid_argument("unsupported config schema_version " + std::to_string(version));

    HarnessConfig cfg;
    if (j.contains("model")) {
      const ordered_json& m = j.at("model");
      reject_unknown_keys(m,
                          {"input_dim", "hidden_width", "feature_dim", "encoder_layers",
                           "num_classes", "bottleneck", "domain_dim", "extractor_hidden",
                           "discriminator_depth", "discriminator_hidden"},
                          "model");
      cfg.model.input_dim = m.value("input_dim", cfg.model.input_dim);
      cfg.model.hidden_width = m.value("hidden_width", cfg.model.hidden_width);
      cfg.model.feature_dim = m.value("feature_dim", cfg.model.feature_dim);
      cfg.model.encoder_layers = m.value("encoder_layers", cfg.model.encoder_layers);
      cfg.model.num_classes = m.value("num_classes", cfg.model.num_classes);
      cfg.model.bottleneck = m.value("bottleneck", cfg.model.bottleneck);
      cfg.model.domain_dim = m.value("domain_dim", cfg.model.domain_dim);
      cfg.model.extractor_hidden = m.value("extractor_hidden", cfg.model.extractor_hidden);
      cfg.model.discriminator_depth = m.value("discriminator_depth", cfg.model.discriminator_depth);
      cfg.model.discriminator_hidden = m.value("discriminator_hidden", cfg.model.discriminator_hidden);
    }
    if (j.contains("adaptation")) {
      const ordered_json& a = j.at("adaptation");
      reject_unknown_keys(a,
                          {"lr_step1", "opt_step1", "lr_step2", "opt_step2", "lr_proto", "opt_proto",
                           "lambda_inv", "momentum", "threshold", "amplified_prediction",
                           "queue_capacity", "num_prototypes", "proto_steps", "augment_noise",
                           "augment_rotation_deg", "augment_copies", "seed"},
                          "adaptation");
      cfg.adapt.lr_step1 = a.value("lr_step1", cfg.adapt.lr_step1);
      if (a.contains("opt_step1")) cfg.adapt.opt_step1 = opt_from_string(a.at("opt_step1"));
      cfg.adapt.lr_step2 = a.value("lr_step2", cfg.adapt.lr_step2);
      if (a.contains("opt_step2")) cfg.adapt.opt_step2 = opt_from_string(a.at("opt_step2"));
      cfg.adapt.lr_proto = a.value("lr_proto", cfg.adapt.lr_proto);
      if (a.contains("opt_proto")) cfg.adapt.opt_proto = opt_from_string(a.at("opt_proto"));
      cfg.adapt.lambda_inv = a.value("lambda_inv", cfg.adapt.lambda_inv);
      cfg.adapt.momentum = a.value("momentum", cfg.adapt.momentum);
      cfg.adapt.threshold = a.value("threshold", cfg.adapt.threshold);
      cfg.adapt.amplified_prediction =
          a.value("amplified_prediction", cfg.adapt.amplified_prediction);
      cfg.adapt.queue_capacity = a.value("queue_capacity", cfg.adapt.queue_capacity);
      cfg.adapt.num_prototypes = a.value("num_prototypes", cfg.adapt.num_prototypes);
      cfg.adapt.proto_steps = a.value("proto_steps", cfg.adapt.proto_steps);
      cfg.adapt.augment_noise = a.value("augment_noise", cfg.adapt.augment_noise);
      cfg.adapt.augment_rotation_deg = a.value("augment_rotation_deg", cfg.adapt.augment_rotation_deg);
      cfg.adapt.augment_copies = a.value("augment_copies", cfg.adapt.augment_copies);
      cfg.adapt.seed = a.value("seed", cfg.adapt.seed);
      validate(cfg.adapt);
    }
    if (j.contains("pretrain")) {
      const ordered_json& p = j.at("pretrain");
      reject_unknown_keys(p, {"epochs", "lr", "batch_size"}, "pretrain");
      cfg.pretrain.epochs = p.value("epochs", cfg.pretrain.epochs);
      cfg.pretrain.lr = p.value("lr", cfg.pretrain.lr);
      cfg.pretrain.batch_size = p.value("batch_size", cfg.pretrain.batch_size);
    }
    return cfg;
  } catch (const nlohmann::json::exception& e) {
    throw std::invalid_argument(std::string("config: ") + e.what());
  }
}

std::string harness_config_to_json_text(const HarnessConfig& cfg) {
  ordered_json j;
  j["schema_version"] = kConfigSchemaVersion;
  j["model"] = model_to_json(cfg.model);
  j["adaptation"] = adaptation_to_json(cfg.adapt);
  j["pretrain"] = {{"epochs", cfg.pretrain.epochs},
                   {"lr", cfg.pretrain.lr},
                   {"batch_size", cfg.pretrain.batch_size}};
  return j.dump(2) + "\n";
}

HarnessConfig load_harness_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open config file: " + path);
  std::stringstream buf;
  buf << in.rdbuf();
  return harness_config_from_json_text(buf.str());
}

}  // namespace testdg
