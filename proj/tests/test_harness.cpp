#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <vector>

#include "doctest.h"
#include "test_support.hpp"
#include "testdg/checkpoint.hpp"
#include "testdg/harness.hpp"
#include "testdg/report.hpp"
#include "testdg/stream.hpp"

using namespace testdg;

namespace {

ModelConfig probe_model() {
  ModelConfig cfg;
  cfg.input_dim = 8;
  cfg.hidden_width = 12;
  cfg.feature_dim = 6;
  cfg.encoder_layers = 2;
  cfg.num_classes = 3;
  cfg.bottleneck = 3;
  cfg.domain_dim = 4;
  cfg.extractor_hidden = 6;
  return cfg;
}

BaseTask probe_task() {
  BaseTask task;
  task.num_classes = 3;
  task.input_dim = 8;
  task.train_size = 512;
  task.test_size = 256;
  task.seed = 7;
  return task;
}

PretrainOptions probe_pretrain() {
  PretrainOptions opt;
  opt.epochs = 10;
  opt.lr = 3e-3;
  opt.batch_size = 32;
  return opt;
}

AdaptationConfig probe_adapt() {
  AdaptationConfig cfg;
  cfg.queue_capacity = 16;
  cfg.num_prototypes = 4;
  cfg.proto_steps = 3;
  return cfg;
}

const PretrainResult& shared_pretrain() {
  static PretrainResult result = [] {
    PretrainResult pr = pretrain_source(probe_task(), probe_model(), probe_pretrain(), 5);
    if (!pr.encoder) throw std::runtime_error("pretrain failed: " + pr.diagnostic);
    return pr;
  }();
  return result;
}

ScenarioConfig small_scenario() {
  ScenarioConfig sc;
  sc.name = "small";
  sc.task = probe_task();
  sc.batch_size = 8;
  sc.entries.push_back({DomainSpec{"noise", TransformFamily::additive_noise, 3, 1}, 4});
  sc.entries.push_back({DomainSpec{"contrast", TransformFamily::affine_contrast, 4, 2}, 4});
  return sc;
}

RunReport small_report() {
  return run_scenario(*shared_pretrain().encoder, small_scenario(), probe_adapt(),
                      resolve_baseline("full-testdg"), 11);
}

}  // namespace

TEST_SUITE("harness") {
  TEST_CASE("pretraining reaches the source error bar") {
    const PretrainResult& pr = shared_pretrain();
    CHECK(pr.converged);
    CHECK_FALSE(pr.diverged);
    CHECK(pr.source_error <= 0.05);
    CHECK_FALSE(pr.loss_trace.empty());
    for (double l : pr.loss_trace) CHECK(std::isfinite(l));
  }

  TEST_CASE("two pretraining seeds differ but both converge") {
    PretrainResult other = pretrain_source(probe_task(), probe_model(), probe_pretrain(), 6);
    REQUIRE(other.encoder);
    CHECK(other.converged);
    CHECK_FALSE(other.encoder->params().bit_equal_values(
        shared_pretrain().encoder->params().snapshot_values()));
  }

  TEST_CASE("checkpoint round trip is bit-identical") {
    const EncoderNet& enc = *shared_pretrain().encoder;
    std::string text = checkpoint_to_json_text(enc);
    auto back = checkpoint_from_json_text(text);
    CHECK(back->params().bit_equal_values(enc.params().snapshot_values()));
    CHECK(back->config().input_dim == enc.config().input_dim);
    CHECK(back->config().num_classes == enc.config().num_classes);

    // identical evaluation behaviour on a fixed batch
    LabeledBatch batch = sample_source(probe_task(), 16);
    Var f1 = enc.features(constant(batch.inputs), nullptr, false);
    Var f2 = back->features(constant(batch.inputs), nullptr, false);
    CHECK(classify(enc, f1)->value.bit_equal(classify(*back, f2)->value));
  }

  TEST_CASE("checkpoint file round trip") {
    const EncoderNet& enc = *shared_pretrain().encoder;
    const std::string path = "checkpoint_test_tmp.json";
    save_checkpoint(enc, path);
    auto back = load_checkpoint(path);
    CHECK(back->params().bit_equal_values(enc.params().snapshot_values()));
    std::remove(path.c_str());
  }

  TEST_CASE("checkpoint rejects corrupted payloads") {
    std::string text = checkpoint_to_json_text(*shared_pretrain().encoder);
    CHECK_THROWS_AS(checkpoint_from_json_text("{}"), std::invalid_argument);
    std::string renamed = text;
    auto pos = renamed.find("enc.layer0");
    REQUIRE(pos != std::string::npos);
    renamed.replace(pos, 10, "enc.bogus0");
    CHECK_THROWS_AS(checkpoint_from_json_text(renamed), std::invalid_argument);
  }

  TEST_CASE("baseline resolution and the ablation matrix") {
    BaselineSpec src = resolve_baseline("source-only");
    CHECK(src.kind == BaselineKind::source_only);
    BaselineSpec self = resolve_baseline("self-training-only");
    CHECK(self.flags.use_self_training);
    CHECK_FALSE(self.flags.use_invariance);
    CHECK_FALSE(self.flags.use_discrimination);
    CHECK_FALSE(self.flags.use_amplifier);
    BaselineSpec full = resolve_baseline("full-testdg");
    CHECK(full.flags.use_self_training);
    CHECK(full.flags.use_invariance);
    CHECK(full.flags.use_discrimination);
    CHECK(full.flags.use_greedy_selection);
    CHECK(full.flags.use_prototype_update);
    CHECK(full.flags.use_amplifier);
    BaselineSpec noamp = resolve_baseline("no-amplifier");
    CHECK_FALSE(noamp.flags.use_amplifier);
    CHECK(noamp.flags.use_prototype_update);
    CHECK_THROWS_AS(resolve_baseline("bogus"), std::invalid_argument);

    auto matrix = ablation_matrix();
    REQUIRE(matrix.size() == 7);
    CHECK(matrix.front().name == "source-only");
    CHECK(matrix.back().name == "no-amplifier");
    bool has_full = false;
    for (const auto& row : matrix) has_full |= row.name == "full-testdg";
    CHECK(has_full);
  }

  TEST_CASE("run_scenario produces a consistent report") {
    RunReport report = small_report();
    CHECK(report.scenario_name == "small");
    CHECK(report.baseline == "full-testdg");
    CHECK(report.seed == 11);
    REQUIRE(report.batches.size() == 8);
    REQUIRE(report.per_domain.size() == 2);
    CHECK(report.per_domain[0].domain == "noise");
    CHECK(report.per_domain[1].domain == "contrast");

    std::size_t correct = 0, total = 0;
    for (const auto& rec : report.batches) {
      CHECK(rec.total == 8);
      correct += rec.correct;
      total += rec.total;
    }
    double recomputed = 1.0 - static_cast<double>(correct) / static_cast<double>(total);
    CHECK(report.mean_error == doctest::Approx(recomputed).epsilon(1e-12));

    // batch-weighted average of per-domain errors reproduces the mean error
    double weighted = 0.0;
    std::size_t batch_total = 0;
    for (const auto& row : report.per_domain) {
      weighted += row.error * static_cast<double>(row.samples);
      batch_total += row.samples;
    }
    CHECK(report.mean_error ==
          doctest::Approx(weighted / static_cast<double>(batch_total)).epsilon(1e-12));
    CHECK_FALSE(report.has_generalization);
    CHECK(report.wall_clock_seconds > 0.0);
  }

  TEST_CASE("source-only on the identity domain matches the source error") {
    ScenarioConfig sc;
    sc.name = "identity";
    sc.task = probe_task();
    sc.batch_size = 16;
    sc.entries.push_back({DomainSpec{"clean", TransformFamily::additive_noise, 0, 1}, 16});
    RunReport report = run_scenario(*shared_pretrain().encoder, sc, probe_adapt(),
                                    resolve_baseline("source-only"), 3);
    CHECK(std::abs(report.mean_error - shared_pretrain().source_error) < 0.05);
  }

  TEST_CASE("source-only never changes parameters while adapting baselines do") {
    auto snapshot = shared_pretrain().encoder->params().snapshot_values();
    RunReport report = run_scenario(*shared_pretrain().encoder, small_scenario(), probe_adapt(),
                                    resolve_baseline("source-only"), 4);
    CHECK(shared_pretrain().encoder->params().bit_equal_values(snapshot));
    for (const auto& rec : report.batches) {
      CHECK(rec.loss_self == 0.0);
      CHECK(rec.loss_dis == 0.0);
    }

    RunReport adapted = run_scenario(*shared_pretrain().encoder, small_scenario(), probe_adapt(),
                                     resolve_baseline("full-testdg"), 4);
    CHECK(shared_pretrain().encoder->params().bit_equal_values(snapshot));
    bool any_loss = false;
    for (const auto& rec : adapted.batches) any_loss |= rec.loss_self != 0.0;
    CHECK(any_loss);
  }

  TEST_CASE("detection stats count true changes") {
    RunReport report = small_report();
    CHECK(report.detection.true_changes == 1);  // noise -> contrast
    CHECK(report.detection.detections == report.detection.hits +
                                             (report.detection.detections -
                                              report.detection.hits));
    CHECK(report.detection.precision >= 0.0);
    CHECK(report.detection.precision <= 1.0);
    CHECK(report.detection.recall >= 0.0);
    CHECK(report.detection.recall <= 1.0);
  }

  TEST_CASE("report json round trip is exact") {
    RunReport report = small_report();
    std::string text = report_to_json_text(report);
    RunReport back = report_from_json_text(text);
    CHECK(report_to_json_text(back) == text);
    CHECK(back.mean_error == report.mean_error);
    CHECK(back.seed == report.seed);
    REQUIRE(back.batches.size() == report.batches.size());
    for (std::size_t i = 0; i < back.batches.size(); ++i) {
      CHECK(back.batches[i].confidence == report.batches[i].confidence);
      CHECK(back.batches[i].loss_step2 == report.batches[i].loss_step2);
      CHECK(back.batches[i].domain_tag == report.batches[i].domain_tag);
    }
    CHECK(back.config_echo == report.config_echo);
  }

  TEST_CASE("csv has one row per batch plus a header") {
    RunReport report = small_report();
    std::string csv = report_to_csv_text(report);
    std::size_t lines = 0;
    for (char c : csv) lines += c == '\n';
    CHECK(lines == report.batches.size() + 1);
    std::istringstream is(csv);
    std::string header;
    std::getline(is, header);
    CHECK(header.rfind("index,domain,", 0) == 0);
  }

  TEST_CASE("canonical json excludes timings and is run-to-run identical") {
    RunReport a = run_scenario(*shared_pretrain().encoder, small_scenario(), probe_adapt(),
                               resolve_baseline("full-testdg"), 21);
    RunReport b = run_scenario(*shared_pretrain().encoder, small_scenario(), probe_adapt(),
                               resolve_baseline("full-testdg"), 21);
    CHECK(report_to_json_text(a) == report_to_json_text(b));
    CHECK(report_to_json_text(a, true) != report_to_json_text(a, false));
  }

  TEST_CASE("generalization table empty when no held-out domains") {
    RunReport report = small_report();
    CHECK(report.generalization.empty());
    CHECK_FALSE(report.has_generalization);
  }

  TEST_CASE("generalization evaluates held-out domains with frozen parameters") {
    ScenarioConfig sc = small_scenario();
    sc.name = "loo";
    sc.mode = ScenarioMode::leave_one_out;
    sc.held_out.push_back(DomainSpec{"held", TransformFamily::coordinate_dropout, 3, 9});
    RunReport report = run_generalization(*shared_pretrain().encoder, sc, probe_adapt(),
                                          resolve_baseline("full-testdg"), 13);
    CHECK(report.has_generalization);
    REQUIRE(report.generalization.size() == 1);
    CHECK(report.generalization[0].domain == "held");
    CHECK(report.generalization[0].samples > 0);
    CHECK(report.generalization_mean_error >= 0.0);
    CHECK(report.generalization_mean_error <= 1.0);

    // determinism of the frozen pass
    RunReport again = run_generalization(*shared_pretrain().encoder, sc, probe_adapt(),
                                         resolve_baseline("full-testdg"), 13);
    CHECK(report_to_json_text(again) == report_to_json_text(report));
  }

  TEST_CASE("harness config json round trip and validation") {
    HarnessConfig cfg;
    cfg.model = probe_model();
    cfg.adapt = probe_adapt();
    cfg.pretrain = probe_pretrain();
    std::string text = harness_config_to_json_text(cfg);
    HarnessConfig back = harness_config_from_json_text(text);
    CHECK(back.model.input_dim == cfg.model.input_dim);
    CHECK(back.model.feature_dim == cfg.model.feature_dim);
    CHECK(back.adapt.queue_capacity == cfg.adapt.queue_capacity);
    CHECK(back.adapt.lr_step2 == cfg.adapt.lr_step2);
    CHECK(back.pretrain.epochs == cfg.pretrain.epochs);
    CHECK(harness_config_to_json_text(back) == text);

    std::string unknown = text;
    unknown.insert(unknown.find("\"model\""), "\"surprise\": 3, ");
    CHECK_THROWS_AS(harness_config_from_json_text(unknown), std::invalid_argument);
  }

  TEST_CASE("config echo reproduces the effective settings") {
    RunReport report = small_report();
    CHECK(report.config_echo.find("\"baseline\"") != std::string::npos);
    CHECK(report.config_echo.find("full-testdg") != std::string::npos);
    CHECK(report.config_echo.find("\"scenario\"") != std::string::npos);
  }
}
