#ifndef TESTDG_HARNESS_HPP
#define TESTDG_HARNESS_HPP

#include <memory>
#include <string>
#include <vector>

#include "testdg/adaptation.hpp"
#include "testdg/model.hpp"
#include "testdg/report.hpp"
#include "testdg/stream.hpp"

namespace testdg {

enum class BaselineKind { source_only, self_training_only, full_testdg, ablation };

struct BaselineSpec {
  BaselineKind kind = BaselineKind::full_testdg;
  AblationFlags flags;
  std::string name = "full-testdg";
};

// Known names: source-only, self-training-only, full-testdg, no-amplifier,
// self-inv, self-inv-dis, self-inv-dis-select. Throws on anything else.
BaselineSpec resolve_baseline(const std::string& name);
// The component ladder plus the amplifier-off row, in evaluation order.
std::vector<BaselineSpec> ablation_matrix();

struct PretrainOptions {
  std::size_t epochs = 20;
  double lr = 1e-3;
  std::size_t batch_size = 64;
};

struct PretrainResult {
  std::unique_ptr<EncoderNet> encoder;
  double source_error = 1.0;   // on held-out clean data
  std::vector<double> loss_trace;  // per-epoch mean loss
  bool converged = false;      // source_error <= 0.05
  bool diverged = false;
  std::string diagnostic;
};

// Supervised source fit of encoder + head on clean task data.
PretrainResult pretrain_source(const BaseTask& task, const ModelConfig& mcfg,
                               const PretrainOptions& opt, std::uint64_t seed);

// Online protocol over the scenario stream: predict, score, then adapt
// (source-only never adapts). The seed overrides both the stream seed and the
// engine seed so one number pins the whole run.
RunReport run_scenario(const EncoderNet& pretrained, const ScenarioConfig& scenario,
                       const AdaptationConfig& acfg, const BaselineSpec& baseline,
                       std::uint64_t seed);

// run_scenario plus a frozen evaluation pass over the scenario's held-out
// domains; no parameter changes during that pass.
RunReport run_generalization(const EncoderNet& pretrained, const ScenarioConfig& scenario,
                             const AdaptationConfig& acfg, const BaselineSpec& baseline,
                             std::uint64_t seed);

struct HarnessConfig {
  ModelConfig model;
  AdaptationConfig adapt;
  PretrainOptions pretrain;
};

HarnessConfig load_harness_config(const std::string& path);
HarnessConfig harness_config_from_json_text(const std::string& text);
std::string harness_config_to_json_text(const HarnessConfig& cfg);

constexpr int kConfigSchemaVersion = 1;

}  // namespace testdg

#endif
