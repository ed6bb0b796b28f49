#ifndef TESTDG_STREAM_HPP
#define TESTDG_STREAM_HPP

#include <cstdint>
#include <string>
#include <vector>

#include "testdg/array.hpp"
#include "testdg/rng.hpp"

namespace testdg {

// Gaussian-cluster classification task: C well separated class means in R^d
// with shared isotropic noise. Stands in for a clean source dataset.
struct BaseTask {
  std::size_t num_classes = 4;
  std::size_t input_dim = 16;
  double cluster_sigma = 0.3;
  std::size_t train_size = 4096;
  std::size_t test_size = 1024;
  std::uint64_t seed = 7;
};

// Class means derived deterministically from the task seed; rejection keeps
// every pair at least min_separation apart.
RealArray class_means(const BaseTask& task);

struct LabeledBatch {
  RealArray inputs;         // [n, input_dim]
  std::vector<int> labels;  // values in [0, num_classes)
};

LabeledBatch sample_source(const BaseTask& task, std::size_t n, Rng& rng);
LabeledBatch sample_source(const BaseTask& task, std::size_t n);  // rng from task seed
// All n samples share the given label (used by statistical checks).
LabeledBatch sample_class(const BaseTask& task, int label, std::size_t n, Rng& rng);

enum class TransformFamily {
  additive_noise,
  coordinate_rotation,
  anisotropic_scale,
  affine_contrast,
  coordinate_dropout,
};

TransformFamily family_from_string(const std::string& s);  // throws on unknown
std::string family_to_string(TransformFamily f);

// One test domain: a transform family at a severity level. Severity 0 is the
// identity for every family. Derived parameters (rotation planes, scale signs,
// contrast direction) depend only on (family, severity, seed).
struct DomainSpec {
  std::string name;
  TransformFamily family = TransformFamily::additive_noise;
  int severity = 1;  // 0..5
  std::uint64_t seed = 0;
};

// Severity ramp constants, exposed for the scenario reference docs.
double noise_sigma(int severity);            // 0.30 * s
double rotation_angle(int severity);         // radians, 12 degrees * s
double scale_delta(int severity);            // 0.19 * s
double contrast_gain(int severity);          // 1 - 0.15 * s, compression
double contrast_offset(int severity);        // 0.20 * s
double dropout_fraction(int severity);       // 0.13 * s

// Applies the transform to inputs only; labels are copied through. The rng
// drives the stochastic families (noise, dropout); deterministic families
// ignore it.
LabeledBatch apply_domain(const DomainSpec& spec, const LabeledBatch& batch, Rng& rng);

enum class ScenarioMode { sequential, gradual, leave_one_out };

ScenarioMode mode_from_string(const std::string& s);
std::string mode_to_string(ScenarioMode m);

struct ScenarioEntry {
  DomainSpec spec;
  std::size_t batches = 1;  // per severity step in gradual mode
};

struct ScenarioConfig {
  std::string name = "scenario";
  BaseTask task;
  ScenarioMode mode = ScenarioMode::sequential;
  std::size_t batch_size = 16;
  std::size_t rounds = 1;
  std::vector<ScenarioEntry> entries;
  std::vector<DomainSpec> held_out;
  std::uint64_t seed = 1;
};

struct StreamBatch {
  LabeledBatch data;
  std::string domain_tag;
  bool change_flag = false;  // ground truth, withheld from the engine
  std::size_t index = 0;
};

// Deterministic random-access view over the scenario's batch sequence. The
// gradual mode expands each entry into the severity trace 1,2,3,4,5,4,3,2,1;
// rounds repeat the whole entry list cyclically. Change flags mark the first
// batch of every segment whose family differs from its predecessor's.
class ScenarioStream {
 public:
  struct Segment {
    DomainSpec spec;
    std::size_t first_batch = 0;
    std::size_t batches = 0;
    bool change_at_start = false;
  };

  ScenarioStream(ScenarioConfig scenario);

  std::size_t total_batches() const { return total_; }
  StreamBatch batch(std::size_t index) const;  // pure per (scenario, seed)
  const std::vector<Segment>& segments() const { return segments_; }
  const ScenarioConfig& scenario() const { return scenario_; }

 private:
  ScenarioConfig scenario_;
  std::vector<Segment> segments_;
  std::size_t total_ = 0;
};

// Deterministic evaluation batches for one domain (held-out protocol); the
// stream index keeps repeated draws independent.
LabeledBatch eval_batch(const BaseTask& task, const DomainSpec& spec, std::size_t batch_size,
                        std::uint64_t seed, std::size_t index);

// Scenario files are versioned JSON; unknown fields are rejected.
ScenarioConfig load_scenario(const std::string& path);
void save_scenario(const ScenarioConfig& config, const std::string& path);
ScenarioConfig scenario_from_json_text(const std::string& text);
std::string scenario_to_json_text(const ScenarioConfig& config);

constexpr int kScenarioSchemaVersion = 1;

}  // namespace testdg

#endif
