#ifndef TESTDG_ADAPTATION_HPP
#define TESTDG_ADAPTATION_HPP

#include <cstdint>
#include <deque>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "testdg/kernels.hpp"
#include "testdg/model.hpp"
#include "testdg/optim.hpp"
#include "testdg/rng.hpp"
#include "testdg/stream.hpp"

namespace testdg {

// FIFO of domain embeddings (with their source inputs and sample ids) from
// which prototypes are selected on a detected domain change.
class DomainQueue {
 public:
  struct Entry {
    std::vector<double> embedding;
    std::vector<double> input;
    std::int64_t id = 0;
  };

  explicit DomainQueue(std::size_t capacity);
  void push(std::span<const double> embedding, std::span<const double> input, std::int64_t id);
  void clear() { entries_.clear(); }
  std::size_t size() const { return entries_.size(); }
  std::size_t capacity() const { return capacity_; }
  bool empty() const { return entries_.empty(); }
  const std::deque<Entry>& entries() const { return entries_; }
  EmbeddingSet embeddings() const;  // queue order, ids preserved

 private:
  std::size_t capacity_;
  std::deque<Entry> entries_;
};

// Prototypes of the previous domain: an optimizable [n, domain_dim] matrix,
// the inputs each prototype came from, and the kernel bandwidth frozen at
// selection time.
struct PrototypeState {
  Var matrix;               // parameter leaf, [n, domain_dim]
  RealArray source_inputs;  // [n, input_dim]
  KernelConfig kernel;      // gamma frozen at selection
  bool padded = false;      // selection had fewer candidates than n
  ParamSet params;

  std::size_t count() const { return matrix ? matrix->value.extent(0) : 0; }
  EmbeddingSet embedding_set() const;
};

struct DetectorState {
  double last_confidence = 0.0;
  double threshold = 0.1;  // tau, in (0, 1)
  bool initialized = false;
};

// Mean over the batch of the max-class probability.
double batch_confidence(const RealArray& probabilities);

// True iff |conf_cur - last| > tau; last_confidence always updates.
bool detect_change(DetectorState& det, double conf_cur);

struct AdaptationConfig {
  double lr_step1 = 1e-3;
  OptMode opt_step1 = OptMode::adaptive_moment;
  double lr_step2 = 1e-3;
  OptMode opt_step2 = OptMode::adaptive_moment;
  double lr_proto = 0.05;
  OptMode opt_proto = OptMode::sgd;
  double lambda_inv = 1.0;
  double momentum = 0.99;          // mu, EMA teacher
  double threshold = 0.1;          // tau, detection
  // Classify on amplified features. Off keeps the classifier (and its
  // self-training gradients) on the plain encoder output while the extractor
  // still reads the amplified path, so adversarial amplifier updates cannot
  // leak into predictions.
  bool amplified_prediction = false;
  std::size_t queue_capacity = 64; // m (paper-scale 256 selectable)
  std::size_t num_prototypes = 16; // n (paper-scale 40 selectable)
  std::size_t proto_steps = 5;     // k
  double augment_noise = 0.1;
  double augment_rotation_deg = 10.0;
  std::size_t augment_copies = 2;
  std::uint64_t seed = 1;
};

void validate(const AdaptationConfig& cfg);  // throws std::invalid_argument

// Component switches mirroring the ablation rows; everything on is the full
// method, everything off is pure self-training only when use_self_training
// stays set.
struct AblationFlags {
  bool use_amplifier = true;
  bool use_self_training = true;
  bool use_invariance = true;
  bool use_discrimination = true;
  bool use_greedy_selection = true;  // off: seeded uniform pick from queue
  bool use_prototype_update = true;
};

// Per-batch trace consumed by the harness.
struct BatchRecord {
  std::size_t index = 0;
  std::string domain_tag;  // filled by the harness
  double confidence = 0.0;
  bool detected = false;
  bool truth_change = false;  // filled by the harness
  double loss_dis = 0.0;
  double loss_self = 0.0;
  double loss_inv = 0.0;
  double loss_step2 = 0.0;
  double proto_residual = 0.0;
  bool selection_padded = false;
  // Diagnostics for the prototype-update direction check: MMD^2 between the
  // prototypes' re-embedded source inputs and the updated / pre-update
  // prototype matrices.
  double proto_mmd_updated = 0.0;
  double proto_mmd_original = 0.0;
  std::size_t correct = 0;  // only when labels were supplied
  std::size_t total = 0;
};

// The online engine. Owns the pretrained encoder plus the freshly initialized
// amplifier, extractor, discriminator and EMA teacher. One adapt_batch call
// runs a full iteration: embed + enqueue, detect, select on change, step1,
// step2, teacher EMA, prototype update.
class AdaptationEngine {
 public:
  AdaptationEngine(std::unique_ptr<EncoderNet> encoder, const AdaptationConfig& cfg,
                   const AblationFlags& flags);

  // Inference only; no state is touched.
  RealArray predict(const RealArray& inputs) const;

  // Full online iteration. Labels, when given, populate the correctness
  // fields of the record; they never influence adaptation.
  BatchRecord adapt_batch(const RealArray& inputs, const std::vector<int>* labels);

  struct Step2Result {
    RealArray predictions;       // student probabilities, pre-update forward
    double loss_self = 0.0;
    double loss_inv = 0.0;
    double loss_total = 0.0;
    RealArray embeddings_before; // batch domain embeddings under pre-step2 parameters
  };

  // Exposed for contract tests; adapt_batch composes these.
  void cold_start(const RealArray& first_batch_inputs);
  void on_domain_change();
  double step1(const RealArray& inputs);
  Step2Result step2(const RealArray& inputs);
  double update_prototypes(const RealArray& f_before, const RealArray& f_after);

  bool cold_started() const { return proto_.has_value(); }
  const PrototypeState& prototypes() const;
  const DomainQueue& queue() const { return queue_; }
  const DetectorState& detector() const { return detector_; }
  EncoderNet& encoder() { return *encoder_; }
  AmplifierNet& amplifier() { return *amplifier_; }
  ExtractorNet& extractor() { return *extractor_; }
  DiscriminatorNet& discriminator() { return *discriminator_; }
  const TeacherState& teacher() const { return *teacher_; }
  const AdaptationConfig& config() const { return cfg_; }
  const AblationFlags& flags() const { return flags_; }
  std::size_t batches_seen() const { return batch_counter_; }

  // Domain embeddings of a batch under the current parameters (value level).
  EmbeddingSet embed(const RealArray& inputs, std::int64_t first_source_id = 0) const;

 private:
  Var features_graph(const Var& x) const;
  Var prediction_graph(const Var& x) const;
  bool split_prediction_path() const;
  void set_prototypes(const RealArray& matrix, const RealArray& inputs, KernelConfig kernel,
                      bool padded);
  std::vector<std::size_t> pair_subsample(std::size_t available, std::size_t wanted, Rng& rng) const;

  AdaptationConfig cfg_;
  AblationFlags flags_;
  std::unique_ptr<EncoderNet> encoder_;
  std::unique_ptr<AmplifierNet> amplifier_;
  std::unique_ptr<ExtractorNet> extractor_;
  std::unique_ptr<DiscriminatorNet> discriminator_;
  std::unique_ptr<TeacherState> teacher_;
  DomainQueue queue_;
  DetectorState detector_;
  std::optional<PrototypeState> proto_;
  Rng rng_;
  std::size_t batch_counter_ = 0;
  std::int64_t sample_counter_ = 0;
};

}  // namespace testdg

#endif
