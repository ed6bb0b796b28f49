#ifndef TESTDG_MODEL_HPP
#define TESTDG_MODEL_HPP

#include <cstdint>
#include <memory>
#include <vector>

#include "testdg/autodiff.hpp"
#include "testdg/kernels.hpp"
#include "testdg/optim.hpp"
#include "testdg/rng.hpp"

namespace testdg {

struct ModelConfig {
  std::size_t input_dim = 16;
  std::size_t hidden_width = 64;
  std::size_t feature_dim = 32;
  std::size_t encoder_layers = 3;
  std::size_t num_classes = 4;
  std::size_t bottleneck = 8;           // amplifier adapter width
  std::size_t domain_dim = 16;          // domain embedding width
  std::size_t extractor_hidden = 32;
  std::size_t discriminator_depth = 1;  // 1 = single linear + sigmoid
  std::size_t discriminator_hidden = 16;

  // Output width of encoder layer `i` (the last layer emits feature_dim).
  std::size_t layer_width(std::size_t i) const {
    return i + 1 == encoder_layers ? feature_dim : hidden_width;
  }
  std::size_t layer_input(std::size_t i) const {
    return i == 0 ? input_dim : layer_width(i - 1);
  }
};

struct LinearRef {
  Var W;  // [in, out]
  Var b;  // [out]
};

class AmplifierNet;

// Fully connected encoder with GELU activations plus a linear classification
// head. Owns its parameters; forward passes build fresh graph nodes over the
// persistent leaves.
class EncoderNet {
 public:
  EncoderNet(const ModelConfig& cfg, Rng rng);

  // Features of a [B, input_dim] batch. When amplifier_on, each layer output
  // gets the residual adapter contribution of `amp` (which may not be null).
  Var features(const Var& x, const AmplifierNet* amp, bool amplifier_on) const;
  Var logits(const Var& features) const;

  // Frozen deep copy sharing nothing with this net (used for the EMA teacher).
  std::unique_ptr<EncoderNet> clone_frozen() const;
  // Trainable deep copy with fresh optimizer state.
  std::unique_ptr<EncoderNet> clone() const;

  ParamSet& params() { return params_; }
  const ParamSet& params() const { return params_; }
  const ModelConfig& config() const { return cfg_; }

 private:
  EncoderNet(const ModelConfig& cfg) : cfg_(cfg) {}
  ModelConfig cfg_;
  std::vector<LinearRef> layers_;
  LinearRef head_;
  ParamSet params_;
};

// Per-encoder-layer residual adapter: down-projection, GELU, up-projection.
// Up-projections start at zero so an untrained amplifier is an exact no-op.
class AmplifierNet {
 public:
  AmplifierNet(const ModelConfig& cfg, Rng rng);
  Var apply(std::size_t layer, const Var& h) const;  // residual term only
  ParamSet& params() { return params_; }
  const ParamSet& params() const { return params_; }

 private:
  std::vector<LinearRef> down_, up_;
  ParamSet params_;
};

// Two-layer ReLU MLP mapping features to domain embeddings.
class ExtractorNet {
 public:
  ExtractorNet(const ModelConfig& cfg, Rng rng);
  Var forward(const Var& features) const;  // [B, domain_dim]
  ParamSet& params() { return params_; }
  const ParamSet& params() const { return params_; }

 private:
  LinearRef first_, second_;
  ParamSet params_;
};

// Domain discriminator: probability that an embedding comes from the current
// domain. Single linear by default; deeper variants use GELU hidden layers.
class DiscriminatorNet {
 public:
  DiscriminatorNet(const ModelConfig& cfg, Rng rng);
  Var probability(const Var& embeddings) const;  // [B, 1], in (0, 1)
  ParamSet& params() { return params_; }
  const ParamSet& params() const { return params_; }

 private:
  std::vector<LinearRef> layers_;
  ParamSet params_;
};

// EMA copy of the encoder (+ head) that produces pseudo-labels.
class TeacherState {
 public:
  TeacherState(const EncoderNet& student, double momentum);
  const EncoderNet& net() const { return *net_; }
  double momentum() const { return momentum_; }
  void set_momentum(double mu);

 private:
  std::unique_ptr<EncoderNet> net_;
  double momentum_;
  friend void ema_update(TeacherState& teacher, const EncoderNet& student, double mu);
};

// theta_t <- mu * theta_t + (1 - mu) * theta_s for every teacher parameter.
void ema_update(TeacherState& teacher, const EncoderNet& student);
void ema_update(TeacherState& teacher, const EncoderNet& student, double mu);

// Softmax class probabilities for a feature batch.
Var classify(const EncoderNet& enc, const Var& features);

// Value-level embedding extraction; source ids are batch indices offset by
// `first_source_id`.
EmbeddingSet extract_domain_embeddings(const ExtractorNet& ext, const RealArray& features_value,
                                       std::int64_t first_source_id = 0);
EmbeddingSet embedding_set_from(const RealArray& matrix, std::int64_t first_source_id);

// Binary cross-entropy separating current embeddings (label 1) from previous
// prototypes (label 0). Both inputs must hold the same number of rows;
// discriminator outputs are clamped to [1e-7, 1 - 1e-7].
Var discrimination_loss(const DiscriminatorNet& disc, const Var& current,
                        const Var& prototypes);

// Mean L1 distance over row pairs (current_i, paired_prototypes_i); the
// prototypes enter as constants.
Var invariance_loss(const Var& current, const RealArray& paired_prototypes);

// Per-sample self-training loss: -(1/C) sum_c teacher_c * log(student_c),
// with student probabilities clamped to >= 1e-12.
double self_training_loss(std::span<const double> student_probs,
                          std::span<const double> teacher_probs);

// Batch-mean graph version of the same loss.
Var self_training_loss(const Var& student_probs, const RealArray& teacher_probs);

constexpr double kProbClampLo = 1e-7;
constexpr double kLogClamp = 1e-12;

}  // namespace testdg

#endif
