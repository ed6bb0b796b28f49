#include "testdg/model.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

namespace testdg {
namespace {

Var make_weight(std::size_t in, std::size_t out, double stddev, Rng& rng) {
  RealArray w({in, out});
  for (std::size_t i = 0; i < w.numel(); ++i) w.data()[i] = stddev * rng.normal();
  return parameter(w);
}

Var make_bias(std::size_t out) { return parameter(RealArray({out})); }

LinearRef make_linear(std::size_t in, std::size_t out, double stddev, Rng& rng) {
  return LinearRef{make_weight(in, out, stddev, rng), make_bias(out)};
}

double he_std(std::size_t fan_in) { return std::sqrt(2.0 / static_cast<double>(fan_in)); }

Var affine(const Var& x, const LinearRef& lin) { return add(matmul(x, lin.W), lin.b); }

void register_linear(ParamSet& params, const std::string& prefix, const LinearRef& lin) {
  params.add(prefix + ".W", lin.W);
  params.add(prefix + ".b", lin.b);
}

}  // namespace

EncoderNet::EncoderNet(const ModelConfig& cfg, Rng rng) : cfg_(cfg) {
  if (cfg.encoder_layers == 0) throw std::invalid_argument("encoder needs at least one layer");
  for (std::size_t i = 0; i < cfg.encoder_layers; ++i) {
    Rng layer_rng = rng.split("enc.layer" + std::to_string(i));
    layers_.push_back(make_linear(cfg.layer_input(i), cfg.layer_width(i),
                                  he_std(cfg.layer_input(i)), layer_rng));
    register_linear(params_, "enc.layer" + std::to_string(i), layers_.back());
  }
  Rng head_rng = rng.split("enc.head");
  head_ = make_linear(cfg.feature_dim, cfg.num_classes,
                      std::sqrt(1.0 / static_cast<double>(cfg.feature_dim)), head_rng);
  register_linear(params_, "enc.head", head_);
}

Var EncoderNet::features(const Var& x, const AmplifierNet* amp, bool amplifier_on) const {
  if (amplifier_on && amp == nullptr)
    throw std::invalid_argument("amplifier_on requires an amplifier");
  Var h = x;
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    h = gelu(affine(h, layers_[i]));
    if (amplifier_on) h = add(h, amp->apply(i, h));
  }
  return h;
}

Var EncoderNet::logits(const Var& features) const { return affine(features, head_); }

std::unique_ptr<EncoderNet> EncoderNet::clone_frozen() const {
  std::unique_ptr<EncoderNet> copy(new EncoderNet(cfg_));
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    copy->layers_.push_back(LinearRef{parameter(layers_[i].W->value), parameter(layers_[i].b->value)});
    register_linear(copy->params_, "enc.layer" + std::to_string(i), copy->layers_.back());
  }
  copy->head_ = LinearRef{parameter(head_.W->value), parameter(head_.b->value)};
  register_linear(copy->params_, "enc.head", copy->head_);
  copy->params_.set_requires_grad(false);
  return copy;
}

std::unique_ptr<EncoderNet> EncoderNet::clone() const {
  std::unique_ptr<EncoderNet> copy = clone_frozen();
  copy->params().set_requires_grad(true);
  return copy;
}

AmplifierNet::AmplifierNet(const ModelConfig& cfg, Rng rng) {
  for (std::size_t i = 0; i < cfg.encoder_layers; ++i) {
    std::size_t width = cfg.layer_width(i);
    Rng layer_rng = rng.split("amp.layer" + std::to_string(i));
    down_.push_back(make_linear(width, cfg.bottleneck, he_std(width), layer_rng));
    // Zero up-projection: the residual starts as an exact no-op.
    up_.push_back(LinearRef{parameter(RealArray({cfg.bottleneck, width})), make_bias(width)});
    register_linear(params_, "amp.layer" + std::to_string(i) + ".down", down_.back());
    register_linear(params_, "amp.layer" + std::to_string(i) + ".up", up_.back());
  }
}

Var AmplifierNet::apply(std::size_t layer, const Var& h) const {
  if (layer >= down_.size()) throw std::invalid_argument("amplifier layer out of range");
  return affine(gelu(affine(h, down_[layer])), up_[layer]);
}

ExtractorNet::ExtractorNet(const ModelConfig& cfg, Rng rng) {
  Rng first_rng = rng.split("ext.first");
  Rng second_rng = rng.split("ext.second");
  first_ = make_linear(cfg.feature_dim, cfg.extractor_hidden, he_std(cfg.feature_dim), first_rng);
  second_ = make_linear(cfg.extractor_hidden, cfg.domain_dim, he_std(cfg.extractor_hidden),
                        second_rng);
  register_linear(params_, "ext.first", first_);
  register_linear(params_, "ext.second", second_);
}

Var ExtractorNet::forward(const Var& features) const {
  return affine(relu(affine(features, first_)), second_);
}

DiscriminatorNet::DiscriminatorNet(const ModelConfig& cfg, Rng rng) {
  if (cfg.discriminator_depth == 0)
    throw std::invalid_argument("discriminator needs at least one layer");
  std::size_t in = cfg.domain_dim;
  for (std::size_t i = 0; i + 1 < cfg.discriminator_depth; ++i) {
    Rng layer_rng = rng.split("disc.layer" + std::to_string(i));
    layers_.push_back(make_linear(in, cfg.discriminator_hidden, he_std(in), layer_rng));
    register_linear(params_, "disc.layer" + std::to_string(i), layers_.back());
    in = cfg.discriminator_hidden;
  }
  Rng out_rng = rng.split("disc.out");
  layers_.push_back(make_linear(in, 1, std::sqrt(1.0 / static_cast<double>(in)), out_rng));
  register_linear(params_, "disc.out", layers_.back());
}

Var DiscriminatorNet::probability(const Var& embeddings) const {
  Var h = embeddings;
  for (std::size_t i = 0; i + 1 < layers_.size(); ++i) h = gelu(affine(h, layers_[i]));
  return clamp(sigmoid(affine(h, layers_.back())), kProbClampLo, 1.0 - kProbClampLo);
}

TeacherState::TeacherState(const EncoderNet& student, double momentum)
    : net_(student.clone_frozen()), momentum_(momentum) {
  if (momentum < 0.0 || momentum >= 1.0)
    throw std::invalid_argument("teacher momentum must lie in [0, 1)");
}

void TeacherState::set_momentum(double mu) {
  if (mu < 0.0 || mu >= 1.0) throw std::invalid_argument("teacher momentum must lie in [0, 1)");
  momentum_ = mu;
}

void ema_update(TeacherState& teacher, const EncoderNet& student, double mu) {
  ParamSet& tp = teacher.net_->params();
  const ParamSet& sp = student.params();
  if (tp.size() != sp.size()) throw std::invalid_argument("teacher/student parameter mismatch");
  for (std::size_t i = 0; i < tp.size(); ++i) {
    RealArray& tv = tp.entries()[i].param->value;
    const RealArray& sv = sp.entries()[i].param->value;
    if (tv.numel() != sv.numel()) throw std::invalid_argument("teacher/student shape mismatch");
    for (std::size_t j = 0; j < tv.numel(); ++j)
      tv.data()[j] = mu * tv.data()[j] + (1.0 - mu) * sv.data()[j];
    ensure_finite(tv, "ema_update");
  }
}

void ema_update(TeacherState& teacher, const EncoderNet& student) {
  ema_update(teacher, student, teacher.momentum());
}

Var classify(const EncoderNet& enc, const Var& features) {
  return softmax_rows(enc.logits(features));
}

EmbeddingSet embedding_set_from(const RealArray& matrix, std::int64_t first_source_id) {
  if (matrix.rank() != 2) throw std::invalid_argument("embedding matrix must be 2-d");
  EmbeddingSet set(matrix.shape()[1]);
  for (std::size_t i = 0; i < matrix.shape()[0]; ++i)
    set.push_back(matrix.row(i), first_source_id + static_cast<std::int64_t>(i));
  return set;
}

EmbeddingSet extract_domain_embeddings(const ExtractorNet& ext, const RealArray& features_value,
                                       std::int64_t first_source_id) {
  Var out = ext.forward(constant(features_value));
  return embedding_set_from(out->value, first_source_id);
}

Var discrimination_loss(const DiscriminatorNet& disc, const Var& current,
                        const Var& prototypes) {
  if (current->value.shape()[0] != prototypes->value.shape()[0])
    throw std::invalid_argument("discrimination_loss needs equally sized sides");
  Var p_cur = disc.probability(current);
  Var p_old = disc.probability(prototypes);
  Var ones = constant(RealArray(p_old->value.shape(), 1.0));
  Var term_cur = scale(mean(vlog(p_cur)), -1.0);
  Var term_old = scale(mean(vlog(sub(ones, p_old))), -1.0);
  return add(term_cur, term_old);
}

Var invariance_loss(const Var& current, const RealArray& paired_prototypes) {
  if (current->value.shape() != paired_prototypes.shape())
    throw std::invalid_argument("invariance_loss shapes must match");
  double dim = static_cast<double>(paired_prototypes.shape()[1]);
  return scale(mean(vabs(sub(current, constant(paired_prototypes)))), dim);
}

double self_training_loss(std::span<const double> student_probs,
                          std::span<const double> teacher_probs) {
  if (student_probs.size() != teacher_probs.size() || student_probs.empty())
    throw std::invalid_argument("self_training_loss needs matching non-empty vectors");
  double total = 0.0;
  for (std::size_t c = 0; c < student_probs.size(); ++c)
    total += teacher_probs[c] * std::log(std::max(student_probs[c], kLogClamp));
  return -total / static_cast<double>(student_probs.size());
}

Var self_training_loss(const Var& student_probs, const RealArray& teacher_probs) {
  if (student_probs->value.shape() != teacher_probs.shape())
    throw std::invalid_argument("self_training_loss shapes must match");
  Var clamped = clamp(student_probs, kLogClamp, 1.0);
  Var weighted = mul(constant(teacher_probs), vlog(clamped));
  // mean() already divides by batch * classes, matching the per-sample 1/C.
  return scale(mean(weighted), -1.0);
}

}  // namespace testdg
