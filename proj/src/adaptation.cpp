#include "testdg/adaptation.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <stdexcept>

namespace testdg {

DomainQueue::DomainQueue(std::size_t capacity) : capacity_(capacity) {
  if (capacity == 0) throw std::invalid_argument("queue capacity must be positive");
}

void DomainQueue::push(std::span<const double> embedding, std::span<const double> input,
                       std::int64_t id) {
  if (!entries_.empty() && entries_.front().embedding.size() != embedding.size())
    throw std::invalid_argument("queue embedding dimension changed");
  if (entries_.size() == capacity_) entries_.pop_front();
  Entry e;
  e.embedding.assign(embedding.begin(), embedding.end());
  e.input.assign(input.begin(), input.end());
  e.id = id;
  entries_.push_back(std::move(e));
}

EmbeddingSet DomainQueue::embeddings() const {
  if (entries_.empty()) throw std::invalid_argument("queue is empty");
  EmbeddingSet set(entries_.front().embedding.size());
  for (const Entry& e : entries_) set.push_back(e.embedding, e.id);
  return set;
}

EmbeddingSet PrototypeState::embedding_set() const {
  if (!matrix) throw std::logic_error("prototype state is empty");
  EmbeddingSet set(matrix->value.extent(1));
  for (std::size_t i = 0; i < matrix->value.extent(0); ++i)
    set.push_back(matrix->value.row(i), static_cast<std::int64_t>(i));
  return set;
}

double batch_confidence(const RealArray& probabilities) {
  if (probabilities.rank() != 2 || probabilities.extent(0) == 0 || probabilities.extent(1) == 0)
    throw std::invalid_argument("batch_confidence needs a non-empty [n, C] array");
  double total = 0.0;
  for (std::size_t i = 0; i < probabilities.extent(0); ++i) {
    double best = -std::numeric_limits<double>::infinity();
    for (double v : probabilities.row(i)) best = std::max(best, v);
    total += best;
  }
  return total / static_cast<double>(probabilities.extent(0));
}

bool detect_change(DetectorState& det, double conf_cur) {
  if (!(det.threshold > 0.0 && det.threshold < 1.0))
    throw std::invalid_argument("detection threshold must lie in (0, 1)");
  if (!det.initialized) {
    det.last_confidence = conf_cur;
    det.initialized = true;
    return false;
  }
  bool flag = std::abs(conf_cur - det.last_confidence) > det.threshold;
  det.last_confidence = conf_cur;
  return flag;
}

void validate(const AdaptationConfig& cfg) {
  if (!(cfg.lr_step1 > 0.0) || !(cfg.lr_step2 > 0.0) || !(cfg.lr_proto > 0.0))
    throw std::invalid_argument("learning rates must be positive");
  if (!(cfg.lambda_inv >= 0.0)) throw std::invalid_argument("lambda_inv must be >= 0");
  if (cfg.momentum < 0.0 || cfg.momentum >= 1.0)
    throw std::invalid_argument("teacher momentum must lie in [0, 1)");
  if (!(cfg.threshold > 0.0 && cfg.threshold < 1.0))
    throw std::invalid_argument("detection threshold must lie in (0, 1)");
  if (cfg.queue_capacity == 0 || cfg.num_prototypes == 0)
    throw std::invalid_argument("queue capacity and prototype count must be positive");
  if (cfg.proto_steps == 0) throw std::invalid_argument("prototype step count must be >= 1");
  if (cfg.augment_copies == 0) throw std::invalid_argument("augment_copies must be >= 1");
  if (cfg.augment_noise < 0.0 || cfg.augment_rotation_deg < 0.0)
    throw std::invalid_argument("augmentation strengths must be >= 0");
}

AdaptationEngine::AdaptationEngine(std::unique_ptr<EncoderNet> encoder,
                                   const AdaptationConfig& cfg, const AblationFlags& flags)
    : cfg_(cfg), flags_(flags), encoder_(std::move(encoder)), queue_(cfg.queue_capacity),
      rng_(Rng(cfg.seed).split("engine")) {
  validate(cfg_);
  if (!encoder_) throw std::invalid_argument("engine needs a pretrained encoder");
  Rng init = Rng(cfg_.seed).split("engine-init");
  const ModelConfig& mcfg = encoder_->config();
  amplifier_ = std::make_unique<AmplifierNet>(mcfg, init.split("amplifier"));
  extractor_ = std::make_unique<ExtractorNet>(mcfg, init.split("extractor"));
  discriminator_ = std::make_unique<DiscriminatorNet>(mcfg, init.split("discriminator"));
  teacher_ = std::make_unique<TeacherState>(*encoder_, cfg_.momentum);
  detector_.threshold = cfg_.threshold;
}

Var AdaptationEngine::features_graph(const Var& x) const {
  return encoder_->features(x, amplifier_.get(), flags_.use_amplifier);
}

Var AdaptationEngine::prediction_graph(const Var& x) const {
  bool amp = flags_.use_amplifier && cfg_.amplified_prediction;
  return encoder_->features(x, amplifier_.get(), amp);
}

bool AdaptationEngine::split_prediction_path() const {
  return flags_.use_amplifier && !cfg_.amplified_prediction;
}

RealArray AdaptationEngine::predict(const RealArray& inputs) const {
  Var probs = classify(*encoder_, prediction_graph(constant(inputs)));
  return probs->value;
}

EmbeddingSet AdaptationEngine::embed(const RealArray& inputs, std::int64_t first_source_id) const {
  Var e = extractor_->forward(features_graph(constant(inputs)));
  return embedding_set_from(e->value, first_source_id);
}

const PrototypeState& AdaptationEngine::prototypes() const {
  if (!proto_) throw std::logic_error("prototypes requested before cold start");
  return *proto_;
}

void AdaptationEngine::set_prototypes(const RealArray& matrix, const RealArray& inputs,
                                      KernelConfig kernel, bool padded) {
  proto_.emplace();
  proto_->matrix = proto_->params.add("proto.P", matrix);
  proto_->source_inputs = inputs;
  proto_->kernel = kernel;
  proto_->padded = padded;
}

std::vector<std::size_t> AdaptationEngine::pair_subsample(std::size_t available,
                                                          std::size_t wanted, Rng& rng) const {
  std::vector<std::size_t> idx;
  if (available <= wanted) {
    idx.resize(available);
    for (std::size_t i = 0; i < available; ++i) idx[i] = i;
    return idx;
  }
  idx = rng.sample_without_replacement(available, wanted);
  std::sort(idx.begin(), idx.end());
  return idx;
}

namespace {

// Candidate pool reduced to n prototypes: greedy submodular selection by
// default, seeded uniform choice for the ablation; short pools are padded by
// cycling the picks.
std::vector<std::size_t> reduce_to_n(const EmbeddingSet& candidates, std::size_t n,
                                     const KernelConfig& kernel, bool greedy, Rng rng) {
  std::size_t take = std::min(n, candidates.size());
  std::vector<std::size_t> picked;
  if (greedy) {
    picked = greedy_select_indices(candidates, take, kernel);
  } else {
    picked = rng.sample_without_replacement(candidates.size(), take);
  }
  for (std::size_t i = 0; picked.size() < n; ++i) picked.push_back(picked[i % take]);
  return picked;
}

}  // namespace

void AdaptationEngine::cold_start(const RealArray& first_batch_inputs) {
  if (proto_) throw std::logic_error("cold_start called twice");
  if (first_batch_inputs.rank() != 2 || first_batch_inputs.extent(0) == 0)
    throw std::invalid_argument("cold_start needs a non-empty [n, d] batch");
  const std::size_t b = first_batch_inputs.extent(0);
  const std::size_t d = first_batch_inputs.extent(1);

  Rng rng = rng_.split("cold-start");
  double max_angle = cfg_.augment_rotation_deg * std::numbers::pi / 180.0;
  RealArray augmented({cfg_.augment_copies * b, d});
  for (std::size_t c = 0; c < cfg_.augment_copies; ++c) {
    for (std::size_t i = 0; i < b; ++i) {
      std::span<const double> src = first_batch_inputs.row(i);
      std::span<double> dst = augmented.row(c * b + i);
      for (std::size_t j = 0; j < d; ++j) dst[j] = src[j] + cfg_.augment_noise * rng.normal();
      if (d >= 2) {
        std::size_t a = rng.uniform_int(d);
        std::size_t bb = rng.uniform_int(d - 1);
        if (bb >= a) ++bb;
        double theta = rng.uniform(-max_angle, max_angle);
        double ca = std::cos(theta), sa = std::sin(theta);
        double va = dst[a], vb = dst[bb];
        dst[a] = ca * va - sa * vb;
        dst[bb] = sa * va + ca * vb;
      }
    }
  }

  EmbeddingSet candidates = embed(augmented);
  KernelConfig kernel = candidates.size() >= 2 ? median_heuristic_gamma(candidates)
                                               : KernelConfig{};
  std::vector<std::size_t> picked = reduce_to_n(candidates, cfg_.num_prototypes, kernel,
                                                flags_.use_greedy_selection,
                                                rng_.split("cold-start-select"));

  RealArray matrix({cfg_.num_prototypes, candidates.dim()});
  RealArray inputs({cfg_.num_prototypes, d});
  for (std::size_t i = 0; i < picked.size(); ++i) {
    std::span<const double> e = candidates.vector(picked[i]);
    std::span<const double> x = augmented.row(picked[i]);
    std::copy(e.begin(), e.end(), matrix.row(i).begin());
    std::copy(x.begin(), x.end(), inputs.row(i).begin());
  }
  set_prototypes(matrix, inputs, kernel, candidates.size() < cfg_.num_prototypes);
}

void AdaptationEngine::on_domain_change() {
  if (queue_.empty()) throw std::invalid_argument("on_domain_change needs a non-empty queue");
  EmbeddingSet candidates = queue_.embeddings();
  KernelConfig kernel = candidates.size() >= 2 ? median_heuristic_gamma(candidates)
                                               : KernelConfig{};
  std::vector<std::size_t> picked =
      reduce_to_n(candidates, cfg_.num_prototypes, kernel, flags_.use_greedy_selection,
                  rng_.split("select").split(static_cast<std::uint64_t>(batch_counter_)));

  const std::size_t d_in = queue_.entries().front().input.size();
  RealArray matrix({cfg_.num_prototypes, candidates.dim()});
  RealArray inputs({cfg_.num_prototypes, d_in});
  for (std::size_t i = 0; i < picked.size(); ++i) {
    const DomainQueue::Entry& entry = queue_.entries()[picked[i]];
    std::copy(entry.embedding.begin(), entry.embedding.end(), matrix.row(i).begin());
    std::copy(entry.input.begin(), entry.input.end(), inputs.row(i).begin());
  }
  set_prototypes(matrix, inputs, kernel, candidates.size() < cfg_.num_prototypes);
  queue_.clear();
}

double AdaptationEngine::step1(const RealArray& inputs) {
  if (!proto_) throw std::logic_error("step1 before cold start");
  if (!flags_.use_discrimination) return 0.0;
  const std::size_t b = inputs.extent(0);
  const std::size_t np = proto_->count();
  const std::size_t k = std::min(b, np);

  Rng rng = rng_.split("step1-pairs").split(static_cast<std::uint64_t>(batch_counter_));
  std::vector<std::size_t> f_idx = pair_subsample(b, k, rng);
  std::vector<std::size_t> p_idx = pair_subsample(np, k, rng);

  encoder_->params().set_requires_grad(false);
  Var e = extractor_->forward(features_graph(constant(inputs)));
  if (f_idx.size() < b) e = gather_rows(e, f_idx);
  RealArray proto_rows({k, proto_->matrix->value.extent(1)});
  for (std::size_t i = 0; i < k; ++i) {
    std::span<const double> src = proto_->matrix->value.row(p_idx[i]);
    std::copy(src.begin(), src.end(), proto_rows.row(i).begin());
  }
  Var loss = discrimination_loss(*discriminator_, e, constant(proto_rows));

  extractor_->params().zero_grad();
  discriminator_->params().zero_grad();
  if (flags_.use_amplifier) amplifier_->params().zero_grad();
  backward(loss);
  extractor_->params().step(cfg_.lr_step1, cfg_.opt_step1);
  discriminator_->params().step(cfg_.lr_step1, cfg_.opt_step1);
  if (flags_.use_amplifier) amplifier_->params().step(cfg_.lr_step1, cfg_.opt_step1);
  encoder_->params().set_requires_grad(true);
  return loss->value.item();
}

AdaptationEngine::Step2Result AdaptationEngine::step2(const RealArray& inputs) {
  if (!proto_) throw std::logic_error("step2 before cold start");
  const std::size_t b = inputs.extent(0);
  Step2Result out;

  Var x = constant(inputs);
  Var f = features_graph(x);
  Var probs = classify(*encoder_, split_prediction_path() ? prediction_graph(x) : f);
  Var e = extractor_->forward(f);
  out.predictions = probs->value;
  out.embeddings_before = e->value;

  bool train_self = flags_.use_self_training;
  bool train_inv = flags_.use_invariance && cfg_.lambda_inv > 0.0;
  if (!train_self && !train_inv) return out;

  Var loss;
  if (train_self) {
    Var tf = teacher_->net().features(constant(inputs), amplifier_.get(),
                                      flags_.use_amplifier && cfg_.amplified_prediction);
    RealArray teacher_probs = classify(teacher_->net(), tf)->value;
    // hard pseudo-labels: the teacher's argmax as a one-hot target. Soft
    // targets are a fixed point at initialization (teacher equals student),
    // leaving only clamp artifacts as gradient.
    RealArray pseudo({teacher_probs.extent(0), teacher_probs.extent(1)}, 0.0);
    for (std::size_t i = 0; i < teacher_probs.extent(0); ++i) {
      std::span<const double> row = teacher_probs.row(i);
      std::size_t arg = 0;
      for (std::size_t c = 1; c < row.size(); ++c)
        if (row[c] > row[arg]) arg = c;
      pseudo.at(i, arg) = 1.0;
    }
    Var l_self = self_training_loss(probs, pseudo);
    out.loss_self = l_self->value.item();
    loss = l_self;
  }
  if (train_inv) {
    const std::size_t np = proto_->count();
    const std::size_t k = std::min(b, np);
    Rng rng = rng_.split("step2-pairs").split(static_cast<std::uint64_t>(batch_counter_));
    std::vector<std::size_t> f_idx = pair_subsample(b, k, rng);
    Var e_sub = f_idx.size() < b ? gather_rows(e, f_idx) : e;

    // Nearest prototype per selected embedding under L1, on values.
    RealArray paired({k, proto_->matrix->value.extent(1)});
    for (std::size_t i = 0; i < k; ++i) {
      std::span<const double> ev = out.embeddings_before.row(f_idx[i]);
      std::size_t best = 0;
      double best_dist = std::numeric_limits<double>::infinity();
      for (std::size_t j = 0; j < np; ++j) {
        double dist = 0.0;
        std::span<const double> pv = proto_->matrix->value.row(j);
        for (std::size_t c = 0; c < ev.size(); ++c) dist += std::abs(ev[c] - pv[c]);
        if (dist < best_dist) {
          best_dist = dist;
          best = j;
        }
      }
      std::span<const double> pv = proto_->matrix->value.row(best);
      std::copy(pv.begin(), pv.end(), paired.row(i).begin());
    }
    Var l_inv = invariance_loss(e_sub, paired);
    out.loss_inv = l_inv->value.item();
    loss = loss ? add(loss, scale(l_inv, cfg_.lambda_inv)) : scale(l_inv, cfg_.lambda_inv);
  }
  out.loss_total = loss->value.item();

  extractor_->params().set_requires_grad(false);
  discriminator_->params().set_requires_grad(false);
  amplifier_->params().set_requires_grad(false);
  encoder_->params().zero_grad();
  backward(loss);
  encoder_->params().step(cfg_.lr_step2, cfg_.opt_step2);
  extractor_->params().set_requires_grad(true);
  discriminator_->params().set_requires_grad(true);
  amplifier_->params().set_requires_grad(true);
  return out;
}

double AdaptationEngine::update_prototypes(const RealArray& f_before, const RealArray& f_after) {
  if (!proto_) throw std::logic_error("update_prototypes before cold start");
  if (!flags_.use_prototype_update) return 0.0;

  EmbeddingSet before = embedding_set_from(f_before, 0);
  EmbeddingSet after = embedding_set_from(f_after, 0);
  double d_star = chamfer_distance(before, proto_->embedding_set());

  auto residual_now = [&]() {
    return std::abs(d_star - chamfer_distance(after, proto_->embedding_set()));
  };
  double residual = residual_now();
  if (residual == 0.0) return 0.0;

  Var f_after_const = constant(f_after);
  Var target = constant(RealArray::scalar(d_star));
  for (std::size_t step = 0; step < cfg_.proto_steps; ++step) {
    std::vector<RealArray> snapshot = proto_->params.snapshot_values();
    Var r = vabs(sub(chamfer(f_after_const, proto_->matrix), target));
    proto_->params.zero_grad();
    backward(r);
    proto_->params.step(cfg_.lr_proto, cfg_.opt_proto);
    double updated = residual_now();
    if (updated > residual) {
      // Reject the step that increased the residual, keep the best iterate.
      proto_->params.restore_values(snapshot);
      break;
    }
    residual = updated;
    if (residual == 0.0) break;
  }
  return residual;
}

BatchRecord AdaptationEngine::adapt_batch(const RealArray& inputs,
                                          const std::vector<int>* labels) {
  try {
    if (inputs.rank() != 2 || inputs.extent(0) == 0)
      throw std::invalid_argument("adapt_batch needs a non-empty [n, d] batch");
    if (labels && labels->size() != inputs.extent(0))
      throw std::invalid_argument("label count does not match batch size");

    if (!proto_) cold_start(inputs);

    BatchRecord rec;
    rec.index = batch_counter_;

    // Initial forward: embeddings for the queue plus detection confidence.
    Var x0 = constant(inputs);
    Var f0 = features_graph(x0);
    RealArray probs0 =
        classify(*encoder_, split_prediction_path() ? prediction_graph(x0) : f0)->value;
    RealArray e0 = extractor_->forward(f0)->value;
    for (std::size_t i = 0; i < inputs.extent(0); ++i)
      queue_.push(e0.row(i), inputs.row(i), sample_counter_++);

    rec.confidence = batch_confidence(probs0);
    rec.detected = detect_change(detector_, rec.confidence);
    if (rec.detected) on_domain_change();

    rec.loss_dis = step1(inputs);
    Step2Result s2 = step2(inputs);
    rec.loss_self = s2.loss_self;
    rec.loss_inv = s2.loss_inv;
    rec.loss_step2 = s2.loss_total;

    ema_update(*teacher_, *encoder_);

    RealArray proto_before = proto_->matrix->value;
    rec.proto_residual = update_prototypes(s2.embeddings_before, embed(inputs).matrix());
    rec.selection_padded = proto_->padded;

    // Direction diagnostics: re-embed the prototypes' source inputs under the
    // updated model and compare against updated vs pre-update prototypes.
    EmbeddingSet targets = embed(proto_->source_inputs);
    rec.proto_mmd_updated = mmd_squared(targets, proto_->embedding_set(), proto_->kernel);
    rec.proto_mmd_original =
        mmd_squared(targets, embedding_set_from(proto_before, 0), proto_->kernel);

    if (labels) {
      rec.total = inputs.extent(0);
      for (std::size_t i = 0; i < rec.total; ++i) {
        std::span<const double> row = s2.predictions.row(i);
        std::size_t arg = 0;
        for (std::size_t c = 1; c < row.size(); ++c)
          if (row[c] > row[arg]) arg = c;
        if (static_cast<int>(arg) == (*labels)[i]) ++rec.correct;
      }
    }

    ++batch_counter_;
    return rec;
  } catch (const std::domain_error& err) {
    throw std::runtime_error("batch " + std::to_string(batch_counter_) + ": " + err.what());
  } catch (const std::logic_error&) {
    throw;  // caller contract violations keep their type
  } catch (const std::exception& err) {
    throw std::runtime_error("batch " + std::to_string(batch_counter_) + ": " + err.what());
  }
}

}  // namespace testdg
