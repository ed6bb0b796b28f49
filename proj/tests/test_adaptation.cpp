#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <vector>

#include "doctest.h"
#include "test_support.hpp"
#include "testdg/adaptation.hpp"
#include "testdg/harness.hpp"
#include "testdg/kernels.hpp"
#include "testdg/model.hpp"
#include "testdg/stream.hpp"

using namespace testdg;

namespace {

ModelConfig tiny_model() {
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

BaseTask tiny_task() {
  BaseTask task;
  task.num_classes = 3;
  task.input_dim = 8;
  task.train_size = 512;
  task.test_size = 256;
  task.seed = 7;
  return task;
}

AdaptationConfig tiny_adapt() {
  AdaptationConfig cfg;
  cfg.queue_capacity = 16;
  cfg.num_prototypes = 4;
  cfg.proto_steps = 3;
  cfg.seed = 3;
  return cfg;
}

const EncoderNet& pretrained_tiny() {
  static PretrainResult result = [] {
    PretrainOptions opt;
    opt.epochs = 10;
    opt.lr = 3e-3;
    opt.batch_size = 32;
    PretrainResult pr = pretrain_source(tiny_task(), tiny_model(), opt, 5);
    if (!pr.encoder) throw std::runtime_error("tiny pretrain failed: " + pr.diagnostic);
    return pr;
  }();
  return *result.encoder;
}

std::unique_ptr<AdaptationEngine> make_engine(const AdaptationConfig& cfg,
                                              AblationFlags flags = {}) {
  return std::make_unique<AdaptationEngine>(pretrained_tiny().clone(), cfg, flags);
}

RealArray stream_inputs(const ScenarioStream& stream, std::size_t index) {
  return stream.batch(index).data.inputs;
}

// Softmax regression on frozen vectors; returns training accuracy.
double probe_accuracy(const RealArray& xs, const std::vector<int>& ys, std::size_t num_classes) {
  const std::size_t n = xs.extent(0), d = xs.extent(1);
  ParamSet set;
  Var w = set.add("w", RealArray({d, num_classes}, 0.0));
  Var b = set.add("b", RealArray({num_classes}, 0.0));
  RealArray onehot({n, num_classes}, 0.0);
  for (std::size_t i = 0; i < n; ++i) onehot.at(i, static_cast<std::size_t>(ys[i])) = 1.0;
  Var x = constant(xs);
  for (int step = 0; step < 150; ++step) {
    set.zero_grad();
    Var probs = softmax_rows(add(matmul(x, w), b));
    Var loss = scale(mean(mul(constant(onehot), vlog(clamp(probs, 1e-12, 1.0)))),
                     -static_cast<double>(num_classes));
    backward(loss);
    set.step(0.1, OptMode::adaptive_moment);
  }
  Var probs = softmax_rows(add(matmul(x, w), b));
  std::size_t hits = 0;
  for (std::size_t i = 0; i < n; ++i) {
    std::size_t best = 0;
    for (std::size_t c = 1; c < num_classes; ++c)
      if (probs->value.at(i, c) > probs->value.at(i, best)) best = c;
    if (static_cast<int>(best) == ys[i]) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(n);
}

}  // namespace

TEST_SUITE("adaptation") {
  TEST_CASE("batch confidence oracle values") {
    RealArray uniform({4, 10}, 0.1);
    CHECK(batch_confidence(uniform) == doctest::Approx(0.1).epsilon(1e-12));

    RealArray onehot({3, 10}, 0.0);
    for (std::size_t i = 0; i < 3; ++i) onehot.at(i, i) = 1.0;
    CHECK(batch_confidence(onehot) == doctest::Approx(1.0).epsilon(1e-12));

    RealArray mixed({2, 10}, 0.0);
    for (std::size_t c = 0; c < 10; ++c) mixed.at(0, c) = 0.1;
    mixed.at(1, 4) = 1.0;
    CHECK(batch_confidence(mixed) == doctest::Approx(0.55).epsilon(1e-12));
  }

  TEST_CASE("detector follows the absolute-difference rule") {
    DetectorState det;
    det.threshold = 0.1;
    CHECK_FALSE(detect_change(det, 0.9));  // first observation initializes
    CHECK(det.initialized);
    CHECK(det.last_confidence == 0.9);

    CHECK(detect_change(det, 0.65));  // |delta| = 0.25 > 0.1
    CHECK(det.last_confidence == 0.65);
    CHECK_FALSE(detect_change(det, 0.65));  // delta = 0
    CHECK(detect_change(det, 0.9));         // rises also count
    CHECK_FALSE(detect_change(det, 0.85));
  }

  TEST_CASE("detector threshold must be in the open unit interval") {
    DetectorState det;
    det.threshold = 0.0;
    CHECK_THROWS_AS(detect_change(det, 0.5), std::invalid_argument);
    det.threshold = 1.0;
    CHECK_THROWS_AS(detect_change(det, 0.5), std::invalid_argument);
  }

  TEST_CASE("queue evicts strictly fifo") {
    DomainQueue q(3);
    std::vector<double> e = {0.0}, in = {0.0};
    for (int i = 0; i < 5; ++i) {
      e[0] = i;
      q.push(e, in, i);
      CHECK(q.size() == std::min<std::size_t>(i + 1, 3));
    }
    REQUIRE(q.size() == 3);
    CHECK(q.entries()[0].id == 2);
    CHECK(q.entries()[2].id == 4);
    EmbeddingSet set = q.embeddings();
    CHECK(set.source_id(0) == 2);
    CHECK(set.vector(0)[0] == 2.0);
    q.clear();
    CHECK(q.empty());
    CHECK_THROWS_AS(DomainQueue(0), std::invalid_argument);
  }

  TEST_CASE("config validation") {
    AdaptationConfig cfg = tiny_adapt();
    CHECK_NOTHROW(validate(cfg));
    cfg.lr_step1 = 0.0;
    CHECK_THROWS_AS(validate(cfg), std::invalid_argument);
    cfg = tiny_adapt();
    cfg.threshold = 1.0;
    CHECK_THROWS_AS(validate(cfg), std::invalid_argument);
    cfg = tiny_adapt();
    cfg.num_prototypes = 0;
    CHECK_THROWS_AS(validate(cfg), std::invalid_argument);
    cfg = tiny_adapt();
    cfg.momentum = 1.0;
    CHECK_THROWS_AS(validate(cfg), std::invalid_argument);
    cfg = tiny_adapt();
    cfg.proto_steps = 0;
    CHECK_THROWS_AS(validate(cfg), std::invalid_argument);
  }

  TEST_CASE("prototypes are unavailable before cold start") {
    auto engine = make_engine(tiny_adapt());
    CHECK_FALSE(engine->cold_started());
    CHECK_THROWS_AS(engine->prototypes(), std::logic_error);
  }

  TEST_CASE("cold start cardinality and zero-strength identity") {
    AdaptationConfig cfg = tiny_adapt();
    cfg.augment_noise = 0.0;
    cfg.augment_rotation_deg = 0.0;
    auto engine = make_engine(cfg);
    LabeledBatch batch = sample_source(tiny_task(), 8);
    engine->cold_start(batch.inputs);
    REQUIRE(engine->cold_started());
    const PrototypeState& proto = engine->prototypes();
    CHECK(proto.count() == cfg.num_prototypes);

    // zero-strength copies are bit-identical, so every prototype equals the
    // embedding of some original sample
    EmbeddingSet originals = engine->embed(batch.inputs);
    for (std::size_t p = 0; p < proto.count(); ++p) {
      bool found = false;
      for (std::size_t i = 0; i < originals.size() && !found; ++i) {
        bool same = true;
        for (std::size_t dIdx = 0; dIdx < originals.dim(); ++dIdx)
          if (proto.matrix->value.at(p, dIdx) != originals.vector(i)[dIdx]) {
            same = false;
            break;
          }
        found = same;
      }
      CHECK(found);
    }
  }

  TEST_CASE("cold start with noise produces novel prototypes") {
    AdaptationConfig cfg = tiny_adapt();
    cfg.augment_noise = 0.5;
    auto engine = make_engine(cfg);
    LabeledBatch batch = sample_source(tiny_task(), 8);
    engine->cold_start(batch.inputs);
    EmbeddingSet originals = engine->embed(batch.inputs);
    const PrototypeState& proto = engine->prototypes();
    bool any_novel = false;
    for (std::size_t p = 0; p < proto.count() && !any_novel; ++p) {
      bool matches_original = false;
      for (std::size_t i = 0; i < originals.size() && !matches_original; ++i) {
        bool same = true;
        for (std::size_t dIdx = 0; dIdx < originals.dim(); ++dIdx)
          if (proto.matrix->value.at(p, dIdx) != originals.vector(i)[dIdx]) {
            same = false;
            break;
          }
        matches_original = same;
      }
      any_novel = !matches_original;
    }
    CHECK(any_novel);
  }

  TEST_CASE("domain change selects n prototypes and clears the queue") {
    auto engine = make_engine(tiny_adapt());
    LabeledBatch batch = sample_source(tiny_task(), 8);
    engine->adapt_batch(batch.inputs, &batch.labels);
    CHECK(engine->queue().size() == 8);
    engine->on_domain_change();
    CHECK(engine->queue().empty());
    const PrototypeState& proto = engine->prototypes();
    CHECK(proto.count() == tiny_adapt().num_prototypes);
    CHECK_FALSE(proto.padded);
    CHECK(proto.kernel.gamma > 0.0);
    CHECK(proto.source_inputs.extent(0) == proto.count());
    CHECK(proto.source_inputs.extent(1) == tiny_model().input_dim);
  }

  TEST_CASE("short queue pads the selection and flags it") {
    AdaptationConfig cfg = tiny_adapt();
    cfg.num_prototypes = 6;
    auto engine = make_engine(cfg);
    LabeledBatch batch = sample_source(tiny_task(), 3);
    engine->adapt_batch(batch.inputs, nullptr);
    REQUIRE(engine->queue().size() == 3);
    engine->on_domain_change();
    const PrototypeState& proto = engine->prototypes();
    CHECK(proto.count() == 6);
    CHECK(proto.padded);
  }

  TEST_CASE("step1 freezes the encoder and reduces the discrimination loss") {
    auto engine = make_engine(tiny_adapt());
    LabeledBatch batch = sample_source(tiny_task(), 8);
    engine->adapt_batch(batch.inputs, nullptr);

    auto enc_before = engine->encoder().params().snapshot_values();
    double first = engine->step1(batch.inputs);
    CHECK(engine->encoder().params().bit_equal_values(enc_before));
    CHECK(std::isfinite(first));

    double last = first;
    for (int i = 0; i < 49; ++i) {
      last = engine->step1(batch.inputs);
      CHECK(std::isfinite(last));
    }
    CHECK(last < first);
    CHECK(engine->encoder().params().bit_equal_values(enc_before));
  }

  TEST_CASE("step2 freezes the auxiliaries and reduces the invariance loss") {
    auto engine = make_engine(tiny_adapt());
    LabeledBatch batch = sample_source(tiny_task(), 8);
    engine->adapt_batch(batch.inputs, nullptr);

    auto amp_before = engine->amplifier().params().snapshot_values();
    auto ext_before = engine->extractor().params().snapshot_values();
    auto disc_before = engine->discriminator().params().snapshot_values();

    auto first = engine->step2(batch.inputs);
    CHECK(engine->amplifier().params().bit_equal_values(amp_before));
    CHECK(engine->extractor().params().bit_equal_values(ext_before));
    CHECK(engine->discriminator().params().bit_equal_values(disc_before));
    CHECK(first.predictions.extent(0) == 8);
    CHECK(std::isfinite(first.loss_total));

    auto last = first;
    for (int i = 0; i < 49; ++i) last = engine->step2(batch.inputs);
    CHECK(last.loss_inv < first.loss_inv);
    CHECK(engine->amplifier().params().bit_equal_values(amp_before));
    CHECK(engine->extractor().params().bit_equal_values(ext_before));
    CHECK(engine->discriminator().params().bit_equal_values(disc_before));
  }

  TEST_CASE("zero invariance weight reduces step2 to pure self-training") {
    AdaptationConfig cfg = tiny_adapt();
    cfg.lambda_inv = 0.0;
    auto engine = make_engine(cfg);
    LabeledBatch batch = sample_source(tiny_task(), 8);
    engine->adapt_batch(batch.inputs, nullptr);
    auto out = engine->step2(batch.inputs);
    CHECK(out.loss_total == out.loss_self);
    CHECK(out.loss_inv == 0.0);
  }

  TEST_CASE("prototype update is a fixed point when the model did not move") {
    auto engine = make_engine(tiny_adapt());
    LabeledBatch batch = sample_source(tiny_task(), 8);
    engine->adapt_batch(batch.inputs, nullptr);

    EmbeddingSet f = engine->embed(batch.inputs);
    RealArray fv = f.matrix();
    auto before = engine->prototypes().matrix->value;
    double residual = engine->update_prototypes(fv, fv);
    CHECK(residual == 0.0);
    CHECK(engine->prototypes().matrix->value.bit_equal(before));
  }

  TEST_CASE("prototype update never increases the residual") {
    auto engine = make_engine(tiny_adapt());
    LabeledBatch b0 = sample_source(tiny_task(), 8);
    engine->adapt_batch(b0.inputs, nullptr);

    RealArray f_before = engine->embed(b0.inputs).matrix();
    // move the encoder a little so the re-embedded batch differs
    engine->step2(b0.inputs);
    RealArray f_after = engine->embed(b0.inputs).matrix();

    EmbeddingSet fb = embedding_set_from(f_before, 0);
    EmbeddingSet fa = embedding_set_from(f_after, 0);
    EmbeddingSet p0 = engine->prototypes().embedding_set();
    double d_star = chamfer_distance(fb, p0);
    double initial = std::abs(d_star - chamfer_distance(fa, p0));

    double final_residual = engine->update_prototypes(f_before, f_after);
    CHECK(final_residual <= initial + 1e-12);
    CHECK(engine->prototypes().matrix->value.all_finite());
  }

  TEST_CASE("stationary stream raises no detections") {
    ScenarioConfig sc;
    sc.task = tiny_task();
    sc.batch_size = 8;
    sc.entries.push_back({DomainSpec{"clean", TransformFamily::additive_noise, 0, 1}, 8});
    ScenarioStream stream(sc);

    auto engine = make_engine(tiny_adapt());
    for (std::size_t i = 0; i < stream.total_batches(); ++i) {
      BatchRecord rec = engine->adapt_batch(stream_inputs(stream, i), nullptr);
      CHECK_FALSE(rec.detected);
    }
  }

  TEST_CASE("hard switch is detected and reselects prototypes") {
    ScenarioConfig sc;
    sc.task = tiny_task();
    sc.batch_size = 8;
    sc.entries.push_back({DomainSpec{"clean", TransformFamily::additive_noise, 0, 1}, 5});
    sc.entries.push_back({DomainSpec{"hard", TransformFamily::coordinate_dropout, 5, 2}, 5});
    ScenarioStream stream(sc);

    // the tiny pretrained net is near-certain on clean batches (conf ~0.99,
    // batch-to-batch wobble under 0.01); dropout is the one family that dents
    // its confidence, so the switch shows as a ~0.06 drop
    AdaptationConfig cfg = tiny_adapt();
    cfg.threshold = 0.02;
    auto engine = make_engine(cfg);
    std::vector<BatchRecord> records;
    for (std::size_t i = 0; i < stream.total_batches(); ++i) {
      records.push_back(engine->adapt_batch(stream_inputs(stream, i), nullptr));
      CHECK(std::isfinite(records.back().loss_dis));
      CHECK(std::isfinite(records.back().loss_self));
      CHECK(std::isfinite(records.back().loss_inv));
      CHECK(std::isfinite(records.back().proto_residual));
      if (i == 5) CHECK(engine->queue().empty());  // selection clears the queue
    }
    CHECK(records[5].detected);
    for (std::size_t i = 1; i < 5; ++i) CHECK_FALSE(records[i].detected);
  }

  TEST_CASE("identical seeds give bit-identical records") {
    ScenarioConfig sc;
    sc.task = tiny_task();
    sc.batch_size = 8;
    sc.entries.push_back({DomainSpec{"noise", TransformFamily::additive_noise, 3, 4}, 3});
    sc.entries.push_back({DomainSpec{"con", TransformFamily::affine_contrast, 4, 5}, 3});
    ScenarioStream stream(sc);

    auto e1 = make_engine(tiny_adapt());
    auto e2 = make_engine(tiny_adapt());
    for (std::size_t i = 0; i < stream.total_batches(); ++i) {
      RealArray inputs = stream_inputs(stream, i);
      BatchRecord r1 = e1->adapt_batch(inputs, nullptr);
      BatchRecord r2 = e2->adapt_batch(inputs, nullptr);
      CHECK(r1.confidence == r2.confidence);
      CHECK(r1.detected == r2.detected);
      CHECK(r1.loss_dis == r2.loss_dis);
      CHECK(r1.loss_self == r2.loss_self);
      CHECK(r1.loss_inv == r2.loss_inv);
      CHECK(r1.loss_step2 == r2.loss_step2);
      CHECK(r1.proto_residual == r2.proto_residual);
      CHECK(r1.proto_mmd_updated == r2.proto_mmd_updated);
      CHECK(r1.proto_mmd_original == r2.proto_mmd_original);
    }
  }

  TEST_CASE("labels feed the correctness fields but not the adaptation") {
    LabeledBatch batch = sample_source(tiny_task(), 8);
    auto with = make_engine(tiny_adapt());
    auto without = make_engine(tiny_adapt());
    BatchRecord r1 = with->adapt_batch(batch.inputs, &batch.labels);
    BatchRecord r2 = without->adapt_batch(batch.inputs, nullptr);
    CHECK(r1.total == 8);
    CHECK(r2.total == 0);
    CHECK(r1.loss_step2 == r2.loss_step2);
    CHECK(with->encoder().params().bit_equal_values(
        without->encoder().params().snapshot_values()));
  }

  TEST_CASE("embed offsets source ids") {
    auto engine = make_engine(tiny_adapt());
    LabeledBatch batch = sample_source(tiny_task(), 3);
    EmbeddingSet set = engine->embed(batch.inputs, 100);
    REQUIRE(set.size() == 3);
    CHECK(set.source_id(0) == 100);
    CHECK(set.source_id(2) == 102);
    CHECK(set.dim() == tiny_model().domain_dim);
  }

  TEST_CASE("domain embeddings separate domains better than classes") {
    ScenarioConfig sc;
    sc.task = tiny_task();
    sc.batch_size = 8;
    sc.entries.push_back({DomainSpec{"contrast", TransformFamily::affine_contrast, 5, 6}, 30});
    sc.entries.push_back({DomainSpec{"dropout", TransformFamily::coordinate_dropout, 5, 7}, 30});
    ScenarioStream stream(sc);

    // the discrimination branch needs a strong lr to train within a short run;
    // at the default 1e-3 the extractor stays near init and keeps the class
    // structure it inherits from the features
    AdaptationConfig cfg = tiny_adapt();
    cfg.lr_step1 = 0.05;
    auto engine = make_engine(cfg);
    std::vector<RealArray> stored_inputs;
    std::vector<int> domain_labels, class_labels;
    for (std::size_t i = 0; i < stream.total_batches(); ++i) {
      StreamBatch b = stream.batch(i);
      engine->adapt_batch(b.data.inputs, nullptr);
      stored_inputs.push_back(b.data.inputs);
      for (std::size_t s = 0; s < sc.batch_size; ++s) {
        domain_labels.push_back(i < 30 ? 0 : 1);
        class_labels.push_back(b.data.labels[s]);
      }
    }

    // embed everything under the final frozen parameters
    const std::size_t dim = tiny_model().domain_dim;
    RealArray all({domain_labels.size(), dim}, 0.0);
    std::size_t row = 0;
    for (const auto& inputs : stored_inputs) {
      EmbeddingSet set = engine->embed(inputs);
      for (std::size_t s = 0; s < set.size(); ++s, ++row)
        for (std::size_t c = 0; c < dim; ++c) all.at(row, c) = set.vector(s)[c];
    }

    double domain_acc = probe_accuracy(all, domain_labels, 2);
    double class_acc = probe_accuracy(all, class_labels, tiny_task().num_classes);
    CHECK(domain_acc > class_acc);
  }
}
