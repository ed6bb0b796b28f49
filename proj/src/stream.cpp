#include "testdg/stream.hpp"

#include <cmath>
#include <fstream>
#include <numbers>
#include <set>
#include <sstream>
#include <stdexcept>

#include "json.hpp"

namespace testdg {
namespace {

using ordered_json = nlohmann::ordered_json;

void check_task(const BaseTask& task) {
  if (task.num_classes < 2) throw std::invalid_argument("task needs at least two classes");
  if (task.input_dim == 0) throw std::invalid_argument("task input_dim must be positive");
  if (!(task.cluster_sigma > 0.0)) throw std::invalid_argument("cluster_sigma must be positive");
}

void check_severity(int severity) {
  if (severity < 0 || severity > 5)
    throw std::invalid_argument("severity must lie in 0..5, got " + std::to_string(severity));
}

double sq_dist(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    double d = a[i] - b[i];
    s += d * d;
  }
  return s;
}

}  // namespace

RealArray class_means(const BaseTask& task) {
  check_task(task);
  const double min_sep = 3.0;
  Rng rng = Rng(task.seed).split("class-means");
  for (int attempt = 0; attempt < 64; ++attempt) {
    RealArray means({task.num_classes, task.input_dim});
    for (std::size_t i = 0; i < means.numel(); ++i) means.data()[i] = rng.normal();
    bool ok = true;
    for (std::size_t a = 0; a + 1 < task.num_classes && ok; ++a)
      for (std::size_t b = a + 1; b < task.num_classes && ok; ++b)
        if (sq_dist(means.row(a), means.row(b)) < min_sep * min_sep) ok = false;
    if (ok) return means;
  }
  throw std::domain_error("could not place separated class means; lower num_classes or raise dim");
}

LabeledBatch sample_source(const BaseTask& task, std::size_t n, Rng& rng) {
  check_task(task);
  if (n == 0) throw std::invalid_argument("sample_source needs n >= 1");
  RealArray means = class_means(task);
  LabeledBatch batch;
  batch.inputs = RealArray({n, task.input_dim});
  batch.labels.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    int label = static_cast<int>(rng.uniform_int(task.num_classes));
    batch.labels[i] = label;
    std::span<const double> mean = means.row(static_cast<std::size_t>(label));
    std::span<double> row = batch.inputs.row(i);
    for (std::size_t j = 0; j < task.input_dim; ++j)
      row[j] = mean[j] + task.cluster_sigma * rng.normal();
  }
  return batch;
}

LabeledBatch sample_source(const BaseTask& task, std::size_t n) {
  Rng rng = Rng(task.seed).split("source");
  return sample_source(task, n, rng);
}

LabeledBatch sample_class(const BaseTask& task, int label, std::size_t n, Rng& rng) {
  check_task(task);
  if (label < 0 || static_cast<std::size_t>(label) >= task.num_classes)
    throw std::invalid_argument("sample_class label out of range");
  RealArray means = class_means(task);
  LabeledBatch batch;
  batch.inputs = RealArray({n, task.input_dim});
  batch.labels.assign(n, label);
  std::span<const double> mean = means.row(static_cast<std::size_t>(label));
  for (std::size_t i = 0; i < n; ++i) {
    std::span<double> row = batch.inputs.row(i);
    for (std::size_t j = 0; j < task.input_dim; ++j)
      row[j] = mean[j] + task.cluster_sigma * rng.normal();
  }
  return batch;
}

TransformFamily family_from_string(const std::string& s) {
  if (s == "additive-noise") return TransformFamily::additive_noise;
  if (s == "coordinate-rotation") return TransformFamily::coordinate_rotation;
  if (s == "anisotropic-scale") return TransformFamily::anisotropic_scale;
  if (s == "affine-contrast") return TransformFamily::affine_contrast;
  if (s == "coordinate-dropout") return TransformFamily::coordinate_dropout;
  throw std::invalid_argument("unknown transform family: " + s);
}

std::string family_to_string(TransformFamily f) {
  switch (f) {
    case TransformFamily::additive_noise: return "additive-noise";
    case TransformFamily::coordinate_rotation: return "coordinate-rotation";
    case TransformFamily::anisotropic_scale: return "anisotropic-scale";
    case TransformFamily::affine_contrast: return "affine-contrast";
    case TransformFamily::coordinate_dropout: return "coordinate-dropout";
  }
  throw std::invalid_argument("unknown transform family enum value");
}

double noise_sigma(int s) { return 0.30 * s; }
double rotation_angle(int s) { return 12.0 * s * std::numbers::pi / 180.0; }
double scale_delta(int s) { return 0.19 * s; }
// contrast compresses toward zero; the offset keeps the shift from being
// absorbed by the network's scale equivariance
double contrast_gain(int s) { return 1.0 - 0.15 * s; }
double contrast_offset(int s) { return 0.20 * s; }
double dropout_fraction(int s) { return 0.13 * s; }

LabeledBatch apply_domain(const DomainSpec& spec, const LabeledBatch& batch, Rng& rng) {
  check_severity(spec.severity);
  if (batch.inputs.rank() != 2) throw std::invalid_argument("batch inputs must be 2-d");
  LabeledBatch out;
  out.inputs = batch.inputs;
  out.labels = batch.labels;
  if (spec.severity == 0) return out;

  std::size_t n = out.inputs.extent(0);
  std::size_t d = out.inputs.extent(1);
  int s = spec.severity;

  switch (spec.family) {
    case TransformFamily::additive_noise: {
      double sigma = noise_sigma(s);
      for (std::size_t i = 0; i < out.inputs.numel(); ++i)
        out.inputs.data()[i] += sigma * rng.normal();
      break;
    }
    case TransformFamily::coordinate_rotation: {
      Rng plane_rng = Rng(spec.seed).split("rotation-planes");
      std::vector<std::size_t> perm = plane_rng.permutation(d);
      double theta = rotation_angle(s);
      double c = std::cos(theta), sn = std::sin(theta);
      for (std::size_t i = 0; i < n; ++i) {
        std::span<double> row = out.inputs.row(i);
        for (std::size_t k = 0; k + 1 < d; k += 2) {
          double a = row[perm[k]], b = row[perm[k + 1]];
          row[perm[k]] = c * a - sn * b;
          row[perm[k + 1]] = sn * a + c * b;
        }
      }
      break;
    }
    case TransformFamily::anisotropic_scale: {
      Rng sign_rng = Rng(spec.seed).split("scale-signs");
      std::vector<double> factor(d);
      for (std::size_t j = 0; j < d; ++j)
        factor[j] = 1.0 + scale_delta(s) * (sign_rng.uniform() < 0.5 ? -1.0 : 1.0);
      for (std::size_t i = 0; i < n; ++i) {
        std::span<double> row = out.inputs.row(i);
        for (std::size_t j = 0; j < d; ++j) row[j] *= factor[j];
      }
      break;
    }
    case TransformFamily::affine_contrast: {
      Rng dir_rng = Rng(spec.seed).split("contrast-dir");
      std::vector<double> u(d);
      double norm = 0.0;
      for (std::size_t j = 0; j < d; ++j) {
        u[j] = dir_rng.normal();
        norm += u[j] * u[j];
      }
      norm = std::sqrt(norm);
      double gain = contrast_gain(s), offset = contrast_offset(s);
      for (std::size_t i = 0; i < n; ++i) {
        std::span<double> row = out.inputs.row(i);
        for (std::size_t j = 0; j < d; ++j) row[j] = gain * row[j] + offset * u[j] / norm;
      }
      break;
    }
    case TransformFamily::coordinate_dropout: {
      std::size_t count = static_cast<std::size_t>(
          std::lround(dropout_fraction(s) * static_cast<double>(d)));
      count = std::max<std::size_t>(1, std::min(count, d));
      for (std::size_t i = 0; i < n; ++i) {
        std::span<double> row = out.inputs.row(i);
        for (std::size_t j : rng.sample_without_replacement(d, count)) row[j] = 0.0;
      }
      break;
    }
  }
  ensure_finite(out.inputs, "apply_domain");
  return out;
}

ScenarioMode mode_from_string(const std::string& s) {
  if (s == "sequential") return ScenarioMode::sequential;
  if (s == "gradual") return ScenarioMode::gradual;
  if (s == "leave-one-out") return ScenarioMode::leave_one_out;
  throw std::invalid_argument("unknown scenario mode: " + s);
}

std::string mode_to_string(ScenarioMode m) {
  switch (m) {
    case ScenarioMode::sequential: return "sequential";
    case ScenarioMode::gradual: return "gradual";
    case ScenarioMode::leave_one_out: return "leave-one-out";
  }
  throw std::invalid_argument("unknown scenario mode enum value");
}

ScenarioStream::ScenarioStream(ScenarioConfig scenario) : scenario_(std::move(scenario)) {
  check_task(scenario_.task);
  if (scenario_.batch_size == 0) throw std::invalid_argument("batch_size must be positive");
  if (scenario_.rounds == 0) throw std::invalid_argument("rounds must be positive");
  if (scenario_.entries.empty()) throw std::invalid_argument("scenario needs at least one domain");
  for (const ScenarioEntry& e : scenario_.entries) {
    check_severity(e.spec.severity);
    if (e.batches == 0) throw std::invalid_argument("domain batch count must be positive");
  }
  for (const DomainSpec& h : scenario_.held_out) check_severity(h.severity);
  if (scenario_.mode == ScenarioMode::leave_one_out) {
    if (scenario_.held_out.empty())
      throw std::invalid_argument("leave-one-out scenarios need held_out domains");
    for (const DomainSpec& h : scenario_.held_out)
      for (const ScenarioEntry& e : scenario_.entries)
        if (h.family == e.spec.family && h.severity == e.spec.severity)
          throw std::invalid_argument("held-out domain also appears in the adaptation list: " +
                                      h.name);
  }

  static constexpr int kGradualTrace[] = {1, 2, 3, 4, 5, 4, 3, 2, 1};
  for (std::size_t round = 0; round < scenario_.rounds; ++round) {
    for (const ScenarioEntry& entry : scenario_.entries) {
      if (scenario_.mode == ScenarioMode::gradual) {
        for (int sev : kGradualTrace) {
          Segment seg;
          seg.spec = entry.spec;
          seg.spec.severity = sev;
          seg.spec.name = entry.spec.name + "@s" + std::to_string(sev);
          seg.batches = entry.batches;
          segments_.push_back(seg);
        }
      } else {
        Segment seg;
        seg.spec = entry.spec;
        seg.batches = entry.batches;
        segments_.push_back(seg);
      }
    }
  }
  std::size_t at = 0;
  for (std::size_t i = 0; i < segments_.size(); ++i) {
    segments_[i].first_batch = at;
    at += segments_[i].batches;
    segments_[i].change_at_start =
        i > 0 && segments_[i].spec.family != segments_[i - 1].spec.family;
  }
  total_ = at;
}

StreamBatch ScenarioStream::batch(std::size_t index) const {
  if (index >= total_) throw std::invalid_argument("stream batch index out of range");
  const Segment* seg = nullptr;
  for (const Segment& s : segments_) {
    if (index >= s.first_batch && index < s.first_batch + s.batches) {
      seg = &s;
      break;
    }
  }
  Rng rng = Rng(scenario_.seed).split("stream-batch").split(static_cast<std::uint64_t>(index));
  StreamBatch out;
  out.data = apply_domain(seg->spec, sample_source(scenario_.task, scenario_.batch_size, rng), rng);
  out.domain_tag = seg->spec.name;
  out.change_flag = seg->change_at_start && index == seg->first_batch;
  out.index = index;
  return out;
}

LabeledBatch eval_batch(const BaseTask& task, const DomainSpec& spec, std::size_t batch_size,
                        std::uint64_t seed, std::size_t index) {
  Rng rng = Rng(seed).split("eval").split(spec.name).split(static_cast<std::uint64_t>(index));
  return apply_domain(spec, sample_source(task, batch_size, rng), rng);
}

namespace {

void reject_unknown(const ordered_json& j, const std::set<std::string>& allowed,
                    const std::string& where) {
  for (const auto& item : j.items())
    if (!allowed.contains(item.key()))
      throw std::invalid_argument("unknown scenario field '" + item.key() + "' in " + where);
}

DomainSpec domain_from_json(const ordered_json& j, const std::string& where) {
  reject_unknown(j, {"name", "family", "severity", "seed"}, where);
  DomainSpec spec;
  spec.name = j.at("name").get<std::string>();
  spec.family = family_from_string(j.at("family").get<std::string>());
  spec.severity = j.at("severity").get<int>();
  spec.seed = j.value("seed", std::uint64_t{0});
  check_severity(spec.severity);
  return spec;
}

ordered_json domain_to_json(const DomainSpec& spec) {
  ordered_json j;
  j["name"] = spec.name;
  j["family"] = family_to_string(spec.family);
  j["severity"] = spec.severity;
  j["seed"] = spec.seed;
  return j;
}

}  // namespace

ScenarioConfig scenario_from_json_text(const std::string& text) {
  try {
    ordered_json j = ordered_json::parse(text);
    reject_unknown(j,
                   {"schema_version", "name", "mode", "batch_size", "rounds", "seed", "task",
                    "domains", "held_out"},
                   "scenario");
    int version = j.at("schema_version").get<int>();
    if (version != kScenarioSchemaVersion)
      throw std::invalid_argument("unsupported scenario schema_version " +
                                  std::to_string(version));

    ScenarioConfig cfg;
    cfg.name = j.value("name", std::string{"scenario"});
    cfg.mode = mode_from_string(j.value("mode", std::string{"sequential"}));
    cfg.batch_size = j.value("batch_size", std::size_t{16});
    cfg.rounds = j.value("rounds", std::size_t{1});
    cfg.seed = j.value("seed", std::uint64_t{1});

    const ordered_json& t = j.at("task");
    reject_unknown(t,
                   {"num_classes", "input_dim", "cluster_sigma", "train_size", "test_size", "seed"},
                   "task");
    cfg.task.num_classes = t.value("num_classes", std::size_t{4});
    cfg.task.input_dim = t.value("input_dim", std::size_t{16});
    cfg.task.cluster_sigma = t.value("cluster_sigma", 0.3);
    cfg.task.train_size = t.value("train_size", std::size_t{4096});
    cfg.task.test_size = t.value("test_size", std::size_t{1024});
    cfg.task.seed = t.value("seed", std::uint64_t{7});

    for (const ordered_json& dj : j.at("domains")) {
      ScenarioEntry entry;
      ordered_json spec_part = dj;
      if (!dj.contains("batches")) throw std::invalid_argument("domain entry needs 'batches'");
      entry.batches = dj.at("batches").get<std::size_t>();
      spec_part.erase("batches");
      entry.spec = domain_from_json(spec_part, "domains[]");
      cfg.entries.push_back(entry);
    }
    if (j.contains("held_out"))
      for (const ordered_json& hj : j.at("held_out"))
        cfg.held_out.push_back(domain_from_json(hj, "held_out[]"));
    return cfg;
  } catch (const nlohmann::json::exception& e) {
    throw std::invalid_argument(std::string("scenario: ") + e.what());
  }
}

std::string scenario_to_json_text(const ScenarioConfig& cfg) {
  ordered_json j;
  j["schema_version"] = kScenarioSchemaVersion;
  j["name"] = cfg.name;
  j["mode"] = mode_to_string(cfg.mode);
  j["batch_size"] = cfg.batch_size;
  j["rounds"] = cfg.rounds;
  j["seed"] = cfg.seed;
  j["task"] = {{"num_classes", cfg.task.num_classes},
               {"input_dim", cfg.task.input_dim},
               {"cluster_sigma", cfg.task.cluster_sigma},
               {"train_size", cfg.task.train_size},
               {"test_size", cfg.task.test_size},
               {"seed", cfg.task.seed}};
  j["domains"] = ordered_json::array();
  for (const ScenarioEntry& e : cfg.entries) {
    ordered_json dj = domain_to_json(e.spec);
    dj["batches"] = e.batches;
    j["domains"].push_back(dj);
  }
  j["held_out"] = ordered_json::array();
  for (const DomainSpec& h : cfg.held_out) j["held_out"].push_back(domain_to_json(h));
  return j.dump(2) + "\n";
}

ScenarioConfig load_scenario(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open scenario file: " + path);
  std::stringstream buf;
  buf << in.rdbuf();
  return scenario_from_json_text(buf.str());
}

void save_scenario(const ScenarioConfig& cfg, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write scenario file: " + path);
  out << scenario_to_json_text(cfg);
}

}  // namespace testdg
