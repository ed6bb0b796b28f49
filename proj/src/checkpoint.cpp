#include "testdg/checkpoint.hpp"

#include <fstream>
#include <sstream>
#include <stdexcept>

#include "json.hpp"

namespace testdg {

using ordered_json = nlohmann::ordered_json;

std::string checkpoint_to_json_text(const EncoderNet& encoder) {
  const ModelConfig& cfg = encoder.config();
  ordered_json j;
  j["schema_version"] = kCheckpointSchemaVersion;
  j["model"] = {{"input_dim", cfg.input_dim},
                {"hidden_width", cfg.hidden_width},
                {"feature_dim", cfg.feature_dim},
                {"encoder_layers", cfg.encoder_layers},
                {"num_classes", cfg.num_classes},
                {"bottleneck", cfg.bottleneck},
                {"domain_dim", cfg.domain_dim},
                {"extractor_hidden", cfg.extractor_hidden},
                {"discriminator_depth", cfg.discriminator_depth},
                {"discriminator_hidden", cfg.discriminator_hidden}};
  j["params"] = ordered_json::array();
  for (const ParamSet::Entry& e : encoder.params().entries()) {
    ordered_json p;
    p["name"] = e.name;
    p["shape"] = e.param->value.shape();
    p["values"] = ordered_json::array();
    for (std::size_t i = 0; i < e.param->value.numel(); ++i)
      p["values"].push_back(e.param->value[i]);
    j["params"].push_back(std::move(p));
  }
  return j.dump(2) + "\n";
}

std::unique_ptr<EncoderNet> checkpoint_from_json_text(const std::string& text) {
  try {
    ordered_json j = ordered_json::parse(text);
    int version = j.at("schema_version").get<int>();
    if (version != kCheckpointSchemaVersion)
      throw std::invalid_argument("unsupported checkpoint schema_version " +
                                  std::to_string(version));
    const ordered_json& m = j.at("model");
    ModelConfig cfg;
    cfg.input_dim = m.at("input_dim").get<std::size_t>();
    cfg.hidden_width = m.at("hidden_width").get<std::size_t>();
    cfg.feature_dim = m.at("feature_dim").get<std::size_t>();
    cfg.encoder_layers = m.at("encoder_layers").get<std::size_t>();
    cfg.num_classes = m.at("num_classes").get<std::size_t>();
    cfg.bottleneck = m.at("bottleneck").get<std::size_t>();
    cfg.domain_dim = m.at("domain_dim").get<std::size_t>();
    cfg.extractor_hidden = m.at("extractor_hidden").get<std::size_t>();
    cfg.discriminator_depth = m.at("discriminator_depth").get<std::size_t>();
    cfg.discriminator_hidden = m.at("discriminator_hidden").get<std::size_t>();

    auto encoder = std::make_unique<EncoderNet>(cfg, Rng(0));
    for (const ordered_json& p : j.at("params")) {
      std::string name = p.at("name").get<std::string>();
      Var param = encoder->params().find(name);
      if (!param) throw std::invalid_argument("checkpoint has unknown parameter " + name);
      std::vector<std::size_t> shape = p.at("shape").get<std::vector<std::size_t>>();
      if (shape != param->value.shape())
        throw std::invalid_argument("checkpoint shape mismatch for " + name);
      const ordered_json& values = p.at("values");
      if (values.size() != param->value.numel())
        throw std::invalid_argument("checkpoint value count mismatch for " + name);
      for (std::size_t i = 0; i < param->value.numel(); ++i)
        param->value[i] = values[i].get<double>();
      ensure_finite(param->value, "checkpoint parameter");
    }
    return encoder;
  } catch (const nlohmann::json::exception& e) {
    throw std::invalid_argument(std::string("checkpoint: ") + e.what());
  }
}

void save_checkpoint(const EncoderNet& encoder, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write checkpoint file: " + path);
  out << checkpoint_to_json_text(encoder);
}

std::unique_ptr<EncoderNet> load_checkpoint(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open checkpoint file: " + path);
  std::stringstream buf;
  buf << in.rdbuf();
  return checkpoint_from_json_text(buf.str());
}

}  // namespace testdg
