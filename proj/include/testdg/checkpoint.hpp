#ifndef TESTDG_CHECKPOINT_HPP
#define TESTDG_CHECKPOINT_HPP

#include <memory>
#include <string>

#include "testdg/model.hpp"

namespace testdg {

// Versioned JSON dump of the encoder (+head): model dimensions plus named
// parameter arrays with shapes. Doubles are serialized with round-trip
// precision, so a reload is bit-identical.
std::string checkpoint_to_json_text(const EncoderNet& encoder);
std::unique_ptr<EncoderNet> checkpoint_from_json_text(const std::string& text);

void save_checkpoint(const EncoderNet& encoder, const std::string& path);
std::unique_ptr<EncoderNet> load_checkpoint(const std::string& path);

constexpr int kCheckpointSchemaVersion = 1;

}  // namespace testdg

#endif
