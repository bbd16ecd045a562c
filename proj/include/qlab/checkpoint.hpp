#pragma once

#include <filesystem>
#include <optional>
#include <string>

#include "qlab/corpus.hpp"
#include "qlab/models.hpp"
#include "qlab/quant.hpp"

namespace qlab {

inline constexpr int kCheckpointVersion = 1;

// Everything needed to score raw text: the weights, the vocabulary they were
// trained with, and the token cap applied at tokenization.
struct Checkpoint {
  Model model;
  Vocab vocab;
  std::size_t max_tokens = 0;
  std::optional<QuantizedModel> quantized;  // set for quantized checkpoints
};

// JSON with a header (model type, dims, gate order), named tensors
// {shape, data}, and for quantized checkpoints a quantization block with the
// spec and per-tensor / per-site parameters. Output is byte-stable.
std::string checkpoint_to_json(const Checkpoint& ckpt);
Checkpoint checkpoint_from_json(const std::string& text);

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace qlab
