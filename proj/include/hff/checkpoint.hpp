#pragma once

#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <json.hpp>

#include "hff/config.hpp"
#include "hff/model.hpp"

namespace hff {

/// Named f32 tensors plus the training configuration that produced them.
///
/// Byte layout (little-endian): "HFF1", u32 tensor count, then per tensor
/// u16 name length, name bytes, u8 rank, rank x u32 extents, f32 values;
/// finally u32 length and the UTF-8 JSON config.
struct Checkpoint {
  std::vector<std::pair<std::string, Tensor<float>>> tensors;
  nlohmann::json config;
};

std::string encode_checkpoint(const Checkpoint& ckpt);
Checkpoint decode_checkpoint(std::string_view bytes);

void save_checkpoint(const std::string& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::string& path);

Checkpoint snapshot(const TwoStreamModel<float>& model, const TrainConfig& config);

/// Rebuilds the model described by the checkpoint's config and installs its
/// tensors. Every parameter must be present with a matching shape.
TwoStreamModel<float> restore_model(const Checkpoint& ckpt);
TrainConfig checkpoint_config(const Checkpoint& ckpt);

}  // namespace hff
