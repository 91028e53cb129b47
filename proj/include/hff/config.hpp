#pragma once

#include <string>
#include <vector>

#include <json.hpp>

namespace hff {

enum class StreamMode { kBoth, kRgbOnly, kSrmOnly };

std::string to_string(StreamMode mode);
StreamMode parse_stream_mode(const std::string& text);

struct EntryConfig {
  std::vector<int> widths{16, 32, 64};  // one entry per scale
  std::vector<int> rsa_scales{2};       // 1-based scale indices
  int rsa_kernel = 7;
  // SRM re-injection of RGB features into the high-frequency carry.
  bool multiscale = true;
  StreamMode streams = StreamMode::kBoth;

  int num_scales() const { return static_cast<int>(widths.size()); }
  void validate() const;
};

struct ModelConfig {
  int input_size = 64;
  EntryConfig entry;
  int middle_blocks = 2;
  // DCMA position p runs before middle block p (p == middle_blocks: after the last).
  std::vector<int> dcma_placements{0, 1};
  int dcma_reduction = 4;
  int exit_width = 64;
  int fusion_reduction = 4;
  double loss_s = 30.0;
  double loss_m = 0.35;
  double srm_clip = 2.0;

  int final_extent() const { return input_size >> entry.num_scales(); }
  int final_width() const { return entry.widths.back(); }
  bool two_stream() const { return entry.streams == StreamMode::kBoth; }
  void validate() const;
};

struct TrainConfig {
  double lr = 2e-4;
  int batch_size = 8;
  int epochs = 20;
  unsigned long long seed = 1;
  ModelConfig model;
  // Reads worker count for the image loader; results do not depend on it.
  int loader_threads = 1;
  void validate() const;
};

// JSON keys: lr, batch_size, epochs, seed, input_size, loss_s, loss_m,
// dcma_placements, rsa_scales, and a "model" object for the remaining
// architecture knobs. Unknown keys are rejected.
nlohmann::json to_json(const TrainConfig& config);
TrainConfig train_config_from_json(const nlohmann::json& j);
TrainConfig load_train_config(const std::string& path);

nlohmann::json to_json(const ModelConfig& config);
ModelConfig model_config_from_json(const nlohmann::json& j);

}  // namespace hff
