#include "hff/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <limits>
#include <sstream>

#include "hff/errors.hpp"

namespace hff {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

namespace {

template <typename T>
void put(std::string& out, T v) {
  char buf[sizeof(T)];
  std::memcpy(buf, &v, sizeof(T));
  out.append(buf, sizeof(T));
}

class Reader {
 public:
  explicit Reader(std::string_view bytes) : bytes_(bytes) {}

  template <typename T>
  T get() {
    need(sizeof(T));
    T v;
    std::memcpy(&v, bytes_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return v;
  }

  std::string_view take(std::size_t n) {
    need(n);
    auto s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }

  bool done() const { return pos_ == bytes_.size(); }

 private:
  void need(std::size_t n) const {
    if (bytes_.size() - pos_ < n) throw IoError("checkpoint is truncated");
  }
  std::string_view bytes_;
  std::size_t pos_ = 0;
};

constexpr std::string_view kMagic = "HFF1";

}  // namespace

std::string encode_checkpoint(const Checkpoint& ckpt) {
  std::string out(kMagic);
  put<std::uint32_t>(out, static_cast<std::uint32_t>(ckpt.tensors.size()));
  for (const auto& [name, t] : ckpt.tensors) {
    require(name.size() <= std::numeric_limits<std::uint16_t>::max(), "checkpoint: tensor name too long");
    require(t.rank() <= 255, "checkpoint: tensor rank too large");
    put<std::uint16_t>(out, static_cast<std::uint16_t>(name.size()));
    out.append(name);
    put<std::uint8_t>(out, static_cast<std::uint8_t>(t.rank()));
    for (Index d : t.shape()) put<std::uint32_t>(out, static_cast<std::uint32_t>(d));
    out.append(reinterpret_cast<const char*>(t.data()), static_cast<std::size_t>(t.size()) * sizeof(float));
  }
  const std::string config = ckpt.config.dump();
  put<std::uint32_t>(out, static_cast<std::uint32_t>(config.size()));
  out.append(config);
  return out;
}

Checkpoint decode_checkpoint(std::string_view bytes) {
  Reader in(bytes);
  if (in.take(kMagic.size()) != kMagic) throw IoError("not a checkpoint (bad magic)");
  Checkpoint ckpt;
  const auto count = in.get<std::uint32_t>();
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto len = in.get<std::uint16_t>();
    std::string name(in.take(len));
    const auto rank = in.get<std::uint8_t>();
    Shape shape;
    for (int r = 0; r < rank; ++r) shape.push_back(static_cast<Index>(in.get<std::uint32_t>()));
    Tensor<float> t(shape);
    const auto raw = in.take(static_cast<std::size_t>(t.size()) * sizeof(float));
    std::memcpy(t.data(), raw.data(), raw.size());
    ckpt.tensors.emplace_back(std::move(name), std::move(t));
  }
  const auto len = in.get<std::uint32_t>();
  const auto text = in.take(len);
  if (!in.done()) throw IoError("checkpoint has trailing bytes");
  try {
    ckpt.config = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw IoError(std::string("checkpoint config is not valid JSON: ") + e.what());
  }
  return ckpt;
}

void save_checkpoint(const std::string& path, const Checkpoint& ckpt) {
  const std::string bytes = encode_checkpoint(ckpt);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot create checkpoint " + path);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("failed writing checkpoint " + path);
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint " + path);
  std::ostringstream buf;
  buf << in.rdbuf();
  try {
    return decode_checkpoint(buf.str());
  } catch (const IoError& e) {
    throw IoError(path + ": " + e.what());
  }
}

Checkpoint snapshot(const TwoStreamModel<float>& model, const TrainConfig& config) {
  Checkpoint ckpt;
  for (const auto& p : model.store().params()) ckpt.tensors.emplace_back(p.name, p.var.value());
  ckpt.config = to_json(config);
  return ckpt;
}

TrainConfig checkpoint_config(const Checkpoint& ckpt) { return train_config_from_json(ckpt.config); }

TwoStreamModel<float> restore_model(const Checkpoint& ckpt) {
  const TrainConfig config = checkpoint_config(ckpt);
  TwoStreamModel<float> model(config.model, config.seed);
  auto& params = model.store().params();
  require(params.size() == ckpt.tensors.size(),
          "checkpoint holds " + std::to_string(ckpt.tensors.size()) + " tensors, model expects " +
              std::to_string(params.size()));
  for (const auto& [name, t] : ckpt.tensors) {
    Var<float> v = model.store().get(name);
    require(v.shape() == t.shape(), "checkpoint tensor " + name + " has shape " + to_string(t.shape()) +
                                        ", model expects " + to_string(v.shape()));
    v.mutable_value() = t;
  }
  return model;
}

}  // namespace hff
