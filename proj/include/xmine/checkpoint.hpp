#pragma once

// Binary checkpoints: "XLMT", u32 version, config block, then every tensor
// in declared order as little-endian f32. Training logs are JSON lines.

#include <cstdint>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "xmine/common.hpp"
#include "xmine/encoder.hpp"
#include "xmine/training.hpp"

namespace xmine::nn {

inline constexpr std::uint32_t kCheckpointVersion = 1;

inline void write_config(std::ostream& os, const EncoderConfig& c) {
  io::write_u32(os, c.n_layers);
  io::write_u32(os, c.n_heads);
  io::write_u32(os, c.d_model);
  io::write_u32(os, c.d_ff);
  io::write_u32(os, c.max_positions);
  io::write_u32(os, c.n_languages);
  io::write_u32(os, c.vocab_size);
  io::write_f32(os, c.dropout);
}

inline EncoderConfig read_config(std::istream& is) {
  EncoderConfig c;
  c.n_layers = io::read_u32(is);
  c.n_heads = io::read_u32(is);
  c.d_model = io::read_u32(is);
  c.d_ff = io::read_u32(is);
  c.max_positions = io::read_u32(is);
  c.n_languages = io::read_u32(is);
  c.vocab_size = io::read_u32(is);
  c.dropout = io::read_f32(is);
  c.validate();
  return c;
}

template <typename T>
void write_checkpoint(std::ostream& os, const EncoderParams<T>& p) {
  io::write_magic(os, "XLMT");
  io::write_u32(os, kCheckpointVersion);
  write_config(os, p.config);
  for (const auto& t : p.tensors()) {
    for (const auto x : t) io::write_f32(os, static_cast<float>(x));
  }
}

inline EncoderParams<float> read_checkpoint(std::istream& is) {
  io::expect_magic(is, "XLMT");
  const auto version = io::read_u32(is);
  if (version != kCheckpointVersion) throw DataError("checkpoint: unsupported version " + std::to_string(version));
  auto p = EncoderParams<float>::zeros(read_config(is));
  for (auto& t : p.tensors()) {
    for (auto& x : t) x = io::read_f32(is);
  }
  if (is.peek() != std::char_traits<char>::eof()) throw DataError("checkpoint: trailing bytes");
  return p;
}

template <typename T>
void save_checkpoint(const std::string& path, const EncoderParams<T>& p) {
  auto os = io::open_out(path, true);
  write_checkpoint(os, p);
  if (!os) throw DataError("checkpoint: write failed for " + path);
}

inline EncoderParams<float> load_checkpoint(const std::string& path) {
  auto is = io::open_in(path, true);
  return read_checkpoint(is);
}

inline void append_train_log(std::ostream& os, const TrainLogEntry& e) {
  nlohmann::json j;
  j["step"] = e.step;
  j["loss"] = e.loss;
  j["lr"] = e.lr;
  os << j.dump() << '\n';
}

inline void write_train_log(const std::string& path, const std::vector<TrainLogEntry>& log) {
  auto os = io::open_out(path);
  for (const auto& e : log) append_train_log(os, e);
}

}  // namespace xmine::nn
