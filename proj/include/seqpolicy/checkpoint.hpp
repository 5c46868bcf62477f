#pragma once

// Checkpoint file.
//
//   "SQPC" | u32 version | u32 body_len | body | u32 crc32(body)
//
// body: str model config | u64 step | u32 n_params |
//       n_params * (str name | u32 rank | i64 dims... | f32 payload) |
//       u8 has_optimizer [u64 adam_step | n_params * (f32 m | f32 v)] |
//       u32 n_streams | n_streams * (str name | str engine state)

#include <map>
#include <string>

#include "seqpolicy/binary_io.hpp"
#include "seqpolicy/model.hpp"
#include "seqpolicy/optim.hpp"

namespace seqpolicy {

inline constexpr char kCheckpointMagic[4] = {'S', 'Q', 'P', 'C'};
inline constexpr uint32_t kCheckpointVersion = 1;

struct Checkpoint {
  ModelConfig config;
  int64_t step = 0;
  ParameterSet<float> params;
  std::optional<AdamState<float>> optimizer;
  std::map<std::string, std::string> streams;  // random stream name -> state

  Model<float> model() const {
    Model<float> m(config);
    for (auto& p : m.params().all()) {
      const auto& src = params.get(p.name);
      if (!(src.shape == p.shape)) fail(ErrorCode::kShape, "checkpoint shape mismatch for '" + p.name + "'");
      p.value = src.value;
    }
    return m;
  }
};

inline Checkpoint make_checkpoint(const Model<float>& model, int64_t step,
                                  const AdamState<float>* optimizer = nullptr,
                                  std::map<std::string, std::string> streams = {}) {
  Checkpoint c;
  c.config = model.config();
  c.step = step;
  c.params = model.params();
  if (optimizer) c.optimizer = *optimizer;
  c.streams = std::move(streams);
  return c;
}

inline std::string encode_checkpoint(const Checkpoint& c) {
  ByteWriter body;
  body.str(c.config.to_text());
  body.i64(c.step);
  const auto& all = c.params.all();
  body.u32(static_cast<uint32_t>(all.size()));
  for (const auto& p : all) {
    body.str(p.name);
    body.u32(static_cast<uint32_t>(p.shape.size()));
    for (int64_t d : p.shape) body.i64(d);
    for (float v : p.value) body.f32(v);
  }
  body.u8(c.optimizer ? 1 : 0);
  if (c.optimizer) {
    require(c.optimizer->m.size() == all.size() || c.optimizer->step == 0, ErrorCode::kShape,
            "optimizer state does not match the parameter set");
    body.u64(c.optimizer->step);
    for (size_t k = 0; k < all.size(); ++k) {
      for (size_t i = 0; i < all[k].size(); ++i)
        body.f32(c.optimizer->m.empty() ? 0.f : c.optimizer->m[k][i]);
      for (size_t i = 0; i < all[k].size(); ++i)
        body.f32(c.optimizer->v.empty() ? 0.f : c.optimizer->v[k][i]);
    }
  }
  body.u32(static_cast<uint32_t>(c.streams.size()));
  for (const auto& [name, state] : c.streams) {
    body.str(name);
    body.str(state);
  }
  ByteWriter out;
  out.bytes(std::string_view(kCheckpointMagic, 4));
  out.u32(kCheckpointVersion);
  out.u32(static_cast<uint32_t>(body.size()));
  out.bytes(body.data());
  out.u32(crc32_of(body.data()));
  return out.take();
}

inline Checkpoint decode_checkpoint(std::string_view data) {
  ByteReader reader(data);
  require(reader.bytes(4) == std::string_view(kCheckpointMagic, 4), ErrorCode::kVersionMismatch,
          "not a checkpoint file");
  const uint32_t version = reader.u32();
  if (!(version == kCheckpointVersion))
    fail(ErrorCode::kVersionMismatch, "unsupported checkpoint version " + std::to_string(version));
  const std::string_view body = reader.bytes(reader.u32());
  require(reader.u32() == crc32_of(body), ErrorCode::kChecksum, "checkpoint checksum mismatch");

  ByteReader r(body);
  Checkpoint c;
  c.config = ModelConfig::from_text(r.str());
  c.step = r.i64();
  const uint32_t n = r.u32();
  for (uint32_t k = 0; k < n; ++k) {
    std::string name = r.str();
    const uint32_t rank = r.u32();
    require(rank >= 1 && rank <= 4, ErrorCode::kShape, "implausible parameter rank");
    std::vector<int64_t> shape;
    for (uint32_t d = 0; d < rank; ++d) shape.push_back(r.i64());
    auto& p = c.params[c.params.add(name, shape)];
    for (auto& v : p.value) v = r.f32();
  }
  if (r.u8()) {
    AdamState<float> s;
    s.step = r.u64();
    for (const auto& p : c.params.all()) {
      s.m.emplace_back(p.size());
      s.v.emplace_back(p.size());
      for (auto& v : s.m.back()) v = r.f32();
      for (auto& v : s.v.back()) v = r.f32();
    }
    c.optimizer = std::move(s);
  }
  const uint32_t streams = r.u32();
  for (uint32_t i = 0; i < streams; ++i) {
    std::string name = r.str();
    c.streams[name] = r.str();
  }
  require(r.done(), ErrorCode::kShape, "trailing bytes inside checkpoint");
  return c;
}

inline void save_checkpoint(const std::string& path, const Checkpoint& c) {
  write_file(path, encode_checkpoint(c));
}
inline Checkpoint load_checkpoint(const std::string& path) { return decode_checkpoint(read_file(path)); }

}  // namespace seqpolicy
