#pragma once

// Checkpoint file: "CKPT", u32 format version, u32 length + JSON header
// (encoder spec and objective), u32 parameter count, then per parameter:
// u32 name length, name bytes, u32 rank, u32 dims..., f32 values (LE).

#include <filesystem>
#include <string>

#include <json.hpp>

#include "capsl/encoder.hpp"
#include "capsl/io.hpp"

namespace capsl {

struct Checkpoint {
  EncoderSpec spec;
  std::string objective;
  ParamSet<float> params;
};

inline nlohmann::ordered_json spec_to_json(const EncoderSpec& s) {
  nlohmann::ordered_json j;
  j["input"] = {s.input.channels, s.input.height, s.input.width};
  auto blocks = nlohmann::ordered_json::array();
  for (const auto& b : s.conv_blocks)
    blocks.push_back({{"out_channels", b.out_channels}, {"kernel", b.kernel}, {"stride", b.stride}, {"relu", b.relu}, {"pool", b.pool}});
  j["conv_blocks"] = blocks;
  j["embed_dim"] = s.embed_dim;
  j["proj_dims"] = s.proj_dims;
  j["pred_dims"] = s.pred_dims;
  j["proj_layernorm"] = s.proj_layernorm;
  return j;
}

inline EncoderSpec spec_from_json(const nlohmann::json& j) {
  EncoderSpec s;
  try {
    const auto in = j.at("input");
    s.input = {in.at(0).get<std::size_t>(), in.at(1).get<std::size_t>(), in.at(2).get<std::size_t>()};
    s.conv_blocks.clear();
    for (const auto& b : j.at("conv_blocks"))
      s.conv_blocks.push_back({b.at("out_channels").get<std::size_t>(), b.at("kernel").get<std::size_t>(), b.at("stride").get<std::size_t>(),
                               b.at("relu").get<bool>(), b.at("pool").get<bool>()});
    s.embed_dim = j.at("embed_dim").get<std::size_t>();
    s.proj_dims = j.at("proj_dims").get<std::vector<std::size_t>>();
    s.pred_dims = j.at("pred_dims").get<std::vector<std::size_t>>();
    s.proj_layernorm = j.value("proj_layernorm", false);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("checkpoint: bad encoder spec: ") + e.what());
  }
  validate(s);
  return s;
}

inline std::string encode_checkpoint(const Checkpoint& c) {
  std::string out = "CKPT";
  io::detail::put_u32(out, 1);
  nlohmann::ordered_json header;
  header["encoder"] = spec_to_json(c.spec);
  header["objective"] = c.objective;
  header["init_seed"] = c.params.init_seed;
  const std::string h = header.dump();
  io::detail::put_u32(out, static_cast<std::uint32_t>(h.size()));
  out += h;
  io::detail::put_u32(out, static_cast<std::uint32_t>(c.params.count()));
  for (std::size_t i = 0; i < c.params.count(); ++i) {
    const auto& e = c.params.entries()[i];
    io::detail::put_u32(out, static_cast<std::uint32_t>(e.name.size()));
    out += e.name;
    io::detail::put_u32(out, static_cast<std::uint32_t>(e.shape.size()));
    for (auto d : e.shape) io::detail::put_u32(out, static_cast<std::uint32_t>(d));
    io::detail::put_f32s(out, c.params.value(i));
  }
  return out;
}

inline Checkpoint decode_checkpoint(std::string bytes, const std::string& path = "<memory>") {
  io::detail::Reader in(std::move(bytes), path);
  in.expect_magic("CKPT");
  if (in.u32() != 1) throw FormatError(path + ": unsupported checkpoint version");
  const std::uint32_t header_len = in.u32();
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(in.str(header_len));
  } catch (const nlohmann::json::parse_error& e) {
    throw FormatError(path + ": bad checkpoint header: " + e.what());
  }
  Checkpoint c;
  c.spec = spec_from_json(header.at("encoder"));
  c.objective = header.value("objective", std::string{});
  c.params.init_seed = header.value("init_seed", std::uint64_t{0});
  const std::uint32_t count = in.u32();
  for (std::uint32_t p = 0; p < count; ++p) {
    std::string name = in.str(in.u32());
    const std::uint32_t rank = in.u32();
    std::vector<std::size_t> shape;
    for (std::uint32_t r = 0; r < rank; ++r) shape.push_back(in.u32());
    const std::size_t idx = c.params.add(name, shape);
    const auto vals = in.f32s(c.params.entries()[idx].size);
    std::copy(vals.begin(), vals.end(), c.params.value(idx).begin());
  }
  in.expect_end();
  return c;
}

inline void write_checkpoint(const Checkpoint& c, const std::filesystem::path& path) { io::write_file(path, encode_checkpoint(c)); }
inline Checkpoint read_checkpoint(const std::filesystem::path& path) { return decode_checkpoint(io::read_file(path), path.string()); }

}  // namespace capsl
