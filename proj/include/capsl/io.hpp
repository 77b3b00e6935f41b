#pragma once

// On-disk formats. Binary files are little-endian regardless of host order.
//
//   embeddings  "EMB1" u32 count, u32 dim, f32[count*dim]; ids in a sidecar
//               text file, one per line
//   images      "IMG1" u32 count, u32 C, u32 H, u32 W, f32 payload
//   masks       "MSK1" u32 count, u32 H, u32 W, u8 payload
//   captions    one flat JSON object per line
//   manifest    one flat JSON object per line {query_id, neighbor_id, similarity}
//   labels      "id<TAB>label" per line
//
// Image and mask ids live in "<path>.ids" next to the payload.

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "capsl/datamodel.hpp"
#include "capsl/error.hpp"

namespace capsl::io {

namespace detail {

inline std::uint32_t to_le(std::uint32_t v) {
  if constexpr (std::endian::native == std::endian::little) return v;
  return ((v & 0xffu) << 24) | ((v & 0xff00u) << 8) | ((v >> 8) & 0xff00u) | (v >> 24);
}

inline void put_u32(std::string& out, std::uint32_t v) {
  v = to_le(v);
  char b[4];
  std::memcpy(b, &v, 4);
  out.append(b, 4);
}

inline void put_f32s(std::string& out, std::span<const float> values) {
  const std::size_t start = out.size();
  out.resize(start + values.size() * 4);
  for (std::size_t i = 0; i < values.size(); ++i) {
    std::uint32_t bits = to_le(std::bit_cast<std::uint32_t>(values[i]));
    std::memcpy(out.data() + start + 4 * i, &bits, 4);
  }
}

class Reader {
 public:
  Reader(std::string bytes, std::string path) : bytes_(std::move(bytes)), path_(std::move(path)) {}

  void expect_magic(std::string_view magic) {
    if (bytes_.size() < magic.size() || std::string_view(bytes_).substr(0, magic.size()) != magic)
      throw FormatError(path_ + ": bad magic, expected '" + std::string(magic) + "'");
    pos_ = magic.size();
  }

  std::uint32_t u32() {
    need(4, "header");
    std::uint32_t v;
    std::memcpy(&v, bytes_.data() + pos_, 4);
    pos_ += 4;
    return to_le(v);
  }

  std::string str(std::size_t n) {
    need(n, "string");
    std::string s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }

  std::vector<float> f32s(std::size_t n) {
    need(n * 4, "payload");
    std::vector<float> out(n);
    for (std::size_t i = 0; i < n; ++i) {
      std::uint32_t bits;
      std::memcpy(&bits, bytes_.data() + pos_ + 4 * i, 4);
      out[i] = std::bit_cast<float>(to_le(bits));
    }
    pos_ += n * 4;
    return out;
  }

  std::vector<std::uint8_t> u8s(std::size_t n) {
    need(n, "payload");
    std::vector<std::uint8_t> out(bytes_.begin() + static_cast<std::ptrdiff_t>(pos_),
                                  bytes_.begin() + static_cast<std::ptrdiff_t>(pos_ + n));
    pos_ += n;
    return out;
  }

  void expect_end() const {
    if (pos_ != bytes_.size())
      throw FormatError(path_ + ": payload length mismatch (" + std::to_string(bytes_.size() - pos_) +
                        " trailing bytes)");
  }

 private:
  void need(std::size_t n, const char* what) const {
    if (bytes_.size() - pos_ < n)
      throw FormatError(path_ + ": truncated " + what + " (payload length mismatch)");
  }

  std::string bytes_;
  std::string path_;
  std::size_t pos_ = 0;
};

}  // namespace detail

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open '" + path.string() + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline void write_file(const std::filesystem::path& path, std::string_view bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot write '" + path.string() + "'");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error("write failed for '" + path.string() + "'");
}

inline std::vector<std::string> split_lines(std::string_view text) {
  std::vector<std::string> lines;
  std::size_t start = 0;
  while (start < text.size()) {
    std::size_t end = text.find('\n', start);
    if (end == std::string_view::npos) end = text.size();
    std::string_view line = text.substr(start, end - start);
    if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
    lines.emplace_back(line);
    start = end + 1;
  }
  return lines;
}

// ---- id lists -------------------------------------------------------------

inline void write_ids(const std::vector<std::string>& ids, const std::filesystem::path& path) {
  std::string out;
  for (const auto& id : ids) {
    if (id.find('\n') != std::string::npos) throw ValidationError("id contains a newline");
    out += id;
    out += '\n';
  }
  write_file(path, out);
}

inline std::vector<std::string> read_ids(const std::filesystem::path& path) {
  std::vector<std::string> ids;
  for (auto& line : split_lines(read_file(path)))
    if (!line.empty()) ids.push_back(std::move(line));
  return ids;
}

inline std::filesystem::path sidecar(const std::filesystem::path& path) { return path.string() + ".ids"; }

// ---- captions -------------------------------------------------------------

inline nlohmann::ordered_json to_json(const CaptionRecord& r) {
  nlohmann::ordered_json j;
  j["id"] = r.id;
  j["caption"] = r.caption;
  if (r.generated_caption) j["generated_caption"] = *r.generated_caption;
  if (r.itm_original) j["itm_original"] = *r.itm_original;
  if (r.itm_generated) j["itm_generated"] = *r.itm_generated;
  if (r.class_hint) j["class_hint"] = *r.class_hint;
  if (r.source) j["source"] = *r.source;
  return j;
}

inline CaptionRecord parse_caption_line(std::string_view line, std::size_t line_no) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(line);
  } catch (const nlohmann::json::parse_error& e) {
    throw ParseError(line_no, std::string("malformed record: ") + e.what());
  }
  if (!j.is_object()) throw ParseError(line_no, "record is not a key-value object");
  auto get_string = [&](const char* key, bool required) -> std::optional<std::string> {
    auto it = j.find(key);
    if (it == j.end()) {
      if (required) throw ParseError(line_no, std::string("missing field \"") + key + "\"");
      return std::nullopt;
    }
    if (!it->is_string()) throw ParseError(line_no, std::string("field \"") + key + "\" must be a string");
    return it->get<std::string>();
  };
  auto get_number = [&](const char* key) -> std::optional<double> {
    auto it = j.find(key);
    if (it == j.end()) return std::nullopt;
    if (!it->is_number()) throw ParseError(line_no, std::string("field \"") + key + "\" must be a number");
    return it->get<double>();
  };
  CaptionRecord r;
  r.id = *get_string("id", true);
  if (r.id.empty()) throw ParseError(line_no, "field \"id\" is empty");
  r.caption = *get_string("caption", true);
  r.generated_caption = get_string("generated_caption", false);
  r.itm_original = get_number("itm_original");
  r.itm_generated = get_number("itm_generated");
  r.class_hint = get_string("class_hint", false);
  r.source = get_string("source", false);
  try {
    validate_record(r);
  } catch (const ValidationError& e) {
    throw ParseError(line_no, e.what());
  }
  return r;
}

inline std::vector<CaptionRecord> parse_captions(std::string_view text) {
  std::vector<CaptionRecord> records;
  const auto lines = split_lines(text);
  for (std::size_t i = 0; i < lines.size(); ++i) {
    if (lines[i].find_first_not_of(" \t") == std::string::npos) continue;
    records.push_back(parse_caption_line(lines[i], i + 1));
  }
  validate_records(records);
  return records;
}

inline std::vector<CaptionRecord> read_captions(const std::filesystem::path& path) {
  return parse_captions(read_file(path));
}

inline std::string format_captions(const std::vector<CaptionRecord>& records) {
  std::string out;
  for (const auto& r : records) {
    out += to_json(r).dump();
    out += '\n';
  }
  return out;
}

inline void write_captions(const std::vector<CaptionRecord>& records, const std::filesystem::path& path) {
  validate_records(records);
  write_file(path, format_captions(records));
}

// ---- embeddings -----------------------------------------------------------

inline std::string encode_embeddings(const EmbeddingMatrix& m) {
  std::string out = "EMB1";
  detail::put_u32(out, static_cast<std::uint32_t>(m.rows()));
  detail::put_u32(out, static_cast<std::uint32_t>(m.dim));
  detail::put_f32s(out, m.data);
  return out;
}

inline EmbeddingMatrix decode_embeddings(std::string bytes, std::vector<std::string> ids, const std::string& path = "<memory>") {
  detail::Reader in(std::move(bytes), path);
  in.expect_magic("EMB1");
  const std::uint32_t count = in.u32();
  const std::uint32_t dim = in.u32();
  if (dim == 0) throw FormatError(path + ": dim must be positive");
  if (count != ids.size())
    throw FormatError(path + ": count " + std::to_string(count) + " does not match " + std::to_string(ids.size()) + " ids");
  EmbeddingMatrix m;
  m.ids = std::move(ids);
  m.dim = dim;
  m.data = in.f32s(static_cast<std::size_t>(count) * dim);
  in.expect_end();
  return m;
}

inline void write_embeddings(const EmbeddingMatrix& m, const std::filesystem::path& path, const std::filesystem::path& ids_path) {
  validate(m);
  write_file(path, encode_embeddings(m));
  write_ids(m.ids, ids_path);
}

inline EmbeddingMatrix read_embeddings(const std::filesystem::path& path, const std::filesystem::path& ids_path) {
  auto m = decode_embeddings(read_file(path), read_ids(ids_path), path.string());
  validate(m);
  return m;
}

// ---- images and masks -----------------------------------------------------

inline std::string encode_images(const ImageTensorSet& s) {
  std::string out = "IMG1";
  detail::put_u32(out, static_cast<std::uint32_t>(s.count()));
  detail::put_u32(out, static_cast<std::uint32_t>(s.shape.channels));
  detail::put_u32(out, static_cast<std::uint32_t>(s.shape.height));
  detail::put_u32(out, static_cast<std::uint32_t>(s.shape.width));
  detail::put_f32s(out, s.data);
  return out;
}

inline ImageTensorSet decode_images(std::string bytes, std::vector<std::string> ids, const std::string& path = "<memory>") {
  detail::Reader in(std::move(bytes), path);
  in.expect_magic("IMG1");
  ImageTensorSet s;
  const std::uint32_t count = in.u32();
  s.shape.channels = in.u32();
  s.shape.height = in.u32();
  s.shape.width = in.u32();
  if (ids.empty()) {
    for (std::uint32_t i = 0; i < count; ++i) ids.push_back(std::to_string(i));
  } else if (ids.size() != count) {
    throw FormatError(path + ": count does not match id sidecar");
  }
  s.ids = std::move(ids);
  s.data = in.f32s(static_cast<std::size_t>(count) * s.shape.size());
  in.expect_end();
  return s;
}

inline void write_images(const ImageTensorSet& s, const std::filesystem::path& path) {
  validate(s);
  write_file(path, encode_images(s));
  write_ids(s.ids, sidecar(path));
}

inline ImageTensorSet read_images(const std::filesystem::path& path) {
  std::vector<std::string> ids;
  if (std::filesystem::exists(sidecar(path))) ids = read_ids(sidecar(path));
  auto s = decode_images(read_file(path), std::move(ids), path.string());
  validate(s);
  return s;
}

inline std::string encode_masks(const MaskSet& s) {
  std::string out = "MSK1";
  detail::put_u32(out, static_cast<std::uint32_t>(s.count()));
  detail::put_u32(out, static_cast<std::uint32_t>(s.height));
  detail::put_u32(out, static_cast<std::uint32_t>(s.width));
  out.append(reinterpret_cast<const char*>(s.data.data()), s.data.size());
  return out;
}

inline MaskSet decode_masks(std::string bytes, std::vector<std::string> ids, const std::string& path = "<memory>") {
  detail::Reader in(std::move(bytes), path);
  in.expect_magic("MSK1");
  MaskSet s;
  const std::uint32_t count = in.u32();
  s.height = in.u32();
  s.width = in.u32();
  if (ids.empty()) {
    for (std::uint32_t i = 0; i < count; ++i) ids.push_back(std::to_string(i));
  } else if (ids.size() != count) {
    throw FormatError(path + ": count does not match id sidecar");
  }
  s.ids = std::move(ids);
  s.data = in.u8s(static_cast<std::size_t>(count) * s.height * s.width);
  in.expect_end();
  validate(s);
  return s;
}

inline void write_masks(const MaskSet& s, const std::filesystem::path& path) {
  validate(s);
  write_file(path, encode_masks(s));
  write_ids(s.ids, sidecar(path));
}

inline MaskSet read_masks(const std::filesystem::path& path) {
  std::vector<std::string> ids;
  if (std::filesystem::exists(sidecar(path))) ids = read_ids(sidecar(path));
  return decode_masks(read_file(path), std::move(ids), path.string());
}

// ---- pair manifest --------------------------------------------------------

inline std::string format_manifest(const PairManifest& p) {
  std::string out;
  for (const auto& e : p.entries) {
    nlohmann::ordered_json j;
    j["query_id"] = e.query_id;
    j["neighbor_id"] = e.neighbor_id;
    j["similarity"] = e.similarity;
    out += j.dump();
    out += '\n';
  }
  return out;
}

inline PairManifest parse_manifest(std::string_view text) {
  PairManifest p;
  const auto lines = split_lines(text);
  for (std::size_t i = 0; i < lines.size(); ++i) {
    if (lines[i].find_first_not_of(" \t") == std::string::npos) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(lines[i]);
    } catch (const nlohmann::json::parse_error& e) {
      throw ParseError(i + 1, std::string("malformed pair: ") + e.what());
    }
    if (!j.is_object() || !j.contains("query_id") || !j.contains("neighbor_id") || !j.contains("similarity") ||
        !j["query_id"].is_string() || !j["neighbor_id"].is_string() || !j["similarity"].is_number())
      throw ParseError(i + 1, "pair needs string query_id, string neighbor_id and numeric similarity");
    PairEntry e{j["query_id"].get<std::string>(), j["neighbor_id"].get<std::string>(), j["similarity"].get<double>()};
    if (e.query_id == e.neighbor_id) throw ParseError(i + 1, "pair points at itself");
    p.entries.push_back(std::move(e));
  }
  return p;
}

inline void write_manifest(const PairManifest& p, const std::filesystem::path& path) { write_file(path, format_manifest(p)); }
inline PairManifest read_manifest(const std::filesystem::path& path) { return parse_manifest(read_file(path)); }

// ---- labels ---------------------------------------------------------------

struct LabelTable {
  std::vector<std::string> ids;
  std::vector<int> labels;
};

inline std::string format_labels(const LabelTable& t) {
  std::string out;
  for (std::size_t i = 0; i < t.ids.size(); ++i) out += t.ids[i] + "\t" + std::to_string(t.labels[i]) + "\n";
  return out;
}

inline LabelTable parse_labels(std::string_view text) {
  LabelTable t;
  const auto lines = split_lines(text);
  for (std::size_t i = 0; i < lines.size(); ++i) {
    const auto& line = lines[i];
    if (line.empty()) continue;
    const auto tab = line.find('\t');
    if (tab == std::string::npos || tab == 0) throw ParseError(i + 1, "expected 'id<TAB>label'");
    int label = 0;
    try {
      std::size_t used = 0;
      label = std::stoi(line.substr(tab + 1), &used);
      if (used != line.size() - tab - 1) throw std::invalid_argument("trailing");
    } catch (const std::exception&) {
      throw ParseError(i + 1, "label is not an integer");
    }
    if (label < 0) throw ParseError(i + 1, "label must be non-negative");
    t.ids.push_back(line.substr(0, tab));
    t.labels.push_back(label);
  }
  index_ids(t.ids);
  return t;
}

inline void write_labels(const LabelTable& t, const std::filesystem::path& path) { write_file(path, format_labels(t)); }
inline LabelTable read_labels(const std::filesystem::path& path) { return parse_labels(read_file(path)); }

// Labels reordered to follow `ids`; every id must be present.
inline std::vector<int> align_labels(const LabelTable& t, std::span<const std::string> ids) {
  std::unordered_map<std::string, int> by_id;
  for (std::size_t i = 0; i < t.ids.size(); ++i) by_id.emplace(t.ids[i], t.labels[i]);
  std::vector<int> out;
  out.reserve(ids.size());
  for (const auto& id : ids) {
    auto it = by_id.find(id);
    if (it == by_id.end()) throw ValidationError("missing label for id '" + id + "'");
    out.push_back(it->second);
  }
  return out;
}

}  // namespace capsl::io
