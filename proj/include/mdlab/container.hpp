#pragma once

// Tensor container shared by checkpoints, prior sidecars and trace sidecars.
//
//   "MDLB" | u32 version = 1 | u64 config length | config text
//   repeated: u32 name length | name | u64 rank | u64 dims[rank] | f32 payload
//
// All integers and floats little-endian.

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <numeric>
#include <string>
#include <vector>

#include "mdlab/error.hpp"
#include "mdlab/model.hpp"

namespace mdlab::io {

inline constexpr char kMagic[4] = {'M', 'D', 'L', 'B'};
inline constexpr std::uint32_t kVersion = 1;

struct Section {
  std::string name;
  std::vector<std::uint64_t> dims;
  std::vector<float> values;

  std::uint64_t element_count() const {
    return std::accumulate(dims.begin(), dims.end(), std::uint64_t{1}, std::multiplies<>());
  }
};

struct Container {
  std::string config_text;
  std::vector<Section> sections;

  const Section* find(const std::string& name) const {
    for (const auto& s : sections)
      if (s.name == name) return &s;
    return nullptr;
  }

  const Section& at(const std::string& name) const {
    if (const auto* s = find(name)) return *s;
    throw MissingArtifact("container: missing section '" + name + "'");
  }
};

namespace detail {

template <typename U>
void put(std::string& out, U v) {
  for (std::size_t i = 0; i < sizeof(U); ++i) out.push_back(static_cast<char>((static_cast<std::uint64_t>(v) >> (8 * i)) & 0xff));
}

class Reader {
 public:
  explicit Reader(const std::string& bytes) : bytes_(bytes) {}

  template <typename U>
  U get() {
    need(sizeof(U));
    std::uint64_t v = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
    pos_ += sizeof(U);
    return static_cast<U>(v);
  }

  std::string take(std::size_t n) {
    need(n);
    std::string s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }

  bool done() const { return pos_ == bytes_.size(); }

 private:
  void need(std::size_t n) const {
    if (bytes_.size() - pos_ < n) throw std::runtime_error("container: truncated file");
  }
  const std::string& bytes_;
  std::size_t pos_ = 0;
};

}  // namespace detail

inline std::string serialize(const Container& c) {
  std::string out(kMagic, 4);
  detail::put<std::uint32_t>(out, kVersion);
  detail::put<std::uint64_t>(out, c.config_text.size());
  out += c.config_text;
  for (const auto& s : c.sections) {
    if (s.values.size() != s.element_count())
      throw std::invalid_argument("container: section '" + s.name + "' payload does not match its dims");
    detail::put<std::uint32_t>(out, static_cast<std::uint32_t>(s.name.size()));
    out += s.name;
    detail::put<std::uint64_t>(out, s.dims.size());
    for (auto d : s.dims) detail::put<std::uint64_t>(out, d);
    for (float f : s.values) detail::put<std::uint32_t>(out, std::bit_cast<std::uint32_t>(f));
  }
  return out;
}

inline Container deserialize(const std::string& bytes) {
  detail::Reader r(bytes);
  if (r.take(4) != std::string(kMagic, 4)) throw std::runtime_error("container: bad magic");
  const auto version = r.get<std::uint32_t>();
  if (version != kVersion) throw std::runtime_error("container: unsupported version " + std::to_string(version));
  Container c;
  c.config_text = r.take(r.get<std::uint64_t>());
  while (!r.done()) {
    Section s;
    s.name = r.take(r.get<std::uint32_t>());
    const auto rank = r.get<std::uint64_t>();
    if (rank > 8) throw std::runtime_error("container: implausible rank in section '" + s.name + "'");
    for (std::uint64_t i = 0; i < rank; ++i) s.dims.push_back(r.get<std::uint64_t>());
    s.values.resize(s.element_count());
    for (auto& f : s.values) f = std::bit_cast<float>(r.get<std::uint32_t>());
    c.sections.push_back(std::move(s));
  }
  return c;
}

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw MissingArtifact("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

// Write-then-rename so readers never observe a partial file.
inline void write_file_atomic(const std::filesystem::path& path, const std::string& bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write " + tmp.string());
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw std::runtime_error("write failed for " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

inline void save(const std::filesystem::path& path, const Container& c) { write_file_atomic(path, serialize(c)); }
inline Container load(const std::filesystem::path& path) { return deserialize(read_file(path)); }

inline Section to_section(const std::string& name, const num::Matrix& m, int rank) {
  Section s;
  s.name = name;
  if (rank == 1) s.dims = {m.size()};
  else s.dims = {m.rows(), m.cols()};
  s.values = m.data();
  return s;
}

inline Section vector_section(const std::string& name, std::span<const float> v) {
  return Section{name, {v.size()}, std::vector<float>(v.begin(), v.end())};
}

inline num::Matrix to_matrix(const Section& s) {
  if (s.dims.size() == 1) return num::Matrix(1, s.dims[0], s.values);
  if (s.dims.size() == 2) return num::Matrix(s.dims[0], s.dims[1], s.values);
  throw std::runtime_error("container: section '" + s.name + "' is not rank 1 or 2");
}

inline void append_weights(Container& c, const model::Weights<float>& w) {
  w.visit([&](const std::string& name, const num::Matrix& m, int rank) { c.sections.push_back(to_section(name, m, rank)); });
}

inline model::Weights<float> read_weights(const Container& c, const model::ModelSpec& spec) {
  auto w = model::Weights<float>::zeros(spec);
  w.visit([&](const std::string& name, num::Matrix& m, int) {
    const Section& s = c.at(name);
    if (s.values.size() != m.size())
      throw std::runtime_error("checkpoint: tensor '" + name + "' has " + std::to_string(s.values.size()) +
                               " values, expected " + std::to_string(m.size()));
    m = num::Matrix(m.rows(), m.cols(), s.values);
  });
  return w;
}

}  // namespace mdlab::io
