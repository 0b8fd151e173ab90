#pragma once

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"

#include "inctok/detail/mat.hpp"
#include "inctok/detail/sha256.hpp"
#include "inctok/error.hpp"
#include "inctok/version.hpp"

namespace inctok {

// Self-describing tensor container used for checkpoints and backbone weight
// files: a magic string, a length-prefixed JSON header naming every tensor
// and carrying arbitrary metadata, then raw little-endian doubles in header
// order. The same byte stream feeds the weight digests, so a digest pins
// both values and structure.

inline constexpr const char* kContainerMagic = "ITKW1\n";

using NamedTensorRefs = std::vector<std::pair<std::string, const Mat*>>;

namespace detail_serialize {

inline void append_u64(std::string& out, uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(char(uint8_t(v >> (8 * i))));
}

inline uint64_t read_u64(const char* p) {
  uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= uint64_t(uint8_t(p[i])) << (8 * i);
  return v;
}

}  // namespace detail_serialize

inline std::string encode_container(const NamedTensorRefs& tensors,
                                    const nlohmann::json& meta) {
  nlohmann::json header;
  header["format_version"] = kContainerFormatVersion;
  header["meta"] = meta;
  header["tensors"] = nlohmann::json::array();
  for (const auto& [name, mat] : tensors) {
    header["tensors"].push_back({{"name", name}, {"rows", mat->rows}, {"cols", mat->cols}});
  }
  std::string header_str = header.dump();

  std::string out;
  out += kContainerMagic;
  detail_serialize::append_u64(out, header_str.size());
  out += header_str;
  for (const auto& [name, mat] : tensors) {
    size_t start = out.size();
    out.resize(start + mat->v.size() * sizeof(double));
    std::memcpy(out.data() + start, mat->v.data(), mat->v.size() * sizeof(double));
  }
  return out;
}

struct Container {
  std::map<std::string, Mat> tensors;
  std::vector<std::string> tensor_order;
  nlohmann::json meta;

  const Mat& tensor(const std::string& name) const {
    auto it = tensors.find(name);
    require(it != tensors.end(), Errc::checkpoint, "missing tensor: " + name);
    return it->second;
  }
};

inline Container decode_container(const std::string& bytes) {
  size_t magic_len = std::strlen(kContainerMagic);
  require(bytes.size() >= magic_len + 8 &&
              bytes.compare(0, magic_len, kContainerMagic) == 0,
          Errc::checkpoint, "container: bad magic");
  uint64_t header_len = detail_serialize::read_u64(bytes.data() + magic_len);
  size_t header_start = magic_len + 8;
  require(bytes.size() >= header_start + header_len, Errc::checkpoint,
          "container: truncated header");

  nlohmann::json header;
  try {
    header = nlohmann::json::parse(bytes.substr(header_start, header_len));
  } catch (const nlohmann::json::exception& e) {
    fail(Errc::checkpoint, std::string("container: header parse failed: ") + e.what());
  }
  require(header.value("format_version", -1) == kContainerFormatVersion, Errc::checkpoint,
          "container: unsupported format version");

  Container c;
  c.meta = header.value("meta", nlohmann::json::object());
  size_t pos = header_start + header_len;
  for (const auto& t : header.at("tensors")) {
    std::string name = t.at("name").get<std::string>();
    int rows = t.at("rows").get<int>();
    int cols = t.at("cols").get<int>();
    require(rows >= 0 && cols >= 0, Errc::checkpoint, "container: bad tensor shape");
    Mat m(rows, cols);
    size_t nbytes = m.v.size() * sizeof(double);
    require(pos + nbytes <= bytes.size(), Errc::checkpoint, "container: truncated payload");
    std::memcpy(m.v.data(), bytes.data() + pos, nbytes);
    pos += nbytes;
    c.tensor_order.push_back(name);
    c.tensors.emplace(std::move(name), std::move(m));
  }
  require(pos == bytes.size(), Errc::checkpoint, "container: trailing bytes");
  return c;
}

// Writes atomically: a temp file is renamed into place only after a full
// successful write, so a crash can never leave partial state at `path`.
inline void save_container(const std::filesystem::path& path, const NamedTensorRefs& tensors,
                           const nlohmann::json& meta) {
  std::string bytes = encode_container(tensors, meta);
  std::filesystem::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    require(f.good(), Errc::io, "cannot open for write: " + tmp.string());
    f.write(bytes.data(), std::streamsize(bytes.size()));
    require(f.good(), Errc::io, "write failed: " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

inline Container load_container(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  require(f.good(), Errc::io, "cannot open for read: " + path.string());
  std::string bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  return decode_container(bytes);
}

// Digest over the full encoded stream (header + payload).
inline std::string container_digest(const NamedTensorRefs& tensors, const nlohmann::json& meta) {
  return detail::sha256_hex(encode_container(tensors, meta));
}

}  // namespace inctok
