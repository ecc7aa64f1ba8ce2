#include "petsynth/container.hpp"

#include <cstring>
#include <fstream>

#include "petsynth/errors.hpp"

namespace petsynth {

namespace {

// This code targets little-endian hosts; serialization is plain memcpy.
template <typename T>
void put_raw(std::string& buf, T v) {
  char tmp[sizeof(T)];
  std::memcpy(tmp, &v, sizeof(T));
  buf.append(tmp, sizeof(T));
}

template <typename T>
T get_raw(const std::vector<char>& buf, std::size_t& off, const std::string& path) {
  if (off + sizeof(T) > buf.size()) throw IoError("truncated container file: " + path);
  T v;
  std::memcpy(&v, buf.data() + off, sizeof(T));
  off += sizeof(T);
  return v;
}

}  // namespace

const NamedTensor& Container::get(const std::string& name) const {
  auto it = tensors_.find(name);
  if (it == tensors_.end()) throw IoError("container has no tensor named '" + name + "'");
  return it->second;
}

NamedTensor& Container::at(const std::string& name) {
  auto it = tensors_.find(name);
  if (it == tensors_.end()) throw IoError("container has no tensor named '" + name + "'");
  return it->second;
}

void Container::put(const std::string& name, std::vector<std::int64_t> extents,
                    std::vector<double> values) {
  NamedTensor t{std::move(extents), std::move(values)};
  if (t.numel() != static_cast<std::int64_t>(t.values.size()))
    throw ContractViolation("Container::put: extents do not match value count for '" + name + "'");
  tensors_[name] = std::move(t);
}

double Container::get_scalar(const std::string& name) const {
  const auto& t = get(name);
  if (t.values.size() != 1) throw IoError("tensor '" + name + "' is not a scalar");
  return t.values[0];
}

std::vector<std::string> Container::names() const {
  std::vector<std::string> out;
  out.reserve(tensors_.size());
  for (const auto& [k, v] : tensors_) out.push_back(k);
  return out;
}

void Container::save(const fs::path& path) const {
  std::string buf;
  buf.append(kMagic, 8);
  put_raw<std::uint32_t>(buf, kVersion);
  put_raw<std::uint32_t>(buf, static_cast<std::uint32_t>(tensors_.size()));
  for (const auto& [name, t] : tensors_) {
    put_raw<std::uint32_t>(buf, static_cast<std::uint32_t>(name.size()));
    buf.append(name);
    put_raw<std::uint32_t>(buf, static_cast<std::uint32_t>(t.extents.size()));
    for (auto e : t.extents) put_raw<std::int64_t>(buf, e);
    for (double v : t.values) put_raw<float>(buf, static_cast<float>(v));
  }
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open file for writing: " + path.string());
  out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
  if (!out) throw IoError("write failed: " + path.string());
}

Container Container::load(const fs::path& path) {
  const auto buf = read_file_bytes(path);
  const std::string pstr = path.string();
  if (buf.size() < 16 || std::memcmp(buf.data(), kMagic, 8) != 0)
    throw IoError("not a tensor container (bad magic): " + pstr);
  std::size_t off = 8;
  const auto version = get_raw<std::uint32_t>(buf, off, pstr);
  if (version != kVersion)
    throw IoError("unsupported container version " + std::to_string(version) + ": " + pstr);
  const auto count = get_raw<std::uint32_t>(buf, off, pstr);
  Container c;
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto name_len = get_raw<std::uint32_t>(buf, off, pstr);
    if (off + name_len > buf.size()) throw IoError("truncated container file: " + pstr);
    std::string name(buf.data() + off, name_len);
    off += name_len;
    const auto rank = get_raw<std::uint32_t>(buf, off, pstr);
    std::vector<std::int64_t> extents(rank);
    std::int64_t numel = 1;
    for (auto& e : extents) {
      e = get_raw<std::int64_t>(buf, off, pstr);
      if (e < 0) throw IoError("negative extent in container: " + pstr);
      numel *= e;
    }
    std::vector<double> values(static_cast<std::size_t>(numel));
    for (auto& v : values) v = get_raw<float>(buf, off, pstr);
    c.put(name, std::move(extents), std::move(values));
  }
  return c;
}

}  // namespace petsynth
