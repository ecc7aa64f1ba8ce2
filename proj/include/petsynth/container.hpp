#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "petsynth/util.hpp"

namespace petsynth {

/// One named tensor inside a container file. Values are stored as 32-bit
/// floats on disk and widened to double in memory.
struct NamedTensor {
  std::vector<std::int64_t> extents;
  std::vector<double> values;

  std::int64_t numel() const {
    std::int64_t n = 1;
    for (auto e : extents) n *= e;
    return n;
  }
};

/// Little-endian binary container for named tensors. On-disk layout:
///
///   magic    8 bytes  "PSTENS01"
///   version  u32      currently 1
///   count    u32      number of tensors
///   per tensor:
///     name_len u32, name bytes (no terminator),
///     rank u32, extents i64 * rank,
///     values f32 * prod(extents)
///
/// Checkpoints, images and sinograms all use this one format; domain metadata
/// (pixel spacing, modality, projection angles, architecture descriptors)
/// rides along as extra tensors under a "meta/" name prefix.
class Container {
 public:
  static constexpr char kMagic[9] = "PSTENS01";
  static constexpr std::uint32_t kVersion = 1;

  bool has(const std::string& name) const { return tensors_.count(name) != 0; }

  const NamedTensor& get(const std::string& name) const;
  NamedTensor& at(const std::string& name);

  void put(const std::string& name, std::vector<std::int64_t> extents,
           std::vector<double> values);
  void put_scalar(const std::string& name, double v) { put(name, {1}, {v}); }

  double get_scalar(const std::string& name) const;

  std::vector<std::string> names() const;
  std::size_t size() const { return tensors_.size(); }

  void save(const fs::path& path) const;
  static Container load(const fs::path& path);

 private:
  // Ordered map so serialization order is deterministic.
  std::map<std::string, NamedTensor> tensors_;
};

}  // namespace petsynth
