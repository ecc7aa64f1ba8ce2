#include "petsynth/image.hpp"

#include <cmath>

#include "petsynth/errors.hpp"
#include "petsynth/util.hpp"

namespace petsynth {

const char* modality_name(Modality m) {
  switch (m) {
    case Modality::kMR: return "mr";
    case Modality::kCtHu: return "ct_hu";
    case Modality::kMu: return "mu";
    case Modality::kPet: return "pet";
    case Modality::kMask: return "mask";
    case Modality::kResidual: return "residual";
    case Modality::kLabels: return "labels";
  }
  return "unknown";
}

Modality modality_from_id(int id) {
  if (id < 0 || id > 6)
    throw IoError(strfmt("unknown modality id %d", id));
  return static_cast<Modality>(id);
}

Image2D::Image2D(int w, int h, double spacing_mm, Modality m, double fill)
    : width(w), height(h), pixel_spacing_mm(spacing_mm), modality(m),
      values(static_cast<size_t>(w) * h, fill) {
  if (w <= 0 || h <= 0 || !(spacing_mm > 0.0))
    throw ContractViolation("Image2D: extents and spacing must be positive");
}

bool Image2D::same_grid(const Image2D& o) const {
  return width == o.width && height == o.height &&
         pixel_spacing_mm == o.pixel_spacing_mm;
}

void check_image(const Image2D& img, const std::string& what) {
  if (img.numel() != static_cast<int64_t>(img.values.size()))
    throw ContractViolation(what + ": value count does not match extents");
  for (double v : img.values) {
    if (!std::isfinite(v))
      throw ContractViolation(what + ": non-finite value");
    switch (img.modality) {
      case Modality::kCtHu:
        if (v < -1000.0)
          throw ContractViolation(what + ": CT value below -1000 HU");
        break;
      case Modality::kMu:
        if (v < 0.0) throw ContractViolation(what + ": negative mu value");
        break;
      case Modality::kPet:
        if (v < 0.0) throw ContractViolation(what + ": negative PET value");
        break;
      case Modality::kMask:
        if (v != 0.0 && v != 1.0)
          throw ContractViolation(what + ": mask value outside {0,1}");
        break;
      case Modality::kLabels:
        if (v != std::floor(v) || v < 0.0 || v > 5.0)
          throw ContractViolation(what + ": label outside the tissue set");
        break;
      default:
        break;
    }
  }
}

Image2D dilate_mask(const Image2D& mask, int iterations) {
  check_image(mask, "dilate_mask input");
  if (mask.modality != Modality::kMask)
    throw ContractViolation("dilate_mask: input must be a mask");
  if (iterations < 0)
    throw ContractViolation("dilate_mask: negative iteration count");
  Image2D cur = mask;
  for (int it = 0; it < iterations; ++it) {
    Image2D next = cur;
    for (int y = 0; y < cur.height; ++y) {
      for (int x = 0; x < cur.width; ++x) {
        if (cur.at(x, y) != 0.0) continue;
        bool hit = false;
        for (int dy = -1; dy <= 1 && !hit; ++dy) {
          for (int dx = -1; dx <= 1 && !hit; ++dx) {
            int nx = x + dx, ny = y + dy;
            if (nx < 0 || ny < 0 || nx >= cur.width || ny >= cur.height)
              continue;
            hit = cur.at(nx, ny) != 0.0;
          }
        }
        if (hit) next.at(x, y) = 1.0;
      }
    }
    cur = std::move(next);
  }
  return cur;
}

void save_image(Container& c, const std::string& name, const Image2D& img) {
  c.put(name, {img.height, img.width}, img.values);
  c.put("meta/" + name, {2},
        {img.pixel_spacing_mm, double(static_cast<int>(img.modality))});
}

Image2D load_image(const Container& c, const std::string& name) {
  const NamedTensor& t = c.get(name);
  const NamedTensor& meta = c.get("meta/" + name);
  if (t.extents.size() != 2)
    throw IoError("load_image: tensor '" + name + "' is not 2-D");
  if (meta.extents.size() != 1 || meta.numel() != 2)
    throw IoError("load_image: bad metadata for '" + name + "'");
  Image2D img(static_cast<int>(t.extents[1]), static_cast<int>(t.extents[0]),
              meta.values[0],
              modality_from_id(static_cast<int>(std::lround(meta.values[1]))));
  img.values = t.values;
  return img;
}

}  // namespace petsynth
