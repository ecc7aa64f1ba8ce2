#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "petsynth/container.hpp"

namespace petsynth {

// Modality tags carry the value-range invariants enforced by check_image().
// Numeric ids are part of the on-disk format; do not reorder.
enum class Modality : int {
  kMR = 0,
  kCtHu = 1,
  kMu = 2,
  kPet = 3,
  kMask = 4,
  kResidual = 5,
  kLabels = 6,
};

const char* modality_name(Modality m);
Modality modality_from_id(int id);

// Dense 2-D image on an isotropic grid. Values are row-major, y*width + x.
// Physical coordinates are centered: pixel (ix, iy) sits at
// ((ix - (width-1)/2) * spacing, (iy - (height-1)/2) * spacing) in mm.
struct Image2D {
  int width = 0;
  int height = 0;
  double pixel_spacing_mm = 1.0;
  Modality modality = Modality::kMR;
  std::vector<double> values;

  Image2D() = default;
  Image2D(int w, int h, double spacing_mm, Modality m, double fill = 0.0);

  int64_t numel() const { return static_cast<int64_t>(width) * height; }
  double& at(int x, int y) { return values[static_cast<size_t>(y) * width + x]; }
  double at(int x, int y) const { return values[static_cast<size_t>(y) * width + x]; }
  bool same_grid(const Image2D& o) const;
};

// Throws ContractViolation if the image breaks its modality invariants:
// CT >= -1000 HU, mu >= 0, PET >= 0, masks in {0,1}; all values finite.
void check_image(const Image2D& img, const std::string& what);

// Binary 3x3 box dilation applied `iterations` times. Input must be a mask.
Image2D dilate_mask(const Image2D& mask, int iterations);

// Container round trip. The pixel grid goes in as tensor `name` ([height,width]);
// spacing and modality go in as "meta/" + name. Values pass through f32 on disk.
void save_image(Container& c, const std::string& name, const Image2D& img);
Image2D load_image(const Container& c, const std::string& name);

}  // namespace petsynth
