#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "petsynth/container.hpp"
#include "petsynth/image.hpp"

namespace petsynth {

// Parallel-beam sinogram. Rows are angles (uniform over [0, pi)), columns are
// detector bins with centered offsets s_b = (b - (n_bins-1)/2) * bin_spacing.
struct Sinogram {
  int n_angles = 0;
  int n_bins = 0;
  double bin_spacing_mm = 1.0;
  std::vector<double> angles;
  std::vector<double> values;

  Sinogram() = default;
  Sinogram(int n_angles, int n_bins, double bin_spacing_mm, double fill = 0.0);

  int64_t numel() const { return static_cast<int64_t>(n_angles) * n_bins; }
  double& at(int a, int b) { return values[static_cast<size_t>(a) * n_bins + b]; }
  double at(int a, int b) const { return values[static_cast<size_t>(a) * n_bins + b]; }
  double bin_offset_mm(int b) const {
    return (b - 0.5 * (n_bins - 1)) * bin_spacing_mm;
  }
};

void save_sinogram(Container& c, const std::string& name, const Sinogram& s);
Sinogram load_sinogram(const Container& c, const std::string& name);

// One geometry instance ties a forward projector to its exact adjoint.
struct ProjectorGeometry {
  int nx = 0;
  int ny = 0;
  double pixel_spacing_mm = 1.0;
  int n_angles = 0;
  int n_bins = 0;
  double bin_spacing_mm = 1.0;
  std::string ray_model = "ray-bilinear-0.5px";

  // n_bins = smallest odd count covering the image diagonal at pixel spacing.
  static ProjectorGeometry standard(int nx, int ny, double pixel_spacing_mm,
                                    int n_angles);

  bool operator==(const ProjectorGeometry& o) const;
  bool matches(const Image2D& img) const;
  bool matches(const Sinogram& s) const;
  Sinogram make_sinogram(double fill = 0.0) const;
  Image2D make_image(Modality m, double fill = 0.0) const;
};

// Ray-driven line-integral operator realized as an explicit sparse matrix:
// each ray is sampled every half pixel, samples spread over the four bilinear
// neighbours, and weights are scaled by the step length in cm. The adjoint is
// the stored transpose, so <Rx, y> == <x, R^T y> up to rounding.
class Projector {
 public:
  explicit Projector(const ProjectorGeometry& geom);

  Sinogram forward(const Image2D& img) const;
  Image2D adjoint(const Sinogram& sino) const;

  const ProjectorGeometry& geometry() const { return geom_; }
  int64_t nnz() const { return static_cast<int64_t>(weight_.size()); }

 private:
  ProjectorGeometry geom_;
  // CSR over sinogram rows (angle-major), columns indexing image pixels.
  std::vector<int64_t> row_ptr_;
  std::vector<int32_t> col_;
  std::vector<double> weight_;
  // CSR of the transpose: rows are pixels, columns are sinogram entries.
  std::vector<int64_t> t_row_ptr_;
  std::vector<int32_t> t_col_;
  std::vector<double> t_weight_;
};

// Memoized projector lookup: building the sparse matrix costs far more than a
// single application, and all callers with equal geometry share one instance.
const Projector& projector_for(const ProjectorGeometry& geom);

}  // namespace petsynth
