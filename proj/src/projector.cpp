#include "petsynth/projector.hpp"

#include <algorithm>
#include <cmath>
#include <memory>
#include <mutex>
#include <utility>

#include "petsynth/errors.hpp"
#include "petsynth/util.hpp"

#ifdef _OPENMP
#include <omp.h>
#endif

namespace petsynth {

namespace {
constexpr double kPi = 3.14159265358979323846;

std::vector<double> uniform_angles(int n_angles) {
  std::vector<double> a(n_angles);
  for (int i = 0; i < n_angles; ++i) a[i] = kPi * i / n_angles;
  return a;
}
}  // namespace

Sinogram::Sinogram(int n_angles_, int n_bins_, double bin_spacing_mm_,
                   double fill)
    : n_angles(n_angles_), n_bins(n_bins_), bin_spacing_mm(bin_spacing_mm_),
      angles(uniform_angles(n_angles_)),
      values(static_cast<size_t>(n_angles_) * n_bins_, fill) {
  if (n_angles_ <= 0 || n_bins_ <= 0 || !(bin_spacing_mm_ > 0.0))
    throw ContractViolation("Sinogram: extents and spacing must be positive");
}

void save_sinogram(Container& c, const std::string& name, const Sinogram& s) {
  c.put(name, {s.n_angles, s.n_bins}, s.values);
  std::vector<double> meta;
  meta.push_back(s.bin_spacing_mm);
  meta.insert(meta.end(), s.angles.begin(), s.angles.end());
  c.put("meta/" + name, {1 + s.n_angles}, std::move(meta));
}

Sinogram load_sinogram(const Container& c, const std::string& name) {
  const NamedTensor& t = c.get(name);
  const NamedTensor& meta = c.get("meta/" + name);
  if (t.extents.size() != 2)
    throw IoError("load_sinogram: tensor '" + name + "' is not 2-D");
  if (meta.numel() != 1 + t.extents[0])
    throw IoError("load_sinogram: bad metadata for '" + name + "'");
  // Angles are uniform by construction; rebuilding them restores full
  // precision after the f32 round trip.
  Sinogram s(static_cast<int>(t.extents[0]), static_cast<int>(t.extents[1]),
             meta.values[0]);
  s.values = t.values;
  return s;
}

ProjectorGeometry ProjectorGeometry::standard(int nx, int ny,
                                              double pixel_spacing_mm,
                                              int n_angles) {
  if (nx <= 0 || ny <= 0 || n_angles <= 0 || !(pixel_spacing_mm > 0.0))
    throw ContractViolation("ProjectorGeometry: positive extents required");
  ProjectorGeometry g;
  g.nx = nx;
  g.ny = ny;
  g.pixel_spacing_mm = pixel_spacing_mm;
  g.n_angles = n_angles;
  int bins = static_cast<int>(std::ceil(std::sqrt(2.0) * std::max(nx, ny)));
  if (bins % 2 == 0) ++bins;
  g.n_bins = bins;
  g.bin_spacing_mm = pixel_spacing_mm;
  return g;
}

bool ProjectorGeometry::operator==(const ProjectorGeometry& o) const {
  return nx == o.nx && ny == o.ny && pixel_spacing_mm == o.pixel_spacing_mm &&
         n_angles == o.n_angles && n_bins == o.n_bins &&
         bin_spacing_mm == o.bin_spacing_mm && ray_model == o.ray_model;
}

bool ProjectorGeometry::matches(const Image2D& img) const {
  return img.width == nx && img.height == ny &&
         img.pixel_spacing_mm == pixel_spacing_mm;
}

bool ProjectorGeometry::matches(const Sinogram& s) const {
  return s.n_angles == n_angles && s.n_bins == n_bins &&
         s.bin_spacing_mm == bin_spacing_mm;
}

Sinogram ProjectorGeometry::make_sinogram(double fill) const {
  return Sinogram(n_angles, n_bins, bin_spacing_mm, fill);
}

Image2D ProjectorGeometry::make_image(Modality m, double fill) const {
  return Image2D(nx, ny, pixel_spacing_mm, m, fill);
}

Projector::Projector(const ProjectorGeometry& geom) : geom_(geom) {
  if (geom.ray_model != "ray-bilinear-0.5px")
    throw ContractViolation("Projector: unknown ray model '" + geom.ray_model +
                            "'");
  const int nx = geom.nx, ny = geom.ny;
  const double sp = geom.pixel_spacing_mm;
  const int64_t n_rows = static_cast<int64_t>(geom.n_angles) * geom.n_bins;
  const int64_t npix = static_cast<int64_t>(nx) * ny;

  const double step_mm = 0.5 * sp;
  const double step_cm = step_mm / 10.0;
  const double half_diag = 0.5 * std::hypot(nx * sp, ny * sp);
  const double reach = half_diag + 2.0 * step_mm;
  const int n_samples = static_cast<int>(std::ceil(2.0 * reach / step_mm)) + 1;

  std::vector<double> angles = uniform_angles(geom.n_angles);
  std::vector<std::vector<std::pair<int32_t, double>>> rows(n_rows);

#ifdef _OPENMP
#pragma omp parallel
#endif
  {
    std::vector<double> scratch(npix, 0.0);
    std::vector<int32_t> touched;
    touched.reserve(1024);
#ifdef _OPENMP
#pragma omp for schedule(static)
#endif
    for (int64_t row = 0; row < n_rows; ++row) {
      const int a = static_cast<int>(row / geom.n_bins);
      const int b = static_cast<int>(row % geom.n_bins);
      const double ct = std::cos(angles[a]);
      const double st = std::sin(angles[a]);
      const double s = (b - 0.5 * (geom.n_bins - 1)) * geom.bin_spacing_mm;
      // Ray through s*(cos,sin), direction (-sin, cos); samples every half
      // pixel spread over the four bilinear neighbours.
      for (int k = 0; k < n_samples; ++k) {
        const double t = (k - 0.5 * (n_samples - 1)) * step_mm;
        const double px = s * ct - t * st;
        const double py = s * st + t * ct;
        const double fx = px / sp + 0.5 * (nx - 1);
        const double fy = py / sp + 0.5 * (ny - 1);
        const int ix = static_cast<int>(std::floor(fx));
        const int iy = static_cast<int>(std::floor(fy));
        const double wx1 = fx - ix, wx0 = 1.0 - wx1;
        const double wy1 = fy - iy, wy0 = 1.0 - wy1;
        const double w[4] = {wx0 * wy0, wx1 * wy0, wx0 * wy1, wx1 * wy1};
        const int xs[4] = {ix, ix + 1, ix, ix + 1};
        const int ys[4] = {iy, iy, iy + 1, iy + 1};
        for (int j = 0; j < 4; ++j) {
          if (w[j] <= 0.0) continue;
          if (xs[j] < 0 || ys[j] < 0 || xs[j] >= nx || ys[j] >= ny) continue;
          const int32_t idx = static_cast<int32_t>(ys[j]) * nx + xs[j];
          if (scratch[idx] == 0.0) touched.push_back(idx);
          scratch[idx] += w[j];
        }
      }
      std::sort(touched.begin(), touched.end());
      auto& out = rows[row];
      out.reserve(touched.size());
      for (int32_t idx : touched) {
        out.emplace_back(idx, scratch[idx] * step_cm);
        scratch[idx] = 0.0;
      }
      touched.clear();
    }
  }

  row_ptr_.assign(n_rows + 1, 0);
  for (int64_t r = 0; r < n_rows; ++r)
    row_ptr_[r + 1] = row_ptr_[r] + static_cast<int64_t>(rows[r].size());
  const int64_t nnz = row_ptr_[n_rows];
  col_.resize(nnz);
  weight_.resize(nnz);
  for (int64_t r = 0; r < n_rows; ++r) {
    int64_t base = row_ptr_[r];
    for (size_t j = 0; j < rows[r].size(); ++j) {
      col_[base + j] = rows[r][j].first;
      weight_[base + j] = rows[r][j].second;
    }
  }

  // Transpose for the adjoint: one pass counting, one pass scattering in row
  // order, so each pixel's entries stay sorted by sinogram row.
  t_row_ptr_.assign(npix + 1, 0);
  for (int64_t i = 0; i < nnz; ++i) ++t_row_ptr_[col_[i] + 1];
  for (int64_t p = 0; p < npix; ++p) t_row_ptr_[p + 1] += t_row_ptr_[p];
  t_col_.resize(nnz);
  t_weight_.resize(nnz);
  std::vector<int64_t> cursor(t_row_ptr_.begin(), t_row_ptr_.end() - 1);
  for (int64_t r = 0; r < n_rows; ++r) {
    for (int64_t i = row_ptr_[r]; i < row_ptr_[r + 1]; ++i) {
      int64_t pos = cursor[col_[i]]++;
      t_col_[pos] = static_cast<int32_t>(r);
      t_weight_[pos] = weight_[i];
    }
  }
}

Sinogram Projector::forward(const Image2D& img) const {
  if (!geom_.matches(img))
    throw ContractViolation("forward_project: image does not match geometry");
  Sinogram out = geom_.make_sinogram();
  const int64_t n_rows = out.numel();
#ifdef _OPENMP
#pragma omp parallel for schedule(static)
#endif
  for (int64_t r = 0; r < n_rows; ++r) {
    double acc = 0.0;
    for (int64_t i = row_ptr_[r]; i < row_ptr_[r + 1]; ++i)
      acc += weight_[i] * img.values[col_[i]];
    out.values[r] = acc;
  }
  return out;
}

Image2D Projector::adjoint(const Sinogram& sino) const {
  if (!geom_.matches(sino))
    throw ContractViolation("backproject: sinogram does not match geometry");
  Image2D out = geom_.make_image(Modality::kResidual);
  const int64_t npix = out.numel();
#ifdef _OPENMP
#pragma omp parallel for schedule(static)
#endif
  for (int64_t p = 0; p < npix; ++p) {
    double acc = 0.0;
    for (int64_t i = t_row_ptr_[p]; i < t_row_ptr_[p + 1]; ++i)
      acc += t_weight_[i] * sino.values[t_col_[i]];
    out.values[p] = acc;
  }
  return out;
}

const Projector& projector_for(const ProjectorGeometry& geom) {
  static std::mutex mu;
  static std::vector<std::unique_ptr<Projector>> cache;
  std::lock_guard<std::mutex> lock(mu);
  for (const auto& p : cache)
    if (p->geometry() == geom) return *p;
  cache.push_back(std::make_unique<Projector>(geom));
  return *cache.back();
}

}  // namespace petsynth
