#pragma once

#include "petsynth/image.hpp"
#include "petsynth/projector.hpp"
#include "petsynth/rng.hpp"

namespace petsynth {

// Bilinear HU -> mu conversion at 511 keV. Continuous at HU = 0.
struct MuConfig {
  double mu_water = 0.096;      // cm^-1
  double slope_bone = 5.64e-5;  // cm^-1 per HU above water
};

// mu = mu_water*(HU+1000)/1000 for HU <= 0, mu_water + slope_bone*HU above,
// clamped at 0. Input must be CT-in-HU; output modality is kMu.
Image2D hu_to_mu(const Image2D& ct, const MuConfig& cfg = {});

// Line integrals of img along the geometry's rays (units: value * cm).
Sinogram forward_project(const Image2D& img, const ProjectorGeometry& geom);

// Exact adjoint of forward_project under the same geometry.
Image2D backproject(const Sinogram& sino, const ProjectorGeometry& geom);

// exp(-forward_project(mu)) elementwise; values in (0, 1].
Sinogram attenuation_factors(const Image2D& mu, const ProjectorGeometry& geom);

struct NoiseModel {
  enum class Kind { kNone, kPoisson };
  Kind kind = Kind::kNone;
  double scale = 1e4;  // target mean counts per bin before resampling
  Rng* rng = nullptr;

  static NoiseModel none() { return {}; }
  static NoiseModel poisson(double scale, Rng& rng) {
    NoiseModel m;
    m.kind = Kind::kPoisson;
    m.scale = scale;
    m.rng = &rng;
    return m;
  }
};

// forward_project(pet) * af elementwise; optionally Poisson-resampled after
// scaling the sinogram to `scale` mean counts per bin (then rescaled back).
Sinogram simulate_emission(const Image2D& pet, const Sinogram& af,
                           const ProjectorGeometry& geom,
                           const NoiseModel& noise = NoiseModel::none());

// Multiplicative MLEM with attenuation folded into the system model
// A = diag(af) * R:  lambda <- lambda / (A^T 1) * A^T(em / (A lambda)),
// 0/0 := 0, sensitivity floored at 1e-8. iterations = 0 returns the init.
Image2D mlem_reconstruct(const Sinogram& em, const Sinogram& af,
                         const ProjectorGeometry& geom, int iterations = 100,
                         double init_value = 1.0);

struct ReconConfig {
  int iterations = 100;
  double init_value = 1.0;
  MuConfig mu;
  NoiseModel noise;  // applied to the simulated emission data
};

// Full pseudo-PET protocol: emission is simulated from pet_ref under the TRUE
// CT's attenuation, then reconstructed with the attenuation factors derived
// from pct. pct == true_ct reproduces the reference reconstruction exactly.
Image2D reconstruct_ppet(const Image2D& pct, const Image2D& true_ct,
                         const Image2D& pet_ref, const ProjectorGeometry& geom,
                         const ReconConfig& cfg = {});

}  // namespace petsynth
