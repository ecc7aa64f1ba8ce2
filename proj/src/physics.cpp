#include "petsynth/physics.hpp"

#include <algorithm>
#include <cmath>

#include "petsynth/errors.hpp"
#include "petsynth/util.hpp"

namespace petsynth {

Image2D hu_to_mu(const Image2D& ct, const MuConfig& cfg) {
  if (ct.modality != Modality::kCtHu)
    throw ContractViolation("hu_to_mu: input modality must be CT in HU");
  check_image(ct, "hu_to_mu input");
  Image2D mu(ct.width, ct.height, ct.pixel_spacing_mm, Modality::kMu);
  for (int64_t i = 0; i < ct.numel(); ++i) {
    double hu = ct.values[i];
    double v = hu <= 0.0 ? cfg.mu_water * (hu + 1000.0) / 1000.0
                         : cfg.mu_water + cfg.slope_bone * hu;
    mu.values[i] = std::max(0.0, v);
  }
  return mu;
}

Sinogram forward_project(const Image2D& img, const ProjectorGeometry& geom) {
  return projector_for(geom).forward(img);
}

Image2D backproject(const Sinogram& sino, const ProjectorGeometry& geom) {
  return projector_for(geom).adjoint(sino);
}

Sinogram attenuation_factors(const Image2D& mu, const ProjectorGeometry& geom) {
  if (mu.modality != Modality::kMu)
    throw ContractViolation("attenuation_factors: input modality must be mu");
  check_image(mu, "attenuation_factors input");
  Sinogram af = forward_project(mu, geom);
  for (double& v : af.values) v = std::exp(-v);
  return af;
}

namespace {

void check_af(const Sinogram& af, const ProjectorGeometry& geom,
              const char* who) {
  if (!geom.matches(af))
    throw ContractViolation(std::string(who) +
                            ": attenuation sinogram does not match geometry");
  for (double v : af.values)
    if (!(v > 0.0) || v > 1.0)
      throw ContractViolation(std::string(who) +
                              ": attenuation factors must lie in (0, 1]");
}

void check_em(const Sinogram& em, const ProjectorGeometry& geom,
              const char* who) {
  if (!geom.matches(em))
    throw ContractViolation(std::string(who) +
                            ": emission sinogram does not match geometry");
  for (double v : em.values)
    if (!(v >= 0.0) || !std::isfinite(v))
      throw ContractViolation(std::string(who) +
                              ": emission values must be finite and >= 0");
}

}  // namespace

Sinogram simulate_emission(const Image2D& pet, const Sinogram& af,
                           const ProjectorGeometry& geom,
                           const NoiseModel& noise) {
  if (pet.modality != Modality::kPet)
    throw ContractViolation("simulate_emission: input modality must be PET");
  check_image(pet, "simulate_emission input");
  check_af(af, geom, "simulate_emission");
  Sinogram em = forward_project(pet, geom);
  for (int64_t i = 0; i < em.numel(); ++i) em.values[i] *= af.values[i];
  if (noise.kind == NoiseModel::Kind::kPoisson) {
    if (noise.rng == nullptr)
      throw ContractViolation("simulate_emission: poisson noise needs an rng");
    if (!(noise.scale > 0.0))
      throw ContractViolation("simulate_emission: noise scale must be > 0");
    double mean = 0.0;
    for (double v : em.values) mean += v;
    mean /= double(em.numel());
    if (mean > 0.0) {
      double c = noise.scale / mean;
      for (double& v : em.values)
        v = double(noise.rng->poisson(v * c)) / c;
    }
  }
  return em;
}

Image2D mlem_reconstruct(const Sinogram& em, const Sinogram& af,
                         const ProjectorGeometry& geom, int iterations,
                         double init_value) {
  check_em(em, geom, "mlem_reconstruct");
  check_af(af, geom, "mlem_reconstruct");
  if (iterations < 0)
    throw ContractViolation("mlem_reconstruct: negative iteration count");
  if (!(init_value > 0.0))
    throw ContractViolation("mlem_reconstruct: init must be positive");

  const Projector& proj = projector_for(geom);
  Image2D lambda = geom.make_image(Modality::kPet, init_value);
  if (iterations == 0) return lambda;

  constexpr double kSensFloor = 1e-8;
  Image2D sens = proj.adjoint(af);
  Sinogram ratio = geom.make_sinogram();
  for (int it = 0; it < iterations; ++it) {
    Sinogram fp = proj.forward(lambda);
    for (int64_t i = 0; i < fp.numel(); ++i) {
      double p = af.values[i] * fp.values[i];
      // 0/0 := 0; rays with no support through the image resolve here too.
      ratio.values[i] = p > 0.0 ? af.values[i] * em.values[i] / p : 0.0;
    }
    Image2D back = proj.adjoint(ratio);
    for (int64_t j = 0; j < lambda.numel(); ++j) {
      lambda.values[j] *= back.values[j] / std::max(sens.values[j], kSensFloor);
      if (!std::isfinite(lambda.values[j]))
        throw NumericalError(
            strfmt("mlem_reconstruct: non-finite value at iteration %d", it + 1));
    }
  }
  return lambda;
}

Image2D reconstruct_ppet(const Image2D& pct, const Image2D& true_ct,
                         const Image2D& pet_ref, const ProjectorGeometry& geom,
                         const ReconConfig& cfg) {
  if (!pct.same_grid(true_ct) || !pct.same_grid(pet_ref))
    throw ContractViolation("reconstruct_ppet: inputs must share one grid");
  if (!geom.matches(pct))
    throw ContractViolation("reconstruct_ppet: grid does not match geometry");
  Sinogram af_true = attenuation_factors(hu_to_mu(true_ct, cfg.mu), geom);
  Sinogram em = simulate_emission(pet_ref, af_true, geom, cfg.noise);
  Sinogram af_pct = attenuation_factors(hu_to_mu(pct, cfg.mu), geom);
  return mlem_reconstruct(em, af_pct, geom, cfg.iterations, cfg.init_value);
}

}  // namespace petsynth
