#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <vector>

#include "petsynth/errors.hpp"
#include "petsynth/physics.hpp"
#include "petsynth/rng.hpp"
#include "petsynth/util.hpp"

using namespace petsynth;

namespace {

// Anti-aliased rasterization of a centered disk: pixel value is the coverage
// fraction (16x16 subsamples) times `value`. Keeps the discrete image close to
// the continuous object the analytic oracles below describe.
Image2D antialiased_disk(int n, double spacing_mm, double radius_mm,
                         double value, Modality m, double background = 0.0) {
  Image2D img(n, n, spacing_mm, m, background);
  const int ss = 16;
  for (int y = 0; y < n; ++y) {
    for (int x = 0; x < n; ++x) {
      double cx = (x - 0.5 * (n - 1)) * spacing_mm;
      double cy = (y - 0.5 * (n - 1)) * spacing_mm;
      int inside = 0;
      for (int sy = 0; sy < ss; ++sy) {
        for (int sx = 0; sx < ss; ++sx) {
          double px = cx + ((sx + 0.5) / ss - 0.5) * spacing_mm;
          double py = cy + ((sy + 0.5) / ss - 0.5) * spacing_mm;
          if (px * px + py * py <= radius_mm * radius_mm) ++inside;
        }
      }
      double frac = double(inside) / (ss * ss);
      img.at(x, y) = background + frac * (value - background);
    }
  }
  return img;
}

double chord_mm(double radius_mm, double offset_mm) {
  double d = radius_mm * radius_mm - offset_mm * offset_mm;
  return d > 0.0 ? 2.0 * std::sqrt(d) : 0.0;
}

double dot(const std::vector<double>& a, const std::vector<double>& b) {
  double s = 0.0;
  for (size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

double nrmse_in_mask(const Image2D& est, const Image2D& ref,
                     const Image2D& mask) {
  double num = 0.0, den = 0.0;
  for (int64_t i = 0; i < ref.numel(); ++i) {
    if (mask.values[i] == 0.0) continue;
    double e = est.values[i] - ref.values[i];
    num += e * e;
    den += ref.values[i] * ref.values[i];
  }
  return std::sqrt(num / den);
}

// Head-like test scene shared by the MLEM and pseudo-PET tests.
struct Scene {
  Image2D ct;
  Image2D pet;
  Image2D head_mask;
  Image2D brain_mask;
};

Scene make_scene(int n, double spacing_mm) {
  Scene s;
  s.ct = Image2D(n, n, spacing_mm, Modality::kCtHu, -1000.0);
  s.pet = Image2D(n, n, spacing_mm, Modality::kPet, 0.0);
  s.head_mask = Image2D(n, n, spacing_mm, Modality::kMask, 0.0);
  s.brain_mask = Image2D(n, n, spacing_mm, Modality::kMask, 0.0);
  double head_r = 0.42 * n * spacing_mm;
  double skull_r = 0.36 * n * spacing_mm;
  double brain_r = 0.30 * n * spacing_mm;
  for (int y = 0; y < n; ++y) {
    for (int x = 0; x < n; ++x) {
      double cx = (x - 0.5 * (n - 1)) * spacing_mm;
      double cy = (y - 0.5 * (n - 1)) * spacing_mm;
      double r = std::sqrt(cx * cx + cy * cy);
      if (r <= head_r) {
        s.head_mask.at(x, y) = 1.0;
        s.ct.at(x, y) = r > skull_r ? 1100.0 : 30.0;
      }
      if (r <= brain_r) {
        s.brain_mask.at(x, y) = 1.0;
        // Smooth radial activity profile; cosine taper avoids a hard edge.
        s.pet.at(x, y) = 100.0 * 0.5 * (1.0 + std::cos(3.14159265358979 * r / brain_r));
      }
    }
  }
  return s;
}

}  // namespace

TEST_CASE("hu_to_mu matches the bilinear formula and clamps at air") {
  Image2D ct(4, 1, 3.0, Modality::kCtHu, 0.0);
  ct.at(0, 0) = -1000.0;
  ct.at(1, 0) = 0.0;
  ct.at(2, 0) = 1000.0;
  ct.at(3, 0) = -500.0;
  Image2D mu = hu_to_mu(ct);
  CHECK(mu.modality == Modality::kMu);
  CHECK(mu.at(0, 0) == 0.0);
  CHECK(mu.at(1, 0) == doctest::Approx(0.096).epsilon(1e-12));
  CHECK(mu.at(2, 0) == doctest::Approx(0.096 + 1000.0 * 5.64e-5).epsilon(1e-12));
  CHECK(mu.at(3, 0) == doctest::Approx(0.096 * 0.5).epsilon(1e-12));
}

TEST_CASE("hu_to_mu is continuous at zero HU") {
  Image2D ct(2, 1, 3.0, Modality::kCtHu, 0.0);
  ct.at(0, 0) = -1e-6;
  ct.at(1, 0) = 1e-6;
  Image2D mu = hu_to_mu(ct);
  CHECK(std::abs(mu.at(0, 0) - 0.096) < 1e-9);
  CHECK(std::abs(mu.at(1, 0) - 0.096) < 1e-9);
}

TEST_CASE("hu_to_mu rejects non-CT input") {
  Image2D pet(2, 2, 3.0, Modality::kPet, 1.0);
  CHECK_THROWS_AS(hu_to_mu(pet), ContractViolation);
}

TEST_CASE("check_image enforces modality invariants") {
  Image2D ct(2, 2, 3.0, Modality::kCtHu, -1000.0);
  CHECK_NOTHROW(check_image(ct, "ct"));
  ct.at(0, 0) = -1500.0;
  CHECK_THROWS_AS(check_image(ct, "ct"), ContractViolation);

  Image2D mask(2, 2, 3.0, Modality::kMask, 0.0);
  mask.at(1, 1) = 1.0;
  CHECK_NOTHROW(check_image(mask, "mask"));
  mask.at(0, 1) = 0.5;
  CHECK_THROWS_AS(check_image(mask, "mask"), ContractViolation);

  Image2D pet(2, 2, 3.0, Modality::kPet, 0.0);
  pet.at(0, 0) = -0.1;
  CHECK_THROWS_AS(check_image(pet, "pet"), ContractViolation);
}

TEST_CASE("forward projection of a zero image is a zero sinogram") {
  auto geom = ProjectorGeometry::standard(32, 32, 3.0, 24);
  Image2D img = geom.make_image(Modality::kPet, 0.0);
  Sinogram s = forward_project(img, geom);
  for (double v : s.values) CHECK(v == 0.0);
}

TEST_CASE("forward projection is homogeneous and additive") {
  auto geom = ProjectorGeometry::standard(32, 32, 3.0, 24);
  Rng rng(11);
  Image2D a = geom.make_image(Modality::kMR);
  Image2D b = geom.make_image(Modality::kMR);
  for (auto& v : a.values) v = rng.uniform();
  for (auto& v : b.values) v = rng.uniform();
  double alpha = 1.7, beta = -0.6;
  Image2D mix = geom.make_image(Modality::kMR);
  for (int64_t i = 0; i < mix.numel(); ++i)
    mix.values[i] = alpha * a.values[i] + beta * b.values[i];
  Sinogram sa = forward_project(a, geom);
  Sinogram sb = forward_project(b, geom);
  Sinogram sm = forward_project(mix, geom);
  double max_ref = 0.0;
  for (double v : sa.values) max_ref = std::max(max_ref, std::abs(v));
  for (int64_t i = 0; i < sm.numel(); ++i) {
    double want = alpha * sa.values[i] + beta * sb.values[i];
    CHECK(std::abs(sm.values[i] - want) < 1e-6 * std::max(1.0, max_ref));
  }

  // Pure scaling distributes through every product in the sum exactly.
  Image2D a2 = a;
  for (auto& v : a2.values) v *= 2.0;
  Sinogram sa2 = forward_project(a2, geom);
  for (int64_t i = 0; i < sa2.numel(); ++i)
    CHECK(sa2.values[i] == 2.0 * sa.values[i]);
}

TEST_CASE("forward projection matches the disk chord-length profile") {
  auto geom = ProjectorGeometry::standard(64, 64, 3.0, 96);
  double r = 72.0, v = 2.5;
  Image2D disk = antialiased_disk(64, 3.0, r, v, Modality::kPet);
  Sinogram s = forward_project(disk, geom);
  int checked = 0;
  for (int a : {0, 17, 48, 80}) {
    for (int b = 0; b < s.n_bins; ++b) {
      double off = s.bin_offset_mm(b);
      if (std::abs(off) >= 0.9 * r) continue;
      double want = v * chord_mm(r, off) * 0.1;  // mm -> cm
      double got = s.at(a, b);
      CHECK(std::abs(got - want) / want < 0.02);
      ++checked;
    }
  }
  CHECK(checked > 100);
}

TEST_CASE("adjoint identity holds for random image/sinogram pairs") {
  for (auto dims : {std::pair<int, int>{32, 48}, {64, 96}}) {
    auto geom = ProjectorGeometry::standard(dims.first, dims.first, 3.0, dims.second);
    Rng rng(99);
    for (int trial = 0; trial < 20; ++trial) {
      Image2D x = geom.make_image(Modality::kMR);
      Sinogram y = geom.make_sinogram();
      for (auto& v : x.values) v = rng.normal();
      for (auto& v : y.values) v = rng.normal();
      Sinogram rx = forward_project(x, geom);
      Image2D rty = backproject(y, geom);
      double lhs = dot(rx.values, y.values);
      double rhs = dot(x.values, rty.values);
      double denom = std::max({std::abs(lhs), std::abs(rhs), 1e-30});
      CHECK(std::abs(lhs - rhs) / denom < 1e-6);
    }
  }
}

TEST_CASE("backprojection of ones is positive inside the field of view") {
  auto geom = ProjectorGeometry::standard(32, 32, 3.0, 24);
  Sinogram ones = geom.make_sinogram(1.0);
  Image2D bp = backproject(ones, geom);
  double fov_r = 0.45 * 32 * 3.0;
  for (int y = 0; y < 32; ++y) {
    for (int x = 0; x < 32; ++x) {
      double cx = (x - 15.5) * 3.0, cy = (y - 15.5) * 3.0;
      if (cx * cx + cy * cy <= fov_r * fov_r) CHECK(bp.at(x, y) > 0.0);
    }
  }
  Sinogram zeros = geom.make_sinogram(0.0);
  Image2D bz = backproject(zeros, geom);
  for (double v : bz.values) CHECK(v == 0.0);
}

TEST_CASE("geometry mismatch is rejected") {
  auto geom = ProjectorGeometry::standard(32, 32, 3.0, 24);
  Image2D wrong(16, 16, 3.0, Modality::kMR, 0.0);
  CHECK_THROWS_AS(forward_project(wrong, geom), ContractViolation);
  Sinogram s(10, 10, 3.0);
  CHECK_THROWS_AS(backproject(s, geom), ContractViolation);
}

TEST_CASE("attenuation factors match the analytic disk transmission") {
  auto geom = ProjectorGeometry::standard(64, 64, 3.0, 96);
  double r = 72.0, mu_val = 0.096;
  Image2D mu = antialiased_disk(64, 3.0, r, mu_val, Modality::kMu);
  Sinogram af = attenuation_factors(mu, geom);
  for (double v : af.values) {
    CHECK(v > 0.0);
    CHECK(v <= 1.0);
  }
  for (int b = 0; b < af.n_bins; ++b) {
    double off = af.bin_offset_mm(b);
    double want = std::exp(-mu_val * chord_mm(r, off) * 0.1);
    if (std::abs(off) >= 0.9 * r) continue;
    CHECK(std::abs(af.at(0, b) - want) / want < 0.02);
  }
}

TEST_CASE("attenuation factors are monotone in mu") {
  auto geom = ProjectorGeometry::standard(32, 32, 3.0, 24);
  Image2D mu = antialiased_disk(32, 3.0, 40.0, 0.08, Modality::kMu);
  Sinogram base = attenuation_factors(mu, geom);
  Image2D mu2 = mu;
  mu2.at(16, 16) += 0.05;
  Sinogram bumped = attenuation_factors(mu2, geom);
  for (int64_t i = 0; i < base.numel(); ++i)
    CHECK(bumped.values[i] <= base.values[i] + 1e-15);

  Image2D neg = mu;
  neg.at(3, 3) = -0.01;
  CHECK_THROWS_AS(attenuation_factors(neg, geom), ContractViolation);
}

TEST_CASE("emission with unit attenuation equals the plain projection") {
  auto geom = ProjectorGeometry::standard(32, 32, 3.0, 24);
  Scene sc = make_scene(32, 3.0);
  Sinogram ones = geom.make_sinogram(1.0);
  Sinogram em = simulate_emission(sc.pet, ones, geom);
  Sinogram fp = forward_project(sc.pet, geom);
  for (int64_t i = 0; i < em.numel(); ++i) CHECK(em.values[i] == fp.values[i]);

  Image2D zero_pet = geom.make_image(Modality::kPet, 0.0);
  Sinogram em0 = simulate_emission(zero_pet, ones, geom);
  for (double v : em0.values) CHECK(v == 0.0);
}

TEST_CASE("poisson emission is unbiased within sampling error") {
  auto geom = ProjectorGeometry::standard(32, 32, 3.0, 24);
  Scene sc = make_scene(32, 3.0);
  Image2D mu = hu_to_mu(sc.ct);
  Sinogram af = attenuation_factors(mu, geom);
  Sinogram clean = simulate_emission(sc.pet, af, geom);

  double mean_clean = 0.0;
  for (double v : clean.values) mean_clean += v;
  mean_clean /= double(clean.numel());
  const double scale = 1e4;  // target mean counts per bin
  const double c = scale / mean_clean;

  const int reps = 100;
  Rng rng(7);
  std::vector<double> acc(clean.numel(), 0.0);
  for (int t = 0; t < reps; ++t) {
    NoiseModel nm = NoiseModel::poisson(scale, rng);
    Sinogram noisy = simulate_emission(sc.pet, af, geom, nm);
    for (int64_t i = 0; i < noisy.numel(); ++i) {
      CHECK(noisy.values[i] >= 0.0);
      acc[i] += noisy.values[i];
    }
  }
  int outside3 = 0;
  for (int64_t i = 0; i < clean.numel(); ++i) {
    double mean = acc[i] / reps;
    if (clean.values[i] == 0.0) {
      CHECK(mean == 0.0);
      continue;
    }
    // Var of one draw in sinogram units is v/c; the mean of `reps` draws
    // shrinks it by reps.
    double sigma = std::sqrt(clean.values[i] / (c * reps));
    double d = std::abs(mean - clean.values[i]);
    if (d > 3.0 * sigma) ++outside3;
    CHECK(d <= 4.0 * sigma);
  }
  CHECK(double(outside3) < 0.01 * double(clean.numel()));
}

TEST_CASE("mlem reconstructs noiseless data below five percent error") {
  auto geom = ProjectorGeometry::standard(64, 64, 3.0, 96);
  Scene sc = make_scene(64, 3.0);
  Image2D mu = hu_to_mu(sc.ct);
  Sinogram af = attenuation_factors(mu, geom);
  Sinogram em = simulate_emission(sc.pet, af, geom);

  Image2D r10 = mlem_reconstruct(em, af, geom, 10);
  Image2D r50 = mlem_reconstruct(em, af, geom, 50);
  Image2D r100 = mlem_reconstruct(em, af, geom, 100);
  for (double v : r100.values) CHECK(v >= 0.0);

  double e10 = nrmse_in_mask(r10, sc.pet, sc.head_mask);
  double e50 = nrmse_in_mask(r50, sc.pet, sc.head_mask);
  double e100 = nrmse_in_mask(r100, sc.pet, sc.head_mask);
  CHECK(e50 <= e10);
  CHECK(e100 <= e50);
  CHECK(e100 < 0.05);
}

TEST_CASE("mlem edge cases: zero data, zero iterations, nonnegativity") {
  auto geom = ProjectorGeometry::standard(32, 32, 3.0, 24);
  Sinogram zero_em = geom.make_sinogram(0.0);
  Sinogram af = geom.make_sinogram(1.0);
  Image2D first = mlem_reconstruct(zero_em, af, geom, 1);
  for (double v : first.values) CHECK(v == 0.0);

  Image2D init = mlem_reconstruct(zero_em, af, geom, 0, 0.7);
  for (double v : init.values) CHECK(v == 0.7);

  Rng rng(5);
  Sinogram em = geom.make_sinogram();
  for (auto& v : em.values) v = std::max(0.0, rng.normal(2.0, 1.0));
  for (int iters : {1, 3, 7}) {
    Image2D r = mlem_reconstruct(em, af, geom, iters);
    for (double v : r.values) CHECK(v >= 0.0);
  }
}

TEST_CASE("mlem rejects invalid inputs") {
  auto geom = ProjectorGeometry::standard(32, 32, 3.0, 24);
  Sinogram em = geom.make_sinogram(1.0);
  Sinogram af = geom.make_sinogram(1.0);
  Sinogram bad_em = em;
  bad_em.values[3] = -0.5;
  CHECK_THROWS_AS(mlem_reconstruct(bad_em, af, geom, 1), ContractViolation);
  Sinogram bad_af = af;
  bad_af.values[0] = 1.5;
  CHECK_THROWS_AS(mlem_reconstruct(em, bad_af, geom, 1), ContractViolation);
  bad_af.values[0] = 0.0;
  CHECK_THROWS_AS(mlem_reconstruct(em, bad_af, geom, 1), ContractViolation);
}

TEST_CASE("pseudo-PET with the true CT reproduces the reference bit for bit") {
  auto geom = ProjectorGeometry::standard(64, 64, 3.0, 96);
  Scene sc = make_scene(64, 3.0);
  ReconConfig cfg;
  cfg.iterations = 30;
  Image2D ref = reconstruct_ppet(sc.ct, sc.ct, sc.pet, geom, cfg);
  Image2D again = reconstruct_ppet(sc.ct, sc.ct, sc.pet, geom, cfg);
  for (int64_t i = 0; i < ref.numel(); ++i)
    CHECK(ref.values[i] == again.values[i]);
}

TEST_CASE("a small CT patch error spreads beyond its footprint in pseudo-PET") {
  auto geom = ProjectorGeometry::standard(64, 64, 3.0, 96);
  Scene sc = make_scene(64, 3.0);
  ReconConfig cfg;
  cfg.iterations = 50;

  Image2D ref = reconstruct_ppet(sc.ct, sc.ct, sc.pet, geom, cfg);

  Image2D pct = sc.ct;
  Image2D patch(64, 64, 3.0, Modality::kMask, 0.0);
  for (int dy = -1; dy <= 1; ++dy)
    for (int dx = -1; dx <= 1; ++dx) {
      pct.at(36 + dx, 32 + dy) += 1000.0;
      patch.at(36 + dx, 32 + dy) = 1.0;
    }
  Image2D pp = reconstruct_ppet(pct, sc.ct, sc.pet, geom, cfg);

  Image2D far = dilate_mask(patch, 3);
  double max_outside = 0.0;
  for (int64_t i = 0; i < pp.numel(); ++i) {
    if (sc.brain_mask.values[i] == 0.0 || far.values[i] != 0.0) continue;
    max_outside = std::max(max_outside, std::abs(pp.values[i] - ref.values[i]));
  }
  CHECK(max_outside > 0.0);
}

TEST_CASE("an all-air pseudo CT underestimates brain activity") {
  auto geom = ProjectorGeometry::standard(64, 64, 3.0, 96);
  Scene sc = make_scene(64, 3.0);
  ReconConfig cfg;
  cfg.iterations = 50;
  Image2D ref = reconstruct_ppet(sc.ct, sc.ct, sc.pet, geom, cfg);
  Image2D air = geom.make_image(Modality::kCtHu, -1000.0);
  Image2D pp = reconstruct_ppet(air, sc.ct, sc.pet, geom, cfg);
  double mean_ref = 0.0, mean_pp = 0.0;
  int64_t count = 0;
  for (int64_t i = 0; i < ref.numel(); ++i) {
    if (sc.brain_mask.values[i] == 0.0) continue;
    mean_ref += ref.values[i];
    mean_pp += pp.values[i];
    ++count;
  }
  CHECK(count > 0);
  CHECK(mean_pp / count < mean_ref / count);
}

TEST_CASE("mask dilation grows the footprint by one pixel per pass") {
  Image2D m(9, 9, 3.0, Modality::kMask, 0.0);
  m.at(4, 4) = 1.0;
  Image2D d1 = dilate_mask(m, 1);
  int on = 0;
  for (double v : d1.values) on += v != 0.0;
  CHECK(on == 9);
  Image2D d2 = dilate_mask(m, 2);
  on = 0;
  for (double v : d2.values) on += v != 0.0;
  CHECK(on == 25);
  CHECK(d2.at(2, 2) == 1.0);
  CHECK(d2.at(1, 2) == 0.0);
}

TEST_CASE("images and sinograms round-trip through the container") {
  auto geom = ProjectorGeometry::standard(32, 32, 3.0, 24);
  Scene sc = make_scene(32, 3.0);
  Sinogram s = forward_project(sc.pet, geom);

  Container c;
  save_image(c, "pet", sc.pet);
  save_sinogram(c, "em", s);
  fs::path path = fs::temp_directory_path() / "petsynth_phys_roundtrip.bin";
  c.save(path.string());
  Container back = Container::load(path.string());
  Image2D pet2 = load_image(back, "pet");
  Sinogram s2 = load_sinogram(back, "em");
  fs::remove(path);

  CHECK(pet2.width == 32);
  CHECK(pet2.modality == Modality::kPet);
  CHECK(pet2.pixel_spacing_mm == doctest::Approx(3.0));
  for (int64_t i = 0; i < pet2.numel(); ++i)
    CHECK(pet2.values[i] == doctest::Approx(sc.pet.values[i]).epsilon(1e-6));
  CHECK(s2.n_angles == s.n_angles);
  CHECK(s2.n_bins == s.n_bins);
  CHECK(s2.bin_spacing_mm == doctest::Approx(3.0));
  CHECK(s2.angles[5] == doctest::Approx(s.angles[5]).epsilon(1e-12));
  for (int64_t i = 0; i < s2.numel(); ++i)
    CHECK(s2.values[i] == doctest::Approx(s.values[i]).epsilon(1e-6));
}
