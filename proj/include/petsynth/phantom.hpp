#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "petsynth/config.hpp"
#include "petsynth/image.hpp"
#include "petsynth/util.hpp"

namespace petsynth {

// Tissue label ids stored in Sample::labels. Part of the on-disk format.
enum class Tissue : int {
  kAir = 0,
  kScalp = 1,
  kBone = 2,
  kGray = 3,
  kWhite = 4,
  kCsf = 5,
};
constexpr int kTissueCount = 6;

struct Range {
  double lo = 0.0;
  double hi = 0.0;
};

// Full parameterization of the head-phantom generator. The seed plus a sample
// index determines every draw, so a spec echo is enough to regenerate a
// dataset bit for bit.
struct PhantomSpec {
  int size = 64;
  double pixel_spacing_mm = 3.0;
  std::uint64_t seed = 2024;

  // Anatomy (mm unless noted). Layered ellipses: scalp, skull, brain; the
  // brain holds a white-matter core, ventricles and an optional air sinus.
  Range head_a{68.0, 82.0};
  Range head_b{76.0, 88.0};
  double center_jitter_mm = 4.0;
  double rotation_rad = 0.25;
  Range scalp_thickness{5.0, 8.0};
  Range skull_thickness{6.0, 10.0};
  Range white_scale{0.55, 0.68};
  int ventricle_min = 2;
  int ventricle_max = 3;
  Range ventricle_axis{3.0, 10.0};
  double sinus_prob = 0.4;
  Range sinus_axis{3.0, 7.0};

  // CT rendering (HU). Pixels whose majority label is bone are clamped into
  // bone_hu; soft-tissue mean ranges must sit inside soft_hu.
  Range bone_hu{700.0, 1400.0};
  Range soft_hu{-50.0, 80.0};
  Range scalp_hu{30.0, 60.0};
  Range gray_hu{25.0, 45.0};
  Range white_hu{15.0, 32.0};
  Range csf_hu{0.0, 12.0};
  double ct_texture_hu = 20.0;  // gain on the texture field shared with MR
  double ct_noise_hu = 5.0;     // irreducible CT noise

  // Bone density latent: rho0 = lo+margin + span*clip(u + delta, 0, 1) where
  // u is encoded in the MR bone intensity and delta ~ N(0, cue_sigma) is not
  // observable from the MR at all.
  double bone_margin_hu = 50.0;
  double bone_cue_sigma = 0.12;

  // MR rendering (arbitrary intensity units, roughly [0, 1.2]).
  double mr_air = 0.02;
  double mr_scalp = 0.55;
  double mr_bone_lo = 0.10;  // bone intensity at u = 0
  double mr_bone_hi = 0.20;  // bone intensity at u = 1
  double mr_gray = 0.62;
  double mr_white = 0.80;
  double mr_csf = 0.16;
  double mr_mean_jitter = 0.03;
  Range bias_amp{0.08, 0.20};
  double mr_texture = 0.05;
  double mr_noise = 0.015;

  // PET rendering (a.u.). Bone and air take no activity.
  Range pet_gray{90.0, 110.0};
  Range gray_white_ratio{2.5, 4.0};
  Range pet_scalp{5.0, 12.0};
  Range pet_csf{2.0, 8.0};
  double lesion_prob = 0.3;
  Range lesion_radius{4.0, 8.0};
  Range lesion_gain{1.4, 1.9};

  void validate() const;  // throws ContractViolation on degenerate ranges
};

// One field list drives config overrides, the manifest echo and its inverse.
// The visitor receives (name, reference) for every tunable field.
template <class Spec, class F>
void visit_phantom_fields(Spec& s, F&& f) {
  auto range = [&](const char* base, auto& r) {
    f((std::string(base) + "_lo").c_str(), r.lo);
    f((std::string(base) + "_hi").c_str(), r.hi);
  };
  f("size", s.size);
  f("pixel_spacing_mm", s.pixel_spacing_mm);
  f("seed", s.seed);
  range("head_a", s.head_a);
  range("head_b", s.head_b);
  f("center_jitter_mm", s.center_jitter_mm);
  f("rotation_rad", s.rotation_rad);
  range("scalp_thickness", s.scalp_thickness);
  range("skull_thickness", s.skull_thickness);
  range("white_scale", s.white_scale);
  f("ventricle_min", s.ventricle_min);
  f("ventricle_max", s.ventricle_max);
  range("ventricle_axis", s.ventricle_axis);
  f("sinus_prob", s.sinus_prob);
  range("sinus_axis", s.sinus_axis);
  range("bone_hu", s.bone_hu);
  range("soft_hu", s.soft_hu);
  range("scalp_hu", s.scalp_hu);
  range("gray_hu", s.gray_hu);
  range("white_hu", s.white_hu);
  range("csf_hu", s.csf_hu);
  f("ct_texture_hu", s.ct_texture_hu);
  f("ct_noise_hu", s.ct_noise_hu);
  f("bone_margin_hu", s.bone_margin_hu);
  f("bone_cue_sigma", s.bone_cue_sigma);
  f("mr_air", s.mr_air);
  f("mr_scalp", s.mr_scalp);
  f("mr_bone_lo", s.mr_bone_lo);
  f("mr_bone_hi", s.mr_bone_hi);
  f("mr_gray", s.mr_gray);
  f("mr_white", s.mr_white);
  f("mr_csf", s.mr_csf);
  f("mr_mean_jitter", s.mr_mean_jitter);
  range("bias_amp", s.bias_amp);
  f("mr_texture", s.mr_texture);
  f("mr_noise", s.mr_noise);
  range("pet_gray", s.pet_gray);
  range("gray_white_ratio", s.gray_white_ratio);
  range("pet_scalp", s.pet_scalp);
  range("pet_csf", s.pet_csf);
  f("lesion_prob", s.lesion_prob);
  range("lesion_radius", s.lesion_radius);
  range("lesion_gain", s.lesion_gain);
}

struct Sample {
  std::int64_t id = 0;
  Image2D mr;
  Image2D ct;
  Image2D pet;
  Image2D head_mask;
  Image2D brain_mask;
  Image2D labels;
};

// Pure function of (spec.seed, index); see PhantomSpec for the latent model.
Sample generate_sample(const PhantomSpec& spec, std::int64_t index);

struct SplitFractions {
  double train = 0.7;
  double val = 0.1;
  double test = 0.2;
};

struct DatasetIndex {
  fs::path dir;
  PhantomSpec spec;
  int n = 0;
  std::vector<std::int64_t> train;
  std::vector<std::int64_t> val;
  std::vector<std::int64_t> test;

  fs::path sample_path(std::int64_t id) const;
};

// Writes n sample containers plus a manifest (seed, full spec echo, split
// lists, per-file hashes). Split sizes are floor(n*fraction) with the
// remainder assigned to train; ids are assigned contiguously in that order.
DatasetIndex generate_dataset(const PhantomSpec& spec, int n,
                              const SplitFractions& split, const fs::path& dir);

DatasetIndex load_dataset(const fs::path& dir);
Sample load_sample(const DatasetIndex& index, std::int64_t id);

// Reads "phantom.*" keys over the given defaults.
PhantomSpec phantom_spec_from_config(Config& cfg, const PhantomSpec& defaults = {});

}  // namespace petsynth
