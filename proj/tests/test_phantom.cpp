#include <doctest.h>

#include <cmath>
#include <set>
#include <vector>

#include "petsynth/errors.hpp"
#include "petsynth/phantom.hpp"
#include "petsynth/util.hpp"

using namespace petsynth;

TEST_CASE("generate_sample is deterministic in (seed, index)") {
  PhantomSpec spec;
  Sample a = generate_sample(spec, 7);
  Sample b = generate_sample(spec, 7);
  CHECK(a.mr.values == b.mr.values);
  CHECK(a.ct.values == b.ct.values);
  CHECK(a.pet.values == b.pet.values);
  CHECK(a.head_mask.values == b.head_mask.values);
  CHECK(a.brain_mask.values == b.brain_mask.values);
  CHECK(a.labels.values == b.labels.values);

  Sample c = generate_sample(spec, 8);
  CHECK(a.ct.values != c.ct.values);
  PhantomSpec other = spec;
  other.seed = spec.seed + 1;
  Sample d = generate_sample(other, 7);
  CHECK(a.ct.values != d.ct.values);
}

TEST_CASE("samples satisfy the mask and support invariants") {
  PhantomSpec spec;
  for (int i = 0; i < 100; ++i) {
    Sample s = generate_sample(spec, i);
    check_image(s.mr, "mr");
    check_image(s.ct, "ct");
    check_image(s.pet, "pet");
    check_image(s.head_mask, "head_mask");
    check_image(s.brain_mask, "brain_mask");
    check_image(s.labels, "labels");

    int64_t head = 0, brain = 0, ct_above_air = 0;
    for (int64_t p = 0; p < s.ct.numel(); ++p) {
      if (s.brain_mask.values[p] != 0.0) {
        ++brain;
        CHECK(s.head_mask.values[p] == 1.0);
      }
      if (s.head_mask.values[p] != 0.0) {
        ++head;
        if (s.ct.values[p] > -1000.0) ++ct_above_air;
      } else {
        CHECK(s.ct.values[p] == -1000.0);
        CHECK(s.pet.values[p] == 0.0);
      }
      CHECK(s.pet.values[p] >= 0.0);
    }
    CHECK(brain > 0);
    CHECK(brain < head);
    CHECK(ct_above_air > 0);
  }
}

TEST_CASE("bone-labelled pixels stay inside the configured HU range") {
  PhantomSpec spec;
  int64_t bone_pixels = 0;
  for (int i = 0; i < 100; ++i) {
    Sample s = generate_sample(spec, i);
    for (int64_t p = 0; p < s.ct.numel(); ++p) {
      if (s.labels.values[p] != double(int(Tissue::kBone))) continue;
      ++bone_pixels;
      CHECK(s.ct.values[p] >= spec.bone_hu.lo);
      CHECK(s.ct.values[p] <= spec.bone_hu.hi);
    }
  }
  CHECK(bone_pixels > 5000);
}

TEST_CASE("labels cover the major tissue classes") {
  PhantomSpec spec;
  std::set<int> seen;
  for (int i = 0; i < 20; ++i) {
    Sample s = generate_sample(spec, i);
    for (double v : s.labels.values) seen.insert(int(v));
  }
  CHECK(seen.count(int(Tissue::kAir)) == 1);
  CHECK(seen.count(int(Tissue::kScalp)) == 1);
  CHECK(seen.count(int(Tissue::kBone)) == 1);
  CHECK(seen.count(int(Tissue::kGray)) == 1);
  CHECK(seen.count(int(Tissue::kWhite)) == 1);
  CHECK(seen.count(int(Tissue::kCsf)) == 1);
}

TEST_CASE("no single global affine map explains MR to CT") {
  // Least-squares fit ct ~ alpha*mr + beta over all head pixels of 100
  // samples, then require a large residual. Bright MR (white matter) maps to
  // low HU while dark MR (bone) maps to high HU, so a line cannot fit.
  PhantomSpec spec;
  double sx = 0, sy = 0, sxx = 0, sxy = 0;
  int64_t m = 0;
  std::vector<Sample> samples;
  for (int i = 0; i < 100; ++i) samples.push_back(generate_sample(spec, i));
  for (const Sample& s : samples) {
    for (int64_t p = 0; p < s.ct.numel(); ++p) {
      if (s.head_mask.values[p] == 0.0) continue;
      double x = s.mr.values[p], y = s.ct.values[p];
      sx += x;
      sy += y;
      sxx += x * x;
      sxy += x * y;
      ++m;
    }
  }
  double denom = m * sxx - sx * sx;
  double alpha = (m * sxy - sx * sy) / denom;
  double beta = (sy - alpha * sx) / m;
  double ss = 0;
  for (const Sample& s : samples) {
    for (int64_t p = 0; p < s.ct.numel(); ++p) {
      if (s.head_mask.values[p] == 0.0) continue;
      double r = s.ct.values[p] - alpha * s.mr.values[p] - beta;
      ss += r * r;
    }
  }
  double rms = std::sqrt(ss / m);
  CHECK(rms > 100.0);
}

TEST_CASE("spec validation rejects degenerate ranges") {
  PhantomSpec spec;
  CHECK_NOTHROW(spec.validate());
  PhantomSpec bad = spec;
  bad.head_a = {80.0, 70.0};
  CHECK_THROWS_AS(bad.validate(), ContractViolation);
  bad = spec;
  bad.gray_hu = {25.0, 500.0};  // outside the soft-tissue envelope
  CHECK_THROWS_AS(bad.validate(), ContractViolation);
  bad = spec;
  bad.lesion_prob = 1.5;
  CHECK_THROWS_AS(bad.validate(), ContractViolation);
  bad = spec;
  bad.size = 0;
  CHECK_THROWS_AS(bad.validate(), ContractViolation);
}

TEST_CASE("split sizes follow the floor rule with remainder to train") {
  PhantomSpec spec;
  spec.size = 16;  // keep the files tiny
  fs::path dir = fs::temp_directory_path() / "petsynth_split_test";
  fs::remove_all(dir);
  DatasetIndex idx = generate_dataset(spec, 10, SplitFractions{0.7, 0.1, 0.2}, dir);
  CHECK(idx.train.size() == 7);
  CHECK(idx.val.size() == 1);
  CHECK(idx.test.size() == 2);
  std::set<int64_t> all;
  for (auto v : idx.train) all.insert(v);
  for (auto v : idx.val) all.insert(v);
  for (auto v : idx.test) all.insert(v);
  CHECK(all.size() == 10);
  CHECK(*all.begin() == 0);
  CHECK(*all.rbegin() == 9);
  fs::remove_all(dir);
}

TEST_CASE("dataset regeneration is byte-identical") {
  PhantomSpec spec;
  spec.size = 24;
  fs::path d1 = fs::temp_directory_path() / "petsynth_ds_a";
  fs::path d2 = fs::temp_directory_path() / "petsynth_ds_b";
  fs::remove_all(d1);
  fs::remove_all(d2);
  DatasetIndex i1 = generate_dataset(spec, 6, {}, d1);
  DatasetIndex i2 = generate_dataset(spec, 6, {}, d2);
  CHECK(hash_file(d1 / "manifest.txt") == hash_file(d2 / "manifest.txt"));
  for (int64_t id = 0; id < 6; ++id)
    CHECK(hash_file(i1.sample_path(id)) == hash_file(i2.sample_path(id)));
  fs::remove_all(d1);
  fs::remove_all(d2);
}

TEST_CASE("datasets reload with the same spec, splits and pixel data") {
  PhantomSpec spec;
  spec.size = 24;
  spec.seed = 99;
  fs::path dir = fs::temp_directory_path() / "petsynth_ds_reload";
  fs::remove_all(dir);
  DatasetIndex written = generate_dataset(spec, 6, {}, dir);
  DatasetIndex loaded = load_dataset(dir);
  CHECK(loaded.n == 6);
  CHECK(loaded.spec.seed == 99);
  CHECK(loaded.spec.size == 24);
  CHECK(loaded.spec.bone_cue_sigma == spec.bone_cue_sigma);
  CHECK(loaded.train == written.train);
  CHECK(loaded.val == written.val);
  CHECK(loaded.test == written.test);

  Sample gen = generate_sample(spec, 3);
  Sample disk = load_sample(loaded, 3);
  CHECK(disk.id == 3);
  CHECK(disk.ct.width == 24);
  CHECK(disk.ct.modality == Modality::kCtHu);
  for (int64_t p = 0; p < gen.ct.numel(); ++p) {
    CHECK(disk.ct.values[p] ==
          doctest::Approx(gen.ct.values[p]).epsilon(1e-6).scale(1000));
    CHECK(disk.head_mask.values[p] == gen.head_mask.values[p]);
  }
  fs::remove_all(dir);
}

TEST_CASE("config overrides reach the phantom spec") {
  Config cfg = Config::parse_text(
      "[phantom]\n"
      "size = 32\n"
      "seed = 5\n"
      "bone_hu_lo = 650\n"
      "lesion_prob = 0.0\n");
  PhantomSpec spec = phantom_spec_from_config(cfg);
  cfg.finish();
  CHECK(spec.size == 32);
  CHECK(spec.seed == 5);
  CHECK(spec.bone_hu.lo == 650.0);
  CHECK(spec.lesion_prob == 0.0);
  CHECK(spec.pixel_spacing_mm == 3.0);
}
