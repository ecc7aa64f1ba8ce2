#include "petsynth/phantom.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <type_traits>

#include "petsynth/errors.hpp"
#include "petsynth/rng.hpp"

namespace petsynth {

namespace {

constexpr double kTwoPi = 6.28318530717958647692;

void require(bool ok, const std::string& msg) {
  if (!ok) throw ContractViolation(msg);
}

void check_range(const Range& r, const std::string& name) {
  require(r.lo < r.hi, "PhantomSpec: range " + name + " is degenerate");
}

void check_inside(const Range& r, const Range& env, const std::string& name) {
  require(r.lo >= env.lo && r.hi <= env.hi,
          "PhantomSpec: range " + name + " leaves the soft-tissue envelope");
}

struct Ellipse {
  double cx = 0, cy = 0, a = 1, b = 1, rot = 0;

  bool contains(double x, double y) const {
    double dx = x - cx, dy = y - cy;
    double c = std::cos(rot), s = std::sin(rot);
    double u = dx * c + dy * s, v = -dx * s + dy * c;
    return (u / a) * (u / a) + (v / b) * (v / b) <= 1.0;
  }
};

// Everything random about one sample, drawn up front in a fixed order so the
// pixel loops stay deterministic and the draw order is easy to audit.
struct Latents {
  double cx, cy, theta, a, b, t_scalp, t_skull;
  Ellipse white;
  std::vector<Ellipse> vents;
  bool has_sinus = false;
  Ellipse sinus;

  double u_cue, rho0;
  double hu_scalp, hu_gray, hu_white, hu_csf;

  double m_air, m_scalp, m_bone, m_gray, m_white, m_csf;
  double bias_amp, bias_kx, bias_ky, bias_px, bias_py;

  double up_gray, up_white, up_scalp, up_csf;
  bool has_lesion = false;
  double les_cx, les_cy, les_r, les_gain;
};

double draw(Rng& rng, const Range& r) { return rng.uniform(r.lo, r.hi); }

Latents draw_latents(const PhantomSpec& sp, Rng& rng) {
  Latents L;
  L.cx = rng.uniform(-sp.center_jitter_mm, sp.center_jitter_mm);
  L.cy = rng.uniform(-sp.center_jitter_mm, sp.center_jitter_mm);
  L.theta = rng.uniform(-sp.rotation_rad, sp.rotation_rad);
  L.a = draw(rng, sp.head_a);
  L.b = draw(rng, sp.head_b);
  L.t_scalp = draw(rng, sp.scalp_thickness);
  L.t_skull = draw(rng, sp.skull_thickness);

  double a3 = L.a - L.t_scalp - L.t_skull;
  double b3 = L.b - L.t_scalp - L.t_skull;
  double ws = draw(rng, sp.white_scale);
  L.white = {rng.uniform(-3.0, 3.0), rng.uniform(-3.0, 3.0), a3 * ws, b3 * ws,
             0.0};

  int n_vent = sp.ventricle_min +
               int(rng.uniform_int(std::uint64_t(sp.ventricle_max - sp.ventricle_min + 1)));
  for (int i = 0; i < n_vent; ++i) {
    Ellipse v;
    if (i < 2) {
      double d = rng.uniform(4.0, 12.0);
      v.cx = i == 0 ? -d : d;
      v.cy = rng.uniform(-6.0, 6.0);
    } else {
      v.cx = rng.uniform(-4.0, 4.0);
      v.cy = -rng.uniform(8.0, 16.0);
    }
    v.a = draw(rng, sp.ventricle_axis);
    v.b = draw(rng, sp.ventricle_axis);
    v.rot = rng.uniform(-0.4, 0.4);
    L.vents.push_back(v);
  }

  L.has_sinus = rng.uniform() < sp.sinus_prob;
  L.sinus = {rng.uniform(-6.0, 6.0), 0.75 * b3 + rng.uniform(-3.0, 3.0),
             draw(rng, sp.sinus_axis), draw(rng, sp.sinus_axis), 0.0};

  // Bone density latent: u is readable from the MR bone intensity, delta is
  // not, so the density is only partially observable by construction.
  L.u_cue = rng.uniform();
  double delta = rng.normal(0.0, sp.bone_cue_sigma);
  double span = sp.bone_hu.hi - sp.bone_hu.lo - 2.0 * sp.bone_margin_hu;
  double z = std::clamp(L.u_cue + delta, 0.0, 1.0);
  L.rho0 = sp.bone_hu.lo + sp.bone_margin_hu + span * z;

  L.hu_scalp = draw(rng, sp.scalp_hu);
  L.hu_gray = draw(rng, sp.gray_hu);
  L.hu_white = draw(rng, sp.white_hu);
  L.hu_csf = draw(rng, sp.csf_hu);

  double j = sp.mr_mean_jitter;
  L.m_air = sp.mr_air;
  L.m_scalp = sp.mr_scalp + rng.uniform(-j, j);
  L.m_bone = sp.mr_bone_lo + (sp.mr_bone_hi - sp.mr_bone_lo) * L.u_cue +
             rng.uniform(-j, j) / 3.0;
  L.m_gray = sp.mr_gray + rng.uniform(-j, j);
  L.m_white = sp.mr_white + rng.uniform(-j, j);
  L.m_csf = sp.mr_csf + rng.uniform(-j, j);
  L.bias_amp = draw(rng, sp.bias_amp);
  L.bias_kx = rng.uniform(0.5, 1.5);
  L.bias_ky = rng.uniform(0.5, 1.5);
  L.bias_px = rng.uniform(0.0, 1.0);
  L.bias_py = rng.uniform(0.0, 1.0);

  L.up_gray = draw(rng, sp.pet_gray);
  L.up_white = L.up_gray / draw(rng, sp.gray_white_ratio);
  L.up_scalp = draw(rng, sp.pet_scalp);
  L.up_csf = draw(rng, sp.pet_csf);
  L.has_lesion = rng.uniform() < sp.lesion_prob;
  double a3b = L.a - L.t_scalp - L.t_skull;
  double b3b = L.b - L.t_scalp - L.t_skull;
  double f = rng.uniform(0.2, 0.6);
  double phi = rng.uniform(0.0, kTwoPi);
  L.les_cx = f * a3b * std::cos(phi);
  L.les_cy = f * b3b * std::sin(phi);
  L.les_r = draw(rng, sp.lesion_radius);
  L.les_gain = draw(rng, sp.lesion_gain);
  return L;
}

// Classify one point (image-frame mm) against the layered ellipses.
Tissue classify(const Latents& L, double x, double y) {
  double dx = x - L.cx, dy = y - L.cy;
  double c = std::cos(L.theta), s = std::sin(L.theta);
  double u = dx * c + dy * s, v = -dx * s + dy * c;

  auto inside = [&](double a, double b) {
    return (u / a) * (u / a) + (v / b) * (v / b) <= 1.0;
  };
  if (!inside(L.a, L.b)) return Tissue::kAir;
  if (!inside(L.a - L.t_scalp, L.b - L.t_scalp)) return Tissue::kScalp;
  double a3 = L.a - L.t_scalp - L.t_skull;
  double b3 = L.b - L.t_scalp - L.t_skull;
  if (!inside(a3, b3)) return Tissue::kBone;
  if (L.has_sinus && L.sinus.contains(u, v)) return Tissue::kAir;
  for (const Ellipse& vent : L.vents)
    if (vent.contains(u, v)) return Tissue::kCsf;
  if (L.white.contains(u, v)) return Tissue::kWhite;
  return Tissue::kGray;
}

}  // namespace

void PhantomSpec::validate() const {
  require(size > 0, "PhantomSpec: size must be positive");
  require(pixel_spacing_mm > 0.0, "PhantomSpec: spacing must be positive");
  check_range(head_a, "head_a");
  check_range(head_b, "head_b");
  require(center_jitter_mm >= 0.0, "PhantomSpec: negative center jitter");
  require(rotation_rad >= 0.0, "PhantomSpec: negative rotation range");
  check_range(scalp_thickness, "scalp_thickness");
  check_range(skull_thickness, "skull_thickness");
  check_range(white_scale, "white_scale");
  require(white_scale.hi < 1.0, "PhantomSpec: white core must stay in brain");
  require(ventricle_min >= 0 && ventricle_max >= ventricle_min,
          "PhantomSpec: bad ventricle counts");
  check_range(ventricle_axis, "ventricle_axis");
  require(sinus_prob >= 0.0 && sinus_prob <= 1.0,
          "PhantomSpec: sinus_prob outside [0,1]");
  check_range(sinus_axis, "sinus_axis");
  check_range(bone_hu, "bone_hu");
  check_range(soft_hu, "soft_hu");
  check_range(scalp_hu, "scalp_hu");
  check_range(gray_hu, "gray_hu");
  check_range(white_hu, "white_hu");
  check_range(csf_hu, "csf_hu");
  check_inside(scalp_hu, soft_hu, "scalp_hu");
  check_inside(gray_hu, soft_hu, "gray_hu");
  check_inside(white_hu, soft_hu, "white_hu");
  check_inside(csf_hu, soft_hu, "csf_hu");
  require(ct_texture_hu >= 0.0 && ct_noise_hu >= 0.0,
          "PhantomSpec: negative CT noise");
  require(bone_margin_hu >= 0.0 &&
              2.0 * bone_margin_hu < bone_hu.hi - bone_hu.lo,
          "PhantomSpec: bone margin eats the whole bone range");
  require(bone_cue_sigma >= 0.0, "PhantomSpec: negative cue sigma");
  require(mr_bone_lo < mr_bone_hi, "PhantomSpec: bone MR cue range degenerate");
  require(mr_mean_jitter >= 0.0, "PhantomSpec: negative MR jitter");
  check_range(bias_amp, "bias_amp");
  require(mr_texture >= 0.0 && mr_noise >= 0.0,
          "PhantomSpec: negative MR noise");
  check_range(pet_gray, "pet_gray");
  check_range(gray_white_ratio, "gray_white_ratio");
  require(gray_white_ratio.lo > 1.0,
          "PhantomSpec: gray/white ratio must exceed 1");
  check_range(pet_scalp, "pet_scalp");
  check_range(pet_csf, "pet_csf");
  require(lesion_prob >= 0.0 && lesion_prob <= 1.0,
          "PhantomSpec: lesion_prob outside [0,1]");
  check_range(lesion_radius, "lesion_radius");
  check_range(lesion_gain, "lesion_gain");
}

Sample generate_sample(const PhantomSpec& spec, std::int64_t index) {
  spec.validate();
  require(index >= 0, "generate_sample: index must be >= 0");
  Rng rng = Rng::fork(spec.seed, std::uint64_t(index));
  Latents L = draw_latents(spec, rng);

  const int n = spec.size;
  const double sp = spec.pixel_spacing_mm;
  const int64_t npix = int64_t(n) * n;

  // Field noise, drawn after the latents in a fixed row-major order.
  std::vector<double> tex(npix), mrn(npix), ctn(npix);
  for (auto& v : tex) v = rng.normal();
  for (auto& v : mrn) v = rng.normal();
  for (auto& v : ctn) v = rng.normal();

  Sample smp;
  smp.id = index;
  smp.mr = Image2D(n, n, sp, Modality::kMR);
  smp.ct = Image2D(n, n, sp, Modality::kCtHu);
  smp.pet = Image2D(n, n, sp, Modality::kPet);
  smp.head_mask = Image2D(n, n, sp, Modality::kMask);
  smp.brain_mask = Image2D(n, n, sp, Modality::kMask);
  smp.labels = Image2D(n, n, sp, Modality::kLabels);

  const double hu[kTissueCount] = {-1000.0,   L.hu_scalp, L.rho0,
                                   L.hu_gray, L.hu_white, L.hu_csf};
  const double mr[kTissueCount] = {L.m_air,  L.m_scalp, L.m_bone,
                                   L.m_gray, L.m_white, L.m_csf};
  const double up[kTissueCount] = {0.0,       L.up_scalp, 0.0,
                                   L.up_gray, L.up_white, L.up_csf};

  for (int iy = 0; iy < n; ++iy) {
    for (int ix = 0; ix < n; ++ix) {
      const int64_t p = int64_t(iy) * n + ix;
      const double px = (ix - 0.5 * (n - 1)) * sp;
      const double py = (iy - 0.5 * (n - 1)) * sp;

      // 3x3 supersampled label fractions: partial volume at every boundary.
      int count[kTissueCount] = {0, 0, 0, 0, 0, 0};
      for (int sy = 0; sy < 3; ++sy)
        for (int sx = 0; sx < 3; ++sx) {
          double qx = px + ((sx - 1) / 3.0) * sp;
          double qy = py + ((sy - 1) / 3.0) * sp;
          ++count[int(classify(L, qx, qy))];
        }
      int majority = 0;
      for (int l = 1; l < kTissueCount; ++l)
        if (count[l] > count[majority]) majority = l;

      double frac[kTissueCount];
      for (int l = 0; l < kTissueCount; ++l) frac[l] = count[l] / 9.0;
      const double tissue_frac = 1.0 - frac[int(Tissue::kAir)];

      smp.labels.values[p] = double(majority);
      const bool is_air = majority == int(Tissue::kAir);
      smp.head_mask.values[p] = is_air ? 0.0 : 1.0;
      const bool is_brain = majority == int(Tissue::kGray) ||
                            majority == int(Tissue::kWhite) ||
                            majority == int(Tissue::kCsf);
      smp.brain_mask.values[p] = is_brain ? 1.0 : 0.0;

      double ct_blend = 0.0, mr_blend = 0.0, pet_blend = 0.0;
      for (int l = 0; l < kTissueCount; ++l) {
        ct_blend += frac[l] * hu[l];
        mr_blend += frac[l] * mr[l];
        pet_blend += frac[l] * up[l];
      }

      if (is_air) {
        smp.ct.values[p] = -1000.0;
      } else {
        double v = ct_blend + (spec.ct_texture_hu * tex[p] +
                               spec.ct_noise_hu * ctn[p]) *
                                  tissue_frac;
        if (majority == int(Tissue::kBone))
          v = std::clamp(v, spec.bone_hu.lo, spec.bone_hu.hi);
        smp.ct.values[p] = std::max(-1000.0, v);
      }

      double bias = 1.0 + L.bias_amp *
                              std::sin(kTwoPi * (L.bias_kx * ix / n + L.bias_px)) *
                              std::sin(kTwoPi * (L.bias_ky * iy / n + L.bias_py));
      smp.mr.values[p] =
          std::max(0.0, mr_blend * bias +
                            spec.mr_texture * tex[p] * tissue_frac +
                            spec.mr_noise * mrn[p]);

      if (is_air) {
        smp.pet.values[p] = 0.0;
      } else {
        // Lesion gain applies in the rotated head frame, same as the anatomy.
        double dx = px - L.cx, dy = py - L.cy;
        double c = std::cos(L.theta), s = std::sin(L.theta);
        double u = dx * c + dy * s, v = -dx * s + dy * c;
        double du = u - L.les_cx, dv = v - L.les_cy;
        double gain =
            L.has_lesion && du * du + dv * dv <= L.les_r * L.les_r ? L.les_gain
                                                                   : 1.0;
        smp.pet.values[p] = std::max(0.0, pet_blend * gain);
      }
    }
  }

  check_image(smp.mr, "generated mr");
  check_image(smp.ct, "generated ct");
  check_image(smp.pet, "generated pet");
  check_image(smp.head_mask, "generated head_mask");
  check_image(smp.brain_mask, "generated brain_mask");
  check_image(smp.labels, "generated labels");
  return smp;
}

namespace {

std::string sample_file_name(std::int64_t id) {
  return strfmt("sample_%05lld.bin", static_cast<long long>(id));
}

template <class T>
std::string join_ids(const std::vector<T>& ids) {
  std::string out;
  for (size_t i = 0; i < ids.size(); ++i) {
    if (i) out += ' ';
    out += std::to_string(ids[i]);
  }
  return out;
}

std::vector<std::int64_t> parse_ids(const std::string& text) {
  std::vector<std::int64_t> out;
  for (const std::string& tok : split(text, ' '))
    if (!tok.empty()) out.push_back(std::stoll(tok));
  return out;
}

void spec_to_manifest(const PhantomSpec& spec, Manifest& m) {
  PhantomSpec tmp = spec;
  visit_phantom_fields(tmp, [&](const char* name, auto& v) {
    using T = std::decay_t<decltype(v)>;
    std::string key = std::string("phantom.") + name;
    if constexpr (std::is_same_v<T, double>)
      m.set(key, v);
    else
      m.set(key, static_cast<std::int64_t>(v));
  });
}

PhantomSpec spec_from_manifest(const Manifest& m) {
  PhantomSpec spec;
  visit_phantom_fields(spec, [&](const char* name, auto& v) {
    using T = std::decay_t<decltype(v)>;
    std::string key = std::string("phantom.") + name;
    if constexpr (std::is_same_v<T, double>)
      v = m.get_double(key);
    else
      v = static_cast<T>(m.get_int(key));
  });
  return spec;
}

}  // namespace

fs::path DatasetIndex::sample_path(std::int64_t id) const {
  return dir / sample_file_name(id);
}

DatasetIndex generate_dataset(const PhantomSpec& spec, int n,
                              const SplitFractions& split, const fs::path& dir) {
  spec.validate();
  require(n > 0, "generate_dataset: n must be positive");
  require(split.train >= 0 && split.val >= 0 && split.test >= 0,
          "generate_dataset: negative split fraction");
  require(std::abs(split.train + split.val + split.test - 1.0) < 1e-9,
          "generate_dataset: split fractions must sum to 1");

  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec)
    throw IoError("generate_dataset: cannot create '" + dir.string() +
                  "': " + ec.message());

  DatasetIndex idx;
  idx.dir = dir;
  idx.spec = spec;
  idx.n = n;
  int n_val = int(n * split.val);
  int n_test = int(n * split.test);
  int n_train = n - n_val - n_test;  // floor remainder goes to train
  for (int i = 0; i < n_train; ++i) idx.train.push_back(i);
  for (int i = 0; i < n_val; ++i) idx.val.push_back(n_train + i);
  for (int i = 0; i < n_test; ++i) idx.test.push_back(n_train + n_val + i);

  Manifest m;
  m.set("dataset.format", std::int64_t(1));
  m.set("dataset.n", std::int64_t(n));
  m.set("dataset.train", std::int64_t(n_train));
  m.set("dataset.val", std::int64_t(n_val));
  m.set("dataset.test", std::int64_t(n_test));
  spec_to_manifest(spec, m);
  m.set("split.train", join_ids(idx.train));
  m.set("split.val", join_ids(idx.val));
  m.set("split.test", join_ids(idx.test));

  for (int id = 0; id < n; ++id) {
    Sample s = generate_sample(spec, id);
    Container c;
    c.put_scalar("meta/id", double(id));
    save_image(c, "mr", s.mr);
    save_image(c, "ct", s.ct);
    save_image(c, "pet", s.pet);
    save_image(c, "head_mask", s.head_mask);
    save_image(c, "brain_mask", s.brain_mask);
    save_image(c, "labels", s.labels);
    fs::path path = idx.sample_path(id);
    c.save(path);
    m.set_hex("hash." + sample_file_name(id), hash_file(path));
  }
  m.save(dir / "manifest.txt");
  return idx;
}

DatasetIndex load_dataset(const fs::path& dir) {
  Manifest m = Manifest::load(dir / "manifest.txt");
  if (m.get_int("dataset.format") != 1)
    throw IoError("load_dataset: unsupported manifest format in '" +
                  dir.string() + "'");
  DatasetIndex idx;
  idx.dir = dir;
  idx.spec = spec_from_manifest(m);
  idx.n = int(m.get_int("dataset.n"));
  idx.train = parse_ids(m.get("split.train"));
  idx.val = parse_ids(m.get("split.val"));
  idx.test = parse_ids(m.get("split.test"));
  return idx;
}

Sample load_sample(const DatasetIndex& index, std::int64_t id) {
  require(id >= 0 && id < index.n, "load_sample: id out of range");
  Container c = Container::load(index.sample_path(id));
  Sample s;
  s.id = std::int64_t(std::llround(c.get_scalar("meta/id")));
  if (s.id != id)
    throw IoError("load_sample: id mismatch in '" +
                  index.sample_path(id).string() + "'");
  s.mr = load_image(c, "mr");
  s.ct = load_image(c, "ct");
  s.pet = load_image(c, "pet");
  s.head_mask = load_image(c, "head_mask");
  s.brain_mask = load_image(c, "brain_mask");
  s.labels = load_image(c, "labels");
  return s;
}

PhantomSpec phantom_spec_from_config(Config& cfg, const PhantomSpec& defaults) {
  PhantomSpec spec = defaults;
  visit_phantom_fields(spec, [&](const char* name, auto& v) {
    using T = std::decay_t<decltype(v)>;
    std::string key = std::string("phantom.") + name;
    if constexpr (std::is_same_v<T, double>)
      v = cfg.get_double(key, v);
    else if constexpr (std::is_same_v<T, int>)
      v = static_cast<int>(cfg.get_int(key, v));
    else
      v = static_cast<std::uint64_t>(
          cfg.get_int(key, static_cast<std::int64_t>(v)));
  });
  return spec;
}

}  // namespace petsynth
