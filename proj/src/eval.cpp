#include "petsynth/eval.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <limits>
#include <map>
#include <sstream>

#include "petsynth/errors.hpp"

namespace petsynth {

namespace {

void require_same_grid(const Image2D& a, const Image2D& b, const char* what) {
  if (!a.same_grid(b)) {
    throw ContractViolation(strfmt("%s: images are on different grids", what));
  }
}

}  // namespace

double mae_masked(const Image2D& a, const Image2D& b, const Image2D& mask) {
  require_same_grid(a, b, "mae_masked");
  require_same_grid(a, mask, "mae_masked");
  double acc = 0.0;
  double cnt = 0.0;
  for (size_t i = 0; i < a.values.size(); ++i) {
    const double m = mask.values[i];
    acc += m * std::fabs(a.values[i] - b.values[i]);
    cnt += m;
  }
  if (cnt <= 0.0) throw ContractViolation("mae_masked: empty mask");
  return acc / cnt;
}

Image2D zscore_map(const Image2D& pet_ref, const std::vector<Image2D>& samples,
                   const Image2D& mask, double sigma_floor) {
  if (samples.size() < 2) {
    throw ContractViolation("zscore_map: needs at least 2 samples");
  }
  if (!(sigma_floor > 0.0)) {
    throw ContractViolation("zscore_map: sigma_floor must be positive");
  }
  require_same_grid(pet_ref, mask, "zscore_map");
  for (const Image2D& s : samples) require_same_grid(pet_ref, s, "zscore_map");

  const double inv_m = 1.0 / static_cast<double>(samples.size());
  Image2D z(pet_ref.width, pet_ref.height, pet_ref.pixel_spacing_mm,
            Modality::kResidual);
  for (size_t i = 0; i < z.values.size(); ++i) {
    if (mask.values[i] == 0.0) continue;
    double mean = 0.0;
    for (const Image2D& s : samples) mean += s.values[i];
    mean *= inv_m;
    double var = 0.0;
    for (const Image2D& s : samples) {
      const double d = s.values[i] - mean;
      var += d * d;
    }
    var *= inv_m;  // population variance: the M samples are the whole ensemble
    const double sigma = std::max(std::sqrt(var), sigma_floor);
    z.values[i] = (pet_ref.values[i] - mean) / sigma;
  }
  return z;
}

// ---------------------------------------------------------------------------
// Student-t machinery
// ---------------------------------------------------------------------------

namespace {

// Continued fraction for the regularized incomplete beta, evaluated with the
// modified Lentz recurrence. Converges quickly for x < (a+1)/(a+b+2).
double beta_cf(double a, double b, double x) {
  constexpr double kTiny = 1e-300;
  constexpr double kEps = 1e-15;
  const double qab = a + b;
  const double qap = a + 1.0;
  const double qam = a - 1.0;
  double c = 1.0;
  double d = 1.0 - qab * x / qap;
  if (std::fabs(d) < kTiny) d = kTiny;
  d = 1.0 / d;
  double h = d;
  for (int m = 1; m <= 300; ++m) {
    const int m2 = 2 * m;
    double aa = m * (b - m) * x / ((qam + m2) * (a + m2));
    d = 1.0 + aa * d;
    if (std::fabs(d) < kTiny) d = kTiny;
    c = 1.0 + aa / c;
    if (std::fabs(c) < kTiny) c = kTiny;
    d = 1.0 / d;
    h *= d * c;
    aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
    d = 1.0 + aa * d;
    if (std::fabs(d) < kTiny) d = kTiny;
    c = 1.0 + aa / c;
    if (std::fabs(c) < kTiny) c = kTiny;
    d = 1.0 / d;
    const double del = d * c;
    h *= del;
    if (std::fabs(del - 1.0) < kEps) return h;
  }
  throw NumericalError("incomplete_beta: continued fraction did not converge");
}

}  // namespace

double incomplete_beta(double a, double b, double x) {
  if (!(a > 0.0) || !(b > 0.0)) {
    throw ContractViolation("incomplete_beta: a and b must be positive");
  }
  if (!(x >= 0.0 && x <= 1.0)) {
    throw ContractViolation("incomplete_beta: x must lie in [0, 1]");
  }
  if (x == 0.0) return 0.0;
  if (x == 1.0) return 1.0;
  const double log_bt = std::lgamma(a + b) - std::lgamma(a) - std::lgamma(b) +
                        a * std::log(x) + b * std::log1p(-x);
  const double bt = std::exp(log_bt);
  // Use the fraction on whichever side of the crossover converges fast and
  // obtain the other side by symmetry I_x(a,b) = 1 - I_{1-x}(b,a).
  if (x < (a + 1.0) / (a + b + 2.0)) return bt * beta_cf(a, b, x) / a;
  return 1.0 - bt * beta_cf(b, a, 1.0 - x) / b;
}

TTestResult paired_t_test(const std::vector<double>& x,
                          const std::vector<double>& y) {
  if (x.size() != y.size()) {
    throw ContractViolation("paired_t_test: length mismatch");
  }
  if (x.size() < 2) {
    throw ContractViolation("paired_t_test: needs at least 2 pairs");
  }
  const int n = static_cast<int>(x.size());
  double mean = 0.0;
  for (int i = 0; i < n; ++i) {
    const double d = x[i] - y[i];
    if (!std::isfinite(d)) {
      throw NumericalError("paired_t_test: non-finite difference");
    }
    mean += d;
  }
  mean /= n;
  double ss = 0.0;
  for (int i = 0; i < n; ++i) {
    const double d = (x[i] - y[i]) - mean;
    ss += d * d;
  }
  TTestResult r;
  r.n = n;
  if (ss == 0.0) {
    if (mean == 0.0) return r;  // identical inputs: t = 0, p = 1
    r.degenerate = true;        // constant nonzero shift: t undefined
    r.p = std::numeric_limits<double>::quiet_NaN();
    return r;
  }
  const double var = ss / (n - 1);
  r.t = mean / std::sqrt(var / n);
  const double nu = n - 1;
  // Two-sided p for Student-t: I_{nu/(nu+t^2)}(nu/2, 1/2).
  r.p = incomplete_beta(0.5 * nu, 0.5, nu / (nu + r.t * r.t));
  r.p = std::min(1.0, std::max(0.0, r.p));
  return r;
}

// ---------------------------------------------------------------------------
// Sampling-scheme comparison
// ---------------------------------------------------------------------------

double masked_median(const Image2D& map, const Image2D& mask) {
  require_same_grid(map, mask, "masked_median");
  std::vector<double> vals;
  vals.reserve(map.values.size());
  for (size_t i = 0; i < map.values.size(); ++i) {
    if (mask.values[i] != 0.0) vals.push_back(map.values[i]);
  }
  if (vals.empty()) throw ContractViolation("masked_median: empty mask");
  std::sort(vals.begin(), vals.end());
  const size_t n = vals.size();
  if (n % 2 == 1) return vals[n / 2];
  return 0.5 * (vals[n / 2 - 1] + vals[n / 2]);
}

namespace {

Image2D variance_map(const std::vector<Image2D>& samples, const Image2D& mask) {
  const Image2D& first = samples.front();
  Image2D v(first.width, first.height, first.pixel_spacing_mm,
            Modality::kResidual);
  const double inv_m = 1.0 / static_cast<double>(samples.size());
  for (size_t i = 0; i < v.values.size(); ++i) {
    if (mask.values[i] == 0.0) continue;
    double mean = 0.0;
    for (const Image2D& s : samples) mean += s.values[i];
    mean *= inv_m;
    double var = 0.0;
    for (const Image2D& s : samples) {
      const double d = s.values[i] - mean;
      var += d * d;
    }
    v.values[i] = var * inv_m;
  }
  return v;
}

Image2D abs_map(Image2D img) {
  for (double& v : img.values) v = std::fabs(v);
  return img;
}

}  // namespace

SamplingSummary compare_sampling(const Image2D& pet_ref,
                                 const std::vector<Image2D>& mh_samples,
                                 const std::vector<Image2D>& mc_samples,
                                 const Image2D& brain_mask,
                                 double sigma_floor) {
  if (mh_samples.size() < 2 || mc_samples.size() < 2) {
    throw ContractViolation("compare_sampling: each scheme needs >= 2 samples");
  }
  SamplingSummary s;
  s.mh_variance = variance_map(mh_samples, brain_mask);
  s.mc_variance = variance_map(mc_samples, brain_mask);
  s.mh_abs_z = abs_map(zscore_map(pet_ref, mh_samples, brain_mask, sigma_floor));
  s.mc_abs_z = abs_map(zscore_map(pet_ref, mc_samples, brain_mask, sigma_floor));
  s.mh_median_abs_z = masked_median(s.mh_abs_z, brain_mask);
  s.mc_median_abs_z = masked_median(s.mc_abs_z, brain_mask);
  return s;
}

// ---------------------------------------------------------------------------
// Report emission
// ---------------------------------------------------------------------------

namespace {

constexpr const char* kReportHeader = "sample_id,method,mae_ct_hu,mae_pet_au";

void require_valid_method(const std::string& m) {
  if (m.empty()) throw ContractViolation("report: empty method name");
  for (char c : m) {
    const bool ok = (c >= 'a' && c <= 'z') || (c >= 'A' && c <= 'Z') ||
                    (c >= '0' && c <= '9') || c == '_' || c == '-';
    if (!ok) {
      throw ContractViolation(
          strfmt("report: method name '%s' must be alphanumeric/_/-", m.c_str()));
    }
  }
}

std::vector<std::string> method_order(const std::vector<MetricsRow>& rows) {
  std::vector<std::string> order;
  for (const MetricsRow& r : rows) {
    if (std::find(order.begin(), order.end(), r.method) == order.end()) {
      order.push_back(r.method);
    }
  }
  return order;
}

struct MeanStd {
  double mean = 0.0, stdev = 0.0;
};

MeanStd mean_std(const std::vector<double>& v) {
  MeanStd r;
  for (double x : v) r.mean += x;
  r.mean /= static_cast<double>(v.size());
  if (v.size() < 2) return r;
  double ss = 0.0;
  for (double x : v) {
    const double d = x - r.mean;
    ss += d * d;
  }
  r.stdev = std::sqrt(ss / static_cast<double>(v.size() - 1));
  return r;
}

}  // namespace

std::vector<MethodSummary> summarize_methods(
    const std::vector<MetricsRow>& rows) {
  std::vector<MethodSummary> out;
  for (const std::string& m : method_order(rows)) {
    std::vector<double> ct, pet;
    for (const MetricsRow& r : rows) {
      if (r.method != m) continue;
      ct.push_back(r.mae_ct_hu);
      pet.push_back(r.mae_pet_au);
    }
    MethodSummary s;
    s.method = m;
    s.n = ct.size();
    const MeanStd c = mean_std(ct);
    const MeanStd p = mean_std(pet);
    s.ct_mean = c.mean;
    s.ct_std = c.stdev;
    s.pet_mean = p.mean;
    s.pet_std = p.stdev;
    out.push_back(std::move(s));
  }
  return out;
}

std::vector<PairedComparison> pairwise_tests(
    const std::vector<MetricsRow>& rows) {
  const std::vector<std::string> order = method_order(rows);
  // Per method: sample id -> row, rejecting duplicates.
  std::map<std::string, std::map<std::int64_t, const MetricsRow*>> by_method;
  for (const MetricsRow& r : rows) {
    auto& m = by_method[r.method];
    if (!m.emplace(r.sample_id, &r).second) {
      throw ContractViolation(strfmt("report: duplicate row for sample %lld method '%s'",
                                     static_cast<long long>(r.sample_id),
                                     r.method.c_str()));
    }
  }
  std::vector<PairedComparison> out;
  for (size_t i = 0; i < order.size(); ++i) {
    for (size_t j = i + 1; j < order.size(); ++j) {
      const auto& a = by_method[order[i]];
      const auto& b = by_method[order[j]];
      std::string missing;
      for (const auto& [id, row] : a) {
        if (!b.count(id)) missing += strfmt(" %lld", static_cast<long long>(id));
      }
      for (const auto& [id, row] : b) {
        if (!a.count(id)) missing += strfmt(" %lld", static_cast<long long>(id));
      }
      if (!missing.empty()) {
        throw ContractViolation(
            strfmt("report: methods '%s' and '%s' cover different samples; "
                   "missing ids:%s",
                   order[i].c_str(), order[j].c_str(), missing.c_str()));
      }
      for (const char* metric : {"mae_pet_au", "mae_ct_hu"}) {
        std::vector<double> xs, ys;
        for (const auto& [id, row] : a) {
          const bool pet = std::string(metric) == "mae_pet_au";
          xs.push_back(pet ? row->mae_pet_au : row->mae_ct_hu);
          const MetricsRow* other = b.at(id);
          ys.push_back(pet ? other->mae_pet_au : other->mae_ct_hu);
        }
        PairedComparison c;
        c.metric = metric;
        c.method_a = order[i];
        c.method_b = order[j];
        c.test = paired_t_test(xs, ys);
        out.push_back(std::move(c));
      }
    }
  }
  return out;
}

std::string report_to_text(const std::vector<MetricsRow>& rows) {
  if (rows.empty()) throw ContractViolation("report: no rows");
  for (const MetricsRow& r : rows) require_valid_method(r.method);
  std::string text = kReportHeader;
  text += '\n';
  for (const MetricsRow& r : rows) {
    text += strfmt("%lld,%s,%s,%s\n", static_cast<long long>(r.sample_id),
                   r.method.c_str(), format_double(r.mae_ct_hu).c_str(),
                   format_double(r.mae_pet_au).c_str());
  }
  for (const MethodSummary& s : summarize_methods(rows)) {
    text += strfmt("# method,%s,n,%zu,ct_mean,%s,ct_std,%s,pet_mean,%s,pet_std,%s\n",
                   s.method.c_str(), s.n, format_double(s.ct_mean).c_str(),
                   format_double(s.ct_std).c_str(),
                   format_double(s.pet_mean).c_str(),
                   format_double(s.pet_std).c_str());
  }
  for (const PairedComparison& c : pairwise_tests(rows)) {
    text += strfmt("# t_test,%s,%s,%s,t,%s,p,%s,n,%d,degenerate,%d\n",
                   c.metric.c_str(), c.method_a.c_str(), c.method_b.c_str(),
                   format_double(c.test.t).c_str(),
                   format_double(c.test.p).c_str(), c.test.n,
                   c.test.degenerate ? 1 : 0);
  }
  return text;
}

void emit_report(const std::vector<MetricsRow>& rows, const fs::path& csv_path) {
  write_file_text(csv_path, report_to_text(rows));
}

std::vector<MetricsRow> load_report(const fs::path& csv_path) {
  const std::string text = read_file_text(csv_path);
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line) || line != kReportHeader) {
    throw IoError(strfmt("report %s: bad header", csv_path.string().c_str()));
  }
  std::vector<MetricsRow> rows;
  while (std::getline(in, line)) {
    if (line.empty() || line[0] == '#') continue;
    const std::vector<std::string> f = split(line, ',');
    if (f.size() != 4) {
      throw IoError(strfmt("report %s: malformed row '%s'",
                           csv_path.string().c_str(), line.c_str()));
    }
    MetricsRow r;
    r.sample_id = std::strtoll(f[0].c_str(), nullptr, 10);
    r.method = f[1];
    r.mae_ct_hu = std::strtod(f[2].c_str(), nullptr);
    r.mae_pet_au = std::strtod(f[3].c_str(), nullptr);
    rows.push_back(std::move(r));
  }
  if (rows.empty()) {
    throw IoError(strfmt("report %s: no rows", csv_path.string().c_str()));
  }
  // Doubles are written in shortest round-trip form, so regenerating the file
  // from the parsed rows must reproduce it byte for byte — including the
  // summary block. Any drift means the file was edited or truncated.
  if (report_to_text(rows) != text) {
    throw IoError(strfmt("report %s: summary block does not match its rows",
                         csv_path.string().c_str()));
  }
  return rows;
}

// ---------------------------------------------------------------------------
// Image dumps
// ---------------------------------------------------------------------------

DisplayWindow display_window(Modality m) {
  switch (m) {
    case Modality::kMR:
      return {0.0, 1.2};
    case Modality::kCtHu:
      return {-1000.0, 2000.0};
    case Modality::kMu:
      return {0.0, 0.2};
    case Modality::kPet:
      return {0.0, 150.0};
    case Modality::kMask:
      return {0.0, 1.0};
    case Modality::kResidual:
      return {-50.0, 50.0};
    case Modality::kLabels:
      return {0.0, 6.0};
  }
  throw ContractViolation("display_window: unknown modality");
}

void write_pgm(const Image2D& img, const fs::path& path) {
  if (img.width <= 0 || img.height <= 0) {
    throw ContractViolation("write_pgm: empty image");
  }
  const DisplayWindow w = display_window(img.modality);
  std::string bytes = strfmt("P5\n# window %s %s %s\n%d %d\n65535\n",
                             format_double(w.lo).c_str(),
                             format_double(w.hi).c_str(),
                             modality_name(img.modality), img.width, img.height);
  bytes.reserve(bytes.size() + 2 * img.values.size());
  const double scale = 65535.0 / (w.hi - w.lo);
  for (double v : img.values) {
    double t = (v - w.lo) * scale;
    t = std::min(65535.0, std::max(0.0, t));
    const auto q = static_cast<unsigned>(std::llround(t));
    bytes.push_back(static_cast<char>((q >> 8) & 0xff));  // big-endian, PGM rule
    bytes.push_back(static_cast<char>(q & 0xff));
  }
  write_file_text(path, bytes);
}

}  // namespace petsynth
