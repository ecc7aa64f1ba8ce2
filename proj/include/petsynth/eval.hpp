#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "petsynth/image.hpp"
#include "petsynth/util.hpp"

namespace petsynth {

// ---------------------------------------------------------------------------
// Scalar metrics
// ---------------------------------------------------------------------------

/// Mean absolute difference over mask pixels. Symmetric in (a, b); throws
/// ContractViolation on shape mismatch or an empty mask.
double mae_masked(const Image2D& a, const Image2D& b, const Image2D& mask);

/// Per-pixel Z-score of the reference against M >= 2 sampled reconstructions:
/// (ref - mean) / max(population_std, sigma_floor) inside the mask, 0 outside.
Image2D zscore_map(const Image2D& pet_ref, const std::vector<Image2D>& samples,
                   const Image2D& mask, double sigma_floor = 1e-6);

// ---------------------------------------------------------------------------
// Paired t-test
// ---------------------------------------------------------------------------

struct TTestResult {
  double t = 0.0;
  double p = 1.0;
  int n = 0;
  bool degenerate = false;  // nonzero differences with zero variance
};

/// Classical paired t-test of x against y (t computed on x - y, so x < y
/// gives a negative statistic). Two-sided p via the Student-t CDF evaluated
/// through the regularized incomplete beta continued fraction; absolute
/// accuracy better than 1e-8. All-zero differences give t = 0, p = 1;
/// zero-variance nonzero differences set the degenerate flag (p = NaN)
/// instead of dividing by zero.
TTestResult paired_t_test(const std::vector<double>& x,
                          const std::vector<double>& y);

/// Regularized incomplete beta function I_x(a, b), exposed for verification.
double incomplete_beta(double a, double b, double x);

// ---------------------------------------------------------------------------
// Sampling-scheme comparison
// ---------------------------------------------------------------------------

struct SamplingSummary {
  Image2D mh_variance;  // per-pixel population variance, 0 outside the mask
  Image2D mc_variance;
  Image2D mh_abs_z;  // |Z| maps, 0 outside the mask
  Image2D mc_abs_z;
  double mh_median_abs_z = 0.0;  // medians over the mask
  double mc_median_abs_z = 0.0;
};

/// Contrasts two sampling schemes (multi-hypothesis heads vs MC-dropout
/// passes) against one reference reconstruction on a single slice.
SamplingSummary compare_sampling(const Image2D& pet_ref,
                                 const std::vector<Image2D>& mh_samples,
                                 const std::vector<Image2D>& mc_samples,
                                 const Image2D& brain_mask,
                                 double sigma_floor = 1e-6);

/// Median of the masked pixels of a map (mean of the two middle values for
/// even counts). Throws on an empty mask.
double masked_median(const Image2D& map, const Image2D& mask);

// ---------------------------------------------------------------------------
// Report emission
// ---------------------------------------------------------------------------

struct MetricsRow {
  std::int64_t sample_id = 0;
  std::string method;
  double mae_ct_hu = 0.0;
  double mae_pet_au = 0.0;
};

struct MethodSummary {
  std::string method;
  std::size_t n = 0;
  double ct_mean = 0.0, ct_std = 0.0;  // std is the sample standard deviation
  double pet_mean = 0.0, pet_std = 0.0;
};

struct PairedComparison {
  std::string metric;  // "mae_pet_au" or "mae_ct_hu"
  std::string method_a, method_b;
  TTestResult test;
};

/// Per-method mean and sample standard deviation, methods in first-appearance
/// order.
std::vector<MethodSummary> summarize_methods(const std::vector<MetricsRow>& rows);

/// Paired t-tests for every method pair on both metrics, pairing rows by
/// sample id. Throws ContractViolation listing the missing ids if the methods
/// cover different sample sets.
std::vector<PairedComparison> pairwise_tests(const std::vector<MetricsRow>& rows);

/// Renders rows plus the '#'-prefixed summary block (aggregates and paired
/// tests). Column order: sample_id, method, mae_ct_hu, mae_pet_au.
std::string report_to_text(const std::vector<MetricsRow>& rows);

/// Writes report_to_text to disk. Throws on empty rows.
void emit_report(const std::vector<MetricsRow>& rows, const fs::path& csv_path);

/// Reparses a report CSV and verifies that its summary block matches the one
/// recomputed from the rows; throws IoError on any mismatch.
std::vector<MetricsRow> load_report(const fs::path& csv_path);

// ---------------------------------------------------------------------------
// Image dumps
// ---------------------------------------------------------------------------

struct DisplayWindow {
  double lo = 0.0, hi = 1.0;
};

/// Fixed per-modality display window so dumps from different runs are
/// directly comparable.
DisplayWindow display_window(Modality m);

/// 16-bit binary portable graymap; values are windowed linearly to 0..65535
/// and the window is recorded in the file's comment line.
void write_pgm(const Image2D& img, const fs::path& path);

}  // namespace petsynth
