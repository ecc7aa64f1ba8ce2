#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "petsynth/config.hpp"
#include "petsynth/image.hpp"
#include "petsynth/models.hpp"
#include "petsynth/phantom.hpp"
#include "petsynth/physics.hpp"
#include "petsynth/projector.hpp"
#include "petsynth/tensor.hpp"
#include "petsynth/util.hpp"

namespace petsynth {

// ---------------------------------------------------------------------------
// Losses
// ---------------------------------------------------------------------------

/// Mean of squared differences over mask pixels. The mean (rather than the
/// sum) keeps the value independent of mask size and batch composition.
/// Throws ContractViolation on shape mismatch or an empty mask.
double l2_loss(const Image2D& pred, const Image2D& target, const Image2D& mask);

struct WtaResult {
  double loss = 0.0;
  int winner = 0;
};

/// Winner-takes-all loss: the minimum per-head l2_loss together with the
/// winning head index. Ties resolve to the lowest index. Throws on M = 0.
WtaResult wta_loss(const std::vector<Image2D>& preds, const Image2D& target,
                   const Image2D& mask);

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

struct TrainConfig {
  int stage = 1;  // 1: WTA CT regression, 2: residual imitation, 3: combined
  int iterations = 2000;
  int batch_size = 8;
  int heads = 3;  // M; ignored by stage 2 (the imitation net has one head)
  double learning_rate = 1e-3;
  double lr_drop_factor = 0.1;
  double lr_drop_fraction = 0.6;  // schedule point as a fraction of iterations
  double ct_weight = 1.0;         // stage 3: 0.5
  double metric_weight = 0.0;     // stage 1: must be 0; stage 3: 0.5
  double c_ct = 1e4;   // CT-loss normalization (HU^2); stage 3 uses the
                       // stage-1 final validation CT loss
  double c_pet = 1.0;  // metric-loss normalization (a.u.^2); stages 2 and 3
                       // use the residual dataset's mean squared residual
  double dropout_rate = 0.0;  // stage 1 only; enables the MC-dropout baseline
  int wta_warmup_iterations = 0;  // stages 1/3: iterations trained with the
                                  // mean-over-heads objective before strict
                                  // WTA competition starts. Competing from
                                  // random initialization reliably starves
                                  // all heads but one; the warm-up keeps
                                  // every head in play so they can
                                  // specialize. Stage-1 default is nonzero;
                                  // stage 3 resumes from specialized heads
                                  // and defaults to 0.
  double identity_fraction = 0.125;  // stage-2 clean-pair augmentation rate
  int val_interval = 25;             // iterations between validation passes
  int residual_train_samples = 60;   // 0 = every training sample
  int residual_val_samples = 20;     // 0 = every validation sample
  std::uint64_t seed = 2024;
  bool resume_from_stage1 = true;  // stage-3 initialization switch

  void validate() const;

  static TrainConfig stage_defaults(int stage);
};

/// Reads train.* keys from a config document, starting from the defaults for
/// `stage`. Unknown keys are left for cfg.finish() to report.
TrainConfig train_config_from_config(Config& cfg, int stage);

// ---------------------------------------------------------------------------
// Residual dataset (stage-2 supervision)
// ---------------------------------------------------------------------------

struct ResidualRecord {
  std::int64_t sample_id = 0;
  int head = 0;
  Image2D pct;  // stage-1 hypothesis for this head, HU
  Image2D z;    // signed PET residual (reference - reconstruction), zero
                // outside the head mask
};

struct ResidualDataset {
  ProjectorGeometry geom;
  int heads = 0;
  std::vector<std::int64_t> train_ids, val_ids;
  std::vector<ResidualRecord> records;  // sample-major, heads consecutive
  double mean_sq_residual = 0.0;  // training rows, head-mask pixels (c_pet)
  std::uint64_t stage1_hash = 0;  // content hash of the source checkpoint

  std::size_t train_rows() const {
    return train_ids.size() * static_cast<std::size_t>(heads);
  }
};

/// Reconstructs pseudo-PET for every head of every selected sample and stores
/// the signed residuals against the matched true-CT reconstruction.
/// n_train / n_val pick the first samples of each split (0 = all).
ResidualDataset build_residual_dataset(const fs::path& stage1_checkpoint,
                                       const DatasetIndex& data,
                                       const ProjectorGeometry& geom,
                                       const ReconConfig& recon, int n_train,
                                       int n_val);

void save_residual_dataset(const ResidualDataset& ds, const fs::path& dir);
ResidualDataset load_residual_dataset(const fs::path& dir);

// ---------------------------------------------------------------------------
// Batch loss graphs (shared between the training loops and the test suite)
// ---------------------------------------------------------------------------

struct StageBatch {
  Tensor input;   // [B, C, H, W]; constants, no gradient
  Tensor target;  // [B, 1, H, W]
  Tensor mask;    // [B, 1, H, W], entries {0, 1}
};

struct BatchLoss {
  Tensor objective;               // scalar, normalized by c_ct / c_pet
  std::vector<int> winners;       // per-instance winning head (stages 1, 3)
  double ct_term = 0.0;           // batch-mean winning CT loss, HU^2
  double metric_term = 0.0;       // batch-mean winning metric loss, a.u.^2
  std::vector<Tensor> head_outputs;  // raw network outputs, one per head
};

/// Stage-1 objective: batch mean of per-instance WTA masked CT L2, divided
/// by c_ct. Dropout is applied when mode is kTrain and the model carries a
/// positive rate.
BatchLoss stage1_batch_loss(const Model& phi, const StageBatch& batch,
                            const TrainConfig& cfg, DropoutMode mode,
                            Rng* dropout_rng);

/// Stage-2 objective: masked L2 between the predicted and stored residual,
/// divided by c_pet.
BatchLoss stage2_batch_loss(const Model& psi, const StageBatch& batch,
                            const TrainConfig& cfg);

/// Stage-3 objective: per instance and head,
///   ct_weight * l2_CT / c_ct + metric_weight * mean(g^2) / c_pet,
/// minimized over heads (WTA). g is the frozen imitation net applied to the
/// clamped hypothesis and the true CT; its squared output is averaged over
/// the head mask. With metric_weight = 0 the metric branch is not built and
/// the value reduces exactly to the stage-1 objective.
BatchLoss stage3_batch_loss(const Model& phi, const Model& psi,
                            const StageBatch& batch, const TrainConfig& cfg);

// ---------------------------------------------------------------------------
// Training loops
// ---------------------------------------------------------------------------

struct TrainResult {
  Model model;  // best-validation parameters
  fs::path checkpoint_path;
  int best_iteration = 0;
  double best_val_objective = 0.0;
  double final_train_objective = 0.0;
  double final_ct_loss = 0.0;  // stage 1: raw validation WTA CT loss (HU^2)
                               // of the selected checkpoint; feeds stage-3
                               // c_ct
  std::vector<std::int64_t> val_winner_histogram;  // stages 1 and 3
};

/// Stage 1: trains the multi-hypothesis synthesis network with the WTA CT
/// loss. Writes stage1.ckpt, stage1_train_log.csv, stage1_val_log.csv and
/// stage1_manifest.txt into out_dir.
TrainResult train_stage1(const TrainConfig& cfg, const DatasetIndex& data,
                         const fs::path& out_dir);

/// Stage 2: trains the imitation network on the residual dataset, mixing in
/// identity pairs (ct, ct) -> 0 at cfg.identity_fraction. c_pet is taken
/// from the dataset. Writes stage2.* into out_dir.
TrainResult train_stage2(const TrainConfig& cfg, const ResidualDataset& residuals,
                         const DatasetIndex& data, const fs::path& out_dir);

/// Stage 3: retrains the synthesis network under the combined objective with
/// the imitation network frozen. cfg.c_ct and cfg.c_pet must carry the
/// stage-1 / stage-2 normalization constants. Writes stage3.* into out_dir.
TrainResult train_stage3(const TrainConfig& cfg, const DatasetIndex& data,
                         const fs::path& stage1_checkpoint,
                         const fs::path& stage2_checkpoint,
                         const fs::path& out_dir);

}  // namespace petsynth
