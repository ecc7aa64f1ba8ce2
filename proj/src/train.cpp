#include "petsynth/training.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "petsynth/container.hpp"
#include "petsynth/errors.hpp"
#include "petsynth/optimizer.hpp"

namespace petsynth {

// ---------------------------------------------------------------------------
// Losses
// ---------------------------------------------------------------------------

double l2_loss(const Image2D& pred, const Image2D& target, const Image2D& mask) {
  if (!pred.same_grid(target) || !pred.same_grid(mask))
    throw ContractViolation("l2_loss: images must share one grid");
  double acc = 0.0, count = 0.0;
  for (std::size_t i = 0; i < pred.values.size(); ++i) {
    const double m = mask.values[i];
    const double d = pred.values[i] - target.values[i];
    acc += m * d * d;
    count += m;
  }
  if (count <= 0.0) throw ContractViolation("l2_loss: empty mask");
  return acc / count;
}

WtaResult wta_loss(const std::vector<Image2D>& preds, const Image2D& target,
                   const Image2D& mask) {
  if (preds.empty())
    throw ContractViolation("wta_loss: needs at least one hypothesis");
  WtaResult best{l2_loss(preds[0], target, mask), 0};
  for (std::size_t m = 1; m < preds.size(); ++m) {
    const double lm = l2_loss(preds[m], target, mask);
    if (lm < best.loss) best = {lm, static_cast<int>(m)};
  }
  return best;
}

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

void TrainConfig::validate() const {
  if (stage < 1 || stage > 3) throw ConfigError("train.stage must be 1, 2 or 3");
  if (iterations <= 0) throw ConfigError("train.iterations must be > 0");
  if (batch_size <= 0) throw ConfigError("train.batch_size must be > 0");
  if (heads < 1) throw ConfigError("train.heads must be >= 1");
  if (learning_rate <= 0.0) throw ConfigError("train.learning_rate must be > 0");
  if (lr_drop_factor <= 0.0 || lr_drop_factor > 1.0)
    throw ConfigError("train.lr_drop_factor must be in (0, 1]");
  if (lr_drop_fraction < 0.0 || lr_drop_fraction > 1.0)
    throw ConfigError("train.lr_drop_fraction must be in [0, 1]");
  if (ct_weight < 0.0 || metric_weight < 0.0)
    throw ConfigError("train loss weights must be >= 0");
  if (c_ct <= 0.0 || c_pet <= 0.0)
    throw ConfigError("train loss normalization constants must be > 0");
  if (dropout_rate < 0.0 || dropout_rate >= 1.0)
    throw ConfigError("train.dropout_rate must be in [0, 1)");
  if (wta_warmup_iterations < 0)
    throw ConfigError("train.wta_warmup_iterations must be >= 0");
  if (identity_fraction < 0.0 || identity_fraction > 1.0)
    throw ConfigError("train.identity_fraction must be in [0, 1]");
  if (val_interval <= 0) throw ConfigError("train.val_interval must be > 0");
  if (residual_train_samples < 0 || residual_val_samples < 0)
    throw ConfigError("train.residual_*_samples must be >= 0");
  if (stage == 1 && metric_weight != 0.0)
    throw ConfigError("stage 1: the metric loss weight must be 0");
  if (stage == 3 && std::fabs(ct_weight + metric_weight - 1.0) > 1e-12)
    throw ConfigError("stage 3: the loss weights must sum to 1");
}

TrainConfig TrainConfig::stage_defaults(int stage) {
  TrainConfig cfg;
  cfg.stage = stage;
  switch (stage) {
    case 1:
      cfg.iterations = 2000;
      cfg.ct_weight = 1.0;
      cfg.metric_weight = 0.0;
      cfg.wta_warmup_iterations = 200;
      break;
    case 2:
      cfg.iterations = 1000;
      cfg.heads = 1;
      cfg.ct_weight = 0.0;
      cfg.metric_weight = 1.0;
      break;
    case 3:
      cfg.iterations = 2000;
      cfg.ct_weight = 0.5;
      cfg.metric_weight = 0.5;
      break;
    default:
      throw ConfigError("train.stage must be 1, 2 or 3");
  }
  return cfg;
}

TrainConfig train_config_from_config(Config& cfg, int stage) {
  TrainConfig c = TrainConfig::stage_defaults(stage);
  c.iterations = static_cast<int>(cfg.get_int("train.iterations", c.iterations));
  c.batch_size = static_cast<int>(cfg.get_int("train.batch_size", c.batch_size));
  c.heads = static_cast<int>(cfg.get_int("train.heads", c.heads));
  c.learning_rate = cfg.get_double("train.learning_rate", c.learning_rate);
  c.lr_drop_factor = cfg.get_double("train.lr_drop_factor", c.lr_drop_factor);
  c.lr_drop_fraction = cfg.get_double("train.lr_drop_fraction", c.lr_drop_fraction);
  c.ct_weight = cfg.get_double("train.ct_weight", c.ct_weight);
  c.metric_weight = cfg.get_double("train.metric_weight", c.metric_weight);
  c.c_ct = cfg.get_double("train.c_ct", c.c_ct);
  c.c_pet = cfg.get_double("train.c_pet", c.c_pet);
  c.dropout_rate = cfg.get_double("train.dropout_rate", c.dropout_rate);
  c.wta_warmup_iterations = static_cast<int>(
      cfg.get_int("train.wta_warmup_iterations", c.wta_warmup_iterations));
  c.identity_fraction = cfg.get_double("train.identity_fraction", c.identity_fraction);
  c.val_interval = static_cast<int>(cfg.get_int("train.val_interval", c.val_interval));
  c.residual_train_samples = static_cast<int>(
      cfg.get_int("train.residual_train_samples", c.residual_train_samples));
  c.residual_val_samples = static_cast<int>(
      cfg.get_int("train.residual_val_samples", c.residual_val_samples));
  c.seed = static_cast<std::uint64_t>(
      cfg.get_int("train.seed", static_cast<std::int64_t>(c.seed)));
  c.resume_from_stage1 = cfg.get_bool("train.resume_from_stage1", c.resume_from_stage1);
  c.validate();
  return c;
}

// ---------------------------------------------------------------------------
// Residual dataset
// ---------------------------------------------------------------------------

namespace {

Image2D round_to_f32(Image2D img) {
  for (double& v : img.values) v = static_cast<double>(static_cast<float>(v));
  return img;
}

std::vector<std::int64_t> take_front(const std::vector<std::int64_t>& ids, int n) {
  if (n <= 0 || n >= static_cast<int>(ids.size())) return ids;
  return std::vector<std::int64_t>(ids.begin(), ids.begin() + n);
}

std::string join_ids(const std::vector<std::int64_t>& ids) {
  std::string out;
  for (std::size_t i = 0; i < ids.size(); ++i) {
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

// Mean of squared z over the sample's head mask (the zero-predictor loss).
double record_mean_sq(const Image2D& z, const Image2D& mask) {
  double acc = 0.0, count = 0.0;
  for (std::size_t i = 0; i < z.values.size(); ++i) {
    acc += mask.values[i] * z.values[i] * z.values[i];
    count += mask.values[i];
  }
  return acc / count;
}

}  // namespace

ResidualDataset build_residual_dataset(const fs::path& stage1_checkpoint,
                                       const DatasetIndex& data,
                                       const ProjectorGeometry& geom,
                                       const ReconConfig& recon, int n_train,
                                       int n_val) {
  if (!fs::exists(stage1_checkpoint))
    throw IoError("stage 2 requires the stage-1 checkpoint: " +
                  stage1_checkpoint.string());
  Model phi = load_model(stage1_checkpoint, ModelKind::kSynthesis);

  ResidualDataset ds;
  ds.geom = geom;
  ds.heads = phi.arch.heads;
  ds.stage1_hash = hash_file(stage1_checkpoint);
  ds.train_ids = take_front(data.train, n_train);
  ds.val_ids = take_front(data.val, n_val);
  if (ds.train_ids.empty())
    throw ContractViolation("residual dataset: no training samples selected");

  bool checked_identity = false;
  double mean_acc = 0.0;
  auto process = [&](const std::vector<std::int64_t>& ids, bool accumulate) {
    for (std::int64_t id : ids) {
      const Sample s = load_sample(data, id);
      try {
        const Image2D ref = reconstruct_ppet(s.ct, s.ct, s.pet, geom, recon);
        if (!checked_identity) {
          // Builder self-test: a hypothesis equal to the true CT must leave a
          // residual of exactly zero, i.e. the reference reconstruction must
          // be reproducible bit for bit.
          const Image2D again = reconstruct_ppet(s.ct, s.ct, s.pet, geom, recon);
          if (again.values != ref.values)
            throw NumericalError("identity reconstruction is not reproducible");
          checked_identity = true;
        }
        std::vector<Image2D> hyps = synth_forward(phi, s.mr);
        for (int m = 0; m < static_cast<int>(hyps.size()); ++m) {
          const Image2D pp = reconstruct_ppet(hyps[m], s.ct, s.pet, geom, recon);
          Image2D z = ref;
          z.modality = Modality::kResidual;
          for (std::size_t i = 0; i < z.values.size(); ++i)
            z.values[i] = (ref.values[i] - pp.values[i]) * s.head_mask.values[i];
          ResidualRecord rec;
          rec.sample_id = id;
          rec.head = m;
          // Stored as 32-bit floats; round now so training behaves the same
          // whether the dataset is fresh or reloaded from disk.
          rec.pct = round_to_f32(std::move(hyps[m]));
          rec.z = round_to_f32(std::move(z));
          if (accumulate) mean_acc += record_mean_sq(rec.z, s.head_mask);
          ds.records.push_back(std::move(rec));
        }
      } catch (const NumericalError& e) {
        throw NumericalError(strfmt("residual dataset: sample %lld: %s",
                                    static_cast<long long>(id), e.what()));
      }
    }
  };
  process(ds.train_ids, true);
  process(ds.val_ids, false);
  ds.mean_sq_residual = mean_acc / static_cast<double>(ds.train_rows());
  return ds;
}

void save_residual_dataset(const ResidualDataset& ds, const fs::path& dir) {
  fs::create_directories(dir);
  Container c;
  c.put_scalar("meta/format", 1.0);
  c.put("meta/geom", {6},
        {static_cast<double>(ds.geom.nx), static_cast<double>(ds.geom.ny),
         ds.geom.pixel_spacing_mm, static_cast<double>(ds.geom.n_angles),
         static_cast<double>(ds.geom.n_bins), ds.geom.bin_spacing_mm});
  c.put_scalar("meta/heads", static_cast<double>(ds.heads));
  for (std::size_t i = 0; i < ds.records.size(); ++i) {
    const ResidualRecord& r = ds.records[i];
    const std::string prefix = strfmt("rec_%05zu", i);
    c.put(prefix + "/info", {2},
          {static_cast<double>(r.sample_id), static_cast<double>(r.head)});
    c.put(prefix + "/pct", {r.pct.height, r.pct.width}, r.pct.values);
    c.put(prefix + "/z", {r.z.height, r.z.width}, r.z.values);
  }
  c.save(dir / "residuals.bin");

  Manifest m;
  m.set("residual.format", static_cast<std::int64_t>(1));
  m.set("residual.count", static_cast<std::int64_t>(ds.records.size()));
  m.set("residual.heads", static_cast<std::int64_t>(ds.heads));
  m.set("residual.train_ids", join_ids(ds.train_ids));
  m.set("residual.val_ids", join_ids(ds.val_ids));
  m.set("residual.c_pet", ds.mean_sq_residual);
  m.set_hex("residual.stage1_hash", ds.stage1_hash);
  m.set("geometry.nx", static_cast<std::int64_t>(ds.geom.nx));
  m.set("geometry.ny", static_cast<std::int64_t>(ds.geom.ny));
  m.set("geometry.pixel_spacing_mm", ds.geom.pixel_spacing_mm);
  m.set("geometry.n_angles", static_cast<std::int64_t>(ds.geom.n_angles));
  m.set("geometry.n_bins", static_cast<std::int64_t>(ds.geom.n_bins));
  m.set("geometry.bin_spacing_mm", ds.geom.bin_spacing_mm);
  m.set("geometry.ray_model", ds.geom.ray_model);
  m.save(dir / "residuals_manifest.txt");
}

ResidualDataset load_residual_dataset(const fs::path& dir) {
  const Manifest m = Manifest::load(dir / "residuals_manifest.txt");
  if (m.get_int("residual.format") != 1)
    throw IoError("load_residual_dataset: unsupported format in '" +
                  dir.string() + "'");
  ResidualDataset ds;
  ds.heads = static_cast<int>(m.get_int("residual.heads"));
  ds.train_ids = parse_ids(m.get("residual.train_ids"));
  ds.val_ids = parse_ids(m.get("residual.val_ids"));
  ds.mean_sq_residual = m.get_double("residual.c_pet");
  ds.stage1_hash = std::stoull(m.get("residual.stage1_hash"), nullptr, 16);
  ds.geom.nx = static_cast<int>(m.get_int("geometry.nx"));
  ds.geom.ny = static_cast<int>(m.get_int("geometry.ny"));
  ds.geom.pixel_spacing_mm = m.get_double("geometry.pixel_spacing_mm");
  ds.geom.n_angles = static_cast<int>(m.get_int("geometry.n_angles"));
  ds.geom.n_bins = static_cast<int>(m.get_int("geometry.n_bins"));
  ds.geom.bin_spacing_mm = m.get_double("geometry.bin_spacing_mm");
  ds.geom.ray_model = m.get("geometry.ray_model");

  const Container c = Container::load(dir / "residuals.bin");
  const std::int64_t n = m.get_int("residual.count");
  const std::int64_t expected =
      static_cast<std::int64_t>(ds.train_ids.size() + ds.val_ids.size()) * ds.heads;
  if (n != expected)
    throw IoError(strfmt("load_residual_dataset: %lld records listed, %lld expected",
                         static_cast<long long>(n), static_cast<long long>(expected)));
  ds.records.reserve(static_cast<std::size_t>(n));
  for (std::int64_t i = 0; i < n; ++i) {
    const std::string prefix = strfmt("rec_%05zu", static_cast<std::size_t>(i));
    const NamedTensor& info = c.get(prefix + "/info");
    const NamedTensor& pct = c.get(prefix + "/pct");
    const NamedTensor& z = c.get(prefix + "/z");
    ResidualRecord rec;
    rec.sample_id = static_cast<std::int64_t>(info.values.at(0));
    rec.head = static_cast<int>(info.values.at(1));
    rec.pct = Image2D(static_cast<int>(pct.extents.at(1)),
                      static_cast<int>(pct.extents.at(0)),
                      ds.geom.pixel_spacing_mm, Modality::kCtHu);
    rec.pct.values = pct.values;
    rec.z = Image2D(static_cast<int>(z.extents.at(1)),
                    static_cast<int>(z.extents.at(0)),
                    ds.geom.pixel_spacing_mm, Modality::kResidual);
    rec.z.values = z.values;
    check_image(rec.pct, prefix + "/pct");
    check_image(rec.z, prefix + "/z");
    ds.records.push_back(std::move(rec));
  }
  return ds;
}

// ---------------------------------------------------------------------------
// Batch loss graphs
// ---------------------------------------------------------------------------

BatchLoss stage1_batch_loss(const Model& phi, const StageBatch& batch,
                            const TrainConfig& cfg, DropoutMode mode,
                            Rng* dropout_rng) {
  std::vector<Tensor> outs = model_forward(phi, batch.input, mode, dropout_rng);
  const int heads = static_cast<int>(outs.size());
  std::vector<Tensor> cols;
  cols.reserve(outs.size());
  for (const Tensor& h : outs)
    cols.push_back(masked_sq_mean(h, batch.target, batch.mask));
  const Tensor losses = stack_columns(cols);
  MinResult mr = reduce_min(losses, 1);

  BatchLoss bl;
  bl.objective = mul(reduce_mean(mr.value), make_scalar(cfg.ct_weight / cfg.c_ct));
  bl.head_outputs = std::move(outs);
  const std::int64_t b = batch.input->shape[0];
  bl.winners.reserve(static_cast<std::size_t>(b));
  double ct_acc = 0.0;
  for (std::int64_t i = 0; i < b; ++i) {
    const int w = static_cast<int>(mr.indices[static_cast<std::size_t>(i)]);
    bl.winners.push_back(w);
    ct_acc += losses->value[static_cast<std::size_t>(i * heads + w)];
  }
  bl.ct_term = ct_acc / static_cast<double>(b);
  return bl;
}

BatchLoss stage2_batch_loss(const Model& psi, const StageBatch& batch,
                            const TrainConfig& cfg) {
  Tensor out = model_forward(psi, batch.input)[0];
  const Tensor raw = reduce_mean(masked_sq_mean(out, batch.target, batch.mask));
  BatchLoss bl;
  bl.objective = mul(raw, make_scalar(1.0 / cfg.c_pet));
  bl.metric_term = raw->value[0];
  bl.head_outputs = {std::move(out)};
  return bl;
}

BatchLoss stage3_batch_loss(const Model& phi, const Model& psi,
                            const StageBatch& batch, const TrainConfig& cfg) {
  // With the metric branch weighted to zero the objective must match stage 1
  // bit for bit, so reuse that graph outright.
  if (cfg.metric_weight == 0.0)
    return stage1_batch_loss(phi, batch, cfg, DropoutMode::kOff, nullptr);

  std::vector<Tensor> outs = model_forward(phi, batch.input);
  const Tensor offset = make_scalar(1000.0);
  std::vector<Tensor> cols, ct_cols, met_cols;
  for (const Tensor& h : outs) {
    const Tensor ct_col = masked_sq_mean(h, batch.target, batch.mask);
    // The imitation net sees hypotheses clamped to the -1000 HU air floor,
    // exactly as the reconstruction path does.
    const Tensor clamped = sub(relu(add(h, offset)), offset);
    const Tensor zhat =
        model_forward(psi, concat_channels(clamped, batch.target))[0];
    const Tensor met_col = masked_sq_mean(zhat, nullptr, batch.mask);
    cols.push_back(add(mul(ct_col, make_scalar(cfg.ct_weight / cfg.c_ct)),
                       mul(met_col, make_scalar(cfg.metric_weight / cfg.c_pet))));
    ct_cols.push_back(ct_col);
    met_cols.push_back(met_col);
  }
  MinResult mr = reduce_min(stack_columns(cols), 1);

  BatchLoss bl;
  bl.objective = reduce_mean(mr.value);
  bl.head_outputs = std::move(outs);
  const std::int64_t b = batch.input->shape[0];
  double ct_acc = 0.0, met_acc = 0.0;
  for (std::int64_t i = 0; i < b; ++i) {
    const int w = static_cast<int>(mr.indices[static_cast<std::size_t>(i)]);
    bl.winners.push_back(w);
    ct_acc += ct_cols[static_cast<std::size_t>(w)]->value[static_cast<std::size_t>(i)];
    met_acc += met_cols[static_cast<std::size_t>(w)]->value[static_cast<std::size_t>(i)];
  }
  bl.ct_term = ct_acc / static_cast<double>(b);
  bl.metric_term = met_acc / static_cast<double>(b);
  return bl;
}

// ---------------------------------------------------------------------------
// Training loops
// ---------------------------------------------------------------------------

namespace {

struct SampleCache {
  const DatasetIndex* data = nullptr;
  std::map<std::int64_t, Sample> samples;

  const Sample& get(std::int64_t id) {
    auto it = samples.find(id);
    if (it == samples.end())
      it = samples.emplace(id, load_sample(*data, id)).first;
    return it->second;
  }
};

StageBatch make_ct_batch(const std::vector<const Sample*>& items) {
  const std::int64_t b = static_cast<std::int64_t>(items.size());
  const std::int64_t h = items[0]->mr.height, w = items[0]->mr.width;
  std::vector<double> in, target, mask;
  in.reserve(static_cast<std::size_t>(b * h * w));
  target.reserve(in.capacity());
  mask.reserve(in.capacity());
  for (const Sample* s : items) {
    in.insert(in.end(), s->mr.values.begin(), s->mr.values.end());
    target.insert(target.end(), s->ct.values.begin(), s->ct.values.end());
    mask.insert(mask.end(), s->head_mask.values.begin(), s->head_mask.values.end());
  }
  StageBatch batch;
  batch.input = make_tensor({b, 1, h, w}, std::move(in));
  batch.target = make_tensor({b, 1, h, w}, std::move(target));
  batch.mask = make_tensor({b, 1, h, w}, std::move(mask));
  return batch;
}

// Mean-over-heads warm-up objectives for the first cfg.wta_warmup_iterations
// of stages 1 and 3. Strict WTA from random initialization reliably starves
// every head but the one that happens to start best (losers receive exactly
// zero gradient, so they never recover); averaging over heads first brings
// all of them to a comparable level, after which the WTA phase partitions
// the data among them and they specialize. Winners are still reported from
// the argmin of the same per-head losses so the logged histogram stays
// meaningful across the phase switch; ct/metric terms likewise report the
// winning head's values, matching what validation tracks.
BatchLoss stage1_warmup_loss(const Model& phi, const StageBatch& batch,
                             const TrainConfig& cfg, DropoutMode mode,
                             Rng* dropout_rng) {
  std::vector<Tensor> outs = model_forward(phi, batch.input, mode, dropout_rng);
  const int heads = static_cast<int>(outs.size());
  std::vector<Tensor> cols;
  cols.reserve(outs.size());
  for (const Tensor& h : outs)
    cols.push_back(masked_sq_mean(h, batch.target, batch.mask));
  const Tensor losses = stack_columns(cols);

  BatchLoss bl;
  bl.objective =
      mul(reduce_mean(losses), make_scalar(cfg.ct_weight / cfg.c_ct));
  bl.head_outputs = std::move(outs);
  const std::int64_t b = batch.input->shape[0];
  double ct_acc = 0.0;
  for (std::int64_t i = 0; i < b; ++i) {
    int w = 0;
    double wv = losses->value[static_cast<std::size_t>(i * heads)];
    for (int m = 1; m < heads; ++m) {
      const double v = losses->value[static_cast<std::size_t>(i * heads + m)];
      if (v < wv) {
        wv = v;
        w = m;
      }
    }
    bl.winners.push_back(w);
    ct_acc += wv;
  }
  bl.ct_term = ct_acc / static_cast<double>(b);
  return bl;
}

BatchLoss stage3_warmup_loss(const Model& phi, const Model& psi,
                             const StageBatch& batch, const TrainConfig& cfg) {
  if (cfg.metric_weight == 0.0)
    return stage1_warmup_loss(phi, batch, cfg, DropoutMode::kOff, nullptr);

  std::vector<Tensor> outs = model_forward(phi, batch.input);
  const int heads = static_cast<int>(outs.size());
  const Tensor offset = make_scalar(1000.0);
  std::vector<Tensor> cols, ct_cols, met_cols;
  for (const Tensor& h : outs) {
    const Tensor ct_col = masked_sq_mean(h, batch.target, batch.mask);
    const Tensor clamped = sub(relu(add(h, offset)), offset);
    const Tensor zhat =
        model_forward(psi, concat_channels(clamped, batch.target))[0];
    const Tensor met_col = masked_sq_mean(zhat, nullptr, batch.mask);
    cols.push_back(add(mul(ct_col, make_scalar(cfg.ct_weight / cfg.c_ct)),
                       mul(met_col, make_scalar(cfg.metric_weight / cfg.c_pet))));
    ct_cols.push_back(ct_col);
    met_cols.push_back(met_col);
  }
  const Tensor losses = stack_columns(cols);

  BatchLoss bl;
  bl.objective = reduce_mean(losses);
  bl.head_outputs = std::move(outs);
  const std::int64_t b = batch.input->shape[0];
  double ct_acc = 0.0, met_acc = 0.0;
  for (std::int64_t i = 0; i < b; ++i) {
    int w = 0;
    double wv = losses->value[static_cast<std::size_t>(i * heads)];
    for (int m = 1; m < heads; ++m) {
      const double v = losses->value[static_cast<std::size_t>(i * heads + m)];
      if (v < wv) {
        wv = v;
        w = m;
      }
    }
    bl.winners.push_back(w);
    ct_acc += ct_cols[static_cast<std::size_t>(w)]->value[static_cast<std::size_t>(i)];
    met_acc += met_cols[static_cast<std::size_t>(w)]->value[static_cast<std::size_t>(i)];
  }
  bl.ct_term = ct_acc / static_cast<double>(b);
  bl.metric_term = met_acc / static_cast<double>(b);
  return bl;
}

struct Stage2Entry {
  const ResidualRecord* rec = nullptr;  // null: identity pair (ct, ct) -> 0
  const Sample* sample = nullptr;
};

StageBatch make_stage2_batch(const std::vector<Stage2Entry>& items) {
  const std::int64_t b = static_cast<std::int64_t>(items.size());
  const std::int64_t h = items[0].sample->ct.height, w = items[0].sample->ct.width;
  const std::size_t hw = static_cast<std::size_t>(h * w);
  std::vector<double> in, target, mask;
  in.reserve(static_cast<std::size_t>(b) * 2 * hw);
  target.reserve(static_cast<std::size_t>(b) * hw);
  mask.reserve(target.capacity());
  for (const Stage2Entry& e : items) {
    const std::vector<double>& ct = e.sample->ct.values;
    const std::vector<double>& first = e.rec ? e.rec->pct.values : ct;
    in.insert(in.end(), first.begin(), first.end());
    in.insert(in.end(), ct.begin(), ct.end());
    if (e.rec)
      target.insert(target.end(), e.rec->z.values.begin(), e.rec->z.values.end());
    else
      target.insert(target.end(), hw, 0.0);
    mask.insert(mask.end(), e.sample->head_mask.values.begin(),
                e.sample->head_mask.values.end());
  }
  StageBatch batch;
  batch.input = make_tensor({b, 2, h, w}, std::move(in));
  batch.target = make_tensor({b, 1, h, w}, std::move(target));
  batch.mask = make_tensor({b, 1, h, w}, std::move(mask));
  return batch;
}

// Masked mean absolute error of one batch plane against the target plane.
double masked_mae_plane(const Tensor& pred, const Tensor& target,
                        const Tensor& mask, std::int64_t b) {
  const std::int64_t hw = target->shape[2] * target->shape[3];
  const double* pv = pred->value.data() + b * hw;
  const double* tv = target->value.data() + b * hw;
  const double* mv = mask->value.data() + b * hw;
  double acc = 0.0, count = 0.0;
  for (std::int64_t i = 0; i < hw; ++i) {
    acc += mv[i] * std::fabs(pv[i] - tv[i]);
    count += mv[i];
  }
  return acc / count;
}

struct ValStats {
  double objective = 0.0;
  double ct_term = 0.0;
  double metric_term = 0.0;
  double ct_mae = 0.0;
  std::vector<std::int64_t> hist;
};

template <typename LossFn>
ValStats validate_ct(const std::vector<std::int64_t>& ids, SampleCache& cache,
                     int batch_size, int heads, const LossFn& fn) {
  ValStats v;
  v.hist.assign(static_cast<std::size_t>(heads), 0);
  double obj = 0.0, ct = 0.0, met = 0.0, mae = 0.0;
  std::size_t total = 0;
  for (std::size_t start = 0; start < ids.size();
       start += static_cast<std::size_t>(batch_size)) {
    const std::size_t stop =
        std::min(ids.size(), start + static_cast<std::size_t>(batch_size));
    std::vector<const Sample*> items;
    for (std::size_t i = start; i < stop; ++i) items.push_back(&cache.get(ids[i]));
    const StageBatch batch = make_ct_batch(items);
    const BatchLoss bl = fn(batch);
    const std::size_t n = items.size();
    obj += bl.objective->value[0] * static_cast<double>(n);
    ct += bl.ct_term * static_cast<double>(n);
    met += bl.metric_term * static_cast<double>(n);
    for (std::size_t k = 0; k < n; ++k) {
      const int w = bl.winners[k];
      ++v.hist[static_cast<std::size_t>(w)];
      mae += masked_mae_plane(bl.head_outputs[static_cast<std::size_t>(w)],
                              batch.target, batch.mask,
                              static_cast<std::int64_t>(k));
    }
    total += n;
  }
  const double d = static_cast<double>(total);
  v.objective = obj / d;
  v.ct_term = ct / d;
  v.metric_term = met / d;
  v.ct_mae = mae / d;
  return v;
}

ValStats validate_stage2(const std::vector<const ResidualRecord*>& rows,
                         SampleCache& cache, const TrainConfig& cfg,
                         const Model& psi) {
  ValStats v;
  double obj = 0.0, met = 0.0;
  std::size_t total = 0;
  for (std::size_t start = 0; start < rows.size();
       start += static_cast<std::size_t>(cfg.batch_size)) {
    const std::size_t stop =
        std::min(rows.size(), start + static_cast<std::size_t>(cfg.batch_size));
    std::vector<Stage2Entry> items;
    for (std::size_t i = start; i < stop; ++i)
      items.push_back({rows[i], &cache.get(rows[i]->sample_id)});
    const StageBatch batch = make_stage2_batch(items);
    const BatchLoss bl = stage2_batch_loss(psi, batch, cfg);
    obj += bl.objective->value[0] * static_cast<double>(items.size());
    met += bl.metric_term * static_cast<double>(items.size());
    total += items.size();
  }
  v.objective = obj / static_cast<double>(total);
  v.metric_term = met / static_cast<double>(total);
  return v;
}

struct BestTracker {
  double best = std::numeric_limits<double>::infinity();
  int best_iter = 0;
  std::vector<std::vector<double>> values;

  void consider(int iter, double val, const std::vector<Tensor>& params) {
    if (!values.empty() && val >= best) return;
    best = val;
    best_iter = iter;
    values.clear();
    values.reserve(params.size());
    for (const Tensor& p : params) values.push_back(p->value);
  }

  void restore(const std::vector<Tensor>& params) const {
    for (std::size_t i = 0; i < params.size(); ++i) params[i]->value = values[i];
  }
};

std::string winner_columns(int heads) {
  std::string out;
  for (int m = 0; m < heads; ++m) out += strfmt(",winner_%d", m);
  return out;
}

std::string histogram_cells(const std::vector<int>& hist) {
  std::string out;
  for (int h : hist) out += strfmt(",%d", h);
  return out;
}

std::string join_hist(const std::vector<std::int64_t>& hist) {
  std::string out;
  for (std::size_t i = 0; i < hist.size(); ++i) {
    if (i) out += ' ';
    out += std::to_string(hist[i]);
  }
  return out;
}

void echo_config(Manifest& man, const TrainConfig& cfg) {
  man.set("train.stage", static_cast<std::int64_t>(cfg.stage));
  man.set("train.iterations", static_cast<std::int64_t>(cfg.iterations));
  man.set("train.batch_size", static_cast<std::int64_t>(cfg.batch_size));
  man.set("train.heads", static_cast<std::int64_t>(cfg.heads));
  man.set("train.learning_rate", cfg.learning_rate);
  man.set("train.lr_drop_factor", cfg.lr_drop_factor);
  man.set("train.lr_drop_fraction", cfg.lr_drop_fraction);
  man.set("train.ct_weight", cfg.ct_weight);
  man.set("train.metric_weight", cfg.metric_weight);
  man.set("train.c_ct", cfg.c_ct);
  man.set("train.c_pet", cfg.c_pet);
  man.set("train.dropout_rate", cfg.dropout_rate);
  man.set("train.wta_warmup_iterations",
          static_cast<std::int64_t>(cfg.wta_warmup_iterations));
  man.set("train.identity_fraction", cfg.identity_fraction);
  man.set("train.val_interval", static_cast<std::int64_t>(cfg.val_interval));
  man.set("train.residual_train_samples",
          static_cast<std::int64_t>(cfg.residual_train_samples));
  man.set("train.residual_val_samples",
          static_cast<std::int64_t>(cfg.residual_val_samples));
  man.set("train.seed", std::to_string(cfg.seed));
  man.set("train.resume_from_stage1",
          static_cast<std::int64_t>(cfg.resume_from_stage1 ? 1 : 0));
}

double schedule_lr(const TrainConfig& cfg, int iteration) {
  const int drop_iter =
      static_cast<int>(std::llround(cfg.iterations * cfg.lr_drop_fraction));
  return iteration > drop_iter ? cfg.learning_rate * cfg.lr_drop_factor
                               : cfg.learning_rate;
}

void check_finite_loss(int stage, int iteration, double value, double lr) {
  if (!std::isfinite(value))
    throw NumericalError(strfmt("stage %d: non-finite loss at iteration %d (lr %s)",
                                stage, iteration, format_double(lr).c_str()));
}

}  // namespace

TrainResult train_stage1(const TrainConfig& cfg, const DatasetIndex& data,
                         const fs::path& out_dir) {
  cfg.validate();
  if (cfg.stage != 1) throw ContractViolation("train_stage1: config stage must be 1");
  if (data.train.empty()) throw ContractViolation("train_stage1: training split is empty");
  fs::create_directories(out_dir);

  Model phi = make_model(synthesis_arch(cfg.heads, cfg.dropout_rate),
                         Rng::fork(cfg.seed, 0).seed());
  const std::vector<Tensor> params = phi.params();
  Adam opt(params, AdamConfig{cfg.learning_rate, 0.9, 0.999, 1e-8});
  Rng batch_rng = Rng::fork(cfg.seed, 1);
  Rng drop_rng = Rng::fork(cfg.seed, 2);
  SampleCache cache{&data};
  const DropoutMode mode =
      cfg.dropout_rate > 0.0 ? DropoutMode::kTrain : DropoutMode::kOff;
  const bool has_val = !data.val.empty();
  BestTracker best;

  auto run_validation = [&]() {
    return validate_ct(data.val, cache, cfg.batch_size, cfg.heads,
                       [&](const StageBatch& b) {
                         return stage1_batch_loss(phi, b, cfg, DropoutMode::kOff,
                                                  nullptr);
                       });
  };

  std::string train_csv =
      "iteration,lr,objective,ct_hu2" + winner_columns(cfg.heads) + "\n";
  std::string val_csv =
      "iteration,objective,ct_hu2,ct_mae_hu" + winner_columns(cfg.heads) + "\n";

  double final_obj = 0.0;
  for (int it = 1; it <= cfg.iterations; ++it) {
    const double lr = schedule_lr(cfg, it);
    opt.set_lr(lr);
    std::vector<const Sample*> items;
    for (int b = 0; b < cfg.batch_size; ++b) {
      const std::int64_t id =
          data.train[batch_rng.uniform_int(data.train.size())];
      items.push_back(&cache.get(id));
    }
    const StageBatch batch = make_ct_batch(items);
    const BatchLoss bl =
        it <= cfg.wta_warmup_iterations
            ? stage1_warmup_loss(phi, batch, cfg, mode, &drop_rng)
            : stage1_batch_loss(phi, batch, cfg, mode, &drop_rng);
    const double obj = bl.objective->value[0];
    check_finite_loss(1, it, obj, lr);
    zero_grads(params);
    backward(bl.objective);
    opt.step();
    final_obj = obj;

    std::vector<int> hist(static_cast<std::size_t>(cfg.heads), 0);
    for (int w : bl.winners) ++hist[static_cast<std::size_t>(w)];
    train_csv += strfmt("%d,%s,%s,%s", it, format_double(lr).c_str(),
                        format_double(obj).c_str(),
                        format_double(bl.ct_term).c_str()) +
                 histogram_cells(hist) + "\n";

    if (has_val && (it % cfg.val_interval == 0 || it == cfg.iterations)) {
      const ValStats vs = run_validation();
      std::vector<int> vhist(vs.hist.begin(), vs.hist.end());
      val_csv += strfmt("%d,%s,%s,%s", it, format_double(vs.objective).c_str(),
                        format_double(vs.ct_term).c_str(),
                        format_double(vs.ct_mae).c_str()) +
                 histogram_cells(vhist) + "\n";
      best.consider(it, vs.objective, params);
    }
  }

  TrainResult res;
  if (has_val) {
    best.restore(params);
    const ValStats vs = run_validation();
    res.best_iteration = best.best_iter;
    res.best_val_objective = vs.objective;
    res.final_ct_loss = vs.ct_term;
    res.val_winner_histogram = vs.hist;
    Manifest man;
    echo_config(man, cfg);
    man.set("data.dir", data.dir.string());
    man.set_hex("data.manifest_hash", hash_file(data.dir / "manifest.txt"));
    man.set("result.best_iteration", static_cast<std::int64_t>(res.best_iteration));
    man.set("result.best_val_objective", res.best_val_objective);
    man.set("result.final_train_objective", final_obj);
    man.set("result.final_ct_loss", res.final_ct_loss);
    man.set("result.val_ct_mae", vs.ct_mae);
    man.set("result.val_winner_histogram", join_hist(vs.hist));
    res.final_train_objective = final_obj;
    res.model = phi;
    res.checkpoint_path = out_dir / "stage1.ckpt";
    save_model(phi, res.checkpoint_path);
    man.set_hex("result.checkpoint_hash", hash_file(res.checkpoint_path));
    man.save(out_dir / "stage1_manifest.txt");
  } else {
    res.best_iteration = cfg.iterations;
    res.best_val_objective = final_obj;
    res.final_ct_loss = final_obj * cfg.c_ct;
    res.final_train_objective = final_obj;
    res.model = phi;
    res.checkpoint_path = out_dir / "stage1.ckpt";
    save_model(phi, res.checkpoint_path);
    Manifest man;
    echo_config(man, cfg);
    man.set("data.dir", data.dir.string());
    man.set_hex("data.manifest_hash", hash_file(data.dir / "manifest.txt"));
    man.set("result.best_iteration", static_cast<std::int64_t>(res.best_iteration));
    man.set("result.final_train_objective", final_obj);
    man.set("result.final_ct_loss", res.final_ct_loss);
    man.set_hex("result.checkpoint_hash", hash_file(res.checkpoint_path));
    man.save(out_dir / "stage1_manifest.txt");
  }
  write_file_text(out_dir / "stage1_train_log.csv", train_csv);
  write_file_text(out_dir / "stage1_val_log.csv", val_csv);
  return res;
}

TrainResult train_stage2(const TrainConfig& cfg_in, const ResidualDataset& residuals,
                         const DatasetIndex& data, const fs::path& out_dir) {
  TrainConfig cfg = cfg_in;
  cfg.validate();
  if (cfg.stage != 2) throw ContractViolation("train_stage2: config stage must be 2");
  if (residuals.records.empty())
    throw ContractViolation("train_stage2: residual dataset is empty");
  // By definition c_pet is the dataset's mean squared residual.
  cfg.c_pet = residuals.mean_sq_residual > 0.0 ? residuals.mean_sq_residual : 1.0;
  fs::create_directories(out_dir);

  Model psi = make_model(imitation_arch(), Rng::fork(cfg.seed, 0).seed());
  const std::vector<Tensor> params = psi.params();
  Adam opt(params, AdamConfig{cfg.learning_rate, 0.9, 0.999, 1e-8});
  Rng batch_rng = Rng::fork(cfg.seed, 1);
  SampleCache cache{&data};

  std::vector<const ResidualRecord*> train_rows, val_rows;
  for (std::size_t i = 0; i < residuals.records.size(); ++i) {
    if (i < residuals.train_rows())
      train_rows.push_back(&residuals.records[i]);
    else
      val_rows.push_back(&residuals.records[i]);
  }
  const bool has_val = !val_rows.empty();
  BestTracker best;

  std::string train_csv = "iteration,lr,objective,mse_au2\n";
  std::string val_csv = "iteration,objective,mse_au2\n";

  double final_obj = 0.0;
  for (int it = 1; it <= cfg.iterations; ++it) {
    const double lr = schedule_lr(cfg, it);
    opt.set_lr(lr);
    std::vector<Stage2Entry> items;
    for (int b = 0; b < cfg.batch_size; ++b) {
      const double coin = batch_rng.uniform();
      if (coin < cfg.identity_fraction && !data.train.empty()) {
        const std::int64_t id =
            data.train[batch_rng.uniform_int(data.train.size())];
        items.push_back({nullptr, &cache.get(id)});
      } else {
        const ResidualRecord* rec =
            train_rows[batch_rng.uniform_int(train_rows.size())];
        items.push_back({rec, &cache.get(rec->sample_id)});
      }
    }
    const StageBatch batch = make_stage2_batch(items);
    const BatchLoss bl = stage2_batch_loss(psi, batch, cfg);
    const double obj = bl.objective->value[0];
    check_finite_loss(2, it, obj, lr);
    zero_grads(params);
    backward(bl.objective);
    opt.step();
    final_obj = obj;
    train_csv += strfmt("%d,%s,%s,%s\n", it, format_double(lr).c_str(),
                        format_double(obj).c_str(),
                        format_double(bl.metric_term).c_str());

    if (has_val && (it % cfg.val_interval == 0 || it == cfg.iterations)) {
      const ValStats vs = validate_stage2(val_rows, cache, cfg, psi);
      val_csv += strfmt("%d,%s,%s\n", it, format_double(vs.objective).c_str(),
                        format_double(vs.metric_term).c_str());
      best.consider(it, vs.objective, params);
    }
  }

  TrainResult res;
  double val_mse = 0.0;
  if (has_val) {
    best.restore(params);
    const ValStats vs = validate_stage2(val_rows, cache, cfg, psi);
    res.best_iteration = best.best_iter;
    res.best_val_objective = vs.objective;
    val_mse = vs.metric_term;
  } else {
    res.best_iteration = cfg.iterations;
    res.best_val_objective = final_obj;
  }
  res.final_train_objective = final_obj;
  res.model = psi;
  res.checkpoint_path = out_dir / "stage2.ckpt";
  save_model(psi, res.checkpoint_path);

  Manifest man;
  echo_config(man, cfg);
  man.set("data.dir", data.dir.string());
  man.set_hex("data.manifest_hash", hash_file(data.dir / "manifest.txt"));
  man.set("residual.count", static_cast<std::int64_t>(residuals.records.size()));
  man.set("residual.c_pet", cfg.c_pet);
  man.set_hex("residual.stage1_hash", residuals.stage1_hash);
  man.set("result.best_iteration", static_cast<std::int64_t>(res.best_iteration));
  man.set("result.best_val_objective", res.best_val_objective);
  man.set("result.final_train_objective", final_obj);
  if (has_val) man.set("result.val_mse_au2", val_mse);
  man.set_hex("result.checkpoint_hash", hash_file(res.checkpoint_path));
  man.save(out_dir / "stage2_manifest.txt");
  write_file_text(out_dir / "stage2_train_log.csv", train_csv);
  write_file_text(out_dir / "stage2_val_log.csv", val_csv);
  return res;
}

TrainResult train_stage3(const TrainConfig& cfg, const DatasetIndex& data,
                         const fs::path& stage1_checkpoint,
                         const fs::path& stage2_checkpoint,
                         const fs::path& out_dir) {
  cfg.validate();
  if (cfg.stage != 3) throw ContractViolation("train_stage3: config stage must be 3");
  if (data.train.empty()) throw ContractViolation("train_stage3: training split is empty");
  if (!fs::exists(stage1_checkpoint))
    throw IoError("stage 3 requires the stage-1 checkpoint: " +
                  stage1_checkpoint.string());
  if (!fs::exists(stage2_checkpoint))
    throw IoError("stage 3 requires the stage-2 checkpoint: " +
                  stage2_checkpoint.string());
  fs::create_directories(out_dir);

  Model psi = load_model(stage2_checkpoint, ModelKind::kImitation);
  psi.set_requires_grad(false);
  Model phi = cfg.resume_from_stage1
                  ? load_model(stage1_checkpoint, ModelKind::kSynthesis)
                  : make_model(synthesis_arch(cfg.heads, 0.0),
                               Rng::fork(cfg.seed, 0).seed());
  if (phi.arch.heads != cfg.heads)
    throw ContractViolation(
        strfmt("stage 3: config expects %d heads but the synthesis checkpoint "
               "provides %d",
               cfg.heads, phi.arch.heads));

  const std::vector<Tensor> params = phi.params();
  Adam opt(params, AdamConfig{cfg.learning_rate, 0.9, 0.999, 1e-8});
  Rng batch_rng = Rng::fork(cfg.seed, 1);
  SampleCache cache{&data};
  const bool has_val = !data.val.empty();
  BestTracker best;

  auto run_validation = [&]() {
    return validate_ct(data.val, cache, cfg.batch_size, cfg.heads,
                       [&](const StageBatch& b) {
                         return stage3_batch_loss(phi, psi, b, cfg);
                       });
  };

  std::string train_csv = "iteration,lr,objective,ct_hu2,metric_au2" +
                          winner_columns(cfg.heads) + "\n";
  std::string val_csv = "iteration,objective,ct_hu2,metric_au2" +
                        winner_columns(cfg.heads) + "\n";

  double final_obj = 0.0;
  for (int it = 1; it <= cfg.iterations; ++it) {
    const double lr = schedule_lr(cfg, it);
    opt.set_lr(lr);
    std::vector<const Sample*> items;
    for (int b = 0; b < cfg.batch_size; ++b) {
      const std::int64_t id =
          data.train[batch_rng.uniform_int(data.train.size())];
      items.push_back(&cache.get(id));
    }
    const StageBatch batch = make_ct_batch(items);
    const BatchLoss bl = it <= cfg.wta_warmup_iterations
                             ? stage3_warmup_loss(phi, psi, batch, cfg)
                             : stage3_batch_loss(phi, psi, batch, cfg);
    const double obj = bl.objective->value[0];
    check_finite_loss(3, it, obj, lr);
    zero_grads(params);
    backward(bl.objective);
    opt.step();
    final_obj = obj;

    std::vector<int> hist(static_cast<std::size_t>(cfg.heads), 0);
    for (int w : bl.winners) ++hist[static_cast<std::size_t>(w)];
    train_csv += strfmt("%d,%s,%s,%s,%s", it, format_double(lr).c_str(),
                        format_double(obj).c_str(),
                        format_double(bl.ct_term).c_str(),
                        format_double(bl.metric_term).c_str()) +
                 histogram_cells(hist) + "\n";

    if (has_val && (it % cfg.val_interval == 0 || it == cfg.iterations)) {
      const ValStats vs = run_validation();
      std::vector<int> vhist(vs.hist.begin(), vs.hist.end());
      val_csv += strfmt("%d,%s,%s,%s", it, format_double(vs.objective).c_str(),
                        format_double(vs.ct_term).c_str(),
                        format_double(vs.metric_term).c_str()) +
                 histogram_cells(vhist) + "\n";
      best.consider(it, vs.objective, params);
    }
  }

  TrainResult res;
  Manifest man;
  echo_config(man, cfg);
  man.set("data.dir", data.dir.string());
  man.set_hex("data.manifest_hash", hash_file(data.dir / "manifest.txt"));
  man.set("stage1.checkpoint", stage1_checkpoint.string());
  man.set_hex("stage1.checkpoint_hash", hash_file(stage1_checkpoint));
  man.set("stage2.checkpoint", stage2_checkpoint.string());
  man.set_hex("stage2.checkpoint_hash", hash_file(stage2_checkpoint));
  if (has_val) {
    best.restore(params);
    const ValStats vs = run_validation();
    res.best_iteration = best.best_iter;
    res.best_val_objective = vs.objective;
    res.final_ct_loss = vs.ct_term;
    res.val_winner_histogram = vs.hist;
    man.set("result.best_iteration", static_cast<std::int64_t>(res.best_iteration));
    man.set("result.best_val_objective", res.best_val_objective);
    man.set("result.final_ct_loss", res.final_ct_loss);
    man.set("result.val_metric_au2", vs.metric_term);
    man.set("result.val_winner_histogram", join_hist(vs.hist));
  } else {
    res.best_iteration = cfg.iterations;
    res.best_val_objective = final_obj;
    man.set("result.best_iteration", static_cast<std::int64_t>(res.best_iteration));
  }
  res.final_train_objective = final_obj;
  man.set("result.final_train_objective", final_obj);
  res.model = phi;
  res.checkpoint_path = out_dir / "stage3.ckpt";
  save_model(phi, res.checkpoint_path);
  man.set_hex("result.checkpoint_hash", hash_file(res.checkpoint_path));
  man.save(out_dir / "stage3_manifest.txt");
  write_file_text(out_dir / "stage3_train_log.csv", train_csv);
  write_file_text(out_dir / "stage3_val_log.csv", val_csv);
  return res;
}

}  // namespace petsynth
