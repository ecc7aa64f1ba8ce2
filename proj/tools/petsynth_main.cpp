// Command-line front end for the synthesis / reconstruction workbench. One
// binary, five subcommands covering the full pipeline:
//
//   gen-data           synthesize a phantom dataset with train/val/test splits
//   train              run one training stage (1: multi-hypothesis CT,
//                      2: residual imitation, 3: combined retraining)
//   recon              run a checkpoint over a split and reconstruct PET
//   eval               score recon outputs and compare methods pairwise
//   demo-perturbation  show how a local CT patch spreads into PET residuals
//
// All tunables live in one key=value config file (see --config /
// PETSYNTH_CONFIG); --set section.key=value overrides individual entries.
// Every command echoes the effective config into its output manifest and is
// byte-reproducible from (config, seed).
//
// Exit codes: 0 success, 1 usage or config error, 2 runtime or numerical
// error. Error lines go to stderr prefixed with "error:".

#include <algorithm>
#include <atomic>
#include <cstdio>
#include <cstdlib>
#include <exception>
#include <functional>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include "CLI11.hpp"
#include "petsynth/config.hpp"
#include "petsynth/container.hpp"
#include "petsynth/errors.hpp"
#include "petsynth/eval.hpp"
#include "petsynth/image.hpp"
#include "petsynth/models.hpp"
#include "petsynth/phantom.hpp"
#include "petsynth/physics.hpp"
#include "petsynth/projector.hpp"
#include "petsynth/rng.hpp"
#include "petsynth/training.hpp"
#include "petsynth/util.hpp"

namespace {

using namespace petsynth;

// ---------------------------------------------------------------------------
// Config plumbing
// ---------------------------------------------------------------------------

Config load_run_config(const std::string& config_flag,
                       const std::vector<std::string>& overrides) {
  std::string path = config_flag;
  if (path.empty()) {
    if (const char* env = std::getenv("PETSYNTH_CONFIG")) path = env;
  }
  Config cfg = path.empty() ? Config::parse_text("", "<defaults>")
                            : Config::parse_file(path);
  for (const std::string& kv : overrides) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos || eq == 0) {
      throw ConfigError("--set expects section.key=value, got '" + kv + "'");
    }
    cfg.set(trim(kv.substr(0, eq)), trim(kv.substr(eq + 1)));
  }
  return cfg;
}

void embed_config_echo(Manifest& man, const Config& cfg) {
  for (const std::string& line : split(cfg.echo(), '\n')) {
    if (line.empty()) continue;
    const auto pos = line.find(" = ");
    man.set("config." + line.substr(0, pos), line.substr(pos + 3));
  }
}

ProjectorGeometry geometry_from(Config& cfg, const PhantomSpec& spec) {
  const int n_angles = static_cast<int>(cfg.get_int("recon.n_angles", 96));
  return ProjectorGeometry::standard(spec.size, spec.size,
                                     spec.pixel_spacing_mm, n_angles);
}

ReconConfig recon_from(Config& cfg) {
  ReconConfig rc;
  rc.iterations = static_cast<int>(cfg.get_int("recon.iterations", rc.iterations));
  rc.init_value = cfg.get_double("recon.init_value", rc.init_value);
  rc.mu.mu_water = cfg.get_double("recon.mu_water", rc.mu.mu_water);
  rc.mu.slope_bone = cfg.get_double("recon.slope_bone", rc.mu.slope_bone);
  return rc;
}

struct DatasetSettings {
  int n = 400;
  SplitFractions split;
};

DatasetSettings dataset_from(Config& cfg) {
  DatasetSettings d;
  d.n = static_cast<int>(cfg.get_int("dataset.n", d.n));
  d.split.train = cfg.get_double("dataset.train_fraction", d.split.train);
  d.split.val = cfg.get_double("dataset.val_fraction", d.split.val);
  d.split.test = cfg.get_double("dataset.test_fraction", d.split.test);
  return d;
}

// Commands share one config file, so sections a command does not act on are
// still consumed (otherwise finish() would flag them as unknown keys).
void consume_train_keys(Config& cfg) {
  for (const char* k :
       {"train.learning_rate", "train.lr_drop_factor", "train.lr_drop_fraction",
        "train.ct_weight", "train.metric_weight", "train.c_ct", "train.c_pet",
        "train.dropout_rate", "train.identity_fraction"}) {
    (void)cfg.get_double(k, 0.0);
  }
  for (const char* k :
       {"train.iterations", "train.batch_size", "train.heads",
        "train.val_interval", "train.residual_train_samples",
        "train.residual_val_samples", "train.seed",
        "train.wta_warmup_iterations"}) {
    (void)cfg.get_int(k, 0);
  }
  (void)cfg.get_bool("train.resume_from_stage1", true);
}

void consume_phantom_keys(Config& cfg) { (void)phantom_spec_from_config(cfg); }

std::uint64_t cli_seed(Config& cfg, const char* key, std::uint64_t def) {
  return static_cast<std::uint64_t>(
      cfg.get_int(key, static_cast<std::int64_t>(def)));
}

// ---------------------------------------------------------------------------
// Worker pool: index-addressed so outputs never depend on the pool size.
// ---------------------------------------------------------------------------

void parallel_for(int n, int workers, const std::function<void(int)>& fn) {
  if (workers <= 1 || n <= 1) {
    for (int i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<int> next{0};
  std::mutex err_mutex;
  std::exception_ptr first_error;
  auto body = [&] {
    for (int i = next.fetch_add(1); i < n; i = next.fetch_add(1)) {
      try {
        fn(i);
      } catch (...) {
        std::lock_guard<std::mutex> lock(err_mutex);
        if (!first_error) first_error = std::current_exception();
        return;
      }
    }
  };
  std::vector<std::thread> pool;
  const int count = std::min(workers, n);
  pool.reserve(count);
  for (int w = 0; w < count; ++w) pool.emplace_back(body);
  for (std::thread& t : pool) t.join();
  if (first_error) std::rethrow_exception(first_error);
}

// ---------------------------------------------------------------------------
// gen-data
// ---------------------------------------------------------------------------

int run_gen_data(Config cfg, const fs::path& out, std::int64_t n_flag,
                 std::int64_t seed_flag) {
  PhantomSpec spec = phantom_spec_from_config(cfg);
  if (seed_flag >= 0) spec.seed = static_cast<std::uint64_t>(seed_flag);
  DatasetSettings ds = dataset_from(cfg);
  if (n_flag > 0) ds.n = static_cast<int>(n_flag);
  (void)geometry_from(cfg, spec);
  (void)recon_from(cfg);
  (void)cli_seed(cfg, "recon.mc_seed", 7);
  consume_train_keys(cfg);
  cfg.finish();

  const DatasetIndex idx = generate_dataset(spec, ds.n, ds.split, out);
  std::printf("gen-data: wrote %d samples (%zu train / %zu val / %zu test) to %s\n",
              idx.n, idx.train.size(), idx.val.size(), idx.test.size(),
              out.string().c_str());
  return 0;
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

void require_checkpoint(const fs::path& path, int stage, int needed_by) {
  if (fs::exists(path)) return;
  throw ConfigError(strfmt(
      "train --stage %d requires the stage-%d checkpoint at %s; run train "
      "--stage %d first",
      needed_by, stage, path.string().c_str(), stage));
}

int run_train(Config cfg, int stage, const fs::path& data_dir,
              const fs::path& ckpt_dir) {
  const DatasetIndex data = load_dataset(data_dir);
  consume_phantom_keys(cfg);
  (void)dataset_from(cfg);
  const ProjectorGeometry geom = geometry_from(cfg, data.spec);
  const ReconConfig recon = recon_from(cfg);
  (void)cli_seed(cfg, "recon.mc_seed", 7);

  const bool has_c_ct = cfg.has("train.c_ct");
  const bool has_c_pet = cfg.has("train.c_pet");
  TrainConfig tc = train_config_from_config(cfg, stage);
  cfg.finish();

  fs::create_directories(ckpt_dir);
  const fs::path stage1_ckpt = ckpt_dir / "stage1.ckpt";
  const fs::path stage2_ckpt = ckpt_dir / "stage2.ckpt";

  TrainResult result;
  if (stage == 1) {
    result = train_stage1(tc, data, ckpt_dir);
  } else if (stage == 2) {
    require_checkpoint(stage1_ckpt, 1, 2);
    const fs::path res_dir = ckpt_dir / "residuals";
    const fs::path res_manifest = res_dir / "residuals_manifest.txt";
    ResidualDataset residuals;
    bool rebuild = true;
    if (fs::exists(res_manifest)) {
      residuals = load_residual_dataset(res_dir);
      rebuild = residuals.stage1_hash != hash_file(stage1_ckpt);
      if (rebuild) {
        std::printf("train: residual dataset is stale (stage-1 checkpoint "
                    "changed); rebuilding\n");
      }
    }
    if (rebuild) {
      std::printf("train: building the residual dataset (%d train + %d val "
                  "samples)\n",
                  tc.residual_train_samples, tc.residual_val_samples);
      residuals = build_residual_dataset(stage1_ckpt, data, geom, recon,
                                         tc.residual_train_samples,
                                         tc.residual_val_samples);
      save_residual_dataset(residuals, res_dir);
    } else {
      std::printf("train: reusing the residual dataset in %s\n",
                  res_dir.string().c_str());
    }
    result = train_stage2(tc, residuals, data, ckpt_dir);
  } else {
    require_checkpoint(stage1_ckpt, 1, 3);
    require_checkpoint(stage2_ckpt, 2, 3);
    // The normalization constants chain from the earlier stages unless the
    // config pins them explicitly.
    if (!has_c_ct) {
      const Manifest m1 = Manifest::load(ckpt_dir / "stage1_manifest.txt");
      tc.c_ct = m1.get_double("result.final_ct_loss");
    }
    if (!has_c_pet) {
      const Manifest m2 = Manifest::load(ckpt_dir / "stage2_manifest.txt");
      tc.c_pet = m2.get_double("residual.c_pet");
    }
    tc.validate();
    result = train_stage3(tc, data, stage1_ckpt, stage2_ckpt, ckpt_dir);
  }

  std::printf("train: stage %d done; best iteration %d, val objective %s\n",
              stage, result.best_iteration,
              format_double(result.best_val_objective).c_str());
  std::printf("train: checkpoint %s\n", result.checkpoint_path.string().c_str());
  return 0;
}

// ---------------------------------------------------------------------------
// recon
// ---------------------------------------------------------------------------

const std::vector<std::int64_t>& split_ids(const DatasetIndex& data,
                                           const std::string& split) {
  if (split == "train") return data.train;
  if (split == "val") return data.val;
  if (split == "test") return data.test;
  throw ConfigError("unknown split '" + split + "' (use train, val or test)");
}

int run_recon(Config cfg, const fs::path& ckpt, const fs::path& data_dir,
              const std::string& split, const fs::path& out, int mc_samples,
              bool identity, int workers) {
  const DatasetIndex data = load_dataset(data_dir);
  consume_phantom_keys(cfg);
  (void)dataset_from(cfg);
  consume_train_keys(cfg);
  const ProjectorGeometry geom = geometry_from(cfg, data.spec);
  const ReconConfig recon = recon_from(cfg);
  const std::uint64_t mc_seed = cli_seed(cfg, "recon.mc_seed", 7);
  cfg.finish();

  const std::vector<std::int64_t>& ids = split_ids(data, split);
  if (ids.empty()) throw ConfigError("split '" + split + "' is empty");
  if (mc_samples < 0) throw ConfigError("--mc-samples must be >= 0");

  std::optional<Model> model;
  if (!identity) model = load_model(ckpt, ModelKind::kSynthesis);

  fs::create_directories(out);
  std::vector<int> heads_out(ids.size(), 0);
  parallel_for(static_cast<int>(ids.size()), workers, [&](int i) {
    const std::int64_t id = ids[i];
    const Sample s = load_sample(data, id);
    std::vector<Image2D> hyps;
    if (identity) {
      hyps.push_back(s.ct);
    } else if (mc_samples > 0) {
      Rng rng = Rng::fork(mc_seed, static_cast<std::uint64_t>(id));
      hyps = mc_dropout_sample(*model, s.mr, mc_samples, rng);
    } else {
      hyps = synth_forward(*model, s.mr);
    }
    const Image2D ref = reconstruct_ppet(s.ct, s.ct, s.pet, geom, recon);
    Container c;
    c.put_scalar("meta/sample_id", static_cast<double>(id));
    c.put_scalar("meta/heads", static_cast<double>(hyps.size()));
    save_image(c, "ct", s.ct);
    save_image(c, "head_mask", s.head_mask);
    save_image(c, "brain_mask", s.brain_mask);
    save_image(c, "ref", ref);
    for (std::size_t m = 0; m < hyps.size(); ++m) {
      const Image2D pp = reconstruct_ppet(hyps[m], s.ct, s.pet, geom, recon);
      Image2D z(ref.width, ref.height, ref.pixel_spacing_mm, Modality::kResidual);
      for (std::size_t k = 0; k < z.values.size(); ++k) {
        z.values[k] = ref.values[k] - pp.values[k];
      }
      save_image(c, strfmt("pct_%zu", m), hyps[m]);
      save_image(c, strfmt("ppet_%zu", m), pp);
      save_image(c, strfmt("z_%zu", m), z);
    }
    c.save(out / strfmt("recon_%05lld.bin", static_cast<long long>(id)));
    heads_out[i] = static_cast<int>(hyps.size());
  });

  Manifest man;
  man.set("recon.format", std::int64_t{1});
  embed_config_echo(man, cfg);
  man.set("recon.data_dir", data_dir.string());
  man.set_hex("recon.data_manifest_hash", hash_file(data_dir / "manifest.txt"));
  man.set("recon.checkpoint", identity ? std::string("<identity>")
                                       : ckpt.string());
  if (!identity) man.set_hex("recon.checkpoint_hash", hash_file(ckpt));
  man.set("recon.split", split);
  man.set("recon.mc_samples", std::int64_t{mc_samples});
  man.set("recon.identity", std::int64_t{identity ? 1 : 0});
  man.set("recon.heads", std::int64_t{heads_out.front()});
  std::string id_list;
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (i) id_list += ' ';
    id_list += std::to_string(ids[i]);
  }
  man.set("recon.samples", id_list);
  for (const std::int64_t id : ids) {
    const std::string name = strfmt("recon_%05lld.bin", static_cast<long long>(id));
    man.set_hex("recon.hash_" + name, hash_file(out / name));
  }
  man.save(out / "recon_manifest.txt");
  std::printf("recon: wrote %zu samples x %d outputs to %s\n", ids.size(),
              heads_out.front(), out.string().c_str());
  return 0;
}

// ---------------------------------------------------------------------------
// eval
// ---------------------------------------------------------------------------

struct ReconDir {
  std::string method;
  fs::path dir;
  std::vector<std::int64_t> ids;
};

std::vector<std::int64_t> manifest_ids(const Manifest& man) {
  std::vector<std::int64_t> ids;
  for (const std::string& tok : split(man.get("recon.samples"), ' ')) {
    if (!tok.empty()) ids.push_back(std::strtoll(tok.c_str(), nullptr, 10));
  }
  return ids;
}

void require_matching_ids(const std::vector<ReconDir>& dirs) {
  for (std::size_t j = 1; j < dirs.size(); ++j) {
    std::string missing;
    for (const std::int64_t id : dirs[0].ids) {
      if (std::find(dirs[j].ids.begin(), dirs[j].ids.end(), id) ==
          dirs[j].ids.end()) {
        missing += strfmt(" %lld", static_cast<long long>(id));
      }
    }
    for (const std::int64_t id : dirs[j].ids) {
      if (std::find(dirs[0].ids.begin(), dirs[0].ids.end(), id) ==
          dirs[0].ids.end()) {
        missing += strfmt(" %lld", static_cast<long long>(id));
      }
    }
    if (!missing.empty()) {
      throw ConfigError(strfmt(
          "methods '%s' and '%s' cover different sample sets; missing ids:%s",
          dirs[0].method.c_str(), dirs[j].method.c_str(), missing.c_str()));
    }
  }
}

struct SampleScore {
  double mae_ct = 0.0;
  double mae_pet = 0.0;
};

// Multi-output checkpoints are scored as the mean over their heads so methods
// with different head counts stay comparable.
SampleScore score_container(const Container& c) {
  const Image2D ct = load_image(c, "ct");
  const Image2D head = load_image(c, "head_mask");
  const Image2D brain = load_image(c, "brain_mask");
  const Image2D ref = load_image(c, "ref");
  const int heads = static_cast<int>(c.get_scalar("meta/heads"));
  SampleScore s;
  for (int m = 0; m < heads; ++m) {
    s.mae_ct += mae_masked(load_image(c, strfmt("pct_%d", m)), ct, head);
    s.mae_pet += mae_masked(load_image(c, strfmt("ppet_%d", m)), ref, brain);
  }
  s.mae_ct /= heads;
  s.mae_pet /= heads;
  return s;
}

void dump_sample_images(const Container& c, std::int64_t id,
                        const std::string& method, const fs::path& dir) {
  const auto name = [&](const char* panel) {
    return dir / strfmt("%05lld_%s_%s.pgm", static_cast<long long>(id),
                        method.c_str(), panel);
  };
  write_pgm(load_image(c, "ct"), name("ct"));
  write_pgm(load_image(c, "ref"), name("ref"));
  write_pgm(load_image(c, "pct_0"), name("pct0"));
  write_pgm(load_image(c, "ppet_0"), name("ppet0"));
  write_pgm(load_image(c, "z_0"), name("z0"));
}

int run_eval(Config cfg, const std::vector<std::string>& recon_dirs,
             const std::string& methods_csv, const fs::path& out,
             const std::string& sampling_mh, const std::string& sampling_mc,
             int dump_images, int workers) {
  consume_phantom_keys(cfg);
  (void)dataset_from(cfg);
  consume_train_keys(cfg);
  (void)cfg.get_int("recon.n_angles", 96);
  (void)recon_from(cfg);
  (void)cli_seed(cfg, "recon.mc_seed", 7);
  cfg.finish();

  const std::vector<std::string> methods = split(methods_csv, ',');
  if (methods.size() != recon_dirs.size()) {
    throw ConfigError(strfmt(
        "--methods lists %zu names but %zu --recon-dir flags were given",
        methods.size(), recon_dirs.size()));
  }
  std::vector<ReconDir> dirs;
  for (std::size_t i = 0; i < methods.size(); ++i) {
    ReconDir d;
    d.method = trim(methods[i]);
    d.dir = recon_dirs[i];
    d.ids = manifest_ids(Manifest::load(d.dir / "recon_manifest.txt"));
    dirs.push_back(std::move(d));
  }
  require_matching_ids(dirs);

  fs::create_directories(out);
  const fs::path image_dir = out / "images";
  if (dump_images > 0) fs::create_directories(image_dir);

  std::vector<MetricsRow> rows(dirs.size() * dirs[0].ids.size());
  const int per_method = static_cast<int>(dirs[0].ids.size());
  parallel_for(static_cast<int>(rows.size()), workers, [&](int k) {
    const ReconDir& d = dirs[k / per_method];
    const std::int64_t id = d.ids[k % per_method];
    const Container c =
        Container::load(d.dir / strfmt("recon_%05lld.bin",
                                       static_cast<long long>(id)));
    const SampleScore s = score_container(c);
    rows[k] = {id, d.method, s.mae_ct, s.mae_pet};
    if (k % per_method < dump_images) {
      dump_sample_images(c, id, d.method, image_dir);
    }
  });

  const fs::path report_path = out / "report.csv";
  emit_report(rows, report_path);

  Manifest man;
  man.set("eval.format", std::int64_t{1});
  embed_config_echo(man, cfg);
  for (const ReconDir& d : dirs) {
    man.set("eval.dir_" + d.method, d.dir.string());
    man.set_hex("eval.recon_manifest_hash_" + d.method,
                hash_file(d.dir / "recon_manifest.txt"));
  }
  man.set("eval.samples", std::int64_t{per_method});
  for (const MethodSummary& s : summarize_methods(rows)) {
    man.set("eval.mae_ct_mean_" + s.method, s.ct_mean);
    man.set("eval.mae_pet_mean_" + s.method, s.pet_mean);
  }
  for (const PairedComparison& c : pairwise_tests(rows)) {
    const std::string key =
        "eval.t_" + c.metric + "_" + c.method_a + "_vs_" + c.method_b;
    man.set(key + "_t", c.test.t);
    man.set(key + "_p", c.test.p);
  }

  // Optional uncertainty comparison between two sampling schemes.
  if (sampling_mh.empty() != sampling_mc.empty()) {
    throw ConfigError("--sampling-mh and --sampling-mc must be given together");
  }
  if (!sampling_mh.empty()) {
    const fs::path mh_dir = sampling_mh;
    const fs::path mc_dir = sampling_mc;
    std::vector<std::int64_t> mh_ids =
        manifest_ids(Manifest::load(mh_dir / "recon_manifest.txt"));
    std::vector<std::int64_t> mc_ids =
        manifest_ids(Manifest::load(mc_dir / "recon_manifest.txt"));
    if (mh_ids != mc_ids) {
      throw ConfigError("sampling comparison needs identical sample sets");
    }
    std::vector<double> mh_medians(mh_ids.size()), mc_medians(mh_ids.size());
    parallel_for(static_cast<int>(mh_ids.size()), workers, [&](int i) {
      const std::int64_t id = mh_ids[i];
      const std::string file =
          strfmt("recon_%05lld.bin", static_cast<long long>(id));
      const Container a = Container::load(mh_dir / file);
      const Container b = Container::load(mc_dir / file);
      const Image2D ref = load_image(a, "ref");
      const Image2D ref_b = load_image(b, "ref");
      if (ref.values != ref_b.values) {
        throw ConfigError(strfmt(
            "sampling dirs disagree on the reference reconstruction for "
            "sample %lld (different data or geometry?)",
            static_cast<long long>(id)));
      }
      const Image2D brain = load_image(a, "brain_mask");
      const auto samples_of = [](const Container& c) {
        const int heads = static_cast<int>(c.get_scalar("meta/heads"));
        std::vector<Image2D> out;
        for (int m = 0; m < heads; ++m) {
          out.push_back(load_image(c, strfmt("ppet_%d", m)));
        }
        return out;
      };
      const SamplingSummary s =
          compare_sampling(ref, samples_of(a), samples_of(b), brain);
      mh_medians[i] = s.mh_median_abs_z;
      mc_medians[i] = s.mc_median_abs_z;
    });
    std::string csv = "sample_id,mh_median_abs_z,mc_median_abs_z\n";
    double mh_mean = 0.0, mc_mean = 0.0;
    for (std::size_t i = 0; i < mh_ids.size(); ++i) {
      csv += strfmt("%lld,%s,%s\n", static_cast<long long>(mh_ids[i]),
                    format_double(mh_medians[i]).c_str(),
                    format_double(mc_medians[i]).c_str());
      mh_mean += mh_medians[i];
      mc_mean += mc_medians[i];
    }
    mh_mean /= static_cast<double>(mh_ids.size());
    mc_mean /= static_cast<double>(mh_ids.size());
    const TTestResult t = mh_ids.size() >= 2
                              ? paired_t_test(mh_medians, mc_medians)
                              : TTestResult{};
    csv += strfmt("# aggregate,n,%zu,mh_mean,%s,mc_mean,%s,t,%s,p,%s,degenerate,%d\n",
                  mh_ids.size(), format_double(mh_mean).c_str(),
                  format_double(mc_mean).c_str(),
                  format_double(t.t).c_str(), format_double(t.p).c_str(),
                  t.degenerate ? 1 : 0);
    write_file_text(out / "sampling.csv", csv);
    man.set("sampling.mh_dir", mh_dir.string());
    man.set("sampling.mc_dir", mc_dir.string());
    man.set("sampling.mh_mean_median_abs_z", mh_mean);
    man.set("sampling.mc_mean_median_abs_z", mc_mean);
    man.set("sampling.t", t.t);
    man.set("sampling.p", t.p);
    std::printf("eval: sampling medians |Z|: mh %s vs mc %s (p %s)\n",
                format_double(mh_mean).c_str(), format_double(mc_mean).c_str(),
                format_double(t.p).c_str());
  }

  man.save(out / "eval_manifest.txt");
  for (const MethodSummary& s : summarize_methods(rows)) {
    std::printf("eval: %-12s mae_ct %8.2f HU   mae_pet %8.4f a.u.   (n=%zu)\n",
                s.method.c_str(), s.ct_mean, s.pet_mean, s.n);
  }
  std::printf("eval: report %s\n", report_path.string().c_str());
  return 0;
}

// ---------------------------------------------------------------------------
// demo-perturbation
// ---------------------------------------------------------------------------

int run_demo(Config cfg, const fs::path& data_dir, std::int64_t sample_flag,
             int patch_size, double delta_hu, std::int64_t cx_flag,
             std::int64_t cy_flag, const fs::path& out) {
  const DatasetIndex data = load_dataset(data_dir);
  consume_phantom_keys(cfg);
  (void)dataset_from(cfg);
  consume_train_keys(cfg);
  const ProjectorGeometry geom = geometry_from(cfg, data.spec);
  const ReconConfig recon = recon_from(cfg);
  (void)cli_seed(cfg, "recon.mc_seed", 7);
  cfg.finish();

  if (patch_size <= 0) throw ConfigError("--patch-size must be positive");
  std::int64_t id = sample_flag;
  if (id < 0) {
    if (data.test.empty()) throw ConfigError("dataset has no test samples");
    id = data.test.front();
  }
  const Sample s = load_sample(data, id);

  // Default patch position: the head-mask centroid, which lands well inside
  // the brain for these phantoms.
  std::int64_t cx = cx_flag, cy = cy_flag;
  if (cx < 0 || cy < 0) {
    double sx = 0.0, sy = 0.0, cnt = 0.0;
    for (int y = 0; y < s.head_mask.height; ++y) {
      for (int x = 0; x < s.head_mask.width; ++x) {
        if (s.head_mask.at(x, y) == 0.0) continue;
        sx += x;
        sy += y;
        cnt += 1.0;
      }
    }
    cx = static_cast<std::int64_t>(std::llround(sx / cnt));
    cy = static_cast<std::int64_t>(std::llround(sy / cnt));
  }

  Image2D patch(s.ct.width, s.ct.height, s.ct.pixel_spacing_mm, Modality::kMask);
  const int half = patch_size / 2;
  const int x0 = static_cast<int>(cx) - half;
  const int y0 = static_cast<int>(cy) - half;
  for (int dy = 0; dy < patch_size; ++dy) {
    for (int dx = 0; dx < patch_size; ++dx) {
      const int x = x0 + dx, y = y0 + dy;
      if (x < 0 || y < 0 || x >= patch.width || y >= patch.height ||
          s.head_mask.at(x, y) == 0.0) {
        throw ContractViolation(strfmt(
            "perturbation patch at (%lld, %lld) size %d leaves the head mask",
            static_cast<long long>(cx), static_cast<long long>(cy), patch_size));
      }
      patch.at(x, y) = 1.0;
    }
  }

  Image2D perturbed = s.ct;
  for (std::size_t i = 0; i < perturbed.values.size(); ++i) {
    perturbed.values[i] += delta_hu * patch.values[i];
  }
  check_image(perturbed, "perturbed CT");

  const Image2D ref = reconstruct_ppet(s.ct, s.ct, s.pet, geom, recon);
  const Image2D pp = reconstruct_ppet(perturbed, s.ct, s.pet, geom, recon);

  Image2D ct_res(s.ct.width, s.ct.height, s.ct.pixel_spacing_mm,
                 Modality::kResidual);
  Image2D pet_res = ct_res;
  for (std::size_t i = 0; i < ct_res.values.size(); ++i) {
    ct_res.values[i] = perturbed.values[i] - s.ct.values[i];
    pet_res.values[i] = ref.values[i] - pp.values[i];
  }

  double mean_act = 0.0, brain_n = 0.0;
  for (std::size_t i = 0; i < ref.values.size(); ++i) {
    mean_act += ref.values[i] * s.brain_mask.values[i];
    brain_n += s.brain_mask.values[i];
  }
  mean_act /= brain_n;
  const double threshold = 0.05 * mean_act;

  const Image2D dilated = dilate_mask(patch, 3);
  std::int64_t outside = 0, exceeding = 0;
  for (std::size_t i = 0; i < ref.values.size(); ++i) {
    if (s.brain_mask.values[i] == 0.0 || dilated.values[i] != 0.0) continue;
    ++outside;
    if (std::fabs(pet_res.values[i]) > threshold) ++exceeding;
  }
  const double fraction =
      outside > 0 ? static_cast<double>(exceeding) / outside : 0.0;

  std::int64_t ct_support = 0, pet_support = 0, ct_support_on_patch = 0;
  for (std::size_t i = 0; i < ct_res.values.size(); ++i) {
    if (ct_res.values[i] != 0.0) {
      ++ct_support;
      if (patch.values[i] != 0.0) ++ct_support_on_patch;
    }
    if (pet_res.values[i] != 0.0) ++pet_support;
  }

  fs::create_directories(out);
  Container c;
  c.put_scalar("meta/sample_id", static_cast<double>(id));
  save_image(c, "ct", s.ct);
  save_image(c, "ct_perturbed", perturbed);
  save_image(c, "ref", ref);
  save_image(c, "ppet", pp);
  save_image(c, "ct_residual", ct_res);
  save_image(c, "pet_residual", pet_res);
  save_image(c, "patch", patch);
  save_image(c, "patch_dilated", dilated);
  save_image(c, "brain_mask", s.brain_mask);
  c.save(out / "demo.bin");
  write_pgm(s.ct, out / "ct.pgm");
  write_pgm(perturbed, out / "ct_perturbed.pgm");
  write_pgm(ref, out / "ref.pgm");
  write_pgm(pp, out / "ppet.pgm");
  write_pgm(ct_res, out / "ct_residual.pgm");
  write_pgm(pet_res, out / "pet_residual.pgm");

  Manifest man;
  man.set("demo.format", std::int64_t{1});
  embed_config_echo(man, cfg);
  man.set("demo.data_dir", data_dir.string());
  man.set("demo.sample", id);
  man.set("demo.patch_size", std::int64_t{patch_size});
  man.set("demo.delta_hu", delta_hu);
  man.set("demo.center_x", cx);
  man.set("demo.center_y", cy);
  man.set("demo.mean_brain_activity", mean_act);
  man.set("demo.threshold", threshold);
  man.set("demo.brain_pixels_outside_dilated_patch", outside);
  man.set("demo.pixels_exceeding", exceeding);
  man.set("demo.fraction_exceeding", fraction);
  man.set("demo.ct_residual_pixels", ct_support);
  man.set("demo.ct_residual_pixels_on_patch", ct_support_on_patch);
  man.set("demo.patch_pixels", std::int64_t{patch_size} * patch_size);
  man.set("demo.pet_residual_pixels", pet_support);
  man.save(out / "demo_manifest.txt");

  std::printf(
      "demo-perturbation: sample %lld, %dx%d patch at (%lld, %lld), +%s HU\n",
      static_cast<long long>(id), patch_size, patch_size,
      static_cast<long long>(cx), static_cast<long long>(cy),
      format_double(delta_hu).c_str());
  std::printf(
      "demo-perturbation: CT residual touches %lld pixels (patch has %d)\n",
      static_cast<long long>(ct_support), patch_size * patch_size);
  std::printf(
      "demo-perturbation: fraction of brain pixels outside the 3x-dilated "
      "patch with |PET residual| > 5%% of mean brain activity: %s\n",
      format_double(fraction).c_str());
  return 0;
}

}  // namespace

// ---------------------------------------------------------------------------
// Entry point
// ---------------------------------------------------------------------------

int main(int argc, char** argv) {
  CLI::App app{"MR-to-CT synthesis with PET-aware training: data generation, "
               "staged training, reconstruction, evaluation and the "
               "perturbation demo in one binary."};
  app.require_subcommand(1);

  std::string config_flag;
  std::vector<std::string> set_flags;
  int workers = 1;

  const auto add_common = [&](CLI::App* cmd, bool with_workers) {
    cmd->add_option("--config", config_flag,
                    "Config file (default: $PETSYNTH_CONFIG if set)");
    cmd->add_option("--set", set_flags,
                    "Override a config entry, section.key=value (repeatable)");
    if (with_workers) {
      cmd->add_option("--workers", workers,
                      "Worker threads for per-sample work (default 1; the "
                      "outputs do not depend on the pool size)");
    }
  };

  // gen-data
  std::string gen_out;
  std::int64_t gen_n = 0, gen_seed = -1;
  CLI::App* gen = app.add_subcommand("gen-data", "Generate a phantom dataset");
  gen->add_option("--out", gen_out, "Output dataset directory")->required();
  gen->add_option("--n", gen_n, "Number of samples (default: dataset.n = 400)");
  gen->add_option("--seed", gen_seed, "Generator seed (default: phantom.seed)");
  add_common(gen, true);

  // train
  int train_stage = 0;
  std::string train_data, train_ckpt_dir;
  CLI::App* train = app.add_subcommand("train", "Run one training stage");
  train->add_option("--stage", train_stage, "Training stage: 1, 2 or 3")
      ->required()
      ->check(CLI::Range(1, 3));
  train->add_option("--data", train_data, "Dataset directory")->required();
  train->add_option("--ckpt-dir", train_ckpt_dir,
                    "Checkpoint directory (shared across stages)")
      ->required();
  add_common(train, false);

  // recon
  std::string recon_ckpt, recon_data, recon_split = "test", recon_out;
  int recon_mc = 0;
  bool recon_identity = false;
  CLI::App* recon = app.add_subcommand(
      "recon", "Reconstruct PET through a checkpoint's synthesized CTs");
  recon->add_option("--ckpt", recon_ckpt, "Synthesis checkpoint");
  recon->add_option("--data", recon_data, "Dataset directory")->required();
  recon->add_option("--split", recon_split, "Split to process (default test)");
  recon->add_option("--out", recon_out, "Output directory")->required();
  recon->add_option("--mc-samples", recon_mc,
                    "Draw this many MC-dropout samples instead of using the "
                    "deterministic heads");
  recon->add_flag("--identity", recon_identity,
                  "Inject the true CT instead of a model (zero-residual check)");
  add_common(recon, true);

  // eval
  std::vector<std::string> eval_dirs;
  std::string eval_methods, eval_out, eval_mh, eval_mc;
  int eval_dump = 0;
  CLI::App* eval = app.add_subcommand(
      "eval", "Score recon outputs and compare methods pairwise");
  eval->add_option("--recon-dir", eval_dirs,
                   "Recon output directory (repeat once per method)")
      ->required();
  eval->add_option("--methods", eval_methods,
                   "Comma-separated method names matching --recon-dir order")
      ->required();
  eval->add_option("--out", eval_out, "Report output directory")->required();
  eval->add_option("--sampling-mh", eval_mh,
                   "Recon dir with multi-hypothesis samples for the "
                   "uncertainty comparison");
  eval->add_option("--sampling-mc", eval_mc,
                   "Recon dir with MC-dropout samples for the uncertainty "
                   "comparison");
  eval->add_option("--dump-images", eval_dump,
                   "Write PGM panels for the first N samples of each method");
  add_common(eval, true);

  // demo-perturbation
  std::string demo_data, demo_out;
  std::int64_t demo_sample = -1, demo_cx = -1, demo_cy = -1;
  int demo_patch = 3;
  double demo_delta = 1000.0;
  CLI::App* demo = app.add_subcommand(
      "demo-perturbation",
      "Show how a small CT perturbation spreads into PET residuals");
  demo->add_option("--data", demo_data, "Dataset directory")->required();
  demo->add_option("--sample", demo_sample,
                   "Sample id (default: first test sample)");
  demo->add_option("--patch-size", demo_patch, "Patch side length (default 3)");
  demo->add_option("--delta-hu", demo_delta,
                   "HU offset added inside the patch (default 1000)");
  demo->add_option("--cx", demo_cx, "Patch center column (default: centroid)");
  demo->add_option("--cy", demo_cy, "Patch center row (default: centroid)");
  demo->add_option("--out", demo_out, "Output directory")->required();
  add_common(demo, false);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }

  try {
    Config cfg = load_run_config(config_flag, set_flags);
    if (app.got_subcommand(gen)) {
      return run_gen_data(std::move(cfg), gen_out, gen_n, gen_seed);
    }
    if (app.got_subcommand(train)) {
      return run_train(std::move(cfg), train_stage, train_data, train_ckpt_dir);
    }
    if (app.got_subcommand(recon)) {
      if (!recon_identity && recon_ckpt.empty()) {
        throw ConfigError("recon needs --ckpt (or --identity)");
      }
      return run_recon(std::move(cfg), recon_ckpt, recon_data, recon_split,
                       recon_out, recon_mc, recon_identity, workers);
    }
    if (app.got_subcommand(eval)) {
      return run_eval(std::move(cfg), eval_dirs, eval_methods, eval_out,
                      eval_mh, eval_mc, eval_dump, workers);
    }
    if (app.got_subcommand(demo)) {
      return run_demo(std::move(cfg), demo_data, demo_sample, demo_patch,
                      demo_delta, demo_cx, demo_cy, demo_out);
    }
    std::fprintf(stderr, "error: no subcommand selected\n");
    return 1;
  } catch (const ConfigError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  }
}
