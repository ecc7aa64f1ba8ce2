// End-to-end tests of the command-line binary: every case spawns the real
// executable and inspects exit codes, stderr conventions and on-disk outputs.

#include <sys/wait.h>

#include <chrono>
#include <cstdlib>
#include <optional>
#include <string>

#include "doctest.h"
#include "petsynth/config.hpp"
#include "petsynth/container.hpp"
#include "petsynth/image.hpp"
#include "petsynth/util.hpp"

using namespace petsynth;

namespace {

struct CliResult {
  int code = -1;
  std::string output;  // stdout and stderr combined
};

CliResult run_cli(const std::string& args) {
  static int counter = 0;
  const fs::path log =
      fs::temp_directory_path() / strfmt("petsynth_cli_%d.log", counter++);
  const std::string cmd =
      std::string(PETSYNTH_BIN) + " " + args + " > " + log.string() + " 2>&1";
  const int status = std::system(cmd.c_str());
  CliResult r;
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  if (fs::exists(log)) {
    r.output = read_file_text(log);
    fs::remove(log);
  }
  return r;
}

struct CliFixture {
  fs::path root;
  fs::path data;   // 10 samples, 7/1/2
  fs::path ck;     // stage-1 checkpoint, 3 heads, 50 iterations
  fs::path ck_mc;  // stage-1 checkpoint, 1 head with dropout
  double stage1_seconds = 0.0;
};

const CliFixture& fixture() {
  static std::optional<CliFixture> f;
  if (f) return *f;
  CliFixture fx;
  fx.root = fs::temp_directory_path() / "petsynth_cli_tests";
  fs::remove_all(fx.root);
  fs::create_directories(fx.root);
  fx.data = fx.root / "data";
  fx.ck = fx.root / "ck";
  fx.ck_mc = fx.root / "ck_mc";

  CliResult gen = run_cli("gen-data --out " + fx.data.string() +
                          " --n 10 --seed 99");
  REQUIRE(gen.code == 0);

  const auto t0 = std::chrono::steady_clock::now();
  CliResult s1 = run_cli("train --stage 1 --data " + fx.data.string() +
                         " --ckpt-dir " + fx.ck.string() +
                         " --set train.iterations=50");
  fx.stage1_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0)
          .count();
  REQUIRE(s1.code == 0);

  CliResult s1mc = run_cli(
      "train --stage 1 --data " + fx.data.string() + " --ckpt-dir " +
      fx.ck_mc.string() +
      " --set train.heads=1 --set train.dropout_rate=0.1 --set "
      "train.iterations=10 --set train.batch_size=2 --set train.val_interval=5");
  REQUIRE(s1mc.code == 0);

  f = std::move(fx);
  return *f;
}

}  // namespace

TEST_CASE("cli: gen-data splits 10 samples 7/1/2 and reruns byte-identically") {
  const CliFixture& fx = fixture();
  CHECK(fs::exists(fx.data / "manifest.txt"));

  const fs::path again = fx.root / "data_again";
  CliResult r = run_cli("gen-data --out " + again.string() + " --n 10 --seed 99");
  REQUIRE(r.code == 0);
  CHECK(r.output.find("7 train / 1 val / 2 test") != std::string::npos);
  CHECK(read_file_text(again / "manifest.txt") ==
        read_file_text(fx.data / "manifest.txt"));
  CHECK(hash_file(again / "sample_00003.bin") ==
        hash_file(fx.data / "sample_00003.bin"));
}

TEST_CASE("cli: unknown config key exits 1 naming the key") {
  CliResult r = run_cli("gen-data --out " +
                        (fixture().root / "never_written").string() +
                        " --n 4 --set typo.key=3");
  CHECK(r.code == 1);
  CHECK(r.output.find("error:") != std::string::npos);
  CHECK(r.output.find("typo.key") != std::string::npos);
}

TEST_CASE("cli: usage errors exit 1") {
  CHECK(run_cli("").code == 1);              // no subcommand
  CHECK(run_cli("train --stage 7 --data x --ckpt-dir y").code == 1);
  CHECK(run_cli("--help").code == 0);
  const CliFixture& fx = fixture();
  CliResult r = run_cli("recon --ckpt none.ckpt --data " + fx.data.string() +
                        " --split weekend --out " +
                        (fx.root / "never").string());
  CHECK(r.code == 1);
  CHECK(r.output.find("unknown split") != std::string::npos);
}

TEST_CASE("cli: train --stage 2 before stage 1 names the missing stage") {
  const CliFixture& fx = fixture();
  CliResult r = run_cli("train --stage 2 --data " + fx.data.string() +
                        " --ckpt-dir " + (fx.root / "empty_ck").string());
  CHECK(r.code == 1);
  CHECK(r.output.find("error:") != std::string::npos);
  CHECK(r.output.find("stage-1 checkpoint") != std::string::npos);
  CHECK(r.output.find("--stage 1 first") != std::string::npos);

  CliResult r3 = run_cli("train --stage 3 --data " + fx.data.string() +
                         " --ckpt-dir " + (fx.root / "empty_ck").string());
  CHECK(r3.code == 1);
  CHECK(r3.output.find("stage-1 checkpoint") != std::string::npos);
}

TEST_CASE("cli: stage-1 smoke run (50 iterations) stays under 60 s") {
  const CliFixture& fx = fixture();
  CHECK(fs::exists(fx.ck / "stage1.ckpt"));
  CHECK(fs::exists(fx.ck / "stage1_train_log.csv"));
  CHECK(fs::exists(fx.ck / "stage1_manifest.txt"));
  CHECK(fx.stage1_seconds < 60.0);
  // The manifest carries the effective settings needed to reproduce the run.
  const Manifest man = Manifest::load(fx.ck / "stage1_manifest.txt");
  CHECK(man.get("train.iterations") == "50");
}

TEST_CASE("cli: recon --identity writes exactly-zero residuals") {
  const CliFixture& fx = fixture();
  const fs::path out = fx.root / "recon_identity";
  CliResult r = run_cli("recon --identity --data " + fx.data.string() +
                        " --split test --out " + out.string());
  REQUIRE(r.code == 0);
  const Container c = Container::load(out / "recon_00008.bin");
  CHECK(c.get_scalar("meta/heads") == 1.0);
  const Image2D z = load_image(c, "z_0");
  for (double v : z.values) CHECK(v == 0.0);
  const Image2D ref = load_image(c, "ref");
  const Image2D pp = load_image(c, "ppet_0");
  CHECK(ref.values == pp.values);
}

TEST_CASE("cli: recon writes M outputs per sample and reruns byte-identically") {
  const CliFixture& fx = fixture();
  const fs::path out1 = fx.root / "recon_mh";
  const fs::path out2 = fx.root / "recon_mh_again";
  const std::string tail = " --data " + fx.data.string() +
                           " --split test --ckpt " +
                           (fx.ck / "stage1.ckpt").string();
  REQUIRE(run_cli("recon" + tail + " --out " + out1.string()).code == 0);
  REQUIRE(run_cli("recon" + tail + " --out " + out2.string() + " --workers 2")
              .code == 0);
  const Container c = Container::load(out1 / "recon_00008.bin");
  CHECK(c.get_scalar("meta/heads") == 3.0);
  CHECK(c.has("pct_2"));
  CHECK(c.has("ppet_2"));
  CHECK(c.has("z_2"));
  // Identical bytes regardless of the worker count.
  for (const char* name : {"recon_00008.bin", "recon_00009.bin"}) {
    CHECK(hash_file(out1 / name) == hash_file(out2 / name));
  }
  CHECK(read_file_text(out1 / "recon_manifest.txt") ==
        read_file_text(out2 / "recon_manifest.txt"));
}

TEST_CASE("cli: eval self-comparison gives t = 0, p = 1") {
  const CliFixture& fx = fixture();
  const fs::path rdir = fx.root / "recon_mh";
  REQUIRE(fs::exists(rdir / "recon_manifest.txt"));
  const fs::path out = fx.root / "eval_self";
  CliResult r = run_cli("eval --recon-dir " + rdir.string() + " --recon-dir " +
                        rdir.string() + " --methods one,two --out " +
                        out.string());
  REQUIRE(r.code == 0);
  const std::string report = read_file_text(out / "report.csv");
  CHECK(report.find("# t_test,mae_pet_au,one,two,t,0,p,1,n,2,degenerate,0") !=
        std::string::npos);
  CHECK(report.find("# t_test,mae_ct_hu,one,two,t,0,p,1,n,2,degenerate,0") !=
        std::string::npos);
}

TEST_CASE("cli: eval rejects mismatched sample sets listing the ids") {
  const CliFixture& fx = fixture();
  const fs::path val_dir = fx.root / "recon_val";
  REQUIRE(run_cli("recon --identity --data " + fx.data.string() +
                  " --split val --out " + val_dir.string())
              .code == 0);
  CliResult r = run_cli("eval --recon-dir " + (fx.root / "recon_mh").string() +
                        " --recon-dir " + val_dir.string() +
                        " --methods a,b --out " +
                        (fx.root / "eval_mismatch").string());
  CHECK(r.code == 1);
  CHECK(r.output.find("error:") != std::string::npos);
  CHECK(r.output.find("different sample sets") != std::string::npos);
  CHECK(r.output.find("8") != std::string::npos);  // test split ids
  CHECK(r.output.find("7") != std::string::npos);  // val split id
}

TEST_CASE("cli: eval sampling comparison writes per-sample medians") {
  const CliFixture& fx = fixture();
  const fs::path mc_dir = fx.root / "recon_mc";
  REQUIRE(run_cli("recon --ckpt " + (fx.ck_mc / "stage1.ckpt").string() +
                  " --data " + fx.data.string() +
                  " --split test --mc-samples 3 --out " + mc_dir.string())
              .code == 0);
  const fs::path out = fx.root / "eval_sampling";
  CliResult r = run_cli(
      "eval --recon-dir " + (fx.root / "recon_mh").string() + " --recon-dir " +
      mc_dir.string() + " --methods mh,mc --out " + out.string() +
      " --sampling-mh " + (fx.root / "recon_mh").string() + " --sampling-mc " +
      mc_dir.string());
  REQUIRE(r.code == 0);
  const std::string csv = read_file_text(out / "sampling.csv");
  CHECK(csv.find("sample_id,mh_median_abs_z,mc_median_abs_z\n") == 0);
  CHECK(csv.find("\n8,") != std::string::npos);
  CHECK(csv.find("\n9,") != std::string::npos);
  CHECK(csv.find("# aggregate,n,2,") != std::string::npos);
  const Manifest man = Manifest::load(out / "eval_manifest.txt");
  CHECK(man.has("sampling.mh_mean_median_abs_z"));
  CHECK(man.has("sampling.mc_mean_median_abs_z"));
}

TEST_CASE("cli: mc-sampled recon requires a dropout model") {
  const CliFixture& fx = fixture();
  CliResult r = run_cli("recon --ckpt " + (fx.ck / "stage1.ckpt").string() +
                        " --data " + fx.data.string() +
                        " --split test --mc-samples 3 --out " +
                        (fx.root / "recon_bad_mc").string());
  CHECK(r.code == 2);
  CHECK(r.output.find("error:") != std::string::npos);
}

TEST_CASE("cli: demo-perturbation with delta 0 reports zero residuals") {
  const CliFixture& fx = fixture();
  const fs::path out = fx.root / "demo_zero";
  CliResult r = run_cli("demo-perturbation --data " + fx.data.string() +
                        " --delta-hu 0 --out " + out.string());
  REQUIRE(r.code == 0);
  const Manifest man = Manifest::load(out / "demo_manifest.txt");
  CHECK(man.get_double("demo.fraction_exceeding") == 0.0);
  CHECK(man.get_int("demo.ct_residual_pixels") == 0);
  CHECK(man.get_int("demo.pet_residual_pixels") == 0);
}

TEST_CASE("cli: demo-perturbation confines the CT residual to the patch") {
  const CliFixture& fx = fixture();
  const fs::path out = fx.root / "demo_default";
  CliResult r = run_cli("demo-perturbation --data " + fx.data.string() +
                        " --out " + out.string());
  REQUIRE(r.code == 0);
  const Manifest man = Manifest::load(out / "demo_manifest.txt");
  CHECK(man.get_int("demo.ct_residual_pixels") == 9);
  CHECK(man.get_int("demo.ct_residual_pixels_on_patch") == 9);
  CHECK(man.get_int("demo.patch_pixels") == 9);
  // The PET error is not confined: its support is strictly larger.
  CHECK(man.get_int("demo.pet_residual_pixels") >
        man.get_int("demo.patch_pixels"));
  CHECK(fs::exists(out / "pet_residual.pgm"));
  CHECK(fs::exists(out / "ct_residual.pgm"));
}

TEST_CASE("cli: demo-perturbation rejects a patch leaving the head mask") {
  const CliFixture& fx = fixture();
  CliResult r = run_cli("demo-perturbation --data " + fx.data.string() +
                        " --cx 1 --cy 1 --out " +
                        (fx.root / "demo_bad").string());
  CHECK(r.code == 2);
  CHECK(r.output.find("error:") != std::string::npos);
  CHECK(r.output.find("head mask") != std::string::npos);
}

TEST_CASE("cli: PETSYNTH_CONFIG supplies the default config") {
  const CliFixture& fx = fixture();
  const fs::path cfg_path = fx.root / "env_config.txt";
  write_file_text(cfg_path, "[dataset]\nn = 20\n");
  REQUIRE(setenv("PETSYNTH_CONFIG", cfg_path.string().c_str(), 1) == 0);
  CliResult r =
      run_cli("gen-data --out " + (fx.root / "data_env").string() + " --seed 5");
  unsetenv("PETSYNTH_CONFIG");
  REQUIRE(r.code == 0);
  CHECK(r.output.find("wrote 20 samples (14 train / 2 val / 4 test)") !=
        std::string::npos);
  // --set overrides beat the file.
  REQUIRE(setenv("PETSYNTH_CONFIG", cfg_path.string().c_str(), 1) == 0);
  CliResult r2 = run_cli("gen-data --out " + (fx.root / "data_env2").string() +
                         " --seed 5 --set dataset.n=6");
  unsetenv("PETSYNTH_CONFIG");
  REQUIRE(r2.code == 0);
  CHECK(r2.output.find("wrote 6 samples") != std::string::npos);
}

TEST_CASE("cli: full stage chain runs through the binary") {
  const CliFixture& fx = fixture();
  const std::string common =
      " --data " + fx.data.string() + " --ckpt-dir " + fx.ck.string() +
      " --set train.iterations=8 --set train.batch_size=2 --set "
      "train.val_interval=4 --set train.residual_train_samples=2 --set "
      "train.residual_val_samples=1";
  CliResult s2 = run_cli("train --stage 2" + common);
  REQUIRE(s2.code == 0);
  CHECK(s2.output.find("building the residual dataset") != std::string::npos);
  CliResult s2b = run_cli("train --stage 2" + common);
  REQUIRE(s2b.code == 0);
  CHECK(s2b.output.find("reusing the residual dataset") != std::string::npos);
  CliResult s3 = run_cli("train --stage 3" + common);
  REQUIRE(s3.code == 0);
  CHECK(fs::exists(fx.ck / "stage3.ckpt"));
  const Manifest man = Manifest::load(fx.ck / "stage3_manifest.txt");
  CHECK(man.has("stage1.checkpoint_hash"));
  CHECK(man.has("stage2.checkpoint_hash"));
}
