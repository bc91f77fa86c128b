#include <sys/wait.h>

#include <cstdlib>
#include <sstream>

#include "cli.hpp"
#include "doctest.h"
#include "test_util.hpp"
#include "wavedepth/camera.hpp"
#include "wavedepth/config.hpp"
#include "wavedepth/io.hpp"
#include "wavedepth/reconstruct.hpp"
#include "wavedepth/spectral.hpp"

using namespace wavedepth;

namespace {

struct Run {
  int code = 0;
  std::string out, err;
};

Run run(std::vector<std::string> args) {
  std::ostringstream out, err;
  Run r;
  r.code = cli::run(args, out, err);
  r.out = out.str();
  r.err = err.str();
  return r;
}

int run_binary(const std::string& args) {
  const std::string cmd =
      std::string(WAVEDEPTH_TOOL) + " " + args + " >/dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

RunConfig tiny_config() {
  RunConfig c;
  c.scene.side = 16;
  c.data = {4, 2, 40};
  c.encoder.blocks = 2;
  c.encoder.frozen = 1;
  c.encoder.dim = 8;
  c.encoder.heads = 2;
  c.encoder.side = 16;
  c.train.steps = 6;
  c.train.batch = 2;
  c.train.warmup = 2;
  return c;
}

std::vector<std::string> lines(const std::string& text) {
  std::vector<std::string> out;
  std::istringstream in(text);
  for (std::string l; std::getline(in, l);) out.push_back(l);
  return out;
}

}  // namespace

TEST_CASE("usage errors exit 2 with a precise message") {
  Run r = run({"trian"});
  CHECK(r.code == cli::kExitUsage);
  CHECK(r.err.find("unknown subcommand 'trian'") != std::string::npos);
  CHECK(r.err.find("did you mean 'train'?") != std::string::npos);

  r = run({"train", "--bogus", "1"});
  CHECK(r.code == cli::kExitUsage);
  CHECK(r.err.find("--bogus") != std::string::npos);

  r = run({"eval", "--data", "x"});
  CHECK(r.code == cli::kExitUsage);
  CHECK(r.err.find("--ckpt") != std::string::npos);

  r = run({});
  CHECK(r.code == cli::kExitUsage);

  r = run({"--help"});
  CHECK(r.code == cli::kExitOk);
  for (const std::string& s : cli::subcommands()) {
    CHECK(r.out.find(s) != std::string::npos);
  }
  CHECK(cli::suggest_subcommand("selftset") == "selftest");
  CHECK(cli::suggest_subcommand("zzzzzzzzzzzz").empty());
}

TEST_CASE("bad configuration is a usage error naming the key") {
  wdtest::TempDir dir("cfgerr");
  nlohmann::json j = to_json(tiny_config());
  j["train"]["learning_rate"] = 0.1;
  io::write_json(dir / "bad.json", j);
  const Run r = run({"gen-data", "--config", (dir / "bad.json").string(), "--out",
                     (dir / "data").string()});
  CHECK(r.code == cli::kExitUsage);
  CHECK(r.err.find("learning_rate") != std::string::npos);
  CHECK_FALSE(std::filesystem::exists(dir / "data"));
}

TEST_CASE("missing inputs are runtime errors") {
  wdtest::TempDir dir("missing");
  const Run r = run({"train", "--data", (dir / "nowhere").string(), "--out",
                     (dir / "run").string()});
  CHECK(r.code == cli::kExitDomain);
  CHECK(r.err.starts_with("error: "));
}

TEST_CASE("gen-data, train, eval, sweep and reconstruct end to end") {
  wdtest::TempDir dir("e2e");
  const std::string cfg = (dir / "cfg.json").string();
  io::write_json(cfg, to_json(tiny_config()));
  const std::string data = (dir / "data").string();

  REQUIRE(run({"gen-data", "--config", cfg, "--out", data}).code == 0);
  CHECK(std::filesystem::exists(dir / "data" / "manifest.json"));
  CHECK(std::filesystem::exists(dir / "data" / "train" / "0003_rgb.ppm"));
  CHECK(std::filesystem::exists(dir / "data" / "val" / "0001_depth.pfm"));
  const Run again = run({"gen-data", "--config", cfg, "--out", data});
  CHECK(again.code == cli::kExitDomain);
  CHECK(again.err.find("refusing to overwrite") != std::string::npos);

  const std::string run_dir = (dir / "run").string();
  const Run t = run({"train", "--config", cfg, "--data", data, "--out", run_dir,
                     "--log-every", "2"});
  REQUIRE(t.code == 0);
  CHECK(t.err.find("step 2/6") != std::string::npos);
  const std::vector<std::string> hist = lines(io::read_file(dir / "run" / "history.csv"));
  REQUIRE(hist.size() == 7);
  CHECK(hist[0] ==
        "step,lr,l_scale,l_grad,l_smooth,total,gate_ll,gate_lh,gate_hl,gate_hh");
  CHECK(hist[1].starts_with("1,"));
  CHECK(std::filesystem::exists(dir / "run" / "config.json"));
  const std::string ckpt = (dir / "run" / "checkpoint.spdk").string();

  const std::string eval_csv = (dir / "eval.csv").string();
  REQUIRE(run({"eval", "--ckpt", ckpt, "--data", data, "--out", eval_csv}).code == 0);
  const std::vector<std::string> ev = lines(io::read_file(eval_csv));
  REQUIRE(ev.size() == 4);
  CHECK(ev[0] == "id,abs_rel,sq_rel,rmse,rmse_log,log10,silog,delta1,delta2,delta3,n_valid");
  CHECK(ev[1].starts_with("0000,"));
  CHECK(ev[3].starts_with("mean,"));

  const std::string gt_csv = (dir / "gt.csv").string();
  REQUIRE(run({"eval", "--ckpt", ckpt, "--data", data, "--split", "train",
               "--out", gt_csv, "--gt-as-pred"})
              .code == 0);
  const std::vector<std::string> gt = lines(io::read_file(gt_csv));
  REQUIRE(gt.size() == 6);
  CHECK(gt[5].starts_with("mean,0,0,0,0,0,0,1,1,1,"));

  const std::string sweep_csv = (dir / "sweep.csv").string();
  REQUIRE(run({"sweep", "--config", cfg, "--data", data, "--out", sweep_csv,
               "--grid", "lgrad=0,0.1,0.2", "lsmooth=0,0.1,0.2"})
              .code == 0);
  const std::vector<std::string> sw = lines(io::read_file(sweep_csv));
  REQUIRE(sw.size() == 10);
  CHECK(sw[0] == "lambda_grad,lambda_smooth,abs_rel,sq_rel,rmse,delta1");
  CHECK(sw[1].starts_with("0,0,"));
  CHECK(sw[6].starts_with("0.10000000000000001,0.20000000000000001,"));
  CHECK(run({"sweep", "--config", cfg, "--data", data, "--out", sweep_csv,
             "--grid", "lgrad=0,x", "lsmooth=0"})
            .code == cli::kExitUsage);

  const std::string k_json = (dir / "k.json").string();
  io::write_json(k_json, intrinsics_to_json(scene_intrinsics(tiny_config().scene)));
  const std::string ply = (dir / "cloud.ply").string();
  const Run rec = run({"reconstruct", "--depth", data + "/val/0000_depth.pfm",
                       "--rgb", data + "/val/0000_rgb.ppm", "--intrinsics",
                       k_json, "--dmin", "0.2", "--dmax", "7.9", "--out", ply});
  REQUIRE(rec.code == 0);
  const PointCloud pc = parse_ply(io::read_file(ply));
  CHECK(pc.points.size() > 0);
  CHECK(pc.points.size() < 256);
  CHECK(pc.colors.size() == pc.points.size());
  CHECK(run({"reconstruct", "--depth", data + "/val/0000_depth.pfm",
             "--intrinsics", k_json, "--dmin", "5", "--dmax", "1", "--out", ply})
            .code == cli::kExitUsage);
}

TEST_CASE("outputs are bitwise reproducible") {
  wdtest::TempDir dir("repro");
  const std::string cfg = (dir / "cfg.json").string();
  io::write_json(cfg, to_json(tiny_config()));
  for (const char* tag : {"a", "b"}) {
    const std::string d = (dir / (std::string("data_") + tag)).string();
    REQUIRE(run({"gen-data", "--config", cfg, "--out", d}).code == 0);
    REQUIRE(run({"train", "--config", cfg, "--data", d, "--out",
                 (dir / (std::string("run_") + tag)).string()})
                .code == 0);
  }
  for (const char* f : {"manifest.json", "train/0000_rgb.ppm", "val/0001_depth.pfm"}) {
    CHECK(io::read_file(dir / "data_a" / f) == io::read_file(dir / "data_b" / f));
  }
  for (const char* f : {"history.csv", "checkpoint.spdk", "config.json"}) {
    CHECK(io::read_file(dir / "run_a" / f) == io::read_file(dir / "run_b" / f));
  }
}

TEST_CASE("spectrum over a directory tree") {
  wdtest::TempDir dir("spectrum");
  std::filesystem::create_directories(dir / "imgs" / "sub");
  auto gray8 = [](Tensor t) {
    double lo = 1e300, hi = -1e300;
    for (double v : t.values()) {
      lo = std::min(lo, v);
      hi = std::max(hi, v);
    }
    for (double& v : t.values()) v = io::quantize_u8((v - lo) / (hi - lo));
    return t;
  };
  io::write_ppm(dir / "imgs" / "b.pgm", gray8(power_law_field(128, 2.0, 1)));
  io::write_ppm(dir / "imgs" / "sub" / "a.pgm", gray8(power_law_field(128, 1.0, 2)));
  io::write_ppm(dir / "imgs" / "tiny.pgm", gray8(power_law_field(16, 1.0, 3)));
  io::write_file_atomic(dir / "imgs" / "notes.txt", "ignored");
  const std::string csv = (dir / "s.csv").string();
  const Run r = run({"spectrum", "--input", (dir / "imgs").string(), "--out", csv});
  CHECK(r.code == 0);
  CHECK(r.err.find("tiny.pgm") != std::string::npos);
  const std::vector<std::string> rows = lines(io::read_file(csv));
  REQUIRE(rows.size() == 4);
  CHECK(rows[0] == "id,alpha,r2");
  CHECK(rows[1].starts_with("b.pgm,"));
  CHECK(rows[2].starts_with("sub/a.pgm,"));
  CHECK(rows[3] == "tiny.pgm,,");
  const std::string again = (dir / "s2.csv").string();
  REQUIRE(run({"spectrum", "--input", (dir / "imgs").string(), "--out", again}).code == 0);
  CHECK(io::read_file(csv) == io::read_file(again));
  CHECK(run({"spectrum", "--input", (dir / "imgs").string(), "--band", "0.5:0.2",
             "--out", csv})
            .code == cli::kExitUsage);
}

TEST_CASE("the installed binary maps errors to exit codes") {
  CHECK(run_binary("--help") == 0);
  CHECK(run_binary("frobnicate") == 2);
  CHECK(run_binary("train --bogus") == 2);
  CHECK(run_binary("eval --ckpt /nonexistent.spdk --data /nonexistent --out /tmp/x.csv") == 1);
  CHECK(run_binary("gradcheck --instances 1") == 0);
}
