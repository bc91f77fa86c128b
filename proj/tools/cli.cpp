#include "cli.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <optional>

#include "CLI11.hpp"
#include "wavedepth/config.hpp"
#include "wavedepth/error.hpp"
#include "wavedepth/format.hpp"
#include "wavedepth/io.hpp"
#include "wavedepth/model.hpp"
#include "wavedepth/reconstruct.hpp"
#include "wavedepth/spectral.hpp"
#include "wavedepth/synthdata.hpp"
#include "wavedepth/verify.hpp"

namespace fs = std::filesystem;

namespace wavedepth::cli {

namespace {

std::size_t edit_distance(const std::string& a, const std::string& b) {
  std::vector<std::size_t> row(b.size() + 1);
  for (std::size_t j = 0; j <= b.size(); ++j) row[j] = j;
  for (std::size_t i = 1; i <= a.size(); ++i) {
    std::size_t diag = row[0];
    row[0] = i;
    for (std::size_t j = 1; j <= b.size(); ++j) {
      const std::size_t up = row[j];
      row[j] = std::min({row[j] + 1, row[j - 1] + 1,
                         diag + (a[i - 1] == b[j - 1] ? 0 : 1)});
      diag = up;
    }
  }
  return row[b.size()];
}

RunConfig config_or_default(const std::string& path) {
  RunConfig c = path.empty() ? RunConfig{} : load_run_config(path);
  validate(c);
  return c;
}

double parse_number(const std::string& text, const std::string& what) {
  char* end = nullptr;
  const double v = std::strtod(text.c_str(), &end);
  if (text.empty() || end != text.c_str() + text.size() || !std::isfinite(v)) {
    throw ContractError(what + ": '" + text + "' is not a finite number");
  }
  return v;
}

FitBand parse_band_fraction(const std::string& text) {
  const auto colon = text.find(':');
  if (colon == std::string::npos) {
    throw ContractError("--band: expected lo:hi, got '" + text + "'");
  }
  FitBand band{parse_number(text.substr(0, colon), "--band"),
               parse_number(text.substr(colon + 1), "--band")};
  if (!(band.lo >= 0.0 && band.lo < band.hi && band.hi <= 1.0)) {
    throw ContractError("--band: need 0 <= lo < hi <= 1, got '" + text + "'");
  }
  return band;
}

// ---------------------------------------------------------------------------

struct GenDataArgs {
  std::string config;
  std::string out;
};

int gen_data(const GenDataArgs& a, std::ostream& out) {
  const RunConfig c = config_or_default(a.config);
  const Dataset d =
      make_dataset(c.scene, c.data.n_train, c.data.n_val, c.data.base_seed);
  write_dataset(d, a.out);
  out << "wrote " << d.train.size() << " train and " << d.val.size()
      << " val samples to " << a.out << "\n";
  return kExitOk;
}

struct SpectrumArgs {
  std::string input;
  std::string band = "0.05:0.45";
  std::string out;
};

int spectrum(const SpectrumArgs& a, std::ostream& out, std::ostream& err) {
  const FitBand band = parse_band_fraction(a.band);
  if (!fs::is_directory(a.input)) {
    throw IoError("spectrum: '" + a.input + "' is not a directory");
  }
  std::vector<fs::path> files;
  for (const auto& entry : fs::recursive_directory_iterator(a.input)) {
    const std::string ext = entry.path().extension().string();
    if (entry.is_regular_file() && (ext == ".ppm" || ext == ".pgm")) {
      files.push_back(fs::relative(entry.path(), a.input));
    }
  }
  std::sort(files.begin(), files.end());
  if (files.empty()) {
    throw DomainError("spectrum: no .ppm or .pgm images under " + a.input);
  }
  std::vector<CorpusImage> images;
  std::vector<std::vector<std::string>> rows;
  for (const fs::path& rel : files) {
    images.push_back({rel.generic_string(), io::read_ppm(fs::path(a.input) / rel)});
  }
  std::size_t fitted = 0;
  for (const CorpusRow& r : corpus_report(images, band)) {
    if (r.ok) {
      ++fitted;
      rows.push_back({r.id, format_double(r.fit.alpha), format_double(r.fit.r2)});
    } else {
      rows.push_back({r.id, "", ""});
      err << "warning: " << r.id << ": " << r.error << "\n";
    }
  }
  io::write_csv(a.out, {"id", "alpha", "r2"}, rows);
  out << "fitted " << fitted << " of " << images.size() << " images\n";
  return fitted > 0 ? kExitOk : kExitDomain;
}

void write_run(const fs::path& dir, const RunConfig& c, const TrainResult& r) {
  fs::create_directories(dir);
  io::write_json(dir / "config.json", to_json(c));
  std::vector<std::vector<std::string>> rows;
  for (const HistoryRow& h : r.history) rows.push_back(history_row(h));
  io::write_csv(dir / "history.csv", history_header(), rows);
  save_checkpoint(dir / "checkpoint.spdk", {to_json(c), r.model, r.optimizer});
}

struct TrainArgs {
  std::string config;
  std::string data;
  std::string out;
  std::size_t log_every = 50;
};

int train_command(const TrainArgs& a, std::ostream& out, std::ostream& err) {
  const RunConfig c = config_or_default(a.config);
  const Dataset data = load_dataset(a.data);
  const std::size_t total = c.train.total_steps(data.train.size());
  auto progress = [&](const HistoryRow& h) {
    if (a.log_every > 0 && (h.step % a.log_every == 0 || h.step == total)) {
      err << format("step %zu/%zu  total %.5f  scale %.5f  grad %.5f  smooth "
                    "%.5f\n",
                    h.step, total, h.losses.total, h.losses.scale,
                    h.losses.grad, h.losses.smooth);
    }
  };
  const TrainResult r = train(data, c.encoder, c.adapter, c.train, progress);
  write_run(a.out, c, r);
  if (r.aborted) {
    err << "error: training aborted at " << r.message
        << "; last good checkpoint written to " << a.out << "\n";
    return kExitDomain;
  }
  out << "trained " << r.history.size() << " steps; outputs in " << a.out
      << "\n";
  return kExitOk;
}

struct EvalArgs {
  std::string ckpt;
  std::string data;
  std::string split = "val";
  std::string out;
  bool gt_as_pred = false;
};

int eval_command(const EvalArgs& a, std::ostream& out) {
  Checkpoint ck = load_checkpoint(a.ckpt);
  const Dataset data = load_dataset(a.data);
  if (data.scene.side != ck.model.encoder.side) {
    throw ContractError("eval: checkpoint side " +
                        std::to_string(ck.model.encoder.side) +
                        " does not match dataset side " +
                        std::to_string(data.scene.side));
  }
  const EvalResult r = evaluate(ck.model, data, a.split, a.gt_as_pred);
  std::vector<std::string> header{"id"};
  for (const std::string& h : metrics_header()) header.push_back(h);
  std::vector<std::vector<std::string>> rows;
  auto add = [&](const std::string& id, const MetricsReport& m) {
    std::vector<std::string> row{id};
    for (std::string& v : metrics_row(m)) row.push_back(std::move(v));
    rows.push_back(std::move(row));
  };
  for (std::size_t i = 0; i < r.frames.size(); ++i) add(r.ids[i], r.frames[i]);
  add("mean", r.aggregate);
  io::write_csv(a.out, header, rows);
  const MetricsReport& m = r.aggregate;
  out << format("%s: %zu frames  abs_rel %.4f  sq_rel %.4f  rmse %.4f  "
                "delta1 %.4f\n",
                a.split.c_str(), r.frames.size(), m.abs_rel, m.sq_rel, m.rmse,
                m.delta1);
  return kExitOk;
}

struct SweepArgs {
  std::string config;
  std::string data;
  std::string out;
  std::vector<std::string> grid{"lgrad=0,0.1,0.2", "lsmooth=0,0.1,0.2"};
};

std::vector<double> parse_axis(const std::string& token,
                               const std::string& name) {
  const std::string prefix = name + "=";
  if (!token.starts_with(prefix)) {
    throw ContractError("--grid: expected " + prefix + "v1,v2,..., got '" +
                        token + "'");
  }
  std::vector<double> values;
  std::string rest = token.substr(prefix.size());
  std::size_t start = 0;
  while (true) {
    const std::size_t comma = rest.find(',', start);
    const double v = parse_number(rest.substr(start, comma - start), "--grid");
    if (v < 0.0) throw ContractError("--grid: weights must be >= 0");
    values.push_back(v);
    if (comma == std::string::npos) break;
    start = comma + 1;
  }
  return values;
}

int sweep(const SweepArgs& a, std::ostream& out, std::ostream& err) {
  if (a.grid.size() != 2) {
    throw ContractError("--grid: expected two axes, lgrad=... lsmooth=...");
  }
  const std::vector<double> lgrad = parse_axis(a.grid[0], "lgrad");
  const std::vector<double> lsmooth = parse_axis(a.grid[1], "lsmooth");
  RunConfig c = config_or_default(a.config);
  if (!c.train.mc) {
    throw ContractError("sweep: train.mc must be true to vary loss weights");
  }
  const Dataset data = load_dataset(a.data);
  std::vector<std::vector<std::string>> rows;
  for (double g : lgrad) {
    for (double s : lsmooth) {
      c.train.loss.grad = g;
      c.train.loss.smooth = s;
      TrainResult r = train(data, c.encoder, c.adapter, c.train);
      if (r.aborted) {
        throw DomainError(format("sweep: run lgrad=%g lsmooth=%g aborted at %s",
                                 g, s, r.message.c_str()));
      }
      const MetricsReport m = evaluate(r.model, data, "val").aggregate;
      rows.push_back({format_double(g), format_double(s),
                      format_double(m.abs_rel), format_double(m.sq_rel),
                      format_double(m.rmse), format_double(m.delta1)});
      err << format("lgrad %g  lsmooth %g  abs_rel %.4f  delta1 %.4f\n", g, s,
                    m.abs_rel, m.delta1);
    }
  }
  io::write_csv(a.out,
                {"lambda_grad", "lambda_smooth", "abs_rel", "sq_rel", "rmse",
                 "delta1"},
                rows);
  out << "wrote " << rows.size() << " sweep rows to " << a.out << "\n";
  return kExitOk;
}

struct ReconstructArgs {
  std::string depth;
  std::string rgb;
  std::string intrinsics;
  double d_min = 0.0;
  double d_max = 0.0;
  std::string out;
};

int reconstruct(const ReconstructArgs& a, std::ostream& out) {
  if (!(a.d_min > 0.0 && a.d_min < a.d_max)) {
    throw ContractError("reconstruct: need 0 < --dmin < --dmax");
  }
  const Tensor depth = io::read_pfm(a.depth);
  const CameraIntrinsics k = intrinsics_from_json(io::read_json(a.intrinsics));
  std::optional<Tensor> rgb;
  if (!a.rgb.empty()) rgb = io::read_ppm(a.rgb);
  const ValidMask mask = valid_mask(depth, a.d_min, a.d_max);
  const PointCloud pc =
      backproject(depth, mask, k, {}, rgb ? &*rgb : nullptr);
  export_ply(pc, a.out);
  out << "wrote " << pc.points.size() << " points to " << a.out << "\n";
  return kExitOk;
}

struct GradcheckArgs {
  std::size_t instances = 20;
  double tol = 1e-4;
  std::uint64_t seed = 0;
};

int gradcheck(const GradcheckArgs& a, std::ostream& out) {
  if (a.instances == 0) throw ContractError("--instances must be >= 1");
  std::size_t failed = 0;
  auto report = [&](const SuiteEntry& e) {
    if (!e.ok()) ++failed;
    out << format("%s %-34s %zu/%zu  max rel %.2e%s%s\n",
                  e.ok() ? "PASS" : "FAIL", e.name.c_str(), e.passed,
                  e.instances, e.worst_rel_error, e.detail.empty() ? "" : "  ",
                  e.detail.c_str());
  };
  for (const SuiteEntry& e : gradient_suite(a.instances, a.tol, a.seed)) {
    report(e);
  }
  for (const SuiteEntry& e : model_gradient_checks(a.tol, a.seed)) {
    SuiteEntry named = e;
    named.name = "model:" + e.name;
    report(named);
  }
  out << (failed == 0 ? "all gradient checks passed\n"
                      : format("%zu gradient checks failed\n", failed));
  return failed == 0 ? kExitOk : kExitDomain;
}

int selftest(std::uint64_t seed, std::ostream& out) {
  std::size_t failed = 0;
  for (const SelfTestResult& r : self_test(seed)) {
    if (!r.passed) ++failed;
    out << (r.passed ? "PASS " : "FAIL ") << r.name << ": " << r.detail << "\n";
  }
  out << (failed == 0 ? "selftest passed\n"
                      : format("selftest: %zu checks failed\n", failed));
  return failed == 0 ? kExitOk : kExitDomain;
}

}  // namespace

const std::vector<std::string>& subcommands() {
  static const std::vector<std::string> names{
      "gen-data", "spectrum", "train",     "eval",
      "sweep",    "reconstruct", "gradcheck", "selftest"};
  return names;
}

std::string suggest_subcommand(const std::string& word) {
  std::string best;
  std::size_t best_d = 0;
  for (const std::string& name : subcommands()) {
    const std::size_t d = edit_distance(word, name);
    if (best.empty() || d < best_d) {
      best = name;
      best_d = d;
    }
  }
  return best_d <= std::max<std::size_t>(2, word.size() / 3) ? best : "";
}

int run(const std::vector<std::string>& args, std::ostream& out,
        std::ostream& err) {
  if (!args.empty() && !args[0].starts_with("-")) {
    const auto& known = subcommands();
    if (std::find(known.begin(), known.end(), args[0]) == known.end()) {
      const std::string s = suggest_subcommand(args[0]);
      err << "error: unknown subcommand '" << args[0] << "'";
      if (!s.empty()) err << "; did you mean '" << s << "'?";
      err << "\nrun with --help for the list of subcommands\n";
      return kExitUsage;
    }
  }

  CLI::App app{"Depth estimation toolkit: synthetic data, spectral analysis, "
               "training, evaluation and reconstruction."};
  app.name("wavedepth");
  app.require_subcommand(1);

  GenDataArgs gd;
  auto* gen = app.add_subcommand("gen-data", "Render a synthetic dataset.");
  gen->add_option("--config", gd.config, "Run configuration JSON (defaults if omitted)")
      ->check(CLI::ExistingFile);
  gen->add_option("--out", gd.out, "Output directory (must not hold a dataset)")
      ->required();

  SpectrumArgs sp;
  auto* spec = app.add_subcommand(
      "spectrum", "Fit power-law spectra of every PPM/PGM image in a directory.");
  spec->add_option("--input", sp.input, "Directory searched recursively")
      ->required();
  spec->add_option("--band", sp.band,
                   "Fit band as lo:hi fractions of the Nyquist frequency")
      ->capture_default_str();
  spec->add_option("--out", sp.out, "Output CSV (id, alpha, r2)")->required();

  TrainArgs tr;
  auto* trn = app.add_subcommand("train", "Train a model on a dataset.");
  trn->add_option("--config", tr.config, "Run configuration JSON (defaults if omitted)")
      ->check(CLI::ExistingFile);
  trn->add_option("--data", tr.data, "Dataset directory from gen-data")
      ->required();
  trn->add_option("--out", tr.out,
                  "Run directory for checkpoint.spdk, history.csv, config.json")
      ->required();
  trn->add_option("--log-every", tr.log_every,
                  "Progress line every N steps on stderr (0 = quiet)")
      ->capture_default_str();

  EvalArgs ev;
  auto* evl = app.add_subcommand("eval", "Evaluate a checkpoint on a split.");
  evl->add_option("--ckpt", ev.ckpt, "Checkpoint file")->required();
  evl->add_option("--data", ev.data, "Dataset directory")->required();
  evl->add_option("--split", ev.split, "Split to evaluate")
      ->check(CLI::IsMember({"train", "val"}))
      ->capture_default_str();
  evl->add_option("--out", ev.out, "Output CSV: one row per frame and a mean row")
      ->required();
  evl->add_flag("--gt-as-pred", ev.gt_as_pred,
                "Score the ground truth against itself (sanity check)");

  SweepArgs sw;
  auto* swp = app.add_subcommand(
      "sweep", "Train and evaluate over a grid of gradient/smoothness weights.");
  swp->add_option("--config", sw.config, "Run configuration JSON (defaults if omitted)")
      ->check(CLI::ExistingFile);
  swp->add_option("--data", sw.data, "Dataset directory")->required();
  swp->add_option("--out", sw.out, "Output CSV, one row per grid cell")
      ->required();
  swp->add_option("--grid", sw.grid,
                  "Two axes: lgrad=v1,v2,... lsmooth=v1,v2,...")
      ->expected(2)
      ->capture_default_str();

  ReconstructArgs rc;
  auto* rec = app.add_subcommand(
      "reconstruct", "Back-project a depth map to a PLY point cloud.");
  rec->add_option("--depth", rc.depth, "Depth map (PFM)")->required();
  rec->add_option("--rgb", rc.rgb, "Optional colour image (PPM)");
  rec->add_option("--intrinsics", rc.intrinsics,
                  "Intrinsics JSON (fx, fy, cx, cy, width, height)")
      ->required();
  rec->add_option("--dmin", rc.d_min, "Smallest valid depth")->required();
  rec->add_option("--dmax", rc.d_max, "Largest valid depth")->required();
  rec->add_option("--out", rc.out, "Output PLY")->required();

  GradcheckArgs gc;
  auto* grd = app.add_subcommand(
      "gradcheck", "Compare tape gradients with central differences.");
  grd->add_option("--instances", gc.instances, "Random instances per operator")
      ->capture_default_str();
  grd->add_option("--tol", gc.tol, "Relative tolerance")->capture_default_str();
  grd->add_option("--seed", gc.seed, "Seed for the random instances")
      ->capture_default_str();

  std::uint64_t st_seed = 0;
  auto* slf = app.add_subcommand("selftest", "Run the invariant suite.");
  slf->add_option("--seed", st_seed, "Seed for the random checks")
      ->capture_default_str();

  // Name unknown flags before CLI11 reports missing required options.
  if (!args.empty() && !args[0].starts_with("-")) {
    const CLI::App* sub = app.get_subcommand(args[0]);
    for (std::size_t i = 1; i < args.size(); ++i) {
      const std::string& a = args[i];
      if (a.size() < 2 || a[0] != '-' || std::isdigit(static_cast<unsigned char>(a[1])) ||
          a[1] == '.') {
        continue;
      }
      const std::string flag = a.substr(0, a.find('='));
      if (flag == "-h" || flag == "--help") break;
      if (sub->get_option_no_throw(flag) == nullptr) {
        err << "error: unknown option '" << flag << "' for '" << args[0]
            << "'\nrun '" << args[0] << " --help' for its options\n";
        return kExitUsage;
      }
    }
  }

  std::vector<std::string> argv_store{"wavedepth"};
  argv_store.insert(argv_store.end(), args.begin(), args.end());
  std::vector<char*> argv;
  for (std::string& s : argv_store) argv.push_back(s.data());

  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kExitOk : kExitUsage;
  }

  try {
    if (*gen) return gen_data(gd, out);
    if (*spec) return spectrum(sp, out, err);
    if (*trn) return train_command(tr, out, err);
    if (*evl) return eval_command(ev, out);
    if (*swp) return sweep(sw, out, err);
    if (*rec) return reconstruct(rc, out);
    if (*grd) return gradcheck(gc, out);
    if (*slf) return selftest(st_seed, out);
  } catch (const ContractError& e) {
    err << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitDomain;
  }
  return kExitUsage;
}

}  // namespace wavedepth::cli
