#include "cli.hpp"

#include <CLI11.hpp>

#include <algorithm>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include "nlvt/gradcheck.hpp"
#include "nlvt/kernels.hpp"
#include "nlvt/profiler.hpp"
#include "nlvt/train.hpp"

namespace nlvt {

namespace fs = std::filesystem;

namespace {

struct Common {
  std::string config;
  std::vector<std::string> sets;
  std::optional<std::uint64_t> seed;
  std::string out = ".";
};

void add_common(CLI::App* cmd, Common& c, bool with_out) {
  cmd->add_option("--config", c.config, "key = value configuration file");
  cmd->add_option("--set", c.sets, "override one key, key=value (repeatable)");
  cmd->add_option("--seed", c.seed, "random seed");
  if (with_out) cmd->add_option("--out", c.out, "output directory");
}

RunConfig resolve(const Common& c) {
  KeyValues kv;
  if (!c.config.empty()) {
    if (!fs::exists(c.config)) throw IoError("config file '" + c.config + "' not found");
    try {
      kv = KeyValues::load(c.config);
    } catch (const ParseError& e) {
      throw ConfigError(c.config + ": " + e.what());
    }
  }
  for (const auto& s : c.sets) kv.set(s);
  if (c.seed) kv.set("seed=" + std::to_string(*c.seed));
  RunConfig rc = run_config_from(kv);
  rc.model.validate();
  rc.train.validate();
  rc.augmix.validate();
  return rc;
}

void ensure_dir(const std::string& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create directory '" + dir + "'");
}

Dataset load_split(const std::string& manifest, const ModelConfig& m, Split split) {
  ManifestOptions opts;
  opts.num_classes = m.num_classes;
  opts.split = split;
  return load_dataset(load_manifest(manifest, opts), m.image_size);
}

template <typename T>
int do_train(const RunConfig& rc, const std::string& out_dir, std::ostream& out) {
  if (rc.data.train_manifest.empty()) throw ConfigError("train_manifest is not set");
  const Dataset train_set = load_split(rc.data.train_manifest, rc.model, Split::train);
  std::optional<Dataset> test_set;
  if (!rc.data.test_manifest.empty()) test_set = load_split(rc.data.test_manifest, rc.model, Split::test);

  ensure_dir(out_dir);
  const std::string log_path = (fs::path(out_dir) / "metrics.csv").string();
  const std::string ckpt_path = (fs::path(out_dir) / "best.ckpt").string();
  std::ofstream log(log_path, std::ios::trunc);
  if (!log) throw IoError("cannot write '" + log_path + "'");

  Model<T> model = build_model<T>(rc.model, rc.train.seed);
  TrainHooks hooks;
  hooks.on_epoch = [&](const EpochMetrics& m, bool improved) {
    const std::string line = format_metrics(m);
    log << line << '\n';
    log.flush();
    out << line << '\n';
    if (improved) save_checkpoint(model, ckpt_path);
  };
  const auto result = train(model, train_set, test_set ? &*test_set : nullptr, rc.train, rc.augmix, hooks);
  out << "best eval accuracy " << result.state.best_eval << ", checkpoint " << ckpt_path << '\n';
  return kExitOk;
}

template <typename T>
int do_eval(const std::string& ckpt, const std::string& manifest, std::size_t batch, std::ostream& out) {
  Model<T> model = load_model<T>(ckpt);
  const Dataset data = load_split(manifest, model.config(), Split::test);
  const double acc = evaluate(model, data, batch);
  out << "accuracy " << acc << " (" << data.size() << " samples)\n";
  return kExitOk;
}

Precision checkpoint_precision(const std::string& path) {
  return model_config_from_text(read_checkpoint_file(path).config_text).precision;
}

void apply_thread_cap() {
  const char* env = std::getenv("NLVT_THREADS");
  if (env == nullptr || *env == '\0') return;
  char* end = nullptr;
  const long n = std::strtol(env, &end, 10);
  if (*end != '\0' || n < 1) throw ConfigError(std::string("NLVT_THREADS must be a positive integer, got '") + env + "'");
  kernels::set_max_threads(static_cast<int>(n));
}

std::string one_line(std::string s) {
  std::replace(s.begin(), s.end(), '\n', ' ');
  return s;
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Hybrid convolution/transformer traffic-sign classifier"};
  app.require_subcommand(1);

  Common train_c, eval_c, prof_c, aug_c, synth_c, grad_c;

  auto* train_cmd = app.add_subcommand("train", "train a model, write metrics.csv and best.ckpt");
  add_common(train_cmd, train_c, true);

  std::string ckpt, manifest;
  std::size_t eval_batch = 0;
  auto* eval_cmd = app.add_subcommand("eval", "evaluate a checkpoint on a manifest");
  add_common(eval_cmd, eval_c, false);
  eval_cmd->add_option("--checkpoint", ckpt, "checkpoint file")->required();
  eval_cmd->add_option("--manifest", manifest, "manifest to evaluate (default: test_manifest)");
  eval_cmd->add_option("--batch", eval_batch, "evaluation batch size (default: eval_batch)");

  std::size_t side = 0;
  std::string csv_path;
  auto* prof_cmd = app.add_subcommand("profile", "per-layer parameter and MAC report");
  add_common(prof_cmd, prof_c, false);
  prof_cmd->add_option("--side", side, "input side (default: image_size)");
  prof_cmd->add_option("--csv", csv_path, "write layer,params,macs CSV here instead of stdout");

  std::string op = "all";
  int bits = 64;
  std::size_t seeds = 1;
  auto* grad_cmd = app.add_subcommand("gradcheck", "finite-difference gradient check");
  add_common(grad_cmd, grad_c, false);
  grad_cmd->add_option("--op", op, "suite name or 'all'");
  grad_cmd->add_option("--bits", bits, "precision, 32 or 64");
  grad_cmd->add_option("--seeds", seeds, "number of random seeds")->check(CLI::PositiveNumber);
  grad_cmd->add_flag_callback("--list", [&]() {
    for (const auto& n : gradcheck_suites()) out << n << '\n';
    throw CLI::Success();
  }, "list suites");

  std::string image;
  std::size_t count = 4, label = 0;
  auto* aug_cmd = app.add_subcommand("augmix-preview", "write AugMix variants of one image as PPM");
  add_common(aug_cmd, aug_c, true);
  aug_cmd->add_option("--image", image, "PPM input (default: a synthetic sign)");
  aug_cmd->add_option("--label", label, "synthetic sign class when no image is given");
  aug_cmd->add_option("--count", count, "number of variants");

  std::size_t synth_count = 1000, classes = 10, synth_side = 32;
  auto* synth_cmd = app.add_subcommand("synth", "write a synthetic traffic-sign dataset (PPM + manifest)");
  add_common(synth_cmd, synth_c, true);
  synth_cmd->add_option("--count", synth_count, "number of images");
  synth_cmd->add_option("--classes", classes, "number of classes (<= 48)");
  synth_cmd->add_option("--side", synth_side, "image side in pixels");

  try {
    std::vector<std::string> rev(args.rbegin(), args.rend());
    app.parse(rev);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::Success&) {
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    err << "nlvt: " << one_line(e.what()) << '\n';
    return kExitConfig;
  }

  try {
    apply_thread_cap();

    if (train_cmd->parsed()) {
      const RunConfig rc = resolve(train_c);
      return rc.model.precision == Precision::f64 ? do_train<double>(rc, train_c.out, out)
                                                  : do_train<float>(rc, train_c.out, out);
    }

    if (eval_cmd->parsed()) {
      const RunConfig rc = resolve(eval_c);
      const std::string m = manifest.empty() ? rc.data.test_manifest : manifest;
      if (m.empty()) throw ConfigError("no manifest given and test_manifest is not set");
      const std::size_t b = eval_batch ? eval_batch : rc.train.eval_batch;
      if (!fs::exists(ckpt)) throw IoError("checkpoint '" + ckpt + "' not found");
      return checkpoint_precision(ckpt) == Precision::f64 ? do_eval<double>(ckpt, m, b, out)
                                                          : do_eval<float>(ckpt, m, b, out);
    }

    if (prof_cmd->parsed()) {
      const RunConfig rc = resolve(prof_c);
      const CostReport report = side ? estimate_flops(rc.model, side) : profile_model(rc.model);
      out << "model " << rc.model.name << ", input " << (side ? side : rc.model.image_size) << "x"
          << (side ? side : rc.model.image_size) << "\n";
      out << report.table();
      if (csv_path.empty()) {
        out << '\n' << report.csv();
      } else {
        const std::string csv = report.csv();
        write_file_atomic(csv_path, std::span(reinterpret_cast<const std::uint8_t*>(csv.data()), csv.size()));
      }
      return kExitOk;
    }

    if (grad_cmd->parsed()) {
      const std::uint64_t base = grad_c.seed.value_or(0);
      if (bits != 32 && bits != 64) throw ConfigError("--bits must be 32 or 64");
      std::vector<std::string> ops;
      if (op == "all") {
        ops = gradcheck_suites();
      } else {
        ops.push_back(op);
      }
      const double tol = default_tolerance(bits);
      bool ok = true;
      for (const auto& name : ops) {
        double worst = 0.0;
        for (std::size_t s = 0; s < seeds; ++s) worst = std::max(worst, run_gradcheck(name, bits, base + s).max_rel_error);
        const bool pass = worst < tol;
        ok = ok && pass;
        out << name << " max_rel_error " << worst << (pass ? " PASS" : " FAIL") << '\n';
      }
      if (!ok) {
        err << "nlvt: gradient check above tolerance " << tol << '\n';
        return kExitFailure;
      }
      return kExitOk;
    }

    if (aug_cmd->parsed()) {
      const RunConfig rc = resolve(aug_c);
      const std::uint64_t seed = aug_c.seed.value_or(rc.augmix.seed);
      Image src;
      if (!image.empty()) {
        src = load_ppm(image);
      } else {
        if (label >= 48) throw ConfigError("--label must be below 48");
        Rng rng(seed);
        src = synth_sign(label, rc.model.image_size, rng);
      }
      ensure_dir(aug_c.out);
      write_ppm((fs::path(aug_c.out) / "original.ppm").string(), src);
      for (std::size_t i = 0; i < count; ++i) {
        Rng rng(mix_seed(seed, 0xA06, i));
        const std::string path = (fs::path(aug_c.out) / ("augmix_" + std::to_string(i) + ".ppm")).string();
        write_ppm(path, augmix(src, rc.augmix, rng));
        out << path << '\n';
      }
      return kExitOk;
    }

    if (synth_cmd->parsed()) {
      const std::string path = write_synth_dataset(synth_c.out, synth_count, classes, synth_side, synth_c.seed.value_or(0));
      out << path << '\n';
      return kExitOk;
    }
  } catch (const ConfigError& e) {
    err << "nlvt: config error: " << one_line(e.what()) << '\n';
    return kExitConfig;
  } catch (const IoError& e) {
    err << "nlvt: " << one_line(e.what()) << '\n';
    return kExitMissing;
  } catch (const FormatError& e) {
    err << "nlvt: " << one_line(e.what()) << '\n';
    return kExitBadData;
  } catch (const ParseError& e) {
    err << "nlvt: " << one_line(e.what()) << '\n';
    return kExitBadData;
  } catch (const CorruptionError& e) {
    err << "nlvt: " << one_line(e.what()) << '\n';
    return kExitBadData;
  } catch (const ShapeError& e) {
    err << "nlvt: " << one_line(e.what()) << '\n';
    return kExitBadData;
  } catch (const std::exception& e) {
    err << "nlvt: " << one_line(e.what()) << '\n';
    return kExitFailure;
  }
  return kExitFailure;
}

}  // namespace nlvt
