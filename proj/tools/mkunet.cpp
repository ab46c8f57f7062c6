// mkunet: summaries, training, prediction, evaluation, gradient checks and
// synthetic data from one binary.
//
// Exit codes: 0 ok, 1 usage error, 2 runtime error, 3 check failure.

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "mkunet/complexity.hpp"
#include "mkunet/gradcheck.hpp"
#include "mkunet/io.hpp"
#include "mkunet/train.hpp"

namespace fs = std::filesystem;
using namespace mkunet;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitUsage = 1;
constexpr int kExitRuntime = 2;
constexpr int kExitCheck = 3;

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Architecture flags shared by summary and train.
struct ArchFlags {
  std::string variant;
  std::vector<Index> channels;
  std::vector<int> kernels;
  std::string gate = "gag";
  std::string encoder = "mkir";

  void add_to(CLI::App* cmd, bool variant_default) {
    auto* v = cmd->add_option("--variant", variant, "size preset: t, s, std, m, l");
    auto* c = cmd->add_option("--channels", channels, "five encoder widths, e.g. 16,32,64,96,160")
                  ->delimiter(',')
                  ->expected(5);
    v->excludes(c);
    c->excludes(v);
    if (variant_default) v->default_str("std");
    cmd->add_option("--kernels", kernels, "depthwise kernel sizes, e.g. 1,3,5")->delimiter(',');
    cmd->add_option("--gate", gate, "skip gating: gag, ag, none")->capture_default_str();
    cmd->add_option("--encoder", encoder, "encoder block: mkir, mkira")->capture_default_str();
  }

  VariantConfig build(bool require_choice) const {
    if (require_choice && variant.empty() && channels.empty()) {
      throw UsageError("exactly one of --variant or --channels is required");
    }
    try {
      VariantConfig cfg = preset(variant.empty() ? "std" : variant);
      if (!channels.empty()) cfg.channels = channel_ladder(channels);
      if (!kernels.empty()) cfg.kernels = KernelSet(kernels);
      cfg.gate = parse_gate(gate);
      cfg.encoder_block = parse_encoder(encoder);
      cfg.validate();
      return cfg;
    } catch (const std::invalid_argument& e) {
      throw UsageError(e.what());
    }
  }
};

void apply_threads(const std::optional<int>& flag) {
  int n = 1;
  if (flag) {
    n = *flag;
  } else if (const char* env = std::getenv("MKUNET_THREADS")) {
    try {
      n = std::stoi(env);
    } catch (const std::exception&) {
      throw UsageError(std::string("MKUNET_THREADS is not an integer: ") + env);
    }
  }
  if (n < 1) throw UsageError("thread count must be >= 1");
  set_num_threads(n);
}

void check_output_dims(const Shape4& s) {
  try {
    check_input_dims(s.h, s.w);
  } catch (const ShapeError& e) {
    throw std::runtime_error(e.what());
  }
}

// ---- summary ----------------------------------------------------------------

struct SummaryCmd {
  ArchFlags arch;
  std::optional<Index> input_size;
  std::string format = "text";

  int run() const {
    const VariantConfig cfg = arch.build(true);
    if (format != "text" && format != "json") throw UsageError("--format must be text or json");
    ComplexityReport r;
    if (input_size) {
      try {
        r = count_macs(cfg, *input_size, *input_size);
      } catch (const ShapeError& e) {
        throw UsageError(e.what());
      }
    } else {
      r = count_params(cfg);
    }
    std::cout << render(r, format == "json" ? ReportFormat::json : ReportFormat::text);
    return kExitOk;
  }
};

// ---- train ------------------------------------------------------------------

struct TrainCmd {
  ArchFlags arch;
  std::string data;
  std::optional<int> synth;
  TrainConfig tc;
  std::string scales = "0.75,1.0,1.25";
  std::string out = "model.mkun";
  std::string history;
  std::string save_init;
  std::optional<std::int64_t> max_steps;
  std::optional<int> threads;
  bool quiet = false;

  int run() {
    const VariantConfig cfg = arch.build(false);
    if (data.empty() == !synth.has_value()) throw UsageError("exactly one of --data or --synth is required");
    tc.scales.clear();
    std::stringstream ss(scales);
    for (std::string tok; std::getline(ss, tok, ',');) {
      try {
        tc.scales.push_back(std::stod(tok));
      } catch (const std::exception&) {
        throw UsageError("--scales expects a comma list of decimals, got '" + scales + "'");
      }
    }
    try {
      tc.validate();
    } catch (const std::invalid_argument& e) {
      throw UsageError(e.what());
    }
    apply_threads(threads);

    std::vector<Sample> samples;
    if (synth) {
      if (*synth < 1) throw UsageError("--synth must be >= 1");
      samples = synth_dataset(*synth, tc.img_size, tc.seed);
    } else {
      samples = load_dataset(dataset_scan(data));
    }
    if (samples.empty()) throw std::runtime_error("dataset is empty");

    Network<float> net(cfg, tc.seed);
    if (!save_init.empty()) save_checkpoint(net, save_init);

    TrainHooks hooks;
    hooks.max_steps = max_steps;
    hooks.on_epoch = [this](const EpochRecord& r) {
      if (!quiet) std::printf("epoch %d train_loss %.6f val_dice %.4f\n", r.epoch, r.train_loss, r.val_dice);
      std::fflush(stdout);
    };
    TrainResult result = train_loop(net, tc, samples, hooks);
    net.load_state(result.best_state);
    save_checkpoint(net, out);
    if (!history.empty()) {
      std::ofstream h(history);
      if (!h) throw IoError("cannot write " + history);
      h << history_csv(result.history);
    }
    std::printf("best_val_dice %.4f epoch %d checkpoint %s\n", result.best_val_dice,
                result.best_epoch, out.c_str());
    return kExitOk;
  }
};

// ---- predict ----------------------------------------------------------------

struct PredictCmd {
  std::string ckpt;
  std::string image;
  std::string out;
  double threshold = 0.5;
  bool prob = false;
  std::optional<int> threads;

  int run() const {
    apply_threads(threads);
    LoadedCheckpoint lc = load_checkpoint(ckpt);
    const Tensor4<float> img = read_image(image);
    check_output_dims(img.shape());
    if (lc.config.in_channels != img.shape().c) {
      throw std::runtime_error("checkpoint expects " + std::to_string(lc.config.in_channels) +
                               " input channels");
    }
    NoGradGuard no_grad;
    const SegOutputs<float> o = lc.network.forward(img, Mode::eval);
    Tensor4<float> p = o.p1.value();
    for (Index i = 0; i < p.size(); ++i) p[i] = 1.0f / (1.0f + std::exp(-p[i]));
    write_mask(p, out, !prob, threshold);
    return kExitOk;
  }
};

// ---- eval -------------------------------------------------------------------

struct EvalCmd {
  std::string ckpt;
  std::string data;
  double threshold = 0.5;
  std::optional<int> threads;

  int run() const {
    apply_threads(threads);
    LoadedCheckpoint lc = load_checkpoint(ckpt);
    const auto paths = dataset_scan(data);
    if (paths.empty()) throw std::runtime_error("no samples found in " + data);
    const auto samples = load_dataset(paths);
    for (const auto& s : samples) check_output_dims(s.image.shape());
    const EvalResult r = evaluate(lc.network, samples, threshold);
    std::printf("%-24s %8s %8s\n", "sample", "dice", "iou");
    for (std::size_t i = 0; i < paths.size(); ++i) {
      std::printf("%-24s %8.4f %8.4f\n", paths[i].stem.c_str(), r.per_sample_dice[i],
                  r.per_sample_iou[i]);
    }
    std::printf("mean_dice %.6f\nmean_iou %.6f\n", r.mean_dice, r.mean_iou);
    return kExitOk;
  }
};

// ---- gradcheck --------------------------------------------------------------

struct GradcheckCmd {
  std::string block = "all";
  double eps = 1e-4;
  double tol = 1e-3;
  std::uint64_t seed = 0;

  int run() const {
    std::vector<std::string> blocks;
    if (block == "all") {
      blocks = gradcheck_block_names();
    } else {
      const auto& known = gradcheck_block_names();
      if (std::find(known.begin(), known.end(), block) == known.end()) {
        throw UsageError("unknown block '" + block + "'");
      }
      blocks = {block};
    }
    if (!(eps > 0)) throw UsageError("--eps must be positive");
    bool all_pass = true;
    for (const auto& b : blocks) {
      const GradcheckReport r = gradcheck_block(b, eps, tol, seed);
      std::printf("%-6s %s max_rel_err %.3e checked %lld skipped %lld worst %s\n", b.c_str(),
                  r.pass ? "PASS" : "FAIL", r.max_rel_err, static_cast<long long>(r.checked),
                  static_cast<long long>(r.skipped), r.worst.c_str());
      all_pass = all_pass && r.pass;
    }
    return all_pass ? kExitOk : kExitCheck;
  }
};

// ---- synth ------------------------------------------------------------------

struct SynthCmd {
  std::string out;
  int count = 200;
  Index size = 64;
  std::uint64_t seed = 0;

  int run() const {
    std::vector<Sample> samples;
    try {
      samples = synth_dataset(count, size, seed);
    } catch (const std::invalid_argument& e) {
      throw UsageError(e.what());
    }
    write_dataset(samples, out);
    std::printf("wrote %d samples to %s\n", count, out.c_str());
    return kExitOk;
  }
};

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Multi-kernel U-shaped segmentation network toolkit"};
  app.require_subcommand(1);

  SummaryCmd summary;
  auto* s = app.add_subcommand("summary", "print parameter and MAC counts");
  summary.arch.add_to(s, false);
  s->add_option("--input-size", summary.input_size, "square input side for MAC counting");
  s->add_option("--format", summary.format, "text or json")->capture_default_str();

  TrainCmd train;
  auto* t = app.add_subcommand("train", "train on a dataset directory or synthetic data");
  train.arch.add_to(t, true);
  auto* data_opt = t->add_option("--data", train.data, "directory with images/ and masks/");
  auto* synth_opt = t->add_option("--synth", train.synth, "generate N synthetic samples instead");
  data_opt->excludes(synth_opt);
  t->add_option("--img-size", train.tc.img_size, "base training side (multiple of 32)")->capture_default_str();
  t->add_option("--epochs", train.tc.epochs, "number of epochs")->capture_default_str();
  t->add_option("--batch", train.tc.batch, "batch size")->capture_default_str();
  t->add_option("--lr", train.tc.lr, "AdamW learning rate")->capture_default_str();
  t->add_option("--wd", train.tc.weight_decay, "AdamW weight decay")->capture_default_str();
  t->add_option("--clip", train.tc.clip_norm, "global gradient-norm clip")->capture_default_str();
  t->add_option("--scales", train.scales, "comma list of multi-scale factors")->capture_default_str();
  t->add_option("--seed", train.tc.seed, "seed for init, data order and synthesis")->capture_default_str();
  t->add_option("--val-fraction", train.tc.val_fraction, "held-out fraction")->capture_default_str();
  t->add_option("--out", train.out, "best-validation checkpoint path")->capture_default_str();
  t->add_option("--history", train.history, "CSV history path (epoch,train_loss,val_dice)");
  t->add_option("--save-init", train.save_init, "also write the untrained checkpoint here");
  t->add_option("--max-steps", train.max_steps, "stop after this many optimiser steps");
  t->add_option("--threads", train.threads, "worker threads (env MKUNET_THREADS; 1 is reproducible)");
  t->add_flag("--quiet", train.quiet, "suppress per-epoch lines");

  PredictCmd predict;
  auto* p = app.add_subcommand("predict", "segment one image");
  p->add_option("--ckpt", predict.ckpt, "checkpoint path")->required();
  p->add_option("--image", predict.image, "input P5/P6 image")->required();
  p->add_option("--out", predict.out, "output P5 mask")->required();
  p->add_option("--threshold", predict.threshold, "foreground probability threshold")->capture_default_str();
  p->add_flag("--prob", predict.prob, "write round(255 p) instead of a binary mask");
  p->add_option("--threads", predict.threads, "worker threads (env MKUNET_THREADS)");

  EvalCmd eval;
  auto* e = app.add_subcommand("eval", "mean DICE/IoU of a checkpoint on a dataset directory");
  e->add_option("--ckpt", eval.ckpt, "checkpoint path")->required();
  e->add_option("--data", eval.data, "directory with images/ and masks/")->required();
  e->add_option("--threshold", eval.threshold, "foreground probability threshold")->capture_default_str();
  e->add_option("--threads", eval.threads, "worker threads (env MKUNET_THREADS)");

  GradcheckCmd grad;
  auto* g = app.add_subcommand("gradcheck", "finite-difference check in double precision");
  g->add_option("--block", grad.block, "mkdc, mkir, ca, sa, mkira, gag, net or all")->capture_default_str();
  g->add_option("--eps", grad.eps, "central-difference step")->capture_default_str();
  g->add_option("--tol", grad.tol, "maximum relative error")->capture_default_str();
  g->add_option("--seed", grad.seed, "seed for parameters and inputs")->capture_default_str();

  SynthCmd syn;
  auto* y = app.add_subcommand("synth", "write a synthetic ellipse dataset");
  y->add_option("--out", syn.out, "output directory")->required();
  y->add_option("--count", syn.count, "number of samples")->capture_default_str();
  y->add_option("--size", syn.size, "image side (multiple of 32)")->capture_default_str();
  y->add_option("--seed", syn.seed, "generator seed")->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& err) {
    const int code = app.exit(err);
    return code == 0 ? kExitOk : kExitUsage;
  }

  try {
    if (*s) return summary.run();
    if (*t) return train.run();
    if (*p) return predict.run();
    if (*e) return eval.run();
    if (*g) return grad.run();
    if (*y) return syn.run();
  } catch (const UsageError& err) {
    std::cerr << "usage error: " << err.what() << "\n";
    return kExitUsage;
  } catch (const std::exception& err) {
    std::cerr << "error: " << err.what() << "\n";
    return kExitRuntime;
  }
  return kExitUsage;
}
