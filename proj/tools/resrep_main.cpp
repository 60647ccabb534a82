// Command-line front door: train a base model, run the channel-forgetting
// loop on it, convert the result to a plain narrow model, evaluate any
// checkpoint, and drive the pruning-strategy comparison runs.

#include <CLI11.hpp>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "resrep/checkpoint.hpp"
#include "resrep/models.hpp"
#include "resrep/reparam.hpp"
#include "resrep/reports.hpp"

namespace {

using namespace resrep;

/// Failure with a pinned process exit code.
struct CliError {
  int code;
  std::string message;
};

// ---------------------------------------------------------------------------
// datasets

struct DataFlags {
  std::string dataset = "synthetic";
  std::string dir;  // cifar10 root; $RESREP_DATA_DIR when empty
  Index samples = 512;
  double noise = 0.15;
  std::uint32_t seed = 1;
};

void add_data_flags(CLI::App* cmd, DataFlags& f) {
  cmd->add_option("--data", f.dataset, "dataset: synthetic or cifar10")
      ->check(CLI::IsMember({"synthetic", "cifar10"}));
  cmd->add_option("--data-dir", f.dir, "cifar10 directory (default: $RESREP_DATA_DIR)");
  cmd->add_option("--samples", f.samples, "synthetic: number of training examples");
  cmd->add_option("--noise", f.noise, "synthetic: per-sample noise level");
  cmd->add_option("--data-seed", f.seed, "synthetic: generator seed");
}

std::filesystem::path cifar_dir(const DataFlags& f) {
  if (!f.dir.empty()) return f.dir;
  if (const char* env = std::getenv("RESREP_DATA_DIR"); env && *env) return env;
  throw CliError{2, "no --data-dir given and RESREP_DATA_DIR is unset"};
}

void check_compatible(const ModelGraph<float>& model, const Dataset<float>& ds) {
  if (ds.images.c() != model.in_channels || ds.images.h() != model.in_h ||
      ds.images.w() != model.in_w || ds.num_classes != model.num_classes) {
    std::ostringstream os;
    os << "model expects " << model.in_channels << "x" << model.in_h << "x" << model.in_w
       << " inputs with " << model.num_classes << " classes but the dataset provides "
       << ds.images.c() << "x" << ds.images.h() << "x" << ds.images.w() << " with "
       << ds.num_classes << " classes";
    throw CliError{2, os.str()};
  }
}

Dataset<float> load_split(const DataFlags& f, const ModelGraph<float>& model,
                          const std::string& split) {
  Dataset<float> ds;
  if (f.dataset == "cifar10") {
    const auto dir = cifar_dir(f);
    try {
      ds = load_cifar10<float>(dir, split);
    } catch (const std::exception& e) {
      throw CliError{2, std::string("cannot load cifar10: ") + e.what()};
    }
  } else {
    SyntheticOptions opt;
    opt.channels = model.in_channels;
    opt.h = model.in_h;
    opt.w = model.in_w;
    opt.noise = f.noise;
    ds = make_synthetic<float>(model.num_classes, f.samples, f.seed, opt);
  }
  check_compatible(model, ds);
  return ds;
}

struct LoadedData {
  Dataset<float> train;
  std::optional<Dataset<float>> test;  // cifar10 only

  const Dataset<float>& eval_split() const { return test ? *test : train; }
};

LoadedData load_for_model(const DataFlags& f, const ModelGraph<float>& model) {
  LoadedData out;
  out.train = load_split(f, model, "train");
  if (f.dataset == "cifar10") out.test = load_split(f, model, "test");
  return out;
}

json dataset_echo(const DataFlags& f, const Dataset<float>& train) {
  json j{{"dataset", f.dataset}};
  if (f.dataset == "synthetic") {
    j["samples"] = f.samples;
    j["noise"] = f.noise;
    j["seed"] = f.seed;
  } else {
    j["normalization"] = {
        {"mean", std::vector<float>(train.channel_mean.begin(), train.channel_mean.end())},
        {"std", std::vector<float>(train.channel_std.begin(), train.channel_std.end())}};
  }
  return j;
}

// ---------------------------------------------------------------------------
// architectures

struct ArchFlags {
  std::string arch = "miniconv";
  std::vector<Index> widths{8, 16, 32};
  Index classes = 10;    // miniconv on synthetic data
  Index image_size = 16;  // miniconv on synthetic data
};

void add_arch_flags(CLI::App* cmd, ArchFlags& a) {
  cmd->add_option("--arch", a.arch, "miniconv, resnet56, or resnet110");
  cmd->add_option("--widths", a.widths, "miniconv: stage widths");
  cmd->add_option("--classes", a.classes, "miniconv on synthetic data: class count");
  cmd->add_option("--image-size", a.image_size, "miniconv on synthetic data: input side");
}

ModelGraph<float> build_arch(const ArchFlags& a, const DataFlags& d, std::uint32_t seed) {
  const bool cifar = d.dataset == "cifar10";
  if (a.arch == "miniconv") {
    MiniConvOptions opt;
    opt.in_h = opt.in_w = cifar ? 32 : a.image_size;
    opt.num_classes = cifar ? 10 : a.classes;
    opt.seed = seed;
    return build_miniconv<float>(a.widths, opt);
  }
  if (a.arch == "resnet56") return build_resnet56<float>(seed);
  if (a.arch == "resnet110") return build_resnet110<float>(seed);
  throw CliError{2, "unknown architecture '" + a.arch + "'"};
}

// ---------------------------------------------------------------------------
// shared reporting

json config_echo(const ResRepConfig& c) {
  return {{"lambda", c.lambda},
          {"epsilon", c.epsilon},
          {"theta_init", c.theta_init},
          {"theta_step", c.theta_step},
          {"selection_interval", c.selection_interval},
          {"warmup_epochs", c.warmup_epochs},
          {"flops_target", c.flops_target},
          {"compactor_momentum", c.compactor_momentum},
          {"total_epochs", c.total_epochs},
          {"batch_size", c.batch_size},
          {"initial_lr", c.initial_lr},
          {"seed", c.seed},
          {"augment", c.augment}};
}

std::string default_path(const std::string& flag, const std::string& out,
                         const std::string& suffix) {
  return flag.empty() ? out + suffix : flag;
}

std::string event_line(const SelectionEvent& e, std::uint64_t original) {
  std::size_t masked = 0;
  for (const auto& [node, mask] : e.masks) {
    for (auto b : mask) masked += b == 0;
  }
  std::ostringstream os;
  os << "iteration=" << e.iteration << " theta=" << e.theta << " masked_channels=" << masked
     << " deduced_flops=" << e.deduced_flops << " reduction="
     << CsvFile::num(100.0 * (1.0 - double(e.deduced_flops) / double(original)), 2)
     << "% target_reached=" << (e.target_reached ? 1 : 0);
  return os.str();
}

/// Multiply-adds of the model with every maskable channel kept.
std::uint64_t unmasked_flops(const ModelGraph<float>& m) {
  MaskSet all;
  auto compactors = m.compactor_nodes();
  const std::vector<int>& sources = compactors.empty() ? m.target_nodes() : compactors;
  for (int i : sources) {
    all[i] = std::vector<std::uint8_t>(std::size_t(m.nodes[i].conv.out_channels()), 1);
  }
  return deduced_flops(m, all);
}

/// Convert in memory and emit the width table; the converted model itself is
/// discarded. Returns the process exit code.
int emit_conversion_report(const ModelGraph<float>& model, double epsilon,
                           const std::string& csv_path) {
  WidthReport report;
  try {
    report = convert_model(model, float(epsilon)).report;
  } catch (const FullyPruned& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 3;
  }
  write_width_report_csv(csv_path, report);
  std::cout << format_width_report(report);
  return 0;
}

void emit_minimal_structure(const ModelGraph<float>& model, const Dataset<float>& ev,
                            Index granularity, const std::string& csv_path) {
  auto res = minimal_structure(model, ev.images, ev.labels, granularity);
  CsvFile csv(csv_path, {"layer", "original_width", "final_width"});
  const auto targets = model.target_nodes();
  std::cout << "minimal structure at accuracy floor " << CsvFile::num(res.baseline_accuracy, 4)
            << "\n";
  for (std::size_t i = 0; i < res.widths.size(); ++i) {
    const auto& [name, width] = res.widths[i];
    const Index original = model.nodes[std::size_t(targets[i])].conv.out_channels();
    csv.row({name, std::to_string(original), std::to_string(width)});
    std::cout << "  " << name << "  " << original << " -> " << width << "\n";
  }
  std::cout << "flops " << model_flops(res.model) << " of " << model_flops(model) << "\n";
}

// ---------------------------------------------------------------------------
// train-base

struct TrainBaseArgs {
  ArchFlags arch;
  DataFlags data;
  Index epochs = 10;
  Index batch_size = 64;
  double lr = 0.01;
  std::uint32_t seed = 0;
  bool augment = false;
  std::string out = "base.ckpt";
  std::string log;
};

int run_train_base(const TrainBaseArgs& a) {
  auto model = build_arch(a.arch, a.data, a.seed);
  auto data = load_for_model(a.data, model);
  auto& acc_data = data.test ? *data.test : data.train;

  TrainOptions opt;
  opt.epochs = a.epochs;
  opt.run_epochs = 1;
  opt.batch_size = a.batch_size;
  opt.initial_lr = a.lr;
  opt.seed = a.seed;
  opt.augment = a.augment;

  CsvFile log(default_path(a.log, a.out, ".log.csv"), {"epoch", "lr", "loss", "accuracy"});
  TrainState<float> state;
  for (Index epoch = 0; epoch < a.epochs; ++epoch) {
    const auto l = train_supervised(model, data.train, opt, &state);
    const double acc = evaluate(model, acc_data.images, acc_data.labels);
    log.row({std::to_string(epoch), CsvFile::num(double(cosine_lr(float(a.lr), epoch, a.epochs))),
             CsvFile::num(l.epoch_loss.back()), CsvFile::num(acc, 4)});
    std::cout << "epoch " << epoch << " loss " << CsvFile::num(l.epoch_loss.back())
              << " accuracy " << CsvFile::num(acc, 4) << "\n";
  }

  json extra{{"command", "train-base"},
             {"seed", a.seed},
             {"epochs", a.epochs},
             {"batch_size", a.batch_size},
             {"initial_lr", a.lr},
             {"augment", a.augment},
             {"data", dataset_echo(a.data, data.train)}};
  save_checkpoint(a.out, model, &state, extra);
  std::cout << "saved " << a.out << "\n";
  return 0;
}

// ---------------------------------------------------------------------------
// resrep and the kernel-level ablation (shared loop)

struct ForgetArgs {
  std::string checkpoint;
  std::string out = "resrep.ckpt";
  std::string trace, events;
  DataFlags data;
  ResRepConfig cfg;
};

void add_config_flags(CLI::App* cmd, ResRepConfig& c) {
  cmd->add_option("--flops-target", c.flops_target, "fraction of multiply-adds to remove");
  cmd->add_option("--lambda", c.lambda, "penalty strength on forgotten channels");
  cmd->add_option("--theta-init", c.theta_init, "selection cap at the first round");
  cmd->add_option("--theta-step", c.theta_step, "cap increment per selection round");
  cmd->add_option("--interval", c.selection_interval, "iterations between selections");
  cmd->add_option("--warmup-epochs", c.warmup_epochs, "epochs before the first selection");
  cmd->add_option("--epochs", c.total_epochs, "training schedule length");
  cmd->add_option("--run-epochs", c.run_epochs, "epochs to run this invocation (0 = all)");
  cmd->add_option("--batch-size", c.batch_size, "examples per iteration");
  cmd->add_option("--lr", c.initial_lr, "initial learning rate (cosine decay)");
  cmd->add_option("--seed", c.seed, "training seed");
  cmd->add_option("--compactor-momentum", c.compactor_momentum, "momentum on compactor rows");
  cmd->add_option("--epsilon", c.epsilon, "conversion prune threshold");
  cmd->add_flag("--augment", c.augment, "random crop and flip on training batches");
}

/// The pruning loop, compactor-based (command "resrep") or applied directly
/// to the target kernels (command "res-only"). Resumes transparently from
/// its own output checkpoints.
int run_forgetting(const ForgetArgs& a, const std::string& command, bool kernel_level) {
  if (!(a.cfg.flops_target > 0 && a.cfg.flops_target < 1)) {
    throw CliError{2, "flops target must lie strictly between 0 and 1"};
  }
  auto loaded = load_checkpoint<float>(a.checkpoint);
  ModelGraph<float> model = std::move(loaded.model);
  if (model.kind == ModelKind::Converted) {
    throw CliError{2, "checkpoint is already converted; nothing left to prune"};
  }

  bool resume;
  if (kernel_level) {
    if (model.kind != ModelKind::Base) {
      throw CliError{2, "kernel-level forgetting needs a plain base checkpoint"};
    }
    resume = loaded.has_train_state && loaded.extra.value("command", "") == command;
  } else {
    resume = model.kind == ModelKind::Reparam;
    if (resume && !loaded.has_train_state) {
      throw CliError{2, "re-parameterized checkpoint carries no training state to resume"};
    }
  }
  TrainState<float> state = resume ? std::move(loaded.state) : TrainState<float>{};

  auto data = load_for_model(a.data, model);
  const std::uint64_t original = unmasked_flops(model);

  CsvFile trace(default_path(a.trace, a.out, ".trace.csv"),
                {"epoch", "loss", "surviving", "forgotten"});
  const std::string events_path = default_path(a.events, a.out, ".events.log");
  std::ofstream events_out(events_path, std::ios::trunc);
  if (!events_out) throw CliError{1, "cannot open for writing: " + events_path};

  ResRepConfig step = a.cfg;
  step.run_epochs = 1;
  const Index start = state.next_epoch;
  const Index stop = a.cfg.run_epochs > 0
                         ? std::min(a.cfg.total_epochs, start + a.cfg.run_epochs)
                         : a.cfg.total_epochs;
  for (Index epoch = start; epoch < stop; ++epoch) {
    auto outcome = kernel_level ? train_res_only(model, data.train, step, &state)
                                : train_resrep(model, data.train, step, &state);
    model = std::move(outcome.model);
    for (const auto& e : outcome.events) {
      const std::string line = event_line(e, original);
      events_out << line << '\n';
      events_out.flush();
      std::cout << line << "\n";
    }
    const auto [survive, forget] = sparsity_trace(model);
    trace.row({std::to_string(epoch), CsvFile::num(outcome.log.epoch_loss.back()),
               CsvFile::num(survive), CsvFile::num(forget)});
  }

  json extra{{"command", command},
             {"config", config_echo(a.cfg)},
             {"data", dataset_echo(a.data, data.train)}};
  save_checkpoint(a.out, model, &state, extra);

  const std::uint64_t deduced = deduced_flops(model);
  std::cout << "deduced flops " << deduced << " of " << original << " ("
            << CsvFile::num(100.0 * (1.0 - double(deduced) / double(original)), 2)
            << "% reduction), target " << (state.masks_frozen ? "reached" : "not reached")
            << "\n";
  std::cout << "saved " << a.out << "\n";
  return 0;
}

// ---------------------------------------------------------------------------
// convert

struct ConvertArgs {
  std::string checkpoint;
  std::string out = "converted.ckpt";
  std::string report;
  double epsilon = 1e-5;
  bool with_accuracy = false;
  DataFlags data;
};

int run_convert(const ConvertArgs& a) {
  auto loaded = load_checkpoint<float>(a.checkpoint);
  if (loaded.model.kind != ModelKind::Reparam) {
    throw CliError{2, "checkpoint holds no compactors to convert"};
  }
  ConvertResult<float> result;
  try {
    result = convert_model(loaded.model, float(a.epsilon));
  } catch (const FullyPruned& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 3;
  }

  if (a.with_accuracy) {
    auto data = load_for_model(a.data, loaded.model);
    const auto& ev = data.eval_split();
    result.report.accuracy_before = evaluate(loaded.model, ev.images, ev.labels);
    result.report.accuracy_after = evaluate(result.model, ev.images, ev.labels);
  }

  write_width_report_csv(default_path(a.report, a.out, ".widths.csv"), result.report);
  std::cout << format_width_report(result.report);

  json extra{{"command", "convert"}, {"epsilon", a.epsilon}, {"source", a.checkpoint}};
  save_checkpoint<float>(a.out, result.model, nullptr, extra);
  std::cout << "saved " << a.out << "\n";
  return 0;
}

// ---------------------------------------------------------------------------
// eval

struct EvalArgs {
  std::string checkpoint;
  std::string split = "test";
  DataFlags data;
};

int run_eval(const EvalArgs& a) {
  auto loaded = load_checkpoint<float>(a.checkpoint);
  auto ds = load_split(a.data, loaded.model, a.split);
  std::cout << "accuracy " << CsvFile::num(evaluate(loaded.model, ds.images, ds.labels), 4)
            << "\n";
  return 0;
}

// ---------------------------------------------------------------------------
// ablate

struct AblateArgs {
  std::string mode;
  ForgetArgs forget;  // checkpoint/out/trace/events/data/cfg
  std::string report;
  Index granularity = 1;
};

int run_ablate(const AblateArgs& a) {
  const ForgetArgs& f = a.forget;
  if (a.mode == "resrep") {
    const int code = run_forgetting(f, "resrep", false);
    if (code != 0) return code;
    auto saved = load_checkpoint<float>(f.out);
    return emit_conversion_report(saved.model, f.cfg.epsilon,
                                  default_path(a.report, f.out, ".widths.csv"));
  }
  if (a.mode == "res-only") {
    const int code = run_forgetting(f, "res-only", true);
    if (code != 0) return code;
    auto saved = load_checkpoint<float>(f.out);
    auto data = load_for_model(f.data, saved.model);
    emit_minimal_structure(saved.model, data.eval_split(), a.granularity,
                           default_path(a.report, f.out, ".minimal.csv"));
    return 0;
  }

  if (a.mode == "group-lasso" || a.mode == "rep-only") {
    if (f.cfg.lambda <= 0) throw CliError{2, a.mode + " needs a positive lambda"};
    auto loaded = load_checkpoint<float>(f.checkpoint);
    ModelGraph<float> model = std::move(loaded.model);
    if (a.mode == "group-lasso" && model.kind != ModelKind::Base) {
      throw CliError{2, "the penalty baseline trains a plain base checkpoint"};
    }
    if (model.kind == ModelKind::Converted) {
      throw CliError{2, "checkpoint is already converted; nothing left to prune"};
    }

    const bool reparam_resume = a.mode == "rep-only" && model.kind == ModelKind::Reparam;
    const bool resume = loaded.has_train_state &&
                        (reparam_resume || loaded.extra.value("command", "") == a.mode);
    TrainState<float> state = resume ? std::move(loaded.state) : TrainState<float>{};

    auto data = load_for_model(f.data, model);
    TrainOptions opt = detail::to_train_options(f.cfg);
    opt.run_epochs = 1;

    CsvFile trace(default_path(f.trace, f.out, ".trace.csv"),
                  {"epoch", "loss", "surviving", "forgotten"});
    const Index start = state.next_epoch;
    const Index stop = f.cfg.run_epochs > 0
                           ? std::min(f.cfg.total_epochs, start + f.cfg.run_epochs)
                           : f.cfg.total_epochs;
    for (Index epoch = start; epoch < stop; ++epoch) {
      TrainLog log;
      if (a.mode == "group-lasso") {
        log = train_group_lasso_baseline(model, data.train, f.cfg.lambda, opt, &state);
      } else {
        auto outcome = train_rep_only(model, data.train, f.cfg.lambda, opt, &state);
        model = std::move(outcome.model);
        log = std::move(outcome.log);
      }
      const auto [survive, forget] = sparsity_trace(model);
      trace.row({std::to_string(epoch), CsvFile::num(log.epoch_loss.back()),
                 CsvFile::num(survive), CsvFile::num(forget)});
    }

    json extra{{"command", a.mode},
               {"config", config_echo(f.cfg)},
               {"data", dataset_echo(f.data, data.train)}};
    save_checkpoint(f.out, model, &state, extra);
    std::cout << "saved " << f.out << "\n";

    if (a.mode == "rep-only") {
      return emit_conversion_report(model, f.cfg.epsilon,
                                    default_path(a.report, f.out, ".widths.csv"));
    }
    emit_minimal_structure(model, data.eval_split(), a.granularity,
                           default_path(a.report, f.out, ".minimal.csv"));
    return 0;
  }
  throw CliError{2, "unknown mode '" + a.mode + "'"};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"structured channel pruning via compactor re-parameterization"};
  app.require_subcommand(1);

  TrainBaseArgs tb;
  auto* tb_cmd = app.add_subcommand("train-base", "train a plain base model");
  add_arch_flags(tb_cmd, tb.arch);
  add_data_flags(tb_cmd, tb.data);
  tb_cmd->add_option("--epochs", tb.epochs, "training epochs");
  tb_cmd->add_option("--batch-size", tb.batch_size, "examples per iteration");
  tb_cmd->add_option("--lr", tb.lr, "initial learning rate (cosine decay)");
  tb_cmd->add_option("--seed", tb.seed, "training seed");
  tb_cmd->add_flag("--augment", tb.augment, "random crop and flip on training batches");
  tb_cmd->add_option("--out", tb.out, "checkpoint path");
  tb_cmd->add_option("--log", tb.log, "training log CSV (default: <out>.log.csv)");

  ForgetArgs rr;
  auto* rr_cmd = app.add_subcommand("resrep", "run the pruning loop on a base checkpoint");
  rr_cmd->add_option("--checkpoint", rr.checkpoint, "base (or own mid-run) checkpoint")
      ->required();
  rr_cmd->add_option("--out", rr.out, "checkpoint path");
  rr_cmd->add_option("--trace", rr.trace, "sparsity trace CSV (default: <out>.trace.csv)");
  rr_cmd->add_option("--events", rr.events, "selection event log (default: <out>.events.log)");
  add_data_flags(rr_cmd, rr.data);
  add_config_flags(rr_cmd, rr.cfg);

  ConvertArgs cv;
  auto* cv_cmd = app.add_subcommand("convert", "fuse and slice a re-parameterized checkpoint");
  cv_cmd->add_option("--checkpoint", cv.checkpoint, "re-parameterized checkpoint")->required();
  cv_cmd->add_option("--out", cv.out, "converted checkpoint path");
  cv_cmd->add_option("--report", cv.report, "width report CSV (default: <out>.widths.csv)");
  cv_cmd->add_option("--epsilon", cv.epsilon, "prune threshold on compactor row norms");
  cv_cmd->add_flag("--with-accuracy", cv.with_accuracy,
                   "evaluate before and after conversion into the report");
  add_data_flags(cv_cmd, cv.data);

  EvalArgs ev;
  auto* ev_cmd = app.add_subcommand("eval", "report top-1 accuracy of a checkpoint");
  ev_cmd->add_option("--checkpoint", ev.checkpoint, "checkpoint to evaluate")->required();
  ev_cmd->add_option("--split", ev.split, "cifar10 split: train or test");
  add_data_flags(ev_cmd, ev.data);

  AblateArgs ab;
  auto* ab_cmd = app.add_subcommand("ablate", "pruning-strategy comparison runs");
  ab_cmd->add_option("--mode", ab.mode, "group-lasso, res-only, rep-only, or resrep")
      ->required();
  ab_cmd->add_option("--checkpoint", ab.forget.checkpoint, "base checkpoint")->required();
  ab_cmd->add_option("--out", ab.forget.out, "checkpoint path");
  ab_cmd->add_option("--trace", ab.forget.trace, "sparsity trace CSV");
  ab_cmd->add_option("--events", ab.forget.events, "selection event log");
  ab_cmd->add_option("--report", ab.report, "width or minimal-structure report CSV");
  ab_cmd->add_option("--granularity", ab.granularity,
                     "minimal-structure: channels removed per evaluation");
  add_data_flags(ab_cmd, ab.forget.data);
  add_config_flags(ab_cmd, ab.forget.cfg);

  CLI11_PARSE(app, argc, argv);

  try {
    if (tb_cmd->parsed()) return run_train_base(tb);
    if (rr_cmd->parsed()) return run_forgetting(rr, "resrep", false);
    if (cv_cmd->parsed()) return run_convert(cv);
    if (ev_cmd->parsed()) return run_eval(ev);
    if (ab_cmd->parsed()) return run_ablate(ab);
  } catch (const CliError& e) {
    std::cerr << "error: " << e.message << "\n";
    return e.code;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
