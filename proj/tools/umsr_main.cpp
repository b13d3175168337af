// Batch command-line front end: data generation, contrastive pretraining,
// fine-tuning, evaluation, inference and gradient self-checks.
//
// Exit codes: 0 success, 1 runtime/check failure, 2 usage or config error.

#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "urbanmsr/config.hpp"
#include "urbanmsr/flow.hpp"
#include "urbanmsr/gradcheck.hpp"
#include "urbanmsr/model.hpp"
#include "urbanmsr/pretrain.hpp"
#include "urbanmsr/train.hpp"

namespace fs = std::filesystem;
using namespace umsr;

namespace {

struct GlobalOpts {
  std::string config_path;
  std::uint64_t seed = 42;
  int precision = 32;
  std::string out_dir = ".";
};

RunConfig load_run_config(const GlobalOpts& g) {
  if (g.config_path.empty()) {
    RunConfig cfg;
    cfg.validate();
    return cfg;
  }
  return load_config_file(g.config_path);
}

void echo_config(const RunConfig& cfg, const GlobalOpts& g) {
  nlohmann::json doc = effective_config(cfg);
  doc["seed"] = g.seed;
  doc["precision"] = g.precision;
  std::cout << "effective config: " << doc.dump() << "\n";
}

std::string out_path(const GlobalOpts& g, const std::string& name) {
  std::error_code ec;
  fs::create_directories(g.out_dir, ec);
  return (fs::path(g.out_dir) / name).string();
}

void write_text(const std::string& path, const std::string& text) {
  std::ofstream os(path);
  if (!os) throw IoError("cannot open for writing: " + path);
  os << text;
  if (!os) throw IoError("write failed: " + path);
}

std::string fmt(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

std::string metrics_csv(const std::vector<std::pair<std::string, MetricsReport>>& rows) {
  std::string csv = "method,rmse,mae,mape,constraint_residual,n_frames\n";
  for (const auto& [name, r] : rows)
    csv += name + "," + fmt(r.rmse) + "," + fmt(r.mae) + "," + fmt(r.mape) + "," +
           fmt(r.constraint_residual) + "," + std::to_string(r.n_frames) + "\n";
  return csv;
}

void print_metrics_table(const std::vector<std::pair<std::string, MetricsReport>>& rows) {
  std::printf("%-10s %12s %12s %12s %18s\n", "method", "RMSE", "MAE", "MAPE", "residual");
  for (const auto& [name, r] : rows)
    std::printf("%-10s %12.4f %12.4f %12.4f %18.3e\n", name.c_str(), r.rmse, r.mae, r.mape,
                r.constraint_residual);
}

std::string loss_csv(const PretrainTrace& trace) {
  std::string csv = "epoch,loss\n";
  for (std::size_t e = 0; e < trace.epoch_loss.size(); ++e)
    csv += std::to_string(e + 1) + "," + fmt(trace.epoch_loss[e]) + "\n";
  return csv;
}

std::string trace_csv(const TrainTrace& trace) {
  std::string csv = "epoch,train_loss,val_loss,val_rmse,val_residual\n";
  for (std::size_t e = 0; e < trace.epochs.size(); ++e) {
    const auto& s = trace.epochs[e];
    csv += std::to_string(e + 1) + "," + fmt(s.train_loss) + "," + fmt(s.val_loss) + "," +
           fmt(s.val_rmse) + "," + fmt(s.val_residual) + "\n";
  }
  return csv;
}

// ---- subcommand bodies, templated on runtime precision ----------------------

template <class S>
int run_gen_data(const GlobalOpts& g, const std::string& coarse_out,
                 const std::string& fine_out) {
  RunConfig cfg = load_run_config(g);
  echo_config(cfg, g);
  SynthConfig synth = cfg.data.synth;
  synth.seed = g.seed;
  auto [fine, coarse] = synth_generate<S>(synth);
  double residual = validate_constraint(coarse, fine, synth.upscale);
  save_grid(coarse, coarse_out);
  save_grid(fine, fine_out);
  std::cout << "wrote " << coarse_out << " (" << coarse.frames << "x" << coarse.height << "x"
            << coarse.width << ") and " << fine_out << " (" << fine.frames << "x" << fine.height
            << "x" << fine.width << ")\n";
  std::cout << "constraint residual: " << fmt(residual) << "\n";
  return residual == 0.0 ? 0 : 1;
}

template <class S>
int run_pretrain(const GlobalOpts& g, const std::string& stage, const std::string& data_path,
                 const std::string& ckpt_out) {
  RunConfig cfg = load_run_config(g);
  echo_config(cfg, g);
  FlowGrid<S> coarse = load_grid<S>(data_path);
  if (coarse.granularity != Granularity::Coarse)
    throw FormatError("pretrain expects a coarse-granularity grid: " + data_path);
  DatasetSplit split = make_split(coarse.frames, cfg.data.train_frac, cfg.data.val_frac);
  ScalerParams scaler = fit_scaler(coarse, split.train);

  PretrainTrace trace;
  Checkpoint ckpt;
  ModelConfig mc = cfg.model;
  mc.upscale = coarse.upscale;
  if (stage == "b") {
    auto enc = NeighborhoodEncoder<S>::init(mc, g.seed, "encoder_b");
    trace = pretrain_neighborhood(enc, coarse, scaler, split.train, cfg.pretrain, g.seed);
    std::vector<std::pair<std::string, Tensor<S>*>> named;
    enc.collect(named, "encoder_b");
    ckpt = checkpoint_from_params(StageTag::NeighborhoodPretrain, named);
  } else {
    auto enc = CityEncoder<S>::init(mc, g.seed, "encoder_c");
    trace = pretrain_city(enc, coarse, scaler, split.train, cfg.pretrain, g.seed);
    std::vector<std::pair<std::string, Tensor<S>*>> named;
    enc.collect(named, "encoder_c");
    ckpt = checkpoint_from_params(StageTag::CityPretrain, named);
  }
  save_checkpoint(ckpt, ckpt_out);
  std::string csv_path = out_path(g, std::string("pretrain_") + stage + "_loss.csv");
  write_text(csv_path, loss_csv(trace));
  std::cout << "stage " << stage_name(ckpt.stage) << " checkpoint: " << ckpt_out << "\n";
  std::cout << "loss trace: " << csv_path << " (first " << fmt(trace.epoch_loss.front())
            << ", last " << fmt(trace.epoch_loss.back()) << ")\n";
  return 0;
}

template <class S>
int run_train(const GlobalOpts& g, const std::string& coarse_path, const std::string& fine_path,
              const std::string& ckpt_b, const std::string& ckpt_c, bool end_to_end,
              const std::string& ckpt_out) {
  RunConfig cfg = load_run_config(g);
  echo_config(cfg, g);
  FlowGrid<S> coarse = load_grid<S>(coarse_path);
  FlowGrid<S> fine = load_grid<S>(fine_path);
  if (coarse.granularity != Granularity::Coarse)
    throw FormatError("train expects a coarse-granularity grid: " + coarse_path);
  if (fine.granularity != Granularity::Fine)
    throw FormatError("train expects a fine-granularity grid: " + fine_path);
  DatasetSplit split = make_split(coarse.frames, cfg.data.train_frac, cfg.data.val_frac);

  ModelConfig mc = cfg.model;
  mc.upscale = fine.upscale;
  ModelState<S> model = ModelState<S>::init(mc, g.seed);
  if (!end_to_end) {
    Checkpoint b = load_checkpoint(ckpt_b);
    if (b.stage != StageTag::NeighborhoodPretrain)
      throw CheckpointError("expected a stage I (neighborhood) checkpoint, got stage " +
                            std::string(stage_name(b.stage)) + ": " + ckpt_b);
    Checkpoint c = load_checkpoint(ckpt_c);
    if (c.stage != StageTag::CityPretrain)
      throw CheckpointError("expected a stage II (city) checkpoint, got stage " +
                            std::string(stage_name(c.stage)) + ": " + ckpt_c);
    std::vector<std::pair<std::string, Tensor<S>*>> named_b, named_c;
    model.enc_b.collect(named_b, "encoder_b");
    model.enc_c.collect(named_c, "encoder_c");
    apply_checkpoint(b, named_b);
    apply_checkpoint(c, named_c);
  }
  TrainTrace trace = (end_to_end ? end_to_end_train(model, coarse, fine, split, cfg.train, g.seed)
                                 : finetune(model, coarse, fine, split, cfg.train, g.seed));
  Checkpoint out = checkpoint_from_model(model, StageTag::Finetuned);
  save_checkpoint(out, ckpt_out);
  std::string csv_path = out_path(g, end_to_end ? "train_end_to_end.csv" : "train_two_stage.csv");
  write_text(csv_path, trace_csv(trace));

  MetricsReport val =
      evaluate_model(model, coarse, fine, range_frames(split.val), cfg.eval.mape_mask);
  std::cout << "mode: " << (end_to_end ? "end_to_end" : "two_stage") << "\n";
  std::cout << "best epoch: " << trace.best_epoch << "\n";
  std::cout << "final val RMSE: " << fmt(val.rmse) << " MAE: " << fmt(val.mae)
            << " MAPE: " << fmt(val.mape) << "\n";
  std::cout << "model checkpoint: " << ckpt_out << "\ntrace: " << csv_path << "\n";
  return 0;
}

template <class S>
int run_eval(const GlobalOpts& g, const std::string& ckpt_path, const std::string& coarse_path,
             const std::string& fine_path) {
  RunConfig cfg = load_run_config(g);
  echo_config(cfg, g);
  FlowGrid<S> coarse = load_grid<S>(coarse_path);
  FlowGrid<S> fine = load_grid<S>(fine_path);
  DatasetSplit split = make_split(coarse.frames, cfg.data.train_frac, cfg.data.val_frac);

  Checkpoint ckpt = load_checkpoint(ckpt_path);
  if (ckpt.stage != StageTag::Finetuned)
    throw CheckpointError("eval expects a stage III checkpoint, got stage " +
                          std::string(stage_name(ckpt.stage)) + ": " + ckpt_path);
  ModelConfig mc = cfg.model;
  mc.upscale = fine.upscale;
  ModelState<S> model = ModelState<S>::init(mc, g.seed);
  apply_checkpoint(ckpt, model.named_params(), &model);
  model.scalers_fitted = true;

  auto frames = range_frames(split.test);
  std::vector<std::pair<std::string, MetricsReport>> rows;
  rows.push_back({"MEAN", baseline_mean(coarse, fine, frames, cfg.eval.mape_mask)});
  rows.push_back({"HA", baseline_ha(coarse, fine, split.train, frames, cfg.eval.mape_mask)});
  rows.push_back({"model", evaluate_model(model, coarse, fine, frames, cfg.eval.mape_mask)});
  print_metrics_table(rows);
  std::string csv_path = out_path(g, "eval_metrics.csv");
  write_text(csv_path, metrics_csv(rows));
  std::cout << "metrics: " << csv_path << "\n";
  return 0;
}

template <class S>
int run_infer(const GlobalOpts& g, const std::string& ckpt_path, const std::string& coarse_path,
              const std::string& fine_out, const std::string& format) {
  RunConfig cfg = load_run_config(g);
  echo_config(cfg, g);
  FlowGrid<S> coarse = load_grid<S>(coarse_path);
  if (coarse.granularity != Granularity::Coarse)
    throw FormatError("infer expects a coarse-granularity grid: " + coarse_path);

  Checkpoint ckpt = load_checkpoint(ckpt_path);
  if (ckpt.stage != StageTag::Finetuned)
    throw CheckpointError("infer expects a stage III checkpoint, got stage " +
                          std::string(stage_name(ckpt.stage)) + ": " + ckpt_path);
  ModelConfig mc = cfg.model;
  mc.upscale = coarse.upscale;
  ModelState<S> model = ModelState<S>::init(mc, g.seed);
  apply_checkpoint(ckpt, model.named_params(), &model);
  model.scalers_fitted = true;

  const int factor = coarse.upscale;
  FlowGrid<S> fine = FlowGrid<S>::make(coarse.frames, factor * coarse.height,
                                       factor * coarse.width, Granularity::Fine, factor,
                                       coarse.slots_per_day);
  for (int t = 0; t < coarse.frames; ++t) {
    Tensor<S> y = infer_fine(model, coarse.frame_tensor(t));
    for (int i = 0; i < fine.height; ++i)
      for (int j = 0; j < fine.width; ++j) fine.at(t, i, j) = std::max(S(0), y.at(0, i, j));
  }
  double residual = validate_constraint(coarse, fine, factor);
  if (format == "csv")
    export_csv(fine, fine_out);
  else
    save_grid(fine, fine_out);
  std::cout << "wrote " << fine_out << " (" << fine.frames << "x" << fine.height << "x"
            << fine.width << ")\n";
  std::cout << "constraint residual: " << fmt(residual) << "\n";
  if (residual >= 1e-4) {
    std::cerr << "constraint residual above 1e-4\n";
    return 1;
  }
  return 0;
}

int run_gradcheck(const GlobalOpts& g) {
  auto results = gradcheck::run_standard_suite(g.seed);
  auto degeneracy = gradcheck::run_degeneracy_suite(g.seed);
  bool all_pass = true;
  std::printf("%-24s %14s %10s %8s\n", "check", "max rel err", "tol", "status");
  for (const auto& r : results) {
    std::printf("%-24s %14.3e %10.0e %8s\n", r.name.c_str(), r.max_rel_err, r.tol,
                r.pass ? "pass" : "FAIL");
    all_pass = all_pass && r.pass;
  }
  for (const auto& r : degeneracy) {
    std::printf("%-24s %14.3e %10.0e %8s\n", r.name.c_str(), r.max_abs_err, r.tol,
                r.pass ? "pass" : "FAIL");
    all_pass = all_pass && r.pass;
  }
  std::cout << (all_pass ? "gradient suite: all checks passed\n"
                         : "gradient suite: FAILURES present\n");
  return all_pass ? 0 : 1;
}

template <class Fn>
int dispatch_precision(int precision, Fn&& fn) {
  if (precision == 32) return fn(float{});
  return fn(double{});
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"urbanmsr: fine-grained urban flow inference toolkit"};
  app.require_subcommand(1);

  GlobalOpts g;
  app.add_option("--config", g.config_path, "JSON config file");
  app.add_option("--seed", g.seed, "global random seed")->capture_default_str();
  app.add_option("--precision", g.precision, "floating point width (32|64)")
      ->check(CLI::IsMember({32, 64}))
      ->capture_default_str();
  app.add_option("--out", g.out_dir, "output directory for CSV traces")->capture_default_str();

  auto* gen = app.add_subcommand("gen-data", "generate a synthetic coarse/fine grid pair");
  std::string coarse_path = "coarse.uflw", fine_path = "fine.uflw";
  gen->add_option("--out-coarse", coarse_path, "coarse grid output path")
      ->capture_default_str();
  gen->add_option("--out-fine", fine_path, "fine grid output path")->capture_default_str();

  auto* pre = app.add_subcommand("pretrain", "contrastive pretraining of one encoder");
  std::string stage;
  std::string pre_data, pre_out = "encoder.umsr";
  pre->add_option("--stage", stage, "encoder to pretrain: b (neighborhood) or c (city)")
      ->required()
      ->check(CLI::IsMember({"b", "c"}));
  pre->add_option("--coarse", pre_data, "coarse grid file")->required();
  pre->add_option("--out-ckpt", pre_out, "checkpoint output path")->capture_default_str();

  auto* train = app.add_subcommand("train", "stage III fine-tuning (or end-to-end ablation)");
  std::string train_coarse, train_fine, ckpt_b, ckpt_c, train_out = "model.umsr";
  bool end_to_end = false;
  train->add_option("--coarse", train_coarse, "coarse grid file")->required();
  train->add_option("--fine", train_fine, "fine grid file")->required();
  auto* from_opt = train->add_option("--from-pretrained", ckpt_b,
                                     "stage I (neighborhood) encoder checkpoint");
  auto* from_opt_c = train->add_option("--from-pretrained-city", ckpt_c,
                                       "stage II (city) encoder checkpoint");
  auto* e2e_flag = train->add_flag("--end-to-end", end_to_end,
                                   "train from random encoders, no pretraining");
  e2e_flag->excludes(from_opt);
  e2e_flag->excludes(from_opt_c);
  train->add_option("--out-ckpt", train_out, "model checkpoint output")->capture_default_str();

  auto* eval = app.add_subcommand("eval", "evaluate a model plus MEAN and HA baselines");
  std::string eval_ckpt, eval_coarse, eval_fine;
  eval->add_option("--ckpt", eval_ckpt, "stage III model checkpoint")->required();
  eval->add_option("--coarse", eval_coarse, "coarse grid file")->required();
  eval->add_option("--fine", eval_fine, "fine ground-truth grid file")->required();

  auto* infer = app.add_subcommand("infer", "run fine-grained inference over a coarse file");
  std::string infer_ckpt, infer_coarse, infer_out = "inferred.uflw", infer_format = "bin";
  infer->add_option("--ckpt", infer_ckpt, "stage III model checkpoint")->required();
  infer->add_option("--coarse", infer_coarse, "coarse grid file")->required();
  infer->add_option("--out-fine", infer_out, "fine output path")->capture_default_str();
  infer->add_option("--format", infer_format, "output format")
      ->check(CLI::IsMember({"bin", "csv"}))
      ->capture_default_str();

  app.add_subcommand("gradcheck", "finite-difference and degeneracy self-checks");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (gen->parsed())
      return dispatch_precision(g.precision, [&](auto tag) {
        return run_gen_data<decltype(tag)>(g, coarse_path, fine_path);
      });
    if (pre->parsed())
      return dispatch_precision(g.precision, [&](auto tag) {
        return run_pretrain<decltype(tag)>(g, stage, pre_data, pre_out);
      });
    if (train->parsed()) {
      if (!end_to_end && (ckpt_b.empty() || ckpt_c.empty()))
        throw UsageError(
            "train: two-stage mode needs --from-pretrained and --from-pretrained-city "
            "(or pass --end-to-end)");
      return dispatch_precision(g.precision, [&](auto tag) {
        return run_train<decltype(tag)>(g, train_coarse, train_fine, ckpt_b, ckpt_c, end_to_end,
                                        train_out);
      });
    }
    if (eval->parsed())
      return dispatch_precision(g.precision, [&](auto tag) {
        return run_eval<decltype(tag)>(g, eval_ckpt, eval_coarse, eval_fine);
      });
    if (infer->parsed())
      return dispatch_precision(g.precision, [&](auto tag) {
        return run_infer<decltype(tag)>(g, infer_ckpt, infer_coarse, infer_out, infer_format);
      });
    return run_gradcheck(g);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const UsageError& e) {
    std::cerr << "usage error: " << e.what() << "\n";
    return 2;
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}
