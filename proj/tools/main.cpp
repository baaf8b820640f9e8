#include <CLI11.hpp>

#include <iostream>
#include <vector>
#include <string>

#include "mbcset/cli.hpp"

namespace {

using namespace mbcset;

const std::vector<std::string> kModes = {"sum", "mean", "max", "min"};

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Streaming set encoder with mini-batch consistent aggregation"};
  app.require_subcommand(1);

  cli::MakeModelOptions make;
  auto* make_cmd = app.add_subcommand("make-model", "Write a randomly initialized model file");
  make_cmd->add_option("--kind", make.kind, "sse, deepsets, or softmax_pool")->capture_default_str();
  make_cmd->add_option("--d", make.sse.d, "Input element width")->capture_default_str();
  make_cmd->add_option("--K", make.sse.K, "Slots (sse) or queries (softmax_pool)")->capture_default_str();
  make_cmd->add_option("--slot-dim", make.sse.h, "Slot width")->capture_default_str();
  make_cmd->add_option("--d-hat", make.sse.d_hat, "First-layer encoding width")->capture_default_str();
  make_cmd->add_option("--depth", make.sse.depth, "Stacked layers; width doubles per layer")->capture_default_str();
  make_cmd->add_option("--readout", make.sse.readout, "Append a K=1 sum layer of this width (0: none)");
  std::string make_mode = "mean";
  std::string make_slots = "random";
  make_cmd->add_option("--mode", make_mode, "First-layer aggregation / DeepSets pool")
      ->check(CLI::IsMember(kModes))
      ->capture_default_str();
  make_cmd->add_option("--slots", make_slots, "Slot initialization")
      ->check(CLI::IsMember({"random", "deterministic"}))
      ->capture_default_str();
  make_cmd->add_flag("--bias", make.sse.bias, "Bias terms in the sse projections");
  make_cmd->add_option("--hidden", make.hidden, "DeepSets hidden width")->capture_default_str();
  make_cmd->add_option("--out-dim", make.out_dim, "DeepSets output width (0: d)");
  make_cmd->add_option("--seed", make.seed)->capture_default_str();
  make_cmd->add_option("--out", make.out, "Output path (default stdout)");

  cli::InitOptions init;
  std::string init_mode;
  auto* init_cmd = app.add_subcommand("init", "Create an empty streaming session");
  init_cmd->add_option("--model", init.model)->required();
  init_cmd->add_option("--session", init.session)->required();
  init_cmd->add_option("--seed", init.seed, "Slot sampling seed")->capture_default_str();
  auto* init_mode_opt = init_cmd->add_option("--mode", init_mode, "Override the first-layer aggregation")
                            ->check(CLI::IsMember(kModes));

  cli::IngestOptions ingest;
  auto* ingest_cmd = app.add_subcommand("ingest", "Fold CSV batches into a session");
  ingest_cmd->add_option("--model", ingest.model)->required();
  ingest_cmd->add_option("--session", ingest.session)->required();
  ingest_cmd->add_option("batches", ingest.batches, "Batch CSV files, ingested in order")->required();

  cli::FinalizeOptions fin;
  auto* fin_cmd = app.add_subcommand("finalize", "Emit the encoding of everything ingested so far");
  fin_cmd->add_option("--model", fin.model)->required();
  fin_cmd->add_option("--session", fin.session)->required();
  fin_cmd->add_option("--out", fin.out, "Output path (default stdout)");

  cli::VerifyOptions verify;
  double verify_tol = 0.0;
  auto* verify_cmd = app.add_subcommand("verify-mbc", "Compare partitioned and full-set encodings");
  verify_cmd->add_option("--model", verify.model)->required();
  verify_cmd->add_option("--data", verify.data, "Set elements as CSV")->required();
  verify_cmd->add_option("--partitions", verify.partitions)->capture_default_str();
  verify_cmd->add_option("--seed", verify.seed)->capture_default_str();
  auto* verify_tol_opt = verify_cmd->add_option("--tolerance", verify_tol, "Default: 1e-9 sum/mean, 0 max/min");

  cli::DemoOptions demo;
  auto* demo_cmd = app.add_subcommand("demo-inconsistency", "Discrepancy census across encoder kinds");
  demo_cmd->add_option("--instances", demo.instances)->capture_default_str();
  demo_cmd->add_option("--n", demo.n, "Set size")->capture_default_str();
  demo_cmd->add_option("--d", demo.d)->capture_default_str();
  demo_cmd->add_option("--seed", demo.seed)->capture_default_str();
  demo_cmd->add_option("--out", demo.out);

  cli::TrainOptions train;
  std::size_t train_steps = 0, train_subset = 0;
  double train_lr = 0.0;
  std::uint64_t train_seed = 0;
  auto* train_cmd = app.add_subcommand("train", "Mini-batch training on the centroid task");
  train_cmd->add_option("--model", train.model)->required();
  train_cmd->add_option("--out", train.out, "Trained model path");
  train_cmd->add_option("--history", train.history, "History CSV path (default stdout)");
  auto* steps_opt = train_cmd->add_option("--steps", train_steps);
  auto* subset_opt = train_cmd->add_option("--subset", train_subset);
  auto* lr_opt = train_cmd->add_option("--lr", train_lr);
  auto* train_seed_opt = train_cmd->add_option("--seed", train_seed);

  cli::GradcheckOptions grad;
  auto* grad_cmd = app.add_subcommand("gradcheck", "Finite-difference check of the gradient engine");
  grad_cmd->add_option("--model", grad.model)->required();
  grad_cmd->add_option("--seed", grad.seed)->capture_default_str();
  grad_cmd->add_option("--step", grad.step)->capture_default_str();
  grad_cmd->add_option("--tolerance", grad.tolerance)->capture_default_str();
  grad_cmd->add_option("--sets", grad.sets)->capture_default_str();
  grad_cmd->add_option("--n", grad.n, "Elements per set")->capture_default_str();
  grad_cmd->add_option("--partitions", grad.partitions)->capture_default_str();

  cli::EvalOptions eval;
  std::size_t eval_chunk = 0;
  auto* eval_cmd = app.add_subcommand("eval", "Held-out loss by set size, full vs partitioned");
  eval_cmd->add_option("--model", eval.model)->required();
  eval_cmd->add_option("--seed", eval.seed)->capture_default_str();
  eval_cmd->add_option("--episodes", eval.episodes)->capture_default_str();
  eval_cmd->add_option("--sizes", eval.sizes, "Set sizes (default: doubling up to the set size)")->delimiter(',');
  auto* chunk_opt = eval_cmd->add_option("--chunk", eval_chunk, "Partition size (default: training subset)");
  eval_cmd->add_option("--out", eval.out);

  cli::SweepOptions sweep;
  auto* sweep_cmd = app.add_subcommand("sweep", "Train one model per value of an architecture axis");
  sweep_cmd->add_option("--axis", sweep.axis, "g, K, h, or depth")->capture_default_str();
  sweep_cmd->add_option("--values", sweep.values, "Axis values (default per axis)")->delimiter(',');
  sweep_cmd->add_option("--seed", sweep.train.seed)->capture_default_str();
  sweep_cmd->add_option("--steps", sweep.train.steps)->capture_default_str();
  sweep_cmd->add_option("--subset", sweep.train.subset)->capture_default_str();
  sweep_cmd->add_option("--lr", sweep.train.adam.lr)->capture_default_str();
  sweep_cmd->add_option("--d", sweep.task.d)->capture_default_str();
  sweep_cmd->add_option("--shot", sweep.task.shot, "Set size")->capture_default_str();
  sweep_cmd->add_option("--K", sweep.base.K)->capture_default_str();
  sweep_cmd->add_option("--slot-dim", sweep.base.h)->capture_default_str();
  sweep_cmd->add_option("--d-hat", sweep.base.d_hat)->capture_default_str();
  sweep_cmd->add_option("--depth", sweep.base.depth)->capture_default_str();
  sweep_cmd->add_option("--episodes", sweep.episodes)->capture_default_str();
  sweep_cmd->add_option("--out", sweep.out);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, std::cerr, std::cerr);
    return code == 0 ? 0 : cli::kExitError;
  }

  auto& out = std::cout;
  auto& err = std::cerr;
  try {
    if (*make_cmd) {
      make.sse.mode = parse_agg_mode(make_mode);
      make.sse.slots = make_slots == "random" ? SlotMode::Random : SlotMode::Deterministic;
      return cli::cmd_make_model(make, out, err);
    }
    if (*init_cmd) {
      if (*init_mode_opt) init.mode = parse_agg_mode(init_mode);
      return cli::cmd_init(init, out, err);
    }
    if (*ingest_cmd) return cli::cmd_ingest(ingest, out, err);
    if (*fin_cmd) return cli::cmd_finalize(fin, out, err);
    if (*verify_cmd) {
      if (*verify_tol_opt) verify.tolerance = verify_tol;
      return cli::cmd_verify_mbc(verify, out, err);
    }
    if (*demo_cmd) return cli::cmd_demo_inconsistency(demo, out, err);
    if (*train_cmd) {
      if (*steps_opt) train.steps = train_steps;
      if (*subset_opt) train.subset = train_subset;
      if (*lr_opt) train.lr = train_lr;
      if (*train_seed_opt) train.seed = train_seed;
      return cli::cmd_train(train, out, err);
    }
    if (*grad_cmd) return cli::cmd_gradcheck(grad, out, err);
    if (*eval_cmd) {
      if (*chunk_opt) eval.chunk = eval_chunk;
      return cli::cmd_eval(eval, out, err);
    }
    if (*sweep_cmd) return cli::cmd_sweep(sweep, out, err);
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return cli::kExitError;
  }
  return cli::kExitError;
}
