#include <chrono>
#include <cstdio>
#include <fstream>
#include <iostream>

#include "CLI11.hpp"
#include "ovseg/errors.hpp"
#include "ovseg/harness/checkpoint.hpp"
#include "ovseg/harness/dataset.hpp"
#include "ovseg/harness/evaluation.hpp"
#include "ovseg/harness/training.hpp"
#include "ovseg/image_io.hpp"
#include "ovseg/numerics/kernels.hpp"

namespace {

using namespace ovseg;

int run_gen_data(std::uint64_t seed, const std::string& out, std::size_t classes, std::size_t train_classes,
                 std::size_t images, std::size_t eval_images) {
  DatasetSpec spec;
  spec.seed = seed;
  spec.num_classes = classes;
  spec.num_train_classes = train_classes;
  spec.train_images = images;
  spec.eval_images = eval_images ? eval_images : std::max<std::size_t>(1, images / 4);
  gen_dataset(spec, out);
  std::cerr << "wrote " << spec.train_images << " training and " << spec.eval_images << " eval images to " << out
            << "\n";
  return 0;
}

struct TrainArgs {
  std::string config, data, out, log, placement;
  std::size_t iters = 0;
  double ssc_weight = -1.0;
};

int run_train(const TrainArgs& a) {
  RunConfig cfg = RunConfig::load(a.config);
  if (!a.placement.empty()) cfg.ssc_placement = parse_ssc_placement(a.placement);
  if (a.ssc_weight >= 0.0) cfg.loss.ssc = a.ssc_weight;
  if (a.iters) cfg.iterations = a.iters;
  cfg.validate();
  const DatasetInfo data = open_dataset(a.data);
  Model model(cfg);
  const std::string log_path = a.log.empty() ? a.out + ".loss.csv" : a.log;
  std::ofstream log(log_path);
  if (!log) throw FormatError("cannot write " + log_path);
  const auto t0 = std::chrono::steady_clock::now();
  TrainOptions opt;
  opt.log = &log;
  opt.on_iteration = [&](const TrainLogRow& r) {
    if (r.iteration % 50 == 0 || r.iteration + 1 == cfg.iterations) {
      const double s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      std::fprintf(stderr, "iter %5zu  sem_seg %.5f  ssc %.5f  total %.5f  (%.1fs)\n", r.iteration, r.sem_seg, r.ssc,
                   r.total, s);
    }
  };
  train(model, data, opt);
  save_checkpoint(a.out, model, cfg.iterations);
  std::cerr << "saved " << a.out << ", loss log " << log_path << "\n";
  return 0;
}

struct EvalArgs {
  std::string ckpt, data, mode = "geometric", embeddings = "abd", prompts = "ensemble", out;
  double alpha = 0.2, beta = 0.7, gamma = 0.0;
  bool objectness = false;
};

int run_eval(const EvalArgs& a) {
  const LoadedCheckpoint ck = load_checkpoint(a.ckpt);
  const DatasetInfo data = open_dataset(a.data);
  EvalOptions opt;
  opt.weights = BalanceWeights{a.alpha, a.beta, a.gamma, parse_balance_mode(a.mode)};
  opt.streams = parse_embedding_subset(a.embeddings);
  opt.prompts = parse_prompt_strategy(a.prompts);
  opt.weight_by_objectness = a.objectness;
  const MiouResult r = evaluate(*ck.model, data, opt);
  const ClassVocabulary vocab = ClassVocabulary::load(data.vocab_path(), ck.model->text(), opt.prompts);
  if (a.out.empty()) {
    write_metrics_csv(std::cout, vocab, r);
  } else {
    write_metrics_csv(a.out, vocab, r);
  }
  return 0;
}

struct InferArgs {
  std::string ckpt, image, vocab, out, overlay, prompts;
};

int run_infer(const InferArgs& a) {
  const LoadedCheckpoint ck = load_checkpoint(a.ckpt);
  const RunConfig& cfg = ck.model->config();
  EvalOptions opt;
  opt.weights = cfg.balance;
  opt.prompts = a.prompts.empty() ? cfg.prompts : parse_prompt_strategy(a.prompts);
  const ClassVocabulary vocab = ClassVocabulary::load(a.vocab, ck.model->text(), opt.prompts);
  const Image8 img = read_pnm(a.image);
  if (img.channels != 3) throw FormatError(a.image + " is not a PPM image");
  const SegmentationResult seg = predict(*ck.model, img, vocab, opt);
  Image8 labels{seg.width, seg.height, 1, {}};
  labels.pixels.assign(seg.label_map.begin(), seg.label_map.end());
  write_pgm(a.out, labels);
  if (!a.overlay.empty()) write_ppm(a.overlay, overlay(img, seg.label_map));
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Open-vocabulary segmentation toy pipeline"};
  app.require_subcommand(1);
  std::string isa;
  app.add_option("--isa", isa, "Kernel variant; defaults to the best available")
      ->check(CLI::IsMember({"scalar", "avx2"}));

  std::uint64_t seed = 0;
  std::string out_dir;
  std::size_t classes = 10, train_classes = 6, images = 64, eval_images = 0;
  auto* gen = app.add_subcommand("gen-data", "Write a synthetic dataset");
  gen->add_option("--seed", seed)->required();
  gen->add_option("--out", out_dir)->required();
  gen->add_option("--classes", classes)->required();
  gen->add_option("--train-classes", train_classes)->required();
  gen->add_option("--images", images, "Training images")->required();
  gen->add_option("--eval-images", eval_images, "Eval images (default images/4)");

  TrainArgs ta;
  auto* tr = app.add_subcommand("train", "Train the decoder and write a checkpoint");
  tr->add_option("--config", ta.config)->required();
  tr->add_option("--data", ta.data)->required();
  tr->add_option("--out", ta.out)->required();
  tr->add_option("--iters", ta.iters);
  tr->add_option("--ssc-placement", ta.placement)
      ->check(CLI::IsMember({"a_last1", "a_last3", "a_all", "b_last1", "ab_last1", "none"}));
  tr->add_option("--ssc-weight", ta.ssc_weight)->check(CLI::NonNegativeNumber);
  tr->add_option("--log", ta.log, "Loss log CSV (default CKPT.loss.csv)");

  EvalArgs ea;
  auto* ev = app.add_subcommand("eval", "Compute split mIoU on the eval images");
  ev->add_option("--ckpt", ea.ckpt)->required();
  ev->add_option("--data", ea.data)->required();
  ev->add_option("--alpha", ea.alpha)->required();
  ev->add_option("--beta", ea.beta)->required();
  ev->add_option("--gamma", ea.gamma)->required();
  ev->add_option("--mode", ea.mode)->required()->check(CLI::IsMember({"arithmetic", "geometric"}));
  ev->add_option("--embeddings", ea.embeddings)
      ->required()
      ->check(CLI::IsMember({"a", "b", "d", "ab", "ad", "bd", "abd"}));
  ev->add_option("--prompts", ea.prompts)->required()->check(CLI::IsMember({"single", "ensemble"}));
  ev->add_option("--out", ea.out, "Metrics CSV (default stdout)");
  ev->add_flag("--objectness", ea.objectness, "Down-weight queries classified as no-object");

  InferArgs ia;
  auto* in = app.add_subcommand("infer", "Label one image");
  in->add_option("--ckpt", ia.ckpt)->required();
  in->add_option("--image", ia.image)->required();
  in->add_option("--vocab", ia.vocab)->required();
  in->add_option("--out", ia.out)->required();
  in->add_option("--overlay", ia.overlay, "Also write a PPM overlay");
  in->add_option("--prompts", ia.prompts)->check(CLI::IsMember({"single", "ensemble"}));

  CLI11_PARSE(app, argc, argv);
  try {
    if (!isa.empty()) kernels::set_isa(isa == "avx2" ? kernels::Isa::avx2 : kernels::Isa::scalar);
    if (*gen) return run_gen_data(seed, out_dir, classes, train_classes, images, eval_images);
    if (*tr) return run_train(ta);
    if (*ev) return run_eval(ea);
    if (*in) return run_infer(ia);
  } catch (const ovseg::Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 1;
}
