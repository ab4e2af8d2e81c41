#include "ovseg/harness/training.hpp"

#include <cmath>
#include <cstdio>
#include <ostream>

#include "ovseg/errors.hpp"

namespace ovseg {

AdamW::AdamW(ParamList params, double lr, double weight_decay, double beta1, double beta2, double eps)
    : params_(std::move(params)), lr_(lr), wd_(weight_decay), b1_(beta1), b2_(beta2), eps_(eps) {
  for (const NamedParam& p : params_) {
    if (!p.tensor.requires_grad()) throw ContractError("AdamW: parameter " + p.name + " is not trainable");
    m_.emplace_back(p.tensor.size(), 0.0);
    v_.emplace_back(p.tensor.size(), 0.0);
  }
}

void AdamW::zero_grad() {
  for (NamedParam& p : params_) p.tensor.zero_grad();
}

void AdamW::step() {
  ++t_;
  const double c1 = 1.0 - std::pow(b1_, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(b2_, static_cast<double>(t_));
  for (std::size_t k = 0; k < params_.size(); ++k) {
    Tensor& t = params_[k].tensor;
    if (!t.has_grad()) continue;
    const std::span<const double> g = t.grad();
    std::span<double> w = t.mutable_data();
    std::vector<double>& m = m_[k];
    std::vector<double>& v = v_[k];
    for (std::size_t i = 0; i < w.size(); ++i) {
      m[i] = b1_ * m[i] + (1.0 - b1_) * g[i];
      v[i] = b2_ * v[i] + (1.0 - b2_) * g[i] * g[i];
      const double mhat = m[i] / c1, vhat = v[i] / c2;
      w[i] -= lr_ * (mhat / (std::sqrt(vhat) + eps_) + wd_ * w[i]);
    }
  }
}

void write_log_header(std::ostream& out) { out << "iteration,sem_seg,ssc,total\n"; }

void write_log_row(std::ostream& out, const TrainLogRow& row) {
  char buf[128];
  std::snprintf(buf, sizeof buf, "%zu,%.17g,%.17g,%.17g\n", row.iteration, row.sem_seg, row.ssc, row.total);
  out << buf;
}

std::vector<TrainLogRow> train(Model& model, const DatasetInfo& data, const TrainOptions& options) {
  const RunConfig& cfg = model.config();
  if (data.spec.embed_dim != cfg.embed_dim || data.spec.text_seed != cfg.text_seed)
    throw ConfigError("dataset was generated for a different text embedding");
  const std::size_t iterations = options.iterations ? options.iterations : cfg.iterations;

  std::vector<std::string> train_names;
  std::vector<std::size_t> class_map(data.names.size(), kUnmappedClass);
  for (std::size_t c = 0; c < data.names.size(); ++c)
    if (data.is_train[c]) {
      class_map[c] = train_names.size();
      train_names.push_back(data.names[c]);
    }
  const Tensor te_train = model.text().text_embeddings(train_names, cfg.prompts);

  struct Item {
    Tensor image;
    GroundTruth gt;
  };
  std::vector<Item> items;
  for (std::size_t i = 0; i < data.spec.train_images; ++i) {
    const Sample s = data.load("train", i);
    const std::size_t mh = (s.image.height + 3) / 4, mw = (s.image.width + 3) / 4;
    items.push_back({image_tensor(s.image), ground_truth(s.labels, s.image.height, s.image.width, mh, mw, class_map)});
  }

  AdamW opt(model.trainable_parameters(), cfg.learning_rate, cfg.weight_decay, cfg.adam_beta1, cfg.adam_beta2,
            cfg.adam_eps);
  Rng rng(mix_seed(cfg.seed, "batches"));
  const double inv_batch = 1.0 / static_cast<double>(cfg.batch_size);
  std::vector<TrainLogRow> log;
  if (options.log) write_log_header(*options.log);
  for (std::size_t it = 0; it < iterations; ++it) {
    opt.zero_grad();
    TrainLogRow row;
    row.iteration = it;
    try {
      for (std::size_t b = 0; b < cfg.batch_size; ++b) {
        const Item& item = items[rng.below(items.size())];
        GradTape tape;
        Tensor loss;
        {
          TapeScope scope(tape);
          const ForwardOutput out = forward(model, item.image, te_train);
          const LossBreakdown lb = total_loss(out.prediction, item.gt, te_train, cfg.loss, cfg.ssc_placement);
          row.sem_seg += lb.sem_seg.item() * inv_batch;
          row.ssc += lb.ssc.item() * inv_batch;
          row.total += lb.total.item() * inv_batch;
          loss = ops::scale(lb.total, inv_batch);
        }
        tape.backward(loss);
      }
    } catch (const NonFiniteError& e) {
      throw NonFiniteError("training diverged at iteration " + std::to_string(it) + ": " + e.what());
    }
    if (!std::isfinite(row.total))
      throw NonFiniteError("training diverged at iteration " + std::to_string(it) + ": non-finite loss");
    opt.step();
    log.push_back(row);
    if (options.log) write_log_row(*options.log, row);
    if (options.on_iteration) options.on_iteration(row);
  }
  return log;
}

}  // namespace ovseg
