#pragma once

#include <functional>
#include <iosfwd>
#include <vector>

#include "ovseg/harness/dataset.hpp"
#include "ovseg/harness/model.hpp"

namespace ovseg {

/// Adam with decoupled weight decay and bias correction.
class AdamW {
 public:
  AdamW(ParamList params, double lr, double weight_decay, double beta1, double beta2, double eps);

  void zero_grad();
  /// Applies one update from the accumulated gradients.
  void step();
  std::size_t steps() const { return t_; }

 private:
  ParamList params_;
  double lr_, wd_, b1_, b2_, eps_;
  std::size_t t_ = 0;
  std::vector<std::vector<double>> m_, v_;
};

struct TrainLogRow {
  std::size_t iteration = 0;
  double sem_seg = 0.0;
  double ssc = 0.0;
  double total = 0.0;
};

struct TrainOptions {
  /// Overrides config().iterations when non-zero.
  std::size_t iterations = 0;
  /// Receives `iteration,sem_seg,ssc,total` rows as they are produced.
  std::ostream* log = nullptr;
  std::function<void(const TrainLogRow&)> on_iteration;
};

/// Batch-mean losses over images drawn with a seeded generator. Only the
/// trainable leaves change. Throws NonFiniteError naming the iteration.
std::vector<TrainLogRow> train(Model& model, const DatasetInfo& data, const TrainOptions& options = {});

void write_log_header(std::ostream& out);
void write_log_row(std::ostream& out, const TrainLogRow& row);

}  // namespace ovseg
