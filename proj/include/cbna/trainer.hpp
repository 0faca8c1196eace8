#pragma once

#include <cstdint>
#include <filesystem>
#include <memory>
#include <vector>

#include "cbna/datagen.hpp"
#include "cbna/segnet.hpp"

namespace cbna {

struct TrainConfig {
  int epochs = 10;
  int batch_size = 8;
  double lr = 1e-3;
  double lr_final = 1e-4;  // used for the last quarter of the epochs
  double momentum_bn = 0.1;
  uint64_t seed = 0;
  bool augment_flip = true;

  void validate() const;
};

// Positive per-class loss weights.
struct ClassWeights {
  std::vector<double> w;
};

ClassWeights unit_weights(int num_classes);

// w_s = 1 / ln(offset + p_s) with p_s the class pixel frequency; classes with
// zero pixels land at the maximum 1 / ln(offset).
ClassWeights class_weights_from_frequencies(const std::vector<uint64_t>& pixel_counts,
                                            double offset = 1.02);

// Pixel-averaged weighted cross-entropy, then averaged over the batch.
// Logs are clamped at 1e-12.
double weighted_ce_loss(const Tensor& posteriors, const ClassMap& labels,
                        const ClassWeights& weights);

struct TrainStep {
  int epoch = 0;
  int step = 0;  // global step index
  double loss = 0.0;
  double lr = 0.0;
  int n_primary = 0;    // batch slots drawn from the primary dataset
  int n_secondary = 0;  // batch slots drawn from the mix dataset
};
using TrainLog = std::vector<TrainStep>;

void write_train_log_csv(const TrainLog& log, const std::filesystem::path& path);

// Minibatch SGD on the weighted cross-entropy. BN layers normalize with
// current-batch statistics and track running statistics every step; the
// returned model carries the frozen statistics. Deterministic given
// (cfg.seed, data). When `dg_mix` is given, every batch draws half of its
// samples from it.
SegModel train(const SegModel& init, const Dataset& data, const TrainConfig& cfg,
               const Dataset* dg_mix = nullptr, TrainLog* log = nullptr);

// Double-precision training network mirroring a SegModel. The forward pass
// caches everything the hand-written backward pass needs. Exposed so the
// gradient checker and tests can drive single steps.
class TrainNet {
 public:
  explicit TrainNet(const SegModel& model);
  ~TrainNet();
  TrainNet(TrainNet&&) noexcept;
  TrainNet& operator=(TrainNet&&) noexcept;

  // Training-mode forward (batch statistics at BN layers); returns posteriors.
  const DTensor& forward(const DTensor& x);
  // Loss for the cached posteriors; fills the logit gradient.
  double loss_and_grad_logits(const ClassMap& labels, const ClassWeights& weights);
  void backward();
  void sgd_step(double lr);
  // Folds the cached batch statistics into the running statistics.
  void track_running_stats(double momentum);

  double forward_loss(const DTensor& x, const ClassMap& labels, const ClassWeights& weights);

  // Hash of the relu activation pattern from the most recent forward pass.
  // Finite-difference probes whose two evaluations disagree here straddled a
  // kink, where a central difference does not estimate the derivative.
  uint64_t relu_signature() const;

  // Flat parameter/gradient view over conv weights+biases and BN gamma/beta,
  // in declaration order (running statistics are not parameters).
  size_t num_params() const;
  double param(size_t i) const;
  void set_param(size_t i, double v);
  double grad(size_t i) const;

  // Running statistics of BN layer `bn_index`.
  std::pair<std::vector<double>, std::vector<double>> running_stats(int bn_index) const;

  // Writes parameters and running statistics back into a model with the same
  // architecture; BN momentum fields are set to `momentum`.
  void export_to(SegModel& model, double momentum) const;

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

// Central finite differences (h = 1e-3) on a double-precision shadow of the
// model against the analytic gradients; returns the max relative error. The
// fragment must stay at or under 1000 parameters.
double check_gradients(const SegModel& fragment, const Tensor& x, const ClassMap& labels,
                       const ClassWeights* weights = nullptr);

}  // namespace cbna
