#pragma once

// Minibatch Adam training on the simple DDPM loss. Used for pre-training and
// for the retain-set fine-tuning baseline.

#include <algorithm>
#include <cstdint>
#include <cmath>
#include <functional>
#include <numbers>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "vdu/checkpoints.hpp"
#include "vdu/denoiser.hpp"
#include "vdu/diffusion.hpp"
#include "vdu/optim.hpp"
#include "vdu/rng.hpp"
#include "vdu/schedule.hpp"

namespace vdu {

struct TrainConfig {
  int epochs = 200;
  int batch_size = 128;
  double lr = 1e-3;
  std::optional<double> lr_final;  // cosine decay from lr to lr_final over all steps when set
  std::uint64_t seed = 0;  // shuffling and noise draws
  std::optional<double> grad_clip;
  std::string dataset_tag;
};

/// Rows of x picked by idx[begin, end).
inline Eigen::MatrixXd gather_rows(const Eigen::MatrixXd& x, const std::vector<Eigen::Index>& idx, std::size_t begin,
                                   std::size_t end) {
  Eigen::MatrixXd out(static_cast<Eigen::Index>(end - begin), x.cols());
  for (std::size_t k = begin; k < end; ++k) out.row(static_cast<Eigen::Index>(k - begin)) = x.row(idx[k]);
  return out;
}

/// Per epoch: shuffle row order, then one Adam step per minibatch (the last one may be short).
/// Satisfies TrainingDriver.
class DdpmTrainer {
 public:
  DdpmTrainer(NoiseSchedule schedule, DenoiserArch arch, ParamVector init, Eigen::MatrixXd data, TrainConfig cfg)
      : schedule_(std::move(schedule)),
        arch_(std::move(arch)),
        params_(std::move(init)),
        data_(std::move(data)),
        cfg_(std::move(cfg)) {
    check_params(arch_, params_);
    if (data_.rows() == 0) throw ConfigError("training data is empty");
    if (data_.cols() != arch_.input_dim) throw ConfigError("training data width does not match the architecture");
    if (cfg_.batch_size < 1) throw ConfigError("batch size must be >= 1");
    if (cfg_.epochs < 0) throw ConfigError("epochs must be >= 0");
  }

  int total_epochs() const { return cfg_.epochs; }
  const ParamVector& params() const { return params_; }

  /// Mean minibatch loss per epoch, filled by run().
  const std::vector<double>& epoch_losses() const { return epoch_losses_; }

  void run(const std::function<void(const Checkpoint&)>& on_epoch = {}) {
    Rng rng(cfg_.seed);
    Adam opt(params_.size(), AdamConfig{cfg_.lr});
    std::vector<Eigen::Index> order(static_cast<std::size_t>(data_.rows()));
    const auto bs = static_cast<std::size_t>(cfg_.batch_size);
    const long steps_per_epoch = static_cast<long>((order.size() + bs - 1) / bs);
    const double total_steps = static_cast<double>(steps_per_epoch) * cfg_.epochs;
    long step = 0;
    for (int epoch = 1; epoch <= cfg_.epochs; ++epoch) {
      std::iota(order.begin(), order.end(), Eigen::Index{0});
      std::shuffle(order.begin(), order.end(), rng);
      double loss_sum = 0.0;
      int batches = 0;
      for (std::size_t b = 0; b < order.size(); b += bs) {
        Eigen::MatrixXd batch = gather_rows(data_, order, b, std::min(order.size(), b + bs));
        auto lg = ddpm_train_loss_and_grad(schedule_, arch_, params_, batch, rng);
        if (!std::isfinite(lg.loss) || !lg.grad.values.allFinite())
          throw NumericalError("non-finite DDPM loss or gradient at epoch " + std::to_string(epoch));
        clip_grad_norm(lg.grad, cfg_.grad_clip);
        if (cfg_.lr_final) {
          const double progress = static_cast<double>(step) / total_steps;
          opt.set_lr(*cfg_.lr_final + 0.5 * (cfg_.lr - *cfg_.lr_final) * (1.0 + std::cos(std::numbers::pi * progress)));
        }
        ++step;
        opt.step(params_, lg.grad);
        loss_sum += lg.loss;
        ++batches;
      }
      epoch_losses_.push_back(loss_sum / batches);
      if (on_epoch) on_epoch(Checkpoint{arch_, schedule_.params(), CheckpointMeta{cfg_.seed, epoch, cfg_.dataset_tag}, params_});
    }
  }

 private:
  NoiseSchedule schedule_;
  DenoiserArch arch_;
  ParamVector params_;
  Eigen::MatrixXd data_;
  TrainConfig cfg_;
  std::vector<double> epoch_losses_;
};

}  // namespace vdu
