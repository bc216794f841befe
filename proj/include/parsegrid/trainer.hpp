#pragma once

#include <string>
#include <vector>

#include "parsegrid/data.hpp"
#include "parsegrid/model.hpp"

namespace pg {

struct TrainConfig {
  double base_lr = 0.002;
  double lr_power = 0.9;
  double momentum = 0.9;
  double weight_decay = 5e-4;
  i64 batch_size = 16;
  i64 epochs = 120;
  u64 seed = 1;
  std::int32_t ignore_value = 255;
  // crop_h/crop_w of 0 mean "use the model's configured input size".
  data::AugmentConfig aug{0.5, 1.5, 30.0, 0.5, 0, 0};
  i64 checkpoint_every = 0;  // epochs between snapshots; 0 = final only
  std::string out_dir;       // JSONL log + checkpoints; empty = in-memory only
  bool log_stderr = false;   // one progress line per epoch

  // Throws ConfigError listing every violated constraint.
  void validate() const;
};

// base_lr * (1 - iter/max_iter)^power, exact at both endpoints. Iterations
// past max_iter clamp to 0 with a warning on stderr.
double poly_lr(i64 iter, i64 max_iter, double base_lr, double power);

// One velocity slot per parameter, in registry order, zero-initialized.
std::vector<Tensor<float>> make_velocity(const Registry<float>& reg);

// v <- momentum*v + grad + weight_decay*param (decay only where the registry
// entry opts in), then param <- param - lr*v. Parameters without an
// accumulated gradient are an error naming the parameter.
void sgd_step(Registry<float>& reg, std::vector<Tensor<float>>& velocity,
              double lr, double momentum, double weight_decay);

struct IterRow {
  i64 iter = 0, epoch = 0;
  double lr = 0, loss = 0;
};
struct EpochRow {
  i64 epoch = 0;
  double mean_loss = 0;
  double val_miou = -1;  // -1 when there is no validation split
};
struct TrainResult {
  std::vector<IterRow> iters;
  std::vector<EpochRow> epochs;
  i64 total_iters = 0;
  std::string final_checkpoint;  // empty unless out_dir was set
};

// Momentum-SGD training with per-iteration poly LR decay over
// epochs * ceil(|train_set| / batch_size) total steps. Each sample's
// augmentation RNG is seeded from (seed, epoch, dataset index), so results
// are bitwise independent of batch-assembly parallelism. A non-finite loss
// aborts with the offending batch's indices and seeds.
TrainResult train(Model<float>& model, const TrainConfig& cfg,
                  const std::vector<data::SegSample>& train_set,
                  const std::vector<data::SegSample>& val_set,
                  const data::ClassTable& classes);

// ---- checkpoints ----
// Binary snapshot: magic "CDLK", format version, model-config fingerprint,
// then one CRC-guarded record per tensor: all parameters, BN running stats,
// optional momentum buffers ("momentum.<param>") and the iteration counter
// ("meta.iter"). Loading verifies magic, version, fingerprint and per-record
// CRC32 and fails on missing, mismatched or unknown records.

struct CheckpointExtra {
  std::vector<Tensor<float>> momentum;  // registry order when present
  i64 iter = 0;
  bool has_momentum = false;
};

void save_checkpoint(const std::string& path, const Model<float>& model,
                     const std::vector<Tensor<float>>* momentum = nullptr,
                     i64 iter = 0);
Model<float> load_checkpoint(const std::string& path, const ModelConfig& cfg,
                             CheckpointExtra* extra = nullptr);

}  // namespace pg
