#pragma once

#include <map>
#include <string>
#include <vector>

#include "updseg/boxreg.hpp"
#include "updseg/checkpoint.hpp"
#include "updseg/data_aug.hpp"
#include "updseg/scanet.hpp"
#include "updseg/updcnn.hpp"

namespace upd {

struct TrainConfig {
  double lr = 0.01;
  double momentum = 0.9;
  int epochs = 1;
  int batch_size = 1;
  double lambda_box = 0.1;
  std::uint64_t seed = 0;
  int S = 320;               // scanet input side, divisible by 32
  double width_scale = 1.0;  // desk-scale multiplier for both branches
  bool augment_train = true;
  AugPolicy aug;
  int boxes_per_image = 12;
  bool allow_random_joint_init = false;  // Joint normally requires pretrained weights

  void validate() const;  // throws ConfigError
};

/// Both network branches and the shared box classifier, with their configs.
struct SystemModel {
  ModelGraph<float> scanet;
  ModelGraph<float> updcnn;
  BoxHead<float> box;
  ScanetConfig scanet_cfg;
  UpdcnnConfig updcnn_cfg;
};

/// Fresh seeded initialization at the config's width scale and input size.
SystemModel build_system(const TrainConfig& cfg);

/// Flattens all parameters under the `scanet.` / `updcnn.` / `box.` prefixes.
Checkpoint to_checkpoint(const SystemModel& model, Phase phase, std::uint32_t epoch,
                         std::uint64_t seed, const std::array<std::uint8_t, 32>& digest);

/// Rebuilds the model shape from the config, then overwrites every parameter
/// from the archive. Unknown or missing names and shape mismatches are errors.
SystemModel system_from_checkpoint(const Checkpoint& ckpt, const TrainConfig& cfg);

/// Pointwise maximum of two identically shaped probability maps.
Tensor<float> fuse(const Tensor<float>& scanet_prob, const Tensor<float>& updcnn_prob);

/// v <- momentum*v + g; p <- p - lr*v. Velocity entries are created at zero.
/// Every gradient name must match a parameter of the same shape.
void sgd_step(std::map<std::string, Tensor<float>>& params,
              const std::map<std::string, Tensor<float>>& grads,
              std::map<std::string, Tensor<float>>& velocity, double lr, double momentum);

struct LossRow {
  Phase phase;
  int epoch = 0;
  int step = 0;
  double seg_loss = 0;
  double box_loss = 0;
  double total = 0;
};

std::string loss_log_csv(const std::vector<LossRow>& rows);

struct TrainResult {
  Checkpoint ckpt;
  std::vector<LossRow> log;
};

/// One phase over the dataset. ScanetOnly trains the scanet branch and the
/// box classifier; UpdcnnOnly trains the updcnn branch with the box weight
/// forced to zero; Joint trains everything against the fused probability and
/// requires `init` unless cfg.allow_random_joint_init is set.
TrainResult train_phase(Phase phase, const std::vector<Sample>& dataset, const TrainConfig& cfg,
                        const Checkpoint* init = nullptr);

struct PredictOut {
  Tensor<float> mask;  // [H,W] binary, original image size
  Tensor<float> prob;  // [S,S] fused probability map
};

/// threshold must lie in (0,1); mask = (prob >= threshold), restored to the
/// input size by nearest neighbor.
PredictOut predict(const SystemModel& model, const Tensor<float>& image, double threshold, int S);

struct ThresholdTable {
  double best = 0;
  std::vector<std::pair<double, double>> rows;  // (threshold, mean Jaccard)
};

/// Grid search over [0.05, 0.95] step 0.05 by default; ties resolve to the
/// lower threshold.
ThresholdTable tune_threshold(const SystemModel& model, const std::vector<Sample>& val,
                              const TrainConfig& cfg,
                              const std::vector<double>* grid = nullptr);

// Binary-mask metrics; shapes must agree. Empty/empty Jaccard and Dice are 1.
double jaccard(const Tensor<float>& pred, const Tensor<float>& gt);
double dice(const Tensor<float>& pred, const Tensor<float>& gt);
double pixel_accuracy(const Tensor<float>& pred, const Tensor<float>& gt);

/// Random soft-ellipse lesions on textured backgrounds, for overfit tests.
std::vector<Sample> make_synthetic_dataset(int count, int size, std::uint64_t seed);

}  // namespace upd
