// lesionseg: train, evaluate and run the two-branch lesion segmenter.
#include <CLI11.hpp>
#include <json.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>

#include "updseg/netpbm.hpp"
#include "updseg/trainer.hpp"

using json = nlohmann::ordered_json;
namespace fs = std::filesystem;
using namespace upd;

namespace {

struct CliConfig {
  TrainConfig train;
  std::string data_dir;
  std::string out_dir = ".";
};

json default_config_json(const CliConfig& c) {
  json j;
  j["lr"] = c.train.lr;
  j["momentum"] = c.train.momentum;
  j["epochs"] = c.train.epochs;
  j["batch_size"] = c.train.batch_size;
  j["lambda_box"] = c.train.lambda_box;
  j["seed"] = c.train.seed;
  j["S"] = c.train.S;
  j["width_scale"] = c.train.width_scale;
  j["augment_train"] = c.train.augment_train;
  j["boxes_per_image"] = c.train.boxes_per_image;
  j["allow_random_joint_init"] = c.train.allow_random_joint_init;
  j["aug"] = {{"p_hflip", c.train.aug.p_hflip},
              {"p_vflip", c.train.aug.p_vflip},
              {"brightness_lo", c.train.aug.brightness_lo},
              {"brightness_hi", c.train.aug.brightness_hi},
              {"contrast_lo", c.train.aug.contrast_lo},
              {"contrast_hi", c.train.aug.contrast_hi},
              {"noise_sigma_lo", c.train.aug.noise_sigma_lo},
              {"noise_sigma_hi", c.train.aug.noise_sigma_hi},
              {"crop_scale_lo", c.train.aug.crop_scale_lo},
              {"crop_scale_hi", c.train.aug.crop_scale_hi}};
  j["data_dir"] = c.data_dir;
  j["out_dir"] = c.out_dir;
  return j;
}

// strict merge: every key in `user` must exist in `base` (recursively)
void merge_strict(json& base, const json& user, const std::string& prefix) {
  for (const auto& [key, value] : user.items()) {
    if (!base.contains(key)) throw ConfigError("config: unknown key '" + prefix + key + "'");
    if (base[key].is_object()) {
      if (!value.is_object())
        throw ConfigError("config: '" + prefix + key + "' must be an object");
      merge_strict(base[key], value, prefix + key + ".");
    } else {
      base[key] = value;
    }
  }
}

CliConfig config_from_json(const json& j) {
  CliConfig c;
  c.train.lr = j.at("lr");
  c.train.momentum = j.at("momentum");
  c.train.epochs = j.at("epochs");
  c.train.batch_size = j.at("batch_size");
  c.train.lambda_box = j.at("lambda_box");
  c.train.seed = j.at("seed");
  c.train.S = j.at("S");
  c.train.width_scale = j.at("width_scale");
  c.train.augment_train = j.at("augment_train");
  c.train.boxes_per_image = j.at("boxes_per_image");
  c.train.allow_random_joint_init = j.at("allow_random_joint_init");
  const json& a = j.at("aug");
  c.train.aug.p_hflip = a.at("p_hflip");
  c.train.aug.p_vflip = a.at("p_vflip");
  c.train.aug.brightness_lo = a.at("brightness_lo");
  c.train.aug.brightness_hi = a.at("brightness_hi");
  c.train.aug.contrast_lo = a.at("contrast_lo");
  c.train.aug.contrast_hi = a.at("contrast_hi");
  c.train.aug.noise_sigma_lo = a.at("noise_sigma_lo");
  c.train.aug.noise_sigma_hi = a.at("noise_sigma_hi");
  c.train.aug.crop_scale_lo = a.at("crop_scale_lo");
  c.train.aug.crop_scale_hi = a.at("crop_scale_hi");
  c.data_dir = j.at("data_dir");
  c.out_dir = j.at("out_dir");
  return c;
}

struct CommonFlags {
  std::string config_path;
  std::string init_path;
  std::string out_dir;
  double threshold = 0.5;
  bool threshold_set = false;
  std::int64_t seed = -1;
  bool seed_set = false;
};

CliConfig resolve_config(const CommonFlags& f) {
  json j = default_config_json(CliConfig{});
  if (!f.config_path.empty()) {
    std::ifstream in(f.config_path);
    if (!in) throw IoError("cannot open config '" + f.config_path + "'");
    json user;
    try {
      user = json::parse(in);
    } catch (const json::parse_error& e) {
      throw ConfigError(std::string("config: ") + e.what());
    }
    merge_strict(j, user, "");
  }
  CliConfig c = config_from_json(j);
  if (f.seed_set) c.train.seed = static_cast<std::uint64_t>(f.seed);
  if (!f.out_dir.empty()) c.out_dir = f.out_dir;
  // print the resolved config so logged runs are reproducible from output
  json resolved = default_config_json(c);
  std::cout << "resolved config: " << resolved.dump() << "\n";
  return c;
}

std::vector<Sample> load_dataset(const CliConfig& c) {
  if (c.data_dir.empty()) throw ConfigError("config: data_dir is required for this command");
  ScanResult scan = dataset_scan(c.data_dir);
  for (const std::string& w : scan.warnings) std::cerr << "warning: " << w << "\n";
  if (scan.ids.empty()) throw IoError("no usable image/mask pairs under '" + c.data_dir + "'");
  std::vector<Sample> samples;
  for (const std::string& id : scan.ids) samples.push_back(load_sample(c.data_dir, id));
  return samples;
}

void write_train_outputs(const CliConfig& c, const TrainResult& r, Phase phase) {
  fs::create_directories(c.out_dir);
  const std::string stem = phase_name(phase);
  const fs::path ckpt_path = fs::path(c.out_dir) / (stem + ".ckpt");
  save_checkpoint(r.ckpt, ckpt_path.string());
  const fs::path log_path = fs::path(c.out_dir) / (stem + "_loss.csv");
  std::ofstream log(log_path);
  log << loss_log_csv(r.log);
  std::cout << "wrote " << ckpt_path.string() << " and " << log_path.string() << "\n";
  if (!r.log.empty())
    std::cout << "final loss: total " << r.log.back().total << " (seg " << r.log.back().seg_loss
              << ", box " << r.log.back().box_loss << ")\n";
}

int run_train(Phase phase, const CommonFlags& f) {
  CliConfig c = resolve_config(f);
  if (phase == Phase::Joint && f.init_path.empty() && !c.train.allow_random_joint_init) {
    std::cerr << "error: joint training uses the separate phases' weights as pre-training "
                 "values; pass --init <ckpt> or set allow_random_joint_init\n";
    return 1;
  }
  std::vector<Sample> data = load_dataset(c);
  TrainResult r;
  if (!f.init_path.empty()) {
    Checkpoint init = load_checkpoint(f.init_path);
    r = train_phase(phase, data, c.train, &init);
  } else {
    r = train_phase(phase, data, c.train);
  }
  write_train_outputs(c, r, phase);
  return 0;
}

int run_predict(const CommonFlags& f) {
  if (f.threshold_set && !(f.threshold > 0.0 && f.threshold < 1.0)) {
    std::cerr << "error: --threshold must lie strictly between 0 and 1\n";
    return 1;
  }
  CliConfig c = resolve_config(f);
  if (f.init_path.empty()) {
    std::cerr << "error: predict requires --init <ckpt>\n";
    return 1;
  }
  SystemModel model = system_from_checkpoint(load_checkpoint(f.init_path), c.train);
  if (c.data_dir.empty()) throw ConfigError("config: data_dir is required for predict");
  ScanResult scan = dataset_scan(c.data_dir);
  fs::create_directories(c.out_dir);
  for (const std::string& id : scan.ids) {
    Sample s = load_sample(c.data_dir, id);
    PredictOut po = predict(model, s.image, f.threshold, c.train.S);
    save_pgm((fs::path(c.out_dir) / (id + "_mask.pgm")).string(), po.mask);
    save_pgm((fs::path(c.out_dir) / (id + "_prob.pgm")).string(), po.prob);
    std::cout << id << ": jaccard " << jaccard(po.mask, s.mask) << "\n";
  }
  return 0;
}

int run_eval(const CommonFlags& f) {
  CliConfig c = resolve_config(f);
  if (f.init_path.empty()) {
    std::cerr << "error: eval requires --init <ckpt>\n";
    return 1;
  }
  SystemModel model = system_from_checkpoint(load_checkpoint(f.init_path), c.train);
  std::vector<Sample> data = load_dataset(c);
  ThresholdTable table = tune_threshold(model, data, c.train);
  fs::create_directories(c.out_dir);
  const fs::path csv_path = fs::path(c.out_dir) / "thresholds.csv";
  std::ofstream csv(csv_path);
  csv << "threshold,mean_jaccard\n";
  csv.precision(9);
  for (const auto& [t, score] : table.rows) csv << t << "," << score << "\n";
  std::cout << "wrote " << csv_path.string() << "\n";
  std::cout << "tuned threshold: " << table.best << "\n";
  return 0;
}

int run_augment(const CommonFlags& f) {
  CliConfig c = resolve_config(f);
  std::vector<Sample> data = load_dataset(c);
  fs::create_directories(c.out_dir);
  std::mt19937_64 rng(c.train.seed);
  for (const Sample& s : data) {
    Sample a = augment(s, c.train.aug, rng());
    save_ppm((fs::path(c.out_dir) / (s.id + "_aug.ppm")).string(), a.image);
    save_pgm((fs::path(c.out_dir) / (s.id + "_aug_mask.pgm")).string(), a.mask);
  }
  std::cout << "wrote " << data.size() << " augmented previews to " << c.out_dir << "\n";
  return 0;
}

// Finite-difference self-test over every differentiable building block.
int run_gradcheck(const CommonFlags& f) {
  resolve_config(f);
  std::mt19937_64 rng(12345);
  auto randt = [&](std::vector<int> shape) {
    Tensor<double> t = Tensor<double>::zeros(std::move(shape));
    std::normal_distribution<double> d(0.0, 1.0);
    for (auto& v : t.data) v = d(rng);
    return t;
  };
  auto prob_target = [&](std::vector<int> shape) {
    Tensor<double> t = Tensor<double>::zeros(std::move(shape));
    for (auto& v : t.data) v = static_cast<double>(rng() % 2);
    return t;
  };

  double worst = 0.0;
  auto suite = [&](const char* name, const GradCheckBuilder& builder,
                   std::vector<Tensor<double>> inputs) {
    const double err = grad_check(builder, std::move(inputs));
    std::cout << "gradcheck " << name << ": max rel err " << err << "\n";
    worst = std::max(worst, err);
  };

  Tensor<double> target = prob_target({1, 2, 6, 6});
  suite("conv2d+relu+bce",
        [target](Tape<double>& t, const std::vector<Var<double>>& v) {
          auto y = relu(t, conv2d(t, v[0], v[1], v[2], PadMode::Same, 2));
          return bce_loss(t, sigmoid(t, y), target);
        },
        {randt({1, 3, 6, 6}), randt({2, 3, 3, 3}), randt({2})});

  suite("transposed_conv2d",
        [](Tape<double>& t, const std::vector<Var<double>>& v) {
          return mean_all(t, transposed_conv2d(t, v[0], v[1], v[2]));
        },
        {randt({1, 2, 4, 4}), randt({2, 3, 3, 3}), randt({3})});

  suite("fusion (concat + channel_max)",
        [](Tape<double>& t, const std::vector<Var<double>>& v) {
          auto fused = channel_max(t, concat_channels(t, sigmoid(t, v[0]), sigmoid(t, v[1])));
          return mean_all(t, fused);
        },
        {randt({1, 1, 5, 5}), randt({1, 1, 5, 5})});

  suite("max_downsample2 + bilinear_upsample",
        [](Tape<double>& t, const std::vector<Var<double>>& v) {
          return mean_all(t, bilinear_upsample(t, max_downsample2(t, v[0]), 2));
        },
        {randt({1, 2, 6, 6})});

  suite("box head (crop + conv + global_avg + affine)",
        [](Tape<double>& t, const std::vector<Var<double>>& v) {
          auto region = crop_spatial(t, v[0], 1, 1, 3, 3);
          auto feat = relu(t, conv2d(t, region, v[1], v[2], PadMode::Same, 1));
          auto logit = affine_logit(t, global_avg(t, feat), v[3], v[4]);
          return mean_all(t, sigmoid(t, logit));
        },
        {randt({1, 2, 5, 5}), randt({4, 2, 3, 3}), randt({4}), randt({4}), randt({1})});

  std::cout << "gradcheck overall max rel err: " << worst << "\n";
  if (worst >= 1e-4) {
    std::cerr << "error: gradient self-test failed (max rel err " << worst << ")\n";
    return 3;
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"two-branch skin lesion segmentation pipeline"};
  app.require_subcommand(1);

  CommonFlags f;
  auto add_common = [&](CLI::App* cmd, bool with_init, bool with_threshold) {
    cmd->add_option("--config", f.config_path, "JSON config file");
    cmd->add_option("--out", f.out_dir, "output directory (overrides config)");
    cmd->add_option("--seed", f.seed, "RNG seed (overrides config)")
        ->each([&](const std::string&) { f.seed_set = true; });
    if (with_init) cmd->add_option("--init", f.init_path, "initial checkpoint");
    if (with_threshold)
      cmd->add_option("--threshold", f.threshold, "probability cut in (0,1)")
          ->each([&](const std::string&) { f.threshold_set = true; });
  };

  CLI::App* ts = app.add_subcommand("train-scanet", "train the attention branch");
  CLI::App* tu = app.add_subcommand("train-updcnn", "train the dilated-deconvolution branch");
  CLI::App* tj = app.add_subcommand("train-joint", "joint training from pretrained branches");
  CLI::App* pr = app.add_subcommand("predict", "write masks and probability maps");
  CLI::App* ev = app.add_subcommand("eval", "tune the threshold and report Jaccard");
  CLI::App* au = app.add_subcommand("augment", "write augmented previews");
  CLI::App* gc = app.add_subcommand("gradcheck", "finite-difference self-test");
  add_common(ts, true, false);
  add_common(tu, true, false);
  add_common(tj, true, false);
  add_common(pr, true, true);
  add_common(ev, true, false);
  add_common(au, false, false);
  add_common(gc, false, false);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 1;
  }

  try {
    if (ts->parsed()) return run_train(Phase::ScanetOnly, f);
    if (tu->parsed()) return run_train(Phase::UpdcnnOnly, f);
    if (tj->parsed()) return run_train(Phase::Joint, f);
    if (pr->parsed()) return run_predict(f);
    if (ev->parsed()) return run_eval(f);
    if (au->parsed()) return run_augment(f);
    if (gc->parsed()) return run_gradcheck(f);
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const GraphError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {  // IO, parse, load, shape failures
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 1;
}
