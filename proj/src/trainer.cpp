#include "updseg/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace upd {

namespace {

// deterministic text form of the knobs that shape the parameter set
std::string config_text(const TrainConfig& cfg) {
  std::ostringstream os;
  os << "lr=" << cfg.lr << ";momentum=" << cfg.momentum << ";epochs=" << cfg.epochs
     << ";batch_size=" << cfg.batch_size << ";lambda_box=" << cfg.lambda_box
     << ";seed=" << cfg.seed << ";S=" << cfg.S << ";width_scale=" << cfg.width_scale
     << ";boxes=" << cfg.boxes_per_image;
  return os.str();
}

Tensor<float> stack_batch(const std::vector<Tensor<float>>& items) {
  const int N = static_cast<int>(items.size());
  std::vector<int> shape = items[0].shape;
  shape.insert(shape.begin(), N);
  Tensor<float> out = Tensor<float>::zeros(shape);
  const std::int64_t stride = items[0].size();
  for (int n = 0; n < N; ++n)
    std::copy(items[static_cast<std::size_t>(n)].data.begin(),
              items[static_cast<std::size_t>(n)].data.end(),
              out.data.begin() + n * stride);
  return out;
}

Tensor<float> mask_of_image(const Tensor<float>& target, int n) {
  // target is [N,1,S,S]; returns image n's [S,S] view
  const int S = target.dim(2);
  Tensor<float> m = Tensor<float>::zeros({S, S});
  const std::int64_t plane = static_cast<std::int64_t>(S) * S;
  std::copy(target.data.begin() + n * plane, target.data.begin() + (n + 1) * plane,
            m.data.begin());
  return m;
}

Tensor<float> nn_resize_mask(const Tensor<float>& mask, int out_h, int out_w) {
  const int H = mask.dim(0), W = mask.dim(1);
  if (H == out_h && W == out_w) return mask;
  Tensor<float> out = Tensor<float>::zeros({out_h, out_w});
  for (int i = 0; i < out_h; ++i) {
    const int si = std::min(H - 1, static_cast<int>((i + 0.5) * H / out_h));
    for (int j = 0; j < out_w; ++j) {
      const int sj = std::min(W - 1, static_cast<int>((j + 0.5) * W / out_w));
      out.at(i, j) = mask.at(si, sj);
    }
  }
  return out;
}

struct Counts {
  std::int64_t inter = 0, uni = 0, a = 0, b = 0, agree = 0, total = 0;
};

Counts mask_counts(const Tensor<float>& pred, const Tensor<float>& gt) {
  require_same_shape(pred, gt, "mask metrics");
  Counts c;
  for (std::size_t i = 0; i < pred.data.size(); ++i) {
    const bool p = pred.data[i] > 0.5f, g = gt.data[i] > 0.5f;
    c.inter += p && g;
    c.uni += p || g;
    c.a += p;
    c.b += g;
    c.agree += p == g;
    ++c.total;
  }
  return c;
}

struct BoundSystem {
  ParamVars<float> scanet, updcnn;
  BoxHeadVars<float> box;
};

BoundSystem bind_system(Tape<float>& tape, const SystemModel& m, Phase phase) {
  const bool train_scanet = phase != Phase::UpdcnnOnly;
  const bool train_updcnn = phase != Phase::ScanetOnly;
  BoundSystem b;
  b.scanet = bind_params(tape, m.scanet, train_scanet);
  b.updcnn = bind_params(tape, m.updcnn, train_updcnn);
  b.box = bind_box_head(tape, m.box, train_scanet);
  return b;
}

// fused probability map [N,1,S,S] from both branches
Var<float> fused_prob(Tape<float>& tape, const SystemModel& m, const BoundSystem& b,
                      const Tensor<float>& scanet_in, const Tensor<float>& updcnn_in,
                      Var<float>* backbone_out) {
  Var<float> xs = tape.leaf(mean_subtract(scanet_in), false);
  ScanetOut<float> so = scanet_forward(tape, m.scanet, b.scanet, xs);
  if (backbone_out) *backbone_out = so.backbone;
  Var<float> prob_s = sigmoid(tape, so.restored);
  Var<float> xu = tape.leaf(updcnn_in, false);
  Var<float> out_u = updcnn_forward(tape, m.updcnn, b.updcnn, xu);
  Var<float> prob_u = sigmoid(tape, slice_channel(tape, out_u, 1));
  return channel_max(tape, concat_channels(tape, prob_s, prob_u));
}

}  // namespace

void TrainConfig::validate() const {
  if (lr <= 0) throw ConfigError("lr must be > 0");
  if (momentum < 0 || momentum >= 1) throw ConfigError("momentum must lie in [0,1)");
  if (epochs < 1) throw ConfigError("epochs must be >= 1");
  if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
  if (lambda_box < 0) throw ConfigError("lambda_box must be >= 0");
  if (S < 32 || S % 32 != 0) throw ConfigError("S must be a positive multiple of 32");
  if (width_scale <= 0) throw ConfigError("width_scale must be > 0");
  if (boxes_per_image < 0) throw ConfigError("boxes_per_image must be >= 0");
}

SystemModel build_system(const TrainConfig& cfg) {
  cfg.validate();
  SystemModel m;
  m.scanet_cfg.width_scale = cfg.width_scale;
  m.scanet_cfg.input_size = cfg.S;
  m.updcnn_cfg.width_scale = cfg.width_scale;
  m.scanet = build_scanet<float>(m.scanet_cfg, cfg.seed);
  m.updcnn = build_updcnn<float>(m.updcnn_cfg, cfg.seed + 1);
  const int backbone_ch = scaled_width(m.scanet_cfg.stage_widths.back(), cfg.width_scale);
  m.box = BoxHead<float>::init(backbone_ch, scaled_width(256, cfg.width_scale), cfg.seed + 2);
  return m;
}

Checkpoint to_checkpoint(const SystemModel& model, Phase phase, std::uint32_t epoch,
                         std::uint64_t seed, const std::array<std::uint8_t, 32>& digest) {
  Checkpoint c;
  c.phase = phase;
  c.epoch = epoch;
  c.seed = seed;
  c.config_digest = digest;
  for (const auto& [name, t] : model.scanet.params) c.tensors["scanet." + name] = t;
  for (const auto& [name, t] : model.updcnn.params) c.tensors["updcnn." + name] = t;
  for (const auto& [name, t] : model.box.named("box")) c.tensors[name] = t;
  return c;
}

SystemModel system_from_checkpoint(const Checkpoint& ckpt, const TrainConfig& cfg) {
  SystemModel m = build_system(cfg);
  Checkpoint expected = to_checkpoint(m, ckpt.phase, 0, 0, {});
  for (const auto& [name, t] : ckpt.tensors)
    if (!expected.tensors.count(name))
      throw LoadError("checkpoint has unknown parameter '" + name + "'");
  auto take = [&](const std::string& name, Tensor<float>& dst) {
    auto it = ckpt.tensors.find(name);
    if (it == ckpt.tensors.end()) throw LoadError("checkpoint is missing parameter '" + name + "'");
    if (it->second.shape != dst.shape)
      throw LoadError("checkpoint parameter '" + name + "' has shape " + it->second.shape_str() +
                      ", expected " + dst.shape_str());
    dst = it->second;
  };
  for (auto& [name, t] : m.scanet.params) take("scanet." + name, t);
  for (auto& [name, t] : m.updcnn.params) take("updcnn." + name, t);
  take("box.conv.weight", m.box.conv_w);
  take("box.conv.bias", m.box.conv_b);
  take("box.fc.weight", m.box.fc_w);
  take("box.fc.bias", m.box.fc_b);
  return m;
}

Tensor<float> fuse(const Tensor<float>& scanet_prob, const Tensor<float>& updcnn_prob) {
  require_same_shape(scanet_prob, updcnn_prob, "fuse");
  Tensor<float> out = scanet_prob;
  for (std::size_t i = 0; i < out.data.size(); ++i)
    out.data[i] = std::max(out.data[i], updcnn_prob.data[i]);
  return out;
}

void sgd_step(std::map<std::string, Tensor<float>>& params,
              const std::map<std::string, Tensor<float>>& grads,
              std::map<std::string, Tensor<float>>& velocity, double lr, double momentum) {
  for (const auto& [name, g] : grads) {
    auto it = params.find(name);
    if (it == params.end()) throw ShapeError("sgd_step: gradient for unknown parameter '" + name + "'");
    Tensor<float>& p = it->second;
    require_same_shape(p, g, "sgd_step");
    Tensor<float>& v = velocity.try_emplace(name, Tensor<float>::zeros(p.shape)).first->second;
    for (std::size_t i = 0; i < p.data.size(); ++i) {
      v.data[i] = static_cast<float>(momentum * v.data[i] + g.data[i]);
      p.data[i] -= static_cast<float>(lr * v.data[i]);
    }
  }
}

std::string loss_log_csv(const std::vector<LossRow>& rows) {
  std::ostringstream os;
  os << "phase,epoch,step,seg_loss,box_loss,total\n";
  os.precision(9);
  for (const LossRow& r : rows)
    os << phase_name(r.phase) << "," << r.epoch << "," << r.step << "," << r.seg_loss << ","
       << r.box_loss << "," << r.total << "\n";
  return os.str();
}

TrainResult train_phase(Phase phase, const std::vector<Sample>& dataset, const TrainConfig& cfg,
                        const Checkpoint* init) {
  cfg.validate();
  if (dataset.empty()) throw ConfigError("train_phase: dataset is empty");
  if (phase == Phase::Joint && !init && !cfg.allow_random_joint_init)
    throw ConfigError(
        "train_phase: the joint phase expects pretrained branch weights; pass an initial "
        "checkpoint or enable the random-init override");

  SystemModel model = init ? system_from_checkpoint(*init, cfg) : build_system(cfg);
  const double lambda = phase == Phase::UpdcnnOnly ? 0.0 : cfg.lambda_box;
  const bool with_boxes = phase != Phase::UpdcnnOnly && cfg.boxes_per_image > 0;

  std::mt19937_64 aux_rng(cfg.seed ^ 0xa5a5a5a5a5a5a5a5ull);  // augmentation + box seeds
  std::map<std::string, Tensor<float>> velocity;
  TrainResult result;

  const int n_samples = static_cast<int>(dataset.size());
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    int step = 0;
    for (int start = 0; start < n_samples; start += cfg.batch_size, ++step) {
      const int nb = std::min(cfg.batch_size, n_samples - start);
      std::vector<Tensor<float>> s_in, u_in, tgt;
      for (int k = 0; k < nb; ++k) {
        const std::uint64_t aug_seed = aux_rng();
        const Sample& raw = dataset[static_cast<std::size_t>(start + k)];
        const Sample s = cfg.augment_train ? augment(raw, cfg.aug, aug_seed) : raw;
        PairedInput p = prepare_pair(s, cfg.S);
        s_in.push_back(std::move(p.scanet_in));
        u_in.push_back(std::move(p.updcnn_in));
        Tensor<float> t = std::move(p.target);
        t.shape = {1, cfg.S, cfg.S};
        tgt.push_back(std::move(t));
      }
      Tensor<float> scanet_in = stack_batch(s_in);
      Tensor<float> updcnn_in = stack_batch(u_in);
      Tensor<float> target = stack_batch(tgt);

      Tape<float> tape;
      BoundSystem bound = bind_system(tape, model, phase);
      Var<float> backbone, seg;

      if (phase == Phase::ScanetOnly) {
        Var<float> xs = tape.leaf(mean_subtract(scanet_in), false);
        ScanetOut<float> so = scanet_forward(tape, model.scanet, bound.scanet, xs);
        backbone = so.backbone;
        seg = bce_loss(tape, sigmoid(tape, so.restored), target);
      } else if (phase == Phase::UpdcnnOnly) {
        Var<float> xu = tape.leaf(updcnn_in, false);
        Var<float> out_u = updcnn_forward(tape, model.updcnn, bound.updcnn, xu);
        seg = bce_loss(tape, sigmoid(tape, slice_channel(tape, out_u, 1)), target);
      } else {
        Var<float> fused = fused_prob(tape, model, bound, scanet_in, updcnn_in, &backbone);
        seg = bce_loss(tape, fused, target);
      }

      Var<float> box_term;
      if (with_boxes && backbone) {
        std::vector<std::vector<Box>> boxes;
        std::vector<std::vector<BoxLabel>> labels;
        for (int k = 0; k < nb; ++k) {
          const std::uint64_t box_seed = aux_rng();
          Tensor<float> m = mask_of_image(target, k);
          std::vector<Box> bs = sample_boxes(box_seed, cfg.S, cfg.S, cfg.boxes_per_image);
          std::vector<BoxLabel> ls;
          for (const Box& b : bs) ls.push_back(label_box(box_target_share(m, b)));
          boxes.push_back(std::move(bs));
          labels.push_back(std::move(ls));
        }
        box_term = box_loss(tape, backbone, bound.box, boxes, labels);
      } else {
        box_term = tape.leaf(Tensor<float>::from({1}, {0.0f}), false);
      }

      Var<float> total = combine_loss(tape, seg, box_term, static_cast<float>(lambda));
      tape.backward(total);

      std::map<std::string, Tensor<float>> flat, grads;
      auto absorb = [&](const std::string& prefix, ModelGraph<float>& g, ParamVars<float>& vars) {
        for (auto& [name, t] : g.params) {
          flat[prefix + name] = t;
          grads[prefix + name] = vars.at(name)->grad;
        }
      };
      if (phase != Phase::UpdcnnOnly) {
        absorb("scanet.", model.scanet, bound.scanet);
        flat["box.conv.weight"] = model.box.conv_w;
        flat["box.conv.bias"] = model.box.conv_b;
        flat["box.fc.weight"] = model.box.fc_w;
        flat["box.fc.bias"] = model.box.fc_b;
        grads["box.conv.weight"] = bound.box.conv_w->grad;
        grads["box.conv.bias"] = bound.box.conv_b->grad;
        grads["box.fc.weight"] = bound.box.fc_w->grad;
        grads["box.fc.bias"] = bound.box.fc_b->grad;
      }
      if (phase != Phase::ScanetOnly) absorb("updcnn.", model.updcnn, bound.updcnn);

      sgd_step(flat, grads, velocity, cfg.lr, cfg.momentum);

      auto restore = [&](const std::string& prefix, ModelGraph<float>& g) {
        for (auto& [name, t] : g.params) t = flat.at(prefix + name);
      };
      if (phase != Phase::UpdcnnOnly) {
        restore("scanet.", model.scanet);
        model.box.conv_w = flat.at("box.conv.weight");
        model.box.conv_b = flat.at("box.conv.bias");
        model.box.fc_w = flat.at("box.fc.weight");
        model.box.fc_b = flat.at("box.fc.bias");
      }
      if (phase != Phase::ScanetOnly) restore("updcnn.", model.updcnn);

      LossRow row;
      row.phase = phase;
      row.epoch = epoch;
      row.step = step;
      row.seg_loss = seg->value.data[0];
      row.box_loss = box_term->value.data[0];
      row.total = total->value.data[0];
      result.log.push_back(row);
    }
  }

  result.ckpt = to_checkpoint(model, phase, static_cast<std::uint32_t>(cfg.epochs), cfg.seed,
                              config_digest(config_text(cfg)));
  return result;
}

PredictOut predict(const SystemModel& model, const Tensor<float>& image, double threshold, int S) {
  if (!(threshold > 0.0 && threshold < 1.0))
    throw ConfigError("predict: threshold must lie strictly between 0 and 1");
  if (image.ndim() != 3 || image.dim(0) != 3) throw ShapeError("predict: image must be [3,H,W]");
  const int H = image.dim(1), W = image.dim(2);

  Sample s;
  s.image = image;
  s.mask = Tensor<float>::zeros({H, W});
  PairedInput p = prepare_pair(s, S);
  Tensor<float> scanet_in = p.scanet_in;
  scanet_in.shape = {1, 3, S, S};
  Tensor<float> updcnn_in = p.updcnn_in;
  updcnn_in.shape = {1, 3, S / 8, S / 8};

  Tape<float> tape;
  BoundSystem bound;
  bound.scanet = bind_params(tape, model.scanet, false);
  bound.updcnn = bind_params(tape, model.updcnn, false);
  bound.box = bind_box_head(tape, model.box, false);
  Var<float> fused = fused_prob(tape, model, bound, scanet_in, updcnn_in, nullptr);

  PredictOut out;
  out.prob = Tensor<float>::zeros({S, S});
  std::copy(fused->value.data.begin(), fused->value.data.end(), out.prob.data.begin());
  Tensor<float> mask_s = Tensor<float>::zeros({S, S});
  for (std::size_t i = 0; i < mask_s.data.size(); ++i)
    mask_s.data[i] = out.prob.data[i] >= static_cast<float>(threshold) ? 1.0f : 0.0f;
  out.mask = nn_resize_mask(mask_s, H, W);
  return out;
}

ThresholdTable tune_threshold(const SystemModel& model, const std::vector<Sample>& val,
                              const TrainConfig& cfg, const std::vector<double>* grid) {
  if (val.empty()) throw ConfigError("tune_threshold: validation set is empty");
  std::vector<double> g;
  if (grid) {
    g = *grid;
  } else {
    for (int i = 1; i <= 19; ++i) g.push_back(i * 0.05);
  }
  for (double t : g)
    if (!(t > 0.0 && t < 1.0)) throw ConfigError("tune_threshold: grid values must lie in (0,1)");

  // one forward per image, thresholds reuse the probability map
  std::vector<Tensor<float>> probs, gts;
  for (const Sample& s : val) {
    PredictOut po = predict(model, s.image, 0.5, cfg.S);
    probs.push_back(std::move(po.prob));
    PairedInput p = prepare_pair(s, cfg.S);
    gts.push_back(std::move(p.target));
  }

  ThresholdTable table;
  double best_score = -1.0;
  for (double t : g) {
    double sum = 0.0;
    for (std::size_t i = 0; i < probs.size(); ++i) {
      Tensor<float> mask = probs[i];
      for (float& v : mask.data) v = v >= static_cast<float>(t) ? 1.0f : 0.0f;
      sum += jaccard(mask, gts[i]);
    }
    const double mean = sum / static_cast<double>(probs.size());
    table.rows.emplace_back(t, mean);
    if (mean > best_score) {  // strict: ties keep the lower threshold
      best_score = mean;
      table.best = t;
    }
  }
  return table;
}

double jaccard(const Tensor<float>& pred, const Tensor<float>& gt) {
  const Counts c = mask_counts(pred, gt);
  if (c.uni == 0) return 1.0;
  return static_cast<double>(c.inter) / static_cast<double>(c.uni);
}

double dice(const Tensor<float>& pred, const Tensor<float>& gt) {
  const Counts c = mask_counts(pred, gt);
  if (c.a + c.b == 0) return 1.0;
  return 2.0 * static_cast<double>(c.inter) / static_cast<double>(c.a + c.b);
}

double pixel_accuracy(const Tensor<float>& pred, const Tensor<float>& gt) {
  const Counts c = mask_counts(pred, gt);
  return static_cast<double>(c.agree) / static_cast<double>(c.total);
}

}  // namespace upd
