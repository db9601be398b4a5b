#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <random>
#include <unistd.h>

#include "updseg/netpbm.hpp"
#include "updseg/trainer.hpp"

using namespace upd;
namespace fs = std::filesystem;

namespace {

fs::path tmpdir(const char* tag) {
  fs::path p = fs::temp_directory_path() / (std::string("updseg_tr_") + tag + "_" +
                                            std::to_string(::getpid()));
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return std::string((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
}

TrainConfig tiny_config(int S, int boxes) {
  TrainConfig cfg;
  cfg.S = S;
  cfg.width_scale = 1.0 / 16.0;
  cfg.boxes_per_image = boxes;
  cfg.augment_train = false;
  cfg.epochs = 1;
  cfg.seed = 42;
  return cfg;
}

Tensor<float> random_prob(std::vector<int> shape, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  Tensor<float> t = Tensor<float>::zeros(std::move(shape));
  for (float& v : t.data) v = static_cast<float>((rng() % 1000) + 0.5) / 1001.0f;
  return t;
}

}  // namespace

TEST_CASE("fuse keeps the pointwise maximum") {
  Tensor<float> a = Tensor<float>::from({1, 1, 1, 2}, {0.3f, 0.9f});
  Tensor<float> b = Tensor<float>::from({1, 1, 1, 2}, {0.7f, 0.2f});
  Tensor<float> f = fuse(a, b);
  CHECK(f.data == std::vector<float>{0.7f, 0.9f});

  CHECK(fuse(a, a).data == a.data);

  Tensor<float> ra = random_prob({2, 1, 4, 4}, 1), rb = random_prob({2, 1, 4, 4}, 2);
  Tensor<float> rf = fuse(ra, rb);
  for (std::size_t i = 0; i < rf.data.size(); ++i) {
    CHECK(rf.data[i] >= ra.data[i]);
    CHECK(rf.data[i] >= rb.data[i]);
    CHECK((rf.data[i] == ra.data[i] || rf.data[i] == rb.data[i]));
  }

  Tensor<float> wrong = Tensor<float>::zeros({1, 1, 2, 2});
  CHECK_THROWS_AS(fuse(a, wrong), ShapeError);
}

TEST_CASE("sgd_step matches the momentum recurrence by hand") {
  std::map<std::string, Tensor<float>> params{{"p", Tensor<float>::from({1}, {1.0f})}};
  std::map<std::string, Tensor<float>> vel;

  SUBCASE("plain sgd, momentum 0") {
    sgd_step(params, {{"p", Tensor<float>::from({1}, {2.0f})}}, vel, 0.1, 0.0);
    CHECK(params["p"].data[0] == doctest::Approx(0.8));
  }
  SUBCASE("zero gradient leaves parameters untouched") {
    sgd_step(params, {{"p", Tensor<float>::from({1}, {0.0f})}}, vel, 0.1, 0.9);
    CHECK(params["p"].data[0] == 1.0f);
  }
  SUBCASE("two steps, momentum 0.9, lr 1, g = 1: total delta 2.9") {
    std::map<std::string, Tensor<float>> g{{"p", Tensor<float>::from({1}, {1.0f})}};
    sgd_step(params, g, vel, 1.0, 0.9);
    sgd_step(params, g, vel, 1.0, 0.9);
    CHECK(params["p"].data[0] == doctest::Approx(1.0 - 2.9));
  }
  SUBCASE("name and shape mismatches are rejected") {
    CHECK_THROWS_AS(sgd_step(params, {{"q", Tensor<float>::from({1}, {1.0f})}}, vel, 0.1, 0.0),
                    ShapeError);
    CHECK_THROWS_AS(sgd_step(params, {{"p", Tensor<float>::zeros({2})}}, vel, 0.1, 0.0),
                    ShapeError);
  }
}

TEST_CASE("checkpoint save/load/save is byte identical and value exact") {
  const fs::path dir = tmpdir("ckpt");
  SystemModel m = build_system(tiny_config(32, 0));
  Checkpoint c = to_checkpoint(m, Phase::UpdcnnOnly, 7, 0x1234'5678'9abc'def0ull,
                               config_digest("some config"));
  const fs::path p1 = dir / "a.ckpt", p2 = dir / "b.ckpt";
  save_checkpoint(c, p1.string());
  Checkpoint back = load_checkpoint(p1.string());
  CHECK(back.phase == Phase::UpdcnnOnly);
  CHECK(back.epoch == 7);
  CHECK(back.seed == 0x1234'5678'9abc'def0ull);
  CHECK(back.config_digest == c.config_digest);
  REQUIRE(back.tensors.size() == c.tensors.size());
  for (const auto& [name, t] : c.tensors) {
    REQUIRE(back.tensors.count(name));
    CHECK(back.tensors[name].shape == t.shape);
    CHECK(back.tensors[name].data == t.data);
  }
  save_checkpoint(back, p2.string());
  CHECK(slurp(p1) == slurp(p2));
  fs::remove_all(dir);
}

TEST_CASE("checkpoint corruption is detected and named") {
  const fs::path dir = tmpdir("corrupt");
  SystemModel m = build_system(tiny_config(32, 0));
  const fs::path p = dir / "c.ckpt";
  save_checkpoint(to_checkpoint(m, Phase::ScanetOnly, 0, 1, {}), p.string());
  const std::string good = slurp(p);

  auto write_variant = [&](std::string bytes) {
    std::ofstream out(p, std::ios::binary);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  };

  std::string bad_magic = good;
  bad_magic[0] = 'X';
  write_variant(bad_magic);
  CHECK_THROWS_WITH_AS(load_checkpoint(p.string()), doctest::Contains("magic"), LoadError);

  write_variant(good.substr(0, good.size() / 2));
  CHECK_THROWS_AS(load_checkpoint(p.string()), LoadError);

  std::string bad_payload = good;
  bad_payload[good.size() / 2] ^= 0x40;
  write_variant(bad_payload);
  CHECK_THROWS_WITH_AS(load_checkpoint(p.string()), doctest::Contains("crc"), LoadError);

  write_variant(good);
  CHECK_NOTHROW(load_checkpoint(p.string()));

  CHECK_THROWS_AS(load_checkpoint((dir / "missing.ckpt").string()), IoError);
  fs::remove_all(dir);
}

TEST_CASE("predict after a checkpoint round trip equals predict before") {
  const fs::path dir = tmpdir("fwdeq");
  TrainConfig cfg = tiny_config(64, 0);
  SystemModel m = build_system(cfg);
  Tensor<float> image = random_prob({3, 40, 48}, 9);
  PredictOut before = predict(m, image, 0.5, cfg.S);

  const fs::path p = dir / "m.ckpt";
  save_checkpoint(to_checkpoint(m, Phase::Joint, 0, cfg.seed, {}), p.string());
  SystemModel loaded = system_from_checkpoint(load_checkpoint(p.string()), cfg);
  PredictOut after = predict(loaded, image, 0.5, cfg.S);
  CHECK(before.prob.data == after.prob.data);
  CHECK(before.mask.data == after.mask.data);
  fs::remove_all(dir);
}

TEST_CASE("incompatible init checkpoints are rejected") {
  TrainConfig small = tiny_config(32, 0);
  Checkpoint c = to_checkpoint(build_system(small), Phase::Joint, 0, 0, {});

  TrainConfig wider = small;
  wider.width_scale = 1.0 / 8.0;
  CHECK_THROWS_WITH_AS(system_from_checkpoint(c, wider), doctest::Contains("shape"), LoadError);

  Checkpoint extra = c;
  extra.tensors["scanet.backbone.conv99.weight"] = Tensor<float>::zeros({1});
  CHECK_THROWS_WITH_AS(system_from_checkpoint(extra, small), doctest::Contains("unknown"),
                       LoadError);

  Checkpoint missing = c;
  missing.tensors.erase("updcnn.conv1.weight");
  CHECK_THROWS_WITH_AS(system_from_checkpoint(missing, small), doctest::Contains("missing"),
                       LoadError);
}

TEST_CASE("mask metrics match set counts") {
  // |A| = 3, |B| = 5, |A ∩ B| = 2, |A ∪ B| = 6
  Tensor<float> a = Tensor<float>::from({2, 4}, {1, 1, 1, 0, 0, 0, 0, 0});
  Tensor<float> b = Tensor<float>::from({2, 4}, {1, 1, 0, 1, 1, 1, 0, 0});
  CHECK(jaccard(a, b) == doctest::Approx(1.0 / 3.0));
  CHECK(dice(a, b) == doctest::Approx(0.5));
  CHECK(pixel_accuracy(a, b) == doctest::Approx(4.0 / 8.0));

  CHECK(jaccard(a, b) == jaccard(b, a));
  CHECK(jaccard(a, a) == 1.0);

  Tensor<float> empty = Tensor<float>::zeros({2, 4});
  CHECK(jaccard(empty, empty) == 1.0);
  CHECK(dice(empty, empty) == 1.0);
  CHECK(jaccard(a, empty) == 0.0);

  // dice >= jaccard on random masks
  std::mt19937_64 rng(5);
  for (int trial = 0; trial < 50; ++trial) {
    Tensor<float> x = Tensor<float>::zeros({4, 4}), y = Tensor<float>::zeros({4, 4});
    for (float& v : x.data) v = static_cast<float>(rng() % 2);
    for (float& v : y.data) v = static_cast<float>(rng() % 2);
    CHECK(dice(x, y) >= jaccard(x, y) - 1e-12);
  }

  CHECK_THROWS_AS(jaccard(a, Tensor<float>::zeros({3, 3})), ShapeError);
}

TEST_CASE("raising the threshold never adds predicted pixels") {
  TrainConfig cfg = tiny_config(64, 0);
  SystemModel m = build_system(cfg);
  Tensor<float> image = random_prob({3, 32, 32}, 77);
  Tensor<float> prev;
  for (double t = 0.1; t < 0.95; t += 0.1) {
    PredictOut po = predict(m, image, t, cfg.S);
    if (prev.size() > 0)
      for (std::size_t i = 0; i < po.mask.data.size(); ++i)
        CHECK(po.mask.data[i] <= prev.data[i]);  // nesting
    prev = po.mask;
  }
  CHECK_THROWS_AS(predict(m, image, 1.5, cfg.S), ConfigError);
  CHECK_THROWS_AS(predict(m, image, 0.0, cfg.S), ConfigError);
}

TEST_CASE("tune_threshold agrees with an exhaustive grid oracle") {
  TrainConfig cfg = tiny_config(64, 0);
  SystemModel m = build_system(cfg);
  std::vector<Sample> val = make_synthetic_dataset(3, 32, 11);

  ThresholdTable table = tune_threshold(m, val, cfg);
  REQUIRE(table.rows.size() == 19);

  // independent evaluation straight from predict()
  double best_score = -1.0, best_t = 0.0;
  for (int i = 1; i <= 19; ++i) {
    const double t = i * 0.05;
    double sum = 0.0;
    for (const Sample& s : val) {
      PredictOut po = predict(m, s.image, t, cfg.S);
      PairedInput p = prepare_pair(s, cfg.S);
      Tensor<float> mask = po.prob;
      for (float& v : mask.data) v = v >= static_cast<float>(t) ? 1.0f : 0.0f;
      sum += jaccard(mask, p.target);
    }
    const double mean = sum / 3.0;
    CHECK(table.rows[static_cast<std::size_t>(i - 1)].second == doctest::Approx(mean));
    if (mean > best_score) {
      best_score = mean;
      best_t = t;
    }
  }
  CHECK(table.best == doctest::Approx(best_t));

  bool member = false;
  for (const auto& [t, score] : table.rows) member = member || t == table.best;
  CHECK(member);
}

TEST_CASE("updcnn-only phase leaves scanet and box parameters bit unchanged") {
  TrainConfig cfg = tiny_config(64, 0);
  cfg.epochs = 2;
  std::vector<Sample> data = make_synthetic_dataset(2, 32, 3);
  SystemModel before = build_system(cfg);

  TrainResult r = train_phase(Phase::UpdcnnOnly, data, cfg);
  Checkpoint init = to_checkpoint(before, Phase::UpdcnnOnly, 0, cfg.seed, {});
  for (const auto& [name, t] : init.tensors) {
    if (name.rfind("updcnn.", 0) == 0) continue;
    REQUIRE(r.ckpt.tensors.at(name).data == t.data);  // scanet.* and box.*
  }
  // and the trained branch did move
  bool changed = false;
  for (const auto& [name, t] : init.tensors)
    if (name.rfind("updcnn.", 0) == 0 && r.ckpt.tensors.at(name).data != t.data) changed = true;
  CHECK(changed);
}

TEST_CASE("training is deterministic: identical runs, identical artifacts") {
  TrainConfig cfg = tiny_config(64, 2);
  std::vector<Sample> data = make_synthetic_dataset(2, 48, 5);

  TrainResult a = train_phase(Phase::ScanetOnly, data, cfg);
  TrainResult b = train_phase(Phase::ScanetOnly, data, cfg);
  CHECK(loss_log_csv(a.log) == loss_log_csv(b.log));

  const fs::path dir = tmpdir("det");
  save_checkpoint(a.ckpt, (dir / "a.ckpt").string());
  save_checkpoint(b.ckpt, (dir / "b.ckpt").string());
  CHECK(slurp(dir / "a.ckpt") == slurp(dir / "b.ckpt"));
  fs::remove_all(dir);
}

TEST_CASE("joint phase needs pretrained weights unless overridden") {
  TrainConfig cfg = tiny_config(64, 0);
  std::vector<Sample> data = make_synthetic_dataset(1, 32, 1);
  CHECK_THROWS_WITH_AS(train_phase(Phase::Joint, data, cfg), doctest::Contains("pretrained"),
                       ConfigError);

  cfg.allow_random_joint_init = true;
  CHECK_NOTHROW(train_phase(Phase::Joint, data, cfg));

  CHECK_THROWS_AS(train_phase(Phase::ScanetOnly, {}, cfg), ConfigError);
}

TEST_CASE("joint phase starts exactly from its init checkpoint") {
  TrainConfig cfg = tiny_config(64, 2);
  std::vector<Sample> data = make_synthetic_dataset(2, 48, 7);
  Checkpoint init = train_phase(Phase::UpdcnnOnly, data, cfg).ckpt;

  // the joint phase's step-0 state is system_from_checkpoint(init)
  Checkpoint step0 = to_checkpoint(system_from_checkpoint(init, cfg), Phase::Joint, 0, 0, {});
  REQUIRE(step0.tensors.size() == init.tensors.size());
  for (const auto& [name, t] : init.tensors) CHECK(step0.tensors.at(name).data == t.data);

  TrainResult r = train_phase(Phase::Joint, data, cfg, &init);
  REQUIRE(!r.log.empty());
  CHECK(r.log.front().phase == Phase::Joint);
  CHECK(r.ckpt.phase == Phase::Joint);
}

TEST_CASE("logged losses decompose as total = seg + lambda * box") {
  TrainConfig cfg = tiny_config(64, 3);
  cfg.lambda_box = 0.25;
  std::vector<Sample> data = make_synthetic_dataset(2, 48, 13);
  TrainResult r = train_phase(Phase::ScanetOnly, data, cfg);
  REQUIRE(!r.log.empty());
  for (const LossRow& row : r.log) {
    CHECK(std::abs(row.total - (row.seg_loss + cfg.lambda_box * row.box_loss)) < 1e-6);
    CHECK(row.phase == Phase::ScanetOnly);
  }
  const std::string csv = loss_log_csv(r.log);
  CHECK(csv.rfind("phase,epoch,step,seg_loss,box_loss,total\n", 0) == 0);
  CHECK(csv.find("scanet,0,0,") != std::string::npos);
}

TEST_CASE("config validation rejects out-of-range knobs") {
  TrainConfig cfg = tiny_config(32, 0);
  cfg.lr = 0;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg = tiny_config(32, 0);
  cfg.momentum = 1.0;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg = tiny_config(32, 0);
  cfg.S = 33;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg = tiny_config(32, 0);
  cfg.lambda_box = -0.1;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
}
