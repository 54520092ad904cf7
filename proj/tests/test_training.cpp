#include <cmath>
#include <fstream>
#include <set>

#include "support.hpp"
#include "svos/error.hpp"
#include "svos/synth.hpp"
#include "svos/training.hpp"

using namespace svos;

namespace {

// Raw video of `length` frames at 16 x 28 with a mask every `stride` frames.
TrainingVideo striped_video(int length, int stride, std::size_t objects = 1) {
  TrainingVideo v;
  v.id = "v" + std::to_string(length);
  v.annotation_stride = stride;
  for (int t = 0; t < length; ++t) v.frames.emplace_back(Shape{3, 16, 28}, static_cast<float>(t) / length);
  v.masks.resize(objects);
  for (auto& m : v.masks)
    for (int t = 0; t < length; ++t) {
      if (t % stride) {
        m.emplace_back(std::nullopt);
        continue;
      }
      Tensor<float> mask(Shape{1, 16, 28});
      for (std::size_t i = 100; i < 180; ++i) mask.mutable_data()[i] = 1;
      m.emplace_back(mask);
    }
  return v;
}

std::vector<TrainingVideo> micro_dataset(int count, int frames, int stride, std::uint64_t seed) {
  SynthConfig s;
  s.height = 32;
  s.width = 56;
  s.radius_min = 6;
  s.radius_max = 9;
  s.frames = frames;
  s.annotation_stride = stride;
  s.seed = seed;
  return prepare_training_set(synth_dataset(s, count), ModelConfig::desk_micro());
}

TrainConfig micro_config() {
  TrainConfig c;
  c.model = ModelConfig::desk_micro();
  c.lr = 1e-3;
  c.t_min = 3;
  c.t_max = 5;
  c.max_steps = 6;
  c.seed = 17;
  return c;
}

TrainClip<double> to_double(const TrainClip<float>& c) {
  auto cast = [](const Tensor<float>& t) {
    return Tensor<double>(t.shape(), std::vector<double>(t.data().begin(), t.data().end()));
  };
  TrainClip<double> d;
  d.video = c.video;
  d.object = c.object;
  d.raw_indices = c.raw_indices;
  d.valid = c.valid;
  for (const auto& f : c.frames) d.frames.push_back(cast(f));
  for (const auto& m : c.masks) d.masks.push_back(cast(m));
  return d;
}

struct LossAndGrads {
  double loss;
  std::vector<std::vector<double>> grads;
};

LossAndGrads loss_and_grads(SegmentationModel<double>& model, const TrainClip<double>& clip, Feedback fb) {
  model.params().clear_grads();
  GradTape<double> tape;
  LossAndGrads out{};
  {
    TapeScope<double> scope(tape);
    auto l = sequence_loss(model, clip, fb);
    out.loss = l.item();
    tape.backward(l);
  }
  for (const auto& [_, t] : model.params().named())
    out.grads.emplace_back(t.has_grad() ? std::vector<double>(t.grad().begin(), t.grad().end())
                                        : std::vector<double>(t.size(), 0.0));
  return out;
}

bool same_bits(double a, double b) { return std::memcmp(&a, &b, sizeof a) == 0; }

}  // namespace

TEST_CASE("annotated_only clips step by the annotation stride") {
  const std::vector<TrainingVideo> ds{striped_video(40, 5)};
  Rng rng(1);
  for (int i = 0; i < 50; ++i) {
    const auto clip = sample_training_clip(ds, rng, 5, 5, TrainStage::annotated_only);
    REQUIRE(clip.length() == 5);
    const int k = clip.raw_indices[0];
    CHECK(k % 5 == 0);
    CHECK(clip.raw_indices == std::vector<int>{k, k + 5, k + 10, k + 15, k + 20});
    for (bool v : clip.valid) CHECK(v);
    CHECK(clip.valid_targets() == 4);
  }
}

TEST_CASE("all_frames clips flag unannotated steps invalid") {
  const std::vector<TrainingVideo> ds{striped_video(40, 5)};
  Rng rng(2);
  for (int i = 0; i < 50; ++i) {
    const auto clip = sample_training_clip(ds, rng, 10, 10, TrainStage::all_frames);
    REQUIRE(clip.length() == 10);
    std::size_t invalid = 0;
    for (std::size_t t = 0; t < clip.length(); ++t) {
      CHECK(clip.raw_indices[t] == clip.raw_indices[0] + static_cast<int>(t));
      CHECK(clip.valid[t] == (clip.raw_indices[t] % 5 == 0));
      invalid += clip.valid[t] ? 0 : 1;
      // Placeholders are zero and shaped like real masks.
      if (!clip.valid[t]) {
        CHECK(clip.masks[t].shape() == Shape{1, 16, 28});
        for (float v : clip.masks[t].data()) CHECK(v == 0.0f);
      }
    }
    CHECK(invalid == 8);
    CHECK(clip.valid[0]);
  }
}

TEST_CASE("clip lengths cover the whole range") {
  const std::vector<TrainingVideo> ds{striped_video(30, 1)};
  Rng rng(3);
  std::set<std::size_t> seen;
  for (int i = 0; i < 10000; ++i) seen.insert(sample_training_clip(ds, rng, 5, 11, TrainStage::all_frames).length());
  CHECK(seen == std::set<std::size_t>{5, 6, 7, 8, 9, 10, 11});
}

TEST_CASE("videos too short for T are skipped") {
  std::vector<TrainingVideo> ds{striped_video(3, 1), striped_video(20, 1), striped_video(4, 1)};
  Rng rng(4);
  for (int i = 0; i < 200; ++i) CHECK(sample_training_clip(ds, rng, 5, 8, TrainStage::annotated_only).video == 1);
  const std::vector<TrainingVideo> short_only{striped_video(3, 1)};
  CHECK_THROWS_AS(sample_training_clip(short_only, rng, 5, 5, TrainStage::annotated_only), ValueError);
  CHECK_THROWS_AS(sample_training_clip({}, rng, 5, 5, TrainStage::annotated_only), ValueError);
}

TEST_CASE("objects are sampled independently") {
  const std::vector<TrainingVideo> ds{striped_video(12, 1, 3)};
  Rng rng(5);
  std::set<std::size_t> objects;
  for (int i = 0; i < 200; ++i) objects.insert(sample_training_clip(ds, rng, 3, 3, TrainStage::all_frames).object);
  CHECK(objects.size() == 3);
}

TEST_CASE("a fresh desk model starts near ln 2") {
  SynthConfig s;
  s.frames = 8;
  s.seed = 5;
  const auto ds = prepare_training_set(synth_dataset(s, 4), ModelConfig::desk());
  SegmentationModel<float> model(ModelConfig::desk(), 0);
  Rng rng(6);
  double total = 0;
  for (int i = 0; i < 4; ++i)
    total += sequence_loss(model, sample_training_clip(ds, rng, 5, 8, TrainStage::annotated_only), Feedback::none)
                 .item();
  CHECK(std::abs(total / 4 - std::log(2.0)) < 0.02);
}

TEST_CASE("sequence_loss averages valid steps only") {
  const auto ds = micro_dataset(1, 8, 1, 9);
  Rng rng(7);
  auto clip = to_double(sample_training_clip(ds, rng, 4, 4, TrainStage::all_frames));
  SegmentationModel<double> model(ModelConfig::desk_micro(), 3);
  const auto preds = model.unroll(clip.frames, clip.masks[0]);
  clip.valid = {true, true, false, true};
  const double want = (bce_loss(preds[0], clip.masks[1]).item() + bce_loss(preds[2], clip.masks[3]).item()) / 2;
  CHECK(sequence_loss(model, clip, Feedback::none).item() == doctest::Approx(want).epsilon(1e-14));

  clip.valid = {true, false, false, false};
  GradTape<double> tape;
  TapeScope<double> scope(tape);
  const auto zero = sequence_loss(model, clip, Feedback::none);
  CHECK(zero.item() == 0.0);
  CHECK_FALSE(zero.requires_grad());

  clip.valid[0] = false;
  CHECK_THROWS_AS(sequence_loss(model, clip, Feedback::none), ValueError);
}

TEST_CASE("invalid targets affect neither the loss nor any gradient bit") {
  const auto ds = micro_dataset(2, 12, 3, 11);
  for (auto enc : {EncoderVariant::rgb_only, EncoderVariant::rgb_plus_prev_mask}) {
    auto cfg = ModelConfig::desk_micro();
    cfg.encoder_variant = enc;
    const Feedback fb = enc == EncoderVariant::rgb_only ? Feedback::none : Feedback::teacher_forcing;
    SegmentationModel<double> model(cfg, 21);
    Rng rng(8);
    for (int trial = 0; trial < 3; ++trial) {
      auto clip = to_double(sample_training_clip(ds, rng, 7, 7, TrainStage::all_frames));
      REQUIRE(clip.valid_targets() > 0);
      REQUIRE(clip.valid_targets() < clip.length() - 1);
      const auto before = loss_and_grads(model, clip, fb);
      for (std::size_t t = 0; t < clip.length(); ++t) {
        if (clip.valid[t]) continue;
        for (auto& v : clip.masks[t].mutable_data()) v = uniform01(rng) < 0.5 ? 1.0 : 0.0;
      }
      const auto after = loss_and_grads(model, clip, fb);
      CHECK(same_bits(before.loss, after.loss));
      bool identical = true;
      for (std::size_t i = 0; i < before.grads.size(); ++i)
        for (std::size_t j = 0; j < before.grads[i].size(); ++j)
          identical = identical && same_bits(before.grads[i][j], after.grads[i][j]);
      CHECK(identical);
    }
  }
}

TEST_CASE("plateau detector") {
  PlateauDetector flat(2, 3, 0.01);
  for (int i = 0; i < 4; ++i) CHECK_FALSE(flat.push(1.0));
  CHECK(flat.push(1.0));  // window + span losses seen, no improvement

  PlateauDetector falling(2, 3, 0.01);
  bool fired = false;
  for (int i = 0; i < 50; ++i) fired = fired || falling.push(std::pow(0.9, i));
  CHECK_FALSE(fired);

  // 0.5% improvement is under a 1% threshold.
  PlateauDetector slow(1, 1, 0.01);
  CHECK_FALSE(slow.push(1.0));
  CHECK(slow.push(0.995));
  CHECK_FALSE(PlateauDetector(1, 1, 0.001).push(1.0));

  CHECK_THROWS_AS(PlateauDetector(0, 1, 0.1), ValueError);
  CHECK_THROWS_AS(PlateauDetector(1, 1, 0.0), ValueError);
}

TEST_CASE("stage switch and curriculum fire once each and are recorded") {
  auto cfg = micro_config();
  cfg.model.encoder_variant = EncoderVariant::rgb_plus_prev_mask;
  cfg.plateau_window = 2;
  cfg.plateau_span = 2;
  cfg.plateau_threshold = 10.0;  // any window counts as stable
  cfg.max_steps = 14;
  Trainer trainer(cfg, micro_dataset(3, 14, 2, 3));
  CHECK(trainer.feedback() == Feedback::teacher_forcing);
  std::vector<StepRecord> log;
  const auto ck = trainer.run([&](const StepRecord& r) { log.push_back(r); });
  REQUIRE(log.size() == 14);
  CHECK(ck.progress.stage == TrainStage::all_frames);
  CHECK(ck.progress.curriculum);
  CHECK(ck.progress.stage_switch_step == 4);
  CHECK(ck.progress.curriculum_switch_step == 8);
  CHECK(trainer.feedback() == Feedback::self_prediction);
  for (const auto& r : log) {
    CHECK((r.stage == TrainStage::all_frames) == (r.step >= 4));
    CHECK(r.curriculum == (r.step >= 8));
  }
  const auto back = parse_checkpoint(serialize_checkpoint(ck));
  CHECK(back.progress.stage_switch_step == 4);
  CHECK(back.progress.curriculum_switch_step == 8);

  // The rgb-only variant has no curriculum phase.
  auto plain = cfg;
  plain.model.encoder_variant = EncoderVariant::rgb_only;
  const auto p = train(plain, micro_dataset(3, 14, 2, 3));
  CHECK(p.progress.stage_switch_step == 4);
  CHECK_FALSE(p.progress.curriculum);
  CHECK(p.progress.curriculum_switch_step == -1);
}

TEST_CASE("a non-finite loss aborts training") {
  const auto cfg = micro_config();
  const auto ds = micro_dataset(2, 8, 1, 4);
  Trainer healthy(cfg, ds);
  (void)healthy.step();
  auto ck = healthy.checkpoint();
  for (auto& v : ck.params.at("decoder.out.bias").mutable_data()) v = std::nanf("");
  Trainer poisoned(cfg, ds, ck);
  CHECK_THROWS_AS(poisoned.step(), DivergenceError);
}

TEST_CASE("checkpoint round trip") {
  auto cfg = micro_config();
  const auto ds = micro_dataset(2, 8, 1, 5);
  Trainer trainer(cfg, ds);
  for (int i = 0; i < 3; ++i) (void)trainer.step();
  const auto ck = trainer.checkpoint();

  test::TempDir dir;
  save_checkpoint(ck, dir / "a.svos");
  const auto back = load_checkpoint(dir / "a.svos", "desk-micro");
  CHECK(back.model == ck.model);
  for (const auto& [name, t] : ck.params.named()) CHECK(test::bit_equal(t, back.params.at(name)));
  CHECK(back.optimizer.step == 3);
  CHECK(back.optimizer.options.lr == cfg.lr);
  for (const auto& [name, m] : ck.optimizer.moments) {
    CHECK(test::bit_equal(m.m, back.optimizer.moments.at(name).m));
    CHECK(test::bit_equal(m.v, back.optimizer.moments.at(name).v));
  }
  CHECK(back.progress.step == 3);
  CHECK(back.rng_state == ck.rng_state);
  CHECK(back.train_config == ck.train_config);
  CHECK(serialize_checkpoint(back) == serialize_checkpoint(ck));

  // Forward outputs agree bit for bit.
  const auto a = ck.make_model(), b = back.make_model();
  const auto& v = ds[0];
  const std::vector<Tensor<float>> frames(v.frames.begin(), v.frames.begin() + 4);
  const auto pa = a.unroll(frames, *v.masks[0][0]), pb = b.unroll(frames, *v.masks[0][0]);
  for (std::size_t t = 0; t < pa.size(); ++t) CHECK(test::bit_equal(pa[t], pb[t]));

  auto bytes = serialize_checkpoint(ck);
  SUBCASE("corrupted byte") {
    bytes[bytes.size() / 2] ^= 0x40;
    CHECK_THROWS_AS(parse_checkpoint(bytes), ChecksumError);
  }
  SUBCASE("truncated") {
    bytes.resize(bytes.size() - 100);
    CHECK_THROWS_AS(parse_checkpoint(bytes), FormatError);
    bytes.resize(10);
    CHECK_THROWS_AS(parse_checkpoint(bytes), FormatError);
  }
  SUBCASE("version") {
    bytes[4] = 9;
    try {
      (void)parse_checkpoint(bytes);
      FAIL("expected an error");
    } catch (const FormatError& e) {
      CHECK(std::string(e.what()).find("version") != std::string::npos);
    }
  }
  SUBCASE("magic") {
    bytes[0] = 'X';
    CHECK_THROWS_AS(parse_checkpoint(bytes), FormatError);
  }
  SUBCASE("preset") { CHECK_THROWS_AS(load_checkpoint(dir / "a.svos", "desk"), ConfigError); }
  SUBCASE("missing file") { CHECK_THROWS(load_checkpoint(dir / "none.svos")); }
}

TEST_CASE("resuming from a checkpoint continues the same run") {
  auto cfg = micro_config();
  cfg.max_steps = 8;
  cfg.plateau_window = 2;
  cfg.plateau_span = 3;
  cfg.plateau_threshold = 0.5;
  const auto ds = micro_dataset(3, 10, 2, 6);

  const auto straight = train(cfg, ds);

  Trainer first(cfg, ds);
  for (int i = 0; i < 3; ++i) (void)first.step();
  const auto mid = parse_checkpoint(serialize_checkpoint(first.checkpoint()));
  Trainer second(cfg, ds, mid);
  const auto resumed = second.run();
  CHECK(serialize_checkpoint(resumed) == serialize_checkpoint(straight));

  auto other = cfg;
  other.model = ModelConfig::desk();
  CHECK_THROWS_AS(Trainer(other, prepare_training_set({}, other.model), mid), ValueError);
  other.model = ModelConfig::desk_micro();
  other.model.lstm_channels = 4;
  CHECK_THROWS_AS(Trainer(other, ds, mid), ConfigError);
}

TEST_CASE("training is bit-reproducible") {
  const auto cfg = micro_config();
  const auto ds = micro_dataset(2, 8, 1, 7);
  const auto a = train(cfg, ds), b = train(cfg, ds);
  CHECK(serialize_checkpoint(a) == serialize_checkpoint(b));
  CHECK(tensors_digest(a.params.named()) == tensors_digest(b.params.named()));
  auto c = cfg;
  c.seed = 18;
  CHECK(tensors_digest(train(c, ds).params.named()) != tensors_digest(a.params.named()));
}

TEST_CASE("TrainConfig parsing") {
  test::TempDir dir;
  std::ofstream(dir / "train.cfg") << "data = sets/manifest.json\npreset = desk-micro\nlr = 1e-4\n"
                                      "encoder_variant = rgb_plus_prev_mask\nt_min = 3\nt_max = 6\nseed = 4\n"
                                      "max_steps = 100\n";
  const auto c = TrainConfig::load(dir / "train.cfg");
  CHECK(c.data == dir.path() / "sets/manifest.json");
  CHECK(c.model.preset == "desk-micro");
  CHECK(c.model.encoder_variant == EncoderVariant::rgb_plus_prev_mask);
  CHECK(c.lr == 1e-4);
  CHECK(c.t_min == 3);
  CHECK(c.max_steps == 100);
  CHECK(c.seed == 4);
  CHECK(c.max_epochs == 80);
  CHECK(c.plateau_window == 200);
  CHECK(c.plateau_span == 400);
  CHECK(c.plateau_threshold == 0.01);

  auto kv = KeyValues::parse(render_key_values(c.to_key_values()));
  CHECK(TrainConfig::from_key_values(kv).to_key_values() == c.to_key_values());

  auto unknown = KeyValues::parse("learning_rate = 1\n");
  CHECK_THROWS_AS(TrainConfig::from_key_values(unknown), ConfigError);
  auto short_t = KeyValues::parse("t_min = 1\n");
  CHECK_THROWS_AS(TrainConfig::from_key_values(short_t), ConfigError);
  auto inverted = KeyValues::parse("t_min = 6\nt_max = 5\n");
  CHECK_THROWS_AS(TrainConfig::from_key_values(inverted), ConfigError);
  auto neg = KeyValues::parse("lr = -1\n");
  CHECK_THROWS_AS(TrainConfig::from_key_values(neg), ConfigError);
  auto bad_preset = KeyValues::parse("preset = paper2\n");
  CHECK_THROWS_AS(TrainConfig::from_key_values(bad_preset), ConfigError);
}
