#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "nestseg/toynet.hpp"
#include "nestseg/volio.hpp"
#include "oracles.hpp"

using namespace nestseg;
namespace fs = std::filesystem;

namespace {

NetConfig tiny(Head head = Head::Multilevel) {
  NetConfig c;
  c.depth = 2;
  c.base_filters = 4;
  c.head = head;
  c.seed = 17;
  return c;
}

VolumeF random_input(Rng& rng, Shape s, int channels = 4) {
  VolumeF v(s, channels);
  for (auto& x : v.data()) x = static_cast<float>(rng.normal(0.5, 0.3));
  return v;
}

LabelVolume random_labels(Rng& rng, Shape s) {
  LabelVolume l(s);
  for (auto& x : l.data()) x = static_cast<std::uint8_t>(rng.below(4));
  return l;
}

LossConfig loss_for(Head head, LossKind nested = LossKind::MCE) {
  LossConfig lc;
  lc.kind = head == Head::Softmax ? LossKind::SoftmaxCE : nested;
  lc.weights = class_weights_from_counts(std::vector<std::int64_t>{40, 12, 8, 4}, 0.4);
  return lc;
}

// Mapping piece of every voxel under a fixed dropout mask, or nullopt when
// some activation sits too close to a piece boundary to tell.
std::optional<std::vector<int>> pieces(const NetParams& p, const VolumeF& in, const LabelVolume& l,
                                       LossKind kind, std::uint64_t mask_seed) {
  Rng rng(mask_seed);
  const VolumeF logits = forward(p, in, true, rng);
  std::vector<int> out;
  for (std::size_t i = 0; i < l.data().size(); ++i) {
    const double a = multilevel_activation(logits.data()[i], p.config.activation);
    if (std::abs(a - 1.0) < 1e-6 || std::abs(a - 2.0) < 1e-6) return std::nullopt;
    out.push_back(mapping_piece(kind, l.data()[i], a));
  }
  return out;
}

std::vector<Sample> small_dataset(int n, std::uint64_t seed) {
  std::vector<Sample> data;
  Rng rng(seed);
  for (int i = 0; i < n; ++i) {
    PhantomConfig pc;
    pc.shape = {1, 16, 16};
    pc.radii = {6.0, 4.0, 2.0};
    pc.center = std::array<double, 3>{0.0, 7.5 + rng.uniform(-2, 2), 7.5 + rng.uniform(-2, 2)};
    pc.seed = derive_seed(seed, static_cast<std::uint64_t>(i));
    auto ph = synth_phantom(pc);
    data.push_back({"s" + std::to_string(i), std::move(ph.image), std::move(ph.labels)});
  }
  return data;
}

}  // namespace

TEST(BuildNetwork, HeadsAndDeterminism) {
  Rng rng(1);
  const VolumeF in = random_input(rng, Shape{1, 8, 8});
  const auto ml = build_network(tiny(Head::Multilevel));
  const auto sm = build_network(tiny(Head::Softmax));
  EXPECT_EQ(forward(ml, in).channels(), 1);
  EXPECT_EQ(forward(sm, in).channels(), 4);
  EXPECT_EQ(build_network(tiny()), ml);
  NetConfig other = tiny();
  other.seed = 18;
  EXPECT_NE(build_network(other), ml);
  // weights uniform within +-sqrt(3 / fan_in); biases zero
  const auto& w = ml["stem.w"].values;
  const double bound = std::sqrt(3.0 / (4 * 9));
  for (double v : w) EXPECT_LE(std::abs(v), bound);
  for (double v : ml["stem.b"].values) EXPECT_EQ(v, 0.0);
}

TEST(BuildNetwork, RejectsInvalidConfig) {
  NetConfig c = tiny();
  c.depth = 1;
  EXPECT_THROW(build_network(c), ConfigError);
  c = tiny();
  c.base_filters = 3;
  EXPECT_THROW(build_network(c), ConfigError);
  c = tiny();
  c.dropout_rate = 1.0;
  EXPECT_THROW(build_network(c), ConfigError);
  c = tiny();
  c.spatial_dims = 4;
  EXPECT_THROW(build_network(c), ConfigError);
}

TEST(Forward, ShapeContract) {
  Rng rng(2);
  for (int depth : {2, 3}) {
    for (bool ds : {false, true}) {
      NetConfig c = tiny();
      c.depth = depth;
      c.deep_supervision = ds;
      const auto p = build_network(c);
      for (Shape s : {Shape{1, 8, 8}, Shape{1, 7, 9}, Shape{1, 13, 5}}) {
        const auto out = forward(p, random_input(rng, s));
        EXPECT_EQ(out.shape(), s) << "depth " << depth << " ds " << ds;
      }
    }
  }
  NetConfig c3 = tiny();
  c3.spatial_dims = 3;
  const auto p3 = build_network(c3);
  EXPECT_EQ(forward(p3, random_input(rng, Shape{5, 6, 7})).shape(), (Shape{5, 6, 7}));
}

TEST(Forward, InputChannelMismatch) {
  Rng rng(3);
  const auto p = build_network(tiny());
  EXPECT_THROW(forward(p, random_input(rng, Shape{1, 8, 8}, 3)), ShapeError);
}

TEST(Forward, DeterministicOutsideTrainMode) {
  Rng rng(4);
  const auto p = build_network(tiny());
  const VolumeF in = random_input(rng, Shape{1, 8, 8});
  Rng r1(1), r2(2);
  const auto a = forward(p, in, false, r1), b = forward(p, in, false, r2);
  EXPECT_TRUE(std::equal(a.data().begin(), a.data().end(), b.data().begin()));
  // train mode with dropout differs between masks but repeats for the same seed
  Rng r3(5), r4(6), r5(5);
  const auto c = forward(p, in, true, r3), d = forward(p, in, true, r4), e = forward(p, in, true, r5);
  EXPECT_FALSE(std::equal(c.data().begin(), c.data().end(), d.data().begin()));
  EXPECT_TRUE(std::equal(c.data().begin(), c.data().end(), e.data().begin()));
}

TEST(Forward, DeepSupervisionChangesOutputNotShape) {
  Rng rng(5);
  NetConfig c = tiny();
  c.depth = 3;
  const VolumeF in = random_input(rng, Shape{1, 8, 8});
  const auto off = forward(build_network(c), in);
  c.deep_supervision = true;
  const auto on_params = build_network(c);
  EXPECT_NO_THROW(on_params["seg1.w"]);
  const auto on = forward(on_params, in);
  EXPECT_EQ(on.shape(), off.shape());
  EXPECT_FALSE(std::equal(on.data().begin(), on.data().end(), off.data().begin()));
}

TEST(Backward, MatchesFiniteDifferencesEveryParameter) {
  // step 1e-4, relative error < 1e-3 with a 1e-6 floor on the magnitude
  for (Head head : {Head::Multilevel, Head::Softmax}) {
    for (bool ds : {false, true}) {
      Rng rng(100 + static_cast<int>(head) * 2 + ds);
      NetConfig c = tiny(head);
      c.deep_supervision = ds;
      c.depth = ds ? 3 : 2;
      const auto params = build_network(c);
      const VolumeF in = random_input(rng, Shape{1, 8, 8});
      const LabelVolume lab = random_labels(rng, Shape{1, 8, 8});
      const LossConfig lc = loss_for(head);
      const std::uint64_t mask_seed = 77;
      Rng mr(mask_seed);
      const auto lg = backward(params, in, lab, lc, mr, true);
      const auto base_pieces = head == Head::Multilevel
                                   ? pieces(params, in, lab, lc.kind, mask_seed)
                                   : std::optional<std::vector<int>>(std::vector<int>{});
      ASSERT_TRUE(base_pieces.has_value());
      int checked = 0, skipped = 0;
      for (std::size_t t = 0; t < params.tensors.size(); ++t) {
        for (std::size_t i = 0; i < params.tensors[t].values.size(); ++i) {
          const double h = 1e-4;
          auto at = [&](double delta) {
            NetParams q = params;
            q.tensors[t].values[i] += delta;
            return q;
          };
          const NetParams plus = at(h), minus = at(-h);
          if (head == Head::Multilevel) {
            const auto pp = pieces(plus, in, lab, lc.kind, mask_seed);
            const auto pm = pieces(minus, in, lab, lc.kind, mask_seed);
            if (!pp || !pm || *pp != *pm) {
              ++skipped;
              continue;
            }
          }
          Rng a(mask_seed), b(mask_seed);
          const double fd =
              (evaluate_loss(plus, in, lab, lc, a) - evaluate_loss(minus, in, lab, lc, b)) / (2 * h);
          EXPECT_LT(oracle::rel_err(lg.grads[t][i], fd, 1e-6), 1e-3)
              << params.tensors[t].name << "[" << i << "] analytic " << lg.grads[t][i] << " fd " << fd;
          ++checked;
        }
      }
      EXPECT_GT(checked, 0.95 * static_cast<double>(params.total_size()));
      EXPECT_LE(skipped, static_cast<int>(0.05 * static_cast<double>(params.total_size())));
    }
  }
}

TEST(Backward, NceHeadMatchesFiniteDifferences) {
  Rng rng(7);
  const auto params = build_network(tiny());
  const VolumeF in = random_input(rng, Shape{1, 8, 8});
  const LabelVolume lab = random_labels(rng, Shape{1, 8, 8});
  const LossConfig lc = loss_for(Head::Multilevel, LossKind::NCE);
  Rng mr(3);
  const auto lg = backward(params, in, lab, lc, mr, true);
  for (std::size_t t = 0; t < params.tensors.size(); ++t) {
    for (std::size_t i = 0; i < params.tensors[t].values.size(); i += 7) {
      NetParams plus = params, minus = params;
      plus.tensors[t].values[i] += 1e-4;
      minus.tensors[t].values[i] -= 1e-4;
      const auto pp = pieces(plus, in, lab, lc.kind, 3), pm = pieces(minus, in, lab, lc.kind, 3);
      if (!pp || !pm || *pp != *pm) continue;
      Rng a(3), b(3);
      const double fd = (evaluate_loss(plus, in, lab, lc, a) - evaluate_loss(minus, in, lab, lc, b)) / 2e-4;
      EXPECT_LT(oracle::rel_err(lg.grads[t][i], fd, 1e-6), 1e-3) << params.tensors[t].name << i;
    }
  }
}

TEST(Backward, WeightLinearity) {
  Rng rng(8);
  for (Head head : {Head::Multilevel, Head::Softmax}) {
    const auto params = build_network(tiny(head));
    const VolumeF in = random_input(rng, Shape{1, 8, 8});
    const LabelVolume lab = random_labels(rng, Shape{1, 8, 8});
    LossConfig lc = loss_for(head);
    Rng r1(1), r2(1), r3(1);
    const auto base = backward(params, in, lab, lc, r1);
    LossConfig doubled = lc;
    for (auto& w : doubled.weights.weights) w *= 2.0;
    const auto twice = backward(params, in, lab, doubled, r2);
    EXPECT_EQ(twice.loss, 2.0 * base.loss);
    for (std::size_t t = 0; t < base.grads.size(); ++t)
      for (std::size_t i = 0; i < base.grads[t].size(); ++i)
        EXPECT_EQ(twice.grads[t][i], 2.0 * base.grads[t][i]);

    LossConfig zero = lc;
    for (auto& w : zero.weights.weights) w = 0.0;
    const auto none = backward(params, in, lab, zero, r3);
    EXPECT_EQ(none.loss, 0.0);
    for (const auto& g : none.grads)
      for (double v : g) EXPECT_EQ(v, 0.0);
  }
}

TEST(Backward, ZeroWeightClassVoxelsContributeNothing) {
  // classes 2 and 3 get weight 0, so swapping them anywhere changes nothing
  Rng rng(9);
  const auto params = build_network(tiny());
  const VolumeF in = random_input(rng, Shape{1, 8, 8});
  const LabelVolume lab = random_labels(rng, Shape{1, 8, 8});
  LossConfig lc = loss_for(Head::Multilevel);
  lc.weights.weights[2] = 0.0;
  lc.weights.weights[3] = 0.0;
  LabelVolume swapped = lab;
  for (auto& l : swapped.data())
    if (l >= 2) l = static_cast<std::uint8_t>(5 - l);
  Rng r1(1), r2(1);
  const auto a = backward(params, in, lab, lc, r1);
  const auto b = backward(params, in, swapped, lc, r2);
  EXPECT_EQ(a.loss, b.loss);
  EXPECT_EQ(a.grads, b.grads);
}

TEST(Backward, Errors) {
  Rng rng(10);
  auto params = build_network(tiny());
  const VolumeF in = random_input(rng, Shape{1, 8, 8});
  const LabelVolume lab = random_labels(rng, Shape{1, 8, 8});
  EXPECT_THROW(backward(params, in, lab, loss_for(Head::Softmax), rng), ConfigError);
  EXPECT_THROW(backward(params, in, LabelVolume(Shape{1, 8, 7}), loss_for(Head::Multilevel), rng),
               ShapeError);
  params.tensors[params.index_of("seg0.b")].values[0] = std::numeric_limits<double>::quiet_NaN();
  try {
    backward(params, in, lab, loss_for(Head::Multilevel), rng);
    FAIL() << "expected NumericalError";
  } catch (const NumericalError& e) {
    EXPECT_EQ(exit_code(e), kExitNumerical);
  }
}

TEST(Adam, ZeroGradientLeavesParamsAndFirstStepIsLr) {
  auto params = build_network(tiny());
  const auto before = params;
  Gradients zero;
  for (const auto& t : params.tensors) zero.emplace_back(t.values.size(), 0.0);
  TrainConfig tc;
  AdamState st;
  adam_step(params, zero, st, tc);
  EXPECT_EQ(params, before);

  Gradients g = zero;
  Rng rng(11);
  for (auto& t : g)
    for (auto& v : t) v = rng.normal();
  AdamState st2;
  NetParams p2 = before;
  adam_step(p2, g, st2, tc);
  for (std::size_t t = 0; t < g.size(); ++t)
    for (std::size_t i = 0; i < g[t].size(); ++i) {
      const double step = before.tensors[t].values[i] - p2.tensors[t].values[i];
      EXPECT_NEAR(step, tc.learning_rate * g[t][i] / (std::abs(g[t][i]) + tc.adam_eps), 1e-15);
    }
  Gradients bad = zero;
  bad.pop_back();
  EXPECT_THROW(adam_step(p2, bad, st2, tc), ShapeError);
}

TEST(Adam, SingleVoxelStepDoesNotIncreaseLoss) {
  int tried = 0, increased = 0;
  for (std::uint64_t s = 0; s < 20; ++s) {
    Rng rng(200 + s);
    NetConfig c = tiny(s % 2 ? Head::Softmax : Head::Multilevel);
    c.seed = s;
    auto params = build_network(c);
    const VolumeF in = random_input(rng, Shape{1, 1, 1});
    const LabelVolume lab = random_labels(rng, Shape{1, 1, 1});
    const LossConfig lc = loss_for(c.head);
    for (double lr : {1e-3, 1e-4}) {
      Rng m1(s);
      const auto lg = backward(params, in, lab, lc, m1);
      NetParams q = params;
      TrainConfig tc;
      tc.learning_rate = lr;
      AdamState st;
      adam_step(q, lg.grads, st, tc);
      Rng m2(s);
      ++tried;
      increased += evaluate_loss(q, in, lab, lc, m2) > lg.loss;
    }
  }
  EXPECT_EQ(increased, 0) << "of " << tried;
}

TEST(Train, SplitSizes) {
  std::vector<std::size_t> tr, va;
  split_dataset(50, 0.2, 7, tr, va);
  EXPECT_EQ(va.size(), 10u);
  EXPECT_EQ(tr.size(), 40u);
  std::vector<std::size_t> all = tr;
  all.insert(all.end(), va.begin(), va.end());
  std::sort(all.begin(), all.end());
  for (std::size_t i = 0; i < 50; ++i) EXPECT_EQ(all[i], i);
  std::vector<std::size_t> tr2, va2;
  split_dataset(50, 0.2, 7, tr2, va2);
  EXPECT_EQ(va, va2);
}

TEST(Train, MaxEpochsOneGivesOneRecord) {
  const auto data = small_dataset(6, 1);
  TrainConfig tc;
  tc.max_epochs = 1;
  const auto r = train(tiny(), tc, data);
  ASSERT_EQ(r.history.size(), 1u);
  EXPECT_EQ(r.best_epoch, 1);
  EXPECT_EQ(r.history[0].val_dice.size(), 3u);
}

TEST(Train, PatienceZeroStopsAtFirstNonImprovingEpoch) {
  const auto data = small_dataset(6, 2);
  TrainConfig tc;
  tc.max_epochs = 6;
  tc.patience = 0;
  tc.learning_rate = 1e-12;  // monitor cannot move
  const auto r = train(tiny(), tc, data);
  EXPECT_EQ(r.history.size(), 2u);
  EXPECT_EQ(r.best_epoch, 1);

  tc.learning_rate = 0.005;
  const auto r2 = train(tiny(), tc, data);
  std::size_t stop = r2.history.size();
  double best = -1.0;
  for (std::size_t k = 0; k < r2.history.size(); ++k) {
    if (r2.history[k].monitor <= best) {
      stop = k + 1;
      break;
    }
    best = r2.history[k].monitor;
  }
  EXPECT_EQ(stop, r2.history.size());
}

TEST(Train, ReturnsBestParamsAndReducesLoss) {
  const auto data = small_dataset(10, 3);
  TrainConfig tc;
  tc.max_epochs = 8;
  tc.patience = 8;
  tc.learning_rate = 0.005;
  NetConfig c = tiny();
  c.dropout_rate = 0.0;
  int calls = 0;
  const auto r = train(c, tc, data, [&](const EpochRecord&) { ++calls; });
  EXPECT_EQ(calls, static_cast<int>(r.history.size()));
  EXPECT_LT(r.history.back().train_loss, r.history.front().train_loss);
  const auto d = validation_dice(r.params, data, r.val_indices, tc.scheme);
  EXPECT_DOUBLE_EQ(mean_of(d), r.best_monitor);
  EXPECT_EQ(r.history[r.best_epoch - 1].monitor, r.best_monitor);
}

TEST(Train, DeterministicForSeed) {
  const auto data = small_dataset(6, 4);
  TrainConfig tc;
  tc.max_epochs = 2;
  const auto a = train(tiny(), tc, data), b = train(tiny(), tc, data);
  EXPECT_EQ(a.params, b.params);
  EXPECT_EQ(a.history.size(), b.history.size());
  for (std::size_t k = 0; k < a.history.size(); ++k)
    EXPECT_EQ(a.history[k].train_loss, b.history[k].train_loss);
}

TEST(Train, Errors) {
  const auto data = small_dataset(4, 5);
  EXPECT_THROW(train(tiny(), TrainConfig{}, data), ConfigError);
  const auto more = small_dataset(6, 5);
  TrainConfig tc;
  tc.loss = LossKind::SoftmaxCE;
  EXPECT_THROW(train(tiny(Head::Multilevel), tc, more), ConfigError);
  tc = TrainConfig{};
  tc.validation_fraction = 1.0;
  EXPECT_THROW(train(tiny(), tc, more), ConfigError);
}

TEST(Predict, SoftmaxProbabilitiesAndArgmax) {
  Rng rng(12);
  const auto p = build_network(tiny(Head::Softmax));
  const VolumeF in = random_input(rng, Shape{1, 8, 8});
  const auto probs = predict_activations(p, in);
  for (std::int64_t i = 0; i < probs.voxels(); ++i) {
    double s = 0.0;
    for (int c = 0; c < 4; ++c) s += probs.channel(c)[i];
    EXPECT_NEAR(s, 1.0, 1e-6);
  }
  const auto labels = predict_labels(p, in, ThresholdScheme::preset());
  EXPECT_EQ(labels.data()[0], argmax_labels(probs).data()[0]);
  VolumeF tie(Shape{1, 1, 1}, 3, 0.5f);
  EXPECT_EQ(argmax_labels(tie).data()[0], 0);
}

TEST(Predict, MultilevelActivationsInRange) {
  Rng rng(13);
  const auto p = build_network(tiny());
  const auto act = predict_activations(p, random_input(rng, Shape{1, 8, 8}));
  for (float a : act.data()) {
    EXPECT_GE(a, 0.0f);
    EXPECT_LE(a, 3.0f);
  }
}

TEST(History, CsvRoundTrip) {
  std::vector<EpochRecord> h{{1, 0.5, {0.1, 0.2, 0.3}, 0.2}, {2, 1.0 / 3.0, {0.9, 0.8, 0.7}, 0.8}};
  std::stringstream ss;
  write_history_csv(ss, h);
  const auto back = read_history_csv(ss);
  ASSERT_EQ(back.size(), 2u);
  EXPECT_EQ(back[1].train_loss, h[1].train_loss);
  EXPECT_EQ(back[1].val_dice, h[1].val_dice);
  EXPECT_EQ(back[0].epoch, 1);
}

TEST(Checkpoint, RoundTripAndErrors) {
  const fs::path dir = fs::path(testing::TempDir()) / "nestseg_ckpt";
  fs::create_directories(dir);
  Checkpoint ck;
  NetConfig c = tiny();
  c.deep_supervision = true;
  c.depth = 3;
  ck.params = build_network(c);
  ck.loss = LossKind::NCE;
  ck.alpha = 0.4;
  ck.scheme = ThresholdScheme({0.9, 1.55, 2.35});
  ck.epoch = 12;
  ck.monitor = 0.1 + 0.2;
  ck.val_cases = {"case001", "case007"};
  save_checkpoint(dir / "a.ckpt", ck);
  EXPECT_EQ(load_checkpoint(dir / "a.ckpt"), ck);

  std::string bytes = io::read_text(dir / "a.ckpt");
  io::write_text(dir / "t.ckpt", bytes.substr(0, bytes.size() - 9));
  EXPECT_THROW(load_checkpoint(dir / "t.ckpt"), TruncatedPayloadError);
  io::write_text(dir / "l.ckpt", bytes + "x");
  EXPECT_THROW(load_checkpoint(dir / "l.ckpt"), HeaderMismatchError);
  io::write_text(dir / "m.ckpt", "garbage 12\n{}");
  EXPECT_THROW(load_checkpoint(dir / "m.ckpt"), CorruptHeaderError);
  EXPECT_THROW(load_checkpoint(dir / "missing.ckpt"), DataError);
}

TEST(ConfigJson, RoundTrip) {
  NetConfig c = tiny(Head::Softmax);
  c.activation = {4, 0.8, 12.0};
  c.seed = 123456789012345ull;
  const nlohmann::json j = c;
  EXPECT_EQ(j.get<NetConfig>(), c);
  TrainConfig tc;
  tc.loss = LossKind::NCE;
  tc.scheme = ThresholdScheme({0.6, 1.6, 2.4});
  const nlohmann::json jt = tc;
  const auto back = jt.get<TrainConfig>();
  EXPECT_EQ(back.loss, tc.loss);
  EXPECT_EQ(back.scheme, tc.scheme);
  EXPECT_EQ(back.learning_rate, tc.learning_rate);
  EXPECT_EQ(parse_head("softmax"), Head::Softmax);
  EXPECT_THROW(parse_head("sigmoid"), ConfigError);
}
