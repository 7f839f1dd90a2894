#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>

#include "diat/checkpoint.hpp"
#include "diat/ops.hpp"
#include "diat/pipeline.hpp"
#include "test_util.hpp"

using namespace diat;
using namespace diat::pipeline;
namespace fs = std::filesystem;

namespace {

constexpr nn::Scale kTiny{1, 8};  // 16x16 images, channels / 8

fs::path scratch(const std::string& name) {
  auto p = fs::temp_directory_path() / ("diat_pipeline_" + name);
  fs::remove_all(p);
  return p;
}

bool same_params(const nn::Network& a, const nn::Network& b) {
  if (a.params().size() != b.params().size()) return false;
  for (std::size_t i = 0; i < a.params().size(); ++i)
    if (a.params()[i].value.to_vector() != b.params()[i].value.to_vector()) return false;
  return true;
}

struct Setup {
  data::Dataset ds;
  TrainConfig cfg;
  nn::Network t, d, phi, c;
  TrainData td;

  static Setup make(Variant v = Variant::diat2) {
    Setup s;
    data::GeneratorConfig g;
    g.n = 48;
    g.size = 16;
    g.n_identities = 8;
    s.ds = data::generate_in_memory(g);
    s.cfg = TrainConfig::for_variant(v);
    s.cfg.scale = kTiny;
    s.cfg.batch = 4;
    s.cfg.eval_every = 2;
    s.cfg.max_iters = 100;
    s.t = nn::build_transform_net(kTiny, 1);
    s.d = nn::build_discriminator(kTiny, 2);
    s.phi = nn::build_identity_embedder(kTiny, 8, 3);
    s.c = nn::build_attribute_classifier(kTiny, 4);
    s.phi.set_trainable(false);
    s.c.set_trainable(false);
    auto split = data::split_guided_and_input(s.ds.manifest, s.cfg.attribute, 0, 0);
    s.td.inputs = data::gather(s.ds.images, split.input);
    s.td.guided = data::gather(s.ds.images, split.guided);
    s.td.eval = data::gather(s.td.inputs, {0, 1, 2, 3});
    return s;
  }
  Auxiliary aux() const { return Auxiliary{&phi, nullptr, &c, &phi}; }
};

}  // namespace

// --- configuration ---

TEST(Variants, DefaultsValidateAndSelectTerms) {
  struct Row {
    Variant v;
    TermSet terms;
    double lr;
    EnhanceMode enhance;
  } rows[] = {
      {Variant::diat, {true, true, false, true}, 1e-4, EnhanceMode::automatic},
      {Variant::diat_a, {true, false, true, false}, 1e-5, EnhanceMode::automatic},
      {Variant::diat_a0, {true, false, true, false}, 1e-5, EnhanceMode::none},
      {Variant::diat1, {true, false, false, false}, 1e-4, EnhanceMode::none},
      {Variant::diat2, {true, true, false, false}, 1e-4, EnhanceMode::none},
      {Variant::diat3, {true, true, false, true}, 1e-4, EnhanceMode::none},
  };
  for (const auto& r : rows) {
    SCOPED_TRACE(std::string(variant_name(r.v)));
    const auto c = TrainConfig::for_variant(r.v);
    EXPECT_NO_THROW(c.validate());
    EXPECT_EQ(active_terms(c), r.terms);
    EXPECT_EQ(c.lr_t, r.lr);
    EXPECT_EQ(c.lr_d, r.lr);
    EXPECT_EQ(c.enhance, r.enhance);
    EXPECT_EQ(parse_variant(variant_name(r.v)), r.v);
  }
  const auto d1 = TrainConfig::for_variant(Variant::diat1);
  EXPECT_EQ(d1.loss.lambda, 0.0);
  EXPECT_EQ(d1.loss.gamma, 0.0);
  EXPECT_EQ(TrainConfig::for_variant(Variant::diat).loss.lambda, 0.1);
  EXPECT_EQ(TrainConfig::for_variant(Variant::diat).loss.gamma, 0.001);
  EXPECT_EQ(d1.dstep, 1);
  EXPECT_EQ(d1.tstep, 2);
  EXPECT_EQ(d1.batch, 16);
}

TEST(Variants, ContradictoryConfigsRejected) {
  auto c = TrainConfig::for_variant(Variant::diat1);
  c.loss.lambda = 0.1;
  EXPECT_THROW(c.validate(), std::invalid_argument);
  c = TrainConfig::for_variant(Variant::diat_a);
  c.loss.gamma = 0.001;
  EXPECT_THROW(c.validate(), std::invalid_argument);
  c = TrainConfig::for_variant(Variant::diat2);
  c.enhance = EnhanceMode::local;
  EXPECT_THROW(c.validate(), std::invalid_argument);
  c = TrainConfig::for_variant(Variant::diat3);
  c.loss.gamma = 0.0;
  EXPECT_THROW(c.validate(), std::invalid_argument);
  c = TrainConfig::for_variant(Variant::diat);
  c.dstep = 0;
  EXPECT_THROW(c.validate(), std::invalid_argument);
  c = TrainConfig::for_variant(Variant::diat);
  c.lr_t = 0.0;
  EXPECT_THROW(c.validate(), std::invalid_argument);
  EXPECT_THROW(parse_variant("DIAT4"), std::invalid_argument);
  EXPECT_THROW(parse_enhance("sharpen"), std::invalid_argument);
}

TEST(Variants, EnhancementFollowsAttributeKind) {
  auto c = TrainConfig::for_variant(Variant::diat);
  EXPECT_EQ(c.effective_enhance(), EnhanceMode::local);  // glasses
  c.attribute = data::AttributeTarget::parse("elderly");
  EXPECT_EQ(c.effective_enhance(), EnhanceMode::global);
  c.enhance = EnhanceMode::none;
  EXPECT_EQ(c.effective_enhance(), EnhanceMode::none);
}

TEST(Variants, GammaScalesWithResolution) {
  auto c = TrainConfig::for_variant(Variant::diat);
  EXPECT_EQ(c.image_size(), 32);
  EXPECT_DOUBLE_EQ(c.effective_loss().gamma, 0.001 * 16.0);
  c.scale_gamma_with_resolution = false;
  EXPECT_EQ(c.effective_loss().gamma, 0.001);
  EXPECT_EQ(c.effective_loss().lambda, 0.1);
}

// --- Algorithm 1 ---

// Re-derives two outer iterations step by step and compares bit-for-bit.
// Covers the dstep/tstep counts, that each phase only moves its own network,
// and that fakes at iteration k come from the iteration-k transform.
TEST(Training, MatchesStepByStepReference) {
  auto s = Setup::make();
  s.cfg.dstep = 2;
  s.cfg.tstep = 3;
  auto state = start_training(s.cfg, s.t, s.d);
  auto rng = state.rng;
  auto rt = s.t.clone(), rd = s.d.clone();
  rt.set_trainable(true);
  rd.set_trainable(true);
  optim::Adam ot(rt, {.lr = s.cfg.lr_t}), od(rd, {.lr = s.cfg.lr_d});
  const auto lc = s.cfg.effective_loss();

  train_transform(s.cfg, state, s.td, s.aux(), 2);
  EXPECT_EQ(state.iteration, 2);
  EXPECT_EQ(state.opt_d.t(), 4);
  EXPECT_EQ(state.opt_t.t(), 6);

  for (int k = 0; k < 2; ++k) {
    rt.set_trainable(false);
    rd.set_trainable(true);
    for (int i = 0; i < 2; ++i) {
      const auto x = sample_rows(s.td.inputs, 4, rng);
      const auto a = sample_rows(s.td.guided, 4, rng);
      Tensor fake;
      {
        NoGradGuard g;
        fake = rt(x);
      }
      rd.zero_grads();
      GradTape tape;
      tape.backward(loss::diat_discriminator_loss(rd, a, fake, x, lc, false));
      od.step();
    }
    const auto d_after = rd.clone();
    rd.set_trainable(false);
    rt.set_trainable(true);
    for (int i = 0; i < 3; ++i) {
      const auto x = sample_rows(s.td.inputs, 4, rng);
      rt.zero_grads();
      GradTape tape;
      tape.backward(loss::diat_generator_terms(rd, nullptr, s.phi, rt(x), x, lc).loss_t);
      ot.step();
    }
    EXPECT_TRUE(same_params(rd, d_after)) << "T updates moved D";
  }
  EXPECT_TRUE(same_params(state.t, rt));
  EXPECT_TRUE(same_params(state.d, rd));
  EXPECT_FALSE(same_params(state.t, s.t));
}

TEST(Training, IdenticalRunsGiveIdenticalReports) {
  auto s = Setup::make();
  auto a = start_training(s.cfg, s.t, s.d);
  auto b = start_training(s.cfg, s.t, s.d);
  train_transform(s.cfg, a, s.td, s.aux(), 4);
  train_transform(s.cfg, b, s.td, s.aux(), 4);
  EXPECT_EQ(a.report.to_tsv(), b.report.to_tsv());
  EXPECT_TRUE(same_params(a.t, b.t));
  auto c_cfg = s.cfg;
  c_cfg.seed = 1;
  auto c = start_training(c_cfg, s.t, s.d);
  train_transform(c_cfg, c, s.td, s.aux(), 4);
  EXPECT_NE(a.report.to_tsv(), c.report.to_tsv());
}

TEST(Training, ResumeIsBitExact) {
  auto s = Setup::make(Variant::diat_a);
  s.cfg.lr_t = s.cfg.lr_d = 1e-4;
  auto full = start_training(s.cfg, s.t, s.d);
  train_transform(s.cfg, full, s.td, s.aux(), 5);

  const auto dir = scratch("resume");
  auto first = start_training(s.cfg, s.t, s.d);
  train_transform(s.cfg, first, s.td, s.aux(), 3);
  first.save(dir);

  auto resumed = start_training(s.cfg, s.t, s.d);  // fresh nets, then overwritten
  resumed.load(dir);
  EXPECT_EQ(resumed.iteration, 3);
  train_transform(s.cfg, resumed, s.td, s.aux(), 5);
  EXPECT_TRUE(same_params(full.t, resumed.t));
  EXPECT_TRUE(same_params(full.d, resumed.d));
  EXPECT_EQ(full.report.to_tsv(), resumed.report.to_tsv());
  fs::remove_all(dir);
}

TEST(Training, LoadWithoutCheckpointIsMissingPrerequisite) {
  auto s = Setup::make();
  auto st = start_training(s.cfg, s.t, s.d);
  EXPECT_THROW(st.load(scratch("nothing")), MissingPrerequisite);
}

TEST(Training, StopsOnPlateauAndMaxIters) {
  auto s = Setup::make();
  s.cfg.eval_every = 1;
  s.cfg.plateau_window = 2;
  s.cfg.plateau_min_delta = 2.0;  // unreachable gain, so the first check stops
  auto st = start_training(s.cfg, s.t, s.d);
  int checkpoints = 0;
  train_transform(s.cfg, st, s.td, s.aux(), -1, [&](const TrainState&) { ++checkpoints; });
  EXPECT_TRUE(st.finished);
  EXPECT_EQ(st.iteration, 3);
  EXPECT_EQ(st.report.stop_reason, "plateau");
  EXPECT_EQ(checkpoints, 1);

  s.cfg.max_iters = 2;
  s.cfg.plateau_window = 50;
  auto st2 = start_training(s.cfg, s.t, s.d);
  train_transform(s.cfg, st2, s.td, s.aux());
  EXPECT_EQ(st2.iteration, 2);
  EXPECT_EQ(st2.report.stop_reason, "max_iters");
  ASSERT_EQ(st2.report.rows.size(), 2u);
  EXPECT_EQ(st2.report.rows[1].iteration, 2);
}

TEST(Training, ScoresCarryBetweenEvaluations) {
  auto s = Setup::make();
  s.cfg.eval_every = 3;
  auto st = start_training(s.cfg, s.t, s.d);
  train_transform(s.cfg, st, s.td, s.aux(), 4);
  const auto& r = st.report.rows;
  ASSERT_EQ(r.size(), 4u);
  EXPECT_EQ(r[1].attribute_score, r[0].attribute_score);
  EXPECT_EQ(r[1].identity_distance, r[0].identity_distance);
  EXPECT_EQ(r[3].attribute_score, r[2].attribute_score);
  for (const auto& row : r) {
    EXPECT_GE(row.attribute_score, 0.0);
    EXPECT_LE(row.attribute_score, 1.0);
    EXPECT_TRUE(std::isfinite(row.loss_d));
  }
}

TEST(Training, NonFiniteInputDiverges) {
  auto s = Setup::make();
  auto v = s.td.inputs.to_vector();
  for (auto& x : v) x = std::nan("");
  s.td.inputs = Tensor::from(s.td.inputs.shape(), v, s.td.inputs.dtype());
  auto st = start_training(s.cfg, s.t, s.d);
  try {
    train_transform(s.cfg, st, s.td, s.aux(), 3);
    FAIL() << "expected Diverged";
  } catch (const Diverged& e) {
    EXPECT_EQ(e.iteration, 1);
  }
}

TEST(Training, MissingNetworksRejected) {
  auto s = Setup::make(Variant::diat3);
  auto st = start_training(s.cfg, s.t, s.d);
  EXPECT_THROW(train_transform(s.cfg, st, s.td, s.aux(), 1), MissingPrerequisite);  // no f
  auto aux = s.aux();
  aux.c_attr = nullptr;
  auto s2 = Setup::make();
  auto st2 = start_training(s2.cfg, s2.t, s2.d);
  EXPECT_THROW(train_transform(s2.cfg, st2, s2.td, aux, 1), MissingPrerequisite);
  aux = s2.aux();
  aux.phi = nullptr;
  EXPECT_THROW(train_transform(s2.cfg, st2, s2.td, aux, 1), MissingPrerequisite);
}

TEST(Training, AttributeOnlyVariantNeedsNoEmbedder) {
  auto s = Setup::make(Variant::diat1);
  auto aux = s.aux();
  aux.phi = nullptr;
  aux.phi_eval = nullptr;
  auto st = start_training(s.cfg, s.t, s.d);
  train_transform(s.cfg, st, s.td, aux, 1);
  EXPECT_EQ(st.report.rows.at(0).identity, 0.0);
  EXPECT_EQ(st.report.rows.at(0).identity_distance, 0.0);
}

TEST(Report, TsvRoundTrip) {
  TrainReport r;
  r.rows.push_back({1, 1.25, 0.5, 0.125, 0.0, 0.5125, 0.75, 3.5});
  r.rows.push_back({2, 1.0 / 3.0, 2.0, 1e-9, 7.0, -1.5, 1.0, 0.0});
  r.iterations_to_threshold = 2;
  r.stop_reason = "plateau";
  const auto text = r.to_tsv();
  EXPECT_EQ(text.substr(0, text.find('\n')),
            "iteration\tloss_d\tadversarial\tidentity\tsmooth\tloss_t\tattribute_score\tidentity_distance");
  const auto back = TrainReport::from_tsv(text);
  EXPECT_EQ(back.to_tsv(), text);
  EXPECT_EQ(back.rows.size(), 2u);
  EXPECT_EQ(back.rows[0].attribute_score, 0.75);
  EXPECT_EQ(back.iterations_to_threshold, 2);
  EXPECT_THROW(TrainReport::from_tsv("h\n1\t2\n"), std::invalid_argument);
}

// --- auxiliary phases ---

TEST(Phases, PretrainTransformReducesLoss) {
  auto s = Setup::make();
  auto r = pretrain_transform(s.t, s.td.inputs, s.td.eval, {30, 4, 1e-3, 0});
  EXPECT_EQ(r.losses.size(), 30u);
  EXPECT_LT(r.final_loss, r.initial_loss);
  EXPECT_GT(r.held_out_metric, 0.0);
  EXPECT_FALSE(s.t.trainable());
}

TEST(Phases, DiscriminatorNeedsBothClasses) {
  auto s = Setup::make();
  const auto target = data::AttributeTarget::parse("glasses");
  std::vector<std::int64_t> only_pos;
  for (std::int64_t i = 0; i < s.ds.size(); ++i)
    if (s.ds.has(i, "glasses")) only_pos.push_back(i);
  EXPECT_THROW(pretrain_discriminator(s.d, s.ds, only_pos, only_pos, target, {2, 4, 1e-3, 0}),
               std::invalid_argument);
  auto all = data::train_held_out(s.ds.size());
  auto r = pretrain_discriminator(s.d, s.ds, all.train, all.held_out, target, {3, 4, 1e-3, 0});
  EXPECT_GE(r.held_out_metric, 0.0);
  EXPECT_LE(r.held_out_metric, 1.0);
}

TEST(Phases, ClassifierAndEmbedderReportAccuracy) {
  auto s = Setup::make();
  auto all = data::train_held_out(s.ds.size());
  auto c = nn::build_attribute_classifier(kTiny, 9);
  auto rc = train_attribute_classifier(c, s.ds, 0, all.train, all.held_out, {5, 4, 1e-3, 0});
  EXPECT_TRUE(std::isfinite(rc.final_loss));
  EXPECT_GE(rc.held_out_metric, 0.0);
  auto phi = nn::build_identity_embedder(kTiny, 8, 9);
  auto re = train_embedder(phi, s.ds, all.train, all.held_out, {5, 4, 1e-3, 0});
  EXPECT_GE(re.held_out_metric, 0.0);
  EXPECT_LE(re.held_out_metric, 1.0);
}

TEST(Phases, RegularizerRequiresFrozenEmbedder) {
  auto s = Setup::make();
  auto g = nn::build_reconstruction_net(kTiny, 5);
  auto f = nn::build_denoising_net(kTiny, 6, 4);
  s.phi.set_trainable(true);
  EXPECT_THROW(train_regularizer(g, f, s.phi, s.td.inputs, s.td.eval, {}, {1, 4, 1e-3, 0}, {1, 4, 1e-3, 0}),
               std::logic_error);
  s.phi.set_trainable(false);
  auto r = train_regularizer(g, f, s.phi, s.td.inputs, s.td.eval, {}, {2, 4, 1e-3, 0}, {2, 4, 1e-3, 0});
  EXPECT_EQ(r.f.held_out_metric, r.clean_residual_per_pixel);
  EXPECT_FALSE(g.trainable());
  EXPECT_FALSE(f.trainable());
}

TEST(Phases, GlobalEnhancerRejectsNonPositiveSigma) {
  auto e = nn::build_global_enhancer(kTiny, 3);
  auto s = Setup::make();
  EXPECT_THROW(train_global_enhancer(e, s.td.inputs, s.td.eval, 0.0, {1, 4, 1e-3, 0}), std::invalid_argument);
  EXPECT_THROW(train_global_enhancer(e, s.td.inputs, s.td.eval, -1.0, {1, 4, 1e-3, 0}), std::invalid_argument);
}

TEST(Phases, LocalEnhancerNeedsFrozenTransform) {
  auto s = Setup::make();
  auto e = nn::build_local_enhancer(kTiny, 3, 4);
  const auto m = s.ds.mask("glasses");
  s.t.set_trainable(true);
  EXPECT_THROW(train_local_enhancer(e, s.t, s.phi, s.ds.images, m, s.ds.images, m, {}, {1, 4, 1e-3, 0}),
               std::logic_error);
  s.t.set_trainable(false);
  auto r = train_local_enhancer(e, s.t, s.phi, s.ds.images, m, s.ds.images, m, {}, {2, 4, 1e-3, 0});
  EXPECT_GE(r.held_out_metric, 0.0);
}

// --- inference and evaluation ---

TEST(Inference, NoneModeIsClampedTransformAndKeepsOrder) {
  auto s = Setup::make();
  const auto x = data::gather(s.ds.images, {0, 1, 2, 3, 4});
  const auto out = run_transfer(s.t, nullptr, EnhanceMode::none, x);
  Tensor raw;
  {
    NoGradGuard g;
    raw = clamp(s.t(x), 0.0, 1.0);
  }
  EXPECT_EQ(out.to_vector(), raw.to_vector());
  ASSERT_EQ(out.shape()[0], 5);
  for (std::int64_t i : {0, 3}) {
    const auto one = data::gather(x, {i});
    EXPECT_LE(test::max_abs_diff(run_transfer(s.t, nullptr, EnhanceMode::none, one), data::gather(out, {i})), 1e-6);
  }
  const auto first = data::gather(x, {0});
  const auto single = run_transfer(s.t, nullptr, EnhanceMode::none, first.view(Shape{3, 16, 16}));
  EXPECT_EQ(single.shape(), (Shape{3, 16, 16}));
  EXPECT_EQ(single.to_vector(), run_transfer(s.t, nullptr, EnhanceMode::none, first).to_vector());
}

TEST(Inference, EnhancedModesNeedAnEnhancer) {
  auto s = Setup::make();
  const auto x = data::gather(s.ds.images, {0});
  EXPECT_THROW(run_transfer(s.t, nullptr, EnhanceMode::local, x), MissingPrerequisite);
  EXPECT_THROW(run_transfer(s.t, nullptr, EnhanceMode::automatic, x), std::invalid_argument);
  auto el = nn::build_local_enhancer(kTiny, 1, 4);
  auto eg = nn::build_global_enhancer(kTiny, 1);
  for (auto [mode, e] : {std::pair{EnhanceMode::local, &el}, std::pair{EnhanceMode::global, &eg}}) {
    const auto out = run_transfer(s.t, e, mode, x);
    EXPECT_EQ(out.shape(), x.shape());
    for (double v : out.to_vector()) {
      EXPECT_GE(v, 0.0);
      EXPECT_LE(v, 1.0);
    }
  }
}

TEST(Evaluation, PairDistanceOracle) {
  const auto a = Tensor::from(Shape{2, 2}, std::vector<double>{0, 0, 1, 1});
  const auto b = Tensor::from(Shape{2, 2}, std::vector<double>{3, 4, 1, 1});
  EXPECT_DOUBLE_EQ(mean_pair_distance(a, b), 2.5);
  EXPECT_EQ(mean_pair_distance(a, a), 0.0);
  EXPECT_THROW(mean_pair_distance(a, Tensor::zeros(Shape{2, 3})), ShapeError);
}

TEST(Evaluation, SelfPairsHaveZeroIdentityDistance) {
  auto s = Setup::make();
  const auto x = data::gather(s.ds.images, {0, 1, 2});
  const auto e = embed(s.phi, x);
  EXPECT_EQ(e.rank(), 2u);
  EXPECT_EQ(e.shape()[0], 3);
  EXPECT_EQ(mean_pair_distance(e, embed(s.phi, x)), 0.0);
}

TEST(Evaluation, MetricsAreConsistent) {
  auto s = Setup::make();
  std::vector<std::int64_t> rows{0, 1, 2, 3, 4, 5};
  std::vector<int> ids;
  for (auto i : rows) ids.push_back(s.ds.manifest.rows[static_cast<std::size_t>(i)].identity);
  const auto x = data::gather(s.ds.images, rows);
  const auto m = data::gather(s.ds.mask("glasses"), rows);
  const auto r = evaluate(s.t, nullptr, EnhanceMode::none, s.phi, s.c, s.cfg.attribute, x, ids, &m);
  EXPECT_EQ(r.count, 6);
  EXPECT_GT(r.identity_distance, 0.0);
  EXPECT_GT(r.baseline_distance, 0.0);
  EXPECT_GE(r.outside_mask_change, 0.0);
  EXPECT_GE(r.attribute_success, 0.0);
  EXPECT_LE(r.attribute_success, 1.0);
  const auto out = run_transfer(s.t, nullptr, EnhanceMode::none, x);
  EXPECT_DOUBLE_EQ(r.attribute_success, attribute_success(s.c, s.cfg.attribute, out));
  EXPECT_DOUBLE_EQ(r.identity_distance, mean_pair_distance(embed(s.phi, x), embed(s.phi, out)));
  const auto no_mask = evaluate(s.t, nullptr, EnhanceMode::none, s.phi, s.c, s.cfg.attribute, x, ids);
  EXPECT_EQ(no_mask.outside_mask_change, -1.0);
  EXPECT_THROW(evaluate(s.t, nullptr, EnhanceMode::none, s.phi, s.c, s.cfg.attribute, x, {1, 2}),
               std::invalid_argument);
}

TEST(Evaluation, PsnrOracle) {
  const auto a = Tensor::full(Shape{1, 3, 4, 4}, 0.0, DType::f64);
  const auto b = Tensor::full(Shape{1, 3, 4, 4}, 0.1, DType::f64);
  EXPECT_NEAR(psnr(a, b), 20.0, 1e-9);
  EXPECT_TRUE(std::isinf(psnr(a, a)));
}

TEST(Evaluation, MosaicLayout) {
  std::vector<double> v(2 * 3 * 4 * 4, 0.0);
  const auto zeros = Tensor::from(Shape{2, 3, 4, 4}, v);
  for (std::size_t i = 48; i < 96; ++i) v[i] = 1.0;  // second image white
  const auto second_white = Tensor::from(Shape{2, 3, 4, 4}, v);
  const auto path = scratch("mosaic.ppm");
  write_mosaic(path, {zeros, second_white});
  const auto img = data::decode_image(path);
  ASSERT_EQ(img.shape(), (Shape{3, 8, 8}));
  EXPECT_EQ(img.at(5 * 8 + 5), 1.0);  // row 1, column 1
  EXPECT_EQ(img.at(5 * 8 + 1), 0.0);  // row 1, column 0
  EXPECT_EQ(img.at(2 * 64 + 1 * 8 + 5), 0.0);  // row 0, column 1
  fs::remove(path);
  EXPECT_THROW(write_mosaic(path, {}), std::invalid_argument);
}

TEST(Sampling, RowsComeFromTheBatchAndFollowTheRng) {
  const auto b = Tensor::from(Shape{4, 1}, std::vector<double>{10, 20, 30, 40});
  std::mt19937_64 r1(5), r2(5);
  const auto x = sample_rows(b, 64, r1).to_vector();
  EXPECT_EQ(x, sample_rows(b, 64, r2).to_vector());
  for (double v : x) EXPECT_TRUE(v == 10 || v == 20 || v == 30 || v == 40);
}
