#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <numeric>
#include <set>

#include "handda/ta3n.hpp"
#include "oracles.hpp"

using namespace handda;
using namespace handda::ta3n;
using nn::Matrix;

namespace {

TA3NConfig tiny_config() {
  TA3NConfig c;
  c.num_seg = 3;
  c.feat_dim = 3;
  c.input_dim = 2;
  c.num_verbs = 2;
  c.num_nouns = 3;
  c.relation_scales = {2, 3};
  c.disc_hidden = 2;
  c.lambda_spatial = 0.3;
  c.lambda_relation = 0.7;
  c.lambda_temporal = 0.4;
  c.gamma = 0.2;
  c.grl = {1.0, adversarial::GrlSchedule::constant, 10.0};
  return c;
}

ClipFeatures random_clip(Rng& rng, const TA3NConfig& cfg, const std::string& id, DomainLabel domain) {
  ClipFeatures c;
  c.id = id;
  c.domain = domain;
  c.frames = Matrix(cfg.num_seg, cfg.input_dim);
  for (nn::Index i = 0; i < c.frames.size(); ++i) c.frames.data()[i] = rng.uniform(-1.5, 1.5);
  if (domain == DomainLabel::source) {
    c.label = ActionLabel{static_cast<int>(rng.index(static_cast<std::size_t>(cfg.num_verbs))),
                          static_cast<int>(rng.index(static_cast<std::size_t>(cfg.num_nouns)))};
  }
  return c;
}

// Plain-loop reference implementations.
std::vector<double> affine(const std::vector<double>& x, const nn::Linear& l) {
  std::vector<double> y(static_cast<std::size_t>(l.out_dim()));
  for (nn::Index o = 0; o < l.out_dim(); ++o) {
    double s = l.bias.value(0, o);
    for (nn::Index i = 0; i < l.in_dim(); ++i) s += x[static_cast<std::size_t>(i)] * l.weight.value(i, o);
    y[static_cast<std::size_t>(o)] = s;
  }
  return y;
}

std::vector<double> relu(std::vector<double> v) {
  for (auto& x : v) x = std::max(0.0, x);
  return v;
}

std::vector<double> mlp(const std::vector<double>& x, const nn::Mlp2& m) {
  return affine(relu(affine(x, m.first)), m.second);
}

std::vector<double> softmax(const std::vector<double>& z) {
  double mx = *std::max_element(z.begin(), z.end()), s = 0.0;
  std::vector<double> p(z.size());
  for (std::size_t i = 0; i < z.size(); ++i) s += (p[i] = std::exp(z[i] - mx));
  for (auto& v : p) v /= s;
  return p;
}

double shannon(const std::vector<double>& p) {
  double h = 0.0;
  for (double v : p) h -= v * std::log(std::max(v, 1e-12));
  return h;
}

/// Index 0 of a discriminator output is the source class.
double domain_nll(const std::vector<double>& logits, bool target) { return -std::log(softmax(logits)[target ? 1 : 0]); }

std::vector<std::vector<double>> encode(Model& m, const ClipFeatures& c) {
  std::vector<std::vector<double>> out;
  for (nn::Index t = 0; t < c.frames.rows(); ++t) {
    std::vector<double> x(c.frames.row(t).data(), c.frames.row(t).data() + c.frames.cols());
    out.push_back(relu(affine(x, m.encoder)));
  }
  return out;
}

/// Nested-loop enumeration of every increasing n-tuple.
void tuples_rec(int t, int n, int start, std::vector<int>& cur, std::vector<std::vector<int>>& out) {
  if (static_cast<int>(cur.size()) == n) {
    out.push_back(cur);
    return;
  }
  for (int f = start; f < t; ++f) {
    cur.push_back(f);
    tuples_rec(t, n, f + 1, cur, out);
    cur.pop_back();
  }
}

std::vector<double> relation_oracle(Model& m, const std::vector<std::vector<double>>& enc, int n) {
  std::vector<std::vector<int>> all;
  std::vector<int> cur;
  tuples_rec(static_cast<int>(enc.size()), n, 0, cur, all);
  std::vector<double> acc(enc.front().size(), 0.0);
  for (const auto& tuple : all) {
    std::vector<double> x;
    for (int f : tuple) x.insert(x.end(), enc[static_cast<std::size_t>(f)].begin(), enc[static_cast<std::size_t>(f)].end());
    const auto r = mlp(x, m.relation[m.scale_slot(n)]);
    for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += r[i];
  }
  for (auto& v : acc) v /= static_cast<double>(all.size());
  return acc;
}

Matrix relation_of(Model& m, const ClipFeatures& c, int n, Rng& sampler) {
  nn::Tape tape;
  return relation_features(tape, m, encode_frames(tape, m, tape.constant(c.frames)), 1, n, sampler).value();
}

}  // namespace

TEST(Ta3nConfigTest, ValidationAndRoundTrip) {
  TA3NConfig c;
  EXPECT_NO_THROW(c.validate());
  c.relation_scales = {1, 2};
  EXPECT_THROW(c.validate(), std::invalid_argument);
  c.relation_scales = {2, 9};
  EXPECT_THROW(c.validate(), std::invalid_argument);
  c = TA3NConfig{};
  c.gamma = -0.1;
  EXPECT_THROW(c.validate(), std::invalid_argument);
  c = tiny_config();
  c.tuples_per_scale = 7;
  const TA3NConfig back = TA3NConfig::from_key_values(c.to_key_values());
  EXPECT_EQ(back.to_key_values(), c.to_key_values());
  EXPECT_EQ(back.tuples_per_scale, std::optional<int>(7));
}

TEST(TupleTest, ExhaustiveEnumeration) {
  Rng rng(1);
  const auto t = draw_tuples(5, 2, std::nullopt, rng);
  ASSERT_EQ(t.size(), 10u);
  EXPECT_EQ(t.front(), (std::vector<int>{0, 1}));
  EXPECT_EQ(t.back(), (std::vector<int>{3, 4}));
  EXPECT_EQ(draw_tuples(5, 3, std::nullopt, rng).size(), 10u);
  EXPECT_EQ(draw_tuples(8, 4, std::nullopt, rng).size(), 70u);
  EXPECT_THROW(draw_tuples(3, 4, std::nullopt, rng), std::invalid_argument);
}

TEST(TupleTest, SampledTuplesAreIncreasingAndCoverWithoutReplacement) {
  Rng rng(2);
  const auto t = draw_tuples(6, 3, 20, rng);
  std::set<std::vector<int>> seen(t.begin(), t.end());
  EXPECT_EQ(seen.size(), 20u);
  const auto big = draw_tuples(40, 5, 50, rng);
  for (const auto& tuple : big) {
    ASSERT_EQ(tuple.size(), 5u);
    for (std::size_t i = 1; i < tuple.size(); ++i) EXPECT_LT(tuple[i - 1], tuple[i]);
    EXPECT_GE(tuple.front(), 0);
    EXPECT_LT(tuple.back(), 40);
  }
}

TEST(SegmentTest, CentresAndTrainingRange) {
  EXPECT_EQ(segment_indices(16, 8, false, nullptr), (std::vector<int>{1, 3, 5, 7, 9, 11, 13, 15}));
  EXPECT_EQ(segment_indices(3, 3, false, nullptr), (std::vector<int>{0, 1, 2}));
  Rng rng(3);
  for (int k = 0; k < 50; ++k) {
    const auto idx = segment_indices(16, 4, true, &rng);
    for (int s = 0; s < 4; ++s) {
      EXPECT_GE(idx[static_cast<std::size_t>(s)], 4 * s);
      EXPECT_LT(idx[static_cast<std::size_t>(s)], 4 * s + 4);
    }
  }
  EXPECT_THROW(segment_indices(16, 4, true, nullptr), std::invalid_argument);
}

TEST(EncodeTest, ZeroParametersAndShape) {
  TA3NConfig cfg = tiny_config();
  Model m(cfg, 4);
  Rng rng(4);
  const auto clip = random_clip(rng, cfg, "c", DomainLabel::source);
  const Matrix e = encode_frames(m, clip);
  EXPECT_EQ(e.rows(), cfg.num_seg);
  EXPECT_EQ(e.cols(), cfg.feat_dim);
  m.encoder.weight.value.setZero();
  m.encoder.bias.value.setZero();
  EXPECT_EQ(encode_frames(m, clip), Matrix::Zero(cfg.num_seg, cfg.feat_dim));

  // Identity projection with non-negative input passes through.
  cfg.input_dim = cfg.feat_dim;
  Model sq(cfg, 5);
  sq.encoder.weight.value.setIdentity();
  sq.encoder.bias.value.setZero();
  ClipFeatures pos;
  pos.frames = Matrix::Constant(cfg.num_seg, cfg.feat_dim, 0.25);
  EXPECT_EQ(encode_frames(sq, pos), pos.frames);
  ClipFeatures bad;
  bad.frames = Matrix::Zero(3, 7);
  EXPECT_THROW(encode_frames(sq, bad), std::invalid_argument);
}

TEST(RelationTest, ExhaustiveMatchesEnumerationAndIgnoresSeed) {
  TA3NConfig cfg;
  cfg.num_seg = 5;
  cfg.input_dim = 6;
  cfg.feat_dim = 8;
  cfg.relation_scales = {2, 3};
  Model m(cfg, 6);
  Rng rng(6);
  for (int k = 0; k < 5; ++k) {
    const auto clip = random_clip(rng, cfg, "c", DomainLabel::target);
    const auto enc = encode(m, clip);
    for (int n : {2, 3}) {
      Rng s1(1), s2(999);
      const Matrix a = relation_of(m, clip, n, s1);
      EXPECT_EQ(a, relation_of(m, clip, n, s2));
      const auto ref = relation_oracle(m, enc, n);
      for (std::size_t i = 0; i < ref.size(); ++i) EXPECT_NEAR(a(0, static_cast<nn::Index>(i)), ref[i], 1e-12);
    }
  }
}

TEST(RelationTest, SingleTupleIsNetworkOnWholeClip) {
  TA3NConfig cfg = tiny_config();
  cfg.tuples_per_scale = 4;
  Model m(cfg, 7);
  Rng rng(7);
  const auto clip = random_clip(rng, cfg, "c", DomainLabel::target);
  const auto enc = encode(m, clip);
  std::vector<double> x;
  for (const auto& f : enc) x.insert(x.end(), f.begin(), f.end());
  const auto ref = mlp(x, m.relation[m.scale_slot(3)]);
  Rng s1(1), s2(2);
  const Matrix a = relation_of(m, clip, 3, s1);
  EXPECT_EQ(a, relation_of(m, clip, 3, s2));
  for (std::size_t i = 0; i < ref.size(); ++i) EXPECT_NEAR(a(0, static_cast<nn::Index>(i)), ref[i], 1e-12);
  Rng s3(3);
  EXPECT_THROW(relation_of(m, clip, 4, s3), std::invalid_argument);
}

TEST(RelationTest, FrameOrderMatters) {
  TA3NConfig cfg;
  cfg.num_seg = 5;
  cfg.input_dim = 6;
  cfg.feat_dim = 8;
  cfg.relation_scales = {2, 3};
  Model m(cfg, 8);
  Rng rng(8);
  auto clip = random_clip(rng, cfg, "c", DomainLabel::target);
  Rng s(0);
  const Matrix fwd = relation_of(m, clip, 2, s);
  clip.frames = clip.frames.colwise().reverse().eval();
  EXPECT_GT((fwd - relation_of(m, clip, 2, s)).cwiseAbs().maxCoeff(), 1e-6);
}

TEST(RelationTest, BatchedClipsMatchOneAtATime) {
  TA3NConfig cfg;
  cfg.num_seg = 5;
  cfg.input_dim = 6;
  cfg.feat_dim = 8;
  cfg.relation_scales = {2, 3};
  Model m(cfg, 9);
  Rng rng(9);
  const auto a = random_clip(rng, cfg, "a", DomainLabel::target), b = random_clip(rng, cfg, "b", DomainLabel::target);
  nn::Tape tape;
  Matrix both(10, 6);
  both << a.frames, b.frames;
  Rng s(0);
  const Matrix r = relation_features(tape, m, encode_frames(tape, m, tape.constant(both)), 2, 3, s).value();
  EXPECT_NEAR((r.row(0) - relation_of(m, a, 3, s)).cwiseAbs().maxCoeff(), 0.0, 1e-12);
  EXPECT_NEAR((r.row(1) - relation_of(m, b, 3, s)).cwiseAbs().maxCoeff(), 0.0, 1e-12);
}

TEST(AggregateTest, SumOverScales) {
  Matrix v(1, 3);
  v << 1.0, -2.0, 0.5;
  EXPECT_EQ(aggregate_video(std::vector<Matrix>{v}), v);
  EXPECT_EQ(aggregate_video(std::vector<Matrix>{v, Matrix(-v)}), Matrix::Zero(1, 3));
  Rng rng(10);
  std::vector<Matrix> parts;
  Matrix expect = Matrix::Zero(2, 4);
  for (int s = 0; s < 4; ++s) {
    Matrix p(2, 4);
    for (nn::Index i = 0; i < p.size(); ++i) p.data()[i] = rng.normal();
    parts.push_back(p);
    for (nn::Index i = 0; i < p.size(); ++i) expect.data()[i] += p.data()[i];
  }
  EXPECT_LT((aggregate_video(parts) - expect).cwiseAbs().maxCoeff(), 1e-12);
  EXPECT_THROW(aggregate_video(std::vector<Matrix>{}), std::invalid_argument);
  EXPECT_THROW(aggregate_video(std::vector<Matrix>{v, Matrix::Zero(1, 2)}), std::invalid_argument);
}

TEST(ClassifyTest, UniformSimplexAndShiftInvariance) {
  TA3NConfig cfg = tiny_config();
  Model m(cfg, 11);
  const std::vector<double> feat{0.3, -1.0, 2.0};
  const auto [v, n] = classify(m, feat);
  EXPECT_NEAR(std::accumulate(v.probs().begin(), v.probs().end(), 0.0), 1.0, 1e-12);
  EXPECT_NEAR(std::accumulate(n.probs().begin(), n.probs().end(), 0.0), 1.0, 1e-12);
  m.verb_head.bias.value.array() += 3.0;
  const auto [v2, n2] = classify(m, feat);
  for (std::size_t i = 0; i < v.size(); ++i) EXPECT_NEAR(v2[i], v[i], 1e-12);
  for (std::size_t i = 0; i < n.size(); ++i) EXPECT_EQ(n2[i], n[i]);
  for (auto* p : {&m.verb_head.weight, &m.verb_head.bias, &m.noun_head.weight, &m.noun_head.bias}) p->value.setZero();
  const auto [vu, nu] = classify(m, feat);
  for (std::size_t i = 0; i < vu.size(); ++i) EXPECT_DOUBLE_EQ(vu[i], 0.5);
  for (std::size_t i = 0; i < nu.size(); ++i) EXPECT_DOUBLE_EQ(nu[i], 1.0 / 3.0);
  EXPECT_THROW(classify(m, std::vector<double>{1.0}), std::invalid_argument);
}

TEST(ClassifyTest, HeadsAreIsolated) {
  TA3NConfig cfg = tiny_config();
  Model m(cfg, 12);
  const std::vector<double> feat{0.5, 0.1, -0.4};
  const auto before = classify(m, feat);
  m.noun_head.weight.value(0, 0) += 1.0;
  m.noun_head.bias.value(0, 1) -= 2.0;
  const auto after = classify(m, feat);
  EXPECT_EQ(after.first.probs(), before.first.probs());
  EXPECT_NE(after.second.probs(), before.second.probs());
  m.verb_head.weight.value(1, 1) += 1.0;
  EXPECT_EQ(classify(m, feat).second.probs(), after.second.probs());
}

TEST(ObjectiveTest, Examples) {
  LossBundle b{1, 1, 1, 1, 1, 1, {{2, 1.0}, {3, 1.0}}};
  TA3NConfig c;
  c.lambda_spatial = c.lambda_relation = c.lambda_temporal = c.gamma = 1.0;
  // 2 classification + 2 entropy + one each for the spatial, mean relation
  // and temporal domain terms.
  EXPECT_EQ(total_objective(b, c), 7.0);
  c.lambda_spatial = c.lambda_relation = c.lambda_temporal = c.gamma = 0.0;
  EXPECT_EQ(total_objective(b, c), 2.0);
  Rng rng(13);
  for (int k = 0; k < 20; ++k) {
    LossBundle r{rng.uniform(), rng.uniform(), rng.uniform(), rng.uniform(), rng.uniform(), rng.uniform(),
                 {{2, rng.uniform()}, {3, rng.uniform()}, {4, rng.uniform()}}};
    c.lambda_spatial = rng.uniform();
    c.lambda_relation = rng.uniform();
    c.lambda_temporal = rng.uniform();
    c.gamma = rng.uniform();
    const double rel = (r.relation[2] + r.relation[3] + r.relation[4]) / 3.0;
    EXPECT_NEAR(total_objective(r, c), r.verb + r.noun + c.gamma * (r.ae_verb + r.ae_noun) + c.lambda_spatial * r.spatial +
                                           c.lambda_relation * rel + c.lambda_temporal * r.temporal,
                1e-12);
  }
}

TEST(ForwardLossesTest, ScalarTraceOracle) {
  const TA3NConfig cfg = tiny_config();
  Model m(cfg, 14);
  Rng rng(14);
  std::vector<ClipFeatures> clips{random_clip(rng, cfg, "s0", DomainLabel::source),
                                  random_clip(rng, cfg, "s1", DomainLabel::source),
                                  random_clip(rng, cfg, "t0", DomainLabel::target),
                                  random_clip(rng, cfg, "t1", DomainLabel::target)};
  const std::vector<const ClipFeatures*> src{&clips[0], &clips[1]}, tgt{&clips[2], &clips[3]};
  nn::Tape tape;
  Rng sampler(0);
  const LossBundle got = forward_losses(tape, m, src, tgt, 0.5, sampler).bundle;

  LossBundle want;
  double sd = 0.0;
  std::map<int, double> rd;
  for (std::size_t i = 0; i < clips.size(); ++i) {
    const bool target = i >= 2;
    const auto enc = encode(m, clips[i]);
    for (const auto& f : enc) sd += domain_nll(mlp(f, m.spatial_disc), target);
    std::vector<double> video(static_cast<std::size_t>(cfg.feat_dim), 0.0);
    for (int n : cfg.relation_scales) {
      const auto r = relation_oracle(m, enc, n);
      rd[n] += domain_nll(mlp(r, m.relation_disc[m.scale_slot(n)]), target);
      for (std::size_t j = 0; j < video.size(); ++j) video[j] += r[j];
    }
    const auto td = mlp(video, m.temporal_disc);
    want.temporal += domain_nll(td, target) / 4.0;
    const auto pv = softmax(affine(video, m.verb_head)), pn = softmax(affine(video, m.noun_head));
    if (target) {
      const double w = 1.0 + shannon(softmax(td));
      want.ae_verb += w * shannon(pv) / 2.0;
      want.ae_noun += w * shannon(pn) / 2.0;
    } else {
      want.verb -= std::log(pv[static_cast<std::size_t>(clips[i].label->verb)]) / 2.0;
      want.noun -= std::log(pn[static_cast<std::size_t>(clips[i].label->noun)]) / 2.0;
    }
  }
  want.spatial = sd / 12.0;
  for (auto& [n, v] : rd) want.relation[n] = v / 4.0;

  EXPECT_NEAR(got.verb, want.verb, 1e-12);
  EXPECT_NEAR(got.noun, want.noun, 1e-12);
  EXPECT_NEAR(got.spatial, want.spatial, 1e-12);
  EXPECT_NEAR(got.temporal, want.temporal, 1e-12);
  EXPECT_NEAR(got.ae_verb, want.ae_verb, 1e-12);
  EXPECT_NEAR(got.ae_noun, want.ae_noun, 1e-12);
  ASSERT_EQ(got.relation.size(), 2u);
  for (int n : cfg.relation_scales) EXPECT_NEAR(got.relation.at(n), want.relation.at(n), 1e-12);

  TA3NConfig zero = cfg;
  zero.lambda_spatial = zero.lambda_relation = zero.lambda_temporal = zero.gamma = 0.0;
  EXPECT_EQ(total_objective(got, zero), got.verb + got.noun);
}

TEST(ForwardLossesTest, SymmetricDiscriminatorGivesLn2) {
  const TA3NConfig cfg = tiny_config();
  Model m(cfg, 15);
  for (nn::Mlp2* d : {&m.spatial_disc, &m.temporal_disc, &m.relation_disc[0], &m.relation_disc[1]}) {
    d->second.weight.value.setZero();
    d->second.bias.value.setZero();
  }
  Rng rng(15);
  const auto s = random_clip(rng, cfg, "s", DomainLabel::source);
  ClipFeatures t = s;
  t.domain = DomainLabel::target;
  t.label.reset();
  const std::vector<const ClipFeatures*> src{&s}, tgt{&t};
  nn::Tape tape;
  const LossBundle b = forward_losses(tape, m, src, tgt, 0.0, rng).bundle;
  EXPECT_NEAR(b.spatial, std::log(2.0), 1e-15);
  EXPECT_NEAR(b.temporal, std::log(2.0), 1e-15);
  for (const auto& [n, v] : b.relation) EXPECT_NEAR(v, std::log(2.0), 1e-15);
}

TEST(ForwardLossesTest, RejectsBadBatches) {
  const TA3NConfig cfg = tiny_config();
  Model m(cfg, 16);
  Rng rng(16);
  auto s = random_clip(rng, cfg, "s", DomainLabel::source);
  const auto t = random_clip(rng, cfg, "t", DomainLabel::target);
  const std::vector<const ClipFeatures*> none, src{&s}, tgt{&t};
  nn::Tape tape;
  EXPECT_THROW(forward_losses(tape, m, none, tgt, 0.0, rng), std::invalid_argument);
  EXPECT_THROW(forward_losses(tape, m, src, none, 0.0, rng), std::invalid_argument);
  s.label.reset();
  EXPECT_THROW(forward_losses(tape, m, src, tgt, 0.0, rng), std::invalid_argument);
}

TEST(ForwardLossesTest, ExhaustiveForwardIsBitIdentical) {
  const TA3NConfig cfg = tiny_config();
  Model m(cfg, 17);
  Rng rng(17);
  const auto s = random_clip(rng, cfg, "s", DomainLabel::source), t = random_clip(rng, cfg, "t", DomainLabel::target);
  const std::vector<const ClipFeatures*> src{&s}, tgt{&t};
  nn::Tape t1, t2;
  Rng a(1), b(2);
  EXPECT_EQ(forward_losses(t1, m, src, tgt, 0.3, a).bundle, forward_losses(t2, m, src, tgt, 0.3, b).bundle);
}

TEST(ForwardLossesTest, ReversalSignsOnDiscriminatorAndFeatureParameters) {
  // gamma = 0 so the detached entropy weight does not enter the
  // finite-difference reference.
  TA3NConfig cfg = tiny_config();
  cfg.gamma = 0.0;
  cfg.grl = {0.8, adversarial::GrlSchedule::constant, 10.0};
  Model m(cfg, 18);
  Rng rng(18);
  std::vector<ClipFeatures> clips{random_clip(rng, cfg, "s0", DomainLabel::source),
                                  random_clip(rng, cfg, "s1", DomainLabel::source),
                                  random_clip(rng, cfg, "t0", DomainLabel::target),
                                  random_clip(rng, cfg, "t1", DomainLabel::target)};
  const std::vector<const ClipFeatures*> src{&clips[0], &clips[1]}, tgt{&clips[2], &clips[3]};
  auto bundle = [&] {
    nn::Tape tape;
    Rng s(0);
    return forward_losses(tape, m, src, tgt, 0.0, s).bundle;
  };
  auto domain_part = [&] {
    const LossBundle b = bundle();
    return total_objective(b, cfg) - b.verb - b.noun;
  };
  auto class_part = [&] {
    const LossBundle b = bundle();
    return b.verb + b.noun;
  };
  nn::zero_grad(m.parameters());
  {
    nn::Tape tape;
    Rng s(0);
    tape.backward(forward_losses(tape, m, src, tgt, 0.0, s).total);
  }
  for (nn::Parameter* p : m.discriminator_parameters()) {
    const Matrix g = p->grad;
    EXPECT_LT(oracle::relative_error(g, oracle::finite_difference(*p, domain_part)), 1e-4) << p->name;
  }
  for (nn::Parameter* p : m.feature_parameters()) {
    const Matrix g = p->grad;
    const Matrix expect =
        oracle::finite_difference(*p, class_part) - 0.8 * oracle::finite_difference(*p, domain_part);
    EXPECT_LT(oracle::relative_error(g, expect), 1e-4) << p->name;
  }
}

TEST(CheckpointTest, SaveLoadRoundTrip) {
  TA3NConfig cfg = tiny_config();
  cfg.tuples_per_scale = 2;
  Model m(cfg, 19);
  const auto path = std::filesystem::temp_directory_path() / "handda_ta3n_test.ckpt";
  save_model(path, m, 77);
  LoadedModel back = load_model(path);
  EXPECT_EQ(back.step, 77u);
  EXPECT_EQ(back.model.config().to_key_values(), cfg.to_key_values());
  auto a = m.parameters(), b = back.model.parameters();
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(a[i]->value, b[i]->value) << a[i]->name;
  Rng rng(19);
  const auto clip = random_clip(rng, cfg, "x", DomainLabel::target);
  EXPECT_EQ(predict(m, clip, 5).first.probs(), predict(back.model, clip, 5).first.probs());
  std::filesystem::remove(path);
}

TEST(HashTest, Fnv1a) {
  EXPECT_EQ(stable_hash(""), 0xcbf29ce484222325ULL);
  EXPECT_EQ(stable_hash("a"), 0xaf63dc4c8601ec8cULL);
}
