#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <array>
#include <cmath>
#include <map>
#include <memory>
#include <vector>

#include "cellmamba/core/gradcheck.hpp"
#include "cellmamba/model/detector.hpp"

using namespace cm;

namespace {

template <typename S>
void fill_uniform(Tensor<S>& t, Rng& rng, double lo, double hi) {
  for (auto& v : t.values()) v = static_cast<S>(rng.uniform(lo, hi));
}

template <typename S>
TokenSequence<S> random_tokens(i64 b, i64 h, i64 w, i64 c, Rng& rng) {
  Tensor<S> d({b, h * w, c});
  fill_uniform(d, rng, -1.0, 1.0);
  return {d, h, w};
}

template <typename S>
double max_abs_diff(const std::vector<S>& a, const std::vector<S>& b) {
  REQUIRE(a.size() == b.size());
  double m = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    m = std::max(m, std::abs(static_cast<double>(a[i]) - static_cast<double>(b[i])));
  }
  return m;
}

// A 5-level pyramid with the given spatial sizes, all F channels, random data.
template <typename S>
PyramidSet<S> random_pyramid(i64 b, i64 f, const std::vector<i64>& sizes, Rng& rng) {
  PyramidSet<S> p;
  for (i64 s : sizes) {
    Tensor<S> t({b, s, s, f});
    fill_uniform(t, rng, -1, 1);
    p.levels.push_back(t);
  }
  p.strides = {8, 16, 32, 64, 128};
  return p;
}

}  // namespace

// ---------------------------------------------------------------------------
// CellMamba block
// ---------------------------------------------------------------------------

TEST_CASE("block: shape-preserving for both mixer kinds") {
  Rng rng(211);
  CouplingState s{.warmup_epochs = 0, .epoch = 0};
  for (MixerKind kind : {MixerKind::kNcMamba, MixerKind::kMsa}) {
    BlockParams<float> p(kind, 8, 4, 2, 2, rng);
    auto x = random_tokens<float>(2, 4, 3, 8, rng);
    auto y = cellmamba_block(x, p, s);
    CHECK(y.data.shape() == x.data.shape());
    CHECK(y.h == x.h);
    CHECK(y.w == x.w);
  }
}

TEST_CASE("block: reduces to the identity when its writes are silenced") {
  // Zero mixer output projection, zero FFN second layer, and a saturated
  // always-one gate leave only the residual paths.
  Rng rng(223);
  BlockParams<double> p(MixerKind::kNcMamba, 6, 3, 2, 2, rng);
  for (auto& v : p.nc.w_out.values()) v = 0;
  for (auto& v : p.ffn_p.w2.values()) v = 0;
  for (auto& v : p.ffn_p.b2.values()) v = 0;
  for (auto& v : p.tmac.attn_kernel.values()) v = 0;
  p.tmac.attn_bias.data()[0] = 40.0;  // sigmoid(40) == 1.0 exactly
  auto x = random_tokens<double>(1, 3, 4, 6, rng);
  CouplingState s{.warmup_epochs = 5, .epoch = 0};
  auto y = cellmamba_block(x, p, s);
  CHECK(max_abs_diff(y.data.values(), x.data.values()) == 0.0);
}

TEST_CASE("gradcheck: full block, both mixers, both coupling phases") {
  Rng rng(227);
  for (MixerKind kind : {MixerKind::kNcMamba, MixerKind::kMsa}) {
    for (int epoch : {0, 1}) {
      BlockParams<double> p(kind, 4, 2, 2, 2, rng);
      auto x = random_tokens<double>(1, 2, 3, 4, rng);
      Tensor<double> probe({1, 6, 4});
      fill_uniform(probe, rng, -1, 1);
      CouplingState s{.warmup_epochs = 1, .epoch = epoch};

      std::vector<std::pair<std::string, Tensor<double>>> params{{"x", x.data}};
      p.visit("blk", [&](const std::string& n, Tensor<double>& t) {
        params.emplace_back(n, t);
      });
      auto fn = [&]() { return sum_all(mul(cellmamba_block(x, p, s).data, probe)); };
      auto res = finite_difference_check<double>(fn, params, 1e-5, 40);
      INFO("kind ", static_cast<int>(kind), " epoch ", epoch, " worst: ", res.worst_param);
      CHECK(res.max_rel_err < 1e-5);
    }
  }
}

// ---------------------------------------------------------------------------
// Backbone and FPN
// ---------------------------------------------------------------------------

TEST_CASE("config: defaults and the micro preset validate; mixers fixed per stage") {
  ModelConfig paper;
  paper.validate();
  CHECK(paper.stage_depths == std::array<int, 4>{2, 2, 8, 4});
  CHECK(paper.stage_depths[0] + paper.stage_depths[1] + paper.stage_depths[2] +
            paper.stage_depths[3] ==
        16);
  ModelConfig micro = ModelConfig::micro();
  micro.validate();
  CHECK(ModelConfig::stage_mixer(0) == MixerKind::kNcMamba);
  CHECK(ModelConfig::stage_mixer(1) == MixerKind::kNcMamba);
  CHECK(ModelConfig::stage_mixer(2) == MixerKind::kNcMamba);
  CHECK(ModelConfig::stage_mixer(3) == MixerKind::kMsa);

  ModelConfig bad = micro;
  bad.stage_dims[1] = 63;  // odd: channel split impossible
  CHECK_THROWS_AS(bad.validate(), ValidationError);
}

TEST_CASE("backbone params: one block per configured depth, mixer kinds per stage") {
  Rng rng(229);
  ModelConfig cfg = ModelConfig::micro();
  BackboneParams<float> p(cfg, rng);
  REQUIRE(p.stages.size() == 4);
  for (int st = 0; st < 4; ++st) {
    CHECK(static_cast<int>(p.stages[st].size()) == cfg.stage_depths[st]);
    for (const auto& blk : p.stages[st]) {
      CHECK(blk.kind == ModelConfig::stage_mixer(st));
    }
  }
}

TEST_CASE("stem: rejects wrong channel count and off-grid sizes") {
  Rng rng(233);
  BackboneParams<float> p(ModelConfig::micro(), rng);
  Tensor<float> gray({1, 64, 64, 1});
  CHECK_THROWS_AS(stem(gray, p), ValidationError);
  Tensor<float> off({1, 100, 100, 3});
  CHECK_THROWS_WITH_AS(stem(off, p), doctest::Contains("multiple of 32"), ValidationError);
}

TEST_CASE("backbone + fpn: stage and pyramid geometry on a 128x128 input") {
  Rng rng(239);
  ModelConfig cfg = ModelConfig::micro();
  BackboneParams<float> p(cfg, rng);
  Tensor<float> img({1, 128, 128, 3});
  fill_uniform(img, rng, 0, 1);
  CouplingState s{.warmup_epochs = 1, .epoch = 0};

  auto feats = backbone_forward(img, p, s);
  CHECK(feats.l2.shape() == Shape{1, 16, 16, cfg.stage_dims[1]});
  CHECK(feats.l3.shape() == Shape{1, 8, 8, cfg.stage_dims[2]});
  CHECK(feats.l4.shape() == Shape{1, 4, 4, cfg.stage_dims[3]});

  auto pyr = fpn_build(feats, p);
  REQUIRE(pyr.levels.size() == 5);
  CHECK(pyr.strides == std::vector<int>{8, 16, 32, 64, 128});
  const i64 f = cfg.fpn_channels;
  CHECK(pyr.levels[0].shape() == Shape{1, 16, 16, f});
  CHECK(pyr.levels[1].shape() == Shape{1, 8, 8, f});
  CHECK(pyr.levels[2].shape() == Shape{1, 4, 4, f});
  CHECK(pyr.levels[3].shape() == Shape{1, 2, 2, f});
  CHECK(pyr.levels[4].shape() == Shape{1, 1, 1, f});
  for (std::size_t t = 0; t < 5; ++t) {
    CHECK(128 / pyr.strides[t] == pyr.levels[t].dim(1));
  }
}

TEST_CASE("fpn: constant features with identity laterals sum top-down") {
  // One-channel laterals as identity, center-tap smoothing: every P2 cell must
  // equal c2 + c3 + c4.
  BackboneParams<double> p;
  p.lateral2.kernel = Tensor<double>({1, 1, 1, 1}, {1.0});
  p.lateral3.kernel = Tensor<double>({1, 1, 1, 1}, {1.0});
  p.lateral4.kernel = Tensor<double>({1, 1, 1, 1}, {1.0});
  p.lateral2.bias = Tensor<double>({1});
  p.lateral3.bias = Tensor<double>({1});
  p.lateral4.bias = Tensor<double>({1});
  for (auto* cp : {&p.smooth2, &p.smooth3, &p.smooth4}) {
    cp->kernel = Tensor<double>({3, 3, 1, 1});
    cp->kernel.data()[4] = 1.0;  // center tap
    cp->bias = Tensor<double>({1});
  }
  Rng rng(241);
  p.down5 = ConvParams<double>(kDownKernel, 1, 1, rng);
  p.down6 = ConvParams<double>(kDownKernel, 1, 1, rng);

  BackboneFeatures<double> f;
  f.l2 = Tensor<double>::full({1, 16, 16, 1}, 1.0);
  f.l3 = Tensor<double>::full({1, 8, 8, 1}, 2.0);
  f.l4 = Tensor<double>::full({1, 4, 4, 1}, 3.0);
  auto pyr = fpn_build(f, p);
  for (double v : pyr.levels[0].values()) CHECK(v == doctest::Approx(6.0).epsilon(1e-12));
  for (double v : pyr.levels[1].values()) CHECK(v == doctest::Approx(5.0).epsilon(1e-12));
  for (double v : pyr.levels[2].values()) CHECK(v == doctest::Approx(3.0).epsilon(1e-12));
  CHECK(pyr.levels[3].shape() == Shape{1, 2, 2, 1});
  CHECK(pyr.levels[4].shape() == Shape{1, 1, 1, 1});
}

// ---------------------------------------------------------------------------
// Adaptive head
// ---------------------------------------------------------------------------

TEST_CASE("dual pool: spatial mean then channel mean per level") {
  PyramidSet<double> p;
  for (i64 t = 0; t < 5; ++t) {
    p.levels.push_back(Tensor<double>::full({2, 4, 4, 3}, static_cast<double>(t + 1)));
  }
  p.strides = {8, 16, 32, 64, 128};
  auto s = dual_pool(p);
  CHECK(s.shape() == Shape{2, 5});
  for (i64 b = 0; b < 2; ++b) {
    for (i64 t = 0; t < 5; ++t) {
      CHECK(s.data()[b * 5 + t] == doctest::Approx(t + 1.0).epsilon(1e-12));
    }
  }

  // 1x1 level with channel values [2,4] pools to 3.
  PyramidSet<double> q;
  q.levels.push_back(Tensor<double>({1, 1, 1, 2}, {2.0, 4.0}));
  for (int t = 0; t < 4; ++t) q.levels.push_back(Tensor<double>({1, 1, 1, 2}));
  q.strides = {8, 16, 32, 64, 128};
  CHECK(dual_pool(q).data()[0] == doctest::Approx(3.0).epsilon(1e-12));
}

TEST_CASE("scale weights: sigmoid of the 5->5 fc, with monotone response") {
  Tensor<double> s({1, 5}, {1, 0, 0, 0, 0});
  Tensor<double> w({5, 5});
  for (i64 i = 0; i < 5; ++i) w.data()[i * 5 + i] = 1.0;  // identity fc
  Tensor<double> b({5});
  auto alpha = scale_weights(s, w, b);
  CHECK(alpha.data()[0] == doctest::Approx(0.7310585786300049).epsilon(1e-9));
  for (i64 t = 1; t < 5; ++t) CHECK(alpha.data()[t] == doctest::Approx(0.5).epsilon(1e-12));

  // zero fc -> all 0.5
  Tensor<double> zw({5, 5});
  auto half = scale_weights(s, zw, b);
  for (i64 t = 0; t < 5; ++t) CHECK(half.data()[t] == doctest::Approx(0.5).epsilon(1e-12));

  // increasing s_t raises alpha_t only
  Tensor<double> s2({1, 5}, {1.5, 0, 0, 0, 0});
  auto alpha2 = scale_weights(s2, w, b);
  CHECK(alpha2.data()[0] > alpha.data()[0]);
  for (i64 t = 1; t < 5; ++t) {
    CHECK(alpha2.data()[t] == doctest::Approx(alpha.data()[t]).epsilon(1e-12));
  }

  // strictly inside (0,1) even for a large bias
  for (auto& v : b.values()) v = 30.0;
  auto near_one = scale_weights(s, w, b);
  for (i64 t = 0; t < 5; ++t) {
    CHECK(near_one.data()[t] < 1.0);
    CHECK(near_one.data()[t] > 0.99);
  }
}

TEST_CASE("head: channel counts are K*A and 4*A on every level") {
  Rng rng(251);
  ModelConfig cfg = ModelConfig::micro();
  for (int a : {1, 9}) {
    cfg.anchors_per_location = a;
    HeadParams<float> hp(cfg, rng);
    auto pyr = random_pyramid<float>(1, cfg.fpn_channels, {8, 4, 2, 1, 1}, rng);
    CouplingState s{.warmup_epochs = 1, .epoch = 0};
    auto out = head_forward(pyr, hp, s);
    REQUIRE(out.cls.size() == 5);
    REQUIRE(out.box.size() == 5);
    for (std::size_t t = 0; t < 5; ++t) {
      CHECK(out.cls[t].dim(3) == cfg.num_classes * a);
      CHECK(out.box[t].dim(3) == 4 * a);
      CHECK(out.cls[t].dim(1) == pyr.levels[t].dim(1));
      CHECK(out.cls[t].dim(2) == pyr.levels[t].dim(2));
    }
  }
}

TEST_CASE("head: saturated unit scaling equals the bypassed head exactly") {
  Rng rng(257);
  ModelConfig cfg = ModelConfig::micro();
  HeadParams<double> hp(cfg, rng);
  for (auto& v : hp.fc_w.values()) v = 0;
  for (auto& v : hp.fc_b.values()) v = 40.0;  // alpha == 1.0 exactly in double
  auto pyr = random_pyramid<double>(1, cfg.fpn_channels, {4, 2, 1, 1, 1}, rng);
  CouplingState s{.warmup_epochs = 1, .epoch = 0};
  auto scaled = head_forward(pyr, hp, s, false);
  auto bypass = head_forward(pyr, hp, s, true);
  for (std::size_t t = 0; t < 5; ++t) {
    CHECK(max_abs_diff(scaled.cls[t].values(), bypass.cls[t].values()) == 0.0);
    CHECK(max_abs_diff(scaled.box[t].values(), bypass.box[t].values()) == 0.0);
  }
}

TEST_CASE("head: classification prior bias puts initial probabilities near 0.01") {
  Rng rng(263);
  HeadParams<float> hp(ModelConfig::micro(), rng);
  for (float v : hp.cls_out_b.values()) {
    CHECK(1.0 / (1.0 + std::exp(-v)) == doctest::Approx(0.01).epsilon(1e-4));
  }
}

TEST_CASE("head: shared-block gradient equals the sum of per-level gradients") {
  Rng rng(269);
  ModelConfig cfg = ModelConfig::micro();
  cfg.fpn_channels = 8;  // keep the finite check cheap
  HeadParams<double> hp(cfg, rng);
  auto pyr = random_pyramid<double>(1, cfg.fpn_channels, {4, 2, 2, 1, 1}, rng);
  CouplingState s{.warmup_epochs = 0, .epoch = 0};

  std::vector<Tensor<double>> probes;
  for (i64 sz : {4, 2, 2, 1, 1}) {
    Tensor<double> pr({1, sz, sz, cfg.num_classes});
    fill_uniform(pr, rng, -1, 1);
    probes.push_back(pr);
  }

  std::vector<std::pair<std::string, Tensor<double>>> shared;
  hp.cls_block.visit("cls", [&](const std::string& n, Tensor<double>& t) {
    shared.emplace_back(n, t);
    t.set_requires_grad(true);
  });

  auto level_loss = [&](const HeadOutputs<double>& out, std::size_t t) {
    return sum_all(mul(out.cls[t], probes[t]));
  };

  std::map<std::string, std::vector<double>> full_grad;
  {
    Tape<double> tape;
    typename Tape<double>::Scope scope(tape);
    auto out = head_forward(pyr, hp, s);
    Tensor<double> loss = level_loss(out, 0);
    for (std::size_t t = 1; t < 5; ++t) loss = add(loss, level_loss(out, t));
    tape.backward(loss);
    for (auto& [n, t] : shared) {
      full_grad[n] = t.grad_vec();
      t.drop_grad();
    }
  }

  std::map<std::string, std::vector<double>> summed;
  for (std::size_t lvl = 0; lvl < 5; ++lvl) {
    Tape<double> tape;
    typename Tape<double>::Scope scope(tape);
    auto out = head_forward(pyr, hp, s);
    tape.backward(level_loss(out, lvl));
    for (auto& [n, t] : shared) {
      auto& acc = summed[n];
      const auto& g = t.grad_vec();
      if (acc.empty()) acc.assign(g.size(), 0.0);
      for (std::size_t i = 0; i < g.size(); ++i) acc[i] += g[i];
      t.drop_grad();
    }
  }

  for (auto& [n, g] : full_grad) {
    INFO("param ", n);
    CHECK(max_abs_diff(g, summed[n]) < 1e-5);
  }
}

// ---------------------------------------------------------------------------
// Anchors and box coding
// ---------------------------------------------------------------------------

TEST_CASE("anchors: centers on pixel centers, side 4*stride, exact counts") {
  auto a = level_anchors(32, 32, 8, 1);
  REQUIRE(a.size() == 32 * 32);
  CHECK(a[0].cx == doctest::Approx(4.0));
  CHECK(a[0].cy == doctest::Approx(4.0));
  CHECK(a[0].w == doctest::Approx(32.0));
  CHECK(a[0].h == doctest::Approx(32.0));
  CHECK(a[1].cx == doctest::Approx(12.0));  // next column
  CHECK(a[32].cy == doctest::Approx(12.0));  // next row

  // 256-input pyramid: 32^2+16^2+8^2+4^2+2^2 = 1364 anchors at A=1.
  PyramidSet<float> pyr;
  for (i64 sz : {32, 16, 8, 4, 2}) pyr.levels.push_back(Tensor<float>({1, sz, sz, 4}));
  pyr.strides = {8, 16, 32, 64, 128};
  auto per_level = generate_anchors(pyr, 1);
  i64 total = 0;
  for (const auto& v : per_level) total += static_cast<i64>(v.size());
  CHECK(total == 1364);

  auto nine = generate_anchors(pyr, 9);
  i64 total9 = 0;
  for (const auto& v : nine) total9 += static_cast<i64>(v.size());
  CHECK(total9 == 9 * 1364);

  // ratio sweep preserves area; scale sweep multiplies the side.
  auto one = level_anchors(1, 1, 8, 9);
  REQUIRE(one.size() == 9);
  for (const auto& an : one) {
    CHECK(an.cx == doctest::Approx(4.0));
    CHECK(an.cy == doctest::Approx(4.0));
  }
  CHECK(one[0].w * one[0].h == doctest::Approx(32.0 * 32.0));  // ratio 0.5, scale 1
  CHECK(one[0].h / one[0].w == doctest::Approx(0.5));
  CHECK(one[3].h / one[3].w == doctest::Approx(1.0));
  CHECK(one[6].h / one[6].w == doctest::Approx(2.0));
  CHECK(one[4].w == doctest::Approx(32.0 * std::pow(2.0, 1.0 / 3.0)));

  CHECK_THROWS_AS(level_anchors(2, 2, 8, 5), ValidationError);
}

TEST_CASE("box coding: identity, shift formula, and random round-trips") {
  Anchor a{4, 4, 32, 32};
  BBox same = a.box();
  auto d0 = encode_box(same, a);
  for (double v : d0) CHECK(v == doctest::Approx(0.0).epsilon(1e-12));

  BBox shifted{8 - 16, 4 - 16, 8 + 16, 4 + 16};  // centered (8,4), same size
  auto d = encode_box(shifted, a);
  CHECK(d[0] == doctest::Approx(0.125).epsilon(1e-12));
  CHECK(d[1] == doctest::Approx(0.0).epsilon(1e-12));
  CHECK(d[2] == doctest::Approx(0.0).epsilon(1e-12));
  CHECK(d[3] == doctest::Approx(0.0).epsilon(1e-12));

  Rng rng(271);
  for (int i = 0; i < 1000; ++i) {
    Anchor an{rng.uniform(500, 3500), rng.uniform(500, 3500), rng.uniform(8, 64),
              rng.uniform(8, 64)};
    std::array<double, 4> deltas{rng.uniform(-1.5, 1.5), rng.uniform(-1.5, 1.5),
                                 rng.uniform(-1.2, 1.2), rng.uniform(-1.2, 1.2)};
    BBox box = decode_box(deltas, an, 4096, 4096);
    auto back = encode_box(box, an);
    for (int j = 0; j < 4; ++j) CHECK(back[j] == doctest::Approx(deltas[j]).epsilon(1e-5));
  }

  // decode clamps the exponent and clips to the image
  BBox wild = decode_box({0, 0, 50, 50}, a, 100, 100);
  CHECK(wild.x1 <= 100.0);
  CHECK(wild.y1 <= 100.0);
  CHECK(wild.x0 >= 0.0);
  BBox clipped = decode_box({-10, 0, 0, 0}, a, 100, 100);
  CHECK(clipped.x0 >= 0.0);
}

TEST_CASE("iou: closed-form cases") {
  CHECK(iou({0, 0, 2, 2}, {0, 0, 2, 2}) == doctest::Approx(1.0));
  CHECK(iou({0, 0, 2, 2}, {5, 5, 7, 7}) == 0.0);
  CHECK(iou({0, 0, 2, 2}, {1, 1, 3, 3}) == doctest::Approx(1.0 / 7.0));
  CHECK(iou({0, 0, 4, 4}, {0, 0, 4, 2}) == doctest::Approx(0.5));
  CHECK(iou({0, 0, 2, 2}, {2, 0, 4, 2}) == 0.0);  // touching edges
}

// ---------------------------------------------------------------------------
// Assignment
// ---------------------------------------------------------------------------

TEST_CASE("assignment: thresholds, force matching, and tie breaks") {
  LossConfig cfg;
  std::vector<Anchor> anchors{{16, 16, 32, 32}, {200, 200, 32, 32}};

  SUBCASE("exact overlap is positive; distant anchor negative") {
    std::vector<GtBox> gts{{{0, 0, 32, 32}, 2}};
    auto a = assign_targets(anchors, gts, cfg);
    CHECK(a.label[0] == 2);
    CHECK(a.gt_index[0] == 0);
    CHECK(a.label[1] == kNegative);
    CHECK(a.num_pos == 1);
  }

  SUBCASE("between thresholds becomes ignore unless force-matched") {
    // shift by 12: IoU = 640/1408 ~ 0.4545 in (0.4, 0.5)
    std::vector<GtBox> gts{{{12, 0, 44, 32}, 1}};
    auto a = assign_targets(anchors, gts, cfg);
    // the gt's best anchor overall is anchor 0, so force matching claims it
    CHECK(a.label[0] == 1);
    CHECK(a.num_pos == 1);

    // give the gt a better anchor elsewhere: the in-between anchor stays ignore
    std::vector<Anchor> more = anchors;
    more.push_back({28, 16, 32, 32});  // centered on the gt
    auto b = assign_targets(more, gts, cfg);
    CHECK(b.label[0] == kIgnore);
    CHECK(b.label[2] == 1);
    CHECK(b.num_pos == 1);
  }

  SUBCASE("low overlap still yields one positive per gt via force matching") {
    std::vector<GtBox> gts{{{0, 0, 8, 8}, 0}};  // IoU vs anchor0 = 64/1024
    auto a = assign_targets(anchors, gts, cfg);
    CHECK(a.label[0] == 0);
    CHECK(a.num_pos == 1);
  }

  SUBCASE("two gts preferring one anchor: the lower index keeps it") {
    std::vector<GtBox> gts{{{0, 0, 32, 32}, 0}, {{1, 1, 33, 33}, 1}};
    auto a = assign_targets(anchors, gts, cfg);
    CHECK(a.label[0] == 0);
    CHECK(a.gt_index[0] == 0);
    CHECK(a.num_pos == 1);
  }

  SUBCASE("identical gts: argmax ties resolve to the lowest index") {
    std::vector<GtBox> gts{{{0, 0, 32, 32}, 0}, {{0, 0, 32, 32}, 1}};
    auto a = assign_targets(anchors, gts, cfg);
    CHECK(a.gt_index[0] == 0);
  }

  SUBCASE("no gts: everything negative") {
    auto a = assign_targets(anchors, {}, cfg);
    CHECK(a.label[0] == kNegative);
    CHECK(a.label[1] == kNegative);
    CHECK(a.num_pos == 0);
  }
}

// ---------------------------------------------------------------------------
// Losses
// ---------------------------------------------------------------------------

namespace {

// Forward-only focal reference computed from probabilities, the direct way.
template <typename S>
double focal_reference(const Tensor<S>& logits, const std::vector<int>& labels, double alpha,
                       double gamma) {
  const i64 k = logits.dim(-1);
  const i64 rows = logits.numel() / k;
  double total = 0;
  for (i64 r = 0; r < rows; ++r) {
    const int l = labels[r];
    if (l == kIgnore) continue;
    for (i64 j = 0; j < k; ++j) {
      const double p = 1.0 / (1.0 + std::exp(-static_cast<double>(logits.data()[r * k + j])));
      if (l == static_cast<int>(j)) {
        total += alpha * std::pow(1.0 - p, gamma) * -std::log(p);
      } else {
        total += (1.0 - alpha) * std::pow(p, gamma) * -std::log(1.0 - p);
      }
    }
  }
  return total;
}

}  // namespace

TEST_CASE("focal loss: scalar oracle at p=0.9") {
  Tensor<double> z({1, 1}, {std::log(9.0)});  // sigmoid = 0.9
  auto labels = std::make_shared<std::vector<int>>(std::vector<int>{0});
  LossConfig cfg;
  auto loss = focal_loss(z, labels, cfg);
  CHECK(loss.item() == doctest::Approx(2.634e-4).epsilon(1e-3));
  CHECK(loss.item() == doctest::Approx(0.25 * 0.01 * -std::log(0.9)).epsilon(1e-12));
}

TEST_CASE("focal loss: gamma=0, alpha=0.5 halves the binary cross-entropy") {
  Rng rng(277);
  Tensor<double> z({4, 3});
  fill_uniform(z, rng, -2, 2);
  auto labels = std::make_shared<std::vector<int>>(std::vector<int>{0, 2, kNegative, 1});
  auto s = focal_sum(z, labels, 0.5, 0.0);
  double bce = 0;
  for (i64 r = 0; r < 4; ++r) {
    for (i64 j = 0; j < 3; ++j) {
      const double p = 1.0 / (1.0 + std::exp(-z.data()[r * 3 + j]));
      const bool hit = (*labels)[r] == static_cast<int>(j);
      bce += hit ? -std::log(p) : -std::log(1.0 - p);
    }
  }
  CHECK(s.item() == doctest::Approx(0.5 * bce).epsilon(1e-9));
}

TEST_CASE("focal loss: matches the probability-space reference; ignores ignored rows") {
  Rng rng(281);
  Tensor<double> z({6, 4});
  fill_uniform(z, rng, -3, 3);
  auto labels = std::make_shared<std::vector<int>>(
      std::vector<int>{1, kIgnore, kNegative, 3, kIgnore, 0});
  auto s = focal_sum(z, labels, 0.25, 2.0);
  CHECK(s.item() == doctest::Approx(focal_reference(z, *labels, 0.25, 2.0)).epsilon(1e-9));

  // saturation safety: +-30 logits stay finite
  Tensor<double> hard({2, 2}, {30.0, -30.0, -30.0, 30.0});
  auto hl = std::make_shared<std::vector<int>>(std::vector<int>{0, kNegative});
  auto hs = focal_sum(hard, hl, 0.25, 2.0);
  CHECK(std::isfinite(hs.item()));
}

TEST_CASE("focal loss: normalized by the positive count") {
  Tensor<double> z({3, 2}, {1.0, -1.0, 0.5, -0.5, -2.0, 2.0});
  auto two_pos = std::make_shared<std::vector<int>>(std::vector<int>{0, 1, kNegative});
  auto sum = focal_sum(z, two_pos, 0.25, 2.0);
  auto norm = focal_loss(z, two_pos, LossConfig{});
  CHECK(norm.item() == doctest::Approx(sum.item() / 2.0).epsilon(1e-12));

  auto none = std::make_shared<std::vector<int>>(
      std::vector<int>{kNegative, kNegative, kNegative});
  auto n2 = focal_loss(z, none, LossConfig{});
  auto s2 = focal_sum(z, none, 0.25, 2.0);
  CHECK(n2.item() == doctest::Approx(s2.item()).epsilon(1e-12));  // divide by max(0,1)=1
}

TEST_CASE("gradcheck: focal sum over mixed labels") {
  Rng rng(283);
  Tensor<double> z({5, 3});
  fill_uniform(z, rng, -2, 2);
  auto labels = std::make_shared<std::vector<int>>(
      std::vector<int>{0, kNegative, kIgnore, 2, 1});
  auto fn = [&]() { return focal_sum(z, labels, 0.25, 2.0); };
  auto res = finite_difference_check<double>(fn, {{"z", z}}, 1e-6);
  CHECK(res.max_rel_err < 1e-5);
}

TEST_CASE("smooth l1: closed-form points and the quadratic/linear handoff") {
  auto labels = std::make_shared<std::vector<int>>(std::vector<int>{0});
  auto targets = std::make_shared<std::vector<double>>(std::vector<double>{0, 0, 0, 0});

  Tensor<double> half({1, 4}, {0.5, 0, 0, 0});
  CHECK(smooth_l1_sum(half, targets, labels).item() == doctest::Approx(0.125).epsilon(1e-12));

  Tensor<double> two({1, 4}, {2.0, 0, 0, 0});
  CHECK(smooth_l1_sum(two, targets, labels).item() == doctest::Approx(1.5).epsilon(1e-12));

  Tensor<double> atone({1, 4}, {1.0, 0, 0, 0});
  CHECK(smooth_l1_sum(atone, targets, labels).item() == doctest::Approx(0.5).epsilon(1e-12));

  // continuity across |x| = 1
  Tensor<double> below({1, 4}, {1.0 - 1e-7, 0, 0, 0});
  Tensor<double> above({1, 4}, {1.0 + 1e-7, 0, 0, 0});
  CHECK(std::abs(smooth_l1_sum(below, targets, labels).item() -
                 smooth_l1_sum(above, targets, labels).item()) < 1e-6);

  // negative rows contribute nothing
  auto neg = std::make_shared<std::vector<int>>(std::vector<int>{kNegative});
  CHECK(smooth_l1_sum(two, targets, neg).item() == 0.0);
}

TEST_CASE("gradcheck: smooth l1 on both branches") {
  Rng rng(293);
  Tensor<double> pred({4, 4});
  fill_uniform(pred, rng, -2.5, 2.5);
  auto targets = std::make_shared<std::vector<double>>(16, 0.25);
  auto labels = std::make_shared<std::vector<int>>(std::vector<int>{0, kNegative, 1, 2});
  auto fn = [&]() { return smooth_l1_sum(pred, targets, labels); };
  auto res = finite_difference_check<double>(fn, {{"pred", pred}}, 1e-6);
  CHECK(res.max_rel_err < 1e-5);
}

TEST_CASE("total loss: weighted sum with a non-finite gate") {
  Tensor<double> one({1}, {1.0});
  Tensor<double> two({1}, {2.0});
  CHECK(total_loss(one, two, 1.0).item() == doctest::Approx(3.0));
  CHECK(total_loss(one, two, 0.0).item() == doctest::Approx(1.0));
  Tensor<double> half({1}, {0.5});
  Tensor<double> quarter({1}, {0.25});
  CHECK(total_loss(half, quarter, 2.0).item() == doctest::Approx(1.0));

  Tensor<double> bad({1}, {std::nan("")});
  CHECK_THROWS_AS(total_loss(bad, two, 1.0), NumericError);
}

TEST_CASE("detection loss: end-to-end on a hand-built level") {
  // One 2x2 level at stride 8, A=1, K=2: anchors centered (4,4),(12,4),(4,12),(12,12).
  const LossConfig cfg;
  HeadOutputs<double> out;
  Rng rng(307);
  Tensor<double> cls({1, 2, 2, 2});
  Tensor<double> box({1, 2, 2, 4});
  fill_uniform(cls, rng, -1, 1);
  fill_uniform(box, rng, -0.5, 0.5);
  out.cls.push_back(cls);
  out.box.push_back(box);
  std::vector<std::vector<Anchor>> anchors{level_anchors(2, 2, 8, 1)};

  SUBCASE("one force-matched gt: positives counted, reference value matches") {
    // A small box at anchor 0: low IoU everywhere, so exactly one positive via
    // force matching (stride-8 anchors overlap each other too much for a
    // full-size gt to have a single positive).
    const GtBox gt{{0, 0, 8, 8}, 1};
    std::vector<std::vector<GtBox>> gts{{gt}};
    auto dl = detection_loss(out, anchors, gts, cfg);
    CHECK(dl.num_pos == 1);

    std::vector<int> labels{1, kNegative, kNegative, kNegative};
    const double cls_ref = focal_reference(reshape(cls, {4, 2}), labels, 0.25, 2.0);
    CHECK(dl.cls.item() == doctest::Approx(cls_ref).epsilon(1e-9));

    const auto target = encode_box(gt.box, anchors[0][0]);
    double box_ref = 0;
    for (int j = 0; j < 4; ++j) {
      const double x = box.data()[j] - target[j];
      box_ref += std::abs(x) < 1 ? 0.5 * x * x : std::abs(x) - 0.5;
    }
    CHECK(dl.box.item() == doctest::Approx(box_ref).epsilon(1e-9));
    CHECK(dl.total.item() ==
          doctest::Approx(cls_ref + cfg.box_weight * box_ref).epsilon(1e-9));
  }

  SUBCASE("no gts: box loss zero, focal over all-negatives") {
    std::vector<std::vector<GtBox>> gts{{}};
    auto dl = detection_loss(out, anchors, gts, cfg);
    CHECK(dl.num_pos == 0);
    CHECK(dl.box.item() == 0.0);
    std::vector<int> labels(4, kNegative);
    CHECK(dl.cls.item() ==
          doctest::Approx(focal_reference(reshape(cls, {4, 2}), labels, 0.25, 2.0))
              .epsilon(1e-9));
  }

  SUBCASE("gradcheck through assignment-fixed losses") {
    std::vector<std::vector<GtBox>> gts{{GtBox{{-12, -12, 20, 20}, 0}}};
    auto fn = [&]() { return detection_loss(out, anchors, gts, cfg).total; };
    auto res = finite_difference_check<double>(fn, {{"cls", cls}, {"box", box}}, 1e-6);
    CHECK(res.max_rel_err < 1e-5);
  }
}

// ---------------------------------------------------------------------------
// Full detector
// ---------------------------------------------------------------------------

TEST_CASE("detector: construction is seed-deterministic; counts are seed-free") {
  Detector<float> a(ModelConfig::micro(), 7);
  Detector<float> b(ModelConfig::micro(), 7);
  Detector<float> c(ModelConfig::micro(), 8);
  CHECK(a.param_count() == b.param_count());
  CHECK(a.param_count() == c.param_count());
  CHECK(a.param_count() > 0);

  auto pa = a.named_params();
  auto pb = b.named_params();
  auto pc = c.named_params();
  REQUIRE(pa.size() == pb.size());
  bool all_equal = true, any_diff_seed = false;
  for (std::size_t i = 0; i < pa.size(); ++i) {
    CHECK(pa[i].first == pb[i].first);
    if (max_abs_diff(pa[i].second.values(), pb[i].second.values()) != 0.0) all_equal = false;
    if (max_abs_diff(pa[i].second.values(), pc[i].second.values()) != 0.0)
      any_diff_seed = true;
  }
  CHECK(all_equal);
  CHECK(any_diff_seed);
}

TEST_CASE("detector: forward contract and gradient liveness on 128x128") {
  Rng rng(311);
  Detector<float> det(ModelConfig::micro(), 21);
  det.set_requires_grad(true);
  Tensor<float> img({1, 128, 128, 3});
  fill_uniform(img, rng, 0, 1);
  CouplingState s{.warmup_epochs = 0, .epoch = 0};  // coupled: exercise every path

  Tape<float> tape;
  Tape<float>::Scope scope(tape);
  auto fwd = det.forward(img, s);
  REQUIRE(fwd.outputs.cls.size() == 5);
  const i64 k = det.cfg.num_classes;
  CHECK(fwd.outputs.cls[0].shape() == Shape{1, 16, 16, k});
  CHECK(fwd.outputs.box[4].shape() == Shape{1, 1, 1, 4});

  // probe-weighted sum over every output so no channel cancels
  Tensor<float> loss;
  for (std::size_t t = 0; t < 5; ++t) {
    for (const Tensor<float>* o : {&fwd.outputs.cls[t], &fwd.outputs.box[t]}) {
      Tensor<float> pr(o->shape());
      fill_uniform(pr, rng, 0.1, 1.0);
      Tensor<float> part = sum_all(mul(*o, pr));
      loss = loss.defined() ? add(loss, part) : part;
    }
  }
  tape.backward(loss);

  int dead = 0;
  det.visit([&](const std::string& name, Tensor<float>& t) {
    bool live = false;
    if (t.has_grad()) {
      for (float g : t.grad_vec()) {
        if (g != 0.0f) {
          live = true;
          break;
        }
      }
    }
    if (!live) {
      ++dead;
      MESSAGE("dead parameter: ", name);
    }
  });
  CHECK(dead == 0);
}
