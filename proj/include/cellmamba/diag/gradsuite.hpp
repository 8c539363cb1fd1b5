#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <string>
#include <type_traits>
#include <utility>
#include <vector>

#include "cellmamba/core/gradcheck.hpp"
#include "cellmamba/model/detector.hpp"

namespace cm {

struct SuiteEntry {
  std::string component;
  GradCheckResult result;
};

namespace detail {

template <typename S>
void fill_uniform(Tensor<S>& t, Rng& rng, double lo, double hi) {
  for (i64 i = 0; i < t.numel(); ++i) t.data()[i] = static_cast<S>(rng.uniform(lo, hi));
}

// Fixed random weighting so that every output coordinate influences the
// scalar loss.
template <typename S>
Tensor<S> make_probe(const std::vector<i64>& shape, Rng& rng) {
  Tensor<S> p(shape);
  fill_uniform(p, rng, -1.0, 1.0);
  return p;
}

template <typename S>
Tensor<S> probe_dot(const Tensor<S>& t, const Tensor<S>& probe) {
  return sum_all(mul(t, probe));
}

// Central differences on a higher-precision twin of the computation, compared
// against the low-precision analytic gradient. A 32-bit forward pass through
// the whole detector cannot resolve an h-sized single-weight perturbation
// (the loss's own rounding noise exceeds the secant), so the numeric baseline
// runs in 64-bit at the same parameter point while the gradient under test
// stays 32-bit.
template <typename S, typename R>
GradCheckResult fd_check_with_reference(
    const std::function<Tensor<S>()>& f,
    const std::vector<std::pair<std::string, Tensor<S>>>& params,
    const std::function<Tensor<R>()>& ref_f,
    const std::vector<std::pair<std::string, Tensor<R>>>& ref_params, double h,
    i64 max_coords_per_param, std::uint64_t seed) {
  CM_CHECK(params.size() == ref_params.size(),
           "fd_check_with_reference: parameter lists differ in size");
  for (const auto& [name, p] : params) {
    Tensor<S> t = p;
    t.set_requires_grad(true);
    t.zero_grad();
  }

  std::vector<std::vector<S>> analytic;
  {
    Tape<S> tape;
    typename Tape<S>::Scope scope(tape);
    Tensor<S> loss = f();
    CM_CHECK_NUMERIC(std::isfinite(static_cast<double>(loss.item())),
                     "fd_check_with_reference: non-finite loss");
    tape.backward(loss);
    for (const auto& [name, p] : params) {
      p.ensure_grad();
      analytic.push_back(p.grad_vec());
    }
  }

  GradCheckResult res;
  Rng rng(seed);
  typename Tape<R>::Scope no_tape(nullptr);
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    Tensor<R> p = ref_params[pi].second;
    CM_CHECK(p.numel() == params[pi].second.numel(), "fd_check_with_reference: '",
             params[pi].first, "' differs in size from its reference twin");
    R* pd = p.data();

    std::vector<i64> coords;
    if (max_coords_per_param < 0 || max_coords_per_param >= p.numel()) {
      coords.resize(p.numel());
      for (i64 i = 0; i < p.numel(); ++i) coords[i] = i;
    } else {
      std::vector<i64> all(p.numel());
      for (i64 i = 0; i < p.numel(); ++i) all[i] = i;
      for (i64 i = 0; i < max_coords_per_param; ++i) {
        const i64 j = rng.uniform_int(i, p.numel() - 1);
        std::swap(all[i], all[j]);
        coords.push_back(all[i]);
      }
    }

    for (i64 ci : coords) {
      const R saved = pd[ci];
      pd[ci] = saved + static_cast<R>(h);
      const double fp = static_cast<double>(ref_f().item());
      pd[ci] = saved - static_cast<R>(h);
      const double fm = static_cast<double>(ref_f().item());
      pd[ci] = saved;
      const double numeric = (fp - fm) / (2.0 * h);
      const double a = static_cast<double>(analytic[pi][ci]);
      const double rel =
          std::abs(a - numeric) / std::max({1.0, std::abs(a), std::abs(numeric)});
      ++res.coords_checked;
      if (rel > res.max_rel_err) {
        res.max_rel_err = rel;
        res.worst_param = params[pi].first;
        res.worst_coord = ci;
        res.worst_analytic = a;
        res.worst_numeric = numeric;
      }
    }
  }
  return res;
}

}  // namespace detail

// Finite-difference checks for every differentiable building block, plus
// (optionally) the composed micro-config detector with sampled coordinates.
// Expected ceilings: 1e-5 in 64-bit mode, 1e-2 in 32-bit mode.
template <typename S>
std::vector<SuiteEntry> gradcheck_suite(bool include_composed = true,
                                        i64 composed_coords_per_param = 2,
                                        std::uint64_t seed = 0x9a0b) {
  using detail::fill_uniform;
  using detail::make_probe;
  using detail::probe_dot;
  using Params = std::vector<std::pair<std::string, Tensor<S>>>;

  std::vector<SuiteEntry> out;
  Rng rng(seed);
  const double h = default_fd_step<S>();

  auto run = [&](const std::string& name, const std::function<Tensor<S>()>& f,
                 const Params& params, i64 max_coords = -1) {
    out.push_back({name, finite_difference_check<S>(f, params, h, max_coords, seed)});
  };

  {  // sum-of-elements sanity: the gradient is exactly ones
    Tensor<S> x({3, 4});
    fill_uniform(x, rng, -1.0, 1.0);
    run("sum", [=] { return sum_all(x); }, {{"x", x}});
  }

  {  // linear
    Tensor<S> x({3, 4}), w({4, 5}), b({5});
    fill_uniform(x, rng, -1.0, 1.0);
    fill_uniform(w, rng, -0.5, 0.5);
    fill_uniform(b, rng, -0.5, 0.5);
    Tensor<S> probe = make_probe<S>({3, 5}, rng);
    run("linear", [=] { return probe_dot(linear(x, w, b), probe); },
        {{"x", x}, {"w", w}, {"b", b}});
  }

  {  // conv2d, stride 1 pad 1 and stride 2 pad 1
    Tensor<S> x({1, 5, 6, 3}), k({3, 3, 3, 4}), b({4});
    fill_uniform(x, rng, -1.0, 1.0);
    fill_uniform(k, rng, -0.4, 0.4);
    fill_uniform(b, rng, -0.2, 0.2);
    Tensor<S> p1 = make_probe<S>({1, 5, 6, 4}, rng);
    run("conv2d_s1", [=] { return probe_dot(conv2d(x, k, b, 1, 1), p1); },
        {{"x", x}, {"k", k}, {"b", b}});
    Tensor<S> x2({1, 6, 8, 3}), k2({4, 4, 3, 2}), b2({2});
    fill_uniform(x2, rng, -1.0, 1.0);
    fill_uniform(k2, rng, -0.4, 0.4);
    fill_uniform(b2, rng, -0.2, 0.2);
    Tensor<S> p2 = make_probe<S>({1, 3, 4, 2}, rng);  // (6+2-4)/2+1=3, (8+2-4)/2+1=4
    run("conv2d_s2", [=] { return probe_dot(conv2d(x2, k2, b2, 2, 1), p2); },
        {{"x", x2}, {"k", k2}, {"b", b2}});
  }

  {  // layer_norm
    Tensor<S> x({2, 7}), g({7}), b({7});
    fill_uniform(x, rng, -2.0, 2.0);
    fill_uniform(g, rng, 0.5, 1.5);
    fill_uniform(b, rng, -0.5, 0.5);
    Tensor<S> probe = make_probe<S>({2, 7}, rng);
    run("layer_norm", [=] { return probe_dot(layer_norm(x, g, b), probe); },
        {{"x", x}, {"g", g}, {"b", b}});
  }

  {  // activations; relu inputs are kept away from the kink
    Tensor<S> x({3, 6});
    for (i64 i = 0; i < x.numel(); ++i) {
      const double mag = rng.uniform(0.2, 1.0);
      x.data()[i] = static_cast<S>(rng.uniform() < 0.5 ? -mag : mag);
    }
    Tensor<S> probe = make_probe<S>({3, 6}, rng);
    run("relu", [=] { return probe_dot(relu(x), probe); }, {{"x", x}});
    run("gelu", [=] { return probe_dot(gelu(x), probe); }, {{"x", x}});
    run("sigmoid", [=] { return probe_dot(sigmoid(x), probe); }, {{"x", x}});
    run("softmax", [=] { return probe_dot(softmax(x, -1), probe); }, {{"x", x}});
  }

  {  // NC-Mamba token mixer
    NcMambaParams<S> p(4, 3, rng);
    Tensor<S> xd({1, 6, 4});
    fill_uniform(xd, rng, -1.0, 1.0);
    Tensor<S> probe = make_probe<S>({1, 6, 4}, rng);
    Params params = {{"x", xd}};
    p.visit("nc", [&](const std::string& n, Tensor<S>& t) { params.emplace_back(n, t); });
    run("nc_mamba",
        [=] { return probe_dot(nc_mamba_mix(TokenSequence<S>(xd, 2, 3), p).data, probe); },
        params);
  }

  {  // MSA token mixer
    MsaParams<S> p(4, 2, rng);
    Tensor<S> xd({1, 6, 4});
    fill_uniform(xd, rng, -1.0, 1.0);
    Tensor<S> probe = make_probe<S>({1, 6, 4}, rng);
    Params params = {{"x", xd}};
    p.visit("msa", [&](const std::string& n, Tensor<S>& t) { params.emplace_back(n, t); });
    run("msa", [=] { return probe_dot(msa(TokenSequence<S>(xd, 2, 3), p).data, probe); },
        params);
  }

  {  // TMAC in both phases
    TmacParams<S> p(rng, 3);
    Tensor<S> xd({1, 16, 4});
    fill_uniform(xd, rng, -1.0, 1.0);
    Tensor<S> probe = make_probe<S>({1, 16, 4}, rng);
    Params params = {{"x", xd}};
    p.visit("tmac", [&](const std::string& n, Tensor<S>& t) { params.emplace_back(n, t); });
    CouplingState warm{5, 0}, coupled{5, 9};
    run("tmac_warmup",
        [=] { return probe_dot(tmac_forward(TokenSequence<S>(xd, 4, 4), p, warm).data, probe); },
        params);
    run("tmac_coupled",
        [=] {
          return probe_dot(tmac_forward(TokenSequence<S>(xd, 4, 4), p, coupled).data, probe);
        },
        params);
  }

  {  // FFN
    FfnParams<S> p(4, 2, rng);
    Tensor<S> xd({1, 6, 4});
    fill_uniform(xd, rng, -1.0, 1.0);
    Tensor<S> probe = make_probe<S>({1, 6, 4}, rng);
    Params params = {{"x", xd}};
    p.visit("ffn", [&](const std::string& n, Tensor<S>& t) { params.emplace_back(n, t); });
    run("ffn", [=] { return probe_dot(ffn(TokenSequence<S>(xd, 2, 3), p).data, probe); },
        params);
  }

  {  // adaptive head over a five-level pyramid
    ModelConfig cfg;
    cfg.stage_depths = {1, 1, 1, 1};
    cfg.stage_dims = {4, 4, 4, 4};
    cfg.fpn_channels = 4;
    cfg.num_classes = 2;
    cfg.n_state = 2;
    cfg.msa_heads = 2;
    cfg.ffn_expansion = 2;
    HeadParams<S> p(cfg, rng);
    PyramidSet<S> pyr;
    pyr.strides = {8, 16, 32, 64, 128};
    const std::vector<std::vector<i64>> shapes = {
        {1, 4, 4, 4}, {1, 2, 2, 4}, {1, 1, 1, 4}, {1, 1, 1, 4}, {1, 1, 1, 4}};
    std::vector<Tensor<S>> probes;
    for (const auto& s : shapes) {
      Tensor<S> level(s);
      fill_uniform(level, rng, -1.0, 1.0);
      pyr.levels.push_back(level);
    }
    for (const auto& s : shapes) {
      probes.push_back(make_probe<S>({s[0], s[1], s[2], 2}, rng));  // K*A = 2
      probes.push_back(make_probe<S>({s[0], s[1], s[2], 4}, rng));  // 4*A = 4
    }
    Params params;
    p.visit("head", [&](const std::string& n, Tensor<S>& t) { params.emplace_back(n, t); });
    for (std::size_t l = 0; l < pyr.levels.size(); ++l) {
      params.emplace_back(str_cat("pyramid.p", l + 2), pyr.levels[l]);
    }
    CouplingState state{5, 9};
    run("head",
        [=] {
          HeadOutputs<S> o = head_forward(pyr, p, state);
          Tensor<S> loss;
          for (std::size_t l = 0; l < o.cls.size(); ++l) {
            Tensor<S> term =
                add(probe_dot(o.cls[l], probes[2 * l]), probe_dot(o.box[l], probes[2 * l + 1]));
            loss = loss.defined() ? add(loss, term) : term;
          }
          return loss;
        },
        params);
  }

  {  // focal classification term
    Tensor<S> logits({8, 3});
    fill_uniform(logits, rng, -2.0, 2.0);
    auto labels = std::make_shared<std::vector<int>>(
        std::vector<int>{0, 1, 2, kNegative, kNegative, 0, kIgnore, kNegative});
    run("focal",
        [=] { return focal_sum(logits, labels, static_cast<S>(0.25), static_cast<S>(2)); },
        {{"logits", logits}});
  }

  {  // box regression term
    Tensor<S> deltas({8, 4});
    fill_uniform(deltas, rng, -2.0, 2.0);
    auto targets = std::make_shared<std::vector<S>>(32);
    for (auto& v : *targets) v = static_cast<S>(rng.uniform(-1.5, 1.5));
    auto labels = std::make_shared<std::vector<int>>(
        std::vector<int>{0, kNegative, 2, 1, kIgnore, kNegative, 0, kNegative});
    run("smooth_l1", [=] { return smooth_l1_sum(deltas, targets, labels); },
        {{"deltas", deltas}});
  }

  if (include_composed) {  // the full micro detector through the objective
    Detector<S> model(ModelConfig::micro(), seed);
    Tensor<S> image({1, 128, 128, 3});
    fill_uniform(image, rng, 0.0, 1.0);
    std::vector<std::vector<GtBox>> gts = {
        {{BBox{20, 24, 52, 60}, 0}, {BBox{70, 80, 110, 112}, 2}}};
    CouplingState state{20, 25};  // consensus active
    LossConfig loss_cfg;
    std::vector<std::vector<Anchor>> anchors;
    {
      typename Tape<S>::Scope no_tape(nullptr);
      anchors = generate_anchors(model.forward(image, state).pyramid,
                                 model.cfg.anchors_per_location);
    }
    Params params = model.named_params();
    params.emplace_back("image", image);
    std::function<Tensor<S>()> f = [=]() mutable {
      auto fwd = model.forward(image, state);
      return detection_loss(fwd.outputs, anchors, gts, loss_cfg).total;
    };
    if constexpr (std::is_same_v<S, double>) {
      run("micro_model", f, params, composed_coords_per_param);
    } else {
      // At this depth a 32-bit loss evaluation carries more rounding noise
      // than the finite-difference secant itself, so the numeric baseline is
      // taken from a 64-bit twin holding bit-identical parameter values.
      Detector<double> twin(ModelConfig::micro(), seed);
      Tensor<double> twin_image({1, 128, 128, 3});
      std::vector<std::pair<std::string, Tensor<double>>> ref_params =
          twin.named_params();
      ref_params.emplace_back("image", twin_image);
      for (std::size_t i = 0; i < params.size(); ++i) {
        const Tensor<S>& src = params[i].second;
        Tensor<double> dst = ref_params[i].second;
        CM_CHECK(dst.numel() == src.numel(), "gradcheck_suite: shape mismatch for '",
                 params[i].first, "' between precision twins");
        for (i64 j = 0; j < src.numel(); ++j) {
          dst.data()[j] = static_cast<double>(src.data()[j]);
        }
      }
      std::function<Tensor<double>()> ref_f = [=]() mutable {
        auto fwd = twin.forward(twin_image, state);
        return detection_loss(fwd.outputs, anchors, gts, loss_cfg).total;
      };
      out.push_back({"micro_model",
                     detail::fd_check_with_reference<S, double>(
                         f, params, ref_f, ref_params, default_fd_step<double>(),
                         composed_coords_per_param, seed)});
    }
  }

  return out;
}

}  // namespace cm
