#pragma once

#include <string>
#include <utility>
#include <vector>

#include "cellmamba/model/head.hpp"
#include "cellmamba/model/losses.hpp"

namespace cm {

// The full detector: backbone + FPN + adaptive head, with a flat named-tensor
// registry for the optimizer, checkpoints, and diagnostics.
template <typename S>
struct Detector {
  ModelConfig cfg;
  BackboneParams<S> backbone;
  HeadParams<S> head;

  Detector() = default;
  Detector(const ModelConfig& config, std::uint64_t seed) : cfg(config) {
    cfg.validate();
    Rng rng(seed);
    backbone = BackboneParams<S>(cfg, rng);
    head = HeadParams<S>(cfg, rng);
  }

  void visit(const ParamVisitor<S>& f) {
    backbone.visit("backbone", f);
    head.visit("head", f);
  }

  std::vector<std::pair<std::string, Tensor<S>>> named_params() {
    std::vector<std::pair<std::string, Tensor<S>>> out;
    visit([&](const std::string& name, Tensor<S>& t) { out.emplace_back(name, t); });
    return out;
  }

  void set_requires_grad(bool v) {
    visit([v](const std::string&, Tensor<S>& t) { t.set_requires_grad(v); });
  }

  void zero_grad() {
    visit([](const std::string&, Tensor<S>& t) { t.drop_grad(); });
  }

  i64 param_count() {
    i64 n = 0;
    visit([&](const std::string&, Tensor<S>& t) { n += t.numel(); });
    return n;
  }

  struct Forward {
    PyramidSet<S> pyramid;
    HeadOutputs<S> outputs;
  };

  Forward forward(const Tensor<S>& image, const CouplingState& s,
                  bool freeze_alpha = false) {
    Forward out;
    out.pyramid = fpn_build(backbone_forward(image, backbone, s), backbone);
    out.outputs = head_forward(out.pyramid, head, s, freeze_alpha);
    return out;
  }
};

}  // namespace cm
