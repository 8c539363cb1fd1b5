#pragma once

#include <chrono>
#include <cmath>
#include <string>
#include <vector>

#include "cellmamba/model/mixers.hpp"

namespace cm {

struct BenchPoint {
  i64 length = 0;
  double seconds = 0;  // best of `reps` forward passes
};

struct BenchResult {
  std::vector<BenchPoint> points;
  double exponent = 0;           // log-log least-squares slope
  bool exponent_defined = false; // needs at least two lengths
};

// Wall-clock scaling of one forward pass of a token mixer ("ncmamba" or
// "msa") over ascending sequence lengths. Times exclude parameter setup and
// take the minimum over repetitions to suppress scheduler noise.
inline BenchResult bench_mixer(const std::string& op, const std::vector<i64>& lengths,
                               int reps = 3, i64 channels = 32) {
  CM_CHECK(op == "ncmamba" || op == "msa", "bench: op must be 'ncmamba' or 'msa', got '", op,
           "'");
  CM_CHECK(!lengths.empty(), "bench: need at least one length");
  CM_CHECK(reps >= 1, "bench: need reps >= 1, got ", reps);
  for (std::size_t i = 1; i < lengths.size(); ++i) {
    CM_CHECK(lengths[i] > lengths[i - 1], "bench: lengths must ascend, got ", lengths[i - 1],
             " before ", lengths[i]);
  }

  Rng rng(0xbe);
  NcMambaParams<float> nc(channels, 16, rng);
  MsaParams<float> msa_p(channels, 2, rng);
  Tape<float>::Scope no_tape(nullptr);

  BenchResult res;
  for (i64 len : lengths) {
    Tensor<float> xd({1, len, channels});
    for (i64 i = 0; i < xd.numel(); ++i) xd.data()[i] = static_cast<float>(rng.uniform(-1, 1));
    TokenSequence<float> x(xd, 1, len);

    double best = 0;
    for (int r = 0; r < reps; ++r) {
      const auto t0 = std::chrono::steady_clock::now();
      if (op == "ncmamba") {
        (void)nc_mamba_mix(x, nc);
      } else {
        (void)msa(x, msa_p);
      }
      const double s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      if (r == 0 || s < best) best = s;
    }
    res.points.push_back({len, best});
  }

  if (res.points.size() >= 2) {
    // Least squares on (ln L, ln t).
    const double n = static_cast<double>(res.points.size());
    double sx = 0, sy = 0, sxx = 0, sxy = 0;
    for (const auto& p : res.points) {
      const double lx = std::log(static_cast<double>(p.length));
      const double ly = std::log(std::max(p.seconds, 1e-12));
      sx += lx;
      sy += ly;
      sxx += lx * lx;
      sxy += lx * ly;
    }
    res.exponent = (n * sxy - sx * sy) / (n * sxx - sx * sx);
    res.exponent_defined = true;
  }
  return res;
}

}  // namespace cm
