#pragma once

#include <functional>
#include <random>
#include <string>
#include <vector>

#include "cpd/harness.hpp"

namespace cpd::testing {

// Random DAG in the text graph format: a conv stage (stop, depthwise and
// grouped convs, add, channel and spatial concat) followed by a token stage
// (linear, add, concat, attention matmuls). Dangling nodes become outputs.
struct DagLimits {
  int max_stops = 12;
  int max_couplings = 4;
};
std::string random_dag(std::mt19937_64& rng, const DagLimits& limits = {});

// Brute-force combing reference: enumerates every channel-carrying path from
// each origin, then merges origins whose element sets intersect until nothing
// changes.
struct OracleGroup {
  std::vector<std::string> producers;
  std::vector<std::string> coupling_ops;
  std::vector<std::tuple<std::string, int, std::int64_t, std::int64_t>> consumers;
  std::vector<std::tuple<std::string, std::int64_t, std::int64_t>> riders;
  std::int64_t channels = 0;
  std::int64_t unit = 1;
  bool prunable = true;

  friend bool operator==(const OracleGroup&, const OracleGroup&) = default;
};
struct OracleResult {
  bool conflict = false;  ///< a group mixes channel counts
  std::vector<OracleGroup> groups;
};
OracleResult combing_oracle(const Graph& graph);
std::vector<OracleGroup> as_oracle_groups(const PruningScheme& scheme);
// Nodes reached from `origin` by path enumeration, and the coupling ops among them.
std::set<std::string> oracle_successors(const Graph& graph, const std::string& origin);
std::set<std::string> oracle_couplings(const Graph& graph, const std::string& origin);
std::string describe(const std::vector<OracleGroup>& groups);

// Masks that clear a random subset of whole units in prunable groups while
// keeping at least one unit per group.
MaskSet random_masks(const PruningScheme& scheme, std::mt19937_64& rng, double drop = 0.4);

// Random inputs for every named graph input (labels drawn from the class range).
TensorMap random_inputs(const Graph& graph, std::int64_t batch, std::mt19937_64& rng);

// Central finite differences of a scalar function of several tensors. Returns
// the worst relative error |a - n| / max(|a|, |n|, floor) over every entry.
using ScalarFn = std::function<Tensor(const std::vector<Tensor>&)>;
double gradient_error(const ScalarFn& fn, std::vector<Tensor> inputs, double step = 1e-5, double floor = 1e-6);

// Random shape with `rank` axes of extent lo..hi.
Shape random_shape(std::mt19937_64& rng, int rank, std::int64_t lo = 1, std::int64_t hi = 4);

// Importance oracle: mean over z of ((psi(1 + h z) - psi(1)) / h)^2 per
// channel of `producer`, where psi_c(g) is the channel-c sum of dL/dw * w
// evaluated with the producer's weights scaled by g, and L is a fixed random
// linear readout of the output. z are stratified normal draws (one permuted
// Latin-hypercube column per channel).
// The closed-form producer_importance under the same readout is returned
// alongside. The graph's first output names the readout node.
struct ChannelOracle {
  std::vector<double> oracle;
  std::vector<double> closed;
};
ChannelOracle hutchinson_channel_scores(const Graph& graph, const ParamStore& params, const TensorMap& batch,
                                        const std::string& producer, double h, int samples, std::mt19937_64& rng);

// Mean and standard error of ||A z||^2 over iid normal z, the Hutchinson
// estimate of ||A||_F^2, with A z from finite differences of the gradient of
// 0.5 x^T A x.
struct HutchinsonQuadratic {
  double estimate = 0.0;
  double stderr_ = 0.0;
  double exact = 0.0;
};
HutchinsonQuadratic hutchinson_quadratic(std::int64_t n, double h, int samples, std::mt19937_64& rng);

// A scalar function of random inputs for finite-difference checks. `make`
// draws a fresh random shape each call.
struct GradCase {
  std::string name;
  std::function<std::pair<ScalarFn, std::vector<Tensor>>(std::mt19937_64&)> make;
};
// Every tensor primitive (including the masked softmax/norm variants and each
// matmul form), reduced to a scalar by a fixed random weighting.
std::vector<GradCase> primitive_cases();
// kd_kl, kd_cwd (both axes) and kd_cirkd with a prefilled queue; gradients
// are taken with respect to the student.
std::vector<GradCase> kd_cases();

}  // namespace cpd::testing
