#pragma once

#include <map>
#include <string>
#include <utility>
#include <vector>

#include "cpd/graph.hpp"

namespace cpd {

using TensorMap = std::map<std::string, Tensor>;

/// Channel gates applied during a forward pass.
///
/// `gates` multiplies the output-channel slices of a producer's parameters
/// (weight and bias, or a param node's value). `channel_masks` marks the kept
/// channels of nodes that mix across the channel axis (norm, softmax); their
/// statistics ignore masked channels and their masked outputs are zero.
struct ChannelGating {
  std::map<std::string, std::vector<double>> gates;
  std::map<std::string, std::vector<double>> channel_masks;
};

struct ExecOptions {
  bool record_gradients = false;
  const ChannelGating* gating = nullptr;
};

struct ExecResult {
  TensorMap outputs;           ///< one entry per named output / loss node
  std::vector<Tensor> values;  ///< every node's value, indexed like graph.nodes()

  const Tensor& value(const Graph& g, const std::string& id) const { return values[g.index_of(id)]; }
};

/// Runs the graph on `inputs` (one tensor per Input node; label inputs hold
/// class indices as doubles). Checks every node's output against its declared
/// shape and rejects non-finite loss values.
ExecResult execute(const Graph& graph, const ParamStore& params, const TensorMap& inputs,
                   const ExecOptions& options = {});

/// Channels to keep when compacting a gated graph.
struct ChannelPlan {
  std::map<std::string, std::vector<bool>> producer_keep;              ///< output channels of stop/param nodes
  std::map<std::pair<std::string, int>, std::vector<bool>> input_keep;  ///< input features of consumers
  std::map<std::string, std::vector<bool>> channel_keep;               ///< riders (norm parameters)
};

/// Physically removes dropped channels from parameters and channel metadata.
/// Throws GraphError if a layer would be left without channels or a grouped
/// convolution would become unbalanced.
Model compact(const Graph& graph, const ParamStore& params, const ChannelPlan& plan);

}  // namespace cpd
