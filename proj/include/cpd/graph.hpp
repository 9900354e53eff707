#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

#include "cpd/checkpoint.hpp"
#include "cpd/tensor.hpp"

namespace cpd {

enum class OpType {
  Input,
  Param,
  Linear,
  Conv,
  Add,
  MatMul,
  Concat,
  Relu,
  Gelu,
  Norm,
  Flatten,
  Tokens,
  Untokens,
  Transpose,
  Pool,
  Softmax,
  Output,
  CrossEntropy,
};

/// Stop ops may change channel counts; coupling ops require matching channel
/// dimensions among their inputs; pass-through ops keep the channel dimension.
enum class OpCategory { Stop, Coupling, PassThrough, Source, Sink };

/// Tensor layout of a node output. The leading axis is always the batch.
///   NCHW  [N, C, H, W]   channel axis 1
///   NC    [N, C]         channel axis 1
///   NTC   [N, T, C]      channel axis 2
///   NCT   [N, C, T]      channel axis 1
///   Index integer class labels, [N] or [N, H, W]
///   Scalar a loss value
enum class Layout { NCHW, NC, NTC, NCT, Index, Scalar };

std::string_view op_name(OpType t);
OpType op_from_name(std::string_view name);
OpCategory category_of(OpType t);
std::string_view layout_name(Layout l);
Layout layout_from_name(std::string_view name);

struct Spatial {
  std::int64_t h = 1;
  std::int64_t w = 1;
  bool scalar = true;  ///< no spatial extent (vector or loss outputs)

  friend bool operator==(const Spatial&, const Spatial&) = default;
};

class GraphError : public Error {
 public:
  GraphError(const std::string& node, const std::string& reason);
  const std::string& node() const { return node_; }

 private:
  std::string node_;
};

struct OpNode {
  std::string id;
  OpType type = OpType::Input;
  std::vector<std::string> inputs;
  std::map<std::string, std::string> attrs;

  // Filled in by shape inference when the node becomes part of a Graph.
  Layout layout = Layout::NC;
  std::int64_t out_channels = 1;
  Spatial out_spatial;

  OpCategory category() const { return category_of(type); }
  bool has_attr(const std::string& key) const { return attrs.count(key) != 0; }
  std::int64_t attr_int(const std::string& key, std::int64_t fallback) const;
  std::int64_t attr_int(const std::string& key) const;
  double attr_double(const std::string& key, double fallback) const;
  std::string attr_str(const std::string& key, const std::string& fallback) const;

  /// Axis of the output tensor (including the batch axis) holding channels.
  int channel_axis() const;
  /// Token count for NTC/NCT outputs.
  std::int64_t tokens() const { return out_spatial.h * out_spatial.w; }
  /// Output shape for the given batch size (parameters always use batch 1).
  Shape out_shape(std::int64_t batch) const;
  bool is_depthwise(std::int64_t in_channels) const;
};

/// Validated, topologically ordered computation graph. Immutable once built.
class Graph {
 public:
  Graph() = default;
  /// Validates node references, acyclicity and channel metadata, and infers
  /// every node's layout, channel count and spatial extent. Throws GraphError.
  explicit Graph(std::vector<OpNode> nodes);

  const std::vector<OpNode>& nodes() const { return nodes_; }
  std::size_t size() const { return nodes_.size(); }
  bool contains(const std::string& id) const { return index_.count(id) != 0; }
  std::size_t index_of(const std::string& id) const;
  const OpNode& node(const std::string& id) const { return nodes_[index_of(id)]; }
  const OpNode& node(std::size_t i) const { return nodes_[i]; }
  const OpNode& input_node(const OpNode& n, std::size_t slot) const { return node(n.inputs.at(slot)); }

  /// (consumer index, input slot) pairs reading node i's output.
  const std::vector<std::pair<std::size_t, int>>& users(std::size_t i) const { return users_[i]; }

  const std::vector<std::string>& named_inputs() const { return inputs_; }
  const std::vector<std::string>& named_outputs() const { return outputs_; }

 private:
  std::vector<OpNode> nodes_;
  std::unordered_map<std::string, std::size_t> index_;
  std::vector<std::vector<std::pair<std::size_t, int>>> users_;
  std::vector<std::string> inputs_;
  std::vector<std::string> outputs_;
};

/// Parses the line-oriented graph format:
///   <id> = <opkind>(<arg-ids...>) {attr=value,...}
/// Blank lines and lines starting with '#' are ignored.
Graph parse_graph(std::string_view text);
Graph load_graph(const std::string& path);

/// Deterministic text form: nodes in topological order, attributes sorted.
std::string serialize_graph(const Graph& graph);

/// Hex FNV-1a hash of the serialized graph.
std::string graph_fingerprint(const Graph& graph);

/// Learnable tensor attached to a node.
struct ParamSpec {
  std::string name;  ///< "<node>.<param>"
  Shape shape;
  int out_axis = -1;  ///< axis indexed by the node's output channels, -1 if none
  int in_axis = -1;   ///< axis indexed by the node's input features, -1 if none
};

std::vector<ParamSpec> param_specs(const Graph& graph, const OpNode& node);
std::vector<ParamSpec> param_specs(const Graph& graph);

struct Model {
  Graph graph;
  ParamStore params;
};

/// Deterministic He-style initialization of every parameter in the graph.
ParamStore init_params(const Graph& graph, std::uint64_t seed);

/// Verifies that `params` holds exactly the tensors the graph declares.
void check_params(const Graph& graph, const ParamStore& params);

}  // namespace cpd
