#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "cpd/executor.hpp"
#include "cpd/graph.hpp"

namespace cpd {

/// Binary per-channel gates g_w for one prunable producer. Starts all-ones;
/// pruning only ever clears gates.
struct GateMask {
  std::string owner;
  std::vector<std::uint8_t> gates;

  std::int64_t surviving() const;
};

using MaskSet = std::map<std::string, GateMask>;

/// How a channel arriving on input `slot` of a node relates to that node.
struct EdgeFlow {
  bool passes = false;      ///< the channel continues into the node's output
  bool couples = false;     ///< the node forces it to match the node's other inputs
  bool consumer = false;    ///< a stop op whose input features shrink with the channel
  bool rider = false;       ///< a channel-mixing pass-through (norm, softmax)
  bool freezes = false;     ///< the channel meets a dimension that must not change
  std::int64_t offset = 0;  ///< channel offset inside the node output (channel concat)
  std::int64_t block = 1;   ///< output features per input channel (flatten)
  std::int64_t granularity = 1;  ///< heads/groups that pruning must keep balanced
};

/// Channel semantics of the edge feeding `slot` of node `consumer`.
EdgeFlow edge_flow(const Graph& graph, std::size_t consumer, int slot);

/// delta(from, to): `to` is reached from `from` through nodes that carry the
/// channel dimension unchanged (no stop op in between).
struct DirectRelation {
  std::string from;
  std::string to;

  friend auto operator<=>(const DirectRelation&, const DirectRelation&) = default;
};

/// Nodes directly related to `node`: every node reached along channel-carrying
/// paths, including the first node on each path that does not carry it on.
std::set<std::string> direct_successors(const Graph& graph, const std::string& node);
std::vector<DirectRelation> direct_relations(const Graph& graph);

/// c(w): coupling ops that constrain the output channels of stop op `stop_op`.
std::set<std::string> following_couplings(const Graph& graph, const std::string& stop_op);

struct ConsumerRef {
  std::string op;
  int slot = 0;
  std::int64_t offset = 0;  ///< producer channel c maps to input features
  std::int64_t block = 1;   ///< [offset + c*block, offset + (c+1)*block)

  friend auto operator<=>(const ConsumerRef&, const ConsumerRef&) = default;
};

struct RiderRef {
  std::string op;
  std::int64_t offset = 0;
  std::int64_t block = 1;

  friend auto operator<=>(const RiderRef&, const RiderRef&) = default;
};

/// Producers whose output channels are pruned in lockstep, with the
/// consumers whose input features follow them.
struct CouplingGroup {
  int id = 0;
  std::vector<std::string> producers;
  std::vector<std::string> coupling_ops;
  std::vector<ConsumerRef> consumers;
  std::vector<RiderRef> riders;
  std::int64_t channel_count = 0;
  /// Channels removed per pruning unit, one from each of `unit` equal blocks.
  std::int64_t unit = 1;
  bool prunable = true;
  std::string frozen_reason;

  std::int64_t unit_count() const { return channel_count / unit; }
  /// Channels making up pruning unit `j`: {j + b * channel_count/unit}.
  std::vector<std::int64_t> unit_channels(std::int64_t j) const;
};

struct PruningScheme {
  std::vector<CouplingGroup> groups;
  std::string graph_fingerprint;

  /// Group whose producers include `producer`, or nullptr.
  const CouplingGroup* group_of(const std::string& producer) const;
};

/// Builds the coupling groups of a graph: producers sharing a coupling op are
/// merged transitively; every stop op and param node lands in exactly one
/// group. Throws GraphError when a forced group has conflicting channel counts.
PruningScheme build_coupling_groups(const Graph& graph);

MaskSet full_masks(const PruningScheme& scheme);

struct MaskViolation {
  int group = -1;
  std::vector<std::int64_t> channels;
  std::string reason;
};

struct MaskReport {
  std::vector<MaskViolation> violations;
  bool ok() const { return violations.empty(); }
  std::string describe() const;
};

/// ok iff every group's producers carry identical masks, whole units are kept
/// or dropped, frozen groups are untouched and no group is emptied.
MaskReport validate_masks(const PruningScheme& scheme, const MaskSet& masks);

ChannelGating make_gating(const Graph& graph, const PruningScheme& scheme, const MaskSet& masks);
ChannelPlan make_plan(const Graph& graph, const PruningScheme& scheme, const MaskSet& masks);

/// Validates the masks against the scheme, then compacts.
Model compact(const Model& model, const PruningScheme& scheme, const MaskSet& masks);

std::string scheme_to_json(const PruningScheme& scheme);
PruningScheme scheme_from_json(const std::string& text);
void save_scheme(const PruningScheme& scheme, const std::filesystem::path& path);
PruningScheme load_scheme(const std::filesystem::path& path);

}  // namespace cpd
