#pragma once

#include <compare>
#include <string>
#include <variant>
#include <vector>

namespace repneuron {

// A feed-forward neuron: the post-activation value at hidden index `index` of
// layer `layer`. Ordered layer-major, then by index.
struct NeuronId {
  int layer = 0;
  int index = 0;

  auto operator<=>(const NeuronId&) const = default;
};

std::string ToString(const NeuronId& id);

struct SetTo {
  double value = 0.0;
  bool operator==(const SetTo&) const = default;
};

struct AddDelta {
  double delta = 0.0;
  bool operator==(const AddDelta&) const = default;
};

using OverrideMode = std::variant<SetTo, AddDelta>;

// Overrides the listed neurons at every input position >= start_step.
// An empty target list is a valid no-op plan.
struct InterventionPlan {
  std::vector<NeuronId> targets;
  OverrideMode mode = SetTo{0.0};
  int start_step = 0;
};

std::string DescribeMode(const OverrideMode& mode);

}  // namespace repneuron
