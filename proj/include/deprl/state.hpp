#pragma once

#include <cstddef>

#include "deprl/model.hpp"

namespace deprl {

// One worker's parameters: its copy of the shared representation and its
// private head. Random draws for the worker come from substreams keyed by
// (run seed, worker_id, round, phase), so no generator state is stored here.
struct WorkerState {
  std::size_t worker_id = 0;
  Representation phi;
  Head theta;

  bool operator==(const WorkerState&) const = default;
};

}  // namespace deprl
