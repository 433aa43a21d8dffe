#pragma once

#include <string>

#include "deprl/engine.hpp"

namespace deprl {

// Text checkpoint: round index, running-average state and every worker's
// flat parameters in shortest round-trip decimal.
void save_checkpoint(const Checkpoint& checkpoint, const std::string& path);
Checkpoint load_checkpoint(const std::string& path);

}  // namespace deprl
