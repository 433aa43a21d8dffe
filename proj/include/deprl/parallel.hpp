#pragma once

#include <cstddef>
#include <functional>

namespace deprl {

// Runs body(i) for i in [0, count) on up to `threads` threads with static
// chunking. If any call throws, the exception from the lowest index is
// rethrown after all threads join.
void parallel_for(std::size_t count, unsigned threads, const std::function<void(std::size_t)>& body);

}  // namespace deprl
