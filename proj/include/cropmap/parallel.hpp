#pragma once

#include <cstddef>
#include <functional>

namespace cropmap {

/// Worker count used by parallel_for when none is given. 0 = hardware concurrency.
void set_default_threads(unsigned n);
unsigned default_threads();

/// Runs body(i) for i in [0, n) on up to `threads` workers (0 = default_threads()).
/// Each index must write only to its own output slot; results are then independent
/// of the schedule. If any body throws, the exception of the lowest failing index
/// is rethrown after all workers finish.
void parallel_for(std::size_t n, const std::function<void(std::size_t)>& body, unsigned threads = 0);

} // namespace cropmap
