#pragma once

#include <cstdint>
#include <functional>

namespace ettk {

// Worker cap: min(hardware threads, ETTK_THREADS when set).
std::int64_t max_threads();

// Runs fn(i) for i in [0, n) on up to max_threads() workers. Falls back to a
// plain loop for n <= 1 or a cap of one. fn must be safe to call concurrently
// for distinct i.
void parallel_for(std::int64_t n, const std::function<void(std::int64_t)>& fn);

}  // namespace ettk
