#pragma once

#include <cstddef>
#include <functional>

namespace fieldnet {

// Caps worker threads used by parallel_for; 0 means hardware concurrency.
void set_max_jobs(int jobs);
int max_jobs();

// Runs body(i) for i in [0, count). Iterations must touch disjoint outputs.
// The first exception thrown by any iteration is rethrown after all workers
// have joined.
void parallel_for(std::size_t count, const std::function<void(std::size_t)>& body);

}  // namespace fieldnet
