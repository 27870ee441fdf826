#pragma once

#include <functional>

namespace nemo {

// Worker cap for the embarrassingly parallel loops (per-seed forwards,
// oracle subsets). Defaults to 1.
void set_jobs(int jobs);
int jobs();

// Runs fn(i) for i in [0, n). Work is split into contiguous chunks, so results
// written by index are identical for any job count.
void parallel_for(int n, const std::function<void(int)>& fn);

}  // namespace nemo

namespace nemo {

// Raises glibc's mmap/trim thresholds so the per-pass temporaries are served
// from the heap instead of fresh zero pages. Call once from main().
void tune_allocator();

}  // namespace nemo
