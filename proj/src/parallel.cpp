#include "nemo/parallel.hpp"

#include <algorithm>
#include <atomic>
#include <exception>
#include <thread>
#include <vector>

namespace nemo {

namespace {
std::atomic<int> g_jobs{1};
}

void set_jobs(int jobs) { g_jobs = std::max(1, jobs); }

int jobs() { return g_jobs; }

void parallel_for(int n, const std::function<void(int)>& fn) {
    const int workers = std::min(jobs(), n);
    if (workers <= 1) {
        for (int i = 0; i < n; ++i) fn(i);
        return;
    }
    std::vector<std::thread> threads;
    std::vector<std::exception_ptr> errors(workers);
    for (int w = 0; w < workers; ++w) {
        threads.emplace_back([&, w] {
            const int lo = n * w / workers;
            const int hi = n * (w + 1) / workers;
            try {
                for (int i = lo; i < hi; ++i) fn(i);
            } catch (...) {
                errors[w] = std::current_exception();
            }
        });
    }
    for (auto& t : threads) t.join();
    for (const auto& e : errors)
        if (e) std::rethrow_exception(e);
}

}  // namespace nemo

#if defined(__GLIBC__)
#include <malloc.h>
#endif

namespace nemo {

void tune_allocator() {
#if defined(__GLIBC__)
    mallopt(M_MMAP_THRESHOLD, 256 << 20);
    mallopt(M_TRIM_THRESHOLD, 512 << 20);
#endif
}

}  // namespace nemo
