#pragma once

#include <cstddef>
#include <functional>

#include <tbb/blocked_range.h>
#include <tbb/parallel_for.h>
#include <tbb/task_arena.h>

namespace mvsim {

/// Runs body(i) for i in [0, n). Work items must not depend on execution
/// order; every random draw is addressed by its particle index, so results
/// are schedule-invariant.
template <class Body>
void parallel_for(std::size_t n, Body&& body, std::size_t grain = 64) {
    tbb::parallel_for(tbb::blocked_range<std::size_t>(0, n, grain),
                      [&](const tbb::blocked_range<std::size_t>& r) {
                          for (std::size_t i = r.begin(); i != r.end(); ++i) body(i);
                      });
}

/// Runs fn inside an arena limited to `threads` workers (0 = library default).
inline void with_threads(std::size_t threads, const std::function<void()>& fn) {
    if (threads == 0) {
        fn();
        return;
    }
    tbb::task_arena arena(static_cast<int>(threads));
    arena.execute(fn);
}

}  // namespace mvsim
