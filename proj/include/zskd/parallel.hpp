#pragma once

#include <cstdint>
#include <functional>

namespace zskd {

// Number of worker threads used by batched tensor ops. Defaults to the
// hardware concurrency, capped by the ZSKD_THREADS environment variable.
int thread_count();
void set_thread_count(int n);

// Work is always split into a fixed number of chunks (kChunkCount) regardless
// of how many threads execute them, so reductions that combine per-chunk
// accumulators in chunk order give bit-identical results for any thread count.
inline constexpr int kChunkCount = 16;

struct ChunkRange {
    int64_t begin;
    int64_t end;
};

// Splits [0, n) into kChunkCount contiguous ranges (some possibly empty).
ChunkRange chunk_range(int64_t n, int chunk);

// Runs fn(chunk_index) for chunk_index in [0, kChunkCount) on the pool.
// Blocks until all chunks finish. Rethrows the first worker exception.
void parallel_chunks(const std::function<void(int)>& fn);

// Convenience: fn(i) for every i in [0, n), statically chunked.
void parallel_for(int64_t n, const std::function<void(int64_t)>& fn);

}  // namespace zskd
