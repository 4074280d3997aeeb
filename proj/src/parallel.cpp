#include "zskd/parallel.hpp"

#include <atomic>
#include <condition_variable>
#include <cstdlib>
#include <exception>
#include <mutex>
#include <thread>
#include <vector>

namespace zskd {

namespace {

int default_threads() {
    int n = static_cast<int>(std::thread::hardware_concurrency());
    if (n < 1) n = 1;
    if (const char* env = std::getenv("ZSKD_THREADS")) {
        int v = std::atoi(env);
        if (v >= 1) n = v;
    }
    return n;
}

int g_threads = default_threads();

// Lazily started pool. Workers pick chunk indices off a shared counter; the
// chunk decomposition itself is fixed (kChunkCount), so scheduling order
// cannot affect results.
class Pool {
public:
    static Pool& instance() {
        static Pool* pool = new Pool;  // leaked: workers must outlive static teardown
        return *pool;
    }

    void run(const std::function<void(int)>& fn, int workers) {
        std::unique_lock<std::mutex> lock(mutex_);
        ensure_workers(workers - 1);  // caller participates
        job_ = &fn;
        next_chunk_.store(0);
        remaining_ = kChunkCount;
        first_error_ = nullptr;
        ++generation_;
        lock.unlock();
        cv_start_.notify_all();

        work();  // caller thread takes chunks too

        std::unique_lock<std::mutex> done(mutex_);
        cv_done_.wait(done, [this] { return remaining_ == 0; });
        job_ = nullptr;
        if (first_error_) std::rethrow_exception(first_error_);
    }

private:
    Pool() = default;

    void ensure_workers(int n) {
        while (static_cast<int>(workers_.size()) < n) {
            workers_.emplace_back([this] { worker_loop(); });
            workers_.back().detach();
        }
    }

    void worker_loop() {
        uint64_t seen = 0;
        for (;;) {
            std::unique_lock<std::mutex> lock(mutex_);
            cv_start_.wait(lock, [&] { return generation_ != seen; });
            seen = generation_;
            lock.unlock();
            work();
        }
    }

    void work() {
        for (;;) {
            int chunk = next_chunk_.fetch_add(1);
            if (chunk >= kChunkCount) return;
            try {
                (*job_)(chunk);
            } catch (...) {
                std::lock_guard<std::mutex> lock(mutex_);
                if (!first_error_) first_error_ = std::current_exception();
            }
            std::lock_guard<std::mutex> lock(mutex_);
            if (--remaining_ == 0) cv_done_.notify_all();
        }
    }

    std::mutex mutex_;
    std::condition_variable cv_start_;
    std::condition_variable cv_done_;
    std::vector<std::thread> workers_;
    const std::function<void(int)>* job_ = nullptr;
    std::atomic<int> next_chunk_{0};
    int remaining_ = 0;
    uint64_t generation_ = 0;
    std::exception_ptr first_error_;
};

}  // namespace

int thread_count() { return g_threads; }

void set_thread_count(int n) { g_threads = n < 1 ? 1 : n; }

ChunkRange chunk_range(int64_t n, int chunk) {
    int64_t base = n / kChunkCount;
    int64_t rem = n % kChunkCount;
    int64_t begin = chunk * base + (chunk < rem ? chunk : rem);
    int64_t len = base + (chunk < rem ? 1 : 0);
    return {begin, begin + len};
}

void parallel_chunks(const std::function<void(int)>& fn) {
    if (g_threads <= 1) {
        for (int c = 0; c < kChunkCount; ++c) fn(c);
        return;
    }
    Pool::instance().run(fn, g_threads);
}

void parallel_for(int64_t n, const std::function<void(int64_t)>& fn) {
    if (n <= 0) return;
    parallel_chunks([&](int chunk) {
        ChunkRange r = chunk_range(n, chunk);
        for (int64_t i = r.begin; i < r.end; ++i) fn(i);
    });
}

}  // namespace zskd
