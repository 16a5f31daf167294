// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <atomic>
#include <condition_variable>
#include <cstddef>
#include <exception>
#include <functional>
#include <mutex>
#include <thread>
#include <vector>

namespace refprop {

/**
 * Persistent worker pool for index-range parallelism. parallel_for blocks
 * until every index is processed; the calling thread works too, so a pool of
 * size 1 still overlaps one worker with the caller.
 *
 * Work items must not submit nested parallel_for calls on the same pool.
 */
class ThreadPool {
public:
    explicit ThreadPool(std::size_t workers) {
        for (std::size_t i = 0; i < workers; ++i)
            threads_.emplace_back([this] { worker_loop(); });
    }

    ~ThreadPool() {
        {
            std::lock_guard<std::mutex> lk(mu_);
            stop_ = true;
        }
        cv_.notify_all();
        for (auto& t : threads_) t.join();
    }

    ThreadPool(const ThreadPool&) = delete;
    ThreadPool& operator=(const ThreadPool&) = delete;

    std::size_t size() const { return threads_.size(); }

    /// Runs fn(i) for every i in [begin, end). Rethrows the first exception.
    void parallel_for(std::size_t begin, std::size_t end,
                      const std::function<void(std::size_t)>& fn) {
        if (begin >= end) return;
        if (threads_.empty() || end - begin == 1) {
            for (std::size_t i = begin; i < end; ++i) fn(i);
            return;
        }
        {
            std::lock_guard<std::mutex> lk(mu_);
            job_fn_ = &fn;
            job_next_.store(begin, std::memory_order_relaxed);
            job_end_ = end;
            job_pending_ = threads_.size();
            job_error_ = nullptr;
            ++job_epoch_;
        }
        cv_.notify_all();
        drain(fn);
        std::unique_lock<std::mutex> lk(mu_);
        done_cv_.wait(lk, [this] { return job_pending_ == 0; });
        job_fn_ = nullptr;
        if (job_error_) std::rethrow_exception(job_error_);
    }

private:
    void drain(const std::function<void(std::size_t)>& fn) {
        for (;;) {
            const std::size_t i = job_next_.fetch_add(1, std::memory_order_relaxed);
            if (i >= job_end_) return;
            try {
                fn(i);
            } catch (...) {
                std::lock_guard<std::mutex> lk(mu_);
                if (!job_error_) job_error_ = std::current_exception();
            }
        }
    }

    void worker_loop() {
        std::size_t seen_epoch = 0;
        for (;;) {
            const std::function<void(std::size_t)>* fn = nullptr;
            {
                std::unique_lock<std::mutex> lk(mu_);
                cv_.wait(lk, [&] { return stop_ || (job_fn_ && job_epoch_ != seen_epoch); });
                if (stop_) return;
                seen_epoch = job_epoch_;
                fn = job_fn_;
            }
            drain(*fn);
            {
                std::lock_guard<std::mutex> lk(mu_);
                if (--job_pending_ == 0) done_cv_.notify_all();
            }
        }
    }

    std::vector<std::thread> threads_;
    std::mutex mu_;
    std::condition_variable cv_, done_cv_;
    const std::function<void(std::size_t)>* job_fn_ = nullptr;
    std::atomic<std::size_t> job_next_{0};
    std::size_t job_end_ = 0;
    std::size_t job_pending_ = 0;
    std::size_t job_epoch_ = 0;
    std::exception_ptr job_error_;
    bool stop_ = false;
};

}  // namespace refprop
