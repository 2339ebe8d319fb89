#pragma once

#include <condition_variable>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <mutex>
#include <thread>
#include <vector>

namespace sparse_engine {

/// Fixed set of persistent worker threads.
///
/// run(tasks, fn) executes fn(t) for every t in [0, tasks) and returns once
/// all of them finished. Task t always runs on thread t % size(), so a given
/// configuration maps work to threads the same way on every call. The calling
/// thread acts as thread 0.
class WorkerPool
{
public:
  explicit WorkerPool( std::size_t threads );
  ~WorkerPool();

  WorkerPool( const WorkerPool& ) = delete;
  WorkerPool& operator=( const WorkerPool& ) = delete;

  std::size_t size() const { return workers_.size() + 1; }

  void run( std::size_t tasks, const std::function<void( std::size_t )>& fn );

  // Process-wide pool with the given thread count, created on first use.
  static WorkerPool& shared( std::size_t threads );

private:
  void worker_loop( std::size_t index );
  void run_share( std::size_t index );

  std::vector<std::thread> workers_;
  std::mutex run_mutex_;

  std::mutex mutex_;
  std::condition_variable start_cv_;
  std::condition_variable done_cv_;
  const std::function<void( std::size_t )>* job_ = nullptr;
  std::size_t tasks_ = 0;
  std::uint64_t generation_ = 0;
  std::size_t pending_ = 0;
  bool stop_ = false;
};

} // namespace sparse_engine
