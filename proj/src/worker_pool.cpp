#include "sparse_engine/worker_pool.hpp"

#include <map>
#include <memory>
#include <stdexcept>

namespace sparse_engine {

WorkerPool::WorkerPool( std::size_t threads )
{
  if ( threads == 0 ) {
    throw std::invalid_argument( "WorkerPool needs at least one thread" );
  }
  workers_.reserve( threads - 1 );
  for ( std::size_t i = 1; i < threads; ++i ) {
    workers_.emplace_back( [this, i] { worker_loop( i ); } );
  }
}

WorkerPool::~WorkerPool()
{
  {
    std::lock_guard lock( mutex_ );
    stop_ = true;
  }
  start_cv_.notify_all();
  for ( auto& w : workers_ ) {
    w.join();
  }
}

void WorkerPool::run_share( std::size_t index )
{
  for ( std::size_t t = index; t < tasks_; t += size() ) {
    ( *job_ )( t );
  }
}

void WorkerPool::run( std::size_t tasks, const std::function<void( std::size_t )>& fn )
{
  if ( tasks == 0 ) {
    return;
  }
  if ( workers_.empty() || tasks == 1 ) {
    for ( std::size_t t = 0; t < tasks; ++t ) {
      fn( t );
    }
    return;
  }

  std::lock_guard run_lock( run_mutex_ );
  {
    std::lock_guard lock( mutex_ );
    job_ = &fn;
    tasks_ = tasks;
    pending_ = workers_.size();
    ++generation_;
  }
  start_cv_.notify_all();

  run_share( 0 );

  std::unique_lock lock( mutex_ );
  done_cv_.wait( lock, [this] { return pending_ == 0; } );
  job_ = nullptr;
}

void WorkerPool::worker_loop( std::size_t index )
{
  std::uint64_t seen = 0;
  for ( ;; ) {
    {
      std::unique_lock lock( mutex_ );
      start_cv_.wait( lock, [&] { return stop_ || generation_ != seen; } );
      if ( stop_ ) {
        return;
      }
      seen = generation_;
    }
    run_share( index );
    {
      std::lock_guard lock( mutex_ );
      --pending_;
    }
    done_cv_.notify_one();
  }
}

WorkerPool& WorkerPool::shared( std::size_t threads )
{
  static std::mutex registry_mutex;
  static std::map<std::size_t, std::unique_ptr<WorkerPool>> registry;
  std::lock_guard lock( registry_mutex );
  auto& slot = registry[threads];
  if ( !slot ) {
    slot = std::make_unique<WorkerPool>( threads );
  }
  return *slot;
}

} // namespace sparse_engine
