#include "sparse_engine/kernels.hpp"

#include <algorithm>
#include <cstdlib>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include "sparse_engine/worker_pool.hpp"

namespace sparse_engine::kernels {

std::size_t default_thread_count()
{
  if ( const char* env = std::getenv( "SPARSE_ENGINE_THREADS" ) ) {
    char* end = nullptr;
    const long v = std::strtol( env, &end, 10 );
    if ( end != env && *end == '\0' && v > 0 ) {
      return static_cast<std::size_t>( v );
    }
  }
  return std::max<std::size_t>( 1, std::thread::hardware_concurrency() );
}

void KernelConfig::validate() const
{
  if ( block_size == 0 ) {
    throw std::invalid_argument( "block size must be >= 1" );
  }
  if ( threads == 0 ) {
    throw std::invalid_argument( "thread count must be >= 1" );
  }
}

TransposedWeight pre_transpose( const Matrix& output_major ) { return TransposedWeight( output_major.transposed() ); }

namespace {

// Outputs processed per pass over the nonzero inputs; a whole number of
// blocks. 4096 fp32 outputs stay resident in L1 while rows stream past.
constexpr std::size_t tile_outputs = 4096;

struct OutputRange
{
  std::size_t begin;
  std::size_t end;
};

class Partition
{
public:
  Partition( std::size_t n, const KernelConfig& cfg )
    : n_( n )
    , block_( cfg.block_size )
    , blocks_( ( n + cfg.block_size - 1 ) / cfg.block_size )
    , tasks_( std::min( cfg.threads, blocks_ ) )
  {}

  std::size_t tasks() const { return tasks_; }

  // Task t owns the contiguous blocks [t*B/T, (t+1)*B/T).
  OutputRange range( std::size_t t ) const
  {
    const std::size_t b0 = t * blocks_ / tasks_;
    const std::size_t b1 = ( t + 1 ) * blocks_ / tasks_;
    return { b0 * block_, std::min( b1 * block_, n_ ) };
  }

  std::size_t tile() const { return block_ * std::max<std::size_t>( 1, tile_outputs / block_ ); }

private:
  std::size_t n_;
  std::size_t block_;
  std::size_t blocks_;
  std::size_t tasks_;
};

inline void axpy( float* __restrict y, float a, const float* __restrict w, std::size_t len )
{
  for ( std::size_t j = 0; j < len; ++j ) {
    y[j] += a * w[j];
  }
}

template<typename Body>
void run_partitioned( const Partition& part, const KernelConfig& cfg, KernelCounters* counters, Body&& body )
{
  std::vector<KernelCounters> slots( part.tasks() );
  auto task = [&]( std::size_t t ) { body( part.range( t ), slots[t] ); };
  WorkerPool::shared( cfg.threads ).run( part.tasks(), task );
  if ( counters ) {
    for ( const auto& s : slots ) {
      *counters += s;
    }
  }
}

// Shared driver for spvmm and the dense K x N baseline. `rows` lists the
// input indices to visit, in increasing order.
void row_major_product( std::span<const float> x,
                        std::span<const std::uint32_t> rows,
                        const TransposedWeight& w,
                        const KernelConfig& cfg,
                        std::span<float> y,
                        KernelCounters* counters )
{
  const Matrix& kxn = w.kxn();
  const Partition part( w.out_dim(), cfg );
  run_partitioned( part, cfg, counters, [&]( OutputRange r, KernelCounters& c ) {
    std::fill( y.begin() + static_cast<std::ptrdiff_t>( r.begin ), y.begin() + static_cast<std::ptrdiff_t>( r.end ), 0.0f );
    for ( std::size_t t0 = r.begin; t0 < r.end; t0 += part.tile() ) {
      const std::size_t len = std::min( part.tile(), r.end - t0 );
      float* yt = y.data() + t0;
      for ( std::uint32_t k : rows ) {
        axpy( yt, x[k], kxn.row( k ).data() + t0, len );
      }
      c.rows_read += rows.size();
    }
    c.weight_reads += static_cast<std::uint64_t>( rows.size() ) * ( r.end - r.begin );
  } );
}

void check_spvmm_dims( std::span<const float> x, const TransposedWeight& w, std::span<float> y, const char* what )
{
  if ( x.size() != w.in_dim() ) {
    throw std::invalid_argument( std::string( what ) + ": x has " + std::to_string( x.size() )
                                 + " elements, weight expects " + std::to_string( w.in_dim() ) );
  }
  if ( y.size() != w.out_dim() ) {
    throw std::invalid_argument( std::string( what ) + ": output length mismatch" );
  }
}

} // namespace

void spvmm( std::span<const float> x,
            const TransposedWeight& w,
            const KernelConfig& cfg,
            std::span<float> y,
            KernelCounters* counters )
{
  cfg.validate();
  check_spvmm_dims( x, w, y, "spvmm" );
  std::vector<std::uint32_t> nonzero;
  nonzero.reserve( x.size() );
  for ( std::size_t k = 0; k < x.size(); ++k ) {
    if ( x[k] != 0.0f ) {
      nonzero.push_back( static_cast<std::uint32_t>( k ) );
    }
  }
  row_major_product( x, nonzero, w, cfg, y, counters );
}

Vector spvmm( std::span<const float> x, const TransposedWeight& w, const KernelConfig& cfg, KernelCounters* counters )
{
  Vector y( w.out_dim() );
  spvmm( x, w, cfg, y, counters );
  return y;
}

Vector dense( std::span<const float> x, const TransposedWeight& w, const KernelConfig& cfg, KernelCounters* counters )
{
  cfg.validate();
  Vector y( w.out_dim() );
  check_spvmm_dims( x, w, y, "dense" );
  std::vector<std::uint32_t> all( x.size() );
  for ( std::size_t k = 0; k < x.size(); ++k ) {
    all[k] = static_cast<std::uint32_t>( k );
  }
  row_major_product( x, all, w, cfg, y, counters );
  return y;
}

void vmmsp( std::span<const float> x,
            const Matrix& w,
            std::span<const float> mask,
            const KernelConfig& cfg,
            std::span<float> y,
            KernelCounters* counters )
{
  cfg.validate();
  if ( x.size() != w.cols() ) {
    throw std::invalid_argument( "vmmsp: x has " + std::to_string( x.size() ) + " elements, weight expects "
                                 + std::to_string( w.cols() ) );
  }
  if ( mask.size() != w.rows() || y.size() != w.rows() ) {
    throw std::invalid_argument( "vmmsp: mask/output length must equal weight rows" );
  }
  const Partition part( w.rows(), cfg );
  run_partitioned( part, cfg, counters, [&]( OutputRange r, KernelCounters& c ) {
    for ( std::size_t n = r.begin; n < r.end; ++n ) {
      if ( mask[n] != 0.0f ) {
        y[n] = dot( w.row( n ), x ) * mask[n];
        ++c.inner_products;
      } else {
        y[n] = 0.0f;
      }
    }
    c.weight_reads += c.inner_products * x.size();
  } );
}

Vector vmmsp( std::span<const float> x,
              const Matrix& w,
              std::span<const float> mask,
              const KernelConfig& cfg,
              KernelCounters* counters )
{
  Vector y( w.rows() );
  vmmsp( x, w, mask, cfg, y, counters );
  return y;
}

Vector dense_rows( std::span<const float> x, const Matrix& w, const KernelConfig& cfg, KernelCounters* counters )
{
  cfg.validate();
  if ( x.size() != w.cols() ) {
    throw std::invalid_argument( "dense_rows: x has " + std::to_string( x.size() ) + " elements, weight expects "
                                 + std::to_string( w.cols() ) );
  }
  Vector y( w.rows() );
  const Partition part( w.rows(), cfg );
  run_partitioned( part, cfg, counters, [&]( OutputRange r, KernelCounters& c ) {
    for ( std::size_t n = r.begin; n < r.end; ++n ) {
      y[n] = dot( w.row( n ), x );
    }
    c.inner_products += r.end - r.begin;
    c.weight_reads += ( r.end - r.begin ) * x.size();
  } );
  return y;
}

} // namespace sparse_engine::kernels
