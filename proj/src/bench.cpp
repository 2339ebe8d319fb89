#include <algorithm>
#include <chrono>
#include <cmath>
#include <numeric>
#include <sstream>
#include <stdexcept>

#include "sparse_engine/kernels.hpp"

namespace sparse_engine::kernels {

std::string_view to_string( KernelKind kind )
{
  switch ( kind ) {
    case KernelKind::spvmm: return "spvmm";
    case KernelKind::vmmsp: return "vmmsp";
    case KernelKind::dense: return "dense";
  }
  return "unknown";
}

KernelKind kernel_kind_from_string( std::string_view name )
{
  for ( KernelKind k : { KernelKind::spvmm, KernelKind::vmmsp, KernelKind::dense } ) {
    if ( to_string( k ) == name ) {
      return k;
    }
  }
  throw std::invalid_argument( "unknown kernel '" + std::string( name ) + "'" );
}

std::string to_csv_row( const BenchRecord& r )
{
  std::ostringstream os;
  os.precision( 17 );
  os << to_string( r.kernel ) << ',' << r.K << ',' << r.N << ',' << r.sparsity << ',' << r.block_size << ','
     << r.threads << ',' << r.reps << ',' << r.min_ns << ',' << r.median_ns << ',' << r.checksum;
  return os.str();
}

namespace {

Matrix random_output_major( std::size_t K, std::size_t N, Rng& rng )
{
  const double scale = 1.0 / std::sqrt( static_cast<double>( K ) );
  Matrix w( N, K );
  for ( float& v : w.data() ) {
    v = static_cast<float>( rng.normal() * scale );
  }
  return w;
}

} // namespace

BenchFixture::BenchFixture( std::size_t K_, std::size_t N_, Rng& rng )
  : K( K_ )
  , N( N_ )
  , kxn( Matrix( 1, 1 ) )
  , output_major( random_output_major( K_, N_, rng ) )
{
  kxn = pre_transpose( output_major );
}

Vector sparse_random_vector( std::size_t n, double sparsity, Rng& rng )
{
  if ( !( sparsity >= 0.0 && sparsity <= 1.0 ) ) {
    throw std::invalid_argument( "sparsity must lie in [0, 1]" );
  }
  const auto zeros = std::min( n, static_cast<std::size_t>( std::floor( sparsity * static_cast<double>( n ) + 1e-9 ) ) );
  std::vector<std::size_t> order( n );
  std::iota( order.begin(), order.end(), std::size_t { 0 } );
  rng.shuffle( std::span<std::size_t>( order ) );

  Vector v( n, 0.0f );
  for ( std::size_t i = zeros; i < n; ++i ) {
    float value;
    do {
      value = static_cast<float>( rng.normal() );
    } while ( value == 0.0f );
    v[order[i]] = value;
  }
  return v;
}

BenchRecord bench_kernel( KernelKind kind,
                          const BenchFixture& fixture,
                          double sparsity,
                          std::size_t reps,
                          std::uint64_t input_seed,
                          const KernelConfig& cfg )
{
  if ( reps == 0 ) {
    throw std::invalid_argument( "bench_kernel: reps must be >= 1" );
  }
  cfg.validate();

  Rng rng( input_seed );
  Vector x;
  Vector mask;
  if ( kind == KernelKind::vmmsp ) {
    x = sparse_random_vector( fixture.K, 0.0, rng );
    mask = sparse_random_vector( fixture.N, sparsity, rng );
  } else {
    x = sparse_random_vector( fixture.K, sparsity, rng );
  }

  Vector y( fixture.N );
  auto call = [&] {
    switch ( kind ) {
      case KernelKind::spvmm: spvmm( x, fixture.kxn, cfg, y ); break;
      case KernelKind::vmmsp: vmmsp( x, fixture.output_major, mask, cfg, y ); break;
      case KernelKind::dense: y = dense( x, fixture.kxn, cfg ); break;
    }
  };

  constexpr int warmup = 2;
  for ( int i = 0; i < warmup; ++i ) {
    call();
  }
  std::vector<std::int64_t> times;
  times.reserve( reps );
  for ( std::size_t i = 0; i < reps; ++i ) {
    const auto start = std::chrono::steady_clock::now();
    call();
    const auto stop = std::chrono::steady_clock::now();
    times.push_back( std::chrono::duration_cast<std::chrono::nanoseconds>( stop - start ).count() );
  }
  std::sort( times.begin(), times.end() );

  BenchRecord rec;
  rec.kernel = kind;
  rec.K = fixture.K;
  rec.N = fixture.N;
  rec.sparsity = sparsity;
  rec.block_size = cfg.block_size;
  rec.threads = cfg.threads;
  rec.reps = reps;
  rec.min_ns = times.front();
  rec.median_ns = times[times.size() / 2];
  rec.checksum = std::accumulate( y.begin(), y.end(), 0.0 );
  return rec;
}

BenchRecord bench_kernel( KernelKind kind,
                          std::size_t K,
                          std::size_t N,
                          double sparsity,
                          std::size_t reps,
                          Rng& rng,
                          const KernelConfig& cfg )
{
  const BenchFixture fixture( K, N, rng );
  return bench_kernel( kind, fixture, sparsity, reps, rng.next_u64(), cfg );
}

} // namespace sparse_engine::kernels
