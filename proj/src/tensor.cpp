#include "sparse_engine/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <stdexcept>
#include <string>

namespace sparse_engine {

Matrix::Matrix( std::size_t rows, std::size_t cols, float fill )
  : rows_( rows )
  , cols_( cols )
  , data_( rows * cols, fill )
{
  if ( rows == 0 || cols == 0 ) {
    throw std::invalid_argument( "Matrix dimensions must be positive" );
  }
}

Matrix::Matrix( std::size_t rows, std::size_t cols, std::vector<float> data )
  : rows_( rows )
  , cols_( cols )
  , data_( std::move( data ) )
{
  if ( rows == 0 || cols == 0 ) {
    throw std::invalid_argument( "Matrix dimensions must be positive" );
  }
  if ( data_.size() != rows * cols ) {
    throw std::invalid_argument( "Matrix data length " + std::to_string( data_.size() ) + " != "
                                 + std::to_string( rows ) + "x" + std::to_string( cols ) );
  }
}

Matrix::Matrix( std::initializer_list<std::initializer_list<float>> rows )
  : rows_( rows.size() )
  , cols_( rows.size() ? rows.begin()->size() : 0 )
{
  if ( rows_ == 0 || cols_ == 0 ) {
    throw std::invalid_argument( "Matrix dimensions must be positive" );
  }
  data_.reserve( rows_ * cols_ );
  for ( const auto& r : rows ) {
    if ( r.size() != cols_ ) {
      throw std::invalid_argument( "ragged Matrix initializer" );
    }
    data_.insert( data_.end(), r.begin(), r.end() );
  }
}

Matrix Matrix::transposed() const
{
  Matrix out( cols_, rows_ );
  for ( std::size_t r = 0; r < rows_; ++r ) {
    for ( std::size_t c = 0; c < cols_; ++c ) {
      out( c, r ) = ( *this )( r, c );
    }
  }
  return out;
}

std::uint64_t Rng::below( std::uint64_t n )
{
  if ( n == 0 ) {
    throw std::invalid_argument( "Rng::below(0)" );
  }
  const std::uint64_t limit = std::numeric_limits<std::uint64_t>::max() - std::numeric_limits<std::uint64_t>::max() % n;
  std::uint64_t v;
  do {
    v = engine_();
  } while ( v >= limit );
  return v % n;
}

double Rng::normal()
{
  if ( has_spare_ ) {
    has_spare_ = false;
    return spare_;
  }
  double u1;
  do {
    u1 = uniform();
  } while ( u1 <= 0.0 );
  const double u2 = uniform();
  const double radius = std::sqrt( -2.0 * std::log( u1 ) );
  const double angle = 2.0 * std::numbers::pi * u2;
  spare_ = radius * std::sin( angle );
  has_spare_ = true;
  return radius * std::cos( angle );
}

float silu( float v ) { return v / ( 1.0f + std::exp( -v ) ); }

Vector silu( std::span<const float> v )
{
  Vector out( v.size() );
  std::transform( v.begin(), v.end(), out.begin(), []( float a ) { return silu( a ); } );
  return out;
}

Vector dense_vmm( std::span<const float> x, const Matrix& w )
{
  if ( x.size() != w.rows() ) {
    throw std::invalid_argument( "dense_vmm: x has " + std::to_string( x.size() ) + " elements, W has "
                                 + std::to_string( w.rows() ) + " rows" );
  }
  const std::size_t n = w.cols();
  Vector y( n, 0.0f );
  for ( std::size_t k = 0; k < x.size(); ++k ) {
    const float xk = x[k];
    const float* wk = w.row( k ).data();
    for ( std::size_t j = 0; j < n; ++j ) {
      y[j] += xk * wk[j];
    }
  }
  return y;
}

Vector dense_matvec( const Matrix& w, std::span<const float> x )
{
  if ( x.size() != w.cols() ) {
    throw std::invalid_argument( "dense_matvec: x has " + std::to_string( x.size() ) + " elements, W has "
                                 + std::to_string( w.cols() ) + " columns" );
  }
  Vector y( w.rows() );
  for ( std::size_t n = 0; n < w.rows(); ++n ) {
    y[n] = dot( w.row( n ), x );
  }
  return y;
}

float dot( std::span<const float> a, std::span<const float> b )
{
  constexpr std::size_t lanes = 16;
  if ( a.size() != b.size() ) {
    throw std::invalid_argument( "dot: length mismatch" );
  }
  const std::size_t n = a.size();
  const float* pa = a.data();
  const float* pb = b.data();

  float acc[lanes] = {};
  std::size_t i = 0;
  for ( ; i + lanes <= n; i += lanes ) {
    for ( std::size_t l = 0; l < lanes; ++l ) {
      acc[l] += pa[i + l] * pb[i + l];
    }
  }
  for ( std::size_t width = lanes / 2; width > 0; width /= 2 ) {
    for ( std::size_t l = 0; l < width; ++l ) {
      acc[l] += acc[l + width];
    }
  }
  float sum = acc[0];
  for ( ; i < n; ++i ) {
    sum += pa[i] * pb[i];
  }
  return sum;
}

Vector rms_norm( std::span<const float> x, std::span<const float> gain, float eps )
{
  if ( x.size() != gain.size() || x.empty() ) {
    throw std::invalid_argument( "rms_norm: length mismatch" );
  }
  float ss = 0.0f;
  for ( float v : x ) {
    ss += v * v;
  }
  const float scale = 1.0f / std::sqrt( ss / static_cast<float>( x.size() ) + eps );
  Vector out( x.size() );
  for ( std::size_t i = 0; i < x.size(); ++i ) {
    out[i] = x[i] * scale * gain[i];
  }
  return out;
}

std::size_t prune_count( double k, std::size_t n )
{
  if ( !( k >= 0.0 && k <= 1.0 ) ) {
    throw std::invalid_argument( "sparsity level must lie in [0, 1]" );
  }
  // The small slack keeps k*n that lands a rounding error above an integer
  // (e.g. 0.7*10) from rounding up.
  const double scaled = k * static_cast<double>( n );
  const auto count = static_cast<std::size_t>( std::ceil( scaled - 1e-9 * std::max( 1.0, scaled ) ) );
  return std::min( count, n );
}

float empirical_quantile( std::span<const float> samples, double k )
{
  if ( samples.empty() ) {
    throw std::invalid_argument( "empirical_quantile: no samples" );
  }
  const std::size_t n = samples.size();
  const std::size_t count = prune_count( k, n );
  const std::size_t index = count == 0 ? 0 : count - 1;

  std::vector<float> sorted( samples.begin(), samples.end() );
  std::nth_element( sorted.begin(), sorted.begin() + static_cast<std::ptrdiff_t>( index ), sorted.end() );
  return sorted[index];
}

bool all_finite( std::span<const float> v )
{
  return std::all_of( v.begin(), v.end(), []( float a ) { return std::isfinite( a ); } );
}

} // namespace sparse_engine
