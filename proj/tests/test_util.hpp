#pragma once

#include <algorithm>
#include <cmath>
#include <span>

#include "sparse_engine/model.hpp"
#include "sparse_engine/tensor.hpp"

namespace sparse_engine::testing {

// max |a - b| / max |b|; 0 when both are all zero.
inline double max_rel_error( std::span<const float> a, std::span<const float> b )
{
  double diff = 0.0;
  double scale = 0.0;
  for ( std::size_t i = 0; i < a.size(); ++i ) {
    diff = std::max( diff, std::fabs( static_cast<double>( a[i] ) - static_cast<double>( b[i] ) ) );
    scale = std::max( scale, std::fabs( static_cast<double>( b[i] ) ) );
  }
  if ( scale == 0.0 ) {
    return diff;
  }
  return diff / scale;
}

inline double rel_diff( double a, double b )
{
  const double scale = std::max( std::fabs( a ), std::fabs( b ) );
  return scale == 0.0 ? 0.0 : std::fabs( a - b ) / scale;
}

inline Vector normal_vector( std::size_t n, Rng& rng, double scale = 1.0 )
{
  Vector v( n );
  for ( float& x : v ) {
    x = static_cast<float>( rng.normal() * scale );
  }
  return v;
}

inline Matrix normal_matrix( std::size_t rows, std::size_t cols, Rng& rng, double scale = 1.0 )
{
  Matrix m( rows, cols );
  for ( float& x : m.data() ) {
    x = static_cast<float>( rng.normal() * scale );
  }
  return m;
}

// rows x cols (rows <= cols) with orthonormal rows, by Gram-Schmidt in double.
inline Matrix orthonormal_rows( std::size_t rows, std::size_t cols, Rng& rng )
{
  std::vector<std::vector<double>> basis;
  while ( basis.size() < rows ) {
    std::vector<double> v( cols );
    for ( double& x : v ) {
      x = rng.normal();
    }
    for ( int pass = 0; pass < 2; ++pass ) {
      for ( const auto& b : basis ) {
        double d = 0.0;
        for ( std::size_t i = 0; i < cols; ++i ) {
          d += v[i] * b[i];
        }
        for ( std::size_t i = 0; i < cols; ++i ) {
          v[i] -= d * b[i];
        }
      }
    }
    double n = 0.0;
    for ( double x : v ) {
      n += x * x;
    }
    n = std::sqrt( n );
    for ( double& x : v ) {
      x /= n;
    }
    basis.push_back( std::move( v ) );
  }
  Matrix m( rows, cols );
  for ( std::size_t r = 0; r < rows; ++r ) {
    for ( std::size_t c = 0; c < cols; ++c ) {
      m( r, c ) = static_cast<float>( basis[r][c] );
    }
  }
  return m;
}

inline ModelConfig tiny_config( std::uint32_t n_kv_heads = 2, std::uint64_t seed = 7 )
{
  ModelConfig c;
  c.n_layers = 2;
  c.d_model = 32;
  c.d_ff = 64;
  c.n_heads = 4;
  c.n_kv_heads = n_kv_heads;
  c.vocab_size = 50;
  c.max_seq_len = 48;
  c.seed = seed;
  return c;
}

} // namespace sparse_engine::testing
