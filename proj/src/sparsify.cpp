#include "sparse_engine/sparsify.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>

namespace sparse_engine {

PruneSet::PruneSet( std::vector<std::size_t> indices, std::size_t dim )
  : indices_( std::move( indices ) )
{
  for ( std::size_t i = 0; i < indices_.size(); ++i ) {
    if ( indices_[i] >= dim ) {
      throw std::out_of_range( "PruneSet index " + std::to_string( indices_[i] ) + " >= "
                               + std::to_string( dim ) );
    }
    if ( i > 0 && indices_[i] <= indices_[i - 1] ) {
      throw std::invalid_argument( "PruneSet indices must be strictly increasing" );
    }
  }
}

PruneSet PruneSet::from_zeros( std::span<const float> values )
{
  std::vector<std::size_t> idx;
  for ( std::size_t i = 0; i < values.size(); ++i ) {
    if ( values[i] == 0.0f ) {
      idx.push_back( i );
    }
  }
  return PruneSet( std::move( idx ), values.size() );
}

bool PruneSet::contains( std::size_t i ) const
{
  return std::binary_search( indices_.begin(), indices_.end(), i );
}

MaskedVector cwt_apply( std::span<const float> a_gate,
                        std::span<const float> thresholds,
                        std::span<const std::uint8_t> always_prune )
{
  if ( a_gate.size() != thresholds.size() ) {
    throw std::invalid_argument( "cwt_apply: activation/threshold length mismatch" );
  }
  if ( !always_prune.empty() && always_prune.size() != a_gate.size() ) {
    throw std::invalid_argument( "cwt_apply: always-prune flag length mismatch" );
  }
  MaskedVector out { Vector( a_gate.size(), 0.0f ), 0 };
  for ( std::size_t i = 0; i < a_gate.size(); ++i ) {
    const bool flagged = !always_prune.empty() && always_prune[i] != 0;
    if ( !flagged && std::fabs( a_gate[i] ) > thresholds[i] ) {
      out.values[i] = a_gate[i];
      ++out.nnz;
    }
  }
  return out;
}

MaskedVector cats_apply( std::span<const float> x, float threshold )
{
  if ( !std::isfinite( threshold ) || threshold < 0.0f ) {
    throw std::invalid_argument( "cats_apply: threshold must be finite and non-negative" );
  }
  MaskedVector out { Vector( x.size(), 0.0f ), 0 };
  for ( std::size_t i = 0; i < x.size(); ++i ) {
    if ( std::fabs( x[i] ) > threshold ) {
      out.values[i] = x[i];
      ++out.nnz;
    }
  }
  return out;
}

namespace {

void check_indices( const PruneSet& pruned, std::size_t dim, const char* what )
{
  if ( !pruned.empty() && pruned.indices().back() >= dim ) {
    throw std::out_of_range( std::string( what ) + ": prune index out of range" );
  }
}

} // namespace

double ffn_objective( std::span<const float> a_up, std::span<const float> a_gate, const PruneSet& pruned )
{
  if ( a_up.size() != a_gate.size() ) {
    throw std::invalid_argument( "ffn_objective: length mismatch" );
  }
  check_indices( pruned, a_up.size(), "ffn_objective" );
  double sum = 0.0;
  for ( std::size_t i : pruned.indices() ) {
    const double v = static_cast<double>( a_up[i] ) * a_gate[i];
    sum += v * v;
  }
  return sum;
}

double ffn_objective_direct( std::span<const float> a_up, std::span<const float> a_gate, const PruneSet& pruned )
{
  if ( a_up.size() != a_gate.size() ) {
    throw std::invalid_argument( "ffn_objective_direct: length mismatch" );
  }
  check_indices( pruned, a_up.size(), "ffn_objective_direct" );
  std::vector<double> gate_hat( a_gate.begin(), a_gate.end() );
  for ( std::size_t i : pruned.indices() ) {
    gate_hat[i] = 0.0;
  }
  double sum = 0.0;
  for ( std::size_t i = 0; i < a_up.size(); ++i ) {
    const double diff = static_cast<double>( a_up[i] ) * a_gate[i] - static_cast<double>( a_up[i] ) * gate_hat[i];
    sum += diff * diff;
  }
  return sum;
}

double attn_objective_exact( std::span<const float> x, const PruneSet& pruned, const Matrix& w )
{
  if ( x.size() != w.rows() ) {
    throw std::invalid_argument( "attn_objective_exact: x length does not match W rows" );
  }
  check_indices( pruned, x.size(), "attn_objective_exact" );

  // Two full products, x W and x_hat W, in double; then the squared distance.
  std::vector<double> full( w.cols(), 0.0 );
  std::vector<double> kept( w.cols(), 0.0 );
  for ( std::size_t k = 0; k < x.size(); ++k ) {
    const bool is_pruned = pruned.contains( k );
    const auto row = w.row( k );
    for ( std::size_t n = 0; n < w.cols(); ++n ) {
      const double term = static_cast<double>( x[k] ) * row[n];
      full[n] += term;
      if ( !is_pruned ) {
        kept[n] += term;
      }
    }
  }
  double sum = 0.0;
  for ( std::size_t n = 0; n < w.cols(); ++n ) {
    const double d = full[n] - kept[n];
    sum += d * d;
  }
  return sum;
}

double attn_objective_diag( std::span<const float> x, const PruneSet& pruned, std::span<const double> row_norms_sq )
{
  if ( x.size() != row_norms_sq.size() ) {
    throw std::invalid_argument( "attn_objective_diag: length mismatch" );
  }
  check_indices( pruned, x.size(), "attn_objective_diag" );
  double sum = 0.0;
  for ( std::size_t i : pruned.indices() ) {
    sum += row_norms_sq[i] * static_cast<double>( x[i] ) * x[i];
  }
  return sum;
}

std::vector<double> row_norms_sq( const Matrix& w )
{
  std::vector<double> out( w.rows(), 0.0 );
  for ( std::size_t r = 0; r < w.rows(); ++r ) {
    for ( float v : w.row( r ) ) {
      out[r] += static_cast<double>( v ) * v;
    }
  }
  return out;
}

} // namespace sparse_engine
