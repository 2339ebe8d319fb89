#include "sparse_engine/oracle.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>
#include <string>

namespace sparse_engine::oracle {

PruneSet smallest_scores( std::span<const double> scores, std::size_t count )
{
  if ( count > scores.size() ) {
    throw std::invalid_argument( "smallest_scores: budget exceeds dimension" );
  }
  std::vector<std::size_t> order( scores.size() );
  std::iota( order.begin(), order.end(), std::size_t { 0 } );
  std::stable_sort( order.begin(), order.end(), [&]( std::size_t a, std::size_t b ) { return scores[a] < scores[b]; } );
  order.resize( count );
  std::sort( order.begin(), order.end() );
  return PruneSet( std::move( order ), scores.size() );
}

PruneSet optimal_ffn_pruneset_budget( std::span<const float> a_up, std::span<const float> a_gate, std::size_t budget )
{
  if ( a_up.size() != a_gate.size() ) {
    throw std::invalid_argument( "optimal_ffn_pruneset: length mismatch" );
  }
  std::vector<double> scores( a_up.size() );
  for ( std::size_t i = 0; i < scores.size(); ++i ) {
    scores[i] = std::fabs( static_cast<double>( a_up[i] ) * static_cast<double>( a_gate[i] ) );
  }
  return smallest_scores( scores, budget );
}

PruneSet optimal_ffn_pruneset( std::span<const float> a_up, std::span<const float> a_gate, double k )
{
  return optimal_ffn_pruneset_budget( a_up, a_gate, prune_count( k, a_up.size() ) );
}

namespace {

// W W^T for a K x N weight.
std::vector<double> gram( const Matrix& w )
{
  const std::size_t K = w.rows();
  std::vector<double> g( K * K, 0.0 );
  for ( std::size_t i = 0; i < K; ++i ) {
    for ( std::size_t j = 0; j <= i; ++j ) {
      double s = 0.0;
      for ( std::size_t n = 0; n < w.cols(); ++n ) {
        s += static_cast<double>( w( i, n ) ) * static_cast<double>( w( j, n ) );
      }
      g[i * K + j] = s;
      g[j * K + i] = s;
    }
  }
  return g;
}

PruneSet exhaustive_attn( std::span<const float> x, const Matrix& w, std::size_t m )
{
  const std::size_t d = x.size();
  if ( d > max_exhaustive_dim ) {
    throw std::invalid_argument( "exhaustive prune-set search supports d <= " + std::to_string( max_exhaustive_dim )
                                 + ", got " + std::to_string( d ) );
  }
  if ( m == 0 ) {
    return PruneSet( {}, d );
  }
  const std::vector<double> g = gram( w );
  std::vector<std::size_t> pick( m );
  std::iota( pick.begin(), pick.end(), std::size_t { 0 } );
  std::vector<std::size_t> best = pick;
  double best_err = INFINITY;
  while ( true ) {
    double err = 0.0;
    for ( std::size_t a : pick ) {
      for ( std::size_t b : pick ) {
        err += static_cast<double>( x[a] ) * static_cast<double>( x[b] ) * g[a * d + b];
      }
    }
    if ( err < best_err ) {
      best_err = err;
      best = pick;
    }
    // Next combination in lexicographic order.
    std::size_t i = m;
    while ( i > 0 && pick[i - 1] == d - m + ( i - 1 ) ) {
      --i;
    }
    if ( i == 0 ) {
      break;
    }
    ++pick[i - 1];
    for ( std::size_t j = i; j < m; ++j ) {
      pick[j] = pick[j - 1] + 1;
    }
  }
  return PruneSet( std::move( best ), d );
}

} // namespace

PruneSet optimal_attn_pruneset( std::span<const float> x, const Matrix& w, double k, AttnCriterion criterion )
{
  if ( x.size() != w.rows() ) {
    throw std::invalid_argument( "optimal_attn_pruneset: x length != weight rows" );
  }
  const std::size_t m = prune_count( k, x.size() );
  std::vector<double> scores( x.size() );
  switch ( criterion ) {
    case AttnCriterion::exact: return exhaustive_attn( x, w, m );
    case AttnCriterion::diag: {
      const auto norms = row_norms_sq( w );
      for ( std::size_t i = 0; i < x.size(); ++i ) {
        scores[i] = norms[i] * static_cast<double>( x[i] ) * static_cast<double>( x[i] );
      }
      break;
    }
    case AttnCriterion::abs:
      for ( std::size_t i = 0; i < x.size(); ++i ) {
        scores[i] = std::fabs( static_cast<double>( x[i] ) );
      }
      break;
  }
  return smallest_scores( scores, m );
}

double attn_quadratic_form( std::span<const float> x, const PruneSet& pruned, const Matrix& w )
{
  if ( x.size() != w.rows() ) {
    throw std::invalid_argument( "attn_quadratic_form: x length != weight rows" );
  }
  const std::size_t K = w.rows();
  std::vector<double> delta( K, 0.0 );
  for ( std::size_t i : pruned.indices() ) {
    if ( i >= K ) {
      throw std::out_of_range( "attn_quadratic_form: prune index out of range" );
    }
    delta[i] = -static_cast<double>( x[i] );
  }
  const std::vector<double> g = gram( w );
  double q = 0.0;
  for ( std::size_t i = 0; i < K; ++i ) {
    for ( std::size_t j = 0; j < K; ++j ) {
      q += delta[i] * g[i * K + j] * delta[j];
    }
  }
  return q;
}

Vector reference_matvec( const Matrix& w, std::span<const float> x )
{
  if ( x.size() != w.cols() ) {
    throw std::invalid_argument( "reference_matvec: dimension mismatch" );
  }
  Vector out( w.rows() );
  for ( std::size_t n = 0; n < w.rows(); ++n ) {
    double s = 0.0;
    for ( std::size_t k = 0; k < w.cols(); ++k ) {
      s += static_cast<double>( w( n, k ) ) * static_cast<double>( x[k] );
    }
    out[n] = static_cast<float>( s );
  }
  return out;
}

Vector reference_rms_norm( std::span<const float> x, std::span<const float> gain, double eps )
{
  double ss = 0.0;
  for ( float v : x ) {
    ss += static_cast<double>( v ) * static_cast<double>( v );
  }
  const double inv = 1.0 / std::sqrt( ss / static_cast<double>( x.size() ) + eps );
  Vector out( x.size() );
  for ( std::size_t i = 0; i < x.size(); ++i ) {
    out[i] = static_cast<float>( static_cast<double>( x[i] ) * inv * static_cast<double>( gain[i] ) );
  }
  return out;
}

namespace {

Vector threshold_abs( std::span<const float> x, float t )
{
  Vector out( x.begin(), x.end() );
  for ( float& v : out ) {
    if ( std::fabs( v ) <= t ) {
      v = 0.0f;
    }
  }
  return out;
}

} // namespace

Vector reference_ffn( const LayerWeights& w, std::span<const float> x, Mode mode, const FfnThresholds* thresholds )
{
  Vector gate = reference_matvec( w.w_gate, x );
  for ( float& g : gate ) {
    g = static_cast<float>( static_cast<double>( g ) / ( 1.0 + std::exp( -static_cast<double>( g ) ) ) );
  }
  if ( sparsifies_ffn( mode ) ) {
    if ( thresholds == nullptr ) {
      throw std::invalid_argument( "reference_ffn: mode needs thresholds" );
    }
    for ( std::size_t i = 0; i < gate.size(); ++i ) {
      const float t = mode == Mode::cats ? thresholds->t.front() : thresholds->t[i];
      const bool flagged = mode != Mode::cats && thresholds->always_prune[i] != 0;
      if ( flagged || std::fabs( gate[i] ) <= t ) {
        gate[i] = 0.0f;
      }
    }
  }
  const Vector up = reference_matvec( w.w_up, x );
  Vector h( up.size() );
  for ( std::size_t i = 0; i < h.size(); ++i ) {
    h[i] = up[i] * gate[i];
  }
  return reference_matvec( w.w_down, h );
}

Vector reference_attention( const ModelConfig& config,
                            const LayerWeights& w,
                            const std::vector<Vector>& normalized,
                            Mode mode,
                            const AttnThresholds* thresholds,
                            const std::vector<bool>& thresholded )
{
  if ( normalized.empty() ) {
    throw std::invalid_argument( "reference_attention: no positions" );
  }
  const bool sparse = sparsifies_attention( mode );
  if ( sparse && thresholds == nullptr ) {
    throw std::invalid_argument( "reference_attention: mode needs thresholds" );
  }
  const std::size_t T = normalized.size();
  const std::size_t hd = config.head_dim();
  const std::size_t H = config.n_heads;
  auto applies = [&]( std::size_t p ) { return sparse && ( thresholded.empty() || thresholded[p] ); };

  // Keys and values for every position, kv heads copied out to all query heads.
  std::vector<std::vector<Vector>> keys( H, std::vector<Vector>( T ) );
  std::vector<std::vector<Vector>> values( H, std::vector<Vector>( T ) );
  for ( std::size_t p = 0; p < T; ++p ) {
    const Vector kv_in = applies( p ) && mode == Mode::cwt_full_attn ? threshold_abs( normalized[p], thresholds->input )
                                                                     : normalized[p];
    const Vector k = reference_matvec( w.wk, kv_in );
    const Vector v = reference_matvec( w.wv, kv_in );
    for ( std::size_t h = 0; h < H; ++h ) {
      const std::size_t g = h / config.group_size();
      keys[h][p].assign( k.begin() + static_cast<std::ptrdiff_t>( g * hd ),
                         k.begin() + static_cast<std::ptrdiff_t>( ( g + 1 ) * hd ) );
      values[h][p].assign( v.begin() + static_cast<std::ptrdiff_t>( g * hd ),
                           v.begin() + static_cast<std::ptrdiff_t>( ( g + 1 ) * hd ) );
    }
  }

  const std::size_t last = T - 1;
  const Vector q_in = applies( last ) ? threshold_abs( normalized[last], thresholds->input ) : normalized[last];
  const Vector q = reference_matvec( w.wq, q_in );
  Vector out( config.d_model, 0.0f );
  const double scale = 1.0 / std::sqrt( static_cast<double>( hd ) );
  for ( std::size_t h = 0; h < H; ++h ) {
    std::vector<double> s( T );
    for ( std::size_t p = 0; p < T; ++p ) {
      double dot = 0.0;
      for ( std::size_t i = 0; i < hd; ++i ) {
        dot += static_cast<double>( q[h * hd + i] ) * static_cast<double>( keys[h][p][i] );
      }
      s[p] = dot * scale;
    }
    const double mx = *std::max_element( s.begin(), s.end() );
    double z = 0.0;
    for ( double& e : s ) {
      e = std::exp( e - mx );
      z += e;
    }
    for ( std::size_t i = 0; i < hd; ++i ) {
      double acc = 0.0;
      for ( std::size_t p = 0; p < T; ++p ) {
        acc += s[p] / z * static_cast<double>( values[h][p][i] );
      }
      out[h * hd + i] = static_cast<float>( acc );
    }
  }
  const Vector o_in = applies( last ) ? threshold_abs( out, thresholds->output ) : out;
  return reference_matvec( w.wo, o_in );
}

std::vector<Vector> reference_block_forward( const ToyModel& model,
                                             std::size_t layer,
                                             const std::vector<Vector>& inputs,
                                             const ReferenceOptions& options )
{
  const auto& w = model.layers.at( layer );
  const AttnThresholds* attn_t = options.thresholds ? &options.thresholds->attn.at( layer ) : nullptr;
  const FfnThresholds* ffn_t = options.thresholds ? &options.thresholds->ffn.at( layer ) : nullptr;

  std::vector<Vector> normalized;
  std::vector<bool> thresholded;
  std::vector<Vector> outputs;
  for ( std::size_t p = 0; p < inputs.size(); ++p ) {
    const bool sparse_here = p >= options.sparse_from;
    const Mode mode = sparse_here ? options.mode : Mode::dense;
    normalized.push_back( reference_rms_norm( inputs[p], w.attn_norm ) );
    thresholded.push_back( sparse_here );
    const Vector a = reference_attention( model.config, w, normalized, mode, attn_t, thresholded );
    Vector x = inputs[p];
    for ( std::size_t i = 0; i < x.size(); ++i ) {
      x[i] += a[i];
    }
    const Vector f = reference_ffn( w, reference_rms_norm( x, w.ffn_norm ), mode, ffn_t );
    for ( std::size_t i = 0; i < x.size(); ++i ) {
      x[i] += f[i];
    }
    outputs.push_back( std::move( x ) );
  }
  return outputs;
}

ReferenceOutput reference_forward( const ToyModel& model,
                                   std::span<const std::uint32_t> tokens,
                                   const ReferenceOptions& options )
{
  std::vector<Vector> x;
  for ( auto t : tokens ) {
    if ( t >= model.config.vocab_size ) {
      throw std::out_of_range( "reference_forward: token id out of range" );
    }
    const auto row = model.embedding.row( t );
    x.emplace_back( row.begin(), row.end() );
  }
  for ( std::size_t l = 0; l < model.layers.size(); ++l ) {
    x = reference_block_forward( model, l, x, options );
  }
  ReferenceOutput out;
  for ( auto& h : x ) {
    out.logits.push_back( reference_matvec( model.head, reference_rms_norm( h, model.final_norm ) ) );
  }
  out.hidden = std::move( x );
  return out;
}

} // namespace sparse_engine::oracle
