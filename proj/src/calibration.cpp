#include "sparse_engine/calibration.hpp"

#include <cmath>
#include <stdexcept>

#include "sparse_engine/sparsify.hpp"

namespace sparse_engine {

std::string_view to_string( Site site )
{
  switch ( site ) {
    case Site::ffn_gate: return "ffn_gate";
    case Site::ffn_up: return "ffn_up";
    case Site::attn_query_input: return "attn_query_input";
    case Site::attn_output_input: return "attn_output_input";
  }
  return "unknown";
}

Site site_from_index( std::uint8_t raw )
{
  if ( raw > static_cast<std::uint8_t>( Site::attn_output_input ) ) {
    throw std::invalid_argument( "unknown activation site " + std::to_string( raw ) );
  }
  return static_cast<Site>( raw );
}

std::string_view to_string( Mode mode )
{
  switch ( mode ) {
    case Mode::dense: return "dense";
    case Mode::cats: return "cats";
    case Mode::cwt: return "cwt";
    case Mode::cwt_full_attn: return "cwt-full-attn";
    case Mode::cwt_selective_attn: return "cwt-selective-attn";
  }
  return "unknown";
}

Mode mode_from_string( std::string_view name )
{
  for ( Mode m : { Mode::dense, Mode::cats, Mode::cwt, Mode::cwt_full_attn, Mode::cwt_selective_attn } ) {
    if ( to_string( m ) == name ) {
      return m;
    }
  }
  throw std::invalid_argument( "unknown mode '" + std::string( name ) + "'" );
}

bool sparsifies_ffn( Mode mode ) { return mode != Mode::dense; }

bool sparsifies_attention( Mode mode ) { return mode == Mode::cwt_full_attn || mode == Mode::cwt_selective_attn; }

ActivationTrace ActivationTrace::slice( std::size_t begin, std::size_t end ) const
{
  if ( begin >= end || end > n_samples() ) {
    throw std::out_of_range( "ActivationTrace::slice: bad row range" );
  }
  const auto data = rows.data();
  std::vector<float> sub( data.begin() + static_cast<std::ptrdiff_t>( begin * dim() ),
                          data.begin() + static_cast<std::ptrdiff_t>( end * dim() ) );
  return { layer_index, site, Matrix( end - begin, dim(), std::move( sub ) ) };
}

ChannelStats channel_stats( const ActivationTrace& up_trace )
{
  if ( up_trace.site != Site::ffn_up ) {
    throw std::invalid_argument( "channel_stats needs an ffn_up trace, got " + std::string( to_string( up_trace.site ) ) );
  }
  std::vector<double> sums( up_trace.dim(), 0.0 );
  for ( std::size_t j = 0; j < up_trace.n_samples(); ++j ) {
    const auto row = up_trace.rows.row( j );
    for ( std::size_t i = 0; i < row.size(); ++i ) {
      sums[i] += std::fabs( row[i] );
    }
  }
  ChannelStats stats;
  stats.mean_abs_up.resize( sums.size() );
  const double n = static_cast<double>( up_trace.n_samples() );
  for ( std::size_t i = 0; i < sums.size(); ++i ) {
    stats.mean_abs_up[i] = static_cast<float>( sums[i] / n );
  }
  return stats;
}

std::vector<float> estimated_scores( const ActivationTrace& gate_trace, const ChannelStats& stats )
{
  if ( gate_trace.dim() != stats.dim() ) {
    throw std::invalid_argument( "estimated_scores: gate trace has " + std::to_string( gate_trace.dim() )
                                 + " channels, stats have " + std::to_string( stats.dim() ) );
  }
  std::vector<float> scores;
  scores.reserve( gate_trace.rows.size() );
  for ( std::size_t j = 0; j < gate_trace.n_samples(); ++j ) {
    const auto row = gate_trace.rows.row( j );
    for ( std::size_t i = 0; i < row.size(); ++i ) {
      scores.push_back( stats.mean_abs_up[i] * std::fabs( row[i] ) );
    }
  }
  return scores;
}

FfnThresholds channel_thresholds( std::span<const float> scores, const ChannelStats& stats, double k )
{
  if ( scores.empty() ) {
    throw std::invalid_argument( "channel_thresholds: no scores" );
  }
  const float cutoff = empirical_quantile( scores, k );
  FfnThresholds out;
  out.t.assign( stats.dim(), 0.0f );
  out.always_prune.assign( stats.dim(), 0 );
  for ( std::size_t i = 0; i < stats.dim(); ++i ) {
    const float mu = stats.mean_abs_up[i];
    if ( mu > 0.0f ) {
      out.t[i] = cutoff / mu;
    } else {
      out.always_prune[i] = 1;
    }
  }
  return out;
}

FfnThresholds uniform_thresholds( float t, std::size_t dim )
{
  return { std::vector<float>( dim, t ), std::vector<std::uint8_t>( dim, 0 ) };
}

float tensor_threshold( const ActivationTrace& input_trace, double k )
{
  const auto data = input_trace.rows.data();
  std::vector<float> magnitudes( data.size() );
  for ( std::size_t i = 0; i < data.size(); ++i ) {
    magnitudes[i] = std::fabs( data[i] );
  }
  return empirical_quantile( magnitudes, k );
}

ThresholdSet ThresholdSet::zeros( std::size_t n_layers, std::size_t d_ff, Mode mode, double k )
{
  ThresholdSet set;
  set.k = k;
  set.mode = mode;
  set.ffn.assign( n_layers, uniform_thresholds( 0.0f, d_ff ) );
  set.attn.assign( n_layers, AttnThresholds {} );
  return set;
}

double realized_sparsity( const ActivationTrace& gate_trace, const FfnThresholds& t )
{
  std::size_t pruned = 0;
  for ( std::size_t j = 0; j < gate_trace.n_samples(); ++j ) {
    const auto m = cwt_apply( gate_trace.rows.row( j ), t.t, t.always_prune );
    pruned += m.values.size() - m.nnz;
  }
  return static_cast<double>( pruned ) / static_cast<double>( gate_trace.rows.size() );
}

double realized_sparsity( const ActivationTrace& trace, float tensor_threshold )
{
  std::size_t pruned = 0;
  for ( float v : trace.rows.data() ) {
    if ( std::fabs( v ) <= tensor_threshold ) {
      ++pruned;
    }
  }
  return static_cast<double>( pruned ) / static_cast<double>( trace.rows.size() );
}

} // namespace sparse_engine
