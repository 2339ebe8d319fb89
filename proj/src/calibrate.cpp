#include "sparse_engine/calibrate.hpp"

#include <algorithm>
#include <stdexcept>
#include <string>

#include "sparse_engine/sparsify.hpp"

namespace sparse_engine {

namespace {

constexpr std::array<Site, 4> all_sites { Site::ffn_gate, Site::ffn_up, Site::attn_query_input, Site::attn_output_input };

} // namespace

std::size_t TraceBundle::n_samples() const
{
  return layers.empty() ? 0 : layers.front()[0].n_samples();
}

TraceBundle TraceBundle::slice( std::size_t begin, std::size_t end ) const
{
  TraceBundle out;
  for ( const auto& layer : layers ) {
    out.layers.push_back( { layer[0].slice( begin, end ), layer[1].slice( begin, end ), layer[2].slice( begin, end ),
                            layer[3].slice( begin, end ) } );
  }
  return out;
}

std::vector<ActivationTrace> TraceBundle::flatten() const
{
  std::vector<ActivationTrace> out;
  for ( const auto& layer : layers ) {
    out.insert( out.end(), layer.begin(), layer.end() );
  }
  return out;
}

TraceBundle TraceBundle::from_traces( std::vector<ActivationTrace> traces )
{
  if ( traces.empty() ) {
    throw std::invalid_argument( "trace bundle: no records" );
  }
  std::uint32_t max_layer = 0;
  for ( const auto& t : traces ) {
    max_layer = std::max( max_layer, t.layer_index );
  }
  const std::size_t n_layers = std::size_t { max_layer } + 1;
  std::vector<std::array<bool, 4>> seen( n_layers, { false, false, false, false } );
  TraceBundle out;
  out.layers.resize( n_layers );
  const std::size_t n = traces.front().n_samples();
  for ( auto& t : traces ) {
    const auto s = static_cast<std::size_t>( t.site );
    if ( seen[t.layer_index][s] ) {
      throw std::invalid_argument( "trace bundle: duplicate record for layer " + std::to_string( t.layer_index ) + " site "
                                   + std::string( to_string( t.site ) ) );
    }
    if ( t.n_samples() != n ) {
      throw std::invalid_argument( "trace bundle: records disagree on sample count" );
    }
    seen[t.layer_index][s] = true;
    out.layers[t.layer_index][s] = std::move( t );
  }
  for ( std::size_t l = 0; l < n_layers; ++l ) {
    for ( Site site : all_sites ) {
      if ( !seen[l][static_cast<std::size_t>( site )] ) {
        throw std::invalid_argument( "trace bundle: missing layer " + std::to_string( l ) + " site "
                                     + std::string( to_string( site ) ) );
      }
    }
  }
  return out;
}

std::vector<std::vector<std::uint32_t>> synthetic_sequences( std::uint32_t vocab_size,
                                                             std::size_t n_tokens,
                                                             std::size_t seq_len,
                                                             Rng& rng )
{
  if ( vocab_size == 0 || seq_len == 0 ) {
    throw std::invalid_argument( "synthetic_sequences: vocab and sequence length must be positive" );
  }
  std::vector<std::vector<std::uint32_t>> out;
  for ( std::size_t done = 0; done < n_tokens; ) {
    const std::size_t len = std::min( seq_len, n_tokens - done );
    std::vector<std::uint32_t> seq( len );
    for ( auto& t : seq ) {
      t = static_cast<std::uint32_t>( rng.below( vocab_size ) );
    }
    out.push_back( std::move( seq ) );
    done += len;
  }
  return out;
}

TraceBundle collect_traces( const Engine& engine, const std::vector<std::vector<std::uint32_t>>& sequences )
{
  const auto& config = engine.config();
  std::size_t n = 0;
  for ( const auto& s : sequences ) {
    n += s.size();
  }
  if ( n == 0 ) {
    throw std::invalid_argument( "calibration needs at least one token" );
  }

  std::vector<std::array<std::vector<float>, 4>> buffers( config.n_layers );
  const SiteObserver observer = [&]( std::size_t layer, Site site, std::span<const float> values ) {
    auto& buf = buffers[layer][static_cast<std::size_t>( site )];
    buf.insert( buf.end(), values.begin(), values.end() );
  };
  StepContext ctx;
  ctx.observer = &observer;
  for ( const auto& seq : sequences ) {
    KvCache cache( config );
    for ( auto token : seq ) {
      engine.step( token, cache, ctx );
    }
  }

  TraceBundle out;
  out.layers.resize( config.n_layers );
  for ( std::uint32_t l = 0; l < config.n_layers; ++l ) {
    for ( Site site : all_sites ) {
      auto& buf = buffers[l][static_cast<std::size_t>( site )];
      const std::size_t dim = buf.size() / n;
      out.layers[l][static_cast<std::size_t>( site )] = { l, site, Matrix( n, dim, std::move( buf ) ) };
    }
  }
  return out;
}

ThresholdSet thresholds_from_traces( const TraceBundle& traces, double k, Mode mode )
{
  if ( traces.n_layers() == 0 ) {
    throw std::invalid_argument( "calibration: no traces" );
  }
  if ( !( k >= 0.0 && k <= 1.0 ) ) {
    throw std::invalid_argument( "calibration: sparsity level must lie in [0, 1]" );
  }
  const std::size_t d_ff = traces.at( 0, Site::ffn_gate ).dim();
  ThresholdSet set = ThresholdSet::zeros( traces.n_layers(), d_ff, mode, k );
  if ( mode == Mode::dense ) {
    return set;
  }
  for ( std::size_t l = 0; l < traces.n_layers(); ++l ) {
    const auto& gate = traces.at( l, Site::ffn_gate );
    if ( mode == Mode::cats ) {
      set.ffn[l] = uniform_thresholds( tensor_threshold( gate, k ), gate.dim() );
    } else {
      const ChannelStats stats = channel_stats( traces.at( l, Site::ffn_up ) );
      set.ffn[l] = channel_thresholds( estimated_scores( gate, stats ), stats, k );
    }
    if ( sparsifies_attention( mode ) ) {
      set.attn[l].input = tensor_threshold( traces.at( l, Site::attn_query_input ), k );
      set.attn[l].output = tensor_threshold( traces.at( l, Site::attn_output_input ), k );
    }
  }
  return set;
}

ThresholdSet calibrate( const Engine& engine,
                        const std::vector<std::vector<std::uint32_t>>& sequences,
                        double k,
                        Mode mode )
{
  if ( !( k >= 0.0 && k <= 1.0 ) ) {
    throw std::invalid_argument( "calibration: sparsity level must lie in [0, 1]" );
  }
  if ( mode == Mode::dense ) {
    return ThresholdSet::zeros( engine.config().n_layers, engine.config().d_ff, mode, k );
  }
  return thresholds_from_traces( collect_traces( engine, sequences ), k, mode );
}

SiteActivity activity_from_traces( const ModelConfig& config,
                                   const TraceBundle& traces,
                                   const ThresholdSet& thresholds,
                                   Mode mode )
{
  check_thresholds( config, mode, mode == Mode::dense ? nullptr : &thresholds );
  if ( traces.n_layers() != config.n_layers ) {
    throw std::invalid_argument( "activity_from_traces: trace layer count does not match model" );
  }
  const std::size_t n = traces.n_samples();
  const std::uint64_t d = config.d_model;
  const std::uint64_t ff = config.d_ff;
  SiteActivity activity( config.n_layers );
  activity.steps = n;

  auto nnz = []( const MaskedVector& m ) { return static_cast<std::uint64_t>( m.nnz ); };
  auto add = [&]( std::size_t l, Projection p, std::uint64_t used, std::uint64_t total ) {
    auto& use = activity.at( l, p );
    use.used += used;
    use.total += total;
  };

  for ( std::size_t l = 0; l < config.n_layers; ++l ) {
    const auto& gate = traces.at( l, Site::ffn_gate );
    const auto& up = traces.at( l, Site::ffn_up );
    const auto& xin = traces.at( l, Site::attn_query_input );
    const auto& xout = traces.at( l, Site::attn_output_input );
    for ( std::size_t j = 0; j < n; ++j ) {
      add( l, Projection::gate, d, d );
      if ( sparsifies_ffn( mode ) ) {
        const auto& t = thresholds.ffn[l];
        const MaskedVector m = mode == Mode::cats ? cats_apply( gate.rows.row( j ), t.t.front() )
                                                  : cwt_apply( gate.rows.row( j ), t.t, t.always_prune );
        const auto a_up = up.rows.row( j );
        std::uint64_t h_nnz = 0;
        for ( std::size_t i = 0; i < m.values.size(); ++i ) {
          h_nnz += ( a_up[i] * m.values[i] ) != 0.0f ? 1 : 0;
        }
        add( l, Projection::up, nnz( m ), ff );
        add( l, Projection::down, h_nnz, ff );
      } else {
        add( l, Projection::up, ff, ff );
        add( l, Projection::down, ff, ff );
      }

      if ( sparsifies_attention( mode ) ) {
        const auto& t = thresholds.attn[l];
        const std::uint64_t in_used = nnz( cats_apply( xin.rows.row( j ), t.input ) );
        const std::uint64_t kv_used = mode == Mode::cwt_full_attn ? in_used : d;
        add( l, Projection::q, in_used, d );
        add( l, Projection::k, kv_used, d );
        add( l, Projection::v, kv_used, d );
        add( l, Projection::o, nnz( cats_apply( xout.rows.row( j ), t.output ) ), d );
      } else {
        for ( Projection p : { Projection::q, Projection::k, Projection::v, Projection::o } ) {
          add( l, p, d, d );
        }
      }
    }
  }
  return activity;
}

} // namespace sparse_engine
