#include "sparse_engine/engine.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstring>
#include <numeric>
#include <stdexcept>

#include "sparse_engine/errors.hpp"
#include "sparse_engine/sparsify.hpp"

namespace sparse_engine {

double SiteActivity::sparsity( Projection p ) const
{
  std::uint64_t used = 0;
  std::uint64_t total = 0;
  for ( const auto& layer : layers ) {
    used += layer[static_cast<std::size_t>( p )].used;
    total += layer[static_cast<std::size_t>( p )].total;
  }
  return total == 0 ? 0.0 : 1.0 - static_cast<double>( used ) / static_cast<double>( total );
}

std::size_t weights_per_unit( const ModelConfig& c, Projection p )
{
  switch ( p ) {
    case Projection::q: return c.d_model;
    case Projection::k: return c.kv_dim();
    case Projection::v: return c.kv_dim();
    case Projection::o: return c.d_model;
    case Projection::gate: return c.d_ff;
    case Projection::up: return c.d_model;
    case Projection::down: return c.d_model;
  }
  return 0;
}

std::size_t parameter_count( const ModelConfig& c )
{
  const std::size_t d = c.d_model;
  const std::size_t per_layer = 2 * d + 2 * d * d + 2 * c.kv_dim() * d + 3 * static_cast<std::size_t>( c.d_ff ) * d;
  return 2 * static_cast<std::size_t>( c.vocab_size ) * d + d + c.n_layers * per_layer;
}

double activated_params( const ModelConfig& config, const SiteActivity& activity )
{
  if ( activity.steps == 0 ) {
    return 1.0;
  }
  double skipped = 0.0;
  for ( const auto& layer : activity.layers ) {
    for ( std::size_t p = 0; p < projection_count; ++p ) {
      const auto& use = layer[p];
      skipped += static_cast<double>( use.total - use.used )
                 * static_cast<double>( weights_per_unit( config, static_cast<Projection>( p ) ) );
    }
  }
  const double total = static_cast<double>( parameter_count( config ) ) * static_cast<double>( activity.steps );
  return 1.0 - skipped / total;
}

void check_thresholds( const ModelConfig& config, Mode mode, const ThresholdSet* thresholds )
{
  if ( mode == Mode::dense ) {
    return;
  }
  if ( thresholds == nullptr ) {
    throw MismatchError( "mode " + std::string( to_string( mode ) ) + " needs calibrated thresholds" );
  }
  const auto& t = *thresholds;
  if ( t.ffn.size() != config.n_layers || t.attn.size() != config.n_layers ) {
    throw MismatchError( "thresholds cover " + std::to_string( t.ffn.size() ) + " layers, model has "
                         + std::to_string( config.n_layers ) );
  }
  for ( const auto& layer : t.ffn ) {
    if ( layer.dim() != config.d_ff || layer.always_prune.size() != config.d_ff ) {
      throw MismatchError( "threshold width " + std::to_string( layer.dim() ) + " != d_ff "
                           + std::to_string( config.d_ff ) );
    }
  }
  const bool compatible = ( mode == Mode::cats ) ? t.mode == Mode::cats
                          : sparsifies_attention( mode )
                            ? t.mode == mode
                            : ( t.mode == Mode::cwt || sparsifies_attention( t.mode ) );
  if ( !compatible ) {
    throw MismatchError( "thresholds calibrated for mode " + std::string( to_string( t.mode ) )
                         + " cannot drive mode " + std::string( to_string( mode ) ) );
  }
}

std::size_t argmax( std::span<const float> v )
{
  return static_cast<std::size_t>( std::max_element( v.begin(), v.end() ) - v.begin() );
}

Engine::Engine( const ToyModel& model, kernels::KernelConfig cfg, ExecutionPath path )
  : config_( model.config )
  , cfg_( cfg )
  , path_( path )
  , embedding_( model.embedding )
  , final_norm_( model.final_norm )
  , head_( kernels::pre_transpose( model.head ) )
{
  model.validate();
  cfg_.validate();
  layers_.reserve( model.layers.size() );
  for ( const auto& l : model.layers ) {
    layers_.push_back( {
      l.attn_norm,
      kernels::pre_transpose( l.wq ),
      kernels::pre_transpose( l.wk ),
      kernels::pre_transpose( l.wv ),
      kernels::pre_transpose( l.wo ),
      l.ffn_norm,
      kernels::pre_transpose( l.w_gate ),
      l.w_up,
      kernels::pre_transpose( l.w_down ),
    } );
  }
}

Vector Engine::project( std::span<const float> x,
                        const kernels::TransposedWeight& w,
                        bool sparse,
                        kernels::KernelCounters* counters ) const
{
  if ( path_ == ExecutionPath::masked_dense ) {
    return dense_vmm( x, w.kxn() );
  }
  return sparse ? kernels::spvmm( x, w, cfg_, counters ) : kernels::dense( x, w, cfg_, counters );
}

namespace {

std::uint64_t count_nonzero( std::span<const float> v )
{
  return static_cast<std::uint64_t>( std::count_if( v.begin(), v.end(), []( float a ) { return a != 0.0f; } ) );
}

void record( const StepContext& ctx, std::size_t layer, Projection p, std::uint64_t used, std::uint64_t total )
{
  if ( ctx.activity ) {
    auto& use = ctx.activity->at( layer, p );
    use.used += used;
    use.total += total;
  }
}

void observe( const StepContext& ctx, std::size_t layer, Site site, std::span<const float> values )
{
  if ( ctx.observer && *ctx.observer ) {
    ( *ctx.observer )( layer, site, values );
  }
}

} // namespace

Vector Engine::ffn_dense( std::span<const float> x, std::size_t layer, const StepContext& ctx ) const
{
  const auto& L = layers_.at( layer );
  if ( x.size() != config_.d_model ) {
    throw std::invalid_argument( "ffn_dense: input length != d_model" );
  }
  const Vector a_gate = silu( project( x, L.gate, false, ctx.counters ) );
  observe( ctx, layer, Site::ffn_gate, a_gate );

  const Vector a_up = path_ == ExecutionPath::masked_dense ? dense_matvec( L.up, x )
                                                           : kernels::dense_rows( x, L.up, cfg_, ctx.counters );
  observe( ctx, layer, Site::ffn_up, a_up );

  Vector h( a_up.size() );
  for ( std::size_t i = 0; i < h.size(); ++i ) {
    h[i] = a_up[i] * a_gate[i];
  }
  const std::uint64_t d = config_.d_model;
  const std::uint64_t ff = config_.d_ff;
  record( ctx, layer, Projection::gate, d, d );
  record( ctx, layer, Projection::up, ff, ff );
  record( ctx, layer, Projection::down, ff, ff );
  return project( h, L.down, false, ctx.counters );
}

Vector Engine::ffn_sparse( std::span<const float> x,
                           std::size_t layer,
                           const FfnThresholds& thresholds,
                           Mode mode,
                           const StepContext& ctx ) const
{
  const auto& L = layers_.at( layer );
  if ( x.size() != config_.d_model ) {
    throw std::invalid_argument( "ffn_sparse: input length != d_model" );
  }
  if ( thresholds.dim() != config_.d_ff ) {
    throw MismatchError( "ffn_sparse: thresholds missing or sized for a different d_ff" );
  }
  const Vector a_gate = silu( project( x, L.gate, false, ctx.counters ) );
  observe( ctx, layer, Site::ffn_gate, a_gate );

  const MaskedVector mask = mode == Mode::cats ? cats_apply( a_gate, thresholds.t.front() )
                                               : cwt_apply( a_gate, thresholds.t, thresholds.always_prune );

  Vector h;
  if ( path_ == ExecutionPath::masked_dense ) {
    h = dense_matvec( L.up, x );
    for ( std::size_t i = 0; i < h.size(); ++i ) {
      h[i] = h[i] * mask.values[i];
    }
  } else {
    h = kernels::vmmsp( x, L.up, mask.values, cfg_, ctx.counters );
  }

  const std::uint64_t d = config_.d_model;
  record( ctx, layer, Projection::gate, d, d );
  record( ctx, layer, Projection::up, mask.nnz, config_.d_ff );
  record( ctx, layer, Projection::down, count_nonzero( h ), config_.d_ff );
  return project( h, L.down, true, ctx.counters );
}

Vector Engine::attn_forward( std::span<const float> x,
                             std::size_t layer,
                             KvCache& cache,
                             Mode mode,
                             const AttnThresholds* thresholds,
                             const StepContext& ctx ) const
{
  const auto& L = layers_.at( layer );
  const std::size_t d = config_.d_model;
  const std::size_t hd = config_.head_dim();
  if ( x.size() != d ) {
    throw std::invalid_argument( "attn_forward: input length != d_model" );
  }
  const bool sparse_attn = sparsifies_attention( mode );
  const bool full = mode == Mode::cwt_full_attn;
  if ( sparse_attn && thresholds == nullptr ) {
    throw MismatchError( "attn_forward: mode needs attention thresholds" );
  }
  observe( ctx, layer, Site::attn_query_input, x );

  // Selective: threshold only the query input. Full: one shared threshold on
  // the q/k/v input.
  Vector q_in_storage;
  std::span<const float> q_in = x;
  std::span<const float> kv_in = x;
  if ( sparse_attn ) {
    q_in_storage = cats_apply( x, thresholds->input ).values;
    q_in = q_in_storage;
    if ( full ) {
      kv_in = q_in_storage;
    }
  }

  const Vector q = project( q_in, L.wq, sparse_attn, ctx.counters );
  const Vector k = project( kv_in, L.wk, full, ctx.counters );
  const Vector v = project( kv_in, L.wv, full, ctx.counters );
  const std::uint64_t q_used = sparse_attn ? count_nonzero( q_in ) : d;
  const std::uint64_t kv_used = full ? count_nonzero( kv_in ) : d;
  record( ctx, layer, Projection::q, q_used, d );
  record( ctx, layer, Projection::k, kv_used, d );
  record( ctx, layer, Projection::v, kv_used, d );

  cache.write( layer, k, v );
  const std::size_t positions = cache.length() + 1;
  const float scale = 1.0f / std::sqrt( static_cast<float>( hd ) );

  Vector out( d, 0.0f );
  Vector scores( positions );
  for ( std::size_t h = 0; h < config_.n_heads; ++h ) {
    const std::size_t g = h / config_.group_size();
    const float* qh = q.data() + h * hd;
    for ( std::size_t t = 0; t < positions; ++t ) {
      const auto kt = cache.key( layer, g, t );
      float s = 0.0f;
      for ( std::size_t i = 0; i < hd; ++i ) {
        s += qh[i] * kt[i];
      }
      scores[t] = s * scale;
    }
    const float max_score = *std::max_element( scores.begin(), scores.end() );
    float sum = 0.0f;
    for ( float& s : scores ) {
      s = std::exp( s - max_score );
      sum += s;
    }
    float* oh = out.data() + h * hd;
    for ( std::size_t t = 0; t < positions; ++t ) {
      const float p = scores[t] / sum;
      const auto vt = cache.value( layer, g, t );
      for ( std::size_t i = 0; i < hd; ++i ) {
        oh[i] += p * vt[i];
      }
    }
  }
  observe( ctx, layer, Site::attn_output_input, out );

  if ( sparse_attn ) {
    out = cats_apply( out, thresholds->output ).values;
  }
  record( ctx, layer, Projection::o, sparse_attn ? count_nonzero( out ) : d, d );
  return project( out, L.wo, sparse_attn, ctx.counters );
}

StepOutput Engine::step( std::uint32_t token, KvCache& cache, const StepContext& ctx ) const
{
  if ( token >= config_.vocab_size ) {
    throw std::out_of_range( "token id " + std::to_string( token ) + " >= vocab size "
                             + std::to_string( config_.vocab_size ) );
  }
  check_thresholds( config_, ctx.mode, ctx.thresholds );

  const auto row = embedding_.row( token );
  Vector x( row.begin(), row.end() );
  for ( std::size_t l = 0; l < layers_.size(); ++l ) {
    const auto& L = layers_[l];
    const Vector xn = rms_norm( x, L.attn_norm );
    const AttnThresholds* attn_t = ctx.thresholds ? &ctx.thresholds->attn[l] : nullptr;
    const Vector a = attn_forward( xn, l, cache, ctx.mode, attn_t, ctx );
    for ( std::size_t i = 0; i < x.size(); ++i ) {
      x[i] += a[i];
    }
    const Vector hn = rms_norm( x, L.ffn_norm );
    const Vector f = sparsifies_ffn( ctx.mode ) ? ffn_sparse( hn, l, ctx.thresholds->ffn[l], ctx.mode, ctx )
                                                : ffn_dense( hn, l, ctx );
    for ( std::size_t i = 0; i < x.size(); ++i ) {
      x[i] += f[i];
    }
  }
  cache.advance();
  if ( ctx.activity ) {
    ++ctx.activity->steps;
  }

  const Vector xf = rms_norm( x, final_norm_ );
  Vector logits = path_ == ExecutionPath::masked_dense ? dense_vmm( xf, head_.kxn() ) : kernels::dense( xf, head_, cfg_ );
  return { std::move( x ), std::move( logits ) };
}

double DecodeResult::tokens_per_sec() const
{
  const double ns = static_cast<double>( std::accumulate( step_ns.begin(), step_ns.end(), std::int64_t { 0 } ) );
  return ns > 0.0 ? static_cast<double>( tokens.size() ) * 1e9 / ns : 0.0;
}

namespace {

class Fnv1a
{
public:
  void update( std::span<const float> values )
  {
    const auto* bytes = reinterpret_cast<const unsigned char*>( values.data() );
    for ( std::size_t i = 0; i < values.size_bytes(); ++i ) {
      hash_ ^= bytes[i];
      hash_ *= 0x100000001b3ull;
    }
  }

  std::string hex() const
  {
    static constexpr char digits[] = "0123456789abcdef";
    std::string out( 16, '0' );
    for ( int i = 0; i < 16; ++i ) {
      out[15 - i] = digits[( hash_ >> ( 4 * i ) ) & 0xf];
    }
    return out;
  }

private:
  std::uint64_t hash_ = 0xcbf29ce484222325ull;
};

} // namespace

DecodeResult decode( const Engine& engine, const DecodeRequest& request )
{
  const auto& config = engine.config();
  if ( request.prompt.empty() ) {
    throw std::invalid_argument( "decode: prompt must not be empty" );
  }
  if ( request.gen_len == 0 ) {
    throw std::invalid_argument( "decode: gen_len must be >= 1" );
  }
  for ( auto t : request.prompt ) {
    if ( t >= config.vocab_size ) {
      throw std::out_of_range( "decode: prompt token " + std::to_string( t ) + " >= vocab size" );
    }
  }
  if ( request.prompt.size() - 1 + request.gen_len > config.max_seq_len ) {
    throw std::length_error( "decode: prompt + generation exceeds max_seq_len" );
  }
  check_thresholds( config, request.mode, request.thresholds );

  KvCache cache( config );
  const StepContext prefill;
  for ( std::size_t i = 0; i + 1 < request.prompt.size(); ++i ) {
    engine.step( request.prompt[i], cache, prefill );
  }

  DecodeResult result;
  result.activity = SiteActivity( config.n_layers );
  StepContext ctx;
  ctx.mode = request.mode;
  ctx.thresholds = request.thresholds;
  ctx.activity = &result.activity;
  ctx.counters = &result.counters;

  Fnv1a checksum;
  std::uint32_t token = request.prompt.back();
  for ( std::size_t s = 0; s < request.gen_len; ++s ) {
    const auto start = std::chrono::steady_clock::now();
    StepOutput out = engine.step( token, cache, ctx );
    const auto stop = std::chrono::steady_clock::now();
    result.step_ns.push_back( std::chrono::duration_cast<std::chrono::nanoseconds>( stop - start ).count() );

    checksum.update( out.hidden );
    token = static_cast<std::uint32_t>( argmax( out.logits ) );
    result.tokens.push_back( token );
    if ( request.keep_logits ) {
      result.logits.push_back( std::move( out.logits ) );
    }
  }
  result.checksum = checksum.hex();
  return result;
}

} // namespace sparse_engine
