#include "sparse_engine/model.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>

namespace sparse_engine {

void ModelConfig::validate() const
{
  auto fail = []( const std::string& msg ) { throw std::invalid_argument( "invalid model config: " + msg ); };
  if ( n_layers == 0 || d_model == 0 || d_ff == 0 || n_heads == 0 || n_kv_heads == 0 || vocab_size == 0
       || max_seq_len == 0 ) {
    fail( "all dimensions must be positive" );
  }
  if ( d_model % n_heads != 0 ) {
    fail( "d_model (" + std::to_string( d_model ) + ") must be divisible by n_heads (" + std::to_string( n_heads )
          + ")" );
  }
  if ( n_kv_heads > n_heads || n_heads % n_kv_heads != 0 ) {
    fail( "n_kv_heads (" + std::to_string( n_kv_heads ) + ") must divide n_heads (" + std::to_string( n_heads )
          + ")" );
  }
}

std::size_t ToyModel::parameter_count() const
{
  std::size_t total = embedding.size() + final_norm.size() + head.size();
  for ( const auto& l : layers ) {
    total += l.attn_norm.size() + l.wq.size() + l.wk.size() + l.wv.size() + l.wo.size() + l.ffn_norm.size()
             + l.w_gate.size() + l.w_up.size() + l.w_down.size();
  }
  return total;
}

void ToyModel::validate() const
{
  config.validate();
  const std::size_t d = config.d_model;
  const std::size_t kv = config.kv_dim();
  const std::size_t ff = config.d_ff;
  auto expect = [&]( const Matrix& m, std::size_t r, std::size_t c, const char* what ) {
    if ( m.rows() != r || m.cols() != c ) {
      throw std::invalid_argument( std::string( "model tensor " ) + what + " has shape " + std::to_string( m.rows() )
                                   + "x" + std::to_string( m.cols() ) + ", expected " + std::to_string( r ) + "x"
                                   + std::to_string( c ) );
    }
    if ( !all_finite( m.data() ) ) {
      throw std::invalid_argument( std::string( "model tensor " ) + what + " has non-finite values" );
    }
  };
  auto expect_vec = [&]( const Vector& v, std::size_t n, const char* what ) {
    if ( v.size() != n || !all_finite( v ) ) {
      throw std::invalid_argument( std::string( "model tensor " ) + what + " is malformed" );
    }
  };
  expect( embedding, config.vocab_size, d, "embedding" );
  if ( layers.size() != config.n_layers ) {
    throw std::invalid_argument( "model layer count does not match config" );
  }
  for ( const auto& l : layers ) {
    expect_vec( l.attn_norm, d, "attn_norm" );
    expect( l.wq, d, d, "wq" );
    expect( l.wk, kv, d, "wk" );
    expect( l.wv, kv, d, "wv" );
    expect( l.wo, d, d, "wo" );
    expect_vec( l.ffn_norm, d, "ffn_norm" );
    expect( l.w_gate, ff, d, "w_gate" );
    expect( l.w_up, ff, d, "w_up" );
    expect( l.w_down, d, ff, "w_down" );
  }
  expect_vec( final_norm, d, "final_norm" );
  expect( head, config.vocab_size, d, "head" );
}

namespace {

Matrix gaussian( std::size_t rows, std::size_t cols, double stddev, Rng& rng )
{
  Matrix m( rows, cols );
  for ( float& v : m.data() ) {
    v = static_cast<float>( rng.normal() * stddev );
  }
  return m;
}

Matrix up_projection( std::size_t d_ff, std::size_t d_model, UpChannelProfile profile, Rng& rng )
{
  const double stddev = 1.0 / std::sqrt( static_cast<double>( d_model ) );
  if ( profile == UpChannelProfile::homogeneous ) {
    const Matrix base = gaussian( 1, d_model, stddev, rng );
    Matrix m( d_ff, d_model );
    for ( std::size_t i = 0; i < d_ff; ++i ) {
      const float sign = ( rng.next_u64() & 1u ) ? -1.0f : 1.0f;
      auto row = m.row( i );
      for ( std::size_t j = 0; j < d_model; ++j ) {
        row[j] = sign * base( 0, j );
      }
    }
    return m;
  }
  Matrix m = gaussian( d_ff, d_model, stddev, rng );
  const double lo = std::log( 0.1 );
  const double hi = std::log( 10.0 );
  for ( std::size_t i = 0; i < d_ff; ++i ) {
    const auto scale = static_cast<float>( std::exp( rng.uniform( lo, hi ) ) );
    for ( float& v : m.row( i ) ) {
      v *= scale;
    }
  }
  return m;
}

} // namespace

ToyModel generate_model( const ModelConfig& config, UpChannelProfile up )
{
  config.validate();
  Rng rng( config.seed );
  const std::size_t d = config.d_model;
  const std::size_t kv = config.kv_dim();
  const std::size_t ff = config.d_ff;
  const double in_d = 1.0 / std::sqrt( static_cast<double>( d ) );
  const double in_ff = 1.0 / std::sqrt( static_cast<double>( ff ) );

  ToyModel model { config, gaussian( config.vocab_size, d, 1.0, rng ), {}, Vector( d, 1.0f ), Matrix( 1, 1 ) };
  model.layers.reserve( config.n_layers );
  for ( std::uint32_t l = 0; l < config.n_layers; ++l ) {
    LayerWeights w {
      Vector( d, 1.0f ),
      gaussian( d, d, in_d, rng ),
      gaussian( kv, d, in_d, rng ),
      gaussian( kv, d, in_d, rng ),
      gaussian( d, d, in_d, rng ),
      Vector( d, 1.0f ),
      gaussian( ff, d, in_d, rng ),
      Matrix( 1, 1 ),
      Matrix( 1, 1 ),
    };
    w.w_up = up_projection( ff, d, up, rng );
    w.w_down = gaussian( d, ff, in_ff, rng );
    model.layers.push_back( std::move( w ) );
  }
  model.head = gaussian( config.vocab_size, d, in_d, rng );
  return model;
}

KvCache::KvCache( const ModelConfig& config )
  : n_layers_( config.n_layers )
  , n_kv_heads_( config.n_kv_heads )
  , head_dim_( config.head_dim() )
  , capacity_( config.max_seq_len )
  , keys_( n_layers_, Vector( n_kv_heads_ * capacity_ * head_dim_, 0.0f ) )
  , values_( n_layers_, Vector( n_kv_heads_ * capacity_ * head_dim_, 0.0f ) )
{}

std::size_t KvCache::offset( std::size_t kv_head, std::size_t pos ) const
{
  return ( kv_head * capacity_ + pos ) * head_dim_;
}

void KvCache::write( std::size_t layer, std::span<const float> k, std::span<const float> v )
{
  if ( length_ >= capacity_ ) {
    throw std::length_error( "KV cache overflow: max_seq_len " + std::to_string( capacity_ ) + " reached" );
  }
  if ( layer >= n_layers_ || k.size() != n_kv_heads_ * head_dim_ || v.size() != k.size() ) {
    throw std::invalid_argument( "KvCache::write: bad layer or key/value length" );
  }
  for ( std::size_t h = 0; h < n_kv_heads_; ++h ) {
    std::copy_n( k.begin() + static_cast<std::ptrdiff_t>( h * head_dim_ ), head_dim_,
                 keys_[layer].begin() + static_cast<std::ptrdiff_t>( offset( h, length_ ) ) );
    std::copy_n( v.begin() + static_cast<std::ptrdiff_t>( h * head_dim_ ), head_dim_,
                 values_[layer].begin() + static_cast<std::ptrdiff_t>( offset( h, length_ ) ) );
  }
}

void KvCache::advance()
{
  if ( length_ >= capacity_ ) {
    throw std::length_error( "KV cache overflow" );
  }
  ++length_;
}

std::span<const float> KvCache::key( std::size_t layer, std::size_t kv_head, std::size_t pos ) const
{
  return { keys_[layer].data() + offset( kv_head, pos ), head_dim_ };
}

std::span<const float> KvCache::value( std::size_t layer, std::size_t kv_head, std::size_t pos ) const
{
  return { values_[layer].data() + offset( kv_head, pos ), head_dim_ };
}

} // namespace sparse_engine
