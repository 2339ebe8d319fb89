#include <cmath>
#include <stdexcept>

#include <json.hpp>

#include "sparse_engine/calibration.hpp"

namespace sparse_engine {

using nlohmann::json;

std::string thresholds_to_json( const ThresholdSet& set )
{
  json doc;
  doc["version"] = set.version;
  doc["k"] = set.k;
  doc["mode"] = std::string( to_string( set.mode ) );
  doc["n_layers"] = set.n_layers();
  doc["d_ff"] = set.ffn.empty() ? 0 : set.ffn.front().dim();

  json ffn = json::array();
  for ( const auto& layer : set.ffn ) {
    json row = json::array();
    for ( std::size_t i = 0; i < layer.dim(); ++i ) {
      if ( layer.always_prune[i] ) {
        row.push_back( nullptr );
      } else {
        row.push_back( static_cast<double>( layer.t[i] ) );
      }
    }
    ffn.push_back( std::move( row ) );
  }
  doc["ffn"] = std::move( ffn );

  const char* input_key = set.mode == Mode::cwt_full_attn ? "t_i" : "t_q";
  json attn = json::array();
  for ( const auto& layer : set.attn ) {
    attn.push_back( { { input_key, static_cast<double>( layer.input ) }, { "t_o", static_cast<double>( layer.output ) } } );
  }
  doc["attn"] = std::move( attn );
  return doc.dump( 1 ) + "\n";
}

namespace {

float read_threshold( const json& v, const char* what )
{
  if ( !v.is_number() ) {
    throw std::invalid_argument( std::string( "thresholds: " ) + what + " is not a number" );
  }
  const auto t = v.get<double>();
  if ( !std::isfinite( t ) || t < 0.0 ) {
    throw std::invalid_argument( std::string( "thresholds: " ) + what + " must be finite and >= 0" );
  }
  return static_cast<float>( t );
}

} // namespace

ThresholdSet thresholds_from_json( std::string_view text )
{
  json doc;
  try {
    doc = json::parse( text );
  } catch ( const json::parse_error& e ) {
    throw std::invalid_argument( std::string( "thresholds: malformed JSON: " ) + e.what() );
  }
  if ( !doc.is_object() ) {
    throw std::invalid_argument( "thresholds: document is not an object" );
  }

  ThresholdSet set;
  try {
    set.version = doc.at( "version" ).get<int>();
    if ( set.version != ThresholdSet::current_version ) {
      throw std::invalid_argument( "thresholds: unsupported version " + std::to_string( set.version ) );
    }
    set.k = doc.at( "k" ).get<double>();
    if ( !( set.k >= 0.0 && set.k <= 1.0 ) ) {
      throw std::invalid_argument( "thresholds: k must lie in [0, 1]" );
    }
    set.mode = mode_from_string( doc.at( "mode" ).get<std::string>() );
    const auto n_layers = doc.at( "n_layers" ).get<std::size_t>();
    const auto d_ff = doc.at( "d_ff" ).get<std::size_t>();

    const auto& ffn = doc.at( "ffn" );
    const auto& attn = doc.at( "attn" );
    if ( !ffn.is_array() || ffn.size() != n_layers || !attn.is_array() || attn.size() != n_layers ) {
      throw std::invalid_argument( "thresholds: ffn/attn arrays must have n_layers entries" );
    }
    for ( const auto& row : ffn ) {
      if ( !row.is_array() || row.size() != d_ff ) {
        throw std::invalid_argument( "thresholds: every ffn layer must have d_ff entries" );
      }
      FfnThresholds layer;
      layer.t.reserve( d_ff );
      layer.always_prune.reserve( d_ff );
      for ( const auto& v : row ) {
        if ( v.is_null() ) {
          layer.t.push_back( 0.0f );
          layer.always_prune.push_back( 1 );
        } else {
          layer.t.push_back( read_threshold( v, "ffn threshold" ) );
          layer.always_prune.push_back( 0 );
        }
      }
      set.ffn.push_back( std::move( layer ) );
    }
    for ( const auto& entry : attn ) {
      AttnThresholds layer;
      if ( entry.contains( "t_i" ) ) {
        layer.input = read_threshold( entry.at( "t_i" ), "t_i" );
      } else {
        layer.input = read_threshold( entry.at( "t_q" ), "t_q" );
      }
      layer.output = read_threshold( entry.at( "t_o" ), "t_o" );
      set.attn.push_back( layer );
    }
  } catch ( const json::exception& e ) {
    throw std::invalid_argument( std::string( "thresholds: " ) + e.what() );
  }
  return set;
}

} // namespace sparse_engine
