#include <algorithm>
#include <array>
#include <bit>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>

#include "sparse_engine/errors.hpp"
#include "sparse_engine/model.hpp"

namespace sparse_engine {

namespace {

constexpr std::array<char, 4> checkpoint_magic { 'T', 'G', 'S', 'M' };
constexpr std::array<char, 4> trace_magic { 'A', 'C', 'T', 'V' };
constexpr std::uint32_t checkpoint_version = 1;
constexpr std::uint32_t trace_version = 1;
// Upper bound on the floats one header may announce; rejects corrupt sizes
// before allocating.
constexpr std::uint64_t max_elements = std::uint64_t { 1 } << 31;

template<typename T>
T to_little( T v )
{
  if constexpr ( std::endian::native == std::endian::big ) {
    auto bytes = std::bit_cast<std::array<unsigned char, sizeof( T )>>( v );
    std::reverse( bytes.begin(), bytes.end() );
    return std::bit_cast<T>( bytes );
  }
  return v;
}

class Writer
{
public:
  explicit Writer( std::ostream& out )
    : out_( out )
  {}

  void bytes( const void* p, std::size_t n )
  {
    out_.write( static_cast<const char*>( p ), static_cast<std::streamsize>( n ) );
    if ( !out_ ) {
      throw IoError( "write failed" );
    }
  }

  template<typename T>
  void scalar( T v )
  {
    v = to_little( v );
    bytes( &v, sizeof v );
  }

  void floats( std::span<const float> v )
  {
    if constexpr ( std::endian::native == std::endian::little ) {
      bytes( v.data(), v.size_bytes() );
    } else {
      for ( float f : v ) {
        scalar( f );
      }
    }
  }

private:
  std::ostream& out_;
};

class Reader
{
public:
  Reader( std::istream& in, const char* what )
    : in_( in )
    , what_( what )
  {}

  void bytes( void* p, std::size_t n )
  {
    in_.read( static_cast<char*>( p ), static_cast<std::streamsize>( n ) );
    if ( static_cast<std::size_t>( in_.gcount() ) != n ) {
      throw FormatError( std::string( what_ ) + ": truncated file" );
    }
  }

  template<typename T>
  T scalar()
  {
    T v;
    bytes( &v, sizeof v );
    return to_little( v );
  }

  void floats( std::span<float> v )
  {
    bytes( v.data(), v.size_bytes() );
    if constexpr ( std::endian::native != std::endian::little ) {
      for ( float& f : v ) {
        f = to_little( f );
      }
    }
  }

  Matrix matrix( std::size_t rows, std::size_t cols )
  {
    Matrix m( rows, cols );
    floats( m.data() );
    return m;
  }

  Vector vector( std::size_t n )
  {
    Vector v( n );
    floats( v );
    return v;
  }

  bool at_eof() { return in_.peek() == std::char_traits<char>::eof(); }

private:
  std::istream& in_;
  const char* what_;
};

std::ofstream open_out( const std::filesystem::path& path )
{
  std::ofstream out( path, std::ios::binary | std::ios::trunc );
  if ( !out ) {
    throw IoError( "cannot open '" + path.string() + "' for writing" );
  }
  return out;
}

std::ifstream open_in( const std::filesystem::path& path )
{
  std::ifstream in( path, std::ios::binary );
  if ( !in ) {
    throw IoError( "cannot open '" + path.string() + "'" );
  }
  return in;
}

} // namespace

void save_checkpoint( const ToyModel& model, std::ostream& out )
{
  model.validate();
  Writer w( out );
  const auto& c = model.config;
  w.bytes( checkpoint_magic.data(), checkpoint_magic.size() );
  w.scalar( checkpoint_version );
  for ( std::uint32_t v : { c.n_layers, c.d_model, c.d_ff, c.n_heads, c.n_kv_heads, c.vocab_size, c.max_seq_len } ) {
    w.scalar( v );
  }
  w.scalar( c.seed );
  w.floats( model.embedding.data() );
  for ( const auto& l : model.layers ) {
    w.floats( l.attn_norm );
    w.floats( l.wq.data() );
    w.floats( l.wk.data() );
    w.floats( l.wv.data() );
    w.floats( l.wo.data() );
    w.floats( l.ffn_norm );
    w.floats( l.w_gate.data() );
    w.floats( l.w_up.data() );
    w.floats( l.w_down.data() );
  }
  w.floats( model.final_norm );
  w.floats( model.head.data() );
}

void save_checkpoint( const ToyModel& model, const std::filesystem::path& path )
{
  auto out = open_out( path );
  save_checkpoint( model, out );
  out.flush();
  if ( !out ) {
    throw IoError( "failed writing '" + path.string() + "'" );
  }
}

ToyModel load_checkpoint( std::istream& in )
{
  Reader r( in, "checkpoint" );
  std::array<char, 4> magic {};
  r.bytes( magic.data(), magic.size() );
  if ( magic != checkpoint_magic ) {
    throw FormatError( "checkpoint: bad magic (expected TGSM)" );
  }
  if ( const auto version = r.scalar<std::uint32_t>(); version != checkpoint_version ) {
    throw FormatError( "checkpoint: unsupported version " + std::to_string( version ) );
  }
  ModelConfig c;
  c.n_layers = r.scalar<std::uint32_t>();
  c.d_model = r.scalar<std::uint32_t>();
  c.d_ff = r.scalar<std::uint32_t>();
  c.n_heads = r.scalar<std::uint32_t>();
  c.n_kv_heads = r.scalar<std::uint32_t>();
  c.vocab_size = r.scalar<std::uint32_t>();
  c.max_seq_len = r.scalar<std::uint32_t>();
  c.seed = r.scalar<std::uint64_t>();
  try {
    c.validate();
  } catch ( const std::invalid_argument& e ) {
    throw FormatError( std::string( "checkpoint: " ) + e.what() );
  }

  const std::size_t d = c.d_model;
  const std::size_t kv = c.kv_dim();
  const std::size_t ff = c.d_ff;
  const std::uint64_t announced = 2ull * c.vocab_size * d + static_cast<std::uint64_t>( c.n_layers ) * ( 2 * d * d + 2 * kv * d + 3 * ff * d );
  if ( announced > max_elements ) {
    throw FormatError( "checkpoint: announced shape is too large" );
  }
  ToyModel model { c, r.matrix( c.vocab_size, d ), {}, {}, Matrix( 1, 1 ) };
  for ( std::uint32_t i = 0; i < c.n_layers; ++i ) {
    auto attn_norm = r.vector( d );
    auto wq = r.matrix( d, d );
    auto wk = r.matrix( kv, d );
    auto wv = r.matrix( kv, d );
    auto wo = r.matrix( d, d );
    auto ffn_norm = r.vector( d );
    auto gate = r.matrix( ff, d );
    auto up = r.matrix( ff, d );
    auto down = r.matrix( d, ff );
    model.layers.push_back( { std::move( attn_norm ), std::move( wq ), std::move( wk ), std::move( wv ), std::move( wo ),
                              std::move( ffn_norm ), std::move( gate ), std::move( up ), std::move( down ) } );
  }
  model.final_norm = r.vector( d );
  model.head = r.matrix( c.vocab_size, d );
  if ( !r.at_eof() ) {
    throw FormatError( "checkpoint: trailing bytes after head weights" );
  }
  try {
    model.validate();
  } catch ( const std::invalid_argument& e ) {
    throw FormatError( std::string( "checkpoint: " ) + e.what() );
  }
  return model;
}

ToyModel load_checkpoint( const std::filesystem::path& path )
{
  auto in = open_in( path );
  return load_checkpoint( in );
}

void write_traces( std::span<const ActivationTrace> traces, std::ostream& out )
{
  Writer w( out );
  for ( const auto& t : traces ) {
    w.bytes( trace_magic.data(), trace_magic.size() );
    w.scalar( trace_version );
    w.scalar( t.layer_index );
    w.scalar( static_cast<std::uint8_t>( t.site ) );
    w.scalar( static_cast<std::uint32_t>( t.n_samples() ) );
    w.scalar( static_cast<std::uint32_t>( t.dim() ) );
    w.floats( t.rows.data() );
  }
}

void write_traces( std::span<const ActivationTrace> traces, const std::filesystem::path& path )
{
  auto out = open_out( path );
  write_traces( traces, out );
  out.flush();
  if ( !out ) {
    throw IoError( "failed writing '" + path.string() + "'" );
  }
}

std::vector<ActivationTrace> read_traces( std::istream& in )
{
  Reader r( in, "trace" );
  std::vector<ActivationTrace> out;
  while ( !r.at_eof() ) {
    std::array<char, 4> magic {};
    r.bytes( magic.data(), magic.size() );
    if ( magic != trace_magic ) {
      throw FormatError( "trace: bad magic (expected ACTV)" );
    }
    if ( const auto version = r.scalar<std::uint32_t>(); version != trace_version ) {
      throw FormatError( "trace: unsupported version " + std::to_string( version ) );
    }
    const auto layer = r.scalar<std::uint32_t>();
    const auto raw_site = r.scalar<std::uint8_t>();
    const auto n = r.scalar<std::uint32_t>();
    const auto dim = r.scalar<std::uint32_t>();
    if ( n == 0 || dim == 0 ) {
      throw FormatError( "trace: empty record" );
    }
    if ( static_cast<std::uint64_t>( n ) * dim > max_elements ) {
      throw FormatError( "trace: record too large" );
    }
    Site site;
    try {
      site = site_from_index( raw_site );
    } catch ( const std::invalid_argument& e ) {
      throw FormatError( std::string( "trace: " ) + e.what() );
    }
    out.push_back( { layer, site, r.matrix( n, dim ) } );
    if ( !all_finite( out.back().rows.data() ) ) {
      throw FormatError( "trace: non-finite values" );
    }
  }
  if ( out.empty() ) {
    throw FormatError( "trace: file holds no records" );
  }
  return out;
}

std::vector<ActivationTrace> read_traces( const std::filesystem::path& path )
{
  auto in = open_in( path );
  return read_traces( in );
}

} // namespace sparse_engine
