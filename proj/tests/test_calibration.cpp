#include <doctest.h>

#include <cmath>
#include <numeric>

#include <json.hpp>

#include "sparse_engine/calibrate.hpp"
#include "sparse_engine/calibration.hpp"
#include "sparse_engine/sparsify.hpp"
#include "test_util.hpp"

using namespace sparse_engine;
using sparse_engine::testing::rel_diff;

namespace {

ActivationTrace trace( Site site, Matrix rows, std::uint32_t layer = 0 )
{
  return { layer, site, std::move( rows ) };
}

// Up trace with per-channel scales spread over two decades, gate trace silu(normal).
std::pair<ActivationTrace, ActivationTrace> synthetic_pair( std::size_t n, std::size_t d, Rng& rng )
{
  std::vector<double> scale( d );
  for ( double& s : scale ) {
    s = std::exp( rng.uniform( std::log( 0.1 ), std::log( 10.0 ) ) );
  }
  Matrix up( n, d );
  Matrix gate( n, d );
  for ( std::size_t j = 0; j < n; ++j ) {
    for ( std::size_t i = 0; i < d; ++i ) {
      up( j, i ) = static_cast<float>( scale[i] * rng.normal() );
      gate( j, i ) = silu( static_cast<float>( rng.normal() ) );
    }
  }
  return { trace( Site::ffn_up, std::move( up ) ), trace( Site::ffn_gate, std::move( gate ) ) };
}

} // namespace

TEST_CASE( "site and mode names" )
{
  for ( Mode m : { Mode::dense, Mode::cats, Mode::cwt, Mode::cwt_full_attn, Mode::cwt_selective_attn } ) {
    CHECK( mode_from_string( to_string( m ) ) == m );
  }
  CHECK( to_string( Mode::cwt_selective_attn ) == "cwt-selective-attn" );
  CHECK_THROWS( mode_from_string( "sparse" ) );
  CHECK( site_from_index( 3 ) == Site::attn_output_input );
  CHECK_THROWS( site_from_index( 4 ) );
}

TEST_CASE( "channel_stats examples" )
{
  CHECK( channel_stats( trace( Site::ffn_up, Matrix { { 1, -2 }, { 3, -4 } } ) ).mean_abs_up
         == std::vector<float> { 2.0f, 3.0f } );
  CHECK( channel_stats( trace( Site::ffn_up, Matrix( 5, 3, 0.0f ) ) ).mean_abs_up == std::vector<float>( 3, 0.0f ) );
  CHECK( channel_stats( trace( Site::ffn_up, Matrix { { -5 } } ) ).mean_abs_up == std::vector<float> { 5.0f } );
  CHECK_THROWS( channel_stats( trace( Site::ffn_gate, Matrix { { 1 } } ) ) );
}

TEST_CASE( "estimated_scores examples" )
{
  const ChannelStats mu { { 1.0f, 2.0f } };
  CHECK( estimated_scores( trace( Site::ffn_gate, Matrix { { 0.5f, -0.5f } } ), mu ) == std::vector<float> { 0.5f, 1.0f } );
  CHECK( estimated_scores( trace( Site::ffn_gate, Matrix { { 0.5f, -0.5f } } ), ChannelStats { { 0.0f, 0.0f } } )
         == std::vector<float> { 0.0f, 0.0f } );
  CHECK( estimated_scores( trace( Site::ffn_gate, Matrix { { -2.0f } } ), ChannelStats { { 3.0f } } )
         == std::vector<float> { 6.0f } );
  CHECK_THROWS( estimated_scores( trace( Site::ffn_gate, Matrix { { 1.0f } } ), mu ) );
}

TEST_CASE( "channel_thresholds example" )
{
  const ChannelStats mu { { 1.0f, 2.0f } };
  const auto scores = estimated_scores( trace( Site::ffn_gate, Matrix { { 0.5f, -0.5f } } ), mu );
  CHECK( empirical_quantile( scores, 0.5 ) == 0.5f );
  const FfnThresholds t = channel_thresholds( scores, mu, 0.5 );
  CHECK( t.t == std::vector<float> { 0.5f, 0.25f } );
  CHECK( t.always_prune == std::vector<std::uint8_t> { 0, 0 } );

  CHECK_THROWS( channel_thresholds( {}, mu, 0.5 ) );
  CHECK_THROWS( channel_thresholds( scores, mu, 1.2 ) );
}

TEST_CASE( "silent channels are flagged always-prune" )
{
  const ChannelStats mu { { 1.0f, 0.0f } };
  const auto scores = estimated_scores( trace( Site::ffn_gate, Matrix { { 0.5f, 3.0f }, { 0.25f, 2.0f } } ), mu );
  const FfnThresholds t = channel_thresholds( scores, mu, 0.5 );
  CHECK( t.always_prune == std::vector<std::uint8_t> { 0, 1 } );
  CHECK( t.t[1] == 0.0f );
  CHECK( cwt_apply( Vector { 1.0f, 3.0f }, t.t, t.always_prune ).values == Vector { 1.0f, 0.0f } );
}

TEST_CASE( "k = 0 takes the minimum score" )
{
  Rng rng( 2 );
  auto [up, gate] = synthetic_pair( 50, 16, rng );
  const ChannelStats stats = channel_stats( up );
  const auto scores = estimated_scores( gate, stats );
  const float lo = *std::min_element( scores.begin(), scores.end() );
  const FfnThresholds t = channel_thresholds( scores, stats, 0.0 );
  for ( std::size_t i = 0; i < 16; ++i ) {
    CHECK( t.t[i] == lo / stats.mean_abs_up[i] );
  }
  // Only the minimum-score element(s) prune.
  CHECK( realized_sparsity( gate, t ) <= 2.0 / ( 50 * 16 ) );
}

TEST_CASE( "homogeneous channels collapse to one threshold" )
{
  Rng rng( 4 );
  Matrix up( 40, 8 );
  for ( std::size_t j = 0; j < 40; ++j ) {
    const float v = static_cast<float>( rng.normal() );
    for ( std::size_t i = 0; i < 8; ++i ) {
      up( j, i ) = ( i % 2 ) ? -v : v;
    }
  }
  auto [unused, gate] = synthetic_pair( 40, 8, rng );
  const ChannelStats stats = channel_stats( trace( Site::ffn_up, up ) );
  const FfnThresholds t = channel_thresholds( estimated_scores( gate, stats ), stats, 0.5 );
  for ( float ti : t.t ) {
    CHECK( ti == t.t[0] );
  }
  CHECK( rel_diff( t.t[0], tensor_threshold( gate, 0.5 ) ) <= 1e-6 );
  for ( std::size_t j = 0; j < 40; ++j ) {
    CHECK( cwt_apply( gate.rows.row( j ), t.t ).values == cats_apply( gate.rows.row( j ), t.t[0] ).values );
  }
}

TEST_CASE( "tensor_threshold examples" )
{
  const ActivationTrace x = trace( Site::attn_query_input, Matrix { { 1, -2 }, { 3, -4 } } );
  CHECK( tensor_threshold( x, 0.5 ) == 2.0f );
  CHECK( tensor_threshold( x, 1.0 ) == 4.0f );
  CHECK( tensor_threshold( trace( Site::attn_query_input, Matrix( 3, 3, 0.0f ) ), 0.5 ) == 0.0f );
}

TEST_CASE( "thresholds are monotone in k" )
{
  Rng rng( 6 );
  auto [up, gate] = synthetic_pair( 64, 32, rng );
  const ChannelStats stats = channel_stats( up );
  const auto scores = estimated_scores( gate, stats );
  FfnThresholds prev = channel_thresholds( scores, stats, 0.0 );
  float prev_tensor = tensor_threshold( gate, 0.0 );
  for ( int step = 1; step <= 20; ++step ) {
    const double k = step / 20.0;
    const FfnThresholds cur = channel_thresholds( scores, stats, k );
    for ( std::size_t i = 0; i < cur.dim(); ++i ) {
      CHECK( cur.t[i] >= prev.t[i] );
    }
    const float cur_tensor = tensor_threshold( gate, k );
    CHECK( cur_tensor >= prev_tensor );
    prev = cur;
    prev_tensor = cur_tensor;
  }
}

TEST_CASE( "realized sparsity on the calibration trace matches k" )
{
  Rng rng( 8 );
  auto [up, gate] = synthetic_pair( 100, 40, rng );
  const ChannelStats stats = channel_stats( up );
  const auto scores = estimated_scores( gate, stats );
  const double n_total = 100.0 * 40.0;
  for ( double k : { 0.1, 0.25, 0.5, 0.7, 0.9, 1.0 } ) {
    const double cwt = realized_sparsity( gate, channel_thresholds( scores, stats, k ) );
    CHECK( cwt >= k - 1.0 / n_total );
    CHECK( cwt <= k + 1.0 / n_total + 1e-12 );
    const double cats = realized_sparsity( gate, tensor_threshold( gate, k ) );
    CHECK( cats >= k - 1.0 / n_total );
    CHECK( cats <= k + 1.0 / n_total + 1e-12 );
  }
}

TEST_CASE( "ties at the quantile prune at least k" )
{
  const ActivationTrace x = trace( Site::attn_query_input, Matrix { { 1, 1, 1, 1, 2, 3 } } );
  CHECK( tensor_threshold( x, 0.5 ) == 1.0f );
  CHECK( realized_sparsity( x, 1.0f ) == doctest::Approx( 4.0 / 6.0 ) );
}

TEST_CASE( "channel permutation equivariance" )
{
  Rng rng( 10 );
  auto [up, gate] = synthetic_pair( 30, 12, rng );
  std::vector<std::size_t> perm( 12 );
  std::iota( perm.begin(), perm.end(), std::size_t { 0 } );
  rng.shuffle( std::span<std::size_t>( perm ) );
  Matrix up_p( 30, 12 );
  Matrix gate_p( 30, 12 );
  for ( std::size_t j = 0; j < 30; ++j ) {
    for ( std::size_t i = 0; i < 12; ++i ) {
      up_p( j, i ) = up.rows( j, perm[i] );
      gate_p( j, i ) = gate.rows( j, perm[i] );
    }
  }
  const ChannelStats s = channel_stats( up );
  const ChannelStats sp = channel_stats( trace( Site::ffn_up, up_p ) );
  const FfnThresholds t = channel_thresholds( estimated_scores( gate, s ), s, 0.5 );
  const FfnThresholds tp = channel_thresholds( estimated_scores( trace( Site::ffn_gate, gate_p ), sp ), sp, 0.5 );
  for ( std::size_t i = 0; i < 12; ++i ) {
    CHECK( tp.t[i] == t.t[perm[i]] );
  }
}

TEST_CASE( "rescaling the up trace leaves thresholds unchanged" )
{
  Rng rng( 12 );
  auto [up, gate] = synthetic_pair( 40, 16, rng );
  const ChannelStats s = channel_stats( up );
  const FfnThresholds t = channel_thresholds( estimated_scores( gate, s ), s, 0.6 );
  for ( float c : { 0.01f, 0.5f, 4.0f, 1000.0f } ) {
    Matrix scaled = up.rows;
    for ( float& v : scaled.data() ) {
      v *= c;
    }
    const ChannelStats sc = channel_stats( trace( Site::ffn_up, scaled ) );
    for ( std::size_t i = 0; i < 16; ++i ) {
      CHECK( rel_diff( sc.mean_abs_up[i], c * s.mean_abs_up[i] ) <= 1e-6 );
    }
    const FfnThresholds tc = channel_thresholds( estimated_scores( gate, sc ), sc, 0.6 );
    for ( std::size_t i = 0; i < 16; ++i ) {
      CHECK( rel_diff( tc.t[i], t.t[i] ) <= 1e-6 );
    }
  }
}

TEST_CASE( "threshold JSON round trip" )
{
  ThresholdSet set = ThresholdSet::zeros( 2, 3, Mode::cwt_selective_attn, 0.5 );
  set.ffn[0].t = { 0.25f, 1.5f, 0.0f };
  set.ffn[0].always_prune = { 0, 0, 1 };
  set.ffn[1].t = { 0.125f, 0.75f, 2.0f };
  set.attn[0] = { 0.5f, 0.0625f };
  set.attn[1] = { 1.25f, 0.375f };

  const std::string text = thresholds_to_json( set );
  const auto doc = nlohmann::json::parse( text );
  CHECK( doc["version"] == 1 );
  CHECK( doc["mode"] == "cwt-selective-attn" );
  CHECK( doc["n_layers"] == 2 );
  CHECK( doc["d_ff"] == 3 );
  CHECK( doc["ffn"][0][2].is_null() );
  CHECK( doc["attn"][1]["t_q"] == 1.25 );
  CHECK( doc["attn"][1]["t_o"] == 0.375 );

  const ThresholdSet back = thresholds_from_json( text );
  CHECK( back.k == 0.5 );
  CHECK( back.mode == Mode::cwt_selective_attn );
  for ( std::size_t l = 0; l < 2; ++l ) {
    CHECK( back.ffn[l].t == set.ffn[l].t );
    CHECK( back.ffn[l].always_prune == set.ffn[l].always_prune );
    CHECK( back.attn[l].input == set.attn[l].input );
    CHECK( back.attn[l].output == set.attn[l].output );
  }
  CHECK( thresholds_to_json( back ) == text );

  set.mode = Mode::cwt_full_attn;
  const auto full = nlohmann::json::parse( thresholds_to_json( set ) );
  CHECK( full["attn"][0].contains( "t_i" ) );
  CHECK_FALSE( full["attn"][0].contains( "t_q" ) );
}

TEST_CASE( "threshold JSON rejects malformed documents" )
{
  const std::string good = thresholds_to_json( ThresholdSet::zeros( 1, 2, Mode::cwt, 0.5 ) );
  CHECK_NOTHROW( thresholds_from_json( good ) );
  CHECK_THROWS( thresholds_from_json( "{" ) );
  CHECK_THROWS( thresholds_from_json( "[]" ) );
  auto doc = nlohmann::json::parse( good );
  auto bad = doc;
  bad["version"] = 2;
  CHECK_THROWS( thresholds_from_json( bad.dump() ) );
  bad = doc;
  bad["ffn"][0][0] = -1.0;
  CHECK_THROWS( thresholds_from_json( bad.dump() ) );
  bad = doc;
  bad["ffn"][0] = nlohmann::json::array( { 0.0 } );
  CHECK_THROWS( thresholds_from_json( bad.dump() ) );
  bad = doc;
  bad["mode"] = "relu";
  CHECK_THROWS( thresholds_from_json( bad.dump() ) );
  bad = doc;
  bad["k"] = 1.5;
  CHECK_THROWS( thresholds_from_json( bad.dump() ) );
  bad = doc;
  bad.erase( "attn" );
  CHECK_THROWS( thresholds_from_json( bad.dump() ) );
}

TEST_CASE( "calibrate on a small model" )
{
  const ToyModel model = generate_model( testing::tiny_config() );
  const Engine engine( model );
  Rng rng( 1 );
  const auto seqs = synthetic_sequences( model.config.vocab_size, 200, 40, rng );
  CHECK( seqs.size() == 5 );

  const ThresholdSet a = calibrate( engine, seqs, 0.5, Mode::cwt_selective_attn );
  const ThresholdSet b = calibrate( engine, seqs, 0.5, Mode::cwt_selective_attn );
  CHECK( thresholds_to_json( a ) == thresholds_to_json( b ) );

  const TraceBundle traces = collect_traces( engine, seqs );
  CHECK( traces.n_samples() == 200 );
  CHECK( traces.at( 1, Site::ffn_gate ).dim() == 64 );
  CHECK( traces.at( 1, Site::attn_output_input ).dim() == 32 );
  for ( std::size_t l = 0; l < 2; ++l ) {
    CHECK( std::fabs( realized_sparsity( traces.at( l, Site::ffn_gate ), a.ffn[l] ) - 0.5 ) <= 0.02 );
    CHECK( std::fabs( realized_sparsity( traces.at( l, Site::attn_query_input ), a.attn[l].input ) - 0.5 ) <= 0.02 );
  }

  const ThresholdSet dense = calibrate( engine, seqs, 0.5, Mode::dense );
  for ( const auto& layer : dense.ffn ) {
    CHECK( std::all_of( layer.t.begin(), layer.t.end(), []( float t ) { return t == 0.0f; } ) );
  }
  CHECK( dense.attn[0].input == 0.0f );

  const ThresholdSet cats = thresholds_from_traces( traces, 0.5, Mode::cats );
  CHECK( cats.ffn[0].t[0] == tensor_threshold( traces.at( 0, Site::ffn_gate ), 0.5 ) );
  CHECK( cats.attn[0].input == 0.0f );

  const ThresholdSet full = thresholds_from_traces( traces, 0.5, Mode::cwt_full_attn );
  CHECK( full.attn[1].input == a.attn[1].input );

  CHECK_THROWS( calibrate( engine, {}, 0.5, Mode::cwt ) );
  CHECK_THROWS( calibrate( engine, seqs, 1.5, Mode::cwt ) );
}

TEST_CASE( "calibrating a homogeneous-channel model matches the tensor threshold" )
{
  const ToyModel model = generate_model( testing::tiny_config(), UpChannelProfile::homogeneous );
  const Engine engine( model );
  Rng rng( 3 );
  const TraceBundle traces = collect_traces( engine, synthetic_sequences( model.config.vocab_size, 120, 40, rng ) );
  const ThresholdSet set = thresholds_from_traces( traces, 0.5, Mode::cwt );
  for ( std::size_t l = 0; l < 2; ++l ) {
    const float tensor = tensor_threshold( traces.at( l, Site::ffn_gate ), 0.5 );
    for ( float t : set.ffn[l].t ) {
      CHECK( rel_diff( t, tensor ) <= 1e-6 );
    }
  }
}

TEST_CASE( "trace bundles" )
{
  const ToyModel model = generate_model( testing::tiny_config() );
  const Engine engine( model );
  Rng rng( 5 );
  const TraceBundle traces = collect_traces( engine, synthetic_sequences( model.config.vocab_size, 30, 10, rng ) );
  const TraceBundle back = TraceBundle::from_traces( traces.flatten() );
  CHECK( back.n_layers() == 2 );
  CHECK( back.at( 1, Site::ffn_up ).rows == traces.at( 1, Site::ffn_up ).rows );

  const TraceBundle tail = traces.slice( 10, 30 );
  CHECK( tail.n_samples() == 20 );
  CHECK( tail.at( 0, Site::ffn_gate ).rows.row( 0 )[3] == traces.at( 0, Site::ffn_gate ).rows.row( 10 )[3] );

  auto missing = traces.flatten();
  missing.pop_back();
  CHECK_THROWS( TraceBundle::from_traces( missing ) );
  auto dup = traces.flatten();
  dup.push_back( dup.front() );
  CHECK_THROWS( TraceBundle::from_traces( dup ) );
}

TEST_CASE( "activity from traces" )
{
  const ToyModel model = generate_model( testing::tiny_config() );
  const Engine engine( model );
  Rng rng( 9 );
  const TraceBundle traces = collect_traces( engine, synthetic_sequences( model.config.vocab_size, 80, 40, rng ) );

  const SiteActivity dense = activity_from_traces( model.config, traces, ThresholdSet {}, Mode::dense );
  CHECK( activated_params( model.config, dense ) == 1.0 );

  double prev = 1.0;
  for ( double k : { 0.0, 0.2, 0.4, 0.6, 0.8, 1.0 } ) {
    const ThresholdSet set = thresholds_from_traces( traces, k, Mode::cwt_selective_attn );
    const double ap = activated_params( model.config, activity_from_traces( model.config, traces, set, Mode::cwt_selective_attn ) );
    CHECK( ap <= prev );
    CHECK( ap > 0.0 );
    prev = ap;
  }
}
