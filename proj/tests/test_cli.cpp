#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "cli.hpp"
#include "sparse_engine/calibration.hpp"
#include "sparse_engine/model.hpp"

using namespace sparse_engine;
using nlohmann::json;

namespace {

struct Result
{
  int code = 0;
  std::string out;
  std::string err;

  json doc() const { return json::parse( out ); }
};

Result run( std::vector<std::string> args )
{
  std::ostringstream out;
  std::ostringstream err;
  Result r;
  r.code = cli::run( args, out, err );
  r.out = out.str();
  r.err = err.str();
  return r;
}

std::string slurp( const std::filesystem::path& p )
{
  std::ifstream in( p, std::ios::binary );
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

class TempDir
{
public:
  explicit TempDir( const std::string& name )
    : path_( std::filesystem::temp_directory_path() / ( "sparse_engine_test_cli_" + name ) )
  {
    std::filesystem::remove_all( path_ );
    std::filesystem::create_directories( path_ );
  }
  ~TempDir() { std::filesystem::remove_all( path_ ); }

  std::string operator/( const std::string& file ) const { return ( path_ / file ).string(); }

private:
  std::filesystem::path path_;
};

const std::vector<std::string> small_model_flags {
  "--layers", "2", "--d-model", "32", "--d-ff", "64", "--heads", "4", "--kv-heads", "2", "--vocab", "50", "--max-seq-len", "64",
};

std::string make_model( const TempDir& dir, const std::string& name = "model.bin", bool homogeneous = false )
{
  std::vector<std::string> args { "gen-model", "--out", dir / name };
  args.insert( args.end(), small_model_flags.begin(), small_model_flags.end() );
  if ( homogeneous ) {
    args.push_back( "--homogeneous-up" );
  }
  REQUIRE( run( args ).code == 0 );
  return dir / name;
}

} // namespace

TEST_CASE( "gen-model" )
{
  const TempDir dir( "gen_model" );
  const std::string a = make_model( dir, "a.bin" );
  const std::string b = make_model( dir, "b.bin" );
  CHECK( slurp( a ) == slurp( b ) );

  const auto r = run( { "gen-model", "--out", dir / "c.bin", "--layers", "1", "--d-model", "16", "--heads", "2",
                        "--kv-heads", "2", "--d-ff", "8", "--vocab", "10", "--seed", "3" } );
  REQUIRE( r.code == 0 );
  const json doc = r.doc();
  CHECK( doc["rng"] == "mt19937_64" );
  CHECK( doc["config"]["d_model"] == 16 );
  CHECK( doc["config"]["seed"] == 3 );
  CHECK( doc["up_profile"] == "heterogeneous" );
  CHECK( doc["parameter_count"] == load_checkpoint( std::filesystem::path( dir / "c.bin" ) ).parameter_count() );

  const auto bad = run( { "gen-model", "--out", dir / "d.bin", "--heads", "16", "--kv-heads", "3" } );
  CHECK( bad.code == 2 );
  CHECK( bad.err.find( "n_kv_heads" ) != std::string::npos );
  CHECK_FALSE( std::filesystem::exists( dir / "d.bin" ) );

  CHECK( run( { "gen-model" } ).code == 2 );
  CHECK( run( { "no-such-command" } ).code == 2 );
  CHECK( run( { "gen-model", "--out", dir / "e.bin", "--d-model", "abc" } ).code == 2 );
  CHECK( run( { "gen-model", "--out", "/nonexistent_dir/x/m.bin", "--layers", "1", "--d-model", "8", "--heads", "2",
                "--kv-heads", "1", "--d-ff", "8", "--vocab", "4" } )
           .code
         == 2 );
}

TEST_CASE( "gen-model defaults" )
{
  const auto r = run( { "gen-model", "--help" } );
  CHECK( r.code == 0 );
  CHECK( r.out.find( "--homogeneous-up" ) != std::string::npos );
  const ModelConfig defaults;
  CHECK( defaults.n_layers == 4 );
  CHECK( defaults.d_model == 1024 );
  CHECK( defaults.d_ff == 4096 );
  CHECK( defaults.n_heads == 16 );
  CHECK( defaults.n_kv_heads == 4 );
}

TEST_CASE( "calibrate" )
{
  const TempDir dir( "calibrate" );
  const std::string model = make_model( dir );

  const auto r = run( { "calibrate", "--model", model, "--out", dir / "t.json", "--mode", "cwt-selective-attn",
                        "--sparsity", "0.5", "--samples", "512", "--threads", "2" } );
  REQUIRE( r.code == 0 );
  const json report = r.doc();
  CHECK( report["samples"] == 512 );
  for ( const auto& row : report["realized_sparsity"] ) {
    CHECK( std::fabs( row["ffn"].get<double>() - 0.5 ) <= 0.02 );
    CHECK( std::fabs( row["attn_input"].get<double>() - 0.5 ) <= 0.02 );
    CHECK( std::fabs( row["attn_output"].get<double>() - 0.5 ) <= 0.02 );
  }

  const json t = json::parse( slurp( dir / "t.json" ) );
  CHECK( t["version"] == 1 );
  CHECK( t["k"] == 0.5 );
  CHECK( t["mode"] == "cwt-selective-attn" );
  CHECK( t["n_layers"] == 2 );
  CHECK( t["d_ff"] == 64 );
  CHECK( t["ffn"].size() == 2 );
  CHECK( t["ffn"][0].size() == 64 );
  CHECK( t["attn"][1].contains( "t_q" ) );
  CHECK( t["attn"][1].contains( "t_o" ) );
  const ThresholdSet set = thresholds_from_json( slurp( dir / "t.json" ) );
  CHECK( set.n_layers() == 2 );

  REQUIRE( run( { "calibrate", "--model", model, "--out", dir / "full.json", "--mode", "cwt-full-attn", "--samples",
                  "256" } )
             .code
           == 0 );
  CHECK( json::parse( slurp( dir / "full.json" ) )["attn"][0].contains( "t_i" ) );

  REQUIRE( run( { "calibrate", "--model", model, "--out", dir / "d.json", "--mode", "dense", "--samples", "64" } ).code
           == 0 );
  for ( const auto& layer : json::parse( slurp( dir / "d.json" ) )["ffn"] ) {
    for ( const auto& v : layer ) {
      CHECK( v == 0.0 );
    }
  }

  REQUIRE( run( { "calibrate", "--model", model, "--out", dir / "k9.json", "--mode", "cwt", "--sparsity", "0.9",
                  "--samples", "512" } )
             .code
           == 0 );
  const ThresholdSet k9 = thresholds_from_json( slurp( dir / "k9.json" ) );
  for ( std::size_t l = 0; l < 2; ++l ) {
    for ( std::size_t i = 0; i < 64; ++i ) {
      CHECK( k9.ffn[l].t[i] >= set.ffn[l].t[i] );
    }
  }

  CHECK( run( { "calibrate", "--model", dir / "missing.bin", "--out", dir / "x.json" } ).code == 2 );
  {
    std::ofstream junk( dir / "junk.bin", std::ios::binary );
    junk << "not a checkpoint";
  }
  CHECK( run( { "calibrate", "--model", dir / "junk.bin", "--out", dir / "x.json" } ).code == 2 );
  CHECK( run( { "calibrate", "--model", model, "--out", dir / "x.json", "--sparsity", "1.5" } ).code == 2 );
  CHECK( run( { "calibrate", "--model", model, "--out", dir / "x.json", "--mode", "sparse" } ).code == 2 );
}

TEST_CASE( "calibrate from a trace file" )
{
  const TempDir dir( "calibrate_trace" );
  const std::string model = make_model( dir );
  REQUIRE( run( { "gen-trace", "--model", model, "--out", dir / "tr.actv", "--samples", "200" } ).code == 0 );
  CHECK( read_traces( std::filesystem::path( dir / "tr.actv" ) ).size() == 8 );

  REQUIRE( run( { "calibrate", "--model", model, "--out", dir / "a.json", "--trace", dir / "tr.actv", "--mode", "cwt" } )
             .code
           == 0 );
  REQUIRE( run( { "calibrate", "--model", model, "--out", dir / "b.json", "--samples", "200", "--mode", "cwt" } ).code
           == 0 );
  CHECK( slurp( dir / "a.json" ) == slurp( dir / "b.json" ) );

  std::vector<std::string> other { "gen-model", "--out", dir / "other.bin", "--layers", "2", "--d-model", "32", "--d-ff",
                                   "32", "--heads", "4", "--kv-heads", "2", "--vocab", "50" };
  REQUIRE( run( other ).code == 0 );
  CHECK( run( { "calibrate", "--model", dir / "other.bin", "--out", dir / "c.json", "--trace", dir / "tr.actv" } ).code
         == 3 );
}

TEST_CASE( "run" )
{
  const TempDir dir( "run" );
  const std::string model = make_model( dir );

  const auto dense = run( { "run", "--model", model, "--mode", "dense", "--gen-len", "16", "--threads", "2" } );
  REQUIRE( dense.code == 0 );
  const json d = dense.doc();
  CHECK( d["timing"]["speedup"] == 1.0 );
  CHECK( d["activated_params"] == 1.0 );
  CHECK( d["tokens"].size() == 16 );
  CHECK( d["tokens"] == d["dense_tokens"] );
  CHECK( d["checksum"] == d["dense_checksum"] );

  REQUIRE( run( { "calibrate", "--model", model, "--out", dir / "t.json", "--samples", "256" } ).code == 0 );
  const auto a = run( { "run", "--model", model, "--thresholds", dir / "t.json", "--gen-len", "16", "--reps", "2",
                        "--csv", dir / "run.csv" } );
  const auto b = run( { "run", "--model", model, "--thresholds", dir / "t.json", "--gen-len", "16", "--threads", "1" } );
  REQUIRE( a.code == 0 );
  REQUIRE( b.code == 0 );
  const json ja = a.doc();
  CHECK( ja["mode"] == "cwt-selective-attn" );
  CHECK( ja["tokens"] == b.doc()["tokens"] );
  CHECK( ja["checksum"] == b.doc()["checksum"] );
  CHECK( ja["activated_params"].get<double>() < 1.0 );
  CHECK( ja["realized_sparsity"]["k"] == 0.0 );
  CHECK( ja["realized_sparsity"]["q"].get<double>() > 0.0 );
  CHECK( ja["timing"]["latency_ms"]["p50"].get<double>() <= ja["timing"]["latency_ms"]["p99"].get<double>() );
  const std::string csv = slurp( dir / "run.csv" );
  CHECK( csv.rfind( "mode,k,activated_params,tokens_per_sec", 0 ) == 0 );

  REQUIRE( run( { "calibrate", "--model", model, "--out", dir / "full.json", "--mode", "cwt-full-attn", "--samples",
                  "64" } )
             .code
           == 0 );
  CHECK( run( { "run", "--model", model, "--thresholds", dir / "full.json", "--mode", "cwt-selective-attn", "--gen-len", "8" } ).code
         == 3 );
  CHECK( run( { "run", "--model", model, "--mode", "cwt", "--gen-len", "8" } ).code == 3 );

  std::vector<std::string> other { "gen-model", "--out", dir / "other.bin", "--layers", "3", "--d-model", "32", "--d-ff",
                                   "64", "--heads", "4", "--kv-heads", "2", "--vocab", "50" };
  REQUIRE( run( other ).code == 0 );
  CHECK( run( { "run", "--model", dir / "other.bin", "--thresholds", dir / "t.json", "--gen-len", "8" } ).code == 3 );
  CHECK( run( { "run", "--model", model, "--gen-len", "0" } ).code == 2 );
  CHECK( run( { "run", "--model", model, "--gen-len", "100" } ).code == 2 );
  {
    std::ofstream junk( dir / "junk.json" );
    junk << "{ not json";
  }
  CHECK( run( { "run", "--model", model, "--thresholds", dir / "junk.json", "--gen-len", "8" } ).code == 2 );
}

TEST_CASE( "bench-kernels" )
{
  const auto r = run( { "bench-kernels", "--dims", "64x96,128x32", "--sparsity", "0,0.5,0.9", "--reps", "3",
                        "--threads", "2" } );
  REQUIRE( r.code == 0 );
  const json doc = r.doc();
  CHECK( doc["records"].size() == 2 * 3 * 3 );
  for ( std::size_t i = 0; i < doc["records"].size(); i += 3 ) {
    const auto& sp = doc["records"][i];
    const auto& de = doc["records"][i + 2];
    CHECK( sp["kernel"] == "spvmm" );
    CHECK( de["kernel"] == "dense" );
    CHECK( sp["checksum"] == de["checksum"] );
    CHECK( sp["timing"]["min_ns"].get<std::int64_t>() > 0 );
  }

  const auto csv = run( { "bench-kernels", "--dims", "16x16", "--sparsity", "0.5", "--reps", "2", "--csv", "-" } );
  REQUIRE( csv.code == 0 );
  CHECK( csv.out.rfind( "kernel,K,N,sparsity,block_size,threads,reps,min_ns,median_ns,checksum\n", 0 ) == 0 );
  CHECK( std::count( csv.out.begin(), csv.out.end(), '\n' ) == 4 );

  CHECK( run( { "bench-kernels", "--dims", "16y16" } ).code == 2 );
  CHECK( run( { "bench-kernels", "--dims", "16x16", "--kernels", "gemm" } ).code == 2 );
  CHECK( run( { "bench-kernels", "--dims", "16x16", "--sparsity", "2" } ).code == 2 );
  CHECK( run( { "bench-kernels", "--dims", "16x16", "--block-size", "0" } ).code == 2 );
}

TEST_CASE( "bench-kernels: spvmm at 0.9 sparsity beats 0.0 at 4096x4096" )
{
  const auto r = run( { "bench-kernels", "--dims", "4096x4096", "--sparsity", "0,0.9", "--kernels", "spvmm", "--reps",
                        "5" } );
  REQUIRE( r.code == 0 );
  const json doc = r.doc();
  const auto t0 = doc["records"][0]["timing"]["min_ns"].get<double>();
  const auto t9 = doc["records"][1]["timing"]["min_ns"].get<double>();
  MESSAGE( "spvmm 4096x4096 min ns: s=0 " << t0 << ", s=0.9 " << t9 );
  CHECK( t9 < t0 );
}

TEST_CASE( "compare-error" )
{
  const TempDir dir( "compare" );
  const std::string model = make_model( dir );
  REQUIRE( run( { "gen-trace", "--model", model, "--out", dir / "tr.actv", "--samples", "256" } ).code == 0 );

  const auto r = run( { "compare-error", "--trace", dir / "tr.actv", "--model", model } );
  REQUIRE( r.code == 0 );
  const json doc = r.doc();
  CHECK( doc["rows"].size() == 15 );
  CHECK( doc["layers"] == 2 );
  for ( const auto& row : doc["rows"] ) {
    if ( row["k"] == 0.0 ) {
      CHECK( row["realized_sparsity"].get<double>() <= 0.01 );
      if ( row["method"] == "oracle" ) {
        CHECK( row["mean_error"] == 0.0 );
      }
    }
    if ( row["method"] == "oracle" ) {
      CHECK( row["mean_error"] == row["matched_oracle_error"] );
    }
  }
  const auto again = run( { "compare-error", "--trace", dir / "tr.actv", "--model", model } );
  CHECK( again.out == r.out );

  const auto csv = run( { "compare-error", "--trace", dir / "tr.actv", "--k-grid", "0.5", "--methods", "cwt,cats",
                          "--layer", "1", "--csv", "-" } );
  REQUIRE( csv.code == 0 );
  CHECK( csv.out.rfind( "k,method,realized_sparsity,mean_error,matched_oracle_error,matched_budget_error\n", 0 ) == 0 );
  CHECK( std::count( csv.out.begin(), csv.out.end(), '\n' ) == 3 );

  {
    std::ofstream junk( dir / "junk.actv", std::ios::binary );
    junk << "ACTVxxxx";
  }
  CHECK( run( { "compare-error", "--trace", dir / "junk.actv" } ).code == 2 );
  CHECK( run( { "compare-error", "--trace", dir / "missing.actv" } ).code == 2 );
  CHECK( run( { "compare-error", "--trace", dir / "tr.actv", "--methods", "magic" } ).code == 2 );
  CHECK( run( { "compare-error", "--trace", dir / "tr.actv", "--calibration-fraction", "1.5" } ).code == 2 );
  CHECK( run( { "compare-error", "--trace", dir / "tr.actv", "--layer", "7" } ).code == 3 );

  std::vector<std::string> other { "gen-model", "--out", dir / "other.bin", "--layers", "2", "--d-model", "32", "--d-ff",
                                   "48", "--heads", "4", "--kv-heads", "2", "--vocab", "50" };
  REQUIRE( run( other ).code == 0 );
  CHECK( run( { "compare-error", "--trace", dir / "tr.actv", "--model", dir / "other.bin" } ).code == 3 );
}

TEST_CASE( "compare-error: homogeneous up channels make CWT and CATS select alike" )
{
  const TempDir dir( "homogeneous" );
  const std::string model = make_model( dir, "h.bin", true );
  REQUIRE( run( { "gen-trace", "--model", model, "--out", dir / "tr.actv", "--samples", "256" } ).code == 0 );
  const auto r = run( { "compare-error", "--trace", dir / "tr.actv", "--methods", "cwt,cats", "--k-grid", "0.3,0.5,0.7" } );
  REQUIRE( r.code == 0 );
  const json rows = r.doc()["rows"];
  REQUIRE( rows.size() == 6 );
  for ( std::size_t i = 0; i < rows.size(); i += 2 ) {
    const double cwt = rows[i]["matched_budget_error"].get<double>();
    const double cats = rows[i + 1]["matched_budget_error"].get<double>();
    CHECK( std::fabs( cwt - cats ) <= 1e-6 * std::max( 1.0, std::fabs( cats ) ) );
  }
}
