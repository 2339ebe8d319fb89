#include "cli.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <stdexcept>

#include <CLI11.hpp>
#include <json.hpp>

#include "sparse_engine/calibrate.hpp"
#include "sparse_engine/engine.hpp"
#include "sparse_engine/error_study.hpp"
#include "sparse_engine/errors.hpp"
#include "sparse_engine/kernels.hpp"
#include "sparse_engine/model.hpp"

namespace sparse_engine::cli {

using nlohmann::ordered_json;

namespace {

struct KernelFlags
{
  std::size_t block_size = 64;
  std::size_t threads = kernels::default_thread_count();

  void add( CLI::App& cmd )
  {
    cmd.add_option( "--block-size", block_size, "Output block size B of the kernels" )->capture_default_str();
    cmd.add_option( "--threads", threads, "Kernel worker threads (default: SPARSE_ENGINE_THREADS or all cores)" )
      ->capture_default_str();
  }

  kernels::KernelConfig config() const
  {
    kernels::KernelConfig cfg { block_size, threads };
    cfg.validate();
    return cfg;
  }
};

std::string read_text( const std::string& path )
{
  std::ifstream in( path, std::ios::binary );
  if ( !in ) {
    throw IoError( "cannot open '" + path + "'" );
  }
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_text( const std::string& path, const std::string& text )
{
  std::ofstream out( path, std::ios::binary | std::ios::trunc );
  out << text;
  out.flush();
  if ( !out ) {
    throw IoError( "cannot write '" + path + "'" );
  }
}

ThresholdSet load_thresholds( const std::string& path )
{
  const std::string text = read_text( path );
  try {
    return thresholds_from_json( text );
  } catch ( const std::invalid_argument& e ) {
    throw FormatError( path + ": " + e.what() );
  }
}

std::vector<ActivationTrace> load_traces( const std::string& path )
{
  return read_traces( std::filesystem::path( path ) );
}

ordered_json config_json( const ModelConfig& c )
{
  return { { "n_layers", c.n_layers },       { "d_model", c.d_model },        { "d_ff", c.d_ff },
           { "n_heads", c.n_heads },         { "n_kv_heads", c.n_kv_heads },  { "vocab_size", c.vocab_size },
           { "max_seq_len", c.max_seq_len }, { "seed", c.seed } };
}

std::vector<std::uint32_t> random_prompt( std::uint32_t vocab, std::size_t len, std::uint64_t seed )
{
  Rng rng( seed );
  std::vector<std::uint32_t> prompt( len );
  for ( auto& t : prompt ) {
    t = static_cast<std::uint32_t>( rng.below( vocab ) );
  }
  return prompt;
}

ordered_json latency_json( std::vector<std::int64_t> ns )
{
  std::sort( ns.begin(), ns.end() );
  auto pct = [&]( double p ) {
    const auto rank = static_cast<std::size_t>( std::ceil( p * static_cast<double>( ns.size() ) ) );
    return static_cast<double>( ns[std::clamp<std::size_t>( rank, 1, ns.size() ) - 1] ) * 1e-6;
  };
  return { { "min", pct( 0.0 ) }, { "p50", pct( 0.5 ) }, { "p90", pct( 0.9 ) }, { "p99", pct( 0.99 ) },
           { "max", pct( 1.0 ) } };
}

void check_ks( const std::vector<double>& ks )
{
  for ( double k : ks ) {
    if ( !( k >= 0.0 && k <= 1.0 ) ) {
      throw std::invalid_argument( "sparsity levels must lie in [0, 1]" );
    }
  }
}

// ---------------------------------------------------------------------------

struct GenModel
{
  ModelConfig config;
  bool homogeneous = false;
  std::string out;

  void add( CLI::App& app )
  {
    auto* cmd = app.add_subcommand( "gen-model", "Write a synthetic TGSM checkpoint" );
    cmd->add_option( "--out", out, "Checkpoint path" )->required();
    cmd->add_option( "--layers", config.n_layers )->capture_default_str();
    cmd->add_option( "--d-model", config.d_model )->capture_default_str();
    cmd->add_option( "--d-ff", config.d_ff )->capture_default_str();
    cmd->add_option( "--heads", config.n_heads )->capture_default_str();
    cmd->add_option( "--kv-heads", config.n_kv_heads )->capture_default_str();
    cmd->add_option( "--vocab", config.vocab_size )->capture_default_str();
    cmd->add_option( "--max-seq-len", config.max_seq_len )->capture_default_str();
    cmd->add_option( "--seed", config.seed )->capture_default_str();
    cmd->add_flag( "--homogeneous-up", homogeneous, "Give every up-projection channel the same magnitude" );
  }

  int run( std::ostream& out_stream, std::ostream& log ) const
  {
    config.validate();
    const ToyModel model
      = generate_model( config, homogeneous ? UpChannelProfile::homogeneous : UpChannelProfile::heterogeneous );
    save_checkpoint( model, std::filesystem::path( out ) );
    log << "wrote " << out << " (" << model.parameter_count() << " parameters)\n";
    ordered_json report { { "command", "gen-model" },
                          { "rng", Rng::algorithm },
                          { "out", out },
                          { "config", config_json( config ) },
                          { "up_profile", homogeneous ? "homogeneous" : "heterogeneous" },
                          { "parameter_count", model.parameter_count() } };
    out_stream << report.dump( 2 ) << '\n';
    return exit_ok;
  }
};

struct GenTrace
{
  std::string model_path;
  std::string out;
  std::size_t samples = default_calibration_samples;
  std::size_t seq_len = default_sequence_length;
  std::uint64_t seed = 0;
  KernelFlags kernel;

  void add( CLI::App& app )
  {
    auto* cmd = app.add_subcommand( "gen-trace", "Record dense-pass activation traces of every layer and site" );
    cmd->add_option( "--model", model_path, "TGSM checkpoint" )->required();
    cmd->add_option( "--out", out, "ACTV trace path" )->required();
    cmd->add_option( "--samples", samples, "Token positions to record" )->capture_default_str();
    cmd->add_option( "--seq-len", seq_len, "Length of each synthetic token sequence" )->capture_default_str();
    cmd->add_option( "--seed", seed, "Seed of the synthetic token stream" )->capture_default_str();
    kernel.add( *cmd );
  }

  int run( std::ostream& out_stream, std::ostream& log ) const
  {
    const ToyModel model = load_checkpoint( std::filesystem::path( model_path ) );
    const Engine engine( model, kernel.config() );
    Rng rng( seed );
    const auto sequences = synthetic_sequences( model.config.vocab_size, samples, seq_len, rng );
    const TraceBundle bundle = collect_traces( engine, sequences );
    const auto records = bundle.flatten();
    write_traces( records, std::filesystem::path( out ) );
    log << "wrote " << records.size() << " trace records to " << out << '\n';
    ordered_json report { { "command", "gen-trace" }, { "rng", Rng::algorithm },     { "model", model_path },
                          { "out", out },             { "samples", samples },        { "seq_len", seq_len },
                          { "seed", seed },           { "records", records.size() } };
    out_stream << report.dump( 2 ) << '\n';
    return exit_ok;
  }
};

struct Calibrate
{
  std::string model_path;
  std::string trace_path;
  std::string out;
  std::string mode = "cwt-selective-attn";
  double k = 0.5;
  std::size_t samples = default_calibration_samples;
  std::size_t seq_len = default_sequence_length;
  std::uint64_t seed = 0;
  KernelFlags kernel;

  void add( CLI::App& app )
  {
    auto* cmd = app.add_subcommand( "calibrate", "Compute a threshold set for one mode and sparsity level" );
    cmd->add_option( "--model", model_path, "TGSM checkpoint" )->required();
    cmd->add_option( "--out", out, "Threshold JSON path" )->required();
    cmd->add_option( "--mode", mode, "dense|cats|cwt|cwt-full-attn|cwt-selective-attn" )->capture_default_str();
    cmd->add_option( "--sparsity", k, "Target sparsity level k" )->capture_default_str();
    cmd->add_option( "--samples", samples, "Calibration token positions" )->capture_default_str();
    cmd->add_option( "--seq-len", seq_len, "Length of each synthetic token sequence" )->capture_default_str();
    cmd->add_option( "--seed", seed, "Seed of the synthetic token stream" )->capture_default_str();
    cmd->add_option( "--trace", trace_path, "Calibrate from an ACTV trace file instead of sampling" );
    kernel.add( *cmd );
  }

  int run( std::ostream& out_stream, std::ostream& log ) const
  {
    const Mode m = mode_from_string( mode );
    check_ks( { k } );
    const ToyModel model = load_checkpoint( std::filesystem::path( model_path ) );
    TraceBundle bundle;
    if ( !trace_path.empty() ) {
      try {
        bundle = TraceBundle::from_traces( load_traces( trace_path ) );
      } catch ( const std::invalid_argument& e ) {
        throw FormatError( trace_path + ": " + e.what() );
      }
      if ( bundle.n_layers() != model.config.n_layers || bundle.at( 0, Site::ffn_gate ).dim() != model.config.d_ff
           || bundle.at( 0, Site::attn_query_input ).dim() != model.config.d_model ) {
        throw MismatchError( "trace shapes do not match the model" );
      }
    } else {
      const Engine engine( model, kernel.config() );
      Rng rng( seed );
      bundle = collect_traces( engine, synthetic_sequences( model.config.vocab_size, samples, seq_len, rng ) );
    }
    const ThresholdSet set = thresholds_from_traces( bundle, k, m );
    write_text( out, thresholds_to_json( set ) );

    ordered_json layers = ordered_json::array();
    double ffn_sum = 0.0;
    for ( std::size_t l = 0; l < set.n_layers(); ++l ) {
      ordered_json row { { "layer", l } };
      if ( sparsifies_ffn( m ) ) {
        const double s = realized_sparsity( bundle.at( l, Site::ffn_gate ), set.ffn[l] );
        ffn_sum += s;
        row["ffn"] = s;
      }
      if ( sparsifies_attention( m ) ) {
        row["attn_input"] = realized_sparsity( bundle.at( l, Site::attn_query_input ), set.attn[l].input );
        row["attn_output"] = realized_sparsity( bundle.at( l, Site::attn_output_input ), set.attn[l].output );
      }
      layers.push_back( row );
      log << "layer " << l << ": " << row.dump() << '\n';
    }
    ordered_json report { { "command", "calibrate" },
                          { "rng", Rng::algorithm },
                          { "model", model_path },
                          { "trace", trace_path.empty() ? ordered_json( nullptr ) : ordered_json( trace_path ) },
                          { "out", out },
                          { "mode", to_string( m ) },
                          { "k", k },
                          { "samples", bundle.n_samples() },
                          { "seed", seed },
                          { "realized_sparsity", layers } };
    if ( sparsifies_ffn( m ) ) {
      report["mean_ffn_sparsity"] = ffn_sum / static_cast<double>( set.n_layers() );
    }
    out_stream << report.dump( 2 ) << '\n';
    return exit_ok;
  }
};

struct Run
{
  std::string model_path;
  std::string thresholds_path;
  std::string mode;
  std::size_t prompt_len = 16;
  std::size_t gen_len = 128;
  std::size_t reps = 1;
  std::uint64_t seed = 0;
  std::string csv;
  KernelFlags kernel;

  void add( CLI::App& app )
  {
    auto* cmd = app.add_subcommand( "run", "Greedy decode in one mode and against a dense baseline" );
    cmd->add_option( "--model", model_path, "TGSM checkpoint" )->required();
    cmd->add_option( "--thresholds", thresholds_path, "Threshold JSON (required unless --mode dense)" );
    cmd->add_option( "--mode", mode, "Mode to run (default: the threshold file's mode, else dense)" );
    cmd->add_option( "--prompt-len", prompt_len )->capture_default_str();
    cmd->add_option( "--gen-len", gen_len )->capture_default_str();
    cmd->add_option( "--reps", reps, "Decode repetitions per mode" )->capture_default_str();
    cmd->add_option( "--seed", seed, "Seed of the synthetic prompt" )->capture_default_str();
    cmd->add_option( "--csv", csv, "Also write a one-row CSV summary" );
    kernel.add( *cmd );
  }

  int run( std::ostream& out_stream, std::ostream& log ) const
  {
    if ( reps == 0 || prompt_len == 0 || gen_len == 0 ) {
      throw std::invalid_argument( "--reps, --prompt-len and --gen-len must be positive" );
    }
    const ToyModel model = load_checkpoint( std::filesystem::path( model_path ) );
    if ( prompt_len - 1 + gen_len > model.config.max_seq_len ) {
      throw std::invalid_argument( "--prompt-len + --gen-len - 1 exceeds the model's max_seq_len of "
                                   + std::to_string( model.config.max_seq_len ) );
    }
    std::optional<ThresholdSet> set;
    if ( !thresholds_path.empty() ) {
      set = load_thresholds( thresholds_path );
    }
    const Mode m = !mode.empty() ? mode_from_string( mode ) : set ? set->mode : Mode::dense;
    const ThresholdSet* thresholds = set ? &*set : nullptr;
    check_thresholds( model.config, m, m == Mode::dense ? nullptr : thresholds );

    const Engine engine( model, kernel.config() );
    const auto prompt = random_prompt( model.config.vocab_size, prompt_len, seed );
    const DecodeRequest dense_req { prompt, gen_len, Mode::dense, nullptr, false };
    const DecodeRequest sparse_req { prompt, gen_len, m, thresholds, false };

    std::vector<DecodeResult> dense_runs;
    std::vector<DecodeResult> sparse_runs;
    for ( std::size_t r = 0; r < reps; ++r ) {
      dense_runs.push_back( decode( engine, dense_req ) );
      if ( m != Mode::dense ) {
        sparse_runs.push_back( decode( engine, sparse_req ) );
      }
      log << "rep " << r << ": dense " << dense_runs.back().tokens_per_sec() << " tok/s";
      if ( m != Mode::dense ) {
        log << ", " << to_string( m ) << ' ' << sparse_runs.back().tokens_per_sec() << " tok/s";
      }
      log << '\n';
    }
    const auto& runs = m == Mode::dense ? dense_runs : sparse_runs;

    auto throughput = []( const std::vector<DecodeResult>& rs, std::vector<std::int64_t>& all_ns ) {
      double tokens = 0.0;
      double ns = 0.0;
      for ( const auto& r : rs ) {
        tokens += static_cast<double>( r.tokens.size() );
        for ( auto t : r.step_ns ) {
          ns += static_cast<double>( t );
          all_ns.push_back( t );
        }
      }
      return tokens * 1e9 / ns;
    };
    std::vector<std::int64_t> dense_ns;
    std::vector<std::int64_t> mode_ns;
    const double dense_tps = throughput( dense_runs, dense_ns );
    const double mode_tps = m == Mode::dense ? dense_tps : throughput( sparse_runs, mode_ns );
    if ( m == Mode::dense ) {
      mode_ns = dense_ns;
    }
    const double speedup = m == Mode::dense ? 1.0 : mode_tps / dense_tps;

    const auto& result = runs.front();
    for ( const auto& r : runs ) {
      if ( r.checksum != result.checksum ) {
        throw std::logic_error( "decode is not deterministic across repetitions" );
      }
    }
    const double ap = activated_params( model.config, result.activity );
    ordered_json sparsity;
    for ( auto [name, p] : { std::pair { "q", Projection::q }, std::pair { "k", Projection::k },
                             std::pair { "v", Projection::v }, std::pair { "o", Projection::o },
                             std::pair { "gate", Projection::gate }, std::pair { "up", Projection::up },
                             std::pair { "down", Projection::down } } ) {
      sparsity[name] = result.activity.sparsity( p );
    }

    ordered_json report { { "command", "run" },
                          { "rng", Rng::algorithm },
                          { "model", model_path },
                          { "thresholds", thresholds_path.empty() ? ordered_json( nullptr ) : ordered_json( thresholds_path ) },
                          { "mode", to_string( m ) },
                          { "k", set ? set->k : 0.0 },
                          { "prompt_len", prompt_len },
                          { "gen_len", gen_len },
                          { "reps", reps },
                          { "seed", seed },
                          { "block_size", kernel.block_size },
                          { "activated_params", ap },
                          { "realized_sparsity", sparsity },
                          { "kernel_weight_reads", result.counters.weight_reads },
                          { "tokens", result.tokens },
                          { "checksum", result.checksum },
                          { "dense_tokens", dense_runs.front().tokens },
                          { "dense_checksum", dense_runs.front().checksum },
                          { "timing",
                            { { "threads", kernel.threads },
                              { "tokens_per_sec", mode_tps },
                              { "dense_tokens_per_sec", dense_tps },
                              { "speedup", speedup },
                              { "latency_ms", latency_json( mode_ns ) },
                              { "dense_latency_ms", latency_json( dense_ns ) } } } };
    out_stream << report.dump( 2 ) << '\n';

    if ( !csv.empty() ) {
      const auto& lat = report["timing"]["latency_ms"];
      std::ostringstream row;
      row.precision( 17 );
      row << "mode,k,activated_params,tokens_per_sec,dense_tokens_per_sec,speedup,p50_ms,p90_ms,p99_ms\n"
          << to_string( m ) << ',' << report["k"].get<double>() << ',' << ap << ',' << mode_tps << ',' << dense_tps
          << ',' << speedup << ',' << lat["p50"].get<double>() << ',' << lat["p90"].get<double>() << ','
          << lat["p99"].get<double>() << '\n';
      write_text( csv, row.str() );
    }
    return exit_ok;
  }
};

struct BenchKernels
{
  std::vector<std::string> dims { "4096x4096", "4096x11008" };
  std::vector<double> sparsities { 0.0, 0.25, 0.5, 0.75, 0.9 };
  std::vector<std::string> kinds { "spvmm", "vmmsp", "dense" };
  std::size_t reps = 20;
  std::uint64_t seed = 0;
  std::string csv;
  KernelFlags kernel;

  void add( CLI::App& app )
  {
    auto* cmd = app.add_subcommand( "bench-kernels", "Time the kernels over shapes and sparsity levels" );
    cmd->add_option( "--dims", dims, "Comma-separated KxN shapes" )->delimiter( ',' )->capture_default_str();
    cmd->add_option( "--sparsity", sparsities, "Comma-separated sparsity levels" )
      ->delimiter( ',' )
      ->capture_default_str();
    cmd->add_option( "--kernels", kinds, "Comma-separated kernels: spvmm,vmmsp,dense" )
      ->delimiter( ',' )
      ->capture_default_str();
    cmd->add_option( "--reps", reps, "Timed repetitions per record" )->capture_default_str();
    cmd->add_option( "--seed", seed, "Seed of weights and inputs" )->capture_default_str();
    cmd->add_option( "--csv", csv, "Write the records as CSV to this path ('-' for stdout instead of JSON)" );
    kernel.add( *cmd );
  }

  int run( std::ostream& out_stream, std::ostream& log ) const
  {
    if ( reps == 0 ) {
      throw std::invalid_argument( "--reps must be positive" );
    }
    check_ks( sparsities );
    const auto cfg = kernel.config();
    std::vector<kernels::KernelKind> parsed_kinds;
    for ( const auto& k : kinds ) {
      parsed_kinds.push_back( kernels::kernel_kind_from_string( k ) );
    }
    std::vector<kernels::BenchRecord> records;
    Rng rng( seed );
    for ( const auto& shape : dims ) {
      std::size_t K = 0;
      std::size_t N = 0;
      char x = 0;
      std::istringstream in( shape );
      if ( !( in >> K >> x >> N ) || x != 'x' || K == 0 || N == 0 || !in.eof() ) {
        throw std::invalid_argument( "bad shape '" + shape + "', expected KxN" );
      }
      const kernels::BenchFixture fixture( K, N, rng );
      for ( std::size_t si = 0; si < sparsities.size(); ++si ) {
        const std::uint64_t input_seed = seed * 1000003ull + si + 1;
        for ( auto kind : parsed_kinds ) {
          records.push_back( kernels::bench_kernel( kind, fixture, sparsities[si], reps, input_seed, cfg ) );
          log << kernels::to_csv_row( records.back() ) << '\n';
        }
      }
    }

    std::ostringstream table;
    table << kernels::bench_csv_header << '\n';
    for ( const auto& r : records ) {
      table << kernels::to_csv_row( r ) << '\n';
    }
    if ( csv == "-" ) {
      out_stream << table.str();
      return exit_ok;
    }
    if ( !csv.empty() ) {
      write_text( csv, table.str() );
    }
    ordered_json rows = ordered_json::array();
    for ( const auto& r : records ) {
      rows.push_back( { { "kernel", kernels::to_string( r.kernel ) },
                        { "K", r.K },
                        { "N", r.N },
                        { "sparsity", r.sparsity },
                        { "block_size", r.block_size },
                        { "threads", r.threads },
                        { "reps", r.reps },
                        { "checksum", r.checksum },
                        { "timing", { { "min_ns", r.min_ns }, { "median_ns", r.median_ns } } } } );
    }
    ordered_json report { { "command", "bench-kernels" }, { "rng", Rng::algorithm }, { "seed", seed },
                          { "records", rows } };
    out_stream << report.dump( 2 ) << '\n';
    return exit_ok;
  }
};

struct CompareError
{
  std::string trace_path;
  std::string model_path;
  std::vector<double> ks { 0.0, 0.3, 0.5, 0.7, 0.9 };
  std::vector<std::string> methods { "oracle", "cwt", "cats" };
  double calibration_fraction = 0.5;
  int layer = -1;
  std::string csv;

  void add( CLI::App& app )
  {
    auto* cmd = app.add_subcommand( "compare-error", "Pruning error of oracle, CWT and CATS selection across k" );
    cmd->add_option( "--trace", trace_path, "ACTV trace file with ffn_gate and ffn_up records" )->required();
    cmd->add_option( "--model", model_path, "Checkpoint the trace came from (checks d_ff)" );
    cmd->add_option( "--k-grid", ks, "Comma-separated sparsity levels" )->delimiter( ',' )->capture_default_str();
    cmd->add_option( "--methods", methods, "Comma-separated: oracle,cwt,cats" )->delimiter( ',' )->capture_default_str();
    cmd->add_option( "--calibration-fraction", calibration_fraction, "Leading share of samples used to calibrate" )
      ->capture_default_str();
    cmd->add_option( "--layer", layer, "Only this layer (default: all layers pooled)" );
    cmd->add_option( "--csv", csv, "Write the rows as CSV to this path ('-' for stdout instead of JSON)" );
  }

  int run( std::ostream& out_stream, std::ostream& log ) const
  {
    check_ks( ks );
    if ( !( calibration_fraction > 0.0 && calibration_fraction < 1.0 ) ) {
      throw std::invalid_argument( "--calibration-fraction must lie in (0, 1)" );
    }
    std::vector<PruneMethod> parsed;
    for ( const auto& m : methods ) {
      parsed.push_back( prune_method_from_string( m ) );
    }
    const auto traces = load_traces( trace_path );
    std::vector<FfnTracePair> pairs;
    std::uint32_t max_layer = 0;
    for ( const auto& t : traces ) {
      max_layer = std::max( max_layer, t.layer_index );
    }
    for ( std::uint32_t l = 0; l <= max_layer; ++l ) {
      if ( layer >= 0 && static_cast<std::uint32_t>( layer ) != l ) {
        continue;
      }
      FfnTracePair pair;
      for ( const auto& t : traces ) {
        if ( t.layer_index == l && t.site == Site::ffn_gate ) {
          pair.gate = &t;
        } else if ( t.layer_index == l && t.site == Site::ffn_up ) {
          pair.up = &t;
        }
      }
      if ( pair.gate && pair.up ) {
        pairs.push_back( pair );
      }
    }
    if ( pairs.empty() ) {
      throw MismatchError( "trace holds no layer with both ffn_gate and ffn_up records" );
    }
    if ( !model_path.empty() ) {
      const ToyModel model = load_checkpoint( std::filesystem::path( model_path ) );
      for ( const auto& p : pairs ) {
        if ( p.gate->dim() != model.config.d_ff || p.gate->layer_index >= model.config.n_layers ) {
          throw MismatchError( "trace layer " + std::to_string( p.gate->layer_index ) + " does not fit the model" );
        }
      }
    }
    std::vector<ErrorRow> rows;
    try {
      rows = compare_error( pairs, ks, parsed, calibration_fraction );
    } catch ( const std::invalid_argument& e ) {
      throw MismatchError( e.what() );
    }

    std::ostringstream table;
    table << error_csv_header() << '\n';
    for ( const auto& r : rows ) {
      table << to_csv_row( r ) << '\n';
      log << to_csv_row( r ) << '\n';
    }
    if ( csv == "-" ) {
      out_stream << table.str();
      return exit_ok;
    }
    if ( !csv.empty() ) {
      write_text( csv, table.str() );
    }
    ordered_json out_rows = ordered_json::array();
    for ( const auto& r : rows ) {
      out_rows.push_back( { { "k", r.k },
                            { "method", to_string( r.method ) },
                            { "realized_sparsity", r.realized_sparsity },
                            { "mean_error", r.mean_error },
                            { "matched_oracle_error", r.matched_oracle_error },
                            { "matched_budget_error", r.matched_budget_error } } );
    }
    ordered_json report { { "command", "compare-error" },
                          { "trace", trace_path },
                          { "layers", pairs.size() },
                          { "calibration_fraction", calibration_fraction },
                          { "rows", out_rows } };
    out_stream << report.dump( 2 ) << '\n';
    return exit_ok;
  }
};

} // namespace

int run( const std::vector<std::string>& args, std::ostream& out, std::ostream& err )
{
  CLI::App app { "Activation-sparse inference engine: models, calibration, decoding and kernel benchmarks",
                 "sparse-engine" };
  app.require_subcommand( 1 );
  GenModel gen_model;
  GenTrace gen_trace;
  Calibrate calibrate_cmd;
  Run run_cmd;
  BenchKernels bench;
  CompareError compare;
  gen_model.add( app );
  gen_trace.add( app );
  calibrate_cmd.add( app );
  run_cmd.add( app );
  bench.add( app );
  compare.add( app );

  try {
    std::vector<std::string> reversed( args.rbegin(), args.rend() );
    app.parse( reversed );
  } catch ( const CLI::ParseError& e ) {
    const int code = app.exit( e, out, err );
    return code == 0 ? exit_ok : exit_io;
  }

  try {
    const std::string name = app.get_subcommands().front()->get_name();
    if ( name == "gen-model" ) {
      return gen_model.run( out, err );
    }
    if ( name == "gen-trace" ) {
      return gen_trace.run( out, err );
    }
    if ( name == "calibrate" ) {
      return calibrate_cmd.run( out, err );
    }
    if ( name == "run" ) {
      return run_cmd.run( out, err );
    }
    if ( name == "bench-kernels" ) {
      return bench.run( out, err );
    }
    return compare.run( out, err );
  } catch ( const MismatchError& e ) {
    err << "error: " << e.what() << '\n';
    return exit_mismatch;
  } catch ( const IoError& e ) {
    err << "error: " << e.what() << '\n';
    return exit_io;
  } catch ( const FormatError& e ) {
    err << "error: " << e.what() << '\n';
    return exit_io;
  } catch ( const std::invalid_argument& e ) {
    err << "error: " << e.what() << '\n';
    return exit_io;
  } catch ( const std::exception& e ) {
    err << "internal error: " << e.what() << '\n';
    return exit_internal;
  }
}

} // namespace sparse_engine::cli
