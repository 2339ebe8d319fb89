#include "sparse_engine/error_study.hpp"

#include <cmath>
#include <cstdio>
#include <stdexcept>

#include "sparse_engine/oracle.hpp"
#include "sparse_engine/sparsify.hpp"

namespace sparse_engine {

std::string_view to_string( PruneMethod m )
{
  switch ( m ) {
    case PruneMethod::oracle: return "oracle";
    case PruneMethod::cwt: return "cwt";
    case PruneMethod::cats: return "cats";
  }
  return "unknown";
}

PruneMethod prune_method_from_string( std::string_view name )
{
  for ( PruneMethod m : { PruneMethod::oracle, PruneMethod::cwt, PruneMethod::cats } ) {
    if ( to_string( m ) == name ) {
      return m;
    }
  }
  throw std::invalid_argument( "unknown method '" + std::string( name ) + "'" );
}

namespace {

struct Sums
{
  double pruned = 0.0;
  double error = 0.0;
  double matched_oracle = 0.0;
  double matched_budget = 0.0;
};

std::size_t split_point( std::size_t n, double fraction )
{
  const auto cut = static_cast<std::size_t>( std::floor( fraction * static_cast<double>( n ) ) );
  if ( cut == 0 || cut >= n ) {
    throw std::invalid_argument( "compare_error: need samples on both sides of the calibration split, have "
                                 + std::to_string( n ) );
  }
  return cut;
}

} // namespace

std::vector<ErrorRow> compare_error( std::span<const FfnTracePair> layers,
                                     std::span<const double> ks,
                                     std::span<const PruneMethod> methods,
                                     double calibration_fraction )
{
  if ( layers.empty() ) {
    throw std::invalid_argument( "compare_error: no layers" );
  }
  if ( !( calibration_fraction > 0.0 && calibration_fraction < 1.0 ) ) {
    throw std::invalid_argument( "compare_error: calibration fraction must lie in (0, 1)" );
  }
  for ( const auto& p : layers ) {
    if ( !p.gate || !p.up || p.gate->site != Site::ffn_gate || p.up->site != Site::ffn_up
         || p.gate->n_samples() != p.up->n_samples() || p.gate->dim() != p.up->dim() ) {
      throw std::invalid_argument( "compare_error: each layer needs matching ffn_gate and ffn_up traces" );
    }
  }

  std::vector<ErrorRow> rows;
  for ( double k : ks ) {
    std::vector<Sums> sums( methods.size() );
    double evaluated = 0.0;
    double elements = 0.0;
    for ( const auto& pair : layers ) {
      const std::size_t n = pair.gate->n_samples();
      const std::size_t d = pair.gate->dim();
      const std::size_t cut = split_point( n, calibration_fraction );
      const ActivationTrace gate_cal = pair.gate->slice( 0, cut );
      const ChannelStats stats = channel_stats( pair.up->slice( 0, cut ) );
      const FfnThresholds cwt_t = channel_thresholds( estimated_scores( gate_cal, stats ), stats, k );
      const float cats_t = tensor_threshold( gate_cal, k );
      const std::size_t oracle_budget = prune_count( k, d );

      std::vector<double> cwt_rank( d );
      std::vector<double> cats_rank( d );
      for ( std::size_t j = cut; j < n; ++j ) {
        const auto a_gate = pair.gate->rows.row( j );
        const auto a_up = pair.up->rows.row( j );
        const PruneSet cwt_set = PruneSet::from_zeros( cwt_apply( a_gate, cwt_t.t, cwt_t.always_prune ).values );
        const PruneSet cats_set = PruneSet::from_zeros( cats_apply( a_gate, cats_t ).values );
        const std::size_t budget = cwt_set.size();
        for ( std::size_t i = 0; i < d; ++i ) {
          const double g = std::fabs( static_cast<double>( a_gate[i] ) );
          cwt_rank[i] = cwt_t.always_prune[i] ? -1.0 : static_cast<double>( stats.mean_abs_up[i] ) * g;
          cats_rank[i] = g;
        }
        auto err = [&]( const PruneSet& p ) { return ffn_objective( a_up, a_gate, p ); };
        auto oracle_at = [&]( std::size_t m ) { return err( oracle::optimal_ffn_pruneset_budget( a_up, a_gate, m ) ); };

        for ( std::size_t mi = 0; mi < methods.size(); ++mi ) {
          auto& s = sums[mi];
          switch ( methods[mi] ) {
            case PruneMethod::oracle: {
              const double e = oracle_at( oracle_budget );
              s.pruned += static_cast<double>( oracle_budget );
              s.error += e;
              s.matched_oracle += e;
              s.matched_budget += oracle_at( budget );
              break;
            }
            case PruneMethod::cwt:
              s.pruned += static_cast<double>( cwt_set.size() );
              s.error += err( cwt_set );
              s.matched_oracle += oracle_at( cwt_set.size() );
              s.matched_budget += err( oracle::smallest_scores( cwt_rank, budget ) );
              break;
            case PruneMethod::cats:
              s.pruned += static_cast<double>( cats_set.size() );
              s.error += err( cats_set );
              s.matched_oracle += oracle_at( cats_set.size() );
              s.matched_budget += err( oracle::smallest_scores( cats_rank, budget ) );
              break;
          }
        }
        evaluated += 1.0;
        elements += static_cast<double>( d );
      }
    }
    for ( std::size_t mi = 0; mi < methods.size(); ++mi ) {
      const auto& s = sums[mi];
      rows.push_back( { k, methods[mi], s.pruned / elements, s.error / evaluated, s.matched_oracle / evaluated,
                        s.matched_budget / evaluated } );
    }
  }
  return rows;
}

std::string error_csv_header()
{
  return "k,method,realized_sparsity,mean_error,matched_oracle_error,matched_budget_error";
}

std::string to_csv_row( const ErrorRow& row )
{
  char buf[256];
  std::snprintf( buf, sizeof buf, "%.17g,%s,%.17g,%.17g,%.17g,%.17g", row.k, std::string( to_string( row.method ) ).c_str(),
                 row.realized_sparsity, row.mean_error, row.matched_oracle_error, row.matched_budget_error );
  return buf;
}

} // namespace sparse_engine
