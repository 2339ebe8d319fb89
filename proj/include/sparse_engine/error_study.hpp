#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "sparse_engine/calibration.hpp"

namespace sparse_engine {

enum class PruneMethod
{
  oracle, // exact scores |a_up * a_gate|
  cwt,    // channel-wise gate thresholds
  cats,   // one tensor-wise gate threshold
};

std::string_view to_string( PruneMethod m );
PruneMethod prune_method_from_string( std::string_view name );

/// Gate and up traces of one FFN layer, same samples in the same order.
struct FfnTracePair
{
  const ActivationTrace* gate = nullptr;
  const ActivationTrace* up = nullptr;
};

/// One (k, method) row, averaged over held-out samples of every layer.
/// Errors are the gated-MLP pruning error per sample.
///   realized_sparsity      fraction pruned by the method's own rule
///   mean_error             error of the method's own rule (oracle: ceil(k*d) smallest exact scores)
///   matched_oracle_error   oracle error at the method's own per-sample prune count
///   matched_budget_error   error when the method prunes its m lowest-ranked channels, m being
///                          the per-sample count CWT realized; the oracle ranks exact scores,
///                          CWT ranks mean|a_up| * |a_gate|, CATS ranks |a_gate|
struct ErrorRow
{
  double k = 0.0;
  PruneMethod method = PruneMethod::oracle;
  double realized_sparsity = 0.0;
  double mean_error = 0.0;
  double matched_oracle_error = 0.0;
  double matched_budget_error = 0.0;
};

/// Calibrates each layer on the first calibration_fraction of its samples and
/// evaluates on the rest.
std::vector<ErrorRow> compare_error( std::span<const FfnTracePair> layers,
                                     std::span<const double> ks,
                                     std::span<const PruneMethod> methods,
                                     double calibration_fraction = 0.5 );

std::string error_csv_header();
std::string to_csv_row( const ErrorRow& row );

} // namespace sparse_engine
