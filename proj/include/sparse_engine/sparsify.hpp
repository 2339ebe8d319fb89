#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "sparse_engine/tensor.hpp"

namespace sparse_engine {

/// Strictly increasing channel indices, all below the vector length.
class PruneSet
{
public:
  PruneSet() = default;
  PruneSet( std::vector<std::size_t> indices, std::size_t dim );

  // Indices of the exact zeros of a thresholded vector.
  static PruneSet from_zeros( std::span<const float> values );

  std::span<const std::size_t> indices() const { return indices_; }
  std::size_t size() const { return indices_.size(); }
  bool empty() const { return indices_.empty(); }
  bool contains( std::size_t i ) const;

  bool operator==( const PruneSet& ) const = default;

private:
  std::vector<std::size_t> indices_;
};

/// A thresholded activation. Stays dense: pruned entries are exact zeros,
/// which is what the kernels test for.
struct MaskedVector
{
  Vector values;
  std::size_t nnz = 0;

  double sparsity() const
  {
    return values.empty() ? 0.0 : 1.0 - static_cast<double>( nnz ) / static_cast<double>( values.size() );
  }
};

// Channel-wise thresholding: out[i] = 0 when |a[i]| <= t[i] or the channel is
// flagged always-prune, a[i] otherwise. An empty flag span means no flags.
MaskedVector cwt_apply( std::span<const float> a_gate,
                        std::span<const float> thresholds,
                        std::span<const std::uint8_t> always_prune = {} );

// Tensor-wise thresholding with a single scalar: out[i] = 0 when |x[i]| <= t.
MaskedVector cats_apply( std::span<const float> x, float threshold );

/// Gated-MLP sparsification error for pruning `pruned` out of a_gate:
/// sum over i in P of (a_up[i] * a_gate[i])^2, accumulated in double.
double ffn_objective( std::span<const float> a_up, std::span<const float> a_gate, const PruneSet& pruned );

/// The same error evaluated as the squared norm of the output difference,
/// || a_up * a_gate - a_up * a_gate_hat ||^2.
double ffn_objective_direct( std::span<const float> a_up, std::span<const float> a_gate, const PruneSet& pruned );

/// || x W - x_hat W ||^2 with x_hat = x zeroed on P; W is K x N (x.size() == K).
double attn_objective_exact( std::span<const float> x, const PruneSet& pruned, const Matrix& w );

/// Diagonal-Hessian estimate: sum over i in P of ||W[i,:]||^2 * x[i]^2.
double attn_objective_diag( std::span<const float> x, const PruneSet& pruned, std::span<const double> row_norms_sq );

// ||W[i,:]||^2 for every row of a K x N weight.
std::vector<double> row_norms_sq( const Matrix& w );

} // namespace sparse_engine
