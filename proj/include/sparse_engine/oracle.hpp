#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "sparse_engine/calibration.hpp"
#include "sparse_engine/model.hpp"
#include "sparse_engine/sparsify.hpp"

namespace sparse_engine::oracle {

/// The `count` smallest scores, lowest index first among ties.
PruneSet smallest_scores( std::span<const double> scores, std::size_t count );

/// Minimizer of the gated-MLP pruning error with at least ceil(k*d) pruned
/// channels: the smallest exact scores |a_up[i] * a_gate[i]|.
PruneSet optimal_ffn_pruneset( std::span<const float> a_up, std::span<const float> a_gate, double k );

// Same, with an explicit budget of pruned channels.
PruneSet optimal_ffn_pruneset_budget( std::span<const float> a_up, std::span<const float> a_gate, std::size_t budget );

enum class AttnCriterion
{
  exact, // || x W - x_hat W ||^2, exhaustive search over all subsets
  diag,  // sum over P of ||W[i,:]||^2 x_i^2
  abs,   // sum over P of |x_i|
};

inline constexpr std::size_t max_exhaustive_dim = 20;

/// Minimizing prune set of size ceil(k*d) for a projection with K x N weight
/// w (x.size() == K). Ties go to the lexicographically smallest index set.
/// The exact criterion enumerates every subset and rejects d > 20.
PruneSet optimal_attn_pruneset( std::span<const float> x, const Matrix& w, double k, AttnCriterion criterion );

/// (x_hat - x) W W^T (x_hat - x)^T with x_hat = x zeroed on P, in double.
double attn_quadratic_form( std::span<const float> x, const PruneSet& pruned, const Matrix& w );

/// Straight-line references on output-major ToyModel weights, accumulating
/// in double. Independent of the engine and kernels.
Vector reference_matvec( const Matrix& w, std::span<const float> x );
Vector reference_rms_norm( std::span<const float> x, std::span<const float> gain, double eps = 1e-5 );

struct ReferenceOptions
{
  Mode mode = Mode::dense;
  const ThresholdSet* thresholds = nullptr;
  // Positions before this one run densely.
  std::size_t sparse_from = 0;
};

/// Gated MLP on a normalized input, thresholded per mode.
Vector reference_ffn( const LayerWeights& w,
                      std::span<const float> x,
                      Mode mode = Mode::dense,
                      const FfnThresholds* thresholds = nullptr );

/// Attention output for the last row of `normalized`, with keys and values of
/// every row recomputed from scratch and each kv head copied out to its query
/// heads. `thresholded` selects, per row, whether the mode's thresholds apply.
Vector reference_attention( const ModelConfig& config,
                            const LayerWeights& w,
                            const std::vector<Vector>& normalized,
                            Mode mode = Mode::dense,
                            const AttnThresholds* thresholds = nullptr,
                            const std::vector<bool>& thresholded = {} );

/// One decoder block over a sequence of residual-stream rows (causal):
/// x += attn(norm(x)); x += ffn(norm(x)). Returns one output row per input row.
std::vector<Vector> reference_block_forward( const ToyModel& model,
                                             std::size_t layer,
                                             const std::vector<Vector>& inputs,
                                             const ReferenceOptions& options = {} );

struct ReferenceOutput
{
  std::vector<Vector> hidden; // residual stream after the last block, per position
  std::vector<Vector> logits;
};

/// Whole-model forward over a token sequence.
ReferenceOutput reference_forward( const ToyModel& model,
                                   std::span<const std::uint32_t> tokens,
                                   const ReferenceOptions& options = {} );

} // namespace sparse_engine::oracle
