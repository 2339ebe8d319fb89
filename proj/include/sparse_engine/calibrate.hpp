#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <vector>

#include "sparse_engine/calibration.hpp"
#include "sparse_engine/engine.hpp"
#include "sparse_engine/model.hpp"

namespace sparse_engine {

inline constexpr std::size_t default_calibration_samples = 512;
inline constexpr std::size_t default_sequence_length = 64;

/// Dense-pass activation traces of every layer at every site, same samples
/// (token positions) in the same row order everywhere.
struct TraceBundle
{
  // layers[l][site index]
  std::vector<std::array<ActivationTrace, 4>> layers;

  std::size_t n_layers() const { return layers.size(); }
  std::size_t n_samples() const;

  const ActivationTrace& at( std::size_t layer, Site site ) const
  {
    return layers.at( layer )[static_cast<std::size_t>( site )];
  }

  // Rows [begin, end) of every trace.
  TraceBundle slice( std::size_t begin, std::size_t end ) const;

  std::vector<ActivationTrace> flatten() const;

  // Groups loose records by layer and site; every (layer, site) of
  // 0..max layer must appear exactly once, all with the same sample count.
  static TraceBundle from_traces( std::vector<ActivationTrace> traces );
};

/// Uniform random token ids, n_tokens in total, cut into sequences of at most
/// seq_len tokens.
std::vector<std::vector<std::uint32_t>> synthetic_sequences( std::uint32_t vocab_size,
                                                             std::size_t n_tokens,
                                                             std::size_t seq_len,
                                                             Rng& rng );

/// Runs every sequence densely through a fresh cache and records one sample
/// per token position.
TraceBundle collect_traces( const Engine& engine, const std::vector<std::vector<std::uint32_t>>& sequences );

/// Thresholds for `mode` at sparsity level k. Each layer is calibrated on its
/// own pooled score distribution.
ThresholdSet thresholds_from_traces( const TraceBundle& traces, double k, Mode mode );

/// collect_traces followed by thresholds_from_traces.
ThresholdSet calibrate( const Engine& engine,
                        const std::vector<std::vector<std::uint32_t>>& sequences,
                        double k,
                        Mode mode );

/// Projection usage the thresholds would realize on the traced inputs, one
/// step per sample. Attention sites are evaluated on dense-pass inputs.
SiteActivity activity_from_traces( const ModelConfig& config,
                                   const TraceBundle& traces,
                                   const ThresholdSet& thresholds,
                                   Mode mode );

} // namespace sparse_engine
