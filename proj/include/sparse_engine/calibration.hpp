#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "sparse_engine/tensor.hpp"

namespace sparse_engine {

/// Where in a block an activation trace was recorded.
enum class Site : std::uint8_t
{
  ffn_gate = 0,          // silu(x W_gate), before thresholding
  ffn_up = 1,            // x W_up
  attn_query_input = 2,  // normalized block input, shared by the q/k/v projections
  attn_output_input = 3, // attention output, input of the output projection
};

std::string_view to_string( Site site );
Site site_from_index( std::uint8_t raw );

/// Sparsification scheme applied by the engine.
enum class Mode : std::uint8_t
{
  dense,              // no thresholding
  cats,               // one tensor-wise threshold on the gate activation
  cwt,                // channel-wise gate thresholds, dense attention
  cwt_full_attn,      // + thresholds on the inputs of all four attention projections
  cwt_selective_attn, // + thresholds on the query and output projection inputs only
};

std::string_view to_string( Mode mode );
Mode mode_from_string( std::string_view name );

bool sparsifies_ffn( Mode mode );
bool sparsifies_attention( Mode mode );

/// n sampled activation rows (one per token position) for one layer site.
struct ActivationTrace
{
  std::uint32_t layer_index = 0;
  Site site = Site::ffn_gate;
  Matrix rows { 1, 1 }; // n_samples x dim

  std::size_t n_samples() const { return rows.rows(); }
  std::size_t dim() const { return rows.cols(); }

  // Rows [begin, end) as a new trace.
  ActivationTrace slice( std::size_t begin, std::size_t end ) const;
};

/// Per-channel mean |a_up|.
struct ChannelStats
{
  std::vector<float> mean_abs_up;

  std::size_t dim() const { return mean_abs_up.size(); }
};

ChannelStats channel_stats( const ActivationTrace& up_trace );

/// Pooled estimated importance scores mean_abs_up[i] * |a_gate[j][i]| over
/// every sample j and channel i, row-major.
std::vector<float> estimated_scores( const ActivationTrace& gate_trace, const ChannelStats& stats );

/// Per-channel gate thresholds of one FFN layer. Channels whose up
/// activation never moved (mean |a_up| == 0) are flagged always-prune; their
/// stored threshold is 0 and ignored.
struct FfnThresholds
{
  std::vector<float> t;
  std::vector<std::uint8_t> always_prune;

  std::size_t dim() const { return t.size(); }
};

FfnThresholds channel_thresholds( std::span<const float> scores, const ChannelStats& stats, double k );

// Same threshold on every channel; used for tensor-wise (CATS) gate thresholds.
FfnThresholds uniform_thresholds( float t, std::size_t dim );

/// Quantile of pooled |x| over all samples and channels of a trace.
float tensor_threshold( const ActivationTrace& input_trace, double k );

/// Attention thresholds of one layer. `input` is t_q in selective mode and
/// the shared q/k/v input threshold t_i in full mode.
struct AttnThresholds
{
  float input = 0.0f;
  float output = 0.0f;
};

struct ThresholdSet
{
  static constexpr int current_version = 1;

  int version = current_version;
  double k = 0.0;
  Mode mode = Mode::dense;
  std::vector<FfnThresholds> ffn;   // one per layer
  std::vector<AttnThresholds> attn; // one per layer

  std::size_t n_layers() const { return ffn.size(); }

  static ThresholdSet zeros( std::size_t n_layers, std::size_t d_ff, Mode mode = Mode::dense, double k = 0.0 );
};

/// Serialized form:
///   { "version": 1, "k": 0.5, "mode": "cwt-selective-attn",
///     "n_layers": L, "d_ff": F,
///     "ffn":  [ [t_0, ..., t_{F-1}], ... ],   // null marks an always-prune channel
///     "attn": [ { "t_q": ..., "t_o": ... }, ... ] }
/// Full-attention mode writes "t_i" instead of "t_q".
std::string thresholds_to_json( const ThresholdSet& set );
ThresholdSet thresholds_from_json( std::string_view text );

// Fraction of trace elements a threshold set prunes at one site.
double realized_sparsity( const ActivationTrace& gate_trace, const FfnThresholds& t );
double realized_sparsity( const ActivationTrace& trace, float tensor_threshold );

} // namespace sparse_engine
