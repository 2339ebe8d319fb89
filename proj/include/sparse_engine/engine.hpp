#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "sparse_engine/calibration.hpp"
#include "sparse_engine/kernels.hpp"
#include "sparse_engine/model.hpp"

namespace sparse_engine {

/// How sparsified projections are executed.
enum class ExecutionPath
{
  kernels,      // spvmm / vmmsp / blocked dense kernels on the worker pool
  masked_dense, // single-threaded dense products over explicitly masked inputs
};

enum class Projection : std::uint8_t
{
  q,
  k,
  v,
  o,
  gate,
  up,
  down,
};

inline constexpr std::size_t projection_count = 7;

/// How much of one projection was used, in units of its sparse dimension:
/// input rows for q/k/v/o/gate/down, output rows for up.
struct ProjectionUse
{
  std::uint64_t used = 0;
  std::uint64_t total = 0;
};

/// Realized sparsity accounting over one or more forward passes.
struct SiteActivity
{
  std::vector<std::array<ProjectionUse, projection_count>> layers;
  std::uint64_t steps = 0;

  explicit SiteActivity( std::size_t n_layers = 0 )
    : layers( n_layers )
  {}

  ProjectionUse& at( std::size_t layer, Projection p ) { return layers[layer][static_cast<std::size_t>( p )]; }
  const ProjectionUse& at( std::size_t layer, Projection p ) const
  {
    return layers[layer][static_cast<std::size_t>( p )];
  }

  // 1 - used/total pooled over layers.
  double sparsity( Projection p ) const;
};

/// Weight elements behind one unit of ProjectionUse.
std::size_t weights_per_unit( const ModelConfig& config, Projection p );

/// Fraction of model parameters read per forward pass: 1 minus the weights
/// skipped by sparsity, averaged over activity.steps passes. Embedding, norms
/// and head count as fully activated.
double activated_params( const ModelConfig& config, const SiteActivity& activity );

std::size_t parameter_count( const ModelConfig& config );

// Called with each recorded activation: (layer, site, values).
using SiteObserver = std::function<void( std::size_t, Site, std::span<const float> )>;

/// Per-call options for Engine::step.
struct StepContext
{
  Mode mode = Mode::dense;
  const ThresholdSet* thresholds = nullptr; // required unless mode == dense
  SiteActivity* activity = nullptr;
  kernels::KernelCounters* counters = nullptr; // projection kernels only, head excluded
  const SiteObserver* observer = nullptr;
};

struct StepOutput
{
  Vector hidden; // residual stream after the last block
  Vector logits;
};

/// Inference engine over a ToyModel. Holds its own copy of the weights in
/// the layouts the kernels want: K x N for every spvmm/dense-row projection,
/// output-major for the up projection (vmmsp).
class Engine
{
public:
  explicit Engine( const ToyModel& model,
                   kernels::KernelConfig cfg = {},
                   ExecutionPath path = ExecutionPath::kernels );

  const ModelConfig& config() const { return config_; }
  const kernels::KernelConfig& kernel_config() const { return cfg_; }
  ExecutionPath path() const { return path_; }

  /// One decoder position for `token` at cache.length(); appends to the cache.
  StepOutput step( std::uint32_t token, KvCache& cache, const StepContext& ctx ) const;

  /// Gated MLP on a normalized input:
  /// (silu(x W_gate) * (x W_up)) W_down.
  Vector ffn_dense( std::span<const float> x, std::size_t layer, const StepContext& ctx = {} ) const;

  /// Thresholded gated MLP. The gate projection runs densely; its thresholded
  /// output is the vmmsp mask for the up projection, which also applies the
  /// elementwise product; the down projection runs through spvmm.
  Vector ffn_sparse( std::span<const float> x,
                     std::size_t layer,
                     const FfnThresholds& thresholds,
                     Mode mode,
                     const StepContext& ctx = {} ) const;

  /// Single-position attention on a normalized input, including the output
  /// projection. Writes this position's key/value to the cache (the caller
  /// commits with cache.advance()). No positional encoding.
  Vector attn_forward( std::span<const float> x,
                       std::size_t layer,
                       KvCache& cache,
                       Mode mode,
                       const AttnThresholds* thresholds,
                       const StepContext& ctx = {} ) const;

private:
  struct PreparedLayer
  {
    Vector attn_norm;
    kernels::TransposedWeight wq;
    kernels::TransposedWeight wk;
    kernels::TransposedWeight wv;
    kernels::TransposedWeight wo;
    Vector ffn_norm;
    kernels::TransposedWeight gate;
    Matrix up; // output-major
    kernels::TransposedWeight down;
  };

  Vector project( std::span<const float> x, const kernels::TransposedWeight& w, bool sparse, kernels::KernelCounters* counters ) const;

  ModelConfig config_;
  kernels::KernelConfig cfg_;
  ExecutionPath path_;
  Matrix embedding_;
  std::vector<PreparedLayer> layers_;
  Vector final_norm_;
  kernels::TransposedWeight head_;
};

struct DecodeRequest
{
  std::vector<std::uint32_t> prompt;
  std::size_t gen_len = 1;
  Mode mode = Mode::dense;
  const ThresholdSet* thresholds = nullptr;
  bool keep_logits = false;
};

struct DecodeResult
{
  std::vector<std::uint32_t> tokens;  // generated tokens, gen_len of them
  std::vector<std::int64_t> step_ns;  // wall time of each generation step
  std::string checksum;               // FNV-1a over every step's hidden state
  SiteActivity activity;
  kernels::KernelCounters counters;
  std::vector<Vector> logits;         // per step, when requested

  double tokens_per_sec() const;
};

/// Greedy decoding with batch size one. All prompt tokens but the last fill
/// the cache densely; then gen_len steps run in the requested mode, the first
/// consuming the last prompt token and each later one the previous argmax.
DecodeResult decode( const Engine& engine, const DecodeRequest& request );

// Checks that a threshold set fits a model and mode; throws MismatchError.
void check_thresholds( const ModelConfig& config, Mode mode, const ThresholdSet* thresholds );

std::size_t argmax( std::span<const float> v );

} // namespace sparse_engine
