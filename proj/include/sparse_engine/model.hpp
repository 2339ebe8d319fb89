#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <span>
#include <vector>

#include "sparse_engine/calibration.hpp"
#include "sparse_engine/tensor.hpp"

namespace sparse_engine {

struct ModelConfig
{
  std::uint32_t n_layers = 4;
  std::uint32_t d_model = 1024;
  std::uint32_t d_ff = 4096;
  std::uint32_t n_heads = 16;
  std::uint32_t n_kv_heads = 4; // == n_heads: MHA; fewer: GQA
  std::uint32_t vocab_size = 4096;
  std::uint32_t max_seq_len = 512;
  std::uint64_t seed = 0;

  std::size_t head_dim() const { return d_model / n_heads; }
  std::size_t kv_dim() const { return head_dim() * n_kv_heads; }
  std::size_t group_size() const { return n_heads / n_kv_heads; }

  // Throws std::invalid_argument naming the first violated constraint.
  void validate() const;

  bool operator==( const ModelConfig& ) const = default;
};

/// Linear weights are stored output-major (out x in, one row per output), the
/// layout of the checkpoint file.
struct LayerWeights
{
  Vector attn_norm; // d_model
  Matrix wq;        // d_model x d_model
  Matrix wk;        // kv_dim x d_model
  Matrix wv;        // kv_dim x d_model
  Matrix wo;        // d_model x d_model
  Vector ffn_norm;  // d_model
  Matrix w_gate;    // d_ff x d_model
  Matrix w_up;      // d_ff x d_model
  Matrix w_down;    // d_model x d_ff
};

struct ToyModel
{
  ModelConfig config;
  Matrix embedding;  // vocab x d_model
  std::vector<LayerWeights> layers;
  Vector final_norm; // d_model
  Matrix head;       // vocab x d_model

  std::size_t parameter_count() const;

  // Checks every tensor shape against the config and all weights for finiteness.
  void validate() const;
};

/// How the per-channel scale of the up projection is drawn.
enum class UpChannelProfile
{
  // Row scales log-uniform over [0.1, 10]: mean |a_up| differs strongly
  // between channels while staying stable per channel.
  heterogeneous,
  // Every up row is the same vector up to sign, so |a_up| is identical across
  // channels for every input.
  homogeneous,
};

/// Deterministic synthetic weights: N(0, 1/fan_in) projections, N(0, 1)
/// embeddings, unit norm gains.
ToyModel generate_model( const ModelConfig& config, UpChannelProfile up = UpChannelProfile::heterogeneous );

/// Per-layer key/value storage, [n_kv_heads x max_seq_len x head_dim] each.
class KvCache
{
public:
  explicit KvCache( const ModelConfig& config );

  std::size_t length() const { return length_; }
  std::size_t capacity() const { return capacity_; }

  // Stores position length() of one layer; k and v are kv_dim long, heads
  // concatenated.
  void write( std::size_t layer, std::span<const float> k, std::span<const float> v );

  // Commits the position written for every layer.
  void advance();

  std::span<const float> key( std::size_t layer, std::size_t kv_head, std::size_t pos ) const;
  std::span<const float> value( std::size_t layer, std::size_t kv_head, std::size_t pos ) const;

private:
  std::size_t offset( std::size_t kv_head, std::size_t pos ) const;

  std::size_t n_layers_;
  std::size_t n_kv_heads_;
  std::size_t head_dim_;
  std::size_t capacity_;
  std::size_t length_ = 0;
  std::vector<Vector> keys_;
  std::vector<Vector> values_;
};

// Checkpoint ("TGSM") and trace ("ACTV") files; layouts in docs/FORMATS.md.
void save_checkpoint( const ToyModel& model, std::ostream& out );
void save_checkpoint( const ToyModel& model, const std::filesystem::path& path );
ToyModel load_checkpoint( std::istream& in );
ToyModel load_checkpoint( const std::filesystem::path& path );

void write_traces( std::span<const ActivationTrace> traces, std::ostream& out );
void write_traces( std::span<const ActivationTrace> traces, const std::filesystem::path& path );
std::vector<ActivationTrace> read_traces( std::istream& in );
std::vector<ActivationTrace> read_traces( const std::filesystem::path& path );

} // namespace sparse_engine
