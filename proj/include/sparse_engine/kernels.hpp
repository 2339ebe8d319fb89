#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <string_view>

#include "sparse_engine/tensor.hpp"

namespace sparse_engine::kernels {

// Thread count used when none is given: $SPARSE_ENGINE_THREADS if set to a
// positive integer, else std::thread::hardware_concurrency().
std::size_t default_thread_count();

struct KernelConfig
{
  std::size_t block_size = 64;
  std::size_t threads = default_thread_count();

  void validate() const;
};

/// Weight work counters. Each task keeps its own slot; slots are summed after
/// the parallel section.
struct KernelCounters
{
  std::uint64_t weight_reads = 0;   // weight elements loaded
  std::uint64_t rows_read = 0;      // spvmm: K x N rows visited
  std::uint64_t inner_products = 0; // vmmsp: output dot products evaluated

  KernelCounters& operator+=( const KernelCounters& o )
  {
    weight_reads += o.weight_reads;
    rows_read += o.rows_read;
    inner_products += o.inner_products;
    return *this;
  }
};

/// A linear-layer weight stored output-major (N_out x K_in, one row per
/// output) rearranged once into the K x N layout, so that the weights fed by
/// one input element sit in one contiguous row.
class TransposedWeight
{
public:
  explicit TransposedWeight( Matrix kxn )
    : kxn_( std::move( kxn ) )
  {}

  std::size_t in_dim() const { return kxn_.rows(); }   // K
  std::size_t out_dim() const { return kxn_.cols(); }  // N

  // The K x N view; row k holds the N weights multiplied by x[k].
  const Matrix& kxn() const { return kxn_; }

  // Back to the output-major N x K layout.
  Matrix to_output_major() const { return kxn_.transposed(); }

private:
  Matrix kxn_;
};

TransposedWeight pre_transpose( const Matrix& output_major );

/// Sparse-input vector-matrix product, y = x W.
///
/// The output is cut into blocks of block_size; consecutive blocks are
/// grouped into one contiguous range per thread, and every output element is
/// written by exactly one thread. Inside a range the loops are tiled and
/// reordered (k outer, outputs inner) so each visited weight row is read
/// contiguously. Input elements equal to 0.0 are skipped along with their
/// weight row. Accumulation per output is in increasing k, identical to
/// dense_vmm, so results match it bit for bit.
void spvmm( std::span<const float> x,
            const TransposedWeight& w,
            const KernelConfig& cfg,
            std::span<float> y,
            KernelCounters* counters = nullptr );

Vector spvmm( std::span<const float> x,
              const TransposedWeight& w,
              const KernelConfig& cfg,
              KernelCounters* counters = nullptr );

/// Output-sparse vector-matrix product over an output-major N x K weight:
/// y[n] = dot(W[n,:], x) * mask[n] where mask[n] != 0, and y[n] = 0 with the
/// dot product skipped otherwise.
void vmmsp( std::span<const float> x,
            const Matrix& w,
            std::span<const float> mask,
            const KernelConfig& cfg,
            std::span<float> y,
            KernelCounters* counters = nullptr );

Vector vmmsp( std::span<const float> x,
              const Matrix& w,
              std::span<const float> mask,
              const KernelConfig& cfg,
              KernelCounters* counters = nullptr );

// Dense baseline over the K x N layout: same partitioning as spvmm, no skip.
Vector dense( std::span<const float> x,
              const TransposedWeight& w,
              const KernelConfig& cfg,
              KernelCounters* counters = nullptr );

// Dense baseline over the N x K layout: vmmsp with every output kept.
Vector dense_rows( std::span<const float> x,
                   const Matrix& w,
                   const KernelConfig& cfg,
                   KernelCounters* counters = nullptr );

enum class KernelKind
{
  spvmm,
  vmmsp,
  dense,
};

std::string_view to_string( KernelKind kind );
KernelKind kernel_kind_from_string( std::string_view name );

/// One timed kernel measurement.
struct BenchRecord
{
  KernelKind kernel = KernelKind::dense;
  std::size_t K = 0;
  std::size_t N = 0;
  double sparsity = 0.0;
  std::size_t block_size = 0;
  std::size_t threads = 0;
  std::size_t reps = 0;
  std::int64_t min_ns = 0;
  std::int64_t median_ns = 0;
  double checksum = 0.0; // sum of outputs, accumulated in double
};

inline constexpr std::string_view bench_csv_header
  = "kernel,K,N,sparsity,block_size,threads,reps,min_ns,median_ns,checksum";

std::string to_csv_row( const BenchRecord& r );

/// Random weights for one (K, N) shape, held in both layouts.
struct BenchFixture
{
  BenchFixture( std::size_t K, std::size_t N, Rng& rng );

  std::size_t K;
  std::size_t N;
  TransposedWeight kxn;  // for spvmm and dense
  Matrix output_major;   // N x K, for vmmsp
};

/// Times `reps` calls (after two untimed warm-up calls).
///
/// spvmm and dense receive the same input: floor(sparsity*K) zeros at random
/// positions, other entries standard normal. vmmsp gets a dense input and a
/// mask with floor(sparsity*N) zeros. Inputs depend only on `input_seed`, so
/// spvmm and dense records with equal seeds share identical inputs.
BenchRecord bench_kernel( KernelKind kind,
                          const BenchFixture& fixture,
                          double sparsity,
                          std::size_t reps,
                          std::uint64_t input_seed,
                          const KernelConfig& cfg );

BenchRecord bench_kernel( KernelKind kind,
                          std::size_t K,
                          std::size_t N,
                          double sparsity,
                          std::size_t reps,
                          Rng& rng,
                          const KernelConfig& cfg = {} );

// Vector of length n with exactly floor(sparsity*n) zeros at random positions.
Vector sparse_random_vector( std::size_t n, double sparsity, Rng& rng );

} // namespace sparse_engine::kernels
