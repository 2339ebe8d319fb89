#pragma once

#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <random>
#include <span>
#include <string_view>
#include <vector>

namespace sparse_engine {

using Vector = std::vector<float>;

// Dense row-major fp32 matrix. Shape is fixed at construction.
class Matrix
{
public:
  Matrix( std::size_t rows, std::size_t cols, float fill = 0.0f );
  Matrix( std::size_t rows, std::size_t cols, std::vector<float> data );
  Matrix( std::initializer_list<std::initializer_list<float>> rows );

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  std::size_t size() const { return data_.size(); }

  float& operator()( std::size_t r, std::size_t c ) { return data_[r * cols_ + c]; }
  float operator()( std::size_t r, std::size_t c ) const { return data_[r * cols_ + c]; }

  std::span<float> row( std::size_t r ) { return { data_.data() + r * cols_, cols_ }; }
  std::span<const float> row( std::size_t r ) const { return { data_.data() + r * cols_, cols_ }; }

  std::span<float> data() { return data_; }
  std::span<const float> data() const { return data_; }

  Matrix transposed() const;

  bool operator==( const Matrix& other ) const = default;

private:
  std::size_t rows_;
  std::size_t cols_;
  std::vector<float> data_;
};

/// Seedable generator with a platform-independent stream.
///
/// The engine is std::mt19937_64, whose output sequence is fixed by the C++
/// standard. Conversions to floats are done here rather than through the
/// <random> distributions, whose algorithms are implementation-defined.
class Rng
{
public:
  static constexpr std::string_view algorithm = "mt19937_64";

  explicit Rng( std::uint64_t seed )
    : seed_( seed )
    , engine_( seed )
  {}

  std::uint64_t seed() const { return seed_; }

  std::uint64_t next_u64() { return engine_(); }

  // Uniform in [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>( engine_() >> 11 ) * 0x1.0p-53; }

  double uniform( double lo, double hi ) { return lo + ( hi - lo ) * uniform(); }

  // Uniform integer in [0, n). Rejection sampling keeps it unbiased.
  std::uint64_t below( std::uint64_t n );

  // Standard normal via Box-Muller; the spare value is cached.
  double normal();

  template<typename T>
  void shuffle( std::span<T> items )
  {
    for ( std::size_t i = items.size(); i > 1; --i ) {
      std::swap( items[i - 1], items[below( i )] );
    }
  }

private:
  std::uint64_t seed_;
  std::mt19937_64 engine_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

float silu( float v );
Vector silu( std::span<const float> v );

/// y = x W for W stored K x N (row k holds the weights fed by x[k]).
///
/// Accumulation per output is sequential in k with fp32 accumulators. The
/// sparse and blocked kernels preserve this order, so they reproduce this
/// result bit for bit.
Vector dense_vmm( std::span<const float> x, const Matrix& w );

/// y[n] = dot(W[n, :], x) for W stored N x K (one row per output).
Vector dense_matvec( const Matrix& w, std::span<const float> x );

/// Fixed-order fp32 dot product: 16 interleaved partial sums, folded
/// pairwise, then the tail added sequentially. Every dense and sparse path
/// that consumes N x K weights goes through this function.
float dot( std::span<const float> a, std::span<const float> b );

/// out = x / sqrt(mean(x^2) + eps) * gain
Vector rms_norm( std::span<const float> x, std::span<const float> gain, float eps = 1e-5f );

/// Exact order statistic: sort ascending and take index ceil(k*n)-1,
/// clamped to [0, n-1]. The result is always one of the samples.
float empirical_quantile( std::span<const float> samples, double k );

// Number of elements to prune for a target fraction k of n: ceil(k*n).
std::size_t prune_count( double k, std::size_t n );

bool all_finite( std::span<const float> v );

} // namespace sparse_engine
