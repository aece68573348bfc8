#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "star/errors.hpp"

namespace star {

// Dense row-major float32 tensor. Values are immutable by convention once a
// kernel has produced them; kernels accumulate in double and round on store.
class Tensor {
public:
    Tensor() = default;

    // Zero-filled tensor of the given shape.
    explicit Tensor(std::vector<std::size_t> shape);

    Tensor(std::vector<std::size_t> shape, std::vector<float> data);

    static Tensor zeros(std::vector<std::size_t> shape) { return Tensor(std::move(shape)); }

    // Row-major 2D construction, mostly for tests and small fixtures.
    static Tensor from_rows(const std::vector<std::vector<float>>& rows);

    const std::vector<std::size_t>& shape() const { return shape_; }
    std::size_t rank() const { return shape_.size(); }
    std::size_t dim(std::size_t i) const { return shape_.at(i); }
    std::size_t numel() const { return data_.size(); }
    bool empty() const { return data_.empty(); }

    float* data() { return data_.data(); }
    const float* data() const { return data_.data(); }
    std::vector<float>& values() { return data_; }
    const std::vector<float>& values() const { return data_; }

    // Rank-checked element access.
    float& at(std::size_t i);
    float at(std::size_t i) const;
    float& at(std::size_t i, std::size_t j);
    float at(std::size_t i, std::size_t j) const;
    float& at(std::size_t i, std::size_t j, std::size_t k);
    float at(std::size_t i, std::size_t j, std::size_t k) const;

    // Contiguous row of a rank-2 tensor.
    std::span<float> row(std::size_t i);
    std::span<const float> row(std::size_t i) const;

    bool same_shape(const Tensor& other) const { return shape_ == other.shape_; }

    bool operator==(const Tensor& other) const = default;

private:
    std::vector<std::size_t> shape_;
    std::vector<float> data_;
};

std::string shape_to_string(const std::vector<std::size_t>& shape);

// Throws ArgumentError if any element is NaN or infinite.
void check_finite(const Tensor& t, const char* op);

// Standard matrix product of a [m x k] and b [k x n]; accumulates in double.
Tensor matmul(const Tensor& a, const Tensor& b);

// Transpose of a rank-2 tensor.
Tensor transpose(const Tensor& a);

// Row-wise softmax of a rank-2 tensor with per-row max subtraction.
// The optional mask is additive and must contain only 0 or -inf entries;
// masked positions come out as exact 0.0f. A fully masked row is an error.
Tensor softmax_rows(const Tensor& x);
Tensor softmax_rows(const Tensor& x, const Tensor& mask);

// splitmix64 stream. Fully specified by its constants, so identical seeds
// give identical sequences on every platform. Single-owner: do not share
// one Prng between concurrent callers.
struct Prng {
    std::uint64_t state = 0;

    explicit Prng(std::uint64_t seed) : state(seed) {}

    std::uint64_t next_u64() {
        state += 0x9E3779B97F4A7C15ULL;
        std::uint64_t z = state;
        z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
        z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
        return z ^ (z >> 31);
    }

    // Uniform in [0, 1) from the top 24 bits of the next draw.
    float next_unit() {
        return static_cast<float>(next_u64() >> 40) * (1.0f / 16777216.0f);
    }

    // Uniform integer in [0, bound) by rejection-free scaling of the top bits.
    std::size_t next_below(std::size_t bound);

    // Derives an independent stream for a named sub-component.
    Prng fork() { return Prng(next_u64()); }
};

// Tensor with entries uniform in [-scale, scale], consuming exactly
// numel(shape) draws from the stream.
Tensor random_tensor(const std::vector<std::size_t>& shape, Prng& prng, float scale);

// STT tensor file format, little-endian throughout:
//   bytes 0-3   magic "STT1"
//   bytes 4-7   zero padding
//   bytes 8-11  rank as u32 (max 8)
//   then        rank x u32 dimension sizes
//   then        product(dims) x f32 payload, row-major, no alignment padding
void stt_write(const Tensor& t, const std::filesystem::path& path);
Tensor stt_read(const std::filesystem::path& path);

}  // namespace star
