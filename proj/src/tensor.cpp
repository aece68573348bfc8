#include "star/tensor.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>

namespace star {

namespace {

std::size_t shape_product(const std::vector<std::size_t>& shape) {
    std::size_t n = 1;
    for (std::size_t d : shape) n *= d;
    return n;
}

}  // namespace

Tensor::Tensor(std::vector<std::size_t> shape)
    : shape_(std::move(shape)), data_(shape_product(shape_), 0.0f) {}

Tensor::Tensor(std::vector<std::size_t> shape, std::vector<float> data)
    : shape_(std::move(shape)), data_(std::move(data)) {
    if (data_.size() != shape_product(shape_)) {
        throw ShapeError("tensor data length " + std::to_string(data_.size()) +
                         " does not match shape " + shape_to_string(shape_));
    }
}

Tensor Tensor::from_rows(const std::vector<std::vector<float>>& rows) {
    const std::size_t m = rows.size();
    const std::size_t n = m > 0 ? rows[0].size() : 0;
    std::vector<float> data;
    data.reserve(m * n);
    for (const auto& r : rows) {
        if (r.size() != n) {
            throw ShapeError("from_rows: ragged rows (" + std::to_string(r.size()) +
                             " vs " + std::to_string(n) + ")");
        }
        data.insert(data.end(), r.begin(), r.end());
    }
    return Tensor({m, n}, std::move(data));
}

float& Tensor::at(std::size_t i) {
    if (rank() != 1 || i >= shape_[0]) {
        throw ShapeError("at(i): bad index " + std::to_string(i) + " for shape " +
                         shape_to_string(shape_));
    }
    return data_[i];
}

float Tensor::at(std::size_t i) const { return const_cast<Tensor*>(this)->at(i); }

float& Tensor::at(std::size_t i, std::size_t j) {
    if (rank() != 2 || i >= shape_[0] || j >= shape_[1]) {
        throw ShapeError("at(i,j): bad index (" + std::to_string(i) + "," + std::to_string(j) +
                         ") for shape " + shape_to_string(shape_));
    }
    return data_[i * shape_[1] + j];
}

float Tensor::at(std::size_t i, std::size_t j) const {
    return const_cast<Tensor*>(this)->at(i, j);
}

float& Tensor::at(std::size_t i, std::size_t j, std::size_t k) {
    if (rank() != 3 || i >= shape_[0] || j >= shape_[1] || k >= shape_[2]) {
        throw ShapeError("at(i,j,k): bad index for shape " + shape_to_string(shape_));
    }
    return data_[(i * shape_[1] + j) * shape_[2] + k];
}

float Tensor::at(std::size_t i, std::size_t j, std::size_t k) const {
    return const_cast<Tensor*>(this)->at(i, j, k);
}

std::span<float> Tensor::row(std::size_t i) {
    if (rank() != 2 || i >= shape_[0]) {
        throw ShapeError("row(i): bad row " + std::to_string(i) + " for shape " +
                         shape_to_string(shape_));
    }
    return {data_.data() + i * shape_[1], shape_[1]};
}

std::span<const float> Tensor::row(std::size_t i) const {
    auto s = const_cast<Tensor*>(this)->row(i);
    return {s.data(), s.size()};
}

std::string shape_to_string(const std::vector<std::size_t>& shape) {
    std::string out = "[";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) out += "x";
        out += std::to_string(shape[i]);
    }
    return out + "]";
}

void check_finite(const Tensor& t, const char* op) {
    for (float v : t.values()) {
        if (!std::isfinite(v)) {
            throw ArgumentError(std::string(op) + ": non-finite element in result");
        }
    }
}

Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
        throw ShapeError("matmul: incompatible shapes " + shape_to_string(a.shape()) +
                         " and " + shape_to_string(b.shape()));
    }
    const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
    Tensor out({m, n});
    std::vector<double> acc(n);
    const float* pa = a.data();
    const float* pb = b.data();
    float* po = out.data();
    for (std::size_t i = 0; i < m; ++i) {
        std::fill(acc.begin(), acc.end(), 0.0);
        for (std::size_t kk = 0; kk < k; ++kk) {
            const double av = pa[i * k + kk];
            const float* brow = pb + kk * n;
            for (std::size_t j = 0; j < n; ++j) {
                acc[j] += av * static_cast<double>(brow[j]);
            }
        }
        for (std::size_t j = 0; j < n; ++j) {
            po[i * n + j] = static_cast<float>(acc[j]);
        }
    }
    check_finite(out, "matmul");
    return out;
}

Tensor transpose(const Tensor& a) {
    if (a.rank() != 2) {
        throw ShapeError("transpose: expected rank-2 tensor, got " + shape_to_string(a.shape()));
    }
    const std::size_t m = a.dim(0), n = a.dim(1);
    Tensor out({n, m});
    for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t j = 0; j < n; ++j) {
            out.data()[j * m + i] = a.data()[i * n + j];
        }
    }
    return out;
}

Tensor softmax_rows(const Tensor& x) { return softmax_rows(x, Tensor{}); }

Tensor softmax_rows(const Tensor& x, const Tensor& mask) {
    if (x.rank() != 2) {
        throw ShapeError("softmax_rows: expected rank-2 tensor, got " + shape_to_string(x.shape()));
    }
    const bool has_mask = !mask.shape().empty();
    if (has_mask && !mask.same_shape(x)) {
        throw ShapeError("softmax_rows: mask shape " + shape_to_string(mask.shape()) +
                         " does not match input " + shape_to_string(x.shape()));
    }
    const std::size_t m = x.dim(0), n = x.dim(1);
    // Mask entries are additive: 0 keeps a position, -inf removes it.
    auto masked_at = [&](std::size_t i, std::size_t j) {
        if (!has_mask) return false;
        const float v = mask.data()[i * n + j];
        if (v == 0.0f) return false;
        if (std::isinf(v) && v < 0.0f) return true;
        throw ArgumentError("softmax_rows: mask entries must be 0 or -inf");
    };
    Tensor out({m, n});
    for (std::size_t i = 0; i < m; ++i) {
        double row_max = -std::numeric_limits<double>::infinity();
        for (std::size_t j = 0; j < n; ++j) {
            if (!masked_at(i, j)) {
                row_max = std::max(row_max, static_cast<double>(x.data()[i * n + j]));
            }
        }
        if (!std::isfinite(row_max)) {
            throw ArgumentError("softmax_rows: row " + std::to_string(i) + " is fully masked");
        }
        double denom = 0.0;
        std::vector<double> e(n, 0.0);
        for (std::size_t j = 0; j < n; ++j) {
            if (masked_at(i, j)) continue;
            e[j] = std::exp(static_cast<double>(x.data()[i * n + j]) - row_max);
            denom += e[j];
        }
        for (std::size_t j = 0; j < n; ++j) {
            out.data()[i * n + j] = masked_at(i, j) ? 0.0f : static_cast<float>(e[j] / denom);
        }
    }
    check_finite(out, "softmax_rows");
    return out;
}

std::size_t Prng::next_below(std::size_t bound) {
    if (bound == 0) throw ArgumentError("Prng::next_below: zero bound");
    // 128-bit multiply-shift keeps the mapping unbiased enough for toy use.
    const std::uint64_t r = next_u64();
    return static_cast<std::size_t>(
        (static_cast<unsigned __int128>(r) * static_cast<unsigned __int128>(bound)) >> 64);
}

Tensor random_tensor(const std::vector<std::size_t>& shape, Prng& prng, float scale) {
    if (!(scale > 0.0f)) {
        throw ArgumentError("random_tensor: scale must be positive, got " + std::to_string(scale));
    }
    Tensor out(shape);
    for (float& v : out.values()) {
        v = (prng.next_unit() * 2.0f - 1.0f) * scale;
    }
    return out;
}

namespace {

constexpr char kMagic[4] = {'S', 'T', 'T', '1'};
constexpr std::size_t kMaxRank = 8;

void put_u32(std::string& buf, std::uint32_t v) {
    buf.push_back(static_cast<char>(v & 0xFF));
    buf.push_back(static_cast<char>((v >> 8) & 0xFF));
    buf.push_back(static_cast<char>((v >> 16) & 0xFF));
    buf.push_back(static_cast<char>((v >> 24) & 0xFF));
}

std::uint32_t get_u32(const std::string& buf, std::size_t off) {
    return static_cast<std::uint32_t>(static_cast<unsigned char>(buf[off])) |
           (static_cast<std::uint32_t>(static_cast<unsigned char>(buf[off + 1])) << 8) |
           (static_cast<std::uint32_t>(static_cast<unsigned char>(buf[off + 2])) << 16) |
           (static_cast<std::uint32_t>(static_cast<unsigned char>(buf[off + 3])) << 24);
}

}  // namespace

void stt_write(const Tensor& t, const std::filesystem::path& path) {
    if (t.rank() > kMaxRank) {
        throw FormatError("stt_write: rank " + std::to_string(t.rank()) + " exceeds maximum " +
                          std::to_string(kMaxRank));
    }
    std::string buf;
    buf.reserve(12 + 4 * t.rank() + 4 * t.numel());
    buf.append(kMagic, 4);
    put_u32(buf, 0);
    put_u32(buf, static_cast<std::uint32_t>(t.rank()));
    for (std::size_t d : t.shape()) {
        put_u32(buf, static_cast<std::uint32_t>(d));
    }
    for (float v : t.values()) {
        put_u32(buf, std::bit_cast<std::uint32_t>(v));
    }
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw FormatError("stt_write: cannot open " + path.string());
    out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
    if (!out) throw FormatError("stt_write: short write to " + path.string());
}

Tensor stt_read(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw FormatError("stt_read: cannot open " + path.string());
    std::string buf((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());

    if (buf.size() < 12) {
        throw FormatError("stt_read: " + path.string() + ": truncated header at byte offset " +
                          std::to_string(buf.size()));
    }
    if (std::memcmp(buf.data(), kMagic, 4) != 0) {
        throw FormatError("stt_read: " + path.string() + ": bad magic at byte offset 0");
    }
    const std::uint32_t rank = get_u32(buf, 8);
    if (rank > kMaxRank) {
        throw FormatError("stt_read: " + path.string() + ": rank " + std::to_string(rank) +
                          " exceeds maximum " + std::to_string(kMaxRank) + " at byte offset 8");
    }
    const std::size_t dims_end = 12 + 4 * static_cast<std::size_t>(rank);
    if (buf.size() < dims_end) {
        throw FormatError("stt_read: " + path.string() + ": truncated dims at byte offset " +
                          std::to_string(buf.size()));
    }
    std::vector<std::size_t> shape(rank);
    std::size_t count = 1;
    for (std::uint32_t i = 0; i < rank; ++i) {
        shape[i] = get_u32(buf, 12 + 4 * i);
        count *= shape[i];
    }
    const std::size_t expected = dims_end + 4 * count;
    if (buf.size() != expected) {
        throw FormatError("stt_read: " + path.string() + ": payload length mismatch at byte offset " +
                          std::to_string(std::min(buf.size(), expected)) + " (file has " +
                          std::to_string(buf.size()) + " bytes, expected " +
                          std::to_string(expected) + ")");
    }
    std::vector<float> data(count);
    for (std::size_t i = 0; i < count; ++i) {
        data[i] = std::bit_cast<float>(get_u32(buf, dims_end + 4 * i));
    }
    return Tensor(std::move(shape), std::move(data));
}

}  // namespace star
