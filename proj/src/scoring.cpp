#include "star/scoring.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

namespace star {

namespace {

void require_row_stochastic(const Tensor& a, const char* op, double tol) {
    const std::size_t m = a.dim(0), n = a.dim(1);
    for (std::size_t i = 0; i < m; ++i) {
        double sum = 0.0;
        for (std::size_t j = 0; j < n; ++j) sum += a.data()[i * n + j];
        if (std::abs(sum - 1.0) > tol) {
            throw ArgumentError(std::string(op) + ": row " + std::to_string(i) +
                                " sums to " + std::to_string(sum) + ", expected 1");
        }
    }
}

}  // namespace

bool KeepSet::contains(std::size_t idx) const {
    return std::binary_search(indices.begin(), indices.end(), idx);
}

std::string KeepSet::to_json() const {
    std::string out = "[";
    for (std::size_t i = 0; i < indices.size(); ++i) {
        if (i) out += ",";
        out += std::to_string(indices[i]);
    }
    return out + "]";
}

ImportanceVector visual_self_attn_scores(const Tensor& a) {
    if (a.rank() != 2 || a.dim(0) != a.dim(1)) {
        throw ShapeError("visual_self_attn_scores: expected a square map, got " +
                         shape_to_string(a.shape()));
    }
    const std::size_t n = a.dim(0);
    if (n == 0) throw ShapeError("visual_self_attn_scores: empty map");
    require_row_stochastic(a, "visual_self_attn_scores", 1e-4);

    ImportanceVector r;
    r.scores.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
        double acc = 0.0;
        for (std::size_t j = 0; j < n; ++j) acc += a.data()[j * n + i];
        r.scores[i] = static_cast<float>(acc / static_cast<double>(n));
    }
    return r;
}

ImportanceVector cls_attention_scores(const Tensor& a, std::size_t cls_index) {
    if (a.rank() != 2 || a.dim(0) != a.dim(1) || a.dim(0) < 2) {
        throw ShapeError("cls_attention_scores: expected a square map of size >= 2, got " +
                         shape_to_string(a.shape()));
    }
    const std::size_t n = a.dim(0);
    if (cls_index >= n) {
        throw ShapeError("cls_attention_scores: cls index " + std::to_string(cls_index) +
                         " outside map of size " + std::to_string(n));
    }
    ImportanceVector r;
    r.scores.reserve(n - 1);
    for (std::size_t j = 0; j < n; ++j) {
        if (j == cls_index) continue;
        r.scores.push_back(a.data()[cls_index * n + j]);
    }
    return r;
}

ImportanceVector cross_modal_scores(const Tensor& c) {
    if (c.rank() != 2) {
        throw ShapeError("cross_modal_scores: expected rank-2 block, got " +
                         shape_to_string(c.shape()));
    }
    const std::size_t lv = c.dim(0), lt = c.dim(1);
    if (lt == 0) throw ArgumentError("cross_modal_scores: no text positions to average over");

    ImportanceVector r;
    r.scores.resize(lv);
    for (std::size_t i = 0; i < lv; ++i) {
        double acc = 0.0;
        for (std::size_t j = 0; j < lt; ++j) acc += c.data()[i * lt + j];
        r.scores[i] = static_cast<float>(acc / static_cast<double>(lt));
    }
    return r;
}

std::size_t keep_budget(std::size_t token_count, double ratio) {
    const double kept = (1.0 - ratio) * static_cast<double>(token_count);
    return static_cast<std::size_t>(std::floor(std::max(kept, 0.0)));
}

float dynamic_threshold(const ImportanceVector& r, double ratio) {
    if (r.size() == 0) throw ArgumentError("dynamic_threshold: empty score vector");
    const double bound = (1.0 - ratio) * static_cast<double>(r.size());

    // Candidates are the distinct score values; |{r_i >= tau'}| is
    // non-increasing in tau', so the first (smallest) candidate whose
    // survivor count fits the bound is the minimum.
    std::vector<float> values = r.scores;
    std::sort(values.begin(), values.end());
    values.erase(std::unique(values.begin(), values.end()), values.end());

    for (float candidate : values) {
        std::size_t survivors = 0;
        for (float s : r.scores) {
            if (s >= candidate) ++survivors;
        }
        if (static_cast<double>(survivors) <= bound) return candidate;
    }
    return std::numeric_limits<float>::infinity();
}

KeepSet select_keep(const ImportanceVector& r, std::size_t count) {
    if (count > r.size()) {
        throw ArgumentError("select_keep: count " + std::to_string(count) +
                            " exceeds vector length " + std::to_string(r.size()));
    }
    std::vector<std::size_t> order(r.size());
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        if (r.scores[a] != r.scores[b]) return r.scores[a] > r.scores[b];
        return a < b;
    });
    KeepSet keep;
    keep.indices.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(count));
    std::sort(keep.indices.begin(), keep.indices.end());
    return keep;
}

}  // namespace star
