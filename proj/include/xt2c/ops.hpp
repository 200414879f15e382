#pragma once

#include "xt2c/graph.hpp"

#include <cstdint>
#include <span>
#include <vector>

namespace xt2c {

// One independent attention problem inside a stacked batch: queries are rows
// [query_begin, query_begin + query_count) and keys/values are rows
// [key_begin, key_begin + key_count). Causal segments require equal counts;
// query i then sees keys 0..i of the segment.
struct AttentionSegment {
  Eigen::Index query_begin = 0;
  Eigen::Index query_count = 0;
  Eigen::Index key_begin = 0;
  Eigen::Index key_count = 0;
  bool causal = false;
};

template <typename T> Var<T> matmul(Var<T> a, Var<T> b);
template <typename T> Var<T> add(Var<T> a, Var<T> b);
template <typename T> Var<T> sub(Var<T> a, Var<T> b);
template <typename T> Var<T> mul(Var<T> a, Var<T> b);
template <typename T> Var<T> scale(Var<T> a, T factor);
// a (m x n) + row (1 x n) broadcast over rows.
template <typename T> Var<T> add_row(Var<T> a, Var<T> row);
// a (m x n) + constant matrix of the same shape.
template <typename T> Var<T> add_constant(Var<T> a, const Matrix<T>& c);
// Multiplies row i by factors[i].
template <typename T> Var<T> scale_rows(Var<T> a, std::span<const T> factors);
template <typename T> Var<T> relu(Var<T> a);
template <typename T> Var<T> sigmoid(Var<T> a);
template <typename T> Var<T> softmax_rows(Var<T> a);
template <typename T> Var<T> layer_norm(Var<T> x, Var<T> gain, Var<T> bias, T eps);
template <typename T> Var<T> concat_cols(std::span<const Var<T>> parts);
template <typename T> Var<T> slice_rows(Var<T> a, Eigen::Index begin, Eigen::Index count);
// Rows of `table` selected by ids; gradient scatters back into the table.
template <typename T> Var<T> gather_rows(Var<T> table, std::span<const int> ids);
// Copy of the value with no gradient path.
template <typename T> Var<T> detach(Var<T> a);
template <typename T> Var<T> sum(Var<T> a);
template <typename T> Var<T> mean(Var<T> a);

// Multi-head scaled dot-product attention over independent segments. When
// memory_keys / memory_values are valid their rows are appended to the keys
// and values of every segment and are visible to every query.
template <typename T>
Var<T> segmented_attention(Var<T> queries, Var<T> keys, Var<T> values, Var<T> memory_keys,
                           Var<T> memory_values, std::span<const AttentionSegment> segments, int heads);

// sum_i weights[i] * -log softmax(logits_i)[targets[i]]; rows with zero
// weight are skipped entirely.
template <typename T>
Var<T> weighted_nll(Var<T> logits, std::span<const int> targets, std::span<const T> weights);

// Mean over elements of the Huber penalty on (a - b).
template <typename T> Var<T> huber_mean(Var<T> a, Var<T> b, T delta);

template <typename T>
Var<T> linear(Var<T> x, Var<T> weight, Var<T> bias) {
  return bias.valid() ? add_row(matmul(x, weight), bias) : matmul(x, weight);
}

}  // namespace xt2c
