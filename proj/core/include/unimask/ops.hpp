#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "unimask/graph.hpp"

/// Differentiable primitives. Every function evaluates its forward value,
/// records a node on `g`, and returns the node id. Shapes are explicit: the
/// only broadcast is a bias vector added to each row of a matrix.
namespace unimask::ops {

inline constexpr double kLayerNormEps = 1e-6;

/// [m x k] * [k x n] -> [m x n]
NodeId matmul(Graph& g, NodeId a, NodeId b);
/// [m x n] -> [n x m]
NodeId transpose(Graph& g, NodeId a);
/// Elementwise sum of equal shapes.
NodeId add(Graph& g, NodeId a, NodeId b);
/// [m x n] + [n] broadcast over rows.
NodeId add_bias(Graph& g, NodeId a, NodeId bias);
/// Elementwise product of equal shapes.
NodeId mul(Graph& g, NodeId a, NodeId b);
NodeId scale(Graph& g, NodeId a, double factor);
/// Sum of all elements -> scalar.
NodeId sum(Graph& g, NodeId a);

/// Row-wise layer normalization with affine terms. A row of zero variance
/// normalizes to zeros (so the output equals `beta`).
NodeId layer_norm(Graph& g, NodeId x, NodeId gamma, NodeId beta, double eps = kLayerNormEps);
/// Row-wise softmax of a 2-D tensor.
NodeId softmax(Graph& g, NodeId x);
NodeId log_softmax(Graph& g, NodeId x);
/// Exact (erf) GELU.
NodeId gelu(Graph& g, NodeId x);

/// Gather rows of `table` [V x d] -> [ids.size() x d].
NodeId embedding_lookup(Graph& g, NodeId table, std::span<const int> ids);
/// [m x p] ++ [m x q] -> [m x (p+q)]
NodeId concat_lastdim(Graph& g, NodeId a, NodeId b);
/// Columns [start, start+len) of a 2-D tensor.
NodeId slice_lastdim(Graph& g, NodeId a, std::size_t start, std::size_t len);
/// Replace the listed rows of `x` [T x d] by the vector `fill` [d].
NodeId replace_rows(Graph& g, NodeId x, std::span<const std::size_t> rows, NodeId fill);

/// Weighted mean negative log-likelihood of `targets` under row-softmax of
/// `logits` [m x K]. Rows with zero weight do not contribute. An empty
/// `weights` span means unit weight everywhere.
NodeId cross_entropy(Graph& g, NodeId logits, std::span<const int> targets,
                     std::span<const double> weights = {});

/// Numerically stable log(sum(exp(row))) of one row.
double logsumexp(std::span<const double> row);

}  // namespace unimask::ops
