#pragma once

// Structural edits shared by the pruning stages: every helper keeps the
// config and the tensors consistent.

#include <span>
#include <string>
#include <vector>

#include "vitprune/model.hpp"

namespace vitprune::detail {

Tensor select_rows(const Tensor& t, std::span<const std::size_t> rows);
Tensor select_cols(const Tensor& t, std::span<const std::size_t> cols);
Tensor select_entries(const Tensor& t, std::span<const std::size_t> idx);

/// Keeps the listed heads (ascending) of one layer.
void keep_heads(VitModel& model, int layer, std::span<const std::size_t> heads);

/// Keeps the listed rows of every head's query/key block; `per_head_rows`
/// holds, for each head, the kept offsets within that head.
void keep_qk_rows(VitModel& model, int layer,
                  const std::vector<std::vector<std::size_t>>& per_head_rows);
void keep_value_rows(VitModel& model, int layer,
                     const std::vector<std::vector<std::size_t>>& per_head_rows);

/// Keeps the listed MLP neurons (ascending) of one layer.
void keep_neurons(VitModel& model, int layer, std::span<const std::size_t> neurons);

/// Keeps the listed residual-stream dimensions (ascending) in every tensor,
/// attached probes included.
void keep_embed_dims(VitModel& model, std::span<const std::size_t> dims);

/// Positions of `keep[i] == true`.
std::vector<std::size_t> kept_positions(const std::vector<bool>& keep);

}  // namespace vitprune::detail
