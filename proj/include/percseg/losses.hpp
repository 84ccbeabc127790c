#pragma once
// Segmentation training objective: Dice overlap loss plus unweighted soft
// cross-entropy over per-pixel class probabilities.

#include <cstdint>
#include <vector>

#include "percseg/tensor.hpp"

namespace percseg {

// probs: [N, K] softmax outputs; onehot: [N, K] with exactly one 1 per row.
// dice = 1 - (2/N) * sum_n sum_k p*y / (p + y), with 0/0 terms equal to 0.
template <typename T>
TensorT<T> dice_loss(const TensorT<T>& probs, const TensorT<T>& onehot);

// ce = -(1/N) * sum_n sum_k y * log(clamp(p, 1e-8, 1)).
template <typename T>
TensorT<T> soft_ce_loss(const TensorT<T>& probs, const TensorT<T>& onehot);

template <typename T>
TensorT<T> joint_loss(const TensorT<T>& probs, const TensorT<T>& onehot);

// Labels in [0, K) to one-hot rows.
template <typename T>
TensorT<T> onehot_rows(const std::vector<int64_t>& labels, int64_t num_classes);

}  // namespace percseg
