#include "percseg/losses.hpp"

#include <stdexcept>
#include <string>

namespace percseg {

namespace {

template <typename T>
void check_batch(const TensorT<T>& probs, const TensorT<T>& onehot, const char* what) {
    if (!probs.defined() || !onehot.defined()) {
        throw std::invalid_argument(std::string(what) + ": undefined batch");
    }
    if (probs.ndim() != 2 || onehot.ndim() != 2 || !same_shape(probs.shape(), onehot.shape())) {
        throw std::invalid_argument(std::string(what) + ": probs and onehot must both be [N,K]");
    }
    if (probs.size(0) < 1) throw std::invalid_argument(std::string(what) + ": empty batch");
}

}  // namespace

template <typename T>
TensorT<T> dice_loss(const TensorT<T>& probs, const TensorT<T>& onehot) {
    check_batch(probs, onehot, "dice_loss");
    const T n = static_cast<T>(probs.size(0));
    TensorT<T> terms = div0(mul(probs, onehot), add(probs, onehot));
    TensorT<T> total = scale(sum(terms), T(2) / n);
    TensorT<T> loss = sub(TensorT<T>::scalar(T(1)), total);
    ensure_finite(loss, "dice_loss");
    return loss;
}

template <typename T>
TensorT<T> soft_ce_loss(const TensorT<T>& probs, const TensorT<T>& onehot) {
    check_batch(probs, onehot, "soft_ce_loss");
    const T n = static_cast<T>(probs.size(0));
    TensorT<T> logp = log(clamp(probs, static_cast<T>(1e-8), T(1)));
    TensorT<T> loss = scale(sum(mul(onehot, logp)), T(-1) / n);
    ensure_finite(loss, "soft_ce_loss");
    return loss;
}

template <typename T>
TensorT<T> joint_loss(const TensorT<T>& probs, const TensorT<T>& onehot) {
    return add(dice_loss(probs, onehot), soft_ce_loss(probs, onehot));
}

template <typename T>
TensorT<T> onehot_rows(const std::vector<int64_t>& labels, int64_t num_classes) {
    if (labels.empty()) throw std::invalid_argument("onehot_rows: empty labels");
    if (num_classes < 2) throw std::invalid_argument("onehot_rows: need at least two classes");
    TensorT<T> out = TensorT<T>::zeros({static_cast<int64_t>(labels.size()), num_classes});
    T* p = out.mutable_data();
    for (size_t i = 0; i < labels.size(); ++i) {
        if (labels[i] < 0 || labels[i] >= num_classes) {
            throw std::invalid_argument("onehot_rows: label out of range");
        }
        p[i * static_cast<size_t>(num_classes) + static_cast<size_t>(labels[i])] = T(1);
    }
    return out;
}

#define PERCSEG_INSTANTIATE_LOSSES(T)                                                \
    template TensorT<T> dice_loss<T>(const TensorT<T>&, const TensorT<T>&);          \
    template TensorT<T> soft_ce_loss<T>(const TensorT<T>&, const TensorT<T>&);       \
    template TensorT<T> joint_loss<T>(const TensorT<T>&, const TensorT<T>&);         \
    template TensorT<T> onehot_rows<T>(const std::vector<int64_t>&, int64_t);

PERCSEG_INSTANTIATE_LOSSES(float)
PERCSEG_INSTANTIATE_LOSSES(double)

#undef PERCSEG_INSTANTIATE_LOSSES

}  // namespace percseg
