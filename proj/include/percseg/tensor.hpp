#pragma once
// N-dimensional tensors with reverse-mode automatic differentiation.
// Row-major contiguous storage, trailing-dimension broadcasting, and a
// per-step tape that records backward closures in topological order.

#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <string>
#include <vector>

namespace percseg {

using Shape = std::vector<int64_t>;

int64_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);
bool same_shape(const Shape& a, const Shape& b);

// splitmix64 core with Box-Muller normals; deterministic across platforms
// for a fixed seed, independent of the standard library's distributions.
class Rng {
public:
    explicit Rng(uint64_t seed);
    uint64_t next_u64();
    double unit();  // [0, 1)
    double uniform(double lo, double hi);
    double normal(double mean, double stddev);

private:
    uint64_t state_;
    bool has_spare_ = false;
    double spare_ = 0.0;
};

template <typename T>
class TapeT;

template <typename T>
class TensorT {
public:
    TensorT() = default;

    static TensorT zeros(Shape shape);
    static TensorT full(Shape shape, T value);
    static TensorT uniform(Shape shape, uint64_t seed, T lo, T hi);
    static TensorT normal(Shape shape, uint64_t seed, T mean, T stddev);
    static TensorT uniform(Shape shape, Rng& rng, T lo, T hi);
    static TensorT normal(Shape shape, Rng& rng, T mean, T stddev);
    static TensorT from(Shape shape, std::vector<T> values);
    static TensorT scalar(T value);

    const Shape& shape() const { return shape_; }
    int64_t ndim() const { return static_cast<int64_t>(shape_.size()); }
    int64_t size(int64_t axis) const;
    int64_t numel() const;
    bool defined() const { return buf_ != nullptr; }

    const T* data() const { return buf_->data(); }
    const std::vector<T>& vec() const { return *buf_; }
    // In-place writes are reserved for the optimizer update path and for
    // test setup; everything else treats buffers as immutable.
    T* mutable_data() { return buf_->data(); }

    T item() const;
    T at(std::initializer_list<int64_t> index) const;

    bool requires_grad() const { return node_ >= 0; }
    int node() const { return node_; }
    TapeT<T>* tape() const { return tape_; }

    TensorT detached() const;
    void rebind(TapeT<T>* tape, int node) { tape_ = tape; node_ = node; }
    static TensorT attached(TensorT value, TapeT<T>* tape, int node);
    // Same buffer under a different shape (element counts must match).
    TensorT viewed(Shape shape) const;

private:
    std::shared_ptr<std::vector<T>> buf_;
    Shape shape_;
    TapeT<T>* tape_ = nullptr;
    int node_ = -1;
};

// Gradients of a backward pass, indexed by tape node id. Nodes off the
// gradient path keep a default-constructed (undefined) tensor.
template <typename T>
struct GradTable {
    std::vector<TensorT<T>> by_node;
    bool has(int node) const {
        return node >= 0 && node < static_cast<int>(by_node.size()) && by_node[node].defined();
    }
    const TensorT<T>& at(int node) const;
};

template <typename T>
class TapeT {
public:
    // Backward closure: gradient w.r.t. the node's output -> gradients
    // w.r.t. the recorded inputs, in the same order.
    using BackwardFn = std::function<std::vector<TensorT<T>>(const TensorT<T>& grad_out)>;

    TensorT<T> watch(const TensorT<T>& leaf);
    void watch_inplace(TensorT<T>& leaf);

    int record(std::vector<int> inputs, BackwardFn backward);
    void note_saved(const Shape& shape);

    GradTable<T> backward(const TensorT<T>& root);

    size_t num_nodes() const { return nodes_.size(); }
    const std::vector<Shape>& saved_shapes() const { return saved_; }
    int64_t saved_elements() const;
    // Total elements of saved activations that carry the given extent on
    // some axis; used to measure how activation memory scales with the
    // input length.
    int64_t saved_elements_with_extent(int64_t extent) const;

private:
    struct Node {
        std::vector<int> inputs;
        BackwardFn backward;
    };
    std::vector<Node> nodes_;
    std::vector<Shape> saved_;
};

enum class Elementwise { Add, Sub, Mul, Div0 };
enum class Unary { Relu, Gelu, Exp, Log };

template <typename T>
TensorT<T> elementwise(const TensorT<T>& a, const TensorT<T>& b, Elementwise kind);
template <typename T>
TensorT<T> unary(const TensorT<T>& a, Unary kind);

template <typename T>
TensorT<T> add(const TensorT<T>& a, const TensorT<T>& b) { return elementwise(a, b, Elementwise::Add); }
template <typename T>
TensorT<T> sub(const TensorT<T>& a, const TensorT<T>& b) { return elementwise(a, b, Elementwise::Sub); }
template <typename T>
TensorT<T> mul(const TensorT<T>& a, const TensorT<T>& b) { return elementwise(a, b, Elementwise::Mul); }
// Division that defines 0/0 (and x/0) as 0; gradients vanish where the
// denominator is zero.
template <typename T>
TensorT<T> div0(const TensorT<T>& a, const TensorT<T>& b) { return elementwise(a, b, Elementwise::Div0); }

template <typename T>
TensorT<T> relu(const TensorT<T>& a) { return unary(a, Unary::Relu); }
template <typename T>
TensorT<T> gelu(const TensorT<T>& a) { return unary(a, Unary::Gelu); }
template <typename T>
TensorT<T> exp(const TensorT<T>& a) { return unary(a, Unary::Exp); }
template <typename T>
TensorT<T> log(const TensorT<T>& a) { return unary(a, Unary::Log); }

template <typename T>
TensorT<T> scale(const TensorT<T>& a, T factor);
template <typename T>
TensorT<T> add_scalar(const TensorT<T>& a, T value);
template <typename T>
TensorT<T> clamp(const TensorT<T>& a, T lo, T hi);

template <typename T>
TensorT<T> matmul(const TensorT<T>& a, const TensorT<T>& b);

template <typename T>
TensorT<T> softmax(const TensorT<T>& a, int64_t axis);
template <typename T>
TensorT<T> layer_norm(const TensorT<T>& a, int64_t axis, const TensorT<T>& gamma,
                      const TensorT<T>& beta, T eps);

// Zero-mean, unit-variance standardisation along the last axis (a
// layer_norm without the affine pair).
template <typename T>
TensorT<T> standardize(const TensorT<T>& a, T eps = static_cast<T>(1e-5));

template <typename T>
TensorT<T> reshape(const TensorT<T>& a, Shape shape);
template <typename T>
TensorT<T> permute(const TensorT<T>& a, const std::vector<int64_t>& axes);
template <typename T>
TensorT<T> concat(const std::vector<TensorT<T>>& parts, int64_t axis);
template <typename T>
TensorT<T> slice(const TensorT<T>& a, int64_t axis, int64_t start, int64_t length);

template <typename T>
TensorT<T> sum(const TensorT<T>& a);
template <typename T>
TensorT<T> sum(const TensorT<T>& a, int64_t axis, bool keepdim = false);
template <typename T>
TensorT<T> mean(const TensorT<T>& a);

Shape broadcast_shape(const Shape& a, const Shape& b);

template <typename T>
std::vector<int64_t> argmax_last(const TensorT<T>& a);

// Throws std::runtime_error if any element is NaN or infinite.
template <typename T>
void ensure_finite(const TensorT<T>& t, const char* what);

TensorT<double> to_double(const TensorT<float>& a);
TensorT<float> to_float(const TensorT<double>& a);

// Central-difference gradient checks, 64-bit only. Returns the max over
// coordinates of |analytic - numeric| / (max(|analytic|, |numeric|) + 1e-6).
using GradCheckFn = std::function<TensorT<double>(TapeT<double>&, const TensorT<double>&)>;
double gradcheck(const GradCheckFn& f, const TensorT<double>& x, double eps);

using GradCheckForward = std::function<TensorT<double>(TapeT<double>&)>;
double gradcheck_params(const GradCheckForward& forward,
                        const std::vector<TensorT<double>*>& params, double eps);

using Tensor = TensorT<float>;
using Tape = TapeT<float>;

}  // namespace percseg
