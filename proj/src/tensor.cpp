#include "percseg/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <limits>
#include <sstream>
#include <stdexcept>

namespace percseg {

int64_t shape_numel(const Shape& shape) {
    int64_t n = 1;
    for (int64_t e : shape) n *= e;
    return n;
}

std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << "[";
    for (size_t i = 0; i < shape.size(); ++i) {
        if (i) os << ",";
        os << shape[i];
    }
    os << "]";
    return os.str();
}

bool same_shape(const Shape& a, const Shape& b) { return a == b; }

namespace {

void check_extents(const Shape& shape) {
    for (int64_t e : shape) {
        if (e <= 0) {
            throw std::invalid_argument("tensor extent must be positive, got shape " +
                                        shape_str(shape));
        }
    }
}

// Contiguous row-major strides in elements.
std::vector<int64_t> contiguous_strides(const Shape& shape) {
    std::vector<int64_t> s(shape.size(), 1);
    for (int i = static_cast<int>(shape.size()) - 2; i >= 0; --i) {
        s[i] = s[i + 1] * shape[i + 1];
    }
    return s;
}

// Strides of `in` right-aligned against `out`, 0 on broadcast axes.
std::vector<int64_t> aligned_strides(const Shape& in, const Shape& out) {
    std::vector<int64_t> in_strides = contiguous_strides(in);
    std::vector<int64_t> s(out.size(), 0);
    int64_t off = static_cast<int64_t>(out.size()) - static_cast<int64_t>(in.size());
    for (size_t d = 0; d < out.size(); ++d) {
        int64_t id = static_cast<int64_t>(d) - off;
        if (id < 0) continue;
        if (in[id] == 1 && out[d] != 1) continue;  // broadcast
        if (in[id] != out[d]) {
            throw std::invalid_argument("shapes not broadcast-compatible: " + shape_str(in) +
                                        " vs " + shape_str(out));
        }
        s[d] = in_strides[id];
    }
    return s;
}

}  // namespace

Shape broadcast_shape(const Shape& a, const Shape& b) {
    size_t nd = std::max(a.size(), b.size());
    Shape out(nd, 1);
    for (size_t d = 0; d < nd; ++d) {
        int64_t ea = d < nd - a.size() ? 1 : a[d - (nd - a.size())];
        int64_t eb = d < nd - b.size() ? 1 : b[d - (nd - b.size())];
        if (ea != eb && ea != 1 && eb != 1) {
            throw std::invalid_argument("incompatible shapes for broadcasting: " + shape_str(a) +
                                        " vs " + shape_str(b));
        }
        out[d] = std::max(ea, eb);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Rng

Rng::Rng(uint64_t seed) : state_(seed ^ 0x9E3779B97F4A7C15ull) {}

uint64_t Rng::next_u64() {
    // splitmix64
    uint64_t z = (state_ += 0x9E3779B97F4A7C15ull);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
    return z ^ (z >> 31);
}

double Rng::unit() {
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
}

double Rng::uniform(double lo, double hi) { return lo + (hi - lo) * unit(); }

double Rng::normal(double mean, double stddev) {
    if (has_spare_) {
        has_spare_ = false;
        return mean + stddev * spare_;
    }
    double u1 = 0.0, u2 = 0.0;
    do {
        u1 = unit();
    } while (u1 <= 0.0);
    u2 = unit();
    double r = std::sqrt(-2.0 * std::log(u1));
    double a = 2.0 * 3.14159265358979323846 * u2;
    spare_ = r * std::sin(a);
    has_spare_ = true;
    return mean + stddev * r * std::cos(a);
}

// ---------------------------------------------------------------------------
// TensorT

template <typename T>
TensorT<T> TensorT<T>::zeros(Shape shape) {
    check_extents(shape);
    TensorT t;
    t.shape_ = std::move(shape);
    t.buf_ = std::make_shared<std::vector<T>>(shape_numel(t.shape_), T(0));
    return t;
}

template <typename T>
TensorT<T> TensorT<T>::full(Shape shape, T value) {
    check_extents(shape);
    TensorT t;
    t.shape_ = std::move(shape);
    t.buf_ = std::make_shared<std::vector<T>>(shape_numel(t.shape_), value);
    return t;
}

template <typename T>
TensorT<T> TensorT<T>::uniform(Shape shape, uint64_t seed, T lo, T hi) {
    Rng rng(seed);
    return uniform(std::move(shape), rng, lo, hi);
}

template <typename T>
TensorT<T> TensorT<T>::normal(Shape shape, uint64_t seed, T mean, T stddev) {
    Rng rng(seed);
    return normal(std::move(shape), rng, mean, stddev);
}

template <typename T>
TensorT<T> TensorT<T>::uniform(Shape shape, Rng& rng, T lo, T hi) {
    TensorT t = zeros(std::move(shape));
    T* p = t.mutable_data();
    int64_t n = t.numel();
    for (int64_t i = 0; i < n; ++i) p[i] = static_cast<T>(rng.uniform(lo, hi));
    return t;
}

template <typename T>
TensorT<T> TensorT<T>::normal(Shape shape, Rng& rng, T mean, T stddev) {
    TensorT t = zeros(std::move(shape));
    T* p = t.mutable_data();
    int64_t n = t.numel();
    for (int64_t i = 0; i < n; ++i) p[i] = static_cast<T>(rng.normal(mean, stddev));
    return t;
}

template <typename T>
TensorT<T> TensorT<T>::from(Shape shape, std::vector<T> values) {
    check_extents(shape);
    if (shape_numel(shape) != static_cast<int64_t>(values.size())) {
        throw std::invalid_argument("value count " + std::to_string(values.size()) +
                                    " does not match shape " + shape_str(shape));
    }
    TensorT t;
    t.shape_ = std::move(shape);
    t.buf_ = std::make_shared<std::vector<T>>(std::move(values));
    return t;
}

template <typename T>
TensorT<T> TensorT<T>::scalar(T value) {
    TensorT t;
    t.shape_ = {};
    t.buf_ = std::make_shared<std::vector<T>>(1, value);
    return t;
}

template <typename T>
int64_t TensorT<T>::size(int64_t axis) const {
    int64_t nd = ndim();
    if (axis < 0) axis += nd;
    if (axis < 0 || axis >= nd) {
        throw std::invalid_argument("axis out of range for shape " + shape_str(shape_));
    }
    return shape_[axis];
}

template <typename T>
int64_t TensorT<T>::numel() const {
    return buf_ ? static_cast<int64_t>(buf_->size()) : 0;
}

template <typename T>
T TensorT<T>::item() const {
    if (!defined() || numel() != 1) {
        throw std::invalid_argument("item() requires a single-element tensor");
    }
    return (*buf_)[0];
}

template <typename T>
T TensorT<T>::at(std::initializer_list<int64_t> index) const {
    if (static_cast<int64_t>(index.size()) != ndim()) {
        throw std::invalid_argument("index rank mismatch");
    }
    auto strides = contiguous_strides(shape_);
    int64_t off = 0;
    size_t d = 0;
    for (int64_t i : index) {
        if (i < 0 || i >= shape_[d]) throw std::invalid_argument("index out of range");
        off += i * strides[d];
        ++d;
    }
    return (*buf_)[off];
}

template <typename T>
TensorT<T> TensorT<T>::detached() const {
    TensorT t = *this;
    t.tape_ = nullptr;
    t.node_ = -1;
    return t;
}

template <typename T>
TensorT<T> TensorT<T>::attached(TensorT value, TapeT<T>* tape, int node) {
    value.tape_ = tape;
    value.node_ = node;
    return value;
}

template <typename T>
TensorT<T> TensorT<T>::viewed(Shape shape) const {
    if (shape_numel(shape) != numel()) {
        throw std::invalid_argument("viewed: element count mismatch");
    }
    TensorT t;
    t.buf_ = buf_;
    t.shape_ = std::move(shape);
    return t;
}

// ---------------------------------------------------------------------------
// TapeT

template <typename T>
const TensorT<T>& GradTable<T>::at(int node) const {
    if (!has(node)) throw std::invalid_argument("no gradient recorded for node");
    return by_node[node];
}

template <typename T>
TensorT<T> TapeT<T>::watch(const TensorT<T>& leaf) {
    if (!leaf.defined()) throw std::invalid_argument("cannot watch an undefined tensor");
    int node = record({}, nullptr);
    return TensorT<T>::attached(leaf.detached(), this, node);
}

template <typename T>
void TapeT<T>::watch_inplace(TensorT<T>& leaf) {
    if (!leaf.defined()) throw std::invalid_argument("cannot watch an undefined tensor");
    int node = record({}, nullptr);
    leaf.rebind(this, node);
}

template <typename T>
int TapeT<T>::record(std::vector<int> inputs, BackwardFn backward) {
    for (int i : inputs) {
        if (i < 0 || i >= static_cast<int>(nodes_.size())) {
            throw std::invalid_argument("tape input node out of order");
        }
    }
    nodes_.push_back(Node{std::move(inputs), std::move(backward)});
    return static_cast<int>(nodes_.size()) - 1;
}

template <typename T>
void TapeT<T>::note_saved(const Shape& shape) {
    saved_.push_back(shape);
}

template <typename T>
int64_t TapeT<T>::saved_elements() const {
    int64_t n = 0;
    for (const Shape& s : saved_) n += shape_numel(s);
    return n;
}

template <typename T>
int64_t TapeT<T>::saved_elements_with_extent(int64_t extent) const {
    int64_t n = 0;
    for (const Shape& s : saved_) {
        if (std::find(s.begin(), s.end(), extent) != s.end()) n += shape_numel(s);
    }
    return n;
}

namespace {

template <typename T>
void accumulate(TensorT<T>& into, const TensorT<T>& inc) {
    if (!into.defined()) {
        into = inc;
        return;
    }
    if (!same_shape(into.shape(), inc.shape())) {
        throw std::invalid_argument("gradient shape mismatch during accumulation");
    }
    // Out-of-place: gradients may alias saved buffers.
    TensorT<T> fresh = TensorT<T>::zeros(into.shape());
    const T* a = into.data();
    const T* b = inc.data();
    T* o = fresh.mutable_data();
    int64_t n = fresh.numel();
    for (int64_t i = 0; i < n; ++i) o[i] = a[i] + b[i];
    into = fresh;
}

}  // namespace

template <typename T>
GradTable<T> TapeT<T>::backward(const TensorT<T>& root) {
    if (root.tape() != this || root.node() < 0) {
        throw std::invalid_argument("backward root is not attached to this tape");
    }
    if (root.numel() != 1) {
        throw std::invalid_argument("backward root must be scalar, got shape " +
                                    shape_str(root.shape()));
    }
    GradTable<T> table;
    table.by_node.resize(nodes_.size());
    table.by_node[root.node()] = TensorT<T>::full(root.shape(), T(1));
    for (int i = static_cast<int>(nodes_.size()) - 1; i >= 0; --i) {
        TensorT<T>& g = table.by_node[i];
        if (!g.defined()) continue;
        const Node& node = nodes_[i];
        if (!node.backward) continue;  // leaf
        std::vector<TensorT<T>> input_grads = node.backward(g);
        if (input_grads.size() != node.inputs.size()) {
            throw std::runtime_error("backward closure returned wrong gradient count");
        }
        for (size_t j = 0; j < node.inputs.size(); ++j) {
            if (!input_grads[j].defined()) continue;
            accumulate(table.by_node[node.inputs[j]], input_grads[j]);
        }
    }
    return table;
}

// ---------------------------------------------------------------------------
// Shared op plumbing

namespace {

template <typename T>
TapeT<T>* common_tape(std::initializer_list<const TensorT<T>*> tensors) {
    TapeT<T>* tape = nullptr;
    for (const TensorT<T>* t : tensors) {
        if (!t->requires_grad()) continue;
        if (tape && t->tape() != tape) {
            throw std::invalid_argument("operands belong to different tapes");
        }
        tape = t->tape();
    }
    return tape;
}

// Sums `g` down to `target` (inverse of broadcasting).
template <typename T>
TensorT<T> reduce_to(const TensorT<T>& g, const Shape& target) {
    if (same_shape(g.shape(), target)) return g;
    TensorT<T> out = TensorT<T>::zeros(target);
    const Shape& gs = g.shape();
    std::vector<int64_t> tstr = aligned_strides(target, gs);
    int nd = static_cast<int>(gs.size());
    const T* gp = g.data();
    T* op = out.mutable_data();
    if (nd == 0) {
        op[0] += gp[0];
        return out;
    }
    std::vector<int64_t> idx(nd, 0);
    int64_t toff = 0;
    int64_t total = shape_numel(gs);
    int64_t inner = gs[nd - 1];
    int64_t tinner = tstr[nd - 1];
    for (int64_t base = 0; base < total; base += inner) {
        for (int64_t j = 0; j < inner; ++j) op[toff + j * tinner] += gp[base + j];
        for (int d = nd - 2; d >= 0; --d) {
            idx[d]++;
            toff += tstr[d];
            if (idx[d] < gs[d]) break;
            idx[d] = 0;
            toff -= tstr[d] * gs[d];
        }
    }
    return out;
}

template <typename T, typename F>
TensorT<T> broadcast_map(const TensorT<T>& a, const TensorT<T>& b, F f) {
    Shape out_shape = broadcast_shape(a.shape(), b.shape());
    TensorT<T> out = TensorT<T>::zeros(out_shape);
    const T* ap = a.data();
    const T* bp = b.data();
    T* op = out.mutable_data();
    if (same_shape(a.shape(), b.shape())) {
        int64_t n = out.numel();
        for (int64_t i = 0; i < n; ++i) op[i] = f(ap[i], bp[i]);
        return out;
    }
    std::vector<int64_t> as = aligned_strides(a.shape(), out_shape);
    std::vector<int64_t> bs = aligned_strides(b.shape(), out_shape);
    int nd = static_cast<int>(out_shape.size());
    if (nd == 0) {
        op[0] = f(ap[0], bp[0]);
        return out;
    }
    std::vector<int64_t> idx(nd, 0);
    int64_t aoff = 0, boff = 0;
    int64_t total = out.numel();
    int64_t inner = out_shape[nd - 1];
    int64_t ainner = as[nd - 1], binner = bs[nd - 1];
    for (int64_t base = 0; base < total; base += inner) {
        if (ainner == 1 && binner == 1) {
            for (int64_t j = 0; j < inner; ++j) op[base + j] = f(ap[aoff + j], bp[boff + j]);
        } else {
            for (int64_t j = 0; j < inner; ++j)
                op[base + j] = f(ap[aoff + j * ainner], bp[boff + j * binner]);
        }
        for (int d = nd - 2; d >= 0; --d) {
            idx[d]++;
            aoff += as[d];
            boff += bs[d];
            if (idx[d] < out_shape[d]) break;
            idx[d] = 0;
            aoff -= as[d] * out_shape[d];
            boff -= bs[d] * out_shape[d];
        }
    }
    return out;
}

}  // namespace

template <typename T>
void ensure_finite(const TensorT<T>& t, const char* what) {
    const T* p = t.data();
    int64_t n = t.numel();
    for (int64_t i = 0; i < n; ++i) {
        if (!std::isfinite(static_cast<double>(p[i]))) {
            throw std::runtime_error(std::string(what) + " produced a non-finite value");
        }
    }
}

// ---------------------------------------------------------------------------
// Elementwise

template <typename T>
TensorT<T> elementwise(const TensorT<T>& a, const TensorT<T>& b, Elementwise kind) {
    TensorT<T> out;
    switch (kind) {
        case Elementwise::Add:
            out = broadcast_map(a, b, [](T x, T y) { return x + y; });
            break;
        case Elementwise::Sub:
            out = broadcast_map(a, b, [](T x, T y) { return x - y; });
            break;
        case Elementwise::Mul:
            out = broadcast_map(a, b, [](T x, T y) { return x * y; });
            break;
        case Elementwise::Div0:
            out = broadcast_map(a, b, [](T x, T y) { return y == T(0) ? T(0) : x / y; });
            break;
    }
    TapeT<T>* tape = common_tape<T>({&a, &b});
    if (!tape) return out;

    const bool ga = a.requires_grad();
    const bool gb = b.requires_grad();
    std::vector<int> inputs;
    if (ga) inputs.push_back(a.node());
    if (gb) inputs.push_back(b.node());
    Shape ash = a.shape(), bsh = b.shape();

    typename TapeT<T>::BackwardFn fn;
    switch (kind) {
        case Elementwise::Add:
            fn = [ga, gb, ash, bsh](const TensorT<T>& g) {
                std::vector<TensorT<T>> out_g;
                if (ga) out_g.push_back(reduce_to(g, ash));
                if (gb) out_g.push_back(reduce_to(g, bsh));
                return out_g;
            };
            break;
        case Elementwise::Sub:
            fn = [ga, gb, ash, bsh](const TensorT<T>& g) {
                std::vector<TensorT<T>> out_g;
                if (ga) out_g.push_back(reduce_to(g, ash));
                if (gb) {
                    TensorT<T> ng = broadcast_map(g, g, [](T x, T) { return -x; });
                    out_g.push_back(reduce_to(ng, bsh));
                }
                return out_g;
            };
            break;
        case Elementwise::Mul: {
            TensorT<T> av = a.detached();
            TensorT<T> bv = b.detached();
            tape->note_saved(ash);
            tape->note_saved(bsh);
            fn = [ga, gb, ash, bsh, av, bv](const TensorT<T>& g) {
                std::vector<TensorT<T>> out_g;
                if (ga) out_g.push_back(reduce_to(broadcast_map(g, bv, [](T x, T y) { return x * y; }), ash));
                if (gb) out_g.push_back(reduce_to(broadcast_map(g, av, [](T x, T y) { return x * y; }), bsh));
                return out_g;
            };
            break;
        }
        case Elementwise::Div0: {
            TensorT<T> av = a.detached();
            TensorT<T> bv = b.detached();
            tape->note_saved(ash);
            tape->note_saved(bsh);
            fn = [ga, gb, ash, bsh, av, bv](const TensorT<T>& g) {
                std::vector<TensorT<T>> out_g;
                if (ga) {
                    TensorT<T> da = broadcast_map(
                        g, bv, [](T x, T y) { return y == T(0) ? T(0) : x / y; });
                    out_g.push_back(reduce_to(da, ash));
                }
                if (gb) {
                    TensorT<T> ratio = broadcast_map(
                        av, bv, [](T x, T y) { return y == T(0) ? T(0) : -x / (y * y); });
                    TensorT<T> db = broadcast_map(g, ratio, [](T x, T y) { return x * y; });
                    out_g.push_back(reduce_to(db, bsh));
                }
                return out_g;
            };
            break;
        }
    }
    int node = tape->record(std::move(inputs), std::move(fn));
    return TensorT<T>::attached(std::move(out), tape, node);
}

namespace {

constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)
constexpr double kGeluA = 0.044715;

template <typename T>
T gelu_value(T x) {
    double xd = static_cast<double>(x);
    double u = kGeluC * (xd + kGeluA * xd * xd * xd);
    return static_cast<T>(0.5 * xd * (1.0 + std::tanh(u)));
}

template <typename T>
T gelu_grad(T x) {
    double xd = static_cast<double>(x);
    double u = kGeluC * (xd + kGeluA * xd * xd * xd);
    double th = std::tanh(u);
    double sech2 = 1.0 - th * th;
    return static_cast<T>(0.5 * (1.0 + th) + 0.5 * xd * sech2 * kGeluC * (1.0 + 3.0 * kGeluA * xd * xd));
}

}  // namespace

template <typename T>
TensorT<T> unary(const TensorT<T>& a, Unary kind) {
    TensorT<T> out = TensorT<T>::zeros(a.shape());
    const T* ap = a.data();
    T* op = out.mutable_data();
    int64_t n = a.numel();
    switch (kind) {
        case Unary::Relu:
            for (int64_t i = 0; i < n; ++i) op[i] = ap[i] > T(0) ? ap[i] : T(0);
            break;
        case Unary::Gelu:
            for (int64_t i = 0; i < n; ++i) op[i] = gelu_value(ap[i]);
            break;
        case Unary::Exp:
            for (int64_t i = 0; i < n; ++i) op[i] = std::exp(ap[i]);
            ensure_finite(out, "exp");
            break;
        case Unary::Log:
            for (int64_t i = 0; i < n; ++i) {
                if (ap[i] <= T(0)) {
                    throw std::invalid_argument("log requires strictly positive inputs");
                }
                op[i] = std::log(ap[i]);
            }
            break;
    }
    if (!a.requires_grad()) return out;
    TapeT<T>* tape = a.tape();
    typename TapeT<T>::BackwardFn fn;
    switch (kind) {
        case Unary::Relu: {
            TensorT<T> av = a.detached();
            tape->note_saved(a.shape());
            fn = [av](const TensorT<T>& g) {
                return std::vector<TensorT<T>>{
                    broadcast_map(g, av, [](T gv, T xv) { return xv > T(0) ? gv : T(0); })};
            };
            break;
        }
        case Unary::Gelu: {
            TensorT<T> av = a.detached();
            tape->note_saved(a.shape());
            fn = [av](const TensorT<T>& g) {
                return std::vector<TensorT<T>>{
                    broadcast_map(g, av, [](T gv, T xv) { return gv * gelu_grad(xv); })};
            };
            break;
        }
        case Unary::Exp: {
            TensorT<T> ov = out.detached();
            tape->note_saved(out.shape());
            fn = [ov](const TensorT<T>& g) {
                return std::vector<TensorT<T>>{
                    broadcast_map(g, ov, [](T gv, T yv) { return gv * yv; })};
            };
            break;
        }
        case Unary::Log: {
            TensorT<T> av = a.detached();
            tape->note_saved(a.shape());
            fn = [av](const TensorT<T>& g) {
                return std::vector<TensorT<T>>{
                    broadcast_map(g, av, [](T gv, T xv) { return gv / xv; })};
            };
            break;
        }
    }
    int node = tape->record({a.node()}, std::move(fn));
    return TensorT<T>::attached(std::move(out), tape, node);
}

template <typename T>
TensorT<T> scale(const TensorT<T>& a, T factor) {
    TensorT<T> out = broadcast_map(a, a, [factor](T x, T) { return x * factor; });
    if (!a.requires_grad()) return out;
    TapeT<T>* tape = a.tape();
    int node = tape->record({a.node()}, [factor](const TensorT<T>& g) {
        return std::vector<TensorT<T>>{broadcast_map(g, g, [factor](T x, T) { return x * factor; })};
    });
    return TensorT<T>::attached(std::move(out), tape, node);
}

template <typename T>
TensorT<T> add_scalar(const TensorT<T>& a, T value) {
    TensorT<T> out = broadcast_map(a, a, [value](T x, T) { return x + value; });
    if (!a.requires_grad()) return out;
    TapeT<T>* tape = a.tape();
    int node = tape->record({a.node()}, [](const TensorT<T>& g) {
        return std::vector<TensorT<T>>{g};
    });
    return TensorT<T>::attached(std::move(out), tape, node);
}

template <typename T>
TensorT<T> clamp(const TensorT<T>& a, T lo, T hi) {
    if (lo > hi) throw std::invalid_argument("clamp bounds out of order");
    TensorT<T> out = broadcast_map(a, a, [lo, hi](T x, T) { return std::min(hi, std::max(lo, x)); });
    if (!a.requires_grad()) return out;
    TapeT<T>* tape = a.tape();
    TensorT<T> av = a.detached();
    tape->note_saved(a.shape());
    int node = tape->record({a.node()}, [av, lo, hi](const TensorT<T>& g) {
        return std::vector<TensorT<T>>{broadcast_map(
            g, av, [lo, hi](T gv, T xv) { return (xv >= lo && xv <= hi) ? gv : T(0); })};
    });
    return TensorT<T>::attached(std::move(out), tape, node);
}

// ---------------------------------------------------------------------------
// matmul

namespace {

// C[M,N] += A[M,K] * B[K,N], all row-major. Register-blocked micro-kernel:
// an MR x NR tile of C stays in accumulators across the whole K loop.
template <typename T>
void gemm_nn(const T* a, const T* b, T* c, int64_t m, int64_t k, int64_t n) {
    constexpr int64_t MR = 4;
    constexpr int64_t NR = 32;
    const int64_t m_main = m - m % MR;
    const int64_t n_main = n - n % NR;
    for (int64_t i0 = 0; i0 < m_main; i0 += MR) {
        for (int64_t j0 = 0; j0 < n_main; j0 += NR) {
            T acc[MR][NR];
            for (int64_t r = 0; r < MR; ++r)
                for (int64_t j = 0; j < NR; ++j) acc[r][j] = T(0);
            const T* brow = b + j0;
            for (int64_t p = 0; p < k; ++p, brow += n) {
                for (int64_t r = 0; r < MR; ++r) {
                    const T av = a[(i0 + r) * k + p];
                    for (int64_t j = 0; j < NR; ++j) acc[r][j] += av * brow[j];
                }
            }
            for (int64_t r = 0; r < MR; ++r) {
                T* crow = c + (i0 + r) * n + j0;
                for (int64_t j = 0; j < NR; ++j) crow[j] += acc[r][j];
            }
        }
        // right edge
        for (int64_t j0 = n_main; j0 < n; ++j0) {
            for (int64_t r = 0; r < MR; ++r) {
                const T* arow = a + (i0 + r) * k;
                T acc = T(0);
                for (int64_t p = 0; p < k; ++p) acc += arow[p] * b[p * n + j0];
                c[(i0 + r) * n + j0] += acc;
            }
        }
    }
    // bottom edge
    for (int64_t i = m_main; i < m; ++i) {
        const T* arow = a + i * k;
        T* crow = c + i * n;
        for (int64_t p = 0; p < k; ++p) {
            const T av = arow[p];
            const T* brow = b + p * n;
            for (int64_t j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

template <typename T>
void transpose_2d(const T* src, T* dst, int64_t rows, int64_t cols) {
    constexpr int64_t kB = 32;
    for (int64_t r0 = 0; r0 < rows; r0 += kB) {
        int64_t r1 = std::min(rows, r0 + kB);
        for (int64_t c0 = 0; c0 < cols; c0 += kB) {
            int64_t c1 = std::min(cols, c0 + kB);
            for (int64_t r = r0; r < r1; ++r)
                for (int64_t c = c0; c < c1; ++c) dst[c * rows + r] = src[r * cols + c];
        }
    }
}

struct MatmulPlan {
    Shape out_batch;
    int64_t batches = 1;
    int64_t m = 0, k = 0, n = 0;
    std::vector<int64_t> a_offsets;  // per batch, in matrices
    std::vector<int64_t> b_offsets;
};

MatmulPlan plan_matmul(const Shape& ashape, const Shape& bshape) {
    if (ashape.size() < 2 || bshape.size() < 2) {
        throw std::invalid_argument("matmul operands must have rank >= 2");
    }
    MatmulPlan plan;
    plan.m = ashape[ashape.size() - 2];
    plan.k = ashape[ashape.size() - 1];
    int64_t k2 = bshape[bshape.size() - 2];
    plan.n = bshape[bshape.size() - 1];
    if (plan.k != k2) {
        throw std::invalid_argument("matmul inner extent mismatch: " + shape_str(ashape) +
                                    " vs " + shape_str(bshape));
    }
    Shape abatch(ashape.begin(), ashape.end() - 2);
    Shape bbatch(bshape.begin(), bshape.end() - 2);
    plan.out_batch = broadcast_shape(abatch, bbatch);
    plan.batches = shape_numel(plan.out_batch);
    std::vector<int64_t> as = aligned_strides(abatch, plan.out_batch);
    std::vector<int64_t> bs = aligned_strides(bbatch, plan.out_batch);
    plan.a_offsets.resize(plan.batches);
    plan.b_offsets.resize(plan.batches);
    int nd = static_cast<int>(plan.out_batch.size());
    std::vector<int64_t> idx(nd, 0);
    int64_t aoff = 0, boff = 0;
    for (int64_t bi = 0; bi < plan.batches; ++bi) {
        plan.a_offsets[bi] = aoff;
        plan.b_offsets[bi] = boff;
        for (int d = nd - 1; d >= 0; --d) {
            idx[d]++;
            aoff += as[d];
            boff += bs[d];
            if (idx[d] < plan.out_batch[d]) break;
            idx[d] = 0;
            aoff -= as[d] * plan.out_batch[d];
            boff -= bs[d] * plan.out_batch[d];
        }
    }
    return plan;
}

}  // namespace

template <typename T>
TensorT<T> matmul(const TensorT<T>& a, const TensorT<T>& b) {
    MatmulPlan plan = plan_matmul(a.shape(), b.shape());
    Shape out_shape = plan.out_batch;
    out_shape.push_back(plan.m);
    out_shape.push_back(plan.n);
    TensorT<T> out = TensorT<T>::zeros(out_shape);
    const T* ap = a.data();
    const T* bp = b.data();
    T* op = out.mutable_data();
    const int64_t mk = plan.m * plan.k;
    const int64_t kn = plan.k * plan.n;
    const int64_t mn = plan.m * plan.n;
    for (int64_t bi = 0; bi < plan.batches; ++bi) {
        gemm_nn(ap + plan.a_offsets[bi] * mk, bp + plan.b_offsets[bi] * kn, op + bi * mn,
                plan.m, plan.k, plan.n);
    }
    TapeT<T>* tape = common_tape<T>({&a, &b});
    if (!tape) return out;
    const bool ga = a.requires_grad();
    const bool gb = b.requires_grad();
    std::vector<int> inputs;
    if (ga) inputs.push_back(a.node());
    if (gb) inputs.push_back(b.node());
    TensorT<T> av = a.detached();
    TensorT<T> bv = b.detached();
    tape->note_saved(a.shape());
    tape->note_saved(b.shape());
    auto fn = [ga, gb, av, bv, plan, mk, kn, mn](const TensorT<T>& g) {
        std::vector<TensorT<T>> out_g;
        const T* gp = g.data();
        if (ga) {
            Shape full = plan.out_batch;
            full.push_back(plan.m);
            full.push_back(plan.k);
            TensorT<T> da = TensorT<T>::zeros(full);
            T* dap = da.mutable_data();
            std::vector<T> bt(static_cast<size_t>(plan.k * plan.n));
            for (int64_t bi = 0; bi < plan.batches; ++bi) {
                transpose_2d(bv.data() + plan.b_offsets[bi] * kn, bt.data(), plan.k, plan.n);
                gemm_nn(gp + bi * mn, bt.data(), dap + bi * mk, plan.m, plan.n, plan.k);
            }
            out_g.push_back(reduce_to(da, av.shape()));
        }
        if (gb) {
            Shape full = plan.out_batch;
            full.push_back(plan.k);
            full.push_back(plan.n);
            TensorT<T> db = TensorT<T>::zeros(full);
            T* dbp = db.mutable_data();
            std::vector<T> at(static_cast<size_t>(plan.m * plan.k));
            for (int64_t bi = 0; bi < plan.batches; ++bi) {
                transpose_2d(av.data() + plan.a_offsets[bi] * mk, at.data(), plan.m, plan.k);
                gemm_nn(at.data(), gp + bi * mn, dbp + bi * kn, plan.k, plan.m, plan.n);
            }
            out_g.push_back(reduce_to(db, bv.shape()));
        }
        return out_g;
    };
    int node = tape->record(std::move(inputs), std::move(fn));
    return TensorT<T>::attached(std::move(out), tape, node);
}

// ---------------------------------------------------------------------------
// softmax / layer_norm

namespace {

std::vector<int64_t> move_axis_last(int64_t nd, int64_t axis) {
    std::vector<int64_t> perm;
    perm.reserve(nd);
    for (int64_t d = 0; d < nd; ++d)
        if (d != axis) perm.push_back(d);
    perm.push_back(axis);
    return perm;
}

std::vector<int64_t> inverse_perm(const std::vector<int64_t>& perm) {
    std::vector<int64_t> inv(perm.size());
    for (size_t i = 0; i < perm.size(); ++i) inv[perm[i]] = static_cast<int64_t>(i);
    return inv;
}

int64_t normalize_axis(const Shape& shape, int64_t axis) {
    int64_t nd = static_cast<int64_t>(shape.size());
    if (axis < 0) axis += nd;
    if (axis < 0 || axis >= nd) {
        throw std::invalid_argument("axis out of range for shape " + shape_str(shape));
    }
    return axis;
}

}  // namespace

template <typename T>
TensorT<T> softmax(const TensorT<T>& a, int64_t axis) {
    if (a.ndim() == 0) throw std::invalid_argument("softmax requires rank >= 1");
    axis = normalize_axis(a.shape(), axis);
    if (axis != a.ndim() - 1) {
        auto perm = move_axis_last(a.ndim(), axis);
        return permute(softmax(permute(a, perm), a.ndim() - 1), inverse_perm(perm));
    }
    const int64_t ext = a.shape().back();
    const int64_t rows = a.numel() / ext;
    TensorT<T> out = TensorT<T>::zeros(a.shape());
    const T* ap = a.data();
    T* op = out.mutable_data();
    for (int64_t r = 0; r < rows; ++r) {
        const T* x = ap + r * ext;
        T* y = op + r * ext;
        T mx = x[0];
        for (int64_t j = 1; j < ext; ++j) mx = std::max(mx, x[j]);
        T s = T(0);
        for (int64_t j = 0; j < ext; ++j) {
            y[j] = std::exp(x[j] - mx);
            s += y[j];
        }
        T inv = T(1) / s;
        for (int64_t j = 0; j < ext; ++j) y[j] *= inv;
    }
    if (!a.requires_grad()) return out;
    TapeT<T>* tape = a.tape();
    TensorT<T> ov = out.detached();
    tape->note_saved(out.shape());
    int node = tape->record({a.node()}, [ov, rows, ext](const TensorT<T>& g) {
        TensorT<T> dx = TensorT<T>::zeros(ov.shape());
        const T* yp = ov.data();
        const T* gp = g.data();
        T* dp = dx.mutable_data();
        for (int64_t r = 0; r < rows; ++r) {
            const T* y = yp + r * ext;
            const T* gr = gp + r * ext;
            T* d = dp + r * ext;
            T dot = T(0);
            for (int64_t j = 0; j < ext; ++j) dot += gr[j] * y[j];
            for (int64_t j = 0; j < ext; ++j) d[j] = y[j] * (gr[j] - dot);
        }
        return std::vector<TensorT<T>>{dx};
    });
    return TensorT<T>::attached(std::move(out), tape, node);
}

template <typename T>
TensorT<T> layer_norm(const TensorT<T>& a, int64_t axis, const TensorT<T>& gamma,
                      const TensorT<T>& beta, T eps) {
    if (a.ndim() == 0) throw std::invalid_argument("layer_norm requires rank >= 1");
    axis = normalize_axis(a.shape(), axis);
    if (axis != a.ndim() - 1) {
        auto perm = move_axis_last(a.ndim(), axis);
        return permute(layer_norm(permute(a, perm), a.ndim() - 1, gamma, beta, eps),
                       inverse_perm(perm));
    }
    const int64_t ext = a.shape().back();
    if (gamma.ndim() != 1 || gamma.size(0) != ext || beta.ndim() != 1 || beta.size(0) != ext) {
        throw std::invalid_argument("layer_norm affine parameters must have shape [" +
                                    std::to_string(ext) + "]");
    }
    const int64_t rows = a.numel() / ext;
    TensorT<T> out = TensorT<T>::zeros(a.shape());
    TensorT<T> xhat = TensorT<T>::zeros(a.shape());
    TensorT<T> istd = TensorT<T>::zeros({rows});
    const T* ap = a.data();
    const T* gp = gamma.data();
    const T* bp = beta.data();
    T* op = out.mutable_data();
    T* xp = xhat.mutable_data();
    T* ip = istd.mutable_data();
    for (int64_t r = 0; r < rows; ++r) {
        const T* x = ap + r * ext;
        T mu = T(0);
        for (int64_t j = 0; j < ext; ++j) mu += x[j];
        mu /= static_cast<T>(ext);
        T var = T(0);
        for (int64_t j = 0; j < ext; ++j) {
            T d = x[j] - mu;
            var += d * d;
        }
        var /= static_cast<T>(ext);
        T is = T(1) / std::sqrt(var + eps);
        ip[r] = is;
        T* xh = xp + r * ext;
        T* y = op + r * ext;
        for (int64_t j = 0; j < ext; ++j) {
            xh[j] = (x[j] - mu) * is;
            y[j] = gp[j] * xh[j] + bp[j];
        }
    }
    TapeT<T>* tape = common_tape<T>({&a, &gamma, &beta});
    if (!tape) return out;
    const bool gx = a.requires_grad();
    const bool gg = gamma.requires_grad();
    const bool gb = beta.requires_grad();
    std::vector<int> inputs;
    if (gx) inputs.push_back(a.node());
    if (gg) inputs.push_back(gamma.node());
    if (gb) inputs.push_back(beta.node());
    TensorT<T> gammav = gamma.detached();
    tape->note_saved(xhat.shape());
    tape->note_saved(istd.shape());
    auto fn = [gx, gg, gb, xhat, istd, gammav, rows, ext](const TensorT<T>& g) {
        std::vector<TensorT<T>> out_g;
        const T* xh = xhat.data();
        const T* is = istd.data();
        const T* gm = gammav.data();
        const T* gr = g.data();
        TensorT<T> dx, dgamma, dbeta;
        if (gx) dx = TensorT<T>::zeros(xhat.shape());
        if (gg) dgamma = TensorT<T>::zeros({ext});
        if (gb) dbeta = TensorT<T>::zeros({ext});
        for (int64_t r = 0; r < rows; ++r) {
            const T* xr = xh + r * ext;
            const T* grr = gr + r * ext;
            if (gg) {
                T* dgp = dgamma.mutable_data();
                for (int64_t j = 0; j < ext; ++j) dgp[j] += grr[j] * xr[j];
            }
            if (gb) {
                T* dbp = dbeta.mutable_data();
                for (int64_t j = 0; j < ext; ++j) dbp[j] += grr[j];
            }
            if (gx) {
                T m1 = T(0), m2 = T(0);
                for (int64_t j = 0; j < ext; ++j) {
                    T dxh = grr[j] * gm[j];
                    m1 += dxh;
                    m2 += dxh * xr[j];
                }
                m1 /= static_cast<T>(ext);
                m2 /= static_cast<T>(ext);
                T* dxr = dx.mutable_data() + r * ext;
                for (int64_t j = 0; j < ext; ++j) {
                    T dxh = grr[j] * gm[j];
                    dxr[j] = is[r] * (dxh - m1 - xr[j] * m2);
                }
            }
        }
        if (gx) out_g.push_back(dx);
        if (gg) out_g.push_back(dgamma);
        if (gb) out_g.push_back(dbeta);
        return out_g;
    };
    int node = tape->record(std::move(inputs), std::move(fn));
    return TensorT<T>::attached(std::move(out), tape, node);
}

template <typename T>
TensorT<T> standardize(const TensorT<T>& a, T eps) {
    if (a.ndim() == 0) throw std::invalid_argument("standardize requires rank >= 1");
    const int64_t ext = a.shape().back();
    const int64_t rows = a.numel() / ext;
    TensorT<T> out = TensorT<T>::zeros(a.shape());
    TensorT<T> istd = TensorT<T>::zeros({rows});
    const T* ap = a.data();
    T* op = out.mutable_data();
    T* ip = istd.mutable_data();
    for (int64_t r = 0; r < rows; ++r) {
        const T* x = ap + r * ext;
        T mu = T(0);
        for (int64_t j = 0; j < ext; ++j) mu += x[j];
        mu /= static_cast<T>(ext);
        T var = T(0);
        for (int64_t j = 0; j < ext; ++j) {
            const T d = x[j] - mu;
            var += d * d;
        }
        var /= static_cast<T>(ext);
        const T is = T(1) / std::sqrt(var + eps);
        ip[r] = is;
        T* y = op + r * ext;
        for (int64_t j = 0; j < ext; ++j) y[j] = (x[j] - mu) * is;
    }
    if (!a.requires_grad()) return out;
    TapeT<T>* tape = a.tape();
    TensorT<T> ov = out.detached();
    tape->note_saved(out.shape());
    tape->note_saved(istd.shape());
    int node = tape->record({a.node()}, [ov, istd, rows, ext](const TensorT<T>& g) {
        TensorT<T> dx = TensorT<T>::zeros(ov.shape());
        const T* xh = ov.data();
        const T* is = istd.data();
        const T* gp = g.data();
        T* dp = dx.mutable_data();
        for (int64_t r = 0; r < rows; ++r) {
            const T* xr = xh + r * ext;
            const T* gr = gp + r * ext;
            T m1 = T(0), m2 = T(0);
            for (int64_t j = 0; j < ext; ++j) {
                m1 += gr[j];
                m2 += gr[j] * xr[j];
            }
            m1 /= static_cast<T>(ext);
            m2 /= static_cast<T>(ext);
            T* dr = dp + r * ext;
            for (int64_t j = 0; j < ext; ++j) dr[j] = is[r] * (gr[j] - m1 - xr[j] * m2);
        }
        return std::vector<TensorT<T>>{dx};
    });
    return TensorT<T>::attached(std::move(out), tape, node);
}

// ---------------------------------------------------------------------------
// Shape ops

template <typename T>
TensorT<T> reshape(const TensorT<T>& a, Shape shape) {
    int64_t infer = -1;
    int64_t known = 1;
    for (size_t d = 0; d < shape.size(); ++d) {
        if (shape[d] == -1) {
            if (infer >= 0) throw std::invalid_argument("reshape allows one inferred extent");
            infer = static_cast<int64_t>(d);
        } else {
            if (shape[d] <= 0) throw std::invalid_argument("reshape extents must be positive");
            known *= shape[d];
        }
    }
    if (infer >= 0) {
        if (a.numel() % known != 0) {
            throw std::invalid_argument("cannot infer reshape extent for " + shape_str(a.shape()));
        }
        shape[infer] = a.numel() / known;
        known *= shape[infer];
    }
    if (known != a.numel()) {
        throw std::invalid_argument("reshape element count mismatch: " + shape_str(a.shape()) +
                                    " -> " + shape_str(shape));
    }
    TensorT<T> out = a.viewed(std::move(shape));
    if (!a.requires_grad()) return out;
    TapeT<T>* tape = a.tape();
    Shape orig = a.shape();
    int node = tape->record({a.node()}, [orig](const TensorT<T>& g) {
        return std::vector<TensorT<T>>{g.viewed(orig)};
    });
    return TensorT<T>::attached(std::move(out), tape, node);
}

namespace {

template <typename T>
TensorT<T> permute_values(const TensorT<T>& a, const std::vector<int64_t>& axes) {
    const Shape& in = a.shape();
    int64_t nd = a.ndim();
    Shape out_shape(nd);
    for (int64_t d = 0; d < nd; ++d) out_shape[d] = in[axes[d]];
    TensorT<T> out = TensorT<T>::zeros(out_shape);
    std::vector<int64_t> in_strides = contiguous_strides(in);
    std::vector<int64_t> src_strides(nd);
    for (int64_t d = 0; d < nd; ++d) src_strides[d] = in_strides[axes[d]];
    const T* ap = a.data();
    T* op = out.mutable_data();
    if (nd == 0) {
        op[0] = ap[0];
        return out;
    }
    std::vector<int64_t> idx(nd, 0);
    int64_t soff = 0;
    int64_t total = a.numel();
    int64_t inner = out_shape[nd - 1];
    int64_t sinner = src_strides[nd - 1];
    for (int64_t base = 0; base < total; base += inner) {
        for (int64_t j = 0; j < inner; ++j) op[base + j] = ap[soff + j * sinner];
        for (int d = static_cast<int>(nd) - 2; d >= 0; --d) {
            idx[d]++;
            soff += src_strides[d];
            if (idx[d] < out_shape[d]) break;
            idx[d] = 0;
            soff -= src_strides[d] * out_shape[d];
        }
    }
    return out;
}

}  // namespace

template <typename T>
TensorT<T> permute(const TensorT<T>& a, const std::vector<int64_t>& axes) {
    if (static_cast<int64_t>(axes.size()) != a.ndim()) {
        throw std::invalid_argument("permute axes rank mismatch");
    }
    std::vector<bool> seen(axes.size(), false);
    for (int64_t ax : axes) {
        if (ax < 0 || ax >= a.ndim() || seen[ax]) {
            throw std::invalid_argument("permute axes must be a permutation");
        }
        seen[ax] = true;
    }
    TensorT<T> out = permute_values(a, axes);
    if (!a.requires_grad()) return out;
    TapeT<T>* tape = a.tape();
    std::vector<int64_t> inv = inverse_perm(axes);
    int node = tape->record({a.node()}, [inv](const TensorT<T>& g) {
        return std::vector<TensorT<T>>{permute_values(g, inv)};
    });
    return TensorT<T>::attached(std::move(out), tape, node);
}

template <typename T>
TensorT<T> concat(const std::vector<TensorT<T>>& parts, int64_t axis) {
    if (parts.empty()) throw std::invalid_argument("concat requires at least one tensor");
    const int64_t nd = parts[0].ndim();
    axis = normalize_axis(parts[0].shape(), axis);
    Shape out_shape = parts[0].shape();
    int64_t axis_total = 0;
    for (const TensorT<T>& p : parts) {
        if (p.ndim() != nd) throw std::invalid_argument("concat rank mismatch");
        for (int64_t d = 0; d < nd; ++d) {
            if (d != axis && p.shape()[d] != out_shape[d]) {
                throw std::invalid_argument("concat extent mismatch on non-concat axis");
            }
        }
        axis_total += p.shape()[axis];
    }
    out_shape[axis] = axis_total;
    TensorT<T> out = TensorT<T>::zeros(out_shape);
    int64_t outer = 1;
    for (int64_t d = 0; d < axis; ++d) outer *= out_shape[d];
    int64_t after = 1;
    for (int64_t d = axis + 1; d < nd; ++d) after *= out_shape[d];
    const int64_t out_inner = axis_total * after;
    T* op = out.mutable_data();
    int64_t axis_off = 0;
    for (const TensorT<T>& p : parts) {
        const int64_t in_inner = p.shape()[axis] * after;
        const T* pp = p.data();
        for (int64_t o = 0; o < outer; ++o) {
            std::memcpy(op + o * out_inner + axis_off * after, pp + o * in_inner,
                        sizeof(T) * static_cast<size_t>(in_inner));
        }
        axis_off += p.shape()[axis];
    }
    TapeT<T>* tape = nullptr;
    for (const TensorT<T>& p : parts) {
        if (!p.requires_grad()) continue;
        if (tape && p.tape() != tape) throw std::invalid_argument("operands belong to different tapes");
        tape = p.tape();
    }
    if (!tape) return out;
    std::vector<int> inputs;
    struct Segment {
        int64_t start;
        int64_t len;
    };
    std::vector<Segment> segments;
    int64_t off = 0;
    for (const TensorT<T>& p : parts) {
        if (p.requires_grad()) {
            inputs.push_back(p.node());
            segments.push_back({off, p.shape()[axis]});
        }
        off += p.shape()[axis];
    }
    int node = tape->record(std::move(inputs), [segments, axis](const TensorT<T>& g) {
        std::vector<TensorT<T>> out_g;
        out_g.reserve(segments.size());
        for (const Segment& s : segments) out_g.push_back(slice(g, axis, s.start, s.len));
        return out_g;
    });
    return TensorT<T>::attached(std::move(out), tape, node);
}

template <typename T>
TensorT<T> slice(const TensorT<T>& a, int64_t axis, int64_t start, int64_t length) {
    axis = normalize_axis(a.shape(), axis);
    if (start < 0 || length <= 0 || start + length > a.shape()[axis]) {
        throw std::invalid_argument("slice window out of range");
    }
    Shape out_shape = a.shape();
    out_shape[axis] = length;
    TensorT<T> out = TensorT<T>::zeros(out_shape);
    int64_t outer = 1;
    for (int64_t d = 0; d < axis; ++d) outer *= a.shape()[d];
    int64_t after = 1;
    for (int64_t d = axis + 1; d < a.ndim(); ++d) after *= a.shape()[d];
    const int64_t in_inner = a.shape()[axis] * after;
    const int64_t out_inner = length * after;
    const T* ap = a.data();
    T* op = out.mutable_data();
    for (int64_t o = 0; o < outer; ++o) {
        std::memcpy(op + o * out_inner, ap + o * in_inner + start * after,
                    sizeof(T) * static_cast<size_t>(out_inner));
    }
    if (!a.requires_grad()) return out;
    TapeT<T>* tape = a.tape();
    Shape in_shape = a.shape();
    int node = tape->record({a.node()},
                            [in_shape, axis, start, after, outer, in_inner, out_inner](const TensorT<T>& g) {
        TensorT<T> dx = TensorT<T>::zeros(in_shape);
        T* dp = dx.mutable_data();
        const T* gp = g.data();
        for (int64_t o = 0; o < outer; ++o) {
            std::memcpy(dp + o * in_inner + start * after, gp + o * out_inner,
                        sizeof(T) * static_cast<size_t>(out_inner));
        }
        return std::vector<TensorT<T>>{dx};
    });
    return TensorT<T>::attached(std::move(out), tape, node);
}

// ---------------------------------------------------------------------------
// Reductions

template <typename T>
TensorT<T> sum(const TensorT<T>& a) {
    const T* ap = a.data();
    T acc = T(0);
    int64_t n = a.numel();
    for (int64_t i = 0; i < n; ++i) acc += ap[i];
    TensorT<T> out = TensorT<T>::scalar(acc);
    if (!a.requires_grad()) return out;
    TapeT<T>* tape = a.tape();
    Shape in_shape = a.shape();
    int node = tape->record({a.node()}, [in_shape](const TensorT<T>& g) {
        return std::vector<TensorT<T>>{TensorT<T>::full(in_shape, g.item())};
    });
    return TensorT<T>::attached(std::move(out), tape, node);
}

template <typename T>
TensorT<T> sum(const TensorT<T>& a, int64_t axis, bool keepdim) {
    axis = normalize_axis(a.shape(), axis);
    const int64_t ext = a.shape()[axis];
    int64_t outer = 1;
    for (int64_t d = 0; d < axis; ++d) outer *= a.shape()[d];
    int64_t after = 1;
    for (int64_t d = axis + 1; d < a.ndim(); ++d) after *= a.shape()[d];
    Shape out_shape;
    for (int64_t d = 0; d < a.ndim(); ++d) {
        if (d == axis) {
            if (keepdim) out_shape.push_back(1);
        } else {
            out_shape.push_back(a.shape()[d]);
        }
    }
    TensorT<T> out = out_shape.empty() ? TensorT<T>::scalar(T(0)) : TensorT<T>::zeros(out_shape);
    const T* ap = a.data();
    T* op = out.mutable_data();
    for (int64_t o = 0; o < outer; ++o) {
        for (int64_t e = 0; e < ext; ++e) {
            const T* src = ap + (o * ext + e) * after;
            T* dst = op + o * after;
            for (int64_t j = 0; j < after; ++j) dst[j] += src[j];
        }
    }
    if (!a.requires_grad()) return out;
    TapeT<T>* tape = a.tape();
    Shape in_shape = a.shape();
    int node = tape->record({a.node()}, [in_shape, ext, outer, after](const TensorT<T>& g) {
        TensorT<T> dx = TensorT<T>::zeros(in_shape);
        T* dp = dx.mutable_data();
        const T* gp = g.data();
        for (int64_t o = 0; o < outer; ++o) {
            for (int64_t e = 0; e < ext; ++e) {
                T* dst = dp + (o * ext + e) * after;
                const T* src = gp + o * after;
                for (int64_t j = 0; j < after; ++j) dst[j] += src[j];
            }
        }
        return std::vector<TensorT<T>>{dx};
    });
    return TensorT<T>::attached(std::move(out), tape, node);
}

template <typename T>
TensorT<T> mean(const TensorT<T>& a) {
    return scale(sum(a), T(1) / static_cast<T>(a.numel()));
}

template <typename T>
std::vector<int64_t> argmax_last(const TensorT<T>& a) {
    if (a.ndim() < 1) throw std::invalid_argument("argmax_last requires rank >= 1");
    const int64_t ext = a.shape().back();
    const int64_t rows = a.numel() / ext;
    std::vector<int64_t> out(rows);
    const T* ap = a.data();
    for (int64_t r = 0; r < rows; ++r) {
        const T* x = ap + r * ext;
        int64_t best = 0;
        for (int64_t j = 1; j < ext; ++j)
            if (x[j] > x[best]) best = j;
        out[r] = best;
    }
    return out;
}

TensorT<double> to_double(const TensorT<float>& a) {
    std::vector<double> v(a.data(), a.data() + a.numel());
    return TensorT<double>::from(a.shape(), std::move(v));
}

TensorT<float> to_float(const TensorT<double>& a) {
    std::vector<float> v(a.numel());
    for (int64_t i = 0; i < a.numel(); ++i) v[i] = static_cast<float>(a.data()[i]);
    return TensorT<float>::from(a.shape(), std::move(v));
}

// ---------------------------------------------------------------------------
// Gradient checking

namespace {

double relative_error(double analytic, double numeric) {
    return std::fabs(analytic - numeric) /
           (std::max(std::fabs(analytic), std::fabs(numeric)) + 1e-6);
}

}  // namespace

double gradcheck(const GradCheckFn& f, const TensorT<double>& x, double eps) {
    if (eps <= 0.0) throw std::invalid_argument("gradcheck eps must be positive");
    TapeT<double> tape;
    TensorT<double> watched = tape.watch(x);
    TensorT<double> out = f(tape, watched);
    if (out.numel() != 1) throw std::invalid_argument("gradcheck target must be scalar");
    if (!std::isfinite(out.item())) throw std::runtime_error("gradcheck target is non-finite");
    GradTable<double> grads = tape.backward(out);
    TensorT<double> analytic = grads.has(watched.node())
                                   ? grads.at(watched.node())
                                   : TensorT<double>::zeros(x.shape());

    TensorT<double> probe = TensorT<double>::from(x.shape(), x.vec());
    double* p = probe.mutable_data();
    auto eval = [&]() {
        TapeT<double> t;
        TensorT<double> w = t.watch(probe);
        double v = f(t, w).item();
        if (!std::isfinite(v)) throw std::runtime_error("gradcheck target is non-finite");
        return v;
    };
    double max_err = 0.0;
    for (int64_t i = 0; i < probe.numel(); ++i) {
        const double orig = p[i];
        p[i] = orig + eps;
        const double fp = eval();
        p[i] = orig - eps;
        const double fm = eval();
        p[i] = orig;
        const double numeric = (fp - fm) / (2.0 * eps);
        max_err = std::max(max_err, relative_error(analytic.data()[i], numeric));
    }
    return max_err;
}

double gradcheck_params(const GradCheckForward& forward,
                        const std::vector<TensorT<double>*>& params, double eps) {
    if (eps <= 0.0) throw std::invalid_argument("gradcheck eps must be positive");
    std::vector<TensorT<double>> analytic(params.size());
    {
        TapeT<double> tape;
        for (TensorT<double>* p : params) tape.watch_inplace(*p);
        TensorT<double> out = forward(tape);
        if (out.numel() != 1) throw std::invalid_argument("gradcheck target must be scalar");
        if (!std::isfinite(out.item())) throw std::runtime_error("gradcheck target is non-finite");
        GradTable<double> grads = tape.backward(out);
        for (size_t i = 0; i < params.size(); ++i) {
            analytic[i] = grads.has(params[i]->node()) ? grads.at(params[i]->node())
                                                       : TensorT<double>::zeros(params[i]->shape());
        }
    }
    auto eval = [&]() {
        TapeT<double> t;
        for (TensorT<double>* p : params) t.watch_inplace(*p);
        double v = forward(t).item();
        if (!std::isfinite(v)) throw std::runtime_error("gradcheck target is non-finite");
        return v;
    };
    double max_err = 0.0;
    for (size_t pi = 0; pi < params.size(); ++pi) {
        double* p = params[pi]->mutable_data();
        for (int64_t i = 0; i < params[pi]->numel(); ++i) {
            const double orig = p[i];
            p[i] = orig + eps;
            const double fp = eval();
            p[i] = orig - eps;
            const double fm = eval();
            p[i] = orig;
            const double numeric = (fp - fm) / (2.0 * eps);
            max_err = std::max(max_err, relative_error(analytic[pi].data()[i], numeric));
        }
    }
    for (TensorT<double>* p : params) p->rebind(nullptr, -1);
    return max_err;
}

// ---------------------------------------------------------------------------
// Explicit instantiations

#define PERCSEG_INSTANTIATE(T)                                                                   \
    template class TensorT<T>;                                                                   \
    template class TapeT<T>;                                                                     \
    template struct GradTable<T>;                                                                \
    template TensorT<T> elementwise<T>(const TensorT<T>&, const TensorT<T>&, Elementwise);      \
    template TensorT<T> unary<T>(const TensorT<T>&, Unary);                                      \
    template TensorT<T> scale<T>(const TensorT<T>&, T);                                          \
    template TensorT<T> add_scalar<T>(const TensorT<T>&, T);                                     \
    template TensorT<T> clamp<T>(const TensorT<T>&, T, T);                                       \
    template TensorT<T> matmul<T>(const TensorT<T>&, const TensorT<T>&);                         \
    template TensorT<T> softmax<T>(const TensorT<T>&, int64_t);                                  \
    template TensorT<T> layer_norm<T>(const TensorT<T>&, int64_t, const TensorT<T>&,             \
                                      const TensorT<T>&, T);                                     \
    template TensorT<T> standardize<T>(const TensorT<T>&, T);                                    \
    template TensorT<T> reshape<T>(const TensorT<T>&, Shape);                                    \
    template TensorT<T> permute<T>(const TensorT<T>&, const std::vector<int64_t>&);              \
    template TensorT<T> concat<T>(const std::vector<TensorT<T>>&, int64_t);                      \
    template TensorT<T> slice<T>(const TensorT<T>&, int64_t, int64_t, int64_t);                  \
    template TensorT<T> sum<T>(const TensorT<T>&);                                               \
    template TensorT<T> sum<T>(const TensorT<T>&, int64_t, bool);                                \
    template TensorT<T> mean<T>(const TensorT<T>&);                                              \
    template std::vector<int64_t> argmax_last<T>(const TensorT<T>&);                             \
    template void ensure_finite<T>(const TensorT<T>&, const char*);

PERCSEG_INSTANTIATE(float)
PERCSEG_INSTANTIATE(double)

#undef PERCSEG_INSTANTIATE

}  // namespace percseg
