#pragma once
// Latent-bottleneck encoder/processor/decoder: one cross-attention encode
// from input features into a fixed latent array, a stack of latent
// self-attention blocks, and a cross-attention decode against per-pixel
// output queries. Pre-norm residuals throughout. Attention cost is
// O(queries * keys); the latent array keeps the key side fixed at N.

#include <cstdint>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "percseg/tensor.hpp"

namespace percseg {

template <typename T>
using ParamList = std::vector<std::pair<std::string, TensorT<T>*>>;

template <typename T>
void bind_params(TapeT<T>& tape, const ParamList<T>& params);
template <typename T>
void unbind_params(const ParamList<T>& params);
template <typename T>
int64_t param_count(const ParamList<T>& params);

// Collects attention-row statistics during a forward pass (optional).
struct AttnProbe {
    double row_sum_min = 1.0;
    double row_sum_max = 1.0;
    double row_peak_total = 0.0;  // sum over rows of the largest weight
    int64_t rows = 0;
    void note(double s, double peak) {
        if (rows == 0) {
            row_sum_min = row_sum_max = s;
        } else {
            row_sum_min = std::min(row_sum_min, s);
            row_sum_max = std::max(row_sum_max, s);
        }
        row_peak_total += peak;
        ++rows;
    }
    double mean_peak() const { return rows ? row_peak_total / static_cast<double>(rows) : 0.0; }
};

enum class PosEncodingKind { FourierFixed2D, Learned };

struct PerceiverConfig {
    int64_t num_latents = 256;
    int64_t latent_dim = 128;
    int64_t num_heads = 4;
    int64_t num_self_blocks = 4;
    int64_t input_channels = 0;  // feature dim of the key/value array
    int64_t query_channels = 0;  // dim of raw decoder queries (positional features)
    int64_t num_classes = 0;
    int64_t ffn_mult = 1;
    // When the queries are fixed 2D Fourier features, seed the latent array
    // with a coarse-grid encoding and align the attention projections so
    // that attention starts out spatially local instead of uniform. Cuts
    // the steps needed for the routing to form by a large factor.
    bool spatial_init = false;
    int64_t pos_bands = 0;      // bands of the query encoding (spatial_init)
    double pos_max_freq = 0.0;  // max frequency of the query encoding

    void validate() const;
};

template <typename T>
struct LinearT {
    TensorT<T> weight;  // [in, out]
    TensorT<T> bias;    // [out]

    static LinearT make(int64_t in, int64_t out, Rng& rng);
    TensorT<T> forward(const TensorT<T>& x) const { return add(matmul(x, weight), bias); }
    void params(const std::string& prefix, ParamList<T>& out);
};

template <typename T>
struct LayerNormT {
    TensorT<T> gamma;
    TensorT<T> beta;
    T eps = static_cast<T>(1e-5);

    static LayerNormT make(int64_t dim);
    TensorT<T> forward(const TensorT<T>& x) const { return layer_norm(x, -1, gamma, beta, eps); }
    void params(const std::string& prefix, ParamList<T>& out);
};

// Multi-head attention with queries from one array and keys/values from
// another; pre-norm, residual on the query stream. Output dim equals the
// query dim.
template <typename T>
struct CrossAttentionT {
    LayerNormT<T> ln_q, ln_kv;
    LinearT<T> proj_q, proj_k, proj_v, proj_out;
    int64_t heads = 1;
    int64_t dim = 0;

    static CrossAttentionT make(int64_t query_dim, int64_t kv_dim, int64_t inner_dim,
                                int64_t heads, Rng& rng);
    TensorT<T> forward(const TensorT<T>& queries, const TensorT<T>& keys_values,
                       AttnProbe* probe = nullptr) const;
    void params(const std::string& prefix, ParamList<T>& out);
};

template <typename T>
struct FeedForwardT {
    LayerNormT<T> ln;
    LinearT<T> fc1, fc2;

    static FeedForwardT make(int64_t dim, int64_t mult, Rng& rng);
    TensorT<T> forward(const TensorT<T>& x) const;
    void params(const std::string& prefix, ParamList<T>& out);
};

template <typename T>
struct SelfAttentionBlockT {
    CrossAttentionT<T> attention;  // keys/values = queries
    FeedForwardT<T> ffn;

    static SelfAttentionBlockT make(int64_t dim, int64_t heads, int64_t ffn_mult, Rng& rng);
    TensorT<T> forward(const TensorT<T>& latent, AttnProbe* probe = nullptr) const;
    void params(const std::string& prefix, ParamList<T>& out);
};

template <typename T>
class PerceiverT {
public:
    PerceiverT(const PerceiverConfig& config, Rng& rng);

    // features: [M, C] -> latent [N, D]
    TensorT<T> encode(const TensorT<T>& features, AttnProbe* probe = nullptr) const;
    // latent [N, D] -> latent [N, D] through the self-attention stack
    TensorT<T> process(TensorT<T> latent, AttnProbe* probe = nullptr) const;
    // raw queries [M_out, P] + latent -> per-pixel class logits [M_out, K]
    TensorT<T> decode(const TensorT<T>& queries, const TensorT<T>& latent,
                      AttnProbe* probe = nullptr) const;
    TensorT<T> forward(const TensorT<T>& features, const TensorT<T>& query_pos,
                       AttnProbe* probe = nullptr) const;

    const PerceiverConfig& config() const { return cfg_; }
    void params(ParamList<T>& out);
    // Parameters of the latent machinery only (everything except the
    // input-facing key/value projections and their norm), which is the part
    // whose size is independent of the input feature dimension.
    int64_t latent_param_count();

    // Submodules are deliberately accessible: tests and diagnostics poke at
    // projections and norms directly.
    PerceiverConfig cfg_;
    TensorT<T> latent_init_;
    CrossAttentionT<T> encode_attn_;
    FeedForwardT<T> encode_ffn_;
    std::vector<SelfAttentionBlockT<T>> blocks_;
    LinearT<T> query_proj_;
    CrossAttentionT<T> decode_attn_;
    LayerNormT<T> out_ln_;
    LinearT<T> logits_;
};

// Checkpoint: text manifest ("name rank d0 d1 ...") terminated by "END",
// followed by raw little-endian 32-bit floats in manifest order.
void save_checkpoint(const std::string& path, const ParamList<float>& params);
void load_checkpoint(const std::string& path, const ParamList<float>& params);

using Perceiver = PerceiverT<float>;

}  // namespace percseg
