#include "percseg/perceiver.hpp"

#include <cmath>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include "percseg/posenc.hpp"

namespace percseg {

void PerceiverConfig::validate() const {
    if (num_latents < 1) throw std::invalid_argument("PerceiverConfig: num_latents must be >= 1");
    if (latent_dim < 1 || num_heads < 1 || latent_dim % num_heads != 0) {
        throw std::invalid_argument("PerceiverConfig: latent_dim must divide by num_heads");
    }
    if (num_classes < 2) throw std::invalid_argument("PerceiverConfig: need at least two classes");
    if (input_channels < 1 || query_channels < 1) {
        throw std::invalid_argument("PerceiverConfig: channel counts must be positive");
    }
    if (num_self_blocks < 0 || ffn_mult < 1) {
        throw std::invalid_argument("PerceiverConfig: bad depth or ffn_mult");
    }
}

template <typename T>
void bind_params(TapeT<T>& tape, const ParamList<T>& params) {
    for (const auto& [name, tensor] : params) tape.watch_inplace(*tensor);
}

template <typename T>
void unbind_params(const ParamList<T>& params) {
    for (const auto& [name, tensor] : params) tensor->rebind(nullptr, -1);
}

template <typename T>
int64_t param_count(const ParamList<T>& params) {
    int64_t n = 0;
    for (const auto& [name, tensor] : params) n += tensor->numel();
    return n;
}

// ---------------------------------------------------------------------------

template <typename T>
LinearT<T> LinearT<T>::make(int64_t in, int64_t out, Rng& rng) {
    LinearT<T> l;
    const T bound = static_cast<T>(1.0 / std::sqrt(static_cast<double>(in)));
    l.weight = TensorT<T>::uniform({in, out}, rng, -bound, bound);
    l.bias = TensorT<T>::uniform({out}, rng, -bound, bound);
    return l;
}

template <typename T>
void LinearT<T>::params(const std::string& prefix, ParamList<T>& out) {
    out.emplace_back(prefix + ".weight", &weight);
    out.emplace_back(prefix + ".bias", &bias);
}

template <typename T>
LayerNormT<T> LayerNormT<T>::make(int64_t dim) {
    LayerNormT<T> l;
    l.gamma = TensorT<T>::full({dim}, T(1));
    l.beta = TensorT<T>::zeros({dim});
    return l;
}

template <typename T>
void LayerNormT<T>::params(const std::string& prefix, ParamList<T>& out) {
    out.emplace_back(prefix + ".gamma", &gamma);
    out.emplace_back(prefix + ".beta", &beta);
}

// ---------------------------------------------------------------------------

template <typename T>
CrossAttentionT<T> CrossAttentionT<T>::make(int64_t query_dim, int64_t kv_dim, int64_t inner_dim,
                                            int64_t heads, Rng& rng) {
    if (inner_dim % heads != 0) {
        throw std::invalid_argument("attention inner dim must divide by head count");
    }
    CrossAttentionT<T> a;
    a.ln_q = LayerNormT<T>::make(query_dim);
    a.ln_kv = LayerNormT<T>::make(kv_dim);
    a.proj_q = LinearT<T>::make(query_dim, inner_dim, rng);
    a.proj_k = LinearT<T>::make(kv_dim, inner_dim, rng);
    a.proj_v = LinearT<T>::make(kv_dim, inner_dim, rng);
    a.proj_out = LinearT<T>::make(inner_dim, query_dim, rng);
    a.heads = heads;
    a.dim = inner_dim;
    return a;
}

template <typename T>
TensorT<T> CrossAttentionT<T>::forward(const TensorT<T>& queries, const TensorT<T>& keys_values,
                                       AttnProbe* probe) const {
    if (queries.ndim() != 2 || keys_values.ndim() != 2) {
        throw std::invalid_argument("attention expects 2-D query and key/value arrays");
    }
    if (keys_values.size(0) < 1) throw std::invalid_argument("attention requires M >= 1");
    const int64_t nq = queries.size(0);
    const int64_t m = keys_values.size(0);
    const int64_t dh = dim / heads;

    TensorT<T> qn = ln_q.forward(queries);
    TensorT<T> kn = ln_kv.forward(keys_values);
    TensorT<T> q = proj_q.forward(qn);  // [nq, dim]
    TensorT<T> k = proj_k.forward(kn);  // [m, dim]
    TensorT<T> v = proj_v.forward(kn);  // [m, dim]

    TensorT<T> qh = permute(reshape(q, {nq, heads, dh}), {1, 0, 2});  // [h, nq, dh]
    TensorT<T> kt = permute(reshape(k, {m, heads, dh}), {1, 2, 0});   // [h, dh, m]
    TensorT<T> vh = permute(reshape(v, {m, heads, dh}), {1, 0, 2});   // [h, m, dh]

    const T inv_sqrt = static_cast<T>(1.0 / std::sqrt(static_cast<double>(dh)));
    TensorT<T> scores = scale(matmul(qh, kt), inv_sqrt);  // [h, nq, m]
    TensorT<T> attn = softmax(scores, -1);
    if (probe) {
        const T* p = attn.data();
        for (int64_t r = 0; r < heads * nq; ++r) {
            double s = 0.0, peak = 0.0;
            for (int64_t j = 0; j < m; ++j) {
                s += static_cast<double>(p[r * m + j]);
                peak = std::max(peak, static_cast<double>(p[r * m + j]));
            }
            probe->note(s, peak);
        }
    }
    TensorT<T> ctx = matmul(attn, vh);                                 // [h, nq, dh]
    TensorT<T> merged = reshape(permute(ctx, {1, 0, 2}), {nq, dim});   // [nq, dim]
    return add(queries, proj_out.forward(merged));
}

template <typename T>
void CrossAttentionT<T>::params(const std::string& prefix, ParamList<T>& out) {
    ln_q.params(prefix + ".ln_q", out);
    ln_kv.params(prefix + ".ln_kv", out);
    proj_q.params(prefix + ".q", out);
    proj_k.params(prefix + ".k", out);
    proj_v.params(prefix + ".v", out);
    proj_out.params(prefix + ".out", out);
}

template <typename T>
FeedForwardT<T> FeedForwardT<T>::make(int64_t dim, int64_t mult, Rng& rng) {
    FeedForwardT<T> f;
    f.ln = LayerNormT<T>::make(dim);
    f.fc1 = LinearT<T>::make(dim, dim * mult, rng);
    f.fc2 = LinearT<T>::make(dim * mult, dim, rng);
    return f;
}

template <typename T>
TensorT<T> FeedForwardT<T>::forward(const TensorT<T>& x) const {
    return add(x, fc2.forward(gelu(fc1.forward(ln.forward(x)))));
}

template <typename T>
void FeedForwardT<T>::params(const std::string& prefix, ParamList<T>& out) {
    ln.params(prefix + ".ln", out);
    fc1.params(prefix + ".fc1", out);
    fc2.params(prefix + ".fc2", out);
}

template <typename T>
SelfAttentionBlockT<T> SelfAttentionBlockT<T>::make(int64_t dim, int64_t heads, int64_t ffn_mult,
                                                    Rng& rng) {
    SelfAttentionBlockT<T> b;
    b.attention = CrossAttentionT<T>::make(dim, dim, dim, heads, rng);
    b.ffn = FeedForwardT<T>::make(dim, ffn_mult, rng);
    return b;
}

template <typename T>
TensorT<T> SelfAttentionBlockT<T>::forward(const TensorT<T>& latent, AttnProbe* probe) const {
    return ffn.forward(attention.forward(latent, latent, probe));
}

template <typename T>
void SelfAttentionBlockT<T>::params(const std::string& prefix, ParamList<T>& out) {
    attention.params(prefix + ".attn", out);
    ffn.params(prefix + ".ffn", out);
}

// ---------------------------------------------------------------------------

namespace {

// Reorders a 2D Fourier encoding [y: sin*B, cos*B, raw | x: ...] into
// per-band quadruples (y-sin, y-cos, x-sin, x-cos). Any contiguous slice of
// inner dimensions (one attention head) then holds complete sin/cos pairs
// for both axes, so a dot product of two reordered encodings is a sum of
// cos(pi*f*(a-b)) terms: a translation-invariant kernel whose global peak
// sits exactly where the positions coincide.
std::vector<int64_t> interleave_axes(int64_t pos_dim, int64_t head_dim) {
    const int64_t per_axis = pos_dim / 2;
    const int64_t bands = (per_axis - 1) / 2;
    // Stride the band order in consecutive pairs so each head gets a
    // low-to-high frequency spread with coprime content; a head holding
    // only every k-th frequency would alias with period 2/k.
    const int64_t quads_per_head = std::max<int64_t>(1, head_dim / 4);
    const int64_t pairs = (bands + 1) / 2;
    const int64_t pairs_per_head = std::max<int64_t>(1, quads_per_head / 2);
    const int64_t groups = std::max<int64_t>(1, (pairs + pairs_per_head - 1) / pairs_per_head);
    std::vector<int64_t> band_order;
    for (int64_t g = 0; g < groups; ++g) {
        for (int64_t i = g; i < pairs; i += groups) {
            band_order.push_back(2 * i);
            if (2 * i + 1 < bands) band_order.push_back(2 * i + 1);
        }
    }
    std::vector<int64_t> order;
    order.reserve(static_cast<size_t>(pos_dim));
    for (int64_t b : band_order) {
        order.push_back(b);                       // y sin
        order.push_back(bands + b);               // y cos
        order.push_back(per_axis + b);            // x sin
        order.push_back(per_axis + bands + b);    // x cos
    }
    order.push_back(2 * bands);                   // y raw coordinate
    order.push_back(per_axis + 2 * bands);        // x raw coordinate
    return order;
}

}  // namespace

template <typename T>
PerceiverT<T>::PerceiverT(const PerceiverConfig& config, Rng& rng) : cfg_(config) {
    cfg_.validate();
    latent_init_ = TensorT<T>::normal({cfg_.num_latents, cfg_.latent_dim}, rng, T(0),
                                      static_cast<T>(0.02));
    encode_attn_ = CrossAttentionT<T>::make(cfg_.latent_dim, cfg_.input_channels, cfg_.latent_dim,
                                            cfg_.num_heads, rng);
    encode_ffn_ = FeedForwardT<T>::make(cfg_.latent_dim, cfg_.ffn_mult, rng);
    blocks_.reserve(static_cast<size_t>(cfg_.num_self_blocks));
    for (int64_t i = 0; i < cfg_.num_self_blocks; ++i) {
        blocks_.push_back(
            SelfAttentionBlockT<T>::make(cfg_.latent_dim, cfg_.num_heads, cfg_.ffn_mult, rng));
    }
    query_proj_ = LinearT<T>::make(cfg_.query_channels, cfg_.latent_dim, rng);
    decode_attn_ = CrossAttentionT<T>::make(cfg_.latent_dim, cfg_.latent_dim, cfg_.latent_dim,
                                            cfg_.num_heads, rng);
    out_ln_ = LayerNormT<T>::make(cfg_.latent_dim);
    logits_ = LinearT<T>::make(cfg_.latent_dim, cfg_.num_classes, rng);

    if (cfg_.spatial_init && cfg_.query_channels == fourier_pos_dim(cfg_.pos_bands)) {
        const T s = static_cast<T>(2.0);
        const int64_t p = cfg_.query_channels;
        const int64_t d = cfg_.latent_dim;
        const int64_t pm = std::min(p, d);  // inner/stream dims holding position
        const std::vector<int64_t> order = interleave_axes(p, d / cfg_.num_heads);

        // coarse grid encoding for the latent rows
        int64_t side = 1;
        while (side * side < cfg_.num_latents) ++side;
        TensorT<double> grid = fourier_pos_2d_f64(side, side, cfg_.pos_bands, cfg_.pos_max_freq);
        T* latent = latent_init_.mutable_data();
        for (int64_t j = 0; j < cfg_.num_latents; ++j) {
            for (int64_t i = 0; i < pm; ++i) {
                latent[j * d + i] +=
                    static_cast<T>(grid.data()[j * p + order[static_cast<size_t>(i)]]);
            }
        }
        auto bump = [](TensorT<T>& w, int64_t in_i, int64_t out_i, T v) {
            w.mutable_data()[in_i * w.size(1) + out_i] += v;
        };
        // Quiet the random components that feed the residual stream and the
        // decode projections, so the structured components below dominate
        // the early routing; gradients through them stay nonzero.
        auto quiet = [](LinearT<T>& linear) {
            T* w = linear.weight.mutable_data();
            for (int64_t i = 0; i < linear.weight.numel(); ++i) w[i] *= static_cast<T>(0.25);
            T* b = linear.bias.mutable_data();
            for (int64_t i = 0; i < linear.bias.numel(); ++i) b[i] *= static_cast<T>(0.25);
        };
        quiet(encode_attn_.proj_out);
        quiet(encode_ffn_.fc2);
        for (SelfAttentionBlockT<T>& block : blocks_) {
            quiet(block.attention.proj_out);
            quiet(block.ffn.fc2);
        }
        quiet(query_proj_);
        quiet(decode_attn_.proj_q);
        quiet(decode_attn_.proj_k);
        quiet(decode_attn_.proj_out);
        // Query/key pass-through: per head, scores gain a term proportional
        // to the dot product of the two positional encodings, which is
        // peaked where they coincide, so attention starts local.
        for (int64_t i = 0; i < pm; ++i) {
            const int64_t oi = order[static_cast<size_t>(i)];
            bump(encode_attn_.proj_q.weight, i, i, s);
            bump(encode_attn_.proj_k.weight, cfg_.input_channels - p + oi, i, s);
            bump(query_proj_.weight, oi, i, s);
            bump(decode_attn_.proj_q.weight, i, i, s);
            bump(decode_attn_.proj_k.weight, i, i, s);
        }

        // Value/output pass-through on the same (positionally structured)
        // heads: the value dims are independent of the query/key dims, so
        // local content rides the local attention into spare latent dims and
        // back out to the decoded stream. The write-in scale stays below the
        // positional scale so the stream norm keeps both signals alive.
        const T sv = static_cast<T>(1.0);
        const T so = static_cast<T>(0.5);
        const int64_t content = cfg_.input_channels - p;
        const int64_t cm = std::min(content > 0 ? d - pm : 0, pm);
        for (int64_t j = 0; j < cm; ++j) {
            bump(encode_attn_.proj_v.weight, j % content, j, sv);
            bump(encode_attn_.proj_out.weight, j, pm + j, so);
            bump(decode_attn_.proj_v.weight, pm + j, j, sv);
            bump(decode_attn_.proj_out.weight, j, pm + j, sv);
        }

        // quiet classifier head: the early fit of the class prior happens
        // in the bias, not by suppressing input-dependent variance
        T* lw = logits_.weight.mutable_data();
        for (int64_t i = 0; i < logits_.weight.numel(); ++i) lw[i] *= static_cast<T>(0.05);
    }
}

template <typename T>
TensorT<T> PerceiverT<T>::encode(const TensorT<T>& features, AttnProbe* probe) const {
    if (features.ndim() != 2 || features.size(1) != cfg_.input_channels) {
        throw std::invalid_argument("encode: features must be [M, " +
                                    std::to_string(cfg_.input_channels) + "]");
    }
    return encode_ffn_.forward(encode_attn_.forward(latent_init_, features, probe));
}

template <typename T>
TensorT<T> PerceiverT<T>::process(TensorT<T> latent, AttnProbe* probe) const {
    for (const SelfAttentionBlockT<T>& block : blocks_) latent = block.forward(latent, probe);
    return latent;
}

template <typename T>
TensorT<T> PerceiverT<T>::decode(const TensorT<T>& queries, const TensorT<T>& latent,
                                 AttnProbe* probe) const {
    if (queries.ndim() != 2 || queries.size(1) != cfg_.query_channels) {
        throw std::invalid_argument("decode: queries must be [M_out, " +
                                    std::to_string(cfg_.query_channels) + "]");
    }
    TensorT<T> q = query_proj_.forward(queries);
    TensorT<T> attended = decode_attn_.forward(q, latent, probe);
    return logits_.forward(out_ln_.forward(attended));
}

template <typename T>
TensorT<T> PerceiverT<T>::forward(const TensorT<T>& features, const TensorT<T>& query_pos,
                                  AttnProbe* probe) const {
    return decode(query_pos, process(encode(features, probe), probe), probe);
}

template <typename T>
void PerceiverT<T>::params(ParamList<T>& out) {
    out.emplace_back("latent_init", &latent_init_);
    encode_attn_.params("encode.attn", out);
    encode_ffn_.params("encode.ffn", out);
    for (size_t i = 0; i < blocks_.size(); ++i) {
        blocks_[i].params("block" + std::to_string(i), out);
    }
    query_proj_.params("decode.query_proj", out);
    decode_attn_.params("decode.attn", out);
    out_ln_.params("decode.out_ln", out);
    logits_.params("decode.logits", out);
}

template <typename T>
int64_t PerceiverT<T>::latent_param_count() {
    ParamList<T> all;
    params(all);
    int64_t n = 0;
    for (const auto& [name, tensor] : all) {
        if (name.rfind("encode.attn.ln_kv", 0) == 0 || name.rfind("encode.attn.k", 0) == 0 ||
            name.rfind("encode.attn.v", 0) == 0) {
            continue;
        }
        n += tensor->numel();
    }
    return n;
}

// ---------------------------------------------------------------------------
// Checkpoints

void save_checkpoint(const std::string& path, const ParamList<float>& params) {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw std::runtime_error("save_checkpoint: cannot open '" + path + "'");
    f << "PERCSEG-CKPT v1\n";
    for (const auto& [name, tensor] : params) {
        f << name << " " << tensor->ndim();
        for (int64_t e : tensor->shape()) f << " " << e;
        f << "\n";
    }
    f << "END\n";
    for (const auto& [name, tensor] : params) {
        f.write(reinterpret_cast<const char*>(tensor->data()),
                static_cast<std::streamsize>(tensor->numel() * sizeof(float)));
    }
    if (!f) throw std::runtime_error("save_checkpoint: write failed for '" + path + "'");
}

void load_checkpoint(const std::string& path, const ParamList<float>& params) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("load_checkpoint: cannot open '" + path + "'");
    std::string line;
    if (!std::getline(f, line) || line != "PERCSEG-CKPT v1") {
        throw std::runtime_error("load_checkpoint: bad header in '" + path + "'");
    }
    std::vector<std::pair<std::string, Shape>> manifest;
    while (std::getline(f, line)) {
        if (line == "END") break;
        std::istringstream is(line);
        std::string name;
        int64_t rank = 0;
        is >> name >> rank;
        Shape shape(static_cast<size_t>(rank));
        for (int64_t d = 0; d < rank; ++d) is >> shape[static_cast<size_t>(d)];
        if (!is) throw std::runtime_error("load_checkpoint: malformed manifest line");
        manifest.emplace_back(name, shape);
    }
    if (manifest.size() != params.size()) {
        throw std::runtime_error("load_checkpoint: parameter count mismatch");
    }
    for (size_t i = 0; i < params.size(); ++i) {
        const auto& [name, tensor] = params[i];
        if (manifest[i].first != name || !same_shape(manifest[i].second, tensor->shape())) {
            throw std::runtime_error("load_checkpoint: manifest mismatch at '" + name + "'");
        }
        f.read(reinterpret_cast<char*>(tensor->mutable_data()),
               static_cast<std::streamsize>(tensor->numel() * sizeof(float)));
        if (!f) throw std::runtime_error("load_checkpoint: truncated data");
    }
}

// ---------------------------------------------------------------------------

#define PERCSEG_INSTANTIATE_PERCEIVER(T)                              \
    template void bind_params<T>(TapeT<T>&, const ParamList<T>&);     \
    template void unbind_params<T>(const ParamList<T>&);              \
    template int64_t param_count<T>(const ParamList<T>&);             \
    template struct LinearT<T>;                                       \
    template struct LayerNormT<T>;                                    \
    template struct CrossAttentionT<T>;                               \
    template struct FeedForwardT<T>;                                  \
    template struct SelfAttentionBlockT<T>;                           \
    template class PerceiverT<T>;

PERCSEG_INSTANTIATE_PERCEIVER(float)
PERCSEG_INSTANTIATE_PERCEIVER(double)

#undef PERCSEG_INSTANTIATE_PERCEIVER

}  // namespace percseg
