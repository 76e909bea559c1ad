#pragma once

#include <cmath>
#include <vector>

#include "smoe/losses.hpp"
#include "smoe/nn.hpp"
#include "smoe/param.hpp"
#include "smoe/rng.hpp"

namespace smoe {

struct ModelConfig {
    Index latent_dim = 32;
    Index num_experts = 1;
    Index image_side = 28;
    // Channel plan. The image runs through two stride-2 convs, one dense
    // layer, then the mu / logvar heads; each expert inverts that with two
    // dense layers and two stride-2 transpose convs. Defaults keep one
    // decoder well under the encoder's parameter count.
    Index enc_c1 = 32;
    Index enc_c2 = 64;
    Index enc_fc = 256;
    Index dec_fc1 = 128;
    Index dec_c1 = 16;
    Index dec_c2 = 8;
    Index gate_h1 = 64;
    Index gate_h2 = 32;
    double logvar_clamp = 10.0;

    Index quarter_side() const { return image_side / 4; }
    Index enc_flat() const { return enc_c2 * quarter_side() * quarter_side(); }
    Index dec_flat() const { return dec_c1 * quarter_side() * quarter_side(); }

    void validate() const {
        if (latent_dim < 1) throw ConfigError("model: latent_dim must be >= 1");
        if (num_experts < 1) throw ConfigError("model: num_experts must be >= 1");
        if (image_side < 8 || image_side % 4 != 0)
            throw ConfigError("model: image_side must be a multiple of 4 and >= 8");
    }

    // Miniature plan for double-precision gradient checks and tiny tests.
    static ModelConfig miniature(Index experts, Index side = 8, Index latent = 6) {
        ModelConfig c;
        c.latent_dim = latent;
        c.num_experts = experts;
        c.image_side = side;
        c.enc_c1 = 6;
        c.enc_c2 = 8;
        c.enc_fc = 24;
        c.dec_fc1 = 16;
        c.dec_c1 = 6;
        c.dec_c2 = 4;
        c.gate_h1 = 12;
        c.gate_h2 = 8;
        return c;
    }
};

// ---- layer building blocks (cache on forward, pure on apply) ----------------

template <typename S>
struct DenseLayer {
    Param<S> w, b;
    Tensor<S> x_cache;

    DenseLayer(const std::string& prefix, Index out, Index in)
        : w(prefix + ".weight", {out, in}), b(prefix + ".bias", {out}) {}

    Tensor<S> apply(const Tensor<S>& x) const { return dense_forward(x, w.value, b.value); }
    Tensor<S> forward(const Tensor<S>& x) {
        x_cache = x;
        return apply(x);
    }
    Tensor<S> backward(const Tensor<S>& dy) {
        Tensor<S> dx;
        dense_backward(x_cache, w.value, dy, dx, w.grad, b.grad);
        return dx;
    }
    void collect(ParamRefs<S>& out) {
        out.push_back(&w);
        out.push_back(&b);
    }
};

template <typename S>
struct ConvLayer {
    Param<S> k, b;
    Index stride, pad;
    Tensor<S> cols_cache;
    std::vector<Index> x_shape;

    ConvLayer(const std::string& prefix, Index oc, Index ic, Index ksize, Index stride_, Index pad_)
        : k(prefix + ".weight", {oc, ic, ksize, ksize}), b(prefix + ".bias", {oc}),
          stride(stride_), pad(pad_) {}

    Tensor<S> apply(const Tensor<S>& x) const { return conv2d_forward(x, k.value, b.value, stride, pad); }
    Tensor<S> forward(const Tensor<S>& x) {
        x_shape = x.shape();
        return conv2d_forward(x, k.value, b.value, stride, pad, &cols_cache);
    }
    Tensor<S> backward(const Tensor<S>& dy) {
        Tensor<S> dx;
        conv2d_backward(x_shape, k.value, cols_cache, dy, stride, pad, dx, k.grad, b.grad);
        return dx;
    }
    void collect(ParamRefs<S>& out) {
        out.push_back(&k);
        out.push_back(&b);
    }
};

template <typename S>
struct TConvLayer {
    Param<S> k, b;
    Index stride, pad;
    Tensor<S> rows_cache;
    std::vector<Index> x_shape;

    TConvLayer(const std::string& prefix, Index ic, Index oc, Index ksize, Index stride_, Index pad_)
        : k(prefix + ".weight", {ic, oc, ksize, ksize}), b(prefix + ".bias", {oc}),
          stride(stride_), pad(pad_) {}

    Tensor<S> apply(const Tensor<S>& x) const { return tconv2d_forward(x, k.value, b.value, stride, pad); }
    Tensor<S> forward(const Tensor<S>& x) {
        x_shape = x.shape();
        return tconv2d_forward(x, k.value, b.value, stride, pad, &rows_cache);
    }
    Tensor<S> backward(const Tensor<S>& dy) {
        Tensor<S> dx;
        tconv2d_backward(x_shape, k.value, rows_cache, dy, stride, pad, dx, k.grad, b.grad);
        return dx;
    }
    void collect(ParamRefs<S>& out) {
        out.push_back(&k);
        out.push_back(&b);
    }
};

template <typename S>
struct ReluOp {
    Tensor<S> y_cache;
    Tensor<S> forward(const Tensor<S>& x) {
        y_cache = relu(x);
        return y_cache;
    }
    Tensor<S> backward(const Tensor<S>& dy) const { return relu_backward(y_cache, dy); }
};

// ---- submodules --------------------------------------------------------------

template <typename S>
struct Encoder {
    ConvLayer<S> conv1, conv2;
    DenseLayer<S> fc, mu_head, logvar_head;
    ReluOp<S> r1, r2, r3;
    Index c2, q, flat, batch = 0;

    explicit Encoder(const ModelConfig& c)
        : conv1("encoder.conv1", c.enc_c1, 1, 4, 2, 1),
          conv2("encoder.conv2", c.enc_c2, c.enc_c1, 4, 2, 1),
          fc("encoder.fc", c.enc_fc, c.enc_flat()),
          mu_head("encoder.mu_head", c.latent_dim, c.enc_fc),
          logvar_head("encoder.logvar_head", c.latent_dim, c.enc_fc),
          c2(c.enc_c2), q(c.quarter_side()), flat(c.enc_flat()) {}

    std::pair<Tensor<S>, Tensor<S>> apply(const Tensor<S>& x) const {
        const Index n = x.dim(0);
        Tensor<S> h = relu(conv2.apply(relu(conv1.apply(x))));
        h = relu(fc.apply(std::move(h).reshaped({n, flat})));
        return {mu_head.apply(h), logvar_head.apply(h)};
    }

    std::pair<Tensor<S>, Tensor<S>> forward(const Tensor<S>& x) {
        batch = x.dim(0);
        Tensor<S> h = r2.forward(conv2.forward(r1.forward(conv1.forward(x))));
        h = r3.forward(fc.forward(std::move(h).reshaped({batch, flat})));
        return {mu_head.forward(h), logvar_head.forward(h)};
    }

    void backward(const Tensor<S>& dmu, const Tensor<S>& dlogvar) {
        Tensor<S> dh = mu_head.backward(dmu);
        dh.array() += logvar_head.backward(dlogvar).array();
        Tensor<S> d = fc.backward(r3.backward(dh));
        d = conv2.backward(r2.backward(std::move(d).reshaped({batch, c2, q, q})));
        conv1.backward(r1.backward(d));
    }

    void collect(ParamRefs<S>& out) {
        conv1.collect(out);
        conv2.collect(out);
        fc.collect(out);
        mu_head.collect(out);
        logvar_head.collect(out);
    }
};

// Three-layer MLP on the latent vector producing expert selection logits.
template <typename S>
struct GatingNet {
    DenseLayer<S> fc1, fc2, out;
    ReluOp<S> r1, r2;

    explicit GatingNet(const ModelConfig& c)
        : fc1("gate.fc1", c.gate_h1, c.latent_dim),
          fc2("gate.fc2", c.gate_h2, c.gate_h1),
          out("gate.out", c.num_experts, c.gate_h2) {}

    Tensor<S> apply(const Tensor<S>& z) const {
        return out.apply(relu(fc2.apply(relu(fc1.apply(z)))));
    }
    Tensor<S> forward(const Tensor<S>& z) {
        return out.forward(r2.forward(fc2.forward(r1.forward(fc1.forward(z)))));
    }
    Tensor<S> backward(const Tensor<S>& dlogits) {
        return fc1.backward(r1.backward(fc2.backward(r2.backward(out.backward(dlogits)))));
    }
    void collect(ParamRefs<S>& out_refs) {
        fc1.collect(out_refs);
        fc2.collect(out_refs);
        out.collect(out_refs);
    }
};

template <typename S>
struct Decoder {
    DenseLayer<S> fc1, fc2;
    TConvLayer<S> tconv1, tconv2;
    ReluOp<S> r1, r2, r3;
    Tensor<S> out_cache; // sigmoid output
    Index c1, q, flat, batch = 0;

    Decoder(const ModelConfig& c, Index e)
        : fc1("decoder" + std::to_string(e) + ".fc1", c.dec_fc1, c.latent_dim),
          fc2("decoder" + std::to_string(e) + ".fc2", c.dec_flat(), c.dec_fc1),
          tconv1("decoder" + std::to_string(e) + ".tconv1", c.dec_c1, c.dec_c2, 4, 2, 1),
          tconv2("decoder" + std::to_string(e) + ".tconv2", c.dec_c2, 1, 4, 2, 1),
          c1(c.dec_c1), q(c.quarter_side()), flat(c.dec_flat()) {}

    Tensor<S> apply(const Tensor<S>& z) const {
        const Index n = z.dim(0);
        Tensor<S> h = relu(fc2.apply(relu(fc1.apply(z))));
        h = relu(tconv1.apply(std::move(h).reshaped({n, c1, q, q})));
        return sigmoid(tconv2.apply(h));
    }
    Tensor<S> forward(const Tensor<S>& z) {
        batch = z.dim(0);
        Tensor<S> h = r2.forward(fc2.forward(r1.forward(fc1.forward(z))));
        h = r3.forward(tconv1.forward(std::move(h).reshaped({batch, c1, q, q})));
        out_cache = sigmoid(tconv2.forward(h));
        return out_cache;
    }
    Tensor<S> backward(const Tensor<S>& dy) {
        Tensor<S> d = tconv1.backward(r3.backward(tconv2.backward(sigmoid_backward(out_cache, dy))));
        d = fc1.backward(r1.backward(fc2.backward(r2.backward(std::move(d).reshaped({batch, flat})))));
        return d;
    }
    void collect(ParamRefs<S>& out) {
        fc1.collect(out);
        fc2.collect(out);
        tconv1.collect(out);
        tconv2.collect(out);
    }
};

// ---- model -------------------------------------------------------------------

template <typename S>
struct GateOutput {
    Tensor<S> logits; // [N x E]
    Tensor<S> probs;  // [N x E], row softmax of logits
    std::vector<Index> argmax;
};

template <typename S>
struct LatentSample {
    Tensor<S> mu, logvar, z, noise; // logvar is post-clamp
};

template <typename S>
struct SoftForward {
    Tensor<S> x_hat;
    GateOutput<S> gate;
    LatentSample<S> latent;
    std::vector<Tensor<S>> expert_outs;
    Tensor<S> logvar_raw; // pre-clamp head output, for the clamp mask
    bool gate_from_labels = false;
};

template <typename S>
struct HardForward {
    Tensor<S> x_hat;
    std::vector<Index> expert; // e* per sample
    Index decoder_evals = 0;
};

template <typename S>
class SmoeVae {
public:
    ModelConfig config;
    Encoder<S> encoder;
    GatingNet<S> gate_net;
    std::vector<Decoder<S>> decoders;
    Rng rng; // reparameterization noise stream

    explicit SmoeVae(const ModelConfig& cfg) : config(cfg), encoder(cfg), gate_net(cfg) {
        cfg.validate();
        decoders.reserve(std::size_t(cfg.num_experts));
        for (Index e = 0; e < cfg.num_experts; ++e) decoders.emplace_back(cfg, e);
        encoder.collect(params_);
        gate_net.collect(params_);
        for (auto& d : decoders) d.collect(params_);
        total_count_ = total_size(params_);
    }

    SmoeVae(const SmoeVae& o) : SmoeVae(o.config) { copy_values_from(o); }

    // Param refs point into the layer members, so a move re-collects them.
    SmoeVae(SmoeVae&& o) noexcept
        : config(o.config), encoder(std::move(o.encoder)), gate_net(std::move(o.gate_net)),
          decoders(std::move(o.decoders)), rng(o.rng) {
        encoder.collect(params_);
        gate_net.collect(params_);
        for (auto& d : decoders) d.collect(params_);
        total_count_ = total_size(params_);
    }

    SmoeVae& operator=(const SmoeVae&) = delete;
    SmoeVae& operator=(SmoeVae&&) = delete;

    const ParamRefs<S>& params() { return params_; }

    ParamRefs<S> gate_params() {
        ParamRefs<S> out;
        gate_net.collect(out);
        return out;
    }

    Index param_count() const { return total_count_; }
    Index gate_param_count() const {
        auto* self = const_cast<SmoeVae*>(this);
        ParamRefs<S> g;
        self->gate_net.collect(g);
        return total_size(g);
    }
    Index decoder_param_count() const {
        auto* self = const_cast<SmoeVae*>(this);
        ParamRefs<S> d;
        self->decoders[0].collect(d);
        return total_size(d);
    }
    Index encoder_param_count() const {
        auto* self = const_cast<SmoeVae*>(this);
        ParamRefs<S> e;
        self->encoder.collect(e);
        return total_size(e);
    }

    void copy_values_from(const SmoeVae& o) {
        auto* other = const_cast<SmoeVae*>(&o);
        for (std::size_t i = 0; i < params_.size(); ++i)
            params_[i]->value = other->params_[i]->value;
        rng = o.rng;
    }

private:
    ParamRefs<S> params_;
    Index total_count_ = 0;
};

// ---- operations ---------------------------------------------------------------

namespace detail {

template <typename S>
void kaiming_uniform(Tensor<S>& w, Index fan_in, Rng& rng) {
    const double bound = std::sqrt(6.0 / double(fan_in));
    for (Index i = 0; i < w.size(); ++i) w[i] = S(rng.uniform(-bound, bound));
}

template <typename S>
void init_dense(DenseLayer<S>& l, Rng& rng) {
    kaiming_uniform(l.w.value, l.w.value.dim(1), rng);
    l.b.value.set_zero();
}
template <typename S>
void init_conv(ConvLayer<S>& l, Rng& rng) {
    kaiming_uniform(l.k.value, l.k.value.dim(1) * l.k.value.dim(2) * l.k.value.dim(3), rng);
    l.b.value.set_zero();
}
template <typename S>
void init_tconv(TConvLayer<S>& l, Rng& rng) {
    kaiming_uniform(l.k.value, l.k.value.dim(0) * l.k.value.dim(2) * l.k.value.dim(3), rng);
    l.b.value.set_zero();
}

} // namespace detail

// Kaiming-uniform fan-in weights, zero biases. Decoders draw from distinct
// child streams so no two start identical; the model keeps stream 0 for its
// own sampling noise.
template <typename S>
SmoeVae<S> init_model(const ModelConfig& cfg, const Rng& seed_rng) {
    cfg.validate();
    SmoeVae<S> m(cfg);
    m.rng = seed_rng.fork(0);
    Rng enc = seed_rng.fork(1);
    detail::init_conv(m.encoder.conv1, enc);
    detail::init_conv(m.encoder.conv2, enc);
    detail::init_dense(m.encoder.fc, enc);
    detail::init_dense(m.encoder.mu_head, enc);
    detail::init_dense(m.encoder.logvar_head, enc);
    Rng gate = seed_rng.fork(2);
    detail::init_dense(m.gate_net.fc1, gate);
    detail::init_dense(m.gate_net.fc2, gate);
    detail::init_dense(m.gate_net.out, gate);
    for (Index e = 0; e < cfg.num_experts; ++e) {
        Rng dr = seed_rng.fork(3 + std::uint64_t(e));
        auto& d = m.decoders[std::size_t(e)];
        detail::init_dense(d.fc1, dr);
        detail::init_dense(d.fc2, dr);
        detail::init_tconv(d.tconv1, dr);
        detail::init_tconv(d.tconv2, dr);
    }
    return m;
}

template <typename S>
void check_image_batch(const SmoeVae<S>& m, const Tensor<S>& x) {
    const Index s = m.config.image_side;
    if (x.rank() != 4 || x.dim(1) != 1 || x.dim(2) != s || x.dim(3) != s)
        throw DimensionError("encode: expected [Nx1x" + std::to_string(s) + "x" + std::to_string(s) +
                             "] image batch, got " + x.shape_string());
}

// Pure encoding (no caches touched): mu and clamped logvar.
template <typename S>
std::pair<Tensor<S>, Tensor<S>> encode(const SmoeVae<S>& m, const Tensor<S>& x) {
    check_image_batch(m, x);
    auto [mu, logvar] = m.encoder.apply(x);
    const S c = S(m.config.logvar_clamp);
    logvar.array() = logvar.array().min(c).max(-c);
    return {std::move(mu), std::move(logvar)};
}

template <typename S>
Tensor<S> reparameterize(const Tensor<S>& mu, const Tensor<S>& logvar, Rng& rng,
                         Tensor<S>* noise_out = nullptr) {
    if (!mu.same_shape(logvar))
        throw DimensionError("reparameterize: mu " + mu.shape_string() + " vs logvar " + logvar.shape_string());
    Tensor<S> eps(mu.shape());
    for (Index i = 0; i < eps.size(); ++i) eps[i] = S(rng.normal());
    Tensor<S> z(mu.shape());
    z.array() = mu.array() + (S(0.5) * logvar.array()).exp() * eps.array();
    if (noise_out) *noise_out = std::move(eps);
    return z;
}

template <typename S>
GateOutput<S> make_gate_output(Tensor<S> logits) {
    GateOutput<S> g;
    g.probs = softmax_rows(logits);
    g.logits = std::move(logits);
    g.argmax.resize(std::size_t(g.logits.dim(0)));
    auto lm = g.logits.mat();
    for (Index r = 0; r < lm.rows(); ++r) {
        Index best = 0;
        lm.row(r).maxCoeff(&best);
        g.argmax[std::size_t(r)] = best;
    }
    return g;
}

// Pure gating on a latent batch.
template <typename S>
GateOutput<S> gate(const SmoeVae<S>& m, const Tensor<S>& z) {
    if (z.rank() != 2 || z.dim(1) != m.config.latent_dim)
        throw DimensionError("gate: expected [Nx" + std::to_string(m.config.latent_dim) + "], got " +
                             z.shape_string());
    return make_gate_output(m.gate_net.apply(z));
}

template <typename S>
Tensor<S> decode_one(const SmoeVae<S>& m, Index expert, const Tensor<S>& z) {
    if (expert < 0 || expert >= m.config.num_experts)
        throw ParameterError("decode_one: expert index " + std::to_string(expert) + " outside [0," +
                             std::to_string(m.config.num_experts) + ")");
    return m.decoders[std::size_t(expert)].apply(z);
}

// One-hot routing from ground-truth labels; logits carry a +10 margin on the
// hot index so downstream argmax and softmax agree with the labels.
template <typename S>
GateOutput<S> route_supervised(const std::vector<Index>& labels, Index num_experts) {
    GateOutput<S> g;
    const Index n = Index(labels.size());
    g.logits = Tensor<S>({n, num_experts});
    g.probs = Tensor<S>({n, num_experts});
    g.argmax.resize(std::size_t(n));
    for (Index i = 0; i < n; ++i) {
        const Index lab = labels[std::size_t(i)];
        if (lab < 0 || lab >= num_experts)
            throw DataError("route_supervised: label " + std::to_string(lab) + " outside [0," +
                            std::to_string(num_experts) + ")");
        g.logits.mat()(i, lab) = S(10);
        g.probs.mat()(i, lab) = S(1);
        g.argmax[std::size_t(i)] = lab;
    }
    return g;
}

// Training-mode forward: sample z, gate (or take supplied routing), run every
// decoder, mix with the routing probabilities.
template <typename S>
SoftForward<S> forward_soft(SmoeVae<S>& m, const Tensor<S>& x, Rng& rng,
                            const GateOutput<S>* routing_override = nullptr) {
    check_image_batch(m, x);
    const Index n = x.dim(0);
    SoftForward<S> f;

    auto [mu, logvar_raw] = m.encoder.forward(x);
    f.logvar_raw = logvar_raw;
    Tensor<S> logvar(logvar_raw.shape());
    const S c = S(m.config.logvar_clamp);
    logvar.array() = logvar_raw.array().min(c).max(-c);

    f.latent.mu = std::move(mu);
    f.latent.logvar = std::move(logvar);
    f.latent.z = reparameterize(f.latent.mu, f.latent.logvar, rng, &f.latent.noise);

    if (routing_override) {
        f.gate = *routing_override;
        f.gate_from_labels = true;
    } else {
        f.gate = make_gate_output(m.gate_net.forward(f.latent.z));
    }

    const Index e_count = m.config.num_experts;
    f.expert_outs.reserve(std::size_t(e_count));
    f.x_hat = Tensor<S>(x.shape());
    const Index pix = m.config.image_side * m.config.image_side;
    auto xhat_rows = f.x_hat.mat(n, pix);
    for (Index e = 0; e < e_count; ++e) {
        f.expert_outs.push_back(m.decoders[std::size_t(e)].forward(f.latent.z));
        auto yr = f.expert_outs.back().mat(n, pix);
        for (Index i = 0; i < n; ++i) xhat_rows.row(i) += f.gate.probs.mat()(i, e) * yr.row(i);
    }
    return f;
}

// Inference on latents: argmax routing, each needed decoder runs once on its
// gathered sub-batch so unused experts stay cold.
template <typename S>
HardForward<S> decode_hard(const SmoeVae<S>& m, const Tensor<S>& z,
                           const std::vector<Index>* forced_experts = nullptr) {
    const Index n = z.dim(0);
    HardForward<S> f;
    if (forced_experts) {
        if (Index(forced_experts->size()) != n)
            throw DimensionError("decode_hard: forced expert list length mismatch");
        f.expert = *forced_experts;
        for (Index lab : f.expert)
            if (lab < 0 || lab >= m.config.num_experts)
                throw DataError("decode_hard: expert " + std::to_string(lab) + " out of range");
    } else {
        f.expert = gate(m, z).argmax;
    }

    const Index side = m.config.image_side;
    f.x_hat = Tensor<S>({n, 1, side, side});
    auto xhat_rows = f.x_hat.mat(n, side * side);
    const Index d = m.config.latent_dim;
    for (Index e = 0; e < m.config.num_experts; ++e) {
        std::vector<Index> rows;
        for (Index i = 0; i < n; ++i)
            if (f.expert[std::size_t(i)] == e) rows.push_back(i);
        if (rows.empty()) continue;
        Tensor<S> sub({Index(rows.size()), d});
        for (Index r = 0; r < Index(rows.size()); ++r) sub.mat().row(r) = z.mat().row(rows[std::size_t(r)]);
        Tensor<S> out = m.decoders[std::size_t(e)].apply(sub);
        auto out_rows = out.mat(Index(rows.size()), side * side);
        for (Index r = 0; r < Index(rows.size()); ++r) xhat_rows.row(rows[std::size_t(r)]) = out_rows.row(r);
        ++f.decoder_evals;
    }
    return f;
}

// Inference on images: z = mu (no sampling), then hard routing.
template <typename S>
HardForward<S> forward_hard(const SmoeVae<S>& m, const Tensor<S>& x,
                            const std::vector<Index>* forced_experts = nullptr) {
    auto enc = encode(m, x);
    return decode_hard(m, enc.first, forced_experts);
}

// Reverse pass seeded by the loss partials. Fills every parameter gradient;
// in label-routed mode the gating MLP is bypassed so its grads stay zero.
template <typename S>
void backward_soft(SmoeVae<S>& m, SoftForward<S>& f, const Tensor<S>& x, const LossConfig& cfg) {
    const Index n = x.dim(0);
    const Index e_count = m.config.num_experts;
    const Index pix = m.config.image_side * m.config.image_side;

    Tensor<S> d_xhat = d_recon_d_xhat(x, f.x_hat);
    auto dxh_rows = d_xhat.mat(n, pix);

    // Mixture: gradient to each expert and to the routing probabilities.
    Tensor<S> dz({n, m.config.latent_dim});
    Tensor<S> dprobs({n, e_count});
    Tensor<S> dy_e(d_xhat.shape());
    for (Index e = 0; e < e_count; ++e) {
        auto y_rows = f.expert_outs[std::size_t(e)].mat(n, pix);
        auto dy_rows = dy_e.mat(n, pix);
        for (Index i = 0; i < n; ++i) {
            dprobs.mat()(i, e) = dxh_rows.row(i).dot(y_rows.row(i));
            dy_rows.row(i) = f.gate.probs.mat()(i, e) * dxh_rows.row(i);
        }
        dz.array() += m.decoders[std::size_t(e)].backward(dy_e).array();
    }

    if (!f.gate_from_labels) {
        add_d_balance(f.gate.probs, cfg.alpha * cfg.lambda_balance, dprobs);
        add_d_entropy(f.gate.probs, cfg.alpha * cfg.lambda_entropy, cfg.eps, dprobs);
        Tensor<S> dlogits = softmax_rows_backward(f.gate.probs, dprobs);
        dz.array() += m.gate_net.backward(dlogits).array();
    }

    // Reparameterization and KL.
    Tensor<S> dmu = dz;
    Tensor<S> dlogvar(dz.shape());
    dlogvar.array() = dz.array() * f.latent.noise.array() * S(0.5) * (S(0.5) * f.latent.logvar.array()).exp();
    add_d_kl(f.latent.mu, f.latent.logvar, cfg.beta, dmu, dlogvar);

    // Clamp mask on the raw logvar head output.
    const S c = S(m.config.logvar_clamp);
    Tensor<S> dlogvar_raw(dlogvar.shape());
    dlogvar_raw.array() =
        dlogvar.array() * ((f.logvar_raw.array() > -c) && (f.logvar_raw.array() < c)).template cast<S>();

    m.encoder.backward(dmu, dlogvar_raw);
}

// Auxiliary classifier gradient for supervised-gate mode: mean cross-entropy
// of gate logits against labels. Runs on the latent mean, the same input hard
// routing sees at evaluation time, and the latent is treated as detached.
template <typename S>
double gate_classifier_step(SmoeVae<S>& m, const Tensor<S>& z, const std::vector<Index>& labels) {
    Tensor<S> logits = m.gate_net.forward(z);
    Tensor<S> p = softmax_rows(logits);
    const Index n = z.dim(0);
    double ce = 0;
    Tensor<S> dlogits = p;
    for (Index i = 0; i < n; ++i) {
        const Index lab = labels[std::size_t(i)];
        ce -= std::log(std::max(double(p.mat()(i, lab)), 1e-12));
        dlogits.mat()(i, lab) -= S(1);
    }
    dlogits.array() /= S(n);
    m.gate_net.backward(dlogits); // gradient into z is discarded
    return ce / double(n);
}

template <typename S>
LossBreakdown total_loss(const Tensor<S>& x, const SoftForward<S>& f, const LossConfig& cfg) {
    return total_loss_terms(x, f.x_hat, f.gate.probs, f.latent.mu, f.latent.logvar, cfg);
}

} // namespace smoe
