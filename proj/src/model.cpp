#include "sedt/model.hpp"

#include <cmath>
#include <cstdint>
#include <istream>
#include <ostream>

namespace sedt {

using ag::Tape;
using ag::Var;

void ModelConfig::validate() const {
    if (n_mels < 1) throw ValidationError("n_mels must be >= 1");
    if (backbone.empty()) throw ValidationError("backbone needs at least one stage");
    for (const auto& s : backbone) {
        if (s.channels < 1 || s.stride_time < 1 || s.stride_freq < 1) {
            throw ValidationError("backbone stages need positive channels and strides");
        }
    }
    if (d_model < 2 || d_model % 2 != 0) throw ValidationError("d_model must be even");
    if (n_heads < 1 || d_model % n_heads != 0) throw ValidationError("d_model must be divisible by n_heads");
    if (ffn_width < 1) throw ValidationError("ffn_width must be >= 1");
    if (encoder_layers < 1 || decoder_layers < 1) throw ValidationError("need at least one encoder and decoder block");
    if (num_queries < 1) throw ValidationError("need at least one event query");
    if (num_classes < 1) throw ValidationError("need at least one class");
    if (dropout < 0.0 || dropout >= 1.0) throw ValidationError("dropout must lie in [0, 1)");
    if (boundary_head_layers != 1 && boundary_head_layers != 3) {
        throw ValidationError("boundary head supports 1 or 3 layers");
    }
}

int ModelConfig::time_stride() const {
    int s = 1;
    for (const auto& st : backbone) s *= st.stride_time;
    return s;
}

int ModelConfig::freq_stride() const {
    int s = 1;
    for (const auto& st : backbone) s *= st.stride_freq;
    return s;
}

Matrix positional_encoding(int time_steps, int freq_bins, int d_model) {
    if (d_model % 2 != 0 || d_model < 2) throw ValidationError("positional encoding needs an even width");
    if (time_steps < 1 || freq_bins < 1) throw ValidationError("positional encoding needs T, F >= 1");
    Matrix p(static_cast<Eigen::Index>(time_steps) * freq_bins, d_model);
    for (int t = 0; t < time_steps; ++t) {
        for (int i = 0; i < d_model / 2; ++i) {
            const double angle = t / std::pow(10000.0, 2.0 * i / d_model);
            const double s = std::sin(angle), c = std::cos(angle);
            for (int f = 0; f < freq_bins; ++f) {
                const Eigen::Index row = static_cast<Eigen::Index>(t) * freq_bins + f;
                p(row, 2 * i) = s;
                p(row, 2 * i + 1) = c;
            }
        }
    }
    return p;
}

int backbone_kernel(int stride) { return std::max(3, 2 * stride - 1); }

std::vector<char> downsample_mask(std::span<const char> mask, int stride) {
    const std::size_t out = (mask.size() + static_cast<std::size_t>(stride) - 1) / static_cast<std::size_t>(stride);
    std::vector<char> r(out);
    for (std::size_t t = 0; t < out; ++t) r[t] = mask[t * static_cast<std::size_t>(stride)];
    return r;
}

PredictionSet ForwardGraph::prediction() const {
    PredictionSet p;
    for (std::size_t m = 0; m < class_probs.size(); ++m) {
        p.blocks.push_back({class_probs[m].value(), boundaries[m].value()});
    }
    p.tag_probs = tag_probs.value().row(0);
    return p;
}

// ---- construction -----------------------------------------------------------

namespace {

Matrix xavier(int fan_in, int fan_out, Eigen::Index rows, Eigen::Index cols, std::mt19937_64& rng) {
    const double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
    std::uniform_real_distribution<double> u(-limit, limit);
    Matrix m(rows, cols);
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = u(rng);
    return m;
}

}  // namespace

int SedtModel::add_param(const std::string& name, Matrix value) {
    params_.push_back({name, std::move(value), Matrix()});
    params_.back().zero_grad();
    return static_cast<int>(params_.size() - 1);
}

SedtModel::Linear SedtModel::make_linear(const std::string& name, int in, int out, std::mt19937_64& rng) {
    Linear l;
    l.weight = add_param(name + ".weight", xavier(in, out, in, out, rng));
    l.bias = add_param(name + ".bias", Matrix::Zero(1, out));
    return l;
}

SedtModel::Norm SedtModel::make_norm(const std::string& name, int width) {
    Norm n;
    n.gain = add_param(name + ".gain", Matrix::Ones(1, width));
    n.bias = add_param(name + ".bias", Matrix::Zero(1, width));
    return n;
}

SedtModel::Attention SedtModel::make_attention(const std::string& name, std::mt19937_64& rng) {
    const int d = cfg_.d_model;
    Attention a{make_linear(name + ".q", d, d, rng), make_linear(name + ".k", d, d, rng),
                make_linear(name + ".v", d, d, rng), make_linear(name + ".o", d, d, rng)};
    attention_index_.push_back(a);
    return a;
}

SedtModel::SedtModel(ModelConfig cfg, std::uint64_t seed) : cfg_(std::move(cfg)) {
    cfg_.validate();
    std::mt19937_64 rng(seed);
    const int d = cfg_.d_model;

    int in_ch = 1;
    for (std::size_t s = 0; s < cfg_.backbone.size(); ++s) {
        const auto& st = cfg_.backbone[s];
        const int kh = backbone_kernel(st.stride_time), kw = backbone_kernel(st.stride_freq);
        const int fan_in = in_ch * kh * kw;
        Conv c;
        c.weight = add_param("backbone." + std::to_string(s) + ".weight",
                             xavier(fan_in, st.channels * kh * kw, st.channels, fan_in, rng));
        c.bias = add_param("backbone." + std::to_string(s) + ".bias", Matrix::Zero(st.channels, 1));
        stages_.push_back(c);
        in_ch = st.channels;
    }
    projection_.weight = add_param("projection.weight", xavier(in_ch, d, d, in_ch, rng));
    projection_.bias = add_param("projection.bias", Matrix::Zero(d, 1));

    for (int e = 0; e < cfg_.encoder_layers; ++e) {
        const std::string p = "encoder." + std::to_string(e);
        EncoderBlock b;
        b.self_attn = make_attention(p + ".self_attn", rng);
        b.norm1 = make_norm(p + ".norm1", d);
        b.ffn1 = make_linear(p + ".ffn1", d, cfg_.ffn_width, rng);
        b.ffn2 = make_linear(p + ".ffn2", cfg_.ffn_width, d, rng);
        b.norm2 = make_norm(p + ".norm2", d);
        encoder_.push_back(b);
    }
    for (int m = 0; m < cfg_.decoder_layers; ++m) {
        const std::string p = "decoder." + std::to_string(m);
        DecoderBlock b;
        b.self_attn = make_attention(p + ".self_attn", rng);
        b.norm1 = make_norm(p + ".norm1", d);
        b.cross_attn = make_attention(p + ".cross_attn", rng);
        b.norm2 = make_norm(p + ".norm2", d);
        b.ffn1 = make_linear(p + ".ffn1", d, cfg_.ffn_width, rng);
        b.ffn2 = make_linear(p + ".ffn2", cfg_.ffn_width, d, rng);
        b.norm3 = make_norm(p + ".norm3", d);
        decoder_.push_back(b);
    }
    decoder_norm_ = make_norm("decoder.norm", d);

    std::normal_distribution<double> gauss(0.0, 1.0);
    Matrix queries(cfg_.num_queries + 1, d);
    for (Eigen::Index i = 0; i < queries.size(); ++i) queries.data()[i] = gauss(rng);
    query_embed_ = add_param("query_embed", std::move(queries));

    class_head_ = make_linear("head.class", d, cfg_.num_classes + 1, rng);
    if (cfg_.boundary_head_layers == 3) {
        boundary_head_.push_back(make_linear("head.boundary.0", d, d, rng));
        boundary_head_.push_back(make_linear("head.boundary.1", d, d, rng));
    }
    boundary_head_.push_back(make_linear("head.boundary.out", d, 2, rng));
    tag_head_ = make_linear("head.tag", d, cfg_.num_classes, rng);
}

std::size_t SedtModel::parameter_count() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += static_cast<std::size_t>(p.value.size());
    return n;
}

ag::Parameter& SedtModel::parameter(const std::string& name) {
    for (auto& p : params_) {
        if (p.name == name) return p;
    }
    throw ValidationError("no parameter named '" + name + "'");
}

void SedtModel::zero_grad() {
    for (auto& p : params_) p.zero_grad();
}

// ---- forward ----------------------------------------------------------------

Var SedtModel::param(Tape& tape, int index, const RunOptions& opts) const {
    auto& p = const_cast<ag::Parameter&>(params_[static_cast<std::size_t>(index)]);
    return opts.track_grad ? tape.parameter(p) : tape.constant(p.value);
}

Var SedtModel::linear(Tape& tape, const Linear& l, const Var& x, const RunOptions& opts) const {
    return ag::add_row(ag::matmul(x, param(tape, l.weight, opts)), param(tape, l.bias, opts));
}

Var SedtModel::norm(Tape& tape, const Norm& n, const Var& x, const RunOptions& opts) const {
    return ag::layer_norm(x, param(tape, n.gain, opts), param(tape, n.bias, opts));
}

Var SedtModel::drop(const Var& x, const RunOptions& opts) const {
    if (!opts.training || cfg_.dropout <= 0.0) return x;
    if (!opts.rng) throw ValidationError("training-mode forward needs an RNG for dropout");
    return ag::dropout(x, cfg_.dropout, *opts.rng);
}

Var SedtModel::backbone_forward(Tape& tape, const Matrix& spec, std::span<const char> pad_mask,
                                std::vector<char>* out_mask, int* out_t, int* out_f, const RunOptions& opts) const {
    if (spec.cols() != cfg_.n_mels) {
        throw ValidationError("spectrogram has " + std::to_string(spec.cols()) + " bins, model expects " +
                              std::to_string(cfg_.n_mels));
    }
    if (!spec.allFinite()) throw ValidationError("spectrogram contains non-finite values");
    if (!pad_mask.empty() && static_cast<Eigen::Index>(pad_mask.size()) != spec.rows()) {
        throw ValidationError("padding mask does not match the spectrogram length");
    }
    std::vector<char> mask(pad_mask.begin(), pad_mask.end());
    if (mask.empty()) mask.assign(static_cast<std::size_t>(spec.rows()), 0);

    Matrix input = spec;
    for (Eigen::Index t = 0; t < spec.rows(); ++t) {
        if (mask[static_cast<std::size_t>(t)]) input.row(t).setZero();
    }
    int h = static_cast<int>(spec.rows()), w = static_cast<int>(spec.cols());
    Var x = tape.constant(Eigen::Map<const Matrix>(input.data(), 1, input.size()));
    int in_ch = 1;
    for (std::size_t s = 0; s < stages_.size(); ++s) {
        const auto& st = cfg_.backbone[s];
        ag::Conv2dGeometry g;
        g.in_channels = in_ch;
        g.height = h;
        g.width = w;
        g.kernel_h = backbone_kernel(st.stride_time);
        g.kernel_w = backbone_kernel(st.stride_freq);
        g.stride_h = st.stride_time;
        g.stride_w = st.stride_freq;
        g.pad_h = (g.kernel_h - 1) / 2;
        g.pad_w = (g.kernel_w - 1) / 2;
        x = ag::relu(ag::conv2d(x, param(tape, stages_[s].weight, opts), param(tape, stages_[s].bias, opts), g));
        h = g.out_height();
        w = g.out_width();
        mask = downsample_mask(mask, st.stride_time);
        if (std::find(mask.begin(), mask.end(), 1) != mask.end()) {
            ag::RowVector keep(static_cast<Eigen::Index>(h) * w);
            for (int t = 0; t < h; ++t) {
                keep.segment(static_cast<Eigen::Index>(t) * w, w).setConstant(mask[static_cast<std::size_t>(t)] ? 0.0 : 1.0);
            }
            x = ag::scale_cols(x, keep);
        }
        in_ch = st.channels;
    }
    if (out_mask) *out_mask = mask;
    if (out_t) *out_t = h;
    if (out_f) *out_f = w;
    return x;
}

Var SedtModel::channel_projection(Tape& tape, const Var& fmap, const RunOptions& opts) const {
    return ag::add_col(ag::matmul(param(tape, projection_.weight, opts), fmap), param(tape, projection_.bias, opts));
}

Var SedtModel::attention(Tape& tape, int block, const Var& query, const Var& key, const Var& value,
                         std::span<const char> key_mask, const RunOptions& opts, std::vector<Matrix>* weights) const {
    const auto& a = attention_index_.at(static_cast<std::size_t>(block));
    const Var q = linear(tape, a.q, query, opts);
    const Var k = linear(tape, a.k, key, opts);
    const Var v = linear(tape, a.v, value, opts);
    const int dh = cfg_.d_model / cfg_.n_heads;
    const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
    std::vector<Var> heads;
    heads.reserve(static_cast<std::size_t>(cfg_.n_heads));
    if (weights) weights->clear();
    for (int h = 0; h < cfg_.n_heads; ++h) {
        const Var qh = ag::slice_cols(q, h * dh, dh);
        const Var kh = ag::slice_cols(k, h * dh, dh);
        const Var vh = ag::slice_cols(v, h * dh, dh);
        Var attn = ag::softmax_rows(ag::scale(ag::matmul_nt(qh, kh), inv_sqrt), key_mask);
        if (weights) weights->push_back(attn.value());
        attn = drop(attn, opts);
        heads.push_back(ag::matmul(attn, vh));
    }
    const Var merged = cfg_.n_heads == 1 ? heads.front() : ag::concat_cols(heads);
    return linear(tape, a.o, merged, opts);
}

Var SedtModel::encoder_forward(Tape& tape, const Var& tokens, const Matrix& pos, std::span<const char> token_mask,
                               const RunOptions& opts) const {
    const Var p = tape.constant(pos);
    Var src = tokens;
    for (std::size_t e = 0; e < encoder_.size(); ++e) {
        const auto& b = encoder_[e];
        const Var qk = ag::add(src, p);
        const Var attn = attention(tape, static_cast<int>(e), qk, qk, src, token_mask, opts);
        src = norm(tape, b.norm1, ag::add(src, drop(attn, opts)), opts);
        const Var ff = linear(tape, b.ffn2, drop(ag::relu(linear(tape, b.ffn1, src, opts)), opts), opts);
        src = norm(tape, b.norm2, ag::add(src, drop(ff, opts)), opts);
    }
    return src;
}

std::vector<Var> SedtModel::decoder_forward(Tape& tape, const Var& memory, const Matrix& pos,
                                            std::span<const char> token_mask, const RunOptions& opts) const {
    const Var query_pos = param(tape, query_embed_, opts);
    const Var mem_key = ag::add(memory, tape.constant(pos));
    Var tgt = tape.constant(Matrix::Zero(cfg_.num_queries + 1, cfg_.d_model));
    std::vector<Var> states;
    const int base = static_cast<int>(encoder_.size());
    for (std::size_t m = 0; m < decoder_.size(); ++m) {
        const auto& b = decoder_[m];
        const Var qk = ag::add(tgt, query_pos);
        const Var self = attention(tape, base + 2 * static_cast<int>(m), qk, qk, tgt, {}, opts);
        tgt = norm(tape, b.norm1, ag::add(tgt, drop(self, opts)), opts);
        const Var cross = attention(tape, base + 2 * static_cast<int>(m) + 1, ag::add(tgt, query_pos), mem_key, memory,
                                    token_mask, opts);
        tgt = norm(tape, b.norm2, ag::add(tgt, drop(cross, opts)), opts);
        const Var ff = linear(tape, b.ffn2, drop(ag::relu(linear(tape, b.ffn1, tgt, opts)), opts), opts);
        tgt = norm(tape, b.norm3, ag::add(tgt, drop(ff, opts)), opts);
        states.push_back(norm(tape, decoder_norm_, tgt, opts));
    }
    return states;
}

std::pair<Var, Var> SedtModel::event_heads(Tape& tape, const Var& state, const RunOptions& opts) const {
    const Var events = ag::slice_rows(state, 0, cfg_.num_queries);
    const Var probs = ag::softmax_rows(linear(tape, class_head_, events, opts));
    Var h = events;
    for (std::size_t i = 0; i + 1 < boundary_head_.size(); ++i) h = ag::relu(linear(tape, boundary_head_[i], h, opts));
    const Var bounds = ag::sigmoid(linear(tape, boundary_head_.back(), h, opts));
    return {probs, bounds};
}

Var SedtModel::tag_head(Tape& tape, const Var& state, const RunOptions& opts) const {
    const Var audio = ag::slice_rows(state, cfg_.num_queries, 1);
    return ag::sigmoid(linear(tape, tag_head_, audio, opts));
}

ForwardGraph SedtModel::forward(Tape& tape, const Matrix& spec, std::span<const char> pad_mask,
                                const RunOptions& opts) const {
    ForwardGraph g;
    std::vector<char> time_mask;
    g.backbone = backbone_forward(tape, spec, pad_mask, &time_mask, &g.time_steps, &g.freq_bins, opts);
    g.projected = channel_projection(tape, g.backbone, opts);
    const Var tokens = ag::transpose(g.projected);

    g.token_mask.assign(static_cast<std::size_t>(g.time_steps) * static_cast<std::size_t>(g.freq_bins), 0);
    bool any_pad = false;
    for (int t = 0; t < g.time_steps; ++t) {
        if (!time_mask[static_cast<std::size_t>(t)]) continue;
        any_pad = true;
        for (int f = 0; f < g.freq_bins; ++f) {
            g.token_mask[static_cast<std::size_t>(t) * static_cast<std::size_t>(g.freq_bins) + static_cast<std::size_t>(f)] = 1;
        }
    }
    const std::span<const char> mask = any_pad ? std::span<const char>(g.token_mask) : std::span<const char>();
    const Matrix pos = positional_encoding(g.time_steps, g.freq_bins, cfg_.d_model);
    g.memory = encoder_forward(tape, tokens, pos, mask, opts);
    g.decoder_states = decoder_forward(tape, g.memory, pos, mask, opts);
    for (const auto& s : g.decoder_states) {
        auto [probs, bounds] = event_heads(tape, s, opts);
        g.class_probs.push_back(probs);
        g.boundaries.push_back(bounds);
    }
    g.tag_probs = tag_head(tape, g.decoder_states.back(), opts);
    return g;
}

PredictionSet SedtModel::predict(const Matrix& spec, std::span<const char> pad_mask) const {
    Tape tape;
    RunOptions opts;
    opts.track_grad = false;
    return forward(tape, spec, pad_mask, opts).prediction();
}

// ---- loss attachment ----------------------------------------------------------

Var attach_loss(Tape& tape, const ForwardGraph& graph, double value, const PredictionGrad& grad) {
    if (grad.blocks.size() != graph.class_probs.size()) {
        throw ValidationError("gradient does not match the number of decoder blocks");
    }
    std::vector<Var> inputs;
    for (std::size_t m = 0; m < graph.class_probs.size(); ++m) {
        inputs.push_back(graph.class_probs[m]);
        inputs.push_back(graph.boundaries[m]);
    }
    inputs.push_back(graph.tag_probs);
    Matrix v(1, 1);
    v(0, 0) = value;
    return tape.record(std::move(v), inputs, [inputs, grad](Tape& t, const Matrix& g) {
        const double s = g(0, 0);
        for (std::size_t m = 0; m < grad.blocks.size(); ++m) {
            t.accumulate_expr(inputs[2 * m], s * grad.blocks[m].class_probs);
            t.accumulate_expr(inputs[2 * m + 1], s * grad.blocks[m].boundaries);
        }
        t.accumulate_expr(inputs.back(), s * grad.tag_probs);
    });
}

// ---- serialization ------------------------------------------------------------

namespace {

constexpr std::uint32_t kParamMagic = 0x50544453u;  // "SDTP"

template <typename T>
void write_pod(std::ostream& os, const T& v) {
    os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T read_pod(std::istream& is) {
    T v{};
    is.read(reinterpret_cast<char*>(&v), sizeof(T));
    if (!is) throw ParseError("truncated parameter blob");
    return v;
}

}  // namespace

void SedtModel::save_parameters(std::ostream& os) const {
    write_pod(os, kParamMagic);
    write_pod(os, static_cast<std::uint32_t>(params_.size()));
    for (const auto& p : params_) {
        write_pod(os, static_cast<std::uint32_t>(p.name.size()));
        os.write(p.name.data(), static_cast<std::streamsize>(p.name.size()));
        write_pod(os, static_cast<std::uint32_t>(p.value.rows()));
        write_pod(os, static_cast<std::uint32_t>(p.value.cols()));
        os.write(reinterpret_cast<const char*>(p.value.data()),
                 static_cast<std::streamsize>(sizeof(double) * static_cast<std::size_t>(p.value.size())));
    }
}

void SedtModel::load_parameters(std::istream& is) {
    if (read_pod<std::uint32_t>(is) != kParamMagic) throw ParseError("not a parameter blob");
    const auto count = read_pod<std::uint32_t>(is);
    if (count != params_.size()) throw ParseError("parameter count does not match the model configuration");
    for (auto& p : params_) {
        const auto len = read_pod<std::uint32_t>(is);
        std::string name(len, '\0');
        is.read(name.data(), len);
        const auto rows = read_pod<std::uint32_t>(is);
        const auto cols = read_pod<std::uint32_t>(is);
        if (name != p.name || rows != p.value.rows() || cols != p.value.cols()) {
            throw ParseError("parameter '" + name + "' does not match the model configuration");
        }
        is.read(reinterpret_cast<char*>(p.value.data()),
                static_cast<std::streamsize>(sizeof(double) * static_cast<std::size_t>(p.value.size())));
        if (!is) throw ParseError("truncated parameter blob");
    }
}

}  // namespace sedt
