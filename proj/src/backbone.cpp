#include "tempofit/backbone.hpp"

#include <cmath>
#include <cstring>
#include <numeric>
#include <string>

#include "tempofit/hashing.hpp"
#include "tempofit/numerics.hpp"
#include "tempofit/rng.hpp"

namespace tempofit {

void BackboneConfig::validate() const {
    if (num_layers < 1 || num_heads < 1 || head_dim < 1 || prefix_tokens < 1 || action_dim < 1 ||
        ff_mult < 1) {
        throw ConfigError("BackboneConfig: all dims must be >= 1");
    }
    if (head_dim % 2 != 0) {
        throw ConfigError("BackboneConfig: head_dim must be even for RoPE, got " +
                          std::to_string(head_dim));
    }
}

namespace {

std::vector<double> random_matrix(Rng& rng, int64_t rows, int64_t cols, double scale) {
    std::vector<double> m(static_cast<size_t>(rows * cols));
    for (double& v : m) v = scale * rng.symmetric();
    return m;
}

} // namespace

BackboneWeights backbone_init(const BackboneConfig& config) {
    config.validate();
    const int64_t md = config.model_dim();
    const int64_t ff = md * config.ff_mult;
    const double scale = 1.0 / std::sqrt(static_cast<double>(md));

    Rng rng(config.seed);
    BackboneWeights w;
    w.config = config;
    w.layers.resize(static_cast<size_t>(config.num_layers));
    for (auto& layer : w.layers) {
        layer.w_q = random_matrix(rng, md, md, scale);
        layer.w_k = random_matrix(rng, md, md, scale);
        layer.w_v = random_matrix(rng, md, md, scale);
        layer.w_o = random_matrix(rng, md, md, scale);
        layer.w_ff1 = random_matrix(rng, md, ff, scale);
        layer.w_ff2 = random_matrix(rng, ff, md, scale);
        layer.attn_norm_gain.assign(static_cast<size_t>(md), 1.0);
        layer.ff_norm_gain.assign(static_cast<size_t>(md), 1.0);
    }
    w.readout = random_matrix(rng, md, config.action_dim, scale);
    return w;
}

uint64_t BackboneWeights::content_hash() const {
    uint64_t h = fnv1a64(&config, sizeof(config));
    for (const LayerWeights& l : layers) {
        h = fnv1a64(l.w_q, h);
        h = fnv1a64(l.w_k, h);
        h = fnv1a64(l.w_v, h);
        h = fnv1a64(l.w_o, h);
        h = fnv1a64(l.w_ff1, h);
        h = fnv1a64(l.w_ff2, h);
        h = fnv1a64(l.attn_norm_gain, h);
        h = fnv1a64(l.ff_norm_gain, h);
    }
    return fnv1a64(readout, h);
}

std::set<int> default_mem_layers(int64_t num_layers) {
    std::set<int> layers;
    const int64_t start = num_layers / 3;
    const int64_t stop = num_layers - num_layers / 3;
    for (int64_t l = start; l < stop; ++l) layers.insert(static_cast<int>(l));
    return layers;
}

TempoFitConfig default_tempofit_config(const BackboneConfig& backbone) {
    TempoFitConfig tf;
    tf.mem_layers = default_mem_layers(backbone.num_layers);
    tf.capacity = 8;
    tf.fgtb.beta = 1.0;
    tf.fgtb.alpha_s = static_cast<double>(backbone.prefix_tokens);
    tf.fgtb.slopes = head_slopes(backbone.num_heads);
    return tf;
}

void TempoFitConfig::validate(const BackboneConfig& backbone) const {
    if (capacity < 1) {
        throw ConfigError("TempoFitConfig: capacity must be >= 1, got " + std::to_string(capacity));
    }
    for (int l : mem_layers) {
        if (l < 0 || l >= backbone.num_layers) {
            throw ConfigError("TempoFitConfig: mem_layer " + std::to_string(l) + " outside [0, " +
                              std::to_string(backbone.num_layers) + ")");
        }
    }
    if (fgtb.beta < 0.0) throw ConfigError("TempoFitConfig: beta must be >= 0");
    if (!(fgtb.alpha_s > 0.0)) throw ConfigError("TempoFitConfig: alpha_s must be > 0");
    if (static_cast<int64_t>(fgtb.slopes.size()) != backbone.num_heads) {
        throw ConfigError("TempoFitConfig: need one slope per head");
    }
    for (double m : fgtb.slopes) {
        if (!(m > 0.0)) throw ConfigError("TempoFitConfig: slopes must be > 0");
    }
    if (!(epsilon > 0.0)) throw ConfigError("TempoFitConfig: epsilon must be > 0");
}

namespace {

// x: [B,1,N,md], gain: [md]
Tensor4 rms_norm(const Tensor4& x, const std::vector<double>& gain) {
    Tensor4 out(x.batch, 1, x.tokens, x.dim);
    const int64_t md = x.dim;
    for (int64_t b = 0; b < x.batch; ++b) {
        for (int64_t n = 0; n < x.tokens; ++n) {
            const double* in = x.row(b, 0, n);
            double* o = out.row(b, 0, n);
            double ss = 0.0;
            for (int64_t c = 0; c < md; ++c) ss += in[c] * in[c];
            const double inv = 1.0 / std::sqrt(ss / static_cast<double>(md) + 1e-6);
            for (int64_t c = 0; c < md; ++c) o[c] = in[c] * inv * gain[static_cast<size_t>(c)];
        }
    }
    return out;
}

// x: [B,1,N,in], w: [in, out] row-major -> [B,1,N,out]
Tensor4 linear(const Tensor4& x, const std::vector<double>& w, int64_t out_cols) {
    const int64_t in = x.dim;
    Tensor4 out(x.batch, 1, x.tokens, out_cols);
    for (int64_t b = 0; b < x.batch; ++b) {
        for (int64_t n = 0; n < x.tokens; ++n) {
            const double* xr = x.row(b, 0, n);
            double* o = out.row(b, 0, n);
            for (int64_t k = 0; k < in; ++k) {
                const double xv = xr[k];
                const double* wrow = w.data() + k * out_cols;
                for (int64_t j = 0; j < out_cols; ++j) o[j] += xv * wrow[j];
            }
        }
    }
    return out;
}

// [B,1,N,H*d] -> [B,H,N,d]
Tensor4 split_heads(const Tensor4& x, int64_t H, int64_t d) {
    Tensor4 out(x.batch, H, x.tokens, d);
    for (int64_t b = 0; b < x.batch; ++b)
        for (int64_t n = 0; n < x.tokens; ++n) {
            const double* in = x.row(b, 0, n);
            for (int64_t h = 0; h < H; ++h) {
                double* o = out.row(b, h, n);
                for (int64_t k = 0; k < d; ++k) o[k] = in[h * d + k];
            }
        }
    return out;
}

// [B,H,N,d] -> [B,1,N,H*d]
Tensor4 merge_heads(const Tensor4& x) {
    Tensor4 out(x.batch, 1, x.tokens, x.heads * x.dim);
    for (int64_t b = 0; b < x.batch; ++b)
        for (int64_t n = 0; n < x.tokens; ++n) {
            double* o = out.row(b, 0, n);
            for (int64_t h = 0; h < x.heads; ++h) {
                const double* in = x.row(b, h, n);
                for (int64_t k = 0; k < x.dim; ++k) o[h * x.dim + k] = in[k];
            }
        }
    return out;
}

void silu_inplace(Tensor4& x) {
    for (double& v : x.data) v = v / (1.0 + std::exp(-v));
}

void add_inplace(Tensor4& x, const Tensor4& y) {
    for (size_t i = 0; i < x.data.size(); ++i) x.data[i] += y.data[i];
}

// Mean row entropy (nats) of a weight tensor whose rows sum to one.
double mean_row_entropy(const Tensor4& w) {
    const int64_t rows = w.batch * w.heads * w.tokens;
    double total = 0.0;
    for (int64_t r = 0; r < rows; ++r) {
        const double* row = w.data.data() + r * w.dim;
        double ent = 0.0;
        for (int64_t j = 0; j < w.dim; ++j) {
            if (row[j] > 0.0) ent -= row[j] * std::log(row[j]);
        }
        total += ent;
    }
    return total / static_cast<double>(rows);
}

double mass_on_latest_timestep(const Tensor4& w, const std::vector<int64_t>& taus) {
    int64_t latest = taus.empty() ? -1 : taus.back(); // nondecreasing order
    const int64_t rows = w.batch * w.heads * w.tokens;
    double total = 0.0;
    for (int64_t r = 0; r < rows; ++r) {
        const double* row = w.data.data() + r * w.dim;
        double mass = 0.0;
        for (int64_t j = 0; j < w.dim; ++j)
            if (taus[static_cast<size_t>(j)] == latest) mass += row[j];
        total += mass;
    }
    return total / static_cast<double>(rows);
}

// Mean relative per-token norm change between the fused and raw K tensors,
// over the leading S tokens (Concatenate appends extra tokens past S).
double mean_norm_drift(const Tensor4& fused, const Tensor4& raw) {
    double total = 0.0;
    int64_t count = 0;
    for (int64_t b = 0; b < raw.batch; ++b)
        for (int64_t h = 0; h < raw.heads; ++h)
            for (int64_t n = 0; n < raw.tokens; ++n) {
                const double* f = fused.row(b, h, n);
                const double* r = raw.row(b, h, n);
                double fs = 0.0, rs = 0.0;
                for (int64_t k = 0; k < raw.dim; ++k) {
                    fs += f[k] * f[k];
                    rs += r[k] * r[k];
                }
                const double rn = std::sqrt(rs);
                if (rn > 0.0) {
                    total += std::fabs(std::sqrt(fs) - rn) / rn;
                    ++count;
                }
            }
    return count > 0 ? total / static_cast<double>(count) : 0.0;
}

// Shared forward. tempofit == nullptr (or a null bank) runs the pure
// memoryless path; step() with enabled=false takes the identical branch so
// the two are bitwise equal by construction.
StepOutput run_forward(const BackboneWeights& weights, const TempoFitConfig* tempofit,
                       MemoryBank* bank, const Tensor4& obs_tokens, int64_t t) {
    const BackboneConfig& cfg = weights.config;
    const int64_t md = cfg.model_dim();
    const int64_t H = cfg.num_heads, d = cfg.head_dim;

    if (obs_tokens.heads != 1 || obs_tokens.dim != md) {
        throw DimensionError("step: obs_tokens must be [B,1,N," + std::to_string(md) + "], got [" +
                             obs_tokens.shape_string() + "]");
    }
    const int64_t N = obs_tokens.tokens;
    const bool has_stream = tempofit != nullptr && bank != nullptr;
    const bool memory_on = has_stream && tempofit->enabled;
    if (has_stream) bank->begin_step(t);
    if (memory_on) {
        tempofit->validate(cfg);
        if (N != cfg.prefix_tokens) {
            throw DimensionError("step: expected " + std::to_string(cfg.prefix_tokens) +
                                 " prefix tokens, got " + std::to_string(N));
        }
    }

    const RopeParams rope{d, 10000.0};
    std::vector<int64_t> positions(static_cast<size_t>(N));
    std::iota(positions.begin(), positions.end(), 0);

    StepOutput out;
    out.attended_tokens = N;
    Tensor4 h = obs_tokens;

    for (int64_t l = 0; l < cfg.num_layers; ++l) {
        const LayerWeights& lw = weights.layers[static_cast<size_t>(l)];

        Tensor4 x = rms_norm(h, lw.attn_norm_gain);
        Tensor4 q = split_heads(linear(x, lw.w_q, md), H, d);
        Tensor4 k = split_heads(linear(x, lw.w_k, md), H, d); // pre-RoPE
        Tensor4 v = split_heads(linear(x, lw.w_v, md), H, d);

        Tensor4 k_fused, v_fused; // filled on the memory path only
        const Tensor4* k_use = &k;
        const Tensor4* v_use = &v;
        int64_t attended = N;
        std::vector<int64_t> positions_k = positions;

        if (memory_on && bank->has_layer(static_cast<int>(l))) {
            LayerMemory& mem = bank->layer(static_cast<int>(l));
            auto snap = mem.snapshot();
            if (snap.has_value() && snap->token_timesteps.back() >= t) {
                throw OrderingError("step: retrieval would see timestep " +
                                    std::to_string(snap->token_timesteps.back()) + " at step " +
                                    std::to_string(t));
            }

            auto res = retrieve(k, tempofit->retrieval_mode == RetrievalMode::QToK ? &q : nullptr,
                                snap, t, tempofit->fgtb, tempofit->retrieval_mode);
            InjectionOutput inj =
                inject(k, v, res, snap, tempofit->injection_mode, tempofit->epsilon);

            if (res.has_value()) {
                out.flops.retrieval_score_macs +=
                    k.batch * H * k.tokens * snap->k_hist.tokens * d;
            }
            if (res.has_value() && tempofit->collect_diagnostics) {
                LayerDiagnostics diag;
                diag.layer = static_cast<int>(l);
                diag.history_tokens = snap->k_hist.tokens;
                diag.attended_length = inj.attended_length;
                diag.weights = res->weights;
                diag.token_timesteps = snap->token_timesteps;
                diag.weight_on_latest = mass_on_latest_timestep(res->weights, snap->token_timesteps);
                diag.mean_entropy = mean_row_entropy(res->weights);
                diag.norm_drift = mean_norm_drift(inj.k_fused, k);
                out.retrieval_diags.push_back(std::move(diag));
            }

            // write after retrieve so a step never reads its own entry;
            // raw pre-injection projections by default
            const bool store_fused =
                tempofit->write_fused && tempofit->injection_mode != InjectionMode::Concatenate;
            if (store_fused) {
                mem.write(PrefixKV{inj.k_fused, inj.v_fused, t});
            } else {
                mem.write(PrefixKV{std::move(k), std::move(v), t});
            }

            k_fused = std::move(inj.k_fused);
            v_fused = std::move(inj.v_fused);
            k_use = &k_fused;
            v_use = &v_fused;
            attended = inj.attended_length;
            if (attended != N) {
                // appended history tokens take sequential positions after the prefix
                positions_k.resize(static_cast<size_t>(attended));
                std::iota(positions_k.begin(), positions_k.end(), 0);
            }
        }

        out.attended_tokens = std::max(out.attended_tokens, attended);

        Tensor4 q_r = rope_apply(q, positions, rope);
        Tensor4 k_r = rope_apply(*k_use, positions_k, rope);

        Tensor4 scores = matmul_qk(q_r, k_r);
        const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(d));
        for (double& s : scores.data) s *= inv_sqrt_d;
        out.flops.attention_score_macs += q_r.batch * H * q_r.tokens * attended * d;

        Tensor4 probs = softmax_rows(scores);
        Tensor4 attn = matmul_av(probs, *v_use);
        Tensor4 attn_out = linear(merge_heads(attn), lw.w_o, md);
        add_inplace(h, attn_out);

        Tensor4 x2 = rms_norm(h, lw.ff_norm_gain);
        Tensor4 ff1 = linear(x2, lw.w_ff1, md * cfg.ff_mult);
        silu_inplace(ff1);
        Tensor4 ff2 = linear(ff1, lw.w_ff2, md);
        add_inplace(h, ff2);

        out.layer_hidden.push_back(h);
    }

    out.hidden = h;

    // mean-pool tokens, then linear readout
    out.action.assign(static_cast<size_t>(h.batch * cfg.action_dim), 0.0);
    const double inv_n = 1.0 / static_cast<double>(N);
    std::vector<double> pooled(static_cast<size_t>(md));
    for (int64_t b = 0; b < h.batch; ++b) {
        std::fill(pooled.begin(), pooled.end(), 0.0);
        for (int64_t n = 0; n < N; ++n) {
            const double* row = h.row(b, 0, n);
            for (int64_t c = 0; c < md; ++c) pooled[static_cast<size_t>(c)] += row[c];
        }
        double* arow = out.action.data() + b * cfg.action_dim;
        for (int64_t c = 0; c < md; ++c) {
            const double pc = pooled[static_cast<size_t>(c)] * inv_n;
            const double* wrow = weights.readout.data() + c * cfg.action_dim;
            for (int64_t a = 0; a < cfg.action_dim; ++a) arow[a] += pc * wrow[a];
        }
    }
    return out;
}

} // namespace

StepOutput step(const BackboneWeights& weights, const TempoFitConfig& tempofit, MemoryBank& memories,
                const Tensor4& obs_tokens, int64_t t) {
    return run_forward(weights, &tempofit, &memories, obs_tokens, t);
}

StepOutput step_memoryless(const BackboneWeights& weights, const Tensor4& obs_tokens) {
    return run_forward(weights, nullptr, nullptr, obs_tokens, 0);
}

StepOutput step_stacked(const BackboneWeights& weights, const std::vector<Tensor4>& frame_window) {
    if (frame_window.empty()) {
        throw ConfigError("step_stacked: frame window must not be empty");
    }
    const Tensor4& first = frame_window.front();
    if (frame_window.size() == 1) {
        return step_memoryless(weights, first);
    }

    const int64_t F = static_cast<int64_t>(frame_window.size());
    Tensor4 stacked(first.batch, 1, F * first.tokens, first.dim);
    for (int64_t f = 0; f < F; ++f) {
        const Tensor4& frame = frame_window[static_cast<size_t>(f)];
        require_same_shape(frame, first, "step_stacked frames");
        for (int64_t b = 0; b < first.batch; ++b) {
            std::memcpy(stacked.row(b, 0, f * first.tokens), frame.row(b, 0, 0),
                        static_cast<size_t>(first.tokens * first.dim) * sizeof(double));
        }
    }
    return step_memoryless(weights, stacked);
}

} // namespace tempofit
