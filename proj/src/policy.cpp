#include "rlvr/policy.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

#include "rlvr/vocab.hpp"

namespace rlvr {

namespace {

constexpr double kInitStd = 0.08;

void validate_tokens(const PolicyConfig& cfg, const std::vector<int>& tokens, const char* op) {
    if (tokens.empty()) throw std::invalid_argument(std::string(op) + ": empty token sequence");
    if (static_cast<int>(tokens.size()) > cfg.max_seq)
        throw std::invalid_argument(std::string(op) + ": sequence exceeds max length");
    for (int t : tokens)
        if (t < 0 || t >= cfg.vocab) throw std::invalid_argument(std::string(op) + ": token id out of range");
}

// out {n,m} += a {n,k} * b {k,m}
void mm_acc(const double* a, const double* b, double* out, int n, int k, int m) {
    for (int i = 0; i < n; ++i) {
        const double* ar = a + static_cast<size_t>(i) * k;
        double* orow = out + static_cast<size_t>(i) * m;
        for (int kk = 0; kk < k; ++kk) {
            const double av = ar[kk];
            if (av == 0.0) continue;
            const double* br = b + static_cast<size_t>(kk) * m;
            for (int j = 0; j < m; ++j) orow[j] += av * br[j];
        }
    }
}

void rms_rows(const double* x, const double* gain, double* out, int rows, int cols, double eps = 1e-5) {
    for (int i = 0; i < rows; ++i) {
        const double* xr = x + static_cast<size_t>(i) * cols;
        double ms = 0.0;
        for (int j = 0; j < cols; ++j) ms += xr[j] * xr[j];
        const double ir = 1.0 / std::sqrt(ms / cols + eps);
        double* o = out + static_cast<size_t>(i) * cols;
        for (int j = 0; j < cols; ++j) o[j] = xr[j] * ir * gain[j];
    }
}

}  // namespace

std::vector<TensorPtr> PolicyParams::parameters() const {
    std::vector<TensorPtr> out;
    for (const auto& [name, t] : named_parameters()) out.push_back(t);
    return out;
}

std::vector<std::pair<std::string, TensorPtr>> PolicyParams::named_parameters() const {
    std::vector<std::pair<std::string, TensorPtr>> out;
    out.emplace_back("tok_embed", tok_embed);
    out.emplace_back("pos_embed", pos_embed);
    for (size_t l = 0; l < layers.size(); ++l) {
        const auto& L = layers[l];
        const std::string p = "layers." + std::to_string(l) + ".";
        out.emplace_back(p + "attn_norm", L.attn_norm_gain);
        for (size_t h = 0; h < L.wq.size(); ++h) {
            const std::string hp = p + "h" + std::to_string(h) + ".";
            out.emplace_back(hp + "wq", L.wq[h]);
            out.emplace_back(hp + "wk", L.wk[h]);
            out.emplace_back(hp + "wv", L.wv[h]);
            out.emplace_back(hp + "wo", L.wo[h]);
        }
        out.emplace_back(p + "mlp_norm", L.mlp_norm_gain);
        out.emplace_back(p + "w1", L.w1);
        out.emplace_back(p + "w2", L.w2);
    }
    out.emplace_back("final_norm", final_norm_gain);
    return out;
}

void PolicyParams::set_requires_grad(bool on) {
    for (auto& t : parameters()) {
        t->requires_grad = on;
        if (on && t->grad.size() != t->v.size()) t->grad.assign(t->v.size(), 0.0);
        if (!on) t->grad.clear();
    }
}

void PolicyParams::zero_grad() {
    for (auto& t : parameters()) t->zero_grad();
}

PolicyParams PolicyParams::clone() const {
    // Tensors copied at full double precision so the reference policy is an
    // exact deep copy.
    PolicyParams out = *this;
    auto copy = [](const TensorPtr& t) { return Tensor::from(t->shape, t->v); };
    out.tok_embed = copy(tok_embed);
    out.pos_embed = copy(pos_embed);
    for (size_t l = 0; l < layers.size(); ++l) {
        auto& L = out.layers[l];
        const auto& S = layers[l];
        L.attn_norm_gain = copy(S.attn_norm_gain);
        for (size_t h = 0; h < S.wq.size(); ++h) {
            L.wq[h] = copy(S.wq[h]);
            L.wk[h] = copy(S.wk[h]);
            L.wv[h] = copy(S.wv[h]);
            L.wo[h] = copy(S.wo[h]);
        }
        L.mlp_norm_gain = copy(S.mlp_norm_gain);
        L.w1 = copy(S.w1);
        L.w2 = copy(S.w2);
    }
    out.final_norm_gain = copy(final_norm_gain);
    return out;
}

Checkpoint PolicyParams::to_checkpoint() const {
    Checkpoint ck;
    ck.config["kind"] = "policy";
    ck.config["vocab"] = std::to_string(cfg.vocab);
    ck.config["dim"] = std::to_string(cfg.dim);
    ck.config["layers"] = std::to_string(cfg.layers);
    ck.config["heads"] = std::to_string(cfg.heads);
    ck.config["max_seq"] = std::to_string(cfg.max_seq);
    ck.config["tap_layer"] = std::to_string(cfg.tap_layer);
    ck.config["tied"] = cfg.tied_unembedding ? "1" : "0";
    for (const auto& [name, t] : named_parameters()) ck.add(name, t);
    return ck;
}

PolicyParams PolicyParams::from_checkpoint(const Checkpoint& ck) {
    PolicyConfig cfg;
    cfg.vocab = std::stoi(ck.config.at("vocab"));
    cfg.dim = std::stoi(ck.config.at("dim"));
    cfg.layers = std::stoi(ck.config.at("layers"));
    cfg.heads = std::stoi(ck.config.at("heads"));
    cfg.max_seq = std::stoi(ck.config.at("max_seq"));
    cfg.tap_layer = std::stoi(ck.config.at("tap_layer"));
    cfg.tied_unembedding = ck.config.at("tied") == "1";
    PolicyParams p = init_policy(cfg, 0);
    for (auto& [name, t] : p.named_parameters()) {
        const TensorPtr& src = ck.get(name);
        if (src->shape != t->shape) throw std::runtime_error("policy checkpoint: shape mismatch for " + name);
        t->v = src->v;
    }
    return p;
}

PolicyParams init_policy(const PolicyConfig& cfg, uint64_t seed) {
    if (cfg.vocab < 2 || cfg.dim < 1 || cfg.layers < 1 || cfg.max_seq < 2)
        throw std::invalid_argument("init_policy: invalid config");
    if (cfg.heads < 1 || cfg.dim % cfg.heads != 0)
        throw std::invalid_argument("init_policy: head count must divide width");
    if (cfg.tap_layer < 1 || cfg.tap_layer > cfg.layers)
        throw std::invalid_argument("init_policy: tap layer out of range");
    if (!cfg.tied_unembedding)
        throw std::invalid_argument("init_policy: only the tied unembedding is supported");
    const int dh = cfg.dim / cfg.heads;
    Rng rng(mix64(seed, 0x706f6c6963ull));
    PolicyParams p;
    p.cfg = cfg;
    p.tok_embed = Tensor::randn({cfg.vocab, cfg.dim}, rng, kInitStd);
    p.pos_embed = Tensor::randn({cfg.max_seq, cfg.dim}, rng, kInitStd);
    for (int l = 0; l < cfg.layers; ++l) {
        PolicyParams::Layer L;
        L.attn_norm_gain = Tensor::from({cfg.dim}, std::vector<double>(cfg.dim, 1.0));
        for (int h = 0; h < cfg.heads; ++h) {
            L.wq.push_back(Tensor::randn({cfg.dim, dh}, rng, kInitStd));
            L.wk.push_back(Tensor::randn({cfg.dim, dh}, rng, kInitStd));
            L.wv.push_back(Tensor::randn({cfg.dim, dh}, rng, kInitStd));
            L.wo.push_back(Tensor::randn({dh, cfg.dim}, rng, kInitStd));
        }
        L.mlp_norm_gain = Tensor::from({cfg.dim}, std::vector<double>(cfg.dim, 1.0));
        L.w1 = Tensor::randn({cfg.dim, 4 * cfg.dim}, rng, kInitStd);
        L.w2 = Tensor::randn({4 * cfg.dim, cfg.dim}, rng, kInitStd);
        p.layers.push_back(std::move(L));
    }
    p.final_norm_gain = Tensor::from({cfg.dim}, std::vector<double>(cfg.dim, 1.0));
    return p;
}

// --- graph-mode forward --------------------------------------------------------

ForwardResult forward_logits(const PolicyParams& params, const std::vector<int>& tokens) {
    const PolicyConfig& cfg = params.cfg;
    validate_tokens(cfg, tokens, "forward_logits");
    const int T = static_cast<int>(tokens.size());
    const int dh = cfg.dim / cfg.heads;
    const double att_scale = 1.0 / std::sqrt(static_cast<double>(dh));

    std::vector<int> positions(T);
    std::iota(positions.begin(), positions.end(), 0);
    TensorPtr x = add(embedding_rows(params.tok_embed, tokens), embedding_rows(params.pos_embed, positions));

    // Strictly causal attention mask: position t attends to positions <= t.
    std::vector<uint8_t> causal(static_cast<size_t>(T) * T, 0);
    for (int i = 0; i < T; ++i)
        for (int j = 0; j <= i; ++j) causal[static_cast<size_t>(i) * T + j] = 1;

    ForwardResult out;
    for (const auto& L : params.layers) {
        TensorPtr n1 = rms_norm_rows(x, L.attn_norm_gain);
        TensorPtr att;
        for (size_t h = 0; h < L.wq.size(); ++h) {
            TensorPtr q = matmul(n1, L.wq[h]);
            TensorPtr k = matmul(n1, L.wk[h]);
            TensorPtr v = matmul(n1, L.wv[h]);
            TensorPtr scores = scale(matmul(q, transpose(k)), att_scale);
            TensorPtr probs = softmax_rows_masked(scores, causal);
            TensorPtr ctx = matmul(probs, v);
            TensorPtr head = matmul(ctx, L.wo[h]);
            att = att ? add(att, head) : head;
        }
        x = add(x, att);
        TensorPtr n2 = rms_norm_rows(x, L.mlp_norm_gain);
        TensorPtr mlp = matmul(relu(matmul(n2, L.w1)), L.w2);
        x = add(x, mlp);
        out.residual_taps.push_back(x);
    }
    TensorPtr fin = rms_norm_rows(x, params.final_norm_gain);
    out.logits = matmul(fin, transpose(params.tok_embed));
    return out;
}

// --- inference fast path ---------------------------------------------------------

const std::vector<double>& InferenceWorkspace::forward(const PolicyParams& params,
                                                       const std::vector<int>& tokens) {
    const PolicyConfig& cfg = params.cfg;
    validate_tokens(cfg, tokens, "forward");
    const int T = static_cast<int>(tokens.size());
    const int d = cfg.dim, H = cfg.heads, dh = d / H, V = cfg.vocab;
    if (dh > 64) throw std::invalid_argument("forward: head width above 64 is not supported");
    const double att_scale = 1.0 / std::sqrt(static_cast<double>(dh));

    x_.assign(static_cast<size_t>(T) * d, 0.0);
    for (int i = 0; i < T; ++i) {
        const double* e = &params.tok_embed->v[static_cast<size_t>(tokens[i]) * d];
        const double* pe = &params.pos_embed->v[static_cast<size_t>(i) * d];
        double* xr = &x_[static_cast<size_t>(i) * d];
        for (int j = 0; j < d; ++j) xr[j] = e[j] + pe[j];
    }

    scratch_norm_.assign(static_cast<size_t>(T) * d, 0.0);
    q_.assign(static_cast<size_t>(T) * dh, 0.0);
    k_.assign(static_cast<size_t>(T) * dh, 0.0);
    v_.assign(static_cast<size_t>(T) * dh, 0.0);
    att_.assign(T, 0.0);
    head_out_.assign(static_cast<size_t>(T) * d, 0.0);
    mlp_.assign(static_cast<size_t>(T) * 4 * d, 0.0);
    taps_.assign(params.layers.size(), {});

    for (size_t l = 0; l < params.layers.size(); ++l) {
        const auto& L = params.layers[l];
        rms_rows(x_.data(), L.attn_norm_gain->v.data(), scratch_norm_.data(), T, d);
        std::fill(head_out_.begin(), head_out_.end(), 0.0);
        for (int h = 0; h < H; ++h) {
            std::fill(q_.begin(), q_.end(), 0.0);
            std::fill(k_.begin(), k_.end(), 0.0);
            std::fill(v_.begin(), v_.end(), 0.0);
            mm_acc(scratch_norm_.data(), L.wq[h]->v.data(), q_.data(), T, d, dh);
            mm_acc(scratch_norm_.data(), L.wk[h]->v.data(), k_.data(), T, d, dh);
            mm_acc(scratch_norm_.data(), L.wv[h]->v.data(), v_.data(), T, d, dh);
            for (int i = 0; i < T; ++i) {
                const double* qi = &q_[static_cast<size_t>(i) * dh];
                double mx = -1e300;
                for (int j = 0; j <= i; ++j) {
                    const double* kj = &k_[static_cast<size_t>(j) * dh];
                    double s = 0.0;
                    for (int c = 0; c < dh; ++c) s += qi[c] * kj[c];
                    att_[j] = s * att_scale;
                    mx = std::max(mx, att_[j]);
                }
                double z = 0.0;
                for (int j = 0; j <= i; ++j) {
                    att_[j] = std::exp(att_[j] - mx);
                    z += att_[j];
                }
                double ctx[64];  // dh <= 64 at any sane desk config
                for (int c = 0; c < dh; ++c) ctx[c] = 0.0;
                for (int j = 0; j <= i; ++j) {
                    const double p = att_[j] / z;
                    const double* vj = &v_[static_cast<size_t>(j) * dh];
                    for (int c = 0; c < dh; ++c) ctx[c] += p * vj[c];
                }
                double* ho = &head_out_[static_cast<size_t>(i) * d];
                for (int c = 0; c < dh; ++c) {
                    const double cv = ctx[c];
                    if (cv == 0.0) continue;
                    const double* wo = &L.wo[h]->v[static_cast<size_t>(c) * d];
                    for (int j = 0; j < d; ++j) ho[j] += cv * wo[j];
                }
            }
        }
        for (size_t i = 0; i < x_.size(); ++i) x_[i] += head_out_[i];

        rms_rows(x_.data(), L.mlp_norm_gain->v.data(), scratch_norm_.data(), T, d);
        std::fill(mlp_.begin(), mlp_.end(), 0.0);
        mm_acc(scratch_norm_.data(), L.w1->v.data(), mlp_.data(), T, d, 4 * d);
        for (double& m : mlp_)
            if (m < 0.0) m = 0.0;
        mm_acc(mlp_.data(), L.w2->v.data(), x_.data(), T, 4 * d, d);

        taps_[l] = x_;
    }

    rms_rows(x_.data(), params.final_norm_gain->v.data(), scratch_norm_.data(), T, d);
    logits_.assign(static_cast<size_t>(T) * V, 0.0);
    for (int i = 0; i < T; ++i) {
        const double* ni = &scratch_norm_[static_cast<size_t>(i) * d];
        double* lr = &logits_[static_cast<size_t>(i) * V];
        for (int t = 0; t < V; ++t) {
            const double* e = &params.tok_embed->v[static_cast<size_t>(t) * d];
            double s = 0.0;
            for (int j = 0; j < d; ++j) s += ni[j] * e[j];
            lr[t] = s;
        }
    }
    return logits_;
}

const std::vector<double>& InferenceWorkspace::tap(int layer) const {
    if (layer < 1 || layer > static_cast<int>(taps_.size()))
        throw std::invalid_argument("tap: layer out of range");
    return taps_[static_cast<size_t>(layer) - 1];
}

// --- sampling and scoring -----------------------------------------------------------

namespace {

double log_softmax_at(const double* logits, int n, int idx) {
    double mx = logits[0];
    for (int j = 1; j < n; ++j) mx = std::max(mx, logits[j]);
    double z = 0.0;
    for (int j = 0; j < n; ++j) z += std::exp(logits[j] - mx);
    return logits[idx] - mx - std::log(z);
}

}  // namespace

RolloutSample sample_rollout(const PolicyParams& params, const std::vector<int>& prompt,
                             double temperature, int max_new, Rng& rng, InferenceWorkspace* ws) {
    if (prompt.empty()) throw std::invalid_argument("sample_rollout: empty prompt");
    if (temperature < 0.0) throw std::invalid_argument("sample_rollout: negative temperature");
    validate_tokens(params.cfg, prompt, "sample_rollout");
    InferenceWorkspace local;
    InferenceWorkspace& w = ws ? *ws : local;

    RolloutSample out;
    out.prompt = prompt;
    out.temperature = temperature;
    out.rng_stream = rng.seed();
    const int V = params.cfg.vocab;

    std::vector<int> tokens = prompt;
    std::vector<double> probs(V);
    for (int step = 0; step < max_new && static_cast<int>(tokens.size()) < params.cfg.max_seq; ++step) {
        const auto& logits = w.forward(params, tokens);
        const double* row = &logits[(tokens.size() - 1) * static_cast<size_t>(V)];
        int chosen;
        if (temperature == 0.0) {
            chosen = 0;
            for (int j = 1; j < V; ++j)
                if (row[j] > row[chosen]) chosen = j;  // ties keep the lowest id
        } else {
            double mx = row[0];
            for (int j = 1; j < V; ++j) mx = std::max(mx, row[j]);
            for (int j = 0; j < V; ++j) probs[j] = std::exp((row[j] - mx) / temperature);
            chosen = rng.categorical(probs);
        }
        out.response.push_back(chosen);
        out.logprobs.push_back(log_softmax_at(row, V, chosen));
        tokens.push_back(chosen);
        if (chosen == vocab::EOS) break;
    }
    return out;
}

std::vector<double> sequence_logprobs_per_token(const PolicyParams& params,
                                                const std::vector<int>& prompt,
                                                const std::vector<int>& response,
                                                InferenceWorkspace* ws) {
    if (prompt.empty()) throw std::invalid_argument("sequence_logprob: empty prompt");
    if (response.empty()) return {};
    InferenceWorkspace local;
    InferenceWorkspace& w = ws ? *ws : local;
    std::vector<int> tokens = prompt;
    tokens.insert(tokens.end(), response.begin(), response.end());
    validate_tokens(params.cfg, tokens, "sequence_logprob");
    const int V = params.cfg.vocab;
    const auto& logits = w.forward(params, tokens);
    std::vector<double> out(response.size());
    for (size_t t = 0; t < response.size(); ++t) {
        const size_t row = prompt.size() - 1 + t;
        out[t] = log_softmax_at(&logits[row * V], V, response[t]);
    }
    return out;
}

double sequence_logprob(const PolicyParams& params, const std::vector<int>& prompt,
                        const std::vector<int>& response, InferenceWorkspace* ws) {
    double s = 0.0;
    for (double lp : sequence_logprobs_per_token(params, prompt, response, ws)) s += lp;
    return s;
}

std::vector<int> logit_lens(const PolicyParams& params, const std::vector<double>& direction, int top_n) {
    const int d = params.cfg.dim, V = params.cfg.vocab;
    if (static_cast<int>(direction.size()) != d)
        throw std::invalid_argument("logit_lens: direction must have model width");
    if (top_n > V) top_n = V;
    if (top_n < 1) throw std::invalid_argument("logit_lens: top_n must be >= 1");
    std::vector<double> normed(d);
    rms_rows(direction.data(), params.final_norm_gain->v.data(), normed.data(), 1, d);
    std::vector<std::pair<double, int>> scored(V);
    for (int t = 0; t < V; ++t) {
        const double* e = &params.tok_embed->v[static_cast<size_t>(t) * d];
        double s = 0.0;
        for (int j = 0; j < d; ++j) s += normed[j] * e[j];
        scored[t] = {s, t};
    }
    std::stable_sort(scored.begin(), scored.end(),
                     [](const auto& a, const auto& b) { return a.first > b.first; });
    std::vector<int> out(top_n);
    for (int i = 0; i < top_n; ++i) out[i] = scored[i].second;
    return out;
}

}  // namespace rlvr
