#include "rlvr/tsae.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

#include "rlvr/dump.hpp"
#include "rlvr/optimizer.hpp"

namespace rlvr {

void TsaeParams::set_requires_grad(bool on) {
    for (auto& t : parameters()) {
        t->requires_grad = on;
        if (on && t->grad.size() != t->v.size()) t->grad.assign(t->v.size(), 0.0);
        if (!on) t->grad.clear();
    }
}

void TsaeParams::zero_grad() {
    for (auto& t : parameters()) t->zero_grad();
}

std::vector<double> TsaeParams::decoder_column(int feature) const {
    const int d = cfg.dim, h = cfg.high;
    if (feature < 0 || feature >= cfg.features)
        throw std::invalid_argument("decoder_column: feature index out of range");
    std::vector<double> col(d);
    if (feature < h) {
        for (int r = 0; r < d; ++r) col[r] = w_dec_high->v[static_cast<size_t>(r) * h + feature];
    } else {
        const int lo = cfg.features - h;
        for (int r = 0; r < d; ++r) col[r] = w_dec_low->v[static_cast<size_t>(r) * lo + (feature - h)];
    }
    return col;
}

Checkpoint TsaeParams::to_checkpoint() const {
    Checkpoint ck;
    ck.config["kind"] = "tsae";
    ck.config["dim"] = std::to_string(cfg.dim);
    ck.config["features"] = std::to_string(cfg.features);
    ck.config["high"] = std::to_string(cfg.high);
    ck.config["topk"] = std::to_string(cfg.topk);
    ck.config["lambda_contr"] = std::to_string(cfg.lambda_contr);
    ck.config["content_hash"] = content_hash;
    ck.config["source_dump"] = source_dump;
    ck.add("w_enc", w_enc);
    ck.add("b_enc", b_enc);
    ck.add("w_dec_high", w_dec_high);
    ck.add("w_dec_low", w_dec_low);
    ck.add("b_dec", b_dec);
    return ck;
}

TsaeParams TsaeParams::from_checkpoint(const Checkpoint& ck) {
    TsaeConfig cfg;
    cfg.dim = std::stoi(ck.config.at("dim"));
    cfg.features = std::stoi(ck.config.at("features"));
    cfg.high = std::stoi(ck.config.at("high"));
    cfg.topk = std::stoi(ck.config.at("topk"));
    cfg.lambda_contr = std::stod(ck.config.at("lambda_contr"));
    TsaeParams p = init_tsae(cfg, 0);
    p.content_hash = ck.config.at("content_hash");
    p.source_dump = ck.config.count("source_dump") ? ck.config.at("source_dump") : "";
    for (auto& [name, dst] :
         std::vector<std::pair<std::string, TensorPtr>>{{"w_enc", p.w_enc},
                                                        {"b_enc", p.b_enc},
                                                        {"w_dec_high", p.w_dec_high},
                                                        {"w_dec_low", p.w_dec_low},
                                                        {"b_dec", p.b_dec}}) {
        const TensorPtr& src = ck.get(name);
        if (src->shape != dst->shape) throw std::runtime_error("tsae checkpoint: shape mismatch for " + name);
        dst->v = src->v;
    }
    return p;
}

namespace {

void renormalize_decoder_columns(TsaeParams& p) {
    const int d = p.cfg.dim;
    auto renorm = [d](Tensor& w, int cols) {
        for (int c = 0; c < cols; ++c) {
            double ss = 0.0;
            for (int r = 0; r < d; ++r) {
                const double x = w.v[static_cast<size_t>(r) * cols + c];
                ss += x * x;
            }
            const double norm = std::sqrt(ss);
            if (norm < 1e-12) continue;
            for (int r = 0; r < d; ++r) w.v[static_cast<size_t>(r) * cols + c] /= norm;
        }
    };
    renorm(*p.w_dec_high, p.cfg.high);
    renorm(*p.w_dec_low, p.cfg.features - p.cfg.high);
}

}  // namespace

TsaeParams init_tsae(const TsaeConfig& cfg, uint64_t seed) {
    if (cfg.features <= cfg.dim) throw std::invalid_argument("tsae: feature count must exceed width");
    if (cfg.high < 1 || cfg.high >= cfg.features) throw std::invalid_argument("tsae: need 0 < h < m");
    if (cfg.topk < 1 || cfg.topk > cfg.features) throw std::invalid_argument("tsae: TopK budget out of range");
    if (cfg.lambda_contr < 0.0) throw std::invalid_argument("tsae: lambda must be non-negative");
    Rng rng(mix64(seed, 0x74736165ull));
    TsaeParams p;
    p.cfg = cfg;
    const double enc_std = 1.0 / std::sqrt(static_cast<double>(cfg.dim));
    p.w_enc = Tensor::randn({cfg.features, cfg.dim}, rng, enc_std);
    // Warm-start the high block: with joint TopK and straight-through
    // gradients, features that never win selection never train, so the
    // high-level block starts with larger encoder rows to secure early slots
    // (recon and the contrastive term then decide what it keeps).
    for (int f = 0; f < cfg.high; ++f)
        for (int j = 0; j < cfg.dim; ++j) p.w_enc->v[static_cast<size_t>(f) * cfg.dim + j] *= 2.0;
    p.b_enc = Tensor::zeros({cfg.features});
    p.w_dec_high = Tensor::randn({cfg.dim, cfg.high}, rng, 1.0);
    p.w_dec_low = Tensor::randn({cfg.dim, cfg.features - cfg.high}, rng, 1.0);
    p.b_dec = Tensor::zeros({cfg.dim});
    renormalize_decoder_columns(p);
    return p;
}

SparseCode encode(const TsaeParams& params, const std::vector<double>& activation, int position) {
    const int d = params.cfg.dim, m = params.cfg.features, k = params.cfg.topk;
    if (static_cast<int>(activation.size()) != d)
        throw std::invalid_argument("encode: activation length must equal probe width");
    // ReLU pre-codes, keep the TopK largest; ties break to the lower index.
    std::vector<double> pre(m);
    for (int f = 0; f < m; ++f) {
        const double* row = &params.w_enc->v[static_cast<size_t>(f) * d];
        double s = params.b_enc->v[f];
        for (int j = 0; j < d; ++j) s += row[j] * activation[j];
        pre[f] = s > 0.0 ? s : 0.0;
    }
    std::vector<int> order(m);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&pre](int a, int b) { return pre[a] > pre[b]; });
    SparseCode code;
    code.position = position;
    code.split_h = params.cfg.high;
    std::vector<int> kept(order.begin(), order.begin() + k);
    std::sort(kept.begin(), kept.end());
    for (int f : kept) {
        if (pre[f] > 0.0) {
            code.idx.push_back(f);
            code.val.push_back(pre[f]);
        }
    }
    return code;
}

double SparseCode::value_of(int feature) const {
    for (size_t i = 0; i < idx.size(); ++i)
        if (idx[i] == feature) return val[i];
    return 0.0;
}

std::vector<double> decode(const TsaeParams& params, const SparseCode& code) {
    const int d = params.cfg.dim, h = params.cfg.high;
    const int lo = params.cfg.features - h;
    std::vector<double> out(params.b_dec->v);
    for (size_t i = 0; i < code.idx.size(); ++i) {
        const int f = code.idx[i];
        const double v = code.val[i];
        if (f < h) {
            for (int r = 0; r < d; ++r) out[r] += params.w_dec_high->v[static_cast<size_t>(r) * h + f] * v;
        } else {
            for (int r = 0; r < d; ++r)
                out[r] += params.w_dec_low->v[static_cast<size_t>(r) * lo + (f - h)] * v;
        }
    }
    return out;
}

std::vector<double> decode_high(const TsaeParams& params, const SparseCode& code) {
    const int d = params.cfg.dim, h = params.cfg.high;
    std::vector<double> out(params.b_dec->v);
    for (size_t i = 0; i < code.idx.size(); ++i) {
        const int f = code.idx[i];
        if (f >= h) continue;
        const double v = code.val[i];
        for (int r = 0; r < d; ++r) out[r] += params.w_dec_high->v[static_cast<size_t>(r) * h + f] * v;
    }
    return out;
}

namespace {

// Graph-mode encoder over a batch {N, d} -> codes {N, m}.
TensorPtr encode_graph(const TsaeParams& p, const TensorPtr& x) {
    TensorPtr pre = add(matmul(x, transpose(p.w_enc)), p.b_enc);
    return topk_rows(relu(pre), p.cfg.topk);
}

}  // namespace

TsaeLossParts tsae_loss(const TsaeParams& params, const std::vector<double>& h_t,
                        const std::vector<double>& h_prev, int n) {
    const int d = params.cfg.dim, h = params.cfg.high, m = params.cfg.features;
    if (n < 1) throw std::invalid_argument("tsae_loss: empty batch");
    if (static_cast<int>(h_t.size()) != n * d || static_cast<int>(h_prev.size()) != n * d)
        throw std::invalid_argument("tsae_loss: batch shape mismatch");

    TensorPtr x = Tensor::from({n, d}, h_t);
    TensorPtr z = encode_graph(params, x);
    TensorPtr z_hi = slice_cols(z, 0, h);
    TensorPtr z_lo = slice_cols(z, h, m);

    TensorPtr rec_high = add(matmul(z_hi, transpose(params.w_dec_high)), params.b_dec);
    TensorPtr rec_full = add(add(matmul(z_hi, transpose(params.w_dec_high)),
                                 matmul(z_lo, transpose(params.w_dec_low))),
                             params.b_dec);

    const double inv_n = 1.0 / static_cast<double>(n);
    TensorPtr dh_ = sub(x, rec_high);
    TensorPtr df_ = sub(x, rec_full);
    TsaeLossParts parts;
    parts.recon_high = scale(sum_all(mul(dh_, dh_)), inv_n);
    parts.recon_full = scale(sum_all(mul(df_, df_)), inv_n);

    if (params.cfg.lambda_contr > 0.0) {
        TensorPtr xp = Tensor::from({n, d}, h_prev);
        TensorPtr u_t = z_hi;  // shared subexpression with the reconstruction path
        TensorPtr u_p = slice_cols(encode_graph(params, xp), 0, h);
        // Cosine-similarity logits; the diagonal holds the positive pairs, so
        // the InfoNCE term is a cross-entropy against the identity target.
        TensorPtr sims = matmul(l2_normalize_rows(u_t), transpose(l2_normalize_rows(u_p)));
        std::vector<int> diag(n);
        std::iota(diag.begin(), diag.end(), 0);
        parts.contrastive = masked_cross_entropy(sims, diag, std::vector<uint8_t>(n, 1));
    } else {
        parts.contrastive = Tensor::scalar(0.0);
    }

    parts.total = add(add(parts.recon_high, parts.recon_full),
                      scale(parts.contrastive, params.cfg.lambda_contr));
    return parts;
}

double reconstruction_mse(const TsaeParams& params, const std::vector<double>& activations, int n) {
    const int d = params.cfg.dim;
    if (n < 1 || static_cast<int>(activations.size()) != n * d)
        throw std::invalid_argument("reconstruction_mse: batch shape mismatch");
    double total = 0.0;
    std::vector<double> vec(d);
    for (int i = 0; i < n; ++i) {
        std::copy_n(&activations[static_cast<size_t>(i) * d], d, vec.begin());
        const SparseCode code = encode(params, vec);
        const std::vector<double> rec = decode(params, code);
        for (int j = 0; j < d; ++j) {
            const double e = vec[j] - rec[j];
            total += e * e;
        }
    }
    return total / static_cast<double>(n);
}

TsaeParams train_tsae(const ActivationDump& dump, const TsaeConfig& cfg, uint64_t seed,
                      TsaeTrainReport* report) {
    if (dump.total_tokens() == 0) throw std::invalid_argument("train_tsae: empty dump");
    if (dump.dim != cfg.dim) throw std::invalid_argument("train_tsae: dump width does not match probe");
    TsaeConfig local = cfg;
    local.seed = seed;
    TsaeParams p = init_tsae(local, seed);
    TsaeTrainReport rep;

    auto pairs = dump.adjacency_pairs();
    bool contrastive = !pairs.empty();
    if (!contrastive) {
        rep.contrastive_used = false;
        rep.warning = "dump has no same-sequence adjacency; contrastive term skipped";
        p.cfg.lambda_contr = 0.0;
        // Fall back to single tokens paired with themselves (recon-only loss).
        for (uint32_t i = 0; i < dump.total_tokens(); ++i) pairs.emplace_back(i, i);
    }

    // Hold out trailing sequences (by pair index) for the MSE report.
    const size_t holdout = std::max<size_t>(1, static_cast<size_t>(pairs.size() * cfg.holdout_frac));
    const size_t train_n = pairs.size() > holdout ? pairs.size() - holdout : pairs.size();

    const int d = cfg.dim;
    std::vector<double> hold_acts;
    const size_t hold_start = train_n < pairs.size() ? train_n : 0;
    for (size_t i = hold_start; i < pairs.size(); ++i) {
        const double* v = dump.vector_at(pairs[i].first);
        hold_acts.insert(hold_acts.end(), v, v + d);
    }
    const int hold_count = static_cast<int>((pairs.size() - hold_start));
    rep.initial_holdout_mse = reconstruction_mse(p, hold_acts, hold_count);

    Rng rng(mix64(seed, 0x7473616574726eull));
    AdamState opt(AdamConfig{cfg.lr});
    const auto params = p.parameters();
    p.set_requires_grad(true);
    const int bs = std::max(1, cfg.batch_pairs);
    std::vector<double> bt(static_cast<size_t>(bs) * d), bp(static_cast<size_t>(bs) * d);
    for (int step = 0; step < cfg.steps; ++step) {
        for (int i = 0; i < bs; ++i) {
            const auto& pr = pairs[rng.uniform_int(train_n)];
            std::copy_n(dump.vector_at(pr.first), d, &bt[static_cast<size_t>(i) * d]);
            std::copy_n(dump.vector_at(pr.second), d, &bp[static_cast<size_t>(i) * d]);
        }
        p.zero_grad();
        TsaeLossParts parts = tsae_loss(p, bt, bp, bs);
        backward(parts.total);
        opt.step(params);
        renormalize_decoder_columns(p);
        ++rep.steps_run;
    }
    p.set_requires_grad(false);

    rep.final_holdout_mse = reconstruction_mse(p, hold_acts, hold_count);
    p.source_dump = dump.checkpoint_id;
    p.content_hash = probe_content_hash(p);
    if (report) *report = rep;
    return p;
}

std::string probe_content_hash(const TsaeParams& params) {
    // Hash covers parameters and config with the hash field blanked, so a
    // loaded artifact re-hashes to its stamped value.
    TsaeParams tmp = params;
    tmp.content_hash = "";
    return checkpoint_hash(tmp.to_checkpoint());
}

TemporalConsistency adjacent_code_similarity(const TsaeParams& params, const ActivationDump& dump) {
    const auto pairs = dump.adjacency_pairs();
    if (pairs.empty()) throw std::invalid_argument("adjacent_code_similarity: dump has no adjacency");
    const int d = params.cfg.dim, h = params.cfg.high;
    auto cos_part = [h](const SparseCode& a, const SparseCode& b, bool high_part) {
        double dot = 0.0, na = 0.0, nb = 0.0;
        for (size_t i = 0; i < a.idx.size(); ++i) {
            if ((a.idx[i] < h) != high_part) continue;
            na += a.val[i] * a.val[i];
            dot += a.val[i] * b.value_of(a.idx[i]);
        }
        for (size_t i = 0; i < b.idx.size(); ++i) {
            if ((b.idx[i] < h) != high_part) continue;
            nb += b.val[i] * b.val[i];
        }
        if (na <= 0.0 || nb <= 0.0) return 0.0;
        return dot / std::sqrt(na * nb);
    };
    TemporalConsistency out{0.0, 0.0};
    std::vector<double> va(d), vb(d);
    for (const auto& [cur, prev] : pairs) {
        std::copy_n(dump.vector_at(cur), d, va.begin());
        std::copy_n(dump.vector_at(prev), d, vb.begin());
        const SparseCode ca = encode(params, va);
        const SparseCode cb = encode(params, vb);
        out.high_cos += cos_part(ca, cb, true);
        out.low_cos += cos_part(ca, cb, false);
    }
    out.high_cos /= static_cast<double>(pairs.size());
    out.low_cos /= static_cast<double>(pairs.size());
    return out;
}

}  // namespace rlvr
