#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "rlvr/checkpoint.hpp"
#include "rlvr/rng.hpp"
#include "rlvr/tensor.hpp"

namespace rlvr {

struct TsaeConfig {
    int dim = 64;        // input width d
    int features = 512;  // m (overcomplete, m > d)
    int high = 128;      // h, high-level feature count (h < m)
    int topk = 16;       // sparsity budget
    double lambda_contr = 1.0;
    double lr = 1e-3;
    int steps = 1500;
    int batch_pairs = 128;
    int chunk = 4096;          // tokens per encoding chunk
    double holdout_frac = 0.1; // held-out sequences for reconstruction MSE
    uint64_t seed = 0;
};

// Temporal sparse autoencoder: TopK(ReLU(W_enc h + b_enc)) with the first h
// features treated as high-level, dual reconstruction, and a temporal
// contrastive loss on high-level codes. Decoder columns are renormalized to
// unit norm after each training step.
struct TsaeParams {
    TsaeConfig cfg;
    TensorPtr w_enc;       // {m, d}
    TensorPtr b_enc;       // {m}
    TensorPtr w_dec_high;  // {d, h}
    TensorPtr w_dec_low;   // {d, m-h}
    TensorPtr b_dec;       // {d}
    std::string content_hash;  // frozen-probe identity
    std::string source_dump;   // provenance of the training dump

    std::vector<TensorPtr> parameters() const { return {w_enc, b_enc, w_dec_high, w_dec_low, b_dec}; }
    void set_requires_grad(bool on);
    void zero_grad();
    // Column j of the decoder as a d-vector (crosses the high/low partition).
    std::vector<double> decoder_column(int feature) const;

    Checkpoint to_checkpoint() const;
    static TsaeParams from_checkpoint(const Checkpoint& ck);
};

TsaeParams init_tsae(const TsaeConfig& cfg, uint64_t seed);

// Sparse latent for one token position.
struct SparseCode {
    int position = 0;
    std::vector<int> idx;     // active feature indices, ascending
    std::vector<double> val;  // corresponding activations, all > 0
    int split_h = 0;

    double value_of(int feature) const;
};

SparseCode encode(const TsaeParams& params, const std::vector<double>& activation, int position = 0);
std::vector<double> decode(const TsaeParams& params, const SparseCode& code);
std::vector<double> decode_high(const TsaeParams& params, const SparseCode& code);

struct TsaeLossParts {
    TensorPtr total;
    TensorPtr recon_high;
    TensorPtr recon_full;
    TensorPtr contrastive;  // zero tensor when pairs are unavailable
};

// Batch loss over N same-sequence adjacency pairs (h_t, h_{t-1}), both stored
// row-major {N, d}. Reconstruction applies to h_t; the contrastive term
// compares high-level codes of h_t against h_{t-1} across the batch.
TsaeLossParts tsae_loss(const TsaeParams& params, const std::vector<double>& h_t,
                        const std::vector<double>& h_prev, int n);

struct TsaeTrainReport {
    double initial_holdout_mse = 0.0;
    double final_holdout_mse = 0.0;
    bool contrastive_used = true;
    std::string warning;  // set when adjacency was missing
    int steps_run = 0;
};

class ActivationDump;  // defined in harness.hpp

// Trains on the dump's activations (chunked), renormalizes decoder columns
// after each step, freezes the result and stamps a content hash.
TsaeParams train_tsae(const ActivationDump& dump, const TsaeConfig& cfg, uint64_t seed,
                      TsaeTrainReport* report = nullptr);

// Mean held-out reconstruction MSE of h against decode(encode(h)).
double reconstruction_mse(const TsaeParams& params, const std::vector<double>& activations, int n);

// Probe identity: content hash over parameters and config with the hash field
// blanked, so loaded artifacts re-hash to their stamped value.
std::string probe_content_hash(const TsaeParams& params);

// Mean adjacent-token cosine similarity of high-level vs low-level code parts
// over a dump's adjacency pairs (zero-mass parts contribute 0).
struct TemporalConsistency {
    double high_cos = 0.0;
    double low_cos = 0.0;
};
TemporalConsistency adjacent_code_similarity(const TsaeParams& params, const ActivationDump& dump);

}  // namespace rlvr
