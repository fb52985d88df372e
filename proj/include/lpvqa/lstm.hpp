#pragma once

#include <utility>
#include <vector>

#include "lpvqa/autodiff.hpp"
#include "lpvqa/common.hpp"

namespace lpvqa::seq {

using TokenSeq = std::vector<int>;

struct LstmCell {
    ad::Tensor wx;  // [E, 4H], gate order i f g o
    ad::Tensor wh;  // [H, 4H]
    ad::Tensor b;   // [4H], forget-gate block initialized to 1

    int input_dim = 0, hidden_dim = 0;

    void init(int input_dim, int hidden_dim, Rng& rng);
    /// One step over a batch: x [B, E], h/c [B, H] -> (h', c').
    std::pair<ad::Tensor, ad::Tensor> step(const ad::Tensor& x, const ad::Tensor& h,
                                           const ad::Tensor& c) const;
    ad::ParamList params(const std::string& prefix) const;
};

/// Autoregressive LSTM over one token vocabulary. Serves as the program prior
/// and as the decoder half of the seq2seq models.
///
/// Sequence probabilities are over token lists of length <= max_len: an end
/// emission is part of the probability for shorter sequences, while sequences
/// at the cap stop there with no end factor. This makes the distribution sum
/// to exactly one over the capped space, which the enumeration-based tests
/// rely on.
struct LmParams {
    int vocab_size = 0;  // content tokens; output adds one end slot
    int max_len = 0;
    int embed_dim = 0, hidden_dim = 0;

    ad::Tensor embed;  // [vocab + 3, E]: content tokens, then start, end, pad
    LstmCell cell;
    ad::Tensor w_out;  // [H, vocab + 1]
    ad::Tensor b_out;  // [vocab + 1]
    bool frozen = false;

    int start_input() const { return vocab_size; }
    int end_input() const { return vocab_size + 1; }
    int pad_input() const { return vocab_size + 2; }
    int end_output() const { return vocab_size; }

    void init(int vocab_size, int max_len, Rng& rng, int embed_dim = 32,
              int hidden_dim = 128);
    ad::ParamList params(const std::string& prefix) const;
    /// Trainable view; fails when frozen.
    ad::ParamList trainable_params(const std::string& prefix) const;
    void set_frozen(bool frozen_state);
};

struct EncoderParams {
    int vocab_size = 0;
    int embed_dim = 0, hidden_dim = 0;
    ad::Tensor embed;  // [vocab + 3, E]
    LstmCell cell;

    int pad_input() const { return vocab_size + 2; }
    void init(int vocab_size, Rng& rng, int embed_dim = 32, int hidden_dim = 128);
    ad::ParamList params(const std::string& prefix) const;
};

/// Plain seq2seq: the encoder's final (h, c) seeds the decoder. Instances:
/// the question->program inference network and the program->question
/// reconstructor.
struct Seq2SeqParams {
    EncoderParams encoder;
    LmParams decoder;

    void init(int src_vocab, int tgt_vocab, int tgt_max_len, Rng& rng,
              int embed_dim = 32, int hidden_dim = 128);
    ad::ParamList params(const std::string& prefix) const;
};

/// Ancestral sample with its per-step categorical parameters and exact
/// log-probability (bit-identical to re-scoring the tokens).
struct SequenceSample {
    TokenSeq tokens;
    std::vector<std::vector<double>> step_probs;  // over vocab+1 incl. end slot
    double log_prob = 0.0;
    bool ended = false;  // end emitted before the cap
};

// ---- scoring (differentiable; record on the active tape) ----

/// Teacher-forced log-probability of each sequence under the LM; returns [B].
ad::Tensor lm_score_batch(const LmParams& lm, const std::vector<TokenSeq>& seqs);
double lm_log_prob(const LmParams& lm, const TokenSeq& seq);

/// Teacher-forced log-probability of tgt given src; returns [B].
ad::Tensor seq2seq_score_batch(const Seq2SeqParams& model, const std::vector<TokenSeq>& src,
                               const std::vector<TokenSeq>& tgt);
double seq2seq_log_prob(const Seq2SeqParams& model, const TokenSeq& src,
                        const TokenSeq& tgt);

/// Per-step conditionals log p(tgt_t | tgt_<t, src) in order, including the
/// end step when the sequence is below the cap. Their sum equals the batch
/// scorer exactly.
std::vector<double> seq2seq_stepwise_log_probs(const Seq2SeqParams& model,
                                               const TokenSeq& src, const TokenSeq& tgt);

/// LM counterpart of the stepwise scorer.
std::vector<double> lm_stepwise_log_probs(const LmParams& lm, const TokenSeq& seq);

// ---- sampling and decoding (pure; never record) ----

std::vector<SequenceSample> lm_sample_batch(const LmParams& lm, int batch, Rng& rng);
std::vector<SequenceSample> seq2seq_sample_batch(const Seq2SeqParams& model,
                                                 const std::vector<TokenSeq>& src, Rng& rng);
/// Argmax decoding, ties to the lowest token index; deterministic.
TokenSeq greedy_decode(const Seq2SeqParams& model, const TokenSeq& src);

// ---- prior pretraining ----

enum class PriorMode { Syntactic, Empirical };

struct PriorTrainConfig {
    PriorMode mode = PriorMode::Syntactic;
    int steps = 600;  // optimizer steps
    int batch_size = 64;
    double lr = 1e-3;
    int max_len = 7;
};

/// MLE on simulated (syntactic) or given (empirical) programs; the returned
/// model is frozen.
LmParams pretrain_prior(const PriorTrainConfig& config, int vocab_size,
                        const std::function<TokenSeq(Rng&)>& simulate,
                        const std::vector<TokenSeq>& corpus, Rng& rng);

}  // namespace lpvqa::seq
