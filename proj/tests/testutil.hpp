#pragma once

// Shared oracles for the test suites: exhaustive sequence enumeration over
// toy vocabularies and small-model factories. Everything here stays
// independent of the implementation paths it is used to check.

#include <cmath>
#include <vector>

#include "lpvqa/common.hpp"
#include "lpvqa/lstm.hpp"

namespace lpvqa::testutil {

/// All token sequences of length 0..max_len over a vocabulary of k tokens.
inline std::vector<seq::TokenSeq> all_sequences(int k, int max_len) {
    std::vector<seq::TokenSeq> out;
    out.push_back({});
    std::vector<seq::TokenSeq> frontier = {{}};
    for (int len = 1; len <= max_len; ++len) {
        std::vector<seq::TokenSeq> next;
        for (const auto& prefix : frontier) {
            for (int t = 0; t < k; ++t) {
                seq::TokenSeq s = prefix;
                s.push_back(t);
                out.push_back(s);
                next.push_back(std::move(s));
            }
        }
        frontier = std::move(next);
    }
    return out;
}

inline seq::LmParams toy_lm(int vocab, int max_len, uint64_t seed, int embed = 4,
                            int hidden = 8) {
    Rng rng(seed);
    seq::LmParams lm;
    lm.init(vocab, max_len, rng, embed, hidden);
    return lm;
}

inline seq::Seq2SeqParams toy_seq2seq(int src_vocab, int tgt_vocab, int tgt_max_len,
                                      uint64_t seed, int embed = 4, int hidden = 8) {
    Rng rng(seed);
    seq::Seq2SeqParams m;
    m.init(src_vocab, tgt_vocab, tgt_max_len, rng, embed, hidden);
    return m;
}

inline void zero_params(const ad::ParamList& params) {
    for (const auto& [name, t] : params) {
        ad::Tensor copy = t;
        std::fill(copy.data().begin(), copy.data().end(), 0.0);
    }
}

/// Probability the model emits more than `cutoff` content tokens: the summed
/// token-only mass of every (cutoff+1)-length prefix.
inline double truncated_mass_beyond(const seq::LmParams& lm, int cutoff) {
    std::vector<seq::TokenSeq> frontier = {{}};
    for (int len = 0; len <= cutoff; ++len) {
        std::vector<seq::TokenSeq> next;
        for (const auto& p : frontier) {
            for (int t = 0; t < lm.vocab_size; ++t) {
                seq::TokenSeq s = p;
                s.push_back(t);
                next.push_back(std::move(s));
            }
        }
        frontier = std::move(next);
    }
    double mass = 0.0;
    for (const auto& prefix : frontier) {
        const std::vector<double> steps = seq::lm_stepwise_log_probs(lm, prefix);
        double log_tokens = 0.0;
        for (size_t t = 0; t < prefix.size(); ++t) log_tokens += steps[t];
        mass += std::exp(log_tokens);
    }
    return mass;
}

}  // namespace lpvqa::testutil
