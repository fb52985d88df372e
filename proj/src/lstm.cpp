#include "lpvqa/lstm.hpp"

#include <algorithm>
#include <cmath>

namespace lpvqa::seq {

using ad::Tensor;

namespace {

Tensor glorot(int rows, int cols, Rng& rng) {
    const double a = std::sqrt(6.0 / (rows + cols));
    Tensor t({rows, cols}, 0.0, true);
    for (double& v : t.data()) v = rng.uniform(-a, a);
    return t;
}

Tensor uniform_embed(int rows, int cols, Rng& rng) {
    Tensor t({rows, cols}, 0.0, true);
    for (double& v : t.data()) v = rng.uniform(-0.1, 0.1);
    return t;
}

}  // namespace

void LstmCell::init(int in_dim, int hid_dim, Rng& rng) {
    input_dim = in_dim;
    hidden_dim = hid_dim;
    wx = glorot(in_dim, 4 * hid_dim, rng);
    wh = glorot(hid_dim, 4 * hid_dim, rng);
    b = Tensor({4 * hid_dim}, 0.0, true);
    for (int i = hid_dim; i < 2 * hid_dim; ++i) b.data()[i] = 1.0;  // forget gate
}

std::pair<Tensor, Tensor> LstmCell::step(const Tensor& x, const Tensor& h,
                                         const Tensor& c) const {
    using namespace ad;
    const int hd = hidden_dim;
    Tensor pre = add(add(matmul(x, wx), matmul(h, wh)), b);
    Tensor i = sigmoid(slice_last(pre, 0, hd));
    Tensor f = sigmoid(slice_last(pre, hd, hd));
    Tensor g = tanh_(slice_last(pre, 2 * hd, hd));
    Tensor o = sigmoid(slice_last(pre, 3 * hd, hd));
    Tensor c_next = add(mul(f, c), mul(i, g));
    Tensor h_next = mul(o, tanh_(c_next));
    return {h_next, c_next};
}

ad::ParamList LstmCell::params(const std::string& prefix) const {
    return {{prefix + ".wx", wx}, {prefix + ".wh", wh}, {prefix + ".b", b}};
}

void LmParams::init(int vocab, int cap, Rng& rng, int e_dim, int h_dim) {
    check(vocab >= 1 && cap >= 1, "LM needs a nonempty vocabulary and positive cap");
    vocab_size = vocab;
    max_len = cap;
    embed_dim = e_dim;
    hidden_dim = h_dim;
    embed = uniform_embed(vocab + 3, e_dim, rng);
    cell.init(e_dim, h_dim, rng);
    w_out = glorot(h_dim, vocab + 1, rng);
    b_out = Tensor({vocab + 1}, 0.0, true);
    frozen = false;
}

ad::ParamList LmParams::params(const std::string& prefix) const {
    ad::ParamList out = {{prefix + ".embed", embed}};
    ad::append_params(out, cell.params(prefix + ".cell"));
    out.emplace_back(prefix + ".w_out", w_out);
    out.emplace_back(prefix + ".b_out", b_out);
    return out;
}

ad::ParamList LmParams::trainable_params(const std::string& prefix) const {
    check(!frozen, "model '", prefix, "' is frozen; its parameters cannot receive updates");
    return params(prefix);
}

void LmParams::set_frozen(bool frozen_state) {
    frozen = frozen_state;
    for (auto& [name, t] : params("m")) {
        Tensor copy = t;
        copy.set_requires_grad(!frozen_state);
    }
}

void EncoderParams::init(int vocab, Rng& rng, int e_dim, int h_dim) {
    check(vocab >= 1, "encoder needs a nonempty vocabulary");
    vocab_size = vocab;
    embed_dim = e_dim;
    hidden_dim = h_dim;
    embed = uniform_embed(vocab + 3, e_dim, rng);
    cell.init(e_dim, h_dim, rng);
}

ad::ParamList EncoderParams::params(const std::string& prefix) const {
    ad::ParamList out = {{prefix + ".embed", embed}};
    ad::append_params(out, cell.params(prefix + ".cell"));
    return out;
}

void Seq2SeqParams::init(int src_vocab, int tgt_vocab, int tgt_max_len, Rng& rng,
                         int e_dim, int h_dim) {
    encoder.init(src_vocab, rng, e_dim, h_dim);
    decoder.init(tgt_vocab, tgt_max_len, rng, e_dim, h_dim);
}

ad::ParamList Seq2SeqParams::params(const std::string& prefix) const {
    ad::ParamList out;
    ad::append_params(out, encoder.params(prefix + ".encoder"));
    ad::append_params(out, decoder.params(prefix + ".decoder"));
    return out;
}

// ---- shared forward machinery ----

namespace {

void validate_tokens(const std::vector<TokenSeq>& seqs, int vocab_size, int max_len,
                     const char* what) {
    for (const TokenSeq& s : seqs) {
        if (max_len > 0) {
            check(static_cast<int>(s.size()) <= max_len, "overlong ", what, ": ",
                  s.size(), " tokens, cap is ", max_len);
        }
        for (int tok : s) {
            check(tok >= 0 && tok < vocab_size, "unknown ", what, " token id ", tok);
        }
    }
}

// constant [B, H] mask expanding per-item flags
Tensor expand_mask(const std::vector<double>& flags, int hidden) {
    const int b = static_cast<int>(flags.size());
    Tensor m({b, hidden});
    for (int i = 0; i < b; ++i) {
        std::fill(m.data().begin() + static_cast<size_t>(i) * hidden,
                  m.data().begin() + static_cast<size_t>(i + 1) * hidden, flags[i]);
    }
    return m;
}

// encoder over variable-length sources; the state freezes at each item's end
std::pair<Tensor, Tensor> run_encoder(const EncoderParams& enc,
                                      const std::vector<TokenSeq>& srcs) {
    using namespace ad;
    const int b = static_cast<int>(srcs.size());
    const int hd = enc.cell.hidden_dim;
    Tensor h({b, hd});
    Tensor c({b, hd});
    size_t max_steps = 0;
    for (const TokenSeq& s : srcs) max_steps = std::max(max_steps, s.size());
    for (size_t t = 0; t < max_steps; ++t) {
        std::vector<int> inputs(b);
        std::vector<double> active(b);
        bool all_active = true;
        for (int i = 0; i < b; ++i) {
            const bool on = t < srcs[i].size();
            inputs[i] = on ? srcs[i][t] : enc.pad_input();
            active[i] = on ? 1.0 : 0.0;
            all_active = all_active && on;
        }
        Tensor x = embedding(enc.embed, inputs);
        auto [h_new, c_new] = enc.cell.step(x, h, c);
        if (all_active) {
            h = h_new;
            c = c_new;
        } else {
            std::vector<double> inv(b);
            for (int i = 0; i < b; ++i) inv[i] = 1.0 - active[i];
            Tensor m = expand_mask(active, hd);
            Tensor mi = expand_mask(inv, hd);
            h = add(mul(h_new, m), mul(h, mi));
            c = add(mul(c_new, m), mul(c, mi));
        }
    }
    return {h, c};
}

// teacher-forced scoring from an initial state; per-item totals [B]
Tensor decoder_score(const LmParams& lm, Tensor h, Tensor c,
                     const std::vector<TokenSeq>& targets) {
    using namespace ad;
    const int b = static_cast<int>(targets.size());
    size_t max_steps = 0;
    for (const TokenSeq& s : targets) {
        const size_t own = s.size() + (static_cast<int>(s.size()) < lm.max_len ? 1 : 0);
        max_steps = std::max(max_steps, own);
    }
    Tensor total({b});
    for (size_t t = 0; t < max_steps; ++t) {
        std::vector<int> inputs(b), picks(b);
        std::vector<double> mask(b);
        for (int i = 0; i < b; ++i) {
            const TokenSeq& s = targets[i];
            const size_t len = s.size();
            inputs[i] = t == 0 ? lm.start_input() : (t - 1 < len ? s[t - 1] : lm.pad_input());
            if (t < len) {
                picks[i] = s[t];
                mask[i] = 1.0;
            } else if (t == len && static_cast<int>(len) < lm.max_len) {
                picks[i] = lm.end_output();
                mask[i] = 1.0;
            } else {
                picks[i] = 0;
                mask[i] = 0.0;
            }
        }
        Tensor x = embedding(lm.embed, inputs);
        auto [h_new, c_new] = lm.cell.step(x, h, c);
        h = h_new;
        c = c_new;
        Tensor logits = add(matmul(h, lm.w_out), lm.b_out);
        Tensor lp = log_softmax(logits);
        Tensor picked = pick_index(lp, picks);
        Tensor masked = mul(picked, Tensor({b}, mask));
        total = add(total, masked);
    }
    return total;
}

// one decode step shared by sampling and greedy decoding
Tensor decode_step(const LmParams& lm, Tensor& h, Tensor& c,
                   const std::vector<int>& inputs) {
    using namespace ad;
    Tensor x = embedding(lm.embed, inputs);
    auto [h_new, c_new] = lm.cell.step(x, h, c);
    h = h_new;
    c = c_new;
    Tensor logits = add(matmul(h, lm.w_out), lm.b_out);
    return log_softmax(logits);
}

std::vector<SequenceSample> run_sampler(const LmParams& lm, Tensor h, Tensor c, int b,
                                        Rng& rng) {
    ad::NoGradGuard guard;
    const int k = lm.vocab_size + 1;
    std::vector<SequenceSample> out(b);
    std::vector<int> inputs(b, lm.start_input());
    std::vector<char> alive(b, 1);
    for (int t = 0; t < lm.max_len; ++t) {
        int n_alive = 0;
        for (char a : alive) n_alive += a;
        if (n_alive == 0) break;
        Tensor lp = decode_step(lm, h, c, inputs);
        for (int i = 0; i < b; ++i) {
            if (!alive[i]) {
                inputs[i] = lm.pad_input();
                continue;
            }
            const double* row = lp.data().data() + static_cast<size_t>(i) * k;
            std::vector<double> probs(k);
            for (int j = 0; j < k; ++j) probs[j] = std::exp(row[j]);
            const int pick = rng.categorical(probs);
            out[i].step_probs.push_back(std::move(probs));
            out[i].log_prob += row[pick];
            if (pick == lm.end_output()) {
                out[i].ended = true;
                alive[i] = 0;
                inputs[i] = lm.pad_input();
            } else {
                out[i].tokens.push_back(pick);
                inputs[i] = pick;
                if (static_cast<int>(out[i].tokens.size()) == lm.max_len) {
                    alive[i] = 0;  // at the cap: stop with no end factor
                }
            }
        }
    }
    return out;
}

}  // namespace

// ---- public scoring ----

Tensor lm_score_batch(const LmParams& lm, const std::vector<TokenSeq>& seqs) {
    check(!seqs.empty(), "empty batch");
    validate_tokens(seqs, lm.vocab_size, lm.max_len, "sequence");
    const int b = static_cast<int>(seqs.size());
    Tensor h({b, lm.hidden_dim});
    Tensor c({b, lm.hidden_dim});
    return decoder_score(lm, h, c, seqs);
}

double lm_log_prob(const LmParams& lm, const TokenSeq& seq) {
    ad::NoGradGuard guard;
    return lm_score_batch(lm, {seq}).data()[0];
}

Tensor seq2seq_score_batch(const Seq2SeqParams& model, const std::vector<TokenSeq>& src,
                           const std::vector<TokenSeq>& tgt) {
    check(!src.empty() && src.size() == tgt.size(), "src/tgt batch size mismatch: ",
          src.size(), " vs ", tgt.size());
    validate_tokens(src, model.encoder.vocab_size, 0, "source");
    validate_tokens(tgt, model.decoder.vocab_size, model.decoder.max_len, "target");
    auto [h, c] = run_encoder(model.encoder, src);
    return decoder_score(model.decoder, h, c, tgt);
}

double seq2seq_log_prob(const Seq2SeqParams& model, const TokenSeq& src,
                        const TokenSeq& tgt) {
    ad::NoGradGuard guard;
    return seq2seq_score_batch(model, {src}, {tgt}).data()[0];
}

std::vector<double> seq2seq_stepwise_log_probs(const Seq2SeqParams& model,
                                               const TokenSeq& src, const TokenSeq& tgt) {
    ad::NoGradGuard guard;
    validate_tokens({tgt}, model.decoder.vocab_size, model.decoder.max_len, "target");
    const LmParams& lm = model.decoder;
    auto [h, c] = run_encoder(model.encoder, {src});
    std::vector<double> out;
    const size_t steps =
        tgt.size() + (static_cast<int>(tgt.size()) < lm.max_len ? 1 : 0);
    for (size_t t = 0; t < steps; ++t) {
        std::vector<int> inputs = {t == 0 ? lm.start_input() : tgt[t - 1]};
        Tensor lp = decode_step(lm, h, c, inputs);
        const int pick = t < tgt.size() ? tgt[t] : lm.end_output();
        out.push_back(lp.data()[pick]);
    }
    return out;
}

std::vector<double> lm_stepwise_log_probs(const LmParams& lm, const TokenSeq& seq) {
    ad::NoGradGuard guard;
    validate_tokens({seq}, lm.vocab_size, lm.max_len, "sequence");
    Tensor h({1, lm.hidden_dim});
    Tensor c({1, lm.hidden_dim});
    std::vector<double> out;
    const size_t steps =
        seq.size() + (static_cast<int>(seq.size()) < lm.max_len ? 1 : 0);
    for (size_t t = 0; t < steps; ++t) {
        std::vector<int> inputs = {t == 0 ? lm.start_input() : seq[t - 1]};
        Tensor lp = decode_step(lm, h, c, inputs);
        const int pick = t < seq.size() ? seq[t] : lm.end_output();
        out.push_back(lp.data()[pick]);
    }
    return out;
}

// ---- public sampling ----

std::vector<SequenceSample> lm_sample_batch(const LmParams& lm, int batch, Rng& rng) {
    check(batch >= 1, "batch must be >= 1");
    ad::NoGradGuard guard;
    Tensor h({batch, lm.hidden_dim});
    Tensor c({batch, lm.hidden_dim});
    return run_sampler(lm, h, c, batch, rng);
}

std::vector<SequenceSample> seq2seq_sample_batch(const Seq2SeqParams& model,
                                                 const std::vector<TokenSeq>& src,
                                                 Rng& rng) {
    check(!src.empty(), "empty batch");
    ad::NoGradGuard guard;
    validate_tokens(src, model.encoder.vocab_size, 0, "source");
    auto [h, c] = run_encoder(model.encoder, src);
    return run_sampler(model.decoder, h, c, static_cast<int>(src.size()), rng);
}

TokenSeq greedy_decode(const Seq2SeqParams& model, const TokenSeq& src) {
    ad::NoGradGuard guard;
    validate_tokens({src}, model.encoder.vocab_size, 0, "source");
    const LmParams& lm = model.decoder;
    auto [h, c] = run_encoder(model.encoder, {src});
    const int k = lm.vocab_size + 1;
    TokenSeq tokens;
    std::vector<int> inputs = {lm.start_input()};
    for (int t = 0; t < lm.max_len; ++t) {
        Tensor lp = decode_step(lm, h, c, inputs);
        const double* row = lp.data().data();
        int best = 0;
        for (int j = 1; j < k; ++j) {
            if (row[j] > row[best]) best = j;  // ties keep the lowest index
        }
        if (best == lm.end_output()) break;
        tokens.push_back(best);
        inputs = {best};
    }
    return tokens;
}

// ---- prior pretraining ----

LmParams pretrain_prior(const PriorTrainConfig& config, int vocab_size,
                        const std::function<TokenSeq(Rng&)>& simulate,
                        const std::vector<TokenSeq>& corpus, Rng& rng) {
    check(config.steps >= 1 && config.batch_size >= 1, "bad prior training config");
    if (config.mode == PriorMode::Empirical) {
        check(!corpus.empty(), "empirical prior mode needs a nonempty program corpus");
    } else {
        check(static_cast<bool>(simulate), "syntactic prior mode needs a simulator");
    }

    Rng init_rng = rng.derive("prior-init");
    LmParams lm;
    lm.init(vocab_size, config.max_len, init_rng);
    ad::Adam opt(lm.trainable_params("prior"), config.lr);

    Rng data_rng = rng.derive("prior-data");
    size_t cursor = 0;
    std::vector<size_t> order(corpus.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = i;

    for (int step = 0; step < config.steps; ++step) {
        std::vector<TokenSeq> batch;
        batch.reserve(config.batch_size);
        for (int i = 0; i < config.batch_size; ++i) {
            if (config.mode == PriorMode::Syntactic) {
                batch.push_back(simulate(data_rng));
            } else {
                if (cursor == 0) {
                    for (size_t j = order.size(); j > 1; --j) {
                        std::swap(order[j - 1],
                                  order[data_rng.uniform_int(static_cast<int>(j))]);
                    }
                }
                batch.push_back(corpus[order[cursor]]);
                cursor = (cursor + 1) % corpus.size();
            }
        }
        ad::Tape tape;
        Tensor scores = lm_score_batch(lm, batch);
        Tensor loss = ad::scale(ad::sum_axis(scores, 0), -1.0 / config.batch_size);
        tape.backward(loss);
        opt.step();
    }
    lm.set_frozen(true);
    return lm;
}

}  // namespace lpvqa::seq
