#pragma once

#include "lpvqa/autodiff.hpp"
#include "lpvqa/common.hpp"
#include "lpvqa/grammar.hpp"
#include "lpvqa/world.hpp"

namespace lpvqa::nmn {

inline constexpr int kChannels = 64;

/// Two-layer image stem: 10x10 conv at stride 10, then 1x1 conv, relu after
/// each; 30x30x3 -> 3x3x64 so feature positions line up with scene cells.
struct CnnStem {
    ad::Tensor conv1;  // [10, 10, 3, 64]
    ad::Tensor b1;     // [64]
    ad::Tensor conv2;  // [1, 1, 64, 64]
    ad::Tensor b2;     // [64]

    void init(Rng& rng);
    ad::ParamList params(const std::string& prefix) const;
};

ad::Tensor encode_image(const CnnStem& stem, const ad::Tensor& image);

/// Per-token module parameters. Signatures by kind:
///   find:      features -> attention          (1x1 conv + sigmoid)
///   transform: attention x features -> attention
///              (3x3 same conv over the concatenated stack + sigmoid)
///   and:       attention x attention -> attention (elementwise min, no params)
///   answer:    attention x features -> answer log-probs
///              (attention-weighted feature sum -> linear -> log-softmax)
struct ModuleBank {
    grammar::ProgramVocab vocab;
    int n_answers = 2;
    std::vector<ad::ParamList> modules;  // indexed by token id; names unprefixed

    void init(const grammar::ProgramVocab& v, int n_answers, Rng& rng);
    ad::ParamList params(const std::string& prefix) const;
    const ad::Tensor& tensor_of(int token, const std::string& name) const;
};

struct ExecutionTrace {
    struct NodeRecord {
        int token = -1;
        std::vector<double> attention;  // 9 values; empty for the answer node
    };
    std::vector<NodeRecord> nodes;  // preorder
    std::vector<double> answer_log_probs;
};

/// Assembles the module network along the program tree and returns answer
/// log-probabilities [1, n_answers], differentiable w.r.t. bank and stem.
/// Throws (carrying the validator verdict) on invalid programs.
ad::Tensor execute_program(const ModuleBank& bank, const CnnStem& stem,
                           const grammar::Program& program, const ad::Tensor& image,
                           ExecutionTrace* trace = nullptr);

/// log p(answer | image; modules of the program)
ad::Tensor answer_log_prob(const ModuleBank& bank, const CnnStem& stem,
                           const grammar::Program& program, const ad::Tensor& image,
                           int answer);

}  // namespace lpvqa::nmn
