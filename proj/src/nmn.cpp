#include "lpvqa/nmn.hpp"

#include <cmath>

namespace lpvqa::nmn {

using ad::Tensor;
using grammar::ModuleKind;

namespace {

Tensor conv_kernel(int kh, int kw, int ci, int co, Rng& rng) {
    const double a = std::sqrt(6.0 / (kh * kw * ci + co));
    Tensor t({kh, kw, ci, co}, 0.0, true);
    for (double& v : t.data()) v = rng.uniform(-a, a);
    return t;
}

Tensor dense(int rows, int cols, Rng& rng) {
    const double a = std::sqrt(6.0 / (rows + cols));
    Tensor t({rows, cols}, 0.0, true);
    for (double& v : t.data()) v = rng.uniform(-a, a);
    return t;
}

}  // namespace

void CnnStem::init(Rng& rng) {
    conv1 = conv_kernel(world::kCellPx, world::kCellPx, 3, kChannels, rng);
    b1 = Tensor({kChannels}, 0.0, true);
    conv2 = conv_kernel(1, 1, kChannels, kChannels, rng);
    b2 = Tensor({kChannels}, 0.0, true);
}

ad::ParamList CnnStem::params(const std::string& prefix) const {
    return {{prefix + ".conv1", conv1},
            {prefix + ".b1", b1},
            {prefix + ".conv2", conv2},
            {prefix + ".b2", b2}};
}

ad::Tensor encode_image(const CnnStem& stem, const ad::Tensor& image) {
    using namespace ad;
    check(image.shape() == Shape{world::kImageSize, world::kImageSize, 3},
          "encode_image expects a ", world::kImageSize, "x", world::kImageSize,
          "x3 image, got ", shape_str(image.shape()));
    Tensor f1 = relu(add(conv2d(image, stem.conv1, world::kCellPx), stem.b1));
    Tensor f2 = relu(add(conv2d(f1, stem.conv2, 1), stem.b2));
    return f2;  // [3, 3, 64]
}

void ModuleBank::init(const grammar::ProgramVocab& v, int answers, Rng& rng) {
    vocab = v;
    n_answers = answers;
    modules.assign(v.size(), {});
    for (int tok = 0; tok < v.size(); ++tok) {
        switch (v.kind[tok]) {
            case ModuleKind::Find:
                modules[tok] = {{"w", conv_kernel(1, 1, kChannels, 1, rng)},
                                {"b", Tensor({1}, 0.0, true)}};
                break;
            case ModuleKind::Transform:
                modules[tok] = {{"w", conv_kernel(3, 3, kChannels + 1, 1, rng)},
                                {"b", Tensor({1}, 0.0, true)}};
                break;
            case ModuleKind::And:
                break;  // elementwise min; no parameters
            case ModuleKind::Answer:
                modules[tok] = {{"w", dense(kChannels, answers, rng)},
                                {"b", Tensor({answers}, 0.0, true)}};
                break;
        }
    }
}

ad::ParamList ModuleBank::params(const std::string& prefix) const {
    ad::ParamList out;
    for (int tok = 0; tok < vocab.size(); ++tok) {
        ad::append_params(out, modules[tok], prefix + "." + vocab.tokens[tok]);
    }
    return out;
}

const ad::Tensor& ModuleBank::tensor_of(int token, const std::string& name) const {
    for (const auto& [n, t] : modules[token]) {
        if (n == name) return t;
    }
    fail("module for token '", vocab.tokens[token], "' has no tensor '", name, "'");
}

namespace {

struct Executor {
    const ModuleBank& bank;
    const Tensor& features;  // [3, 3, C]
    ExecutionTrace* trace;

    // evaluates a non-answer subtree; trace records fill in preorder
    Tensor eval(const grammar::ProgramTree::Node& node) {
        using namespace ad;
        size_t slot = 0;
        if (trace != nullptr) {
            slot = trace->nodes.size();
            trace->nodes.push_back({node.token, {}});
        }
        const ModuleKind kind = bank.vocab.kind[node.token];
        Tensor attention;
        switch (kind) {
            case ModuleKind::Find: {
                Tensor pre = add(conv2d(features, bank.tensor_of(node.token, "w"), 1),
                                 bank.tensor_of(node.token, "b"));
                attention = sigmoid(pre);
                break;
            }
            case ModuleKind::Transform: {
                Tensor child = eval(node.children[0]);
                Tensor stacked = concat(child, features);  // [3, 3, C+1]
                Tensor pre = add(conv2d(pad2d(stacked, 1),
                                        bank.tensor_of(node.token, "w"), 1),
                                 bank.tensor_of(node.token, "b"));
                attention = sigmoid(pre);
                break;
            }
            case ModuleKind::And: {
                Tensor a = eval(node.children[0]);
                Tensor b = eval(node.children[1]);
                attention = minimum(a, b);
                break;
            }
            case ModuleKind::Answer:
                fail("answer module below the root");
        }
        if (trace != nullptr) {
            trace->nodes[slot].attention = attention.data();
        }
        return attention;
    }
};

}  // namespace

ad::Tensor execute_program(const ModuleBank& bank, const CnnStem& stem,
                           const grammar::Program& program, const ad::Tensor& image,
                           ExecutionTrace* trace) {
    using namespace ad;
    grammar::ProgramTree tree = grammar::parse_to_tree(program, bank.vocab);
    const int root_token = tree.root.token;
    check(!bank.modules[root_token].empty(), "no module parameters for token '",
          bank.vocab.tokens[root_token], "'");

    Tensor features = encode_image(stem, image);
    if (trace != nullptr) {
        trace->nodes.push_back({root_token, {}});
    }
    Executor executor{bank, features, trace};
    Tensor attention = executor.eval(tree.root.children[0]);

    // answer head: attention-weighted feature sum -> linear -> log-softmax
    Tensor att_row = reshape(attention, {1, world::kGrid * world::kGrid});
    Tensor feat_mat = reshape(features, {world::kGrid * world::kGrid, kChannels});
    Tensor pooled = matmul(att_row, feat_mat);  // [1, C]
    Tensor logits = add(matmul(pooled, bank.tensor_of(root_token, "w")),
                        bank.tensor_of(root_token, "b"));
    Tensor log_probs = log_softmax(logits);

    if (trace != nullptr) {
        trace->answer_log_probs = log_probs.data();
    }
    return log_probs;
}

ad::Tensor answer_log_prob(const ModuleBank& bank, const CnnStem& stem,
                           const grammar::Program& program, const ad::Tensor& image,
                           int answer) {
    check(answer >= 0 && answer < bank.n_answers, "answer index ", answer,
          " out of range [0, ", bank.n_answers, ")");
    ad::Tensor log_probs = execute_program(bank, stem, program, image);
    return ad::pick_index(log_probs, {answer});
}

}  // namespace lpvqa::nmn
