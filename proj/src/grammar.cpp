#include "lpvqa/grammar.hpp"

#include <algorithm>

namespace lpvqa::grammar {

const char* kind_name(ModuleKind kind) {
    switch (kind) {
        case ModuleKind::Find: return "find";
        case ModuleKind::Transform: return "transform";
        case ModuleKind::And: return "and";
        case ModuleKind::Answer: return "answer";
    }
    return "?";
}

ModuleKind kind_from_name(const std::string& name) {
    if (name == "find") return ModuleKind::Find;
    if (name == "transform") return ModuleKind::Transform;
    if (name == "and") return ModuleKind::And;
    if (name == "answer") return ModuleKind::Answer;
    fail("unknown module kind '", name, "'");
}

namespace {

int arity_of(ModuleKind kind) {
    switch (kind) {
        case ModuleKind::Find: return 0;
        case ModuleKind::Transform: return 1;
        case ModuleKind::And: return 2;
        case ModuleKind::Answer: return 1;
    }
    return 0;
}

}  // namespace

int ProgramVocab::find_token(const std::string& name) const {
    for (int i = 0; i < size(); ++i) {
        if (tokens[i] == name) return i;
    }
    return -1;
}

int ProgramVocab::token_id(const std::string& name) const {
    int id = find_token(name);
    check(id >= 0, "unknown program token '", name, "'");
    return id;
}

ProgramVocab ProgramVocab::shapes() {
    ProgramVocab v;
    auto push = [&v](const std::string& name, ModuleKind kind) {
        v.tokens.push_back(name);
        v.kind.push_back(kind);
        v.arity.push_back(arity_of(kind));
    };
    for (const char* attr : {"red", "green", "blue", "circle", "triangle", "square"}) {
        push(str_cat("find[", attr, "]"), ModuleKind::Find);
    }
    for (const char* dir : {"left", "right", "above", "below"}) {
        push(str_cat("transform[", dir, "]"), ModuleKind::Transform);
    }
    push("and", ModuleKind::And);
    push("answer", ModuleKind::Answer);
    return v;
}

std::string Program::to_string(const ProgramVocab& vocab) const {
    std::string s;
    for (size_t i = 0; i < tokens.size(); ++i) {
        if (i) s += ' ';
        s += vocab.tokens[tokens[i]];
    }
    return s;
}

Validity validate_prefix(const Program& program, const ProgramVocab& vocab) {
    const int n = static_cast<int>(program.tokens.size());
    if (n == 0) return {false, 0, "empty program"};
    int needed = 1;
    for (int i = 0; i < n; ++i) {
        const int tok = program.tokens[i];
        if (tok < 0 || tok >= vocab.size()) {
            return {false, i, str_cat("unknown token id ", tok, " at position ", i)};
        }
        if (needed == 0) {
            return {false, i, str_cat("tokens remain at position ", i,
                                      " after the tree completed")};
        }
        const bool is_answer = vocab.kind[tok] == ModuleKind::Answer;
        if (i == 0 && !is_answer) {
            return {false, 0, str_cat("root token '", vocab.tokens[tok],
                                      "' is not answer-kind")};
        }
        if (i > 0 && is_answer) {
            return {false, i, str_cat("answer-kind token '", vocab.tokens[tok],
                                      "' at non-root position ", i)};
        }
        needed += vocab.arity[tok] - 1;
    }
    if (needed != 0) {
        return {false, n, str_cat(needed, " child slot(s) left open at the end")};
    }
    return {true, -1, ""};
}

namespace {

ProgramTree::Node parse_node(const Program& program, const ProgramVocab& vocab, size_t& pos) {
    ProgramTree::Node node;
    node.token = program.tokens[pos++];
    const int arity = vocab.arity[node.token];
    node.children.reserve(arity);
    for (int c = 0; c < arity; ++c) {
        node.children.push_back(parse_node(program, vocab, pos));
    }
    return node;
}

void serialize_node(const ProgramTree::Node& node, const ProgramVocab& vocab,
                    Program& out, bool is_root) {
    check(node.token >= 0 && node.token < vocab.size(), "tree node with unknown token id ",
          node.token);
    const ModuleKind kind = vocab.kind[node.token];
    if (is_root) {
        check(kind == ModuleKind::Answer, "tree root '", vocab.tokens[node.token],
              "' is not answer-kind");
    } else {
        check(kind != ModuleKind::Answer, "answer-kind token '", vocab.tokens[node.token],
              "' below the root");
    }
    const int arity = vocab.arity[node.token];
    check(static_cast<int>(node.children.size()) == arity, "token '",
          vocab.tokens[node.token], "' has ", node.children.size(), " children, arity is ",
          arity);
    out.tokens.push_back(node.token);
    for (const auto& child : node.children) {
        serialize_node(child, vocab, out, false);
    }
}

}  // namespace

ProgramTree parse_to_tree(const Program& program, const ProgramVocab& vocab) {
    Validity v = validate_prefix(program, vocab);
    check(v.valid, "cannot parse invalid program: ", v.reason);
    ProgramTree tree;
    size_t pos = 0;
    tree.root = parse_node(program, vocab, pos);
    return tree;
}

Program serialize_tree(const ProgramTree& tree, const ProgramVocab& vocab) {
    Program out;
    serialize_node(tree.root, vocab, out, true);
    return out;
}

Program simulate_program(const ProgramVocab& vocab, Rng& rng, int max_len) {
    check(max_len >= 2, "length budget ", max_len, " cannot fit any program");

    // frame per open internal node: which token, children filled so far, and
    // whether the first child was a single find token (for the and-constraint)
    struct Frame {
        int token;
        int filled = 0;
        int single_find_child = -1;
    };

    Program out;
    std::vector<Frame> stack;
    int needed = 1;
    while (needed > 0) {
        const int used = static_cast<int>(out.tokens.size());
        const int budget_after = max_len - used - 1;
        int banned_find = -1;
        if (!stack.empty()) {
            const Frame& top = stack.back();
            if (vocab.kind[top.token] == ModuleKind::And && top.filled == 1) {
                banned_find = top.single_find_child;
            }
        }
        std::vector<int> candidates;
        for (int tok = 0; tok < vocab.size(); ++tok) {
            const bool is_answer = vocab.kind[tok] == ModuleKind::Answer;
            if (used == 0 && !is_answer) continue;
            if (used > 0 && is_answer) continue;
            if (tok == banned_find) continue;
            const int needed_after = needed - 1 + vocab.arity[tok];
            if (needed_after > budget_after) continue;  // cannot close every slot in time
            candidates.push_back(tok);
        }
        check(!candidates.empty(), "no token fits the remaining budget (max_len ", max_len,
              ")");
        const int tok = candidates[rng.uniform_int(static_cast<int>(candidates.size()))];
        out.tokens.push_back(tok);
        needed += vocab.arity[tok] - 1;

        if (vocab.arity[tok] > 0) {
            stack.push_back({tok, 0, -1});
        } else {
            // a leaf closes this child slot and possibly parents above it
            int completed_single_find = vocab.kind[tok] == ModuleKind::Find ? tok : -1;
            while (!stack.empty()) {
                Frame& top = stack.back();
                if (top.filled == 0 && completed_single_find >= 0) {
                    top.single_find_child = completed_single_find;
                }
                top.filled += 1;
                if (top.filled < vocab.arity[top.token]) break;
                completed_single_find = -1;  // a completed internal node is not a single find
                stack.pop_back();
            }
        }
    }
    return out;
}

}  // namespace lpvqa::grammar
