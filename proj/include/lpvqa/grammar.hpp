#pragma once

#include <string>
#include <vector>

#include "lpvqa/common.hpp"

namespace lpvqa::grammar {

enum class ModuleKind { Find, Transform, And, Answer };

const char* kind_name(ModuleKind kind);
ModuleKind kind_from_name(const std::string& name);

/// Program token vocabulary with per-token arity and module kind. Token ids
/// index this table everywhere; control symbols (start/end/pad) live in the
/// sequence-model layer, not here.
struct ProgramVocab {
    std::vector<std::string> tokens;
    std::vector<int> arity;
    std::vector<ModuleKind> kind;

    int size() const { return static_cast<int>(tokens.size()); }
    int find_token(const std::string& name) const;  // -1 when absent
    int token_id(const std::string& name) const;    // throws when absent

    /// find[red|green|blue|circle|triangle|square], transform[left|right|
    /// above|below], and, answer - 12 tokens.
    static ProgramVocab shapes();
};

/// Prefix-serialized program; the latent variable of the whole model.
struct Program {
    std::vector<int> tokens;

    bool operator==(const Program&) const = default;
    std::string to_string(const ProgramVocab& vocab) const;
};

struct ProgramTree {
    struct Node {
        int token = -1;
        std::vector<Node> children;
    };
    Node root;
};

struct Validity {
    bool valid = false;
    int error_pos = -1;  // 0-based index of the offending token; length of the
                         // sequence when it ends with open child slots
    std::string reason;
};

/// Prefix-arity walk: needed starts at 1, each token consumes a slot and opens
/// arity(token) new ones; a program is valid iff the count never hits zero
/// with tokens left over and ends at exactly zero, the first token is the
/// only answer-kind token, and every id is in range.
Validity validate_prefix(const Program& program, const ProgramVocab& vocab);

/// Recursive prefix parse. Throws, carrying the validator verdict, on invalid
/// input.
ProgramTree parse_to_tree(const Program& program, const ProgramVocab& vocab);

/// Preorder serialization; inverse of parse_to_tree. Throws on child-count or
/// root-kind violations.
Program serialize_tree(const ProgramTree& tree, const ProgramVocab& vocab);

/// Samples a syntactically valid program of at most max_len tokens: at each
/// slot, sample uniformly among tokens permitted by the arity discipline and
/// the remaining length budget, then reject domain-constraint violations
/// (an `and` over two identical single-token children).
Program simulate_program(const ProgramVocab& vocab, Rng& rng, int max_len);

}  // namespace lpvqa::grammar
