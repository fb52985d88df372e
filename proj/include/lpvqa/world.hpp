#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "lpvqa/common.hpp"
#include "lpvqa/grammar.hpp"
#include "lpvqa/tensor.hpp"

namespace lpvqa::world {

inline constexpr int kGrid = 3;       // scene cells per side
inline constexpr int kCellPx = 10;    // rendered pixels per cell side
inline constexpr int kImageSize = kGrid * kCellPx;

enum class ShapeKind { Circle, Triangle, Square };
enum class ColorKind { Red, Green, Blue };

const char* shape_name(ShapeKind s);
const char* color_name(ColorKind c);

struct Cell {
    bool filled = false;
    ShapeKind shape = ShapeKind::Circle;
    ColorKind color = ColorKind::Red;

    bool operator==(const Cell&) const = default;
};

/// 3x3 grid of optional colored shapes; at least one cell filled.
struct Scene {
    std::array<Cell, kGrid * kGrid> cells;

    Cell& at(int row, int col) { return cells[row * kGrid + col]; }
    const Cell& at(int row, int col) const { return cells[row * kGrid + col]; }
    int filled_count() const;
    uint64_t hash() const;
    bool operator==(const Scene&) const = default;
};

/// Each cell filled independently with probability `density`; all-empty
/// scenes are resampled.
Scene sample_scene(Rng& rng, double density);

/// Deterministic 30x30x3 rasterization in [0,1]: one shape centered in its
/// 10x10 block, pure cell color on black.
ad::Tensor render_scene(const Scene& scene);

/// true at pixel (local 10x10 coords) covered by the shape
bool shape_mask(ShapeKind shape, int y, int x);

using GridMask = std::array<bool, kGrid * kGrid>;

struct ExecResult {
    int answer = 0;  // index into the answer vocabulary {no, yes}
    /// per-node masks in serialization (preorder) order; the answer node
    /// carries its child's mask
    std::vector<GridMask> masks;
};

inline constexpr int kAnswerNo = 0;
inline constexpr int kAnswerYes = 1;
inline const std::vector<std::string> kAnswerWords = {"no", "yes"};

/// Exact set semantics on the grid: find keeps matching cells, transform
/// shifts the mask one cell (falling off vanishes), and intersects, answer is
/// yes iff the mask is nonempty. The brute-force oracle for p(a|i,z).
ExecResult symbolic_execute(const grammar::Program& program, const Scene& scene,
                            const grammar::ProgramVocab& vocab);

// ---- questions -------------------------------------------------------------

struct QuestionVocab {
    std::vector<std::string> words;
    int size() const { return static_cast<int>(words.size()); }
    int word_id(const std::string& w) const;
    static QuestionVocab shapes();
};

inline constexpr int kMaxQuestionLen = 15;
inline constexpr int kMaxProgramLen = 7;

enum class TemplateKind {
    Exists,                // answer find[A]
    ExistsBoth,            // answer and find[color] find[shape]
    Related,               // answer and find[A] transform[d] find[B]
    RelatedCompoundLeft,   // answer and and find[color] find[shape] transform[d] find[B]
    RelatedCompoundRight,  // answer and find[A] transform[d] and find[color] find[shape]
    RelatedAnything,       // answer transform[d] find[B]
};

struct TemplateSet {
    std::vector<TemplateKind> kinds;
    std::vector<double> weights;
    int surface_variants = 3;
    static TemplateSet shapes();
};

/// Deterministic surface realization of a template-shaped program.
std::vector<int> program_to_question(const grammar::Program& program,
                                     const grammar::ProgramVocab& pvocab,
                                     const QuestionVocab& qvocab, int variant);

/// Exact inverse of program_to_question over the shipped template set; used
/// to show the question -> program map is well defined.
std::optional<grammar::Program> question_to_program(const std::vector<int>& question,
                                                    const grammar::ProgramVocab& pvocab,
                                                    const QuestionVocab& qvocab);

struct QAItem {
    int id = 0;
    int scene_id = 0;
    std::vector<int> question;
    int answer = kAnswerNo;
    grammar::Program gold_program;
    bool teaching = false;
};

/// Samples a template-shaped program on the scene, balancing yes/no by
/// resampling program attributes against a coin-flip target answer, then
/// realizes the question. The stored answer always matches the oracle.
QAItem generate_qa(const Scene& scene, Rng& rng, const TemplateSet& templates,
                   const grammar::ProgramVocab& pvocab, const QuestionVocab& qvocab);

// ---- dataset ----------------------------------------------------------------

struct DatasetConfig {
    int train_size = 6000;
    int val_size = 600;
    int test_size = 600;
    double supervision_fraction = 0.10;  // (0, 1]; teaching fraction of train
    double density = 0.5;
    uint64_t seed = 0;
};

struct Dataset {
    DatasetConfig config;
    grammar::ProgramVocab pvocab;
    QuestionVocab qvocab;
    std::vector<std::string> answers;
    std::vector<Scene> scenes;  // shared across splits; items refer by id
    std::vector<QAItem> train, val, test;

    int teaching_count() const;
    const Scene& scene_of(const QAItem& item) const { return scenes[item.scene_id]; }
};

/// Generates train/val/test with teaching flags on the first
/// ceil(fraction * train) items after a shuffle. Val/test scenes are disjoint
/// from train scenes by scene hash. Fully determined by config.seed.
Dataset build_dataset(const DatasetConfig& config);

}  // namespace lpvqa::world
