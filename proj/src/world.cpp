#include "lpvqa/world.hpp"

#include <algorithm>
#include <cmath>
#include <unordered_set>

namespace lpvqa::world {

const char* shape_name(ShapeKind s) {
    switch (s) {
        case ShapeKind::Circle: return "circle";
        case ShapeKind::Triangle: return "triangle";
        case ShapeKind::Square: return "square";
    }
    return "?";
}

const char* color_name(ColorKind c) {
    switch (c) {
        case ColorKind::Red: return "red";
        case ColorKind::Green: return "green";
        case ColorKind::Blue: return "blue";
    }
    return "?";
}

int Scene::filled_count() const {
    int n = 0;
    for (const Cell& c : cells) n += c.filled;
    return n;
}

uint64_t Scene::hash() const {
    uint64_t h = 1469598103934665603ull;
    for (const Cell& c : cells) {
        uint64_t code = c.filled ? 1u + static_cast<unsigned>(c.shape) * 3u +
                                       static_cast<unsigned>(c.color)
                                 : 0u;
        h ^= code;
        h *= 1099511628211ull;
    }
    return h;
}

Scene sample_scene(Rng& rng, double density) {
    check(density > 0.0 && density <= 1.0, "density must be in (0, 1], got ", density);
    Scene scene;
    do {
        for (Cell& c : scene.cells) {
            c.filled = rng.uniform01() < density;
            c.shape = static_cast<ShapeKind>(rng.uniform_int(3));
            c.color = static_cast<ColorKind>(rng.uniform_int(3));
        }
    } while (scene.filled_count() == 0);
    return scene;
}

bool shape_mask(ShapeKind shape, int y, int x) {
    switch (shape) {
        case ShapeKind::Square:
            return y >= 2 && y <= 7 && x >= 2 && x <= 7;
        case ShapeKind::Circle: {
            const double dy = y - 4.5, dx = x - 4.5;
            return dy * dy + dx * dx <= 12.25;
        }
        case ShapeKind::Triangle:
            return y >= 2 && y <= 7 && std::abs(x - 4.5) <= (y - 1) * 0.5;
    }
    return false;
}

ad::Tensor render_scene(const Scene& scene) {
    ad::Tensor img({kImageSize, kImageSize, 3});
    auto& px = img.data();
    for (int r = 0; r < kGrid; ++r) {
        for (int c = 0; c < kGrid; ++c) {
            const Cell& cell = scene.at(r, c);
            if (!cell.filled) continue;
            const int channel = static_cast<int>(cell.color);
            for (int y = 0; y < kCellPx; ++y) {
                for (int x = 0; x < kCellPx; ++x) {
                    if (!shape_mask(cell.shape, y, x)) continue;
                    const int py = r * kCellPx + y;
                    const int pxl = c * kCellPx + x;
                    px[(static_cast<size_t>(py) * kImageSize + pxl) * 3 + channel] = 1.0;
                }
            }
        }
    }
    return img;
}

// ---- symbolic oracle ---------------------------------------------------------

namespace {

struct OracleEval {
    const Scene& scene;
    const grammar::ProgramVocab& vocab;
    std::vector<GridMask>& masks;

    // returns the mask of the node at `pos`, advancing pos past the subtree
    GridMask eval(const grammar::Program& program, size_t& pos) {
        const int tok = program.tokens[pos];
        const size_t my_index = pos;
        ++pos;
        masks.emplace_back();  // placeholder, filled below
        GridMask out{};
        switch (vocab.kind[tok]) {
            case grammar::ModuleKind::Find: {
                const std::string& name = vocab.tokens[tok];
                // token names look like find[attr]
                const std::string attr = name.substr(5, name.size() - 6);
                for (int i = 0; i < kGrid * kGrid; ++i) {
                    const Cell& cell = scene.cells[i];
                    out[i] = cell.filled && (attr == color_name(cell.color) ||
                                             attr == shape_name(cell.shape));
                }
                break;
            }
            case grammar::ModuleKind::Transform: {
                const GridMask in = eval(program, pos);
                const std::string& name = vocab.tokens[tok];
                const std::string dir = name.substr(10, name.size() - 11);
                int dr = 0, dc = 0;  // source offset: out[r][c] = in[r+dr][c+dc]
                if (dir == "left") dc = 1;
                else if (dir == "right") dc = -1;
                else if (dir == "above") dr = 1;
                else if (dir == "below") dr = -1;
                else fail("unknown transform direction '", dir, "'");
                for (int r = 0; r < kGrid; ++r) {
                    for (int c = 0; c < kGrid; ++c) {
                        const int sr = r + dr, sc = c + dc;
                        out[r * kGrid + c] = sr >= 0 && sr < kGrid && sc >= 0 &&
                                             sc < kGrid && in[sr * kGrid + sc];
                    }
                }
                break;
            }
            case grammar::ModuleKind::And: {
                const GridMask a = eval(program, pos);
                const GridMask b = eval(program, pos);
                for (int i = 0; i < kGrid * kGrid; ++i) out[i] = a[i] && b[i];
                break;
            }
            case grammar::ModuleKind::Answer: {
                out = eval(program, pos);
                break;
            }
        }
        masks[my_index] = out;
        return out;
    }
};

}  // namespace

ExecResult symbolic_execute(const grammar::Program& program, const Scene& scene,
                            const grammar::ProgramVocab& vocab) {
    grammar::Validity v = grammar::validate_prefix(program, vocab);
    check(v.valid, "symbolic_execute on invalid program: ", v.reason);
    ExecResult result;
    result.masks.reserve(program.tokens.size());
    OracleEval eval{scene, vocab, result.masks};
    size_t pos = 0;
    GridMask root = eval.eval(program, pos);
    bool any = false;
    for (bool b : root) any = any || b;
    result.answer = any ? kAnswerYes : kAnswerNo;
    return result;
}

// ---- question templates --------------------------------------------------------

int QuestionVocab::word_id(const std::string& w) const {
    for (int i = 0; i < size(); ++i) {
        if (words[i] == w) return i;
    }
    fail("unknown question word '", w, "'");
}

QuestionVocab QuestionVocab::shapes() {
    QuestionVocab v;
    v.words = {"is",   "there", "a",      "present", "do",      "you",  "see",
               "anything", "thing", "left",   "right",   "of",      "above", "below",
               "red",  "green", "blue",   "circle",  "triangle", "square"};
    return v;
}

TemplateSet TemplateSet::shapes() {
    TemplateSet t;
    t.kinds = {TemplateKind::Exists,      TemplateKind::ExistsBoth,
               TemplateKind::Related,     TemplateKind::RelatedCompoundLeft,
               TemplateKind::RelatedCompoundRight, TemplateKind::RelatedAnything};
    t.weights = {1.0, 1.5, 3.0, 2.5, 2.5, 1.0};
    return t;
}

namespace {

bool is_color_attr(const std::string& attr) {
    return attr == "red" || attr == "green" || attr == "blue";
}

// attr inside find[attr]
std::string find_attr(const grammar::ProgramVocab& vocab, int token) {
    const std::string& name = vocab.tokens[token];
    check(name.rfind("find[", 0) == 0, "token '", name, "' is not a find");
    return name.substr(5, name.size() - 6);
}

std::string transform_dir(const grammar::ProgramVocab& vocab, int token) {
    const std::string& name = vocab.tokens[token];
    check(name.rfind("transform[", 0) == 0, "token '", name, "' is not a transform");
    return name.substr(10, name.size() - 11);
}

// noun phrase for a single find: colors read "<color> thing", shapes "<shape>"
void append_np(std::vector<std::string>& words, const std::string& attr) {
    words.push_back(attr);
    if (is_color_attr(attr)) words.push_back("thing");
}

void append_rel(std::vector<std::string>& words, const std::string& dir) {
    words.push_back(dir);
    if (dir == "left" || dir == "right") words.push_back("of");
}

struct ParsedProgram {
    TemplateKind kind;
    std::vector<std::string> left_np;   // one attr, or color+shape for compounds
    std::vector<std::string> right_np;  // empty for Exists/ExistsBoth
    std::string dir;
};

ParsedProgram decompose(const grammar::Program& p, const grammar::ProgramVocab& v) {
    const auto& t = p.tokens;
    auto kind_at = [&](size_t i) { return v.kind[t[i]]; };
    using grammar::ModuleKind;
    check(!t.empty() && kind_at(0) == ModuleKind::Answer, "program is not answer-rooted");
    ParsedProgram out;
    if (t.size() == 2 && kind_at(1) == ModuleKind::Find) {
        out.kind = TemplateKind::Exists;
        out.left_np = {find_attr(v, t[1])};
        return out;
    }
    if (t.size() == 3 && kind_at(1) == ModuleKind::Transform && kind_at(2) == ModuleKind::Find) {
        out.kind = TemplateKind::RelatedAnything;
        out.dir = transform_dir(v, t[1]);
        out.right_np = {find_attr(v, t[2])};
        return out;
    }
    if (t.size() == 4 && kind_at(1) == ModuleKind::And && kind_at(2) == ModuleKind::Find &&
        kind_at(3) == ModuleKind::Find) {
        out.kind = TemplateKind::ExistsBoth;
        out.left_np = {find_attr(v, t[2]), find_attr(v, t[3])};
        check(is_color_attr(out.left_np[0]) && !is_color_attr(out.left_np[1]),
              "compound find pair must be color then shape: ", p.to_string(v));
        return out;
    }
    if (t.size() == 5 && kind_at(1) == ModuleKind::And && kind_at(2) == ModuleKind::Find &&
        kind_at(3) == ModuleKind::Transform && kind_at(4) == ModuleKind::Find) {
        out.kind = TemplateKind::Related;
        out.left_np = {find_attr(v, t[2])};
        out.dir = transform_dir(v, t[3]);
        out.right_np = {find_attr(v, t[4])};
        return out;
    }
    if (t.size() == 7 && kind_at(1) == ModuleKind::And && kind_at(2) == ModuleKind::And &&
        kind_at(3) == ModuleKind::Find && kind_at(4) == ModuleKind::Find &&
        kind_at(5) == ModuleKind::Transform && kind_at(6) == ModuleKind::Find) {
        out.kind = TemplateKind::RelatedCompoundLeft;
        out.left_np = {find_attr(v, t[3]), find_attr(v, t[4])};
        out.dir = transform_dir(v, t[5]);
        out.right_np = {find_attr(v, t[6])};
        return out;
    }
    if (t.size() == 7 && kind_at(1) == ModuleKind::And && kind_at(2) == ModuleKind::Find &&
        kind_at(3) == ModuleKind::Transform && kind_at(4) == ModuleKind::And &&
        kind_at(5) == ModuleKind::Find && kind_at(6) == ModuleKind::Find) {
        out.kind = TemplateKind::RelatedCompoundRight;
        out.left_np = {find_attr(v, t[2])};
        out.dir = transform_dir(v, t[3]);
        out.right_np = {find_attr(v, t[5]), find_attr(v, t[6])};
        return out;
    }
    fail("program does not match any question template: ", p.to_string(v));
}

void append_np_words(std::vector<std::string>& words, const std::vector<std::string>& np) {
    if (np.size() == 2) {
        words.push_back(np[0]);  // color
        words.push_back(np[1]);  // shape
    } else {
        append_np(words, np[0]);
    }
}

}  // namespace

std::vector<int> program_to_question(const grammar::Program& program,
                                     const grammar::ProgramVocab& pvocab,
                                     const QuestionVocab& qvocab, int variant) {
    check(variant >= 0 && variant < 3, "surface variant must be 0..2, got ", variant);
    ParsedProgram parts = decompose(program, pvocab);
    std::vector<std::string> words;
    const bool anything = parts.kind == TemplateKind::RelatedAnything;

    switch (variant) {
        case 0: words = {"is", "there"}; break;
        case 1: words = {"is"}; break;
        case 2: words = {"do", "you", "see"}; break;
    }
    if (anything) {
        words.push_back("anything");
    } else {
        words.push_back("a");
        append_np_words(words, parts.left_np);
    }
    if (!parts.dir.empty() && !parts.right_np.empty()) {
        append_rel(words, parts.dir);
        words.push_back("a");
        append_np_words(words, parts.right_np);
    }
    if (variant == 1) words.push_back("present");

    std::vector<int> out;
    out.reserve(words.size());
    for (const std::string& w : words) out.push_back(qvocab.word_id(w));
    check(static_cast<int>(out.size()) <= kMaxQuestionLen, "question too long: ",
          out.size(), " words");
    return out;
}

namespace {

struct WordCursor {
    const std::vector<std::string>& words;
    size_t pos = 0;
    bool at_end() const { return pos == words.size(); }
    bool peek(const std::string& w) const { return pos < words.size() && words[pos] == w; }
    bool take(const std::string& w) {
        if (!peek(w)) return false;
        ++pos;
        return true;
    }
};

bool is_shape_attr(const std::string& w) {
    return w == "circle" || w == "triangle" || w == "square";
}

// parses "<color> thing" | "<shape>" | "<color> <shape>"; empty on failure
std::vector<std::string> take_np(WordCursor& cur) {
    if (cur.at_end()) return {};
    const std::string first = cur.words[cur.pos];
    if (is_color_attr(first)) {
        cur.pos++;
        if (cur.take("thing")) return {first};
        if (!cur.at_end() && is_shape_attr(cur.words[cur.pos])) {
            std::string shape = cur.words[cur.pos++];
            return {first, shape};
        }
        return {};
    }
    if (is_shape_attr(first)) {
        cur.pos++;
        return {first};
    }
    return {};
}

std::string take_rel(WordCursor& cur) {
    for (const char* d : {"left", "right"}) {
        if (cur.peek(d)) {
            cur.pos++;
            if (!cur.take("of")) return "";
            return d;
        }
    }
    for (const char* d : {"above", "below"}) {
        if (cur.take(d)) return d;
    }
    return "";
}

}  // namespace

std::optional<grammar::Program> question_to_program(const std::vector<int>& question,
                                                    const grammar::ProgramVocab& pvocab,
                                                    const QuestionVocab& qvocab) {
    std::vector<std::string> words;
    words.reserve(question.size());
    for (int id : question) {
        if (id < 0 || id >= qvocab.size()) return std::nullopt;
        words.push_back(qvocab.words[id]);
    }
    WordCursor cur{words};

    bool expect_present = false;
    bool anything = false;
    if (cur.take("is")) {
        if (cur.take("there")) {
            anything = cur.take("anything");
            if (!anything && !cur.take("a")) return std::nullopt;
        } else {
            expect_present = true;  // "is a ... present" / "is anything ... present"
            anything = cur.take("anything");
            if (!anything && !cur.take("a")) return std::nullopt;
        }
    } else if (cur.take("do")) {
        if (!cur.take("you") || !cur.take("see")) return std::nullopt;
        anything = cur.take("anything");
        if (!anything && !cur.take("a")) return std::nullopt;
    } else {
        return std::nullopt;
    }

    std::vector<std::string> left_np;
    if (!anything) {
        left_np = take_np(cur);
        if (left_np.empty()) return std::nullopt;
    }
    std::string dir;
    std::vector<std::string> right_np;
    if (!cur.at_end() && !cur.peek("present")) {
        dir = take_rel(cur);
        if (dir.empty() || !cur.take("a")) return std::nullopt;
        right_np = take_np(cur);
        if (right_np.empty()) return std::nullopt;
    }
    if (expect_present && !cur.take("present")) return std::nullopt;
    if (!cur.at_end()) return std::nullopt;
    if (anything && right_np.empty()) return std::nullopt;

    auto find_id = [&](const std::string& attr) {
        return pvocab.token_id(str_cat("find[", attr, "]"));
    };
    auto transform_id = [&](const std::string& d) {
        return pvocab.token_id(str_cat("transform[", d, "]"));
    };
    const int answer_tok = pvocab.token_id("answer");
    const int and_tok = pvocab.token_id("and");

    grammar::Program p;
    if (anything) {
        p.tokens = {answer_tok, transform_id(dir), find_id(right_np[0])};
        return p;
    }
    if (right_np.empty()) {
        if (left_np.size() == 1) {
            p.tokens = {answer_tok, find_id(left_np[0])};
        } else {
            p.tokens = {answer_tok, and_tok, find_id(left_np[0]), find_id(left_np[1])};
        }
        return p;
    }
    std::vector<int> left_part;
    if (left_np.size() == 1) {
        left_part = {find_id(left_np[0])};
    } else {
        left_part = {and_tok, find_id(left_np[0]), find_id(left_np[1])};
    }
    std::vector<int> right_part;
    if (right_np.size() == 1) {
        right_part = {transform_id(dir), find_id(right_np[0])};
    } else {
        right_part = {transform_id(dir), and_tok, find_id(right_np[0]),
                      find_id(right_np[1])};
    }
    p.tokens = {answer_tok, and_tok};
    p.tokens.insert(p.tokens.end(), left_part.begin(), left_part.end());
    p.tokens.insert(p.tokens.end(), right_part.begin(), right_part.end());
    return p;
}

// ---- item generation --------------------------------------------------------

namespace {

grammar::Program sample_template_program(Rng& rng, const TemplateSet& templates,
                                         const grammar::ProgramVocab& v) {
    const TemplateKind kind = templates.kinds[rng.categorical(templates.weights)];
    const std::vector<std::string> all_attrs = {"red",    "green",    "blue",
                                                "circle", "triangle", "square"};
    const std::vector<std::string> colors = {"red", "green", "blue"};
    const std::vector<std::string> shapes = {"circle", "triangle", "square"};
    const std::vector<std::string> dirs = {"left", "right", "above", "below"};
    auto attr = [&](const std::vector<std::string>& pool) {
        return pool[rng.uniform_int(static_cast<int>(pool.size()))];
    };
    auto find_id = [&](const std::string& a) {
        return v.token_id(str_cat("find[", a, "]"));
    };
    auto transform_id = [&](const std::string& d) {
        return v.token_id(str_cat("transform[", d, "]"));
    };
    const int answer_tok = v.token_id("answer");
    const int and_tok = v.token_id("and");

    grammar::Program p;
    switch (kind) {
        case TemplateKind::Exists:
            p.tokens = {answer_tok, find_id(attr(all_attrs))};
            break;
        case TemplateKind::ExistsBoth:
            p.tokens = {answer_tok, and_tok, find_id(attr(colors)), find_id(attr(shapes))};
            break;
        case TemplateKind::Related:
            p.tokens = {answer_tok, and_tok, find_id(attr(all_attrs)),
                        transform_id(attr(dirs)), find_id(attr(all_attrs))};
            break;
        case TemplateKind::RelatedCompoundLeft:
            p.tokens = {answer_tok, and_tok, and_tok,
                        find_id(attr(colors)), find_id(attr(shapes)),
                        transform_id(attr(dirs)), find_id(attr(all_attrs))};
            break;
        case TemplateKind::RelatedCompoundRight:
            p.tokens = {answer_tok, and_tok, find_id(attr(all_attrs)),
                        transform_id(attr(dirs)), and_tok,
                        find_id(attr(colors)), find_id(attr(shapes))};
            break;
        case TemplateKind::RelatedAnything:
            p.tokens = {answer_tok, transform_id(attr(dirs)), find_id(attr(all_attrs))};
            break;
    }
    return p;
}

}  // namespace

QAItem generate_qa(const Scene& scene, Rng& rng, const TemplateSet& templates,
                   const grammar::ProgramVocab& pvocab, const QuestionVocab& qvocab) {
    check(!templates.kinds.empty(), "empty template set");
    const int target = rng.uniform01() < 0.5 ? kAnswerYes : kAnswerNo;
    grammar::Program program;
    int answer = kAnswerNo;
    for (int attempt = 0; attempt < 40; ++attempt) {
        program = sample_template_program(rng, templates, pvocab);
        answer = symbolic_execute(program, scene, pvocab).answer;
        if (answer == target) break;
    }
    QAItem item;
    item.gold_program = program;
    item.answer = answer;
    const int variant = rng.uniform_int(templates.surface_variants);
    item.question = program_to_question(program, pvocab, qvocab, variant);
    return item;
}

int Dataset::teaching_count() const {
    int n = 0;
    for (const QAItem& it : train) n += it.teaching;
    return n;
}

Dataset build_dataset(const DatasetConfig& config) {
    check(config.train_size >= 1 && config.val_size >= 1 && config.test_size >= 1,
          "dataset sizes must be >= 1");
    check(config.supervision_fraction > 0.0 && config.supervision_fraction <= 1.0,
          "supervision fraction must be in (0, 1], got ", config.supervision_fraction);

    Dataset ds;
    ds.config = config;
    ds.pvocab = grammar::ProgramVocab::shapes();
    ds.qvocab = QuestionVocab::shapes();
    ds.answers = kAnswerWords;
    const TemplateSet templates = TemplateSet::shapes();
    const Rng master(config.seed);

    std::unordered_set<uint64_t> train_hashes;
    int next_item_id = 0;
    auto make_split = [&](std::vector<QAItem>& split, int size, const char* tag,
                          bool avoid_train_scenes) {
        for (int i = 0; i < size; ++i) {
            Rng item_rng = master.derive(tag, static_cast<uint64_t>(i));
            Scene scene = sample_scene(item_rng, config.density);
            if (avoid_train_scenes) {
                for (int tries = 0; tries < 200 && train_hashes.count(scene.hash());
                     ++tries) {
                    scene = sample_scene(item_rng, config.density);
                }
            } else {
                train_hashes.insert(scene.hash());
            }
            QAItem item = generate_qa(scene, item_rng, templates, ds.pvocab, ds.qvocab);
            item.id = next_item_id++;
            item.scene_id = static_cast<int>(ds.scenes.size());
            ds.scenes.push_back(scene);
            split.push_back(std::move(item));
        }
    };
    make_split(ds.train, config.train_size, "train", false);
    make_split(ds.val, config.val_size, "val", true);
    make_split(ds.test, config.test_size, "test", true);

    // teaching flags: first N items after a shuffle
    const int n_teaching = static_cast<int>(
        std::ceil(config.supervision_fraction * config.train_size));
    std::vector<int> order(ds.train.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);
    Rng shuffle_rng = master.derive("teaching");
    for (int i = static_cast<int>(order.size()) - 1; i > 0; --i) {
        std::swap(order[i], order[shuffle_rng.uniform_int(i + 1)]);
    }
    for (int i = 0; i < n_teaching && i < static_cast<int>(order.size()); ++i) {
        ds.train[order[i]].teaching = true;
    }
    return ds;
}

}  // namespace lpvqa::world
