#pragma once

#include <functional>
#include <optional>

#include "lpvqa/tensor.hpp"

namespace lpvqa::ad {

/// Toggles finite-value checks at op boundaries. On by default; training
/// configs can turn it off for speed.
void set_finite_checks(bool on);
bool finite_checks_enabled();

enum class OpKind {
    MatMul,
    Add,        // broadcast over leading axes: [..., S] + [S]
    Mul,        // elementwise, same shape
    Min,        // elementwise, same shape; ties route gradient to the first input
    Sigmoid,
    Tanh,
    Relu,
    Softmax,     // last axis
    LogSoftmax,  // last axis
    Embedding,   // table [V, E] gathered by integer indices -> [n, E]
    Conv2d,      // input [H, W, Ci], kernel [kh, kw, Ci, Co], valid padding
    Pad2d,       // zero border of width p on the two spatial axes of [H, W, C]
    SumAxis,
    MeanAxis,
    Concat,     // along last axis
    Scale,      // multiply by a constant scalar
    PickIndex,  // rows [n, K] gathered at per-row index -> [n]; the NLL gather
    SliceLast,  // contiguous [offset, offset+len) range of the last axis
    Reshape,
};

const char* op_name(OpKind kind);

struct TapeNode {
    OpKind kind;
    std::vector<Tensor> inputs;
    Tensor output;
    // op attributes; meaning depends on kind
    int axis = 0;
    int i0 = 0, i1 = 0;           // stride / offset / pad width
    double scalar = 0.0;          // Scale factor
    std::vector<int> indices;     // Embedding / PickIndex
};

/// Records primitive applications for one backward pass. Constructing a tape
/// activates it for the current thread; destruction (or end of scope)
/// deactivates it. One backward per tape; reuse is an error.
class Tape {
public:
    Tape();
    ~Tape();
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    /// Accumulates d loss / d input into every requires_grad tensor reachable
    /// from `loss` on this tape.
    void backward(const Tensor& loss);

    size_t size() const { return nodes_.size(); }
    bool consumed() const { return consumed_; }
    const std::vector<TapeNode>& nodes() const { return nodes_; }

    static Tape* active();

private:
    friend void record_node(TapeNode node);
    std::vector<TapeNode> nodes_;
    bool consumed_ = false;
    Tape* previous_ = nullptr;
};

/// Suppresses tape recording within its scope; forward evaluation stays pure
/// even while a tape is active.
class NoGradGuard {
public:
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;
};

// ---- primitives ----------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor add(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor minimum(const Tensor& a, const Tensor& b);
Tensor sigmoid(const Tensor& x);
Tensor tanh_(const Tensor& x);
Tensor relu(const Tensor& x);
Tensor softmax(const Tensor& x);
Tensor log_softmax(const Tensor& x);
Tensor embedding(const Tensor& table, const std::vector<int>& indices);
Tensor conv2d(const Tensor& input, const Tensor& kernel, int stride);
Tensor pad2d(const Tensor& input, int pad);
Tensor sum_axis(const Tensor& x, int axis);
Tensor mean_axis(const Tensor& x, int axis);
Tensor sum_all(const Tensor& x);
Tensor concat(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& x, double factor);
Tensor pick_index(const Tensor& x, const std::vector<int>& indices);
Tensor slice_last(const Tensor& x, int offset, int len);
Tensor reshape(const Tensor& x, Shape shape);

/// Constant (no-grad) tensor sharing no storage with `x`, holding its values.
Tensor detach(const Tensor& x);

// ---- optimizer ------------------------------------------------------------

/// ADAM with bias correction. Moment buffers are keyed by position in the
/// parameter list handed to the constructor.
class Adam {
public:
    explicit Adam(ParamList params, double lr = 1e-3, double beta1 = 0.9,
                  double beta2 = 0.999, double eps = 1e-8);

    /// One update. Every parameter must hold a finite gradient; grads are
    /// zeroed afterwards.
    void step();

    void set_lr(double lr) { lr_ = lr; }
    double lr() const { return lr_; }
    int64_t t() const { return t_; }

private:
    ParamList params_;
    std::vector<std::vector<double>> m_, v_;
    double lr_, beta1_, beta2_, eps_;
    int64_t t_ = 0;
};

// ---- gradient checking -----------------------------------------------------

struct GradCheckReport {
    double max_rel_err = 0.0;
    bool pass = false;
    /// False when the forward pass went through a kink (relu at zero, min at a
    /// tie) where finite differences are not comparable to the tape gradient.
    bool comparable = true;
    int64_t worst_index = -1;
    int64_t coords_checked = 0;
};

/// Compares the tape gradient of scalar-valued `f` at `point` against central
/// finite differences with step `h`. With max_coords > 0, checks an evenly
/// strided subset of coordinates instead of all of them.
GradCheckReport gradient_check(const std::function<Tensor(const Tensor&)>& f,
                               Tensor point, double h = 1e-5, double rtol = 1e-4,
                               int64_t max_coords = 0);

}  // namespace lpvqa::ad
