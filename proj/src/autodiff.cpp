#include "lpvqa/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

namespace lpvqa::ad {

namespace {

bool g_finite_checks = true;
thread_local Tape* g_active_tape = nullptr;
thread_local int g_no_grad_depth = 0;

void check_finite(const Tensor& t, OpKind kind) {
    if (!g_finite_checks) return;
    for (double v : t.data()) {
        if (!std::isfinite(v)) {
            fail("non-finite value in output of ", op_name(kind));
        }
    }
}

int64_t outer_size(const Shape& s, int upto) {
    int64_t n = 1;
    for (int i = 0; i < upto; ++i) n *= s[i];
    return n;
}

}  // namespace

void set_finite_checks(bool on) { g_finite_checks = on; }
bool finite_checks_enabled() { return g_finite_checks; }

const char* op_name(OpKind kind) {
    switch (kind) {
        case OpKind::MatMul: return "matmul";
        case OpKind::Add: return "add";
        case OpKind::Mul: return "mul";
        case OpKind::Min: return "min";
        case OpKind::Sigmoid: return "sigmoid";
        case OpKind::Tanh: return "tanh";
        case OpKind::Relu: return "relu";
        case OpKind::Softmax: return "softmax";
        case OpKind::LogSoftmax: return "log_softmax";
        case OpKind::Embedding: return "embedding";
        case OpKind::Conv2d: return "conv2d";
        case OpKind::Pad2d: return "pad2d";
        case OpKind::SumAxis: return "sum_axis";
        case OpKind::MeanAxis: return "mean_axis";
        case OpKind::Concat: return "concat";
        case OpKind::Scale: return "scale";
        case OpKind::PickIndex: return "pick_index";
        case OpKind::SliceLast: return "slice_last";
        case OpKind::Reshape: return "reshape";
    }
    return "?";
}

// ---- tape -------------------------------------------------------------------

Tape::Tape() {
    previous_ = g_active_tape;
    g_active_tape = this;
}

Tape::~Tape() {
    g_active_tape = previous_;
}

Tape* Tape::active() { return g_active_tape; }

NoGradGuard::NoGradGuard() { ++g_no_grad_depth; }
NoGradGuard::~NoGradGuard() { --g_no_grad_depth; }

void record_node(TapeNode node) {
    g_active_tape->nodes_.push_back(std::move(node));
}

namespace {

bool should_record(std::initializer_list<const Tensor*> inputs) {
    if (g_active_tape == nullptr || g_no_grad_depth > 0) return false;
    for (const Tensor* t : inputs) {
        if (t->requires_grad()) return true;
    }
    return false;
}

void maybe_record(OpKind kind, std::initializer_list<const Tensor*> inputs, Tensor& out,
                  int axis = 0, int i0 = 0, int i1 = 0, double scalar = 0.0,
                  std::vector<int> indices = {}) {
    check_finite(out, kind);
    if (!should_record(inputs)) return;
    out.set_requires_grad(true);
    TapeNode node;
    node.kind = kind;
    for (const Tensor* t : inputs) node.inputs.push_back(*t);
    node.output = out;
    node.axis = axis;
    node.i0 = i0;
    node.i1 = i1;
    node.scalar = scalar;
    node.indices = std::move(indices);
    record_node(std::move(node));
}

}  // namespace

// ---- forward kernels ----------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
    check(a.rank() == 2 && b.rank() == 2, "matmul expects rank-2 inputs, got ",
          shape_str(a.shape()), " and ", shape_str(b.shape()));
    check(a.dim(1) == b.dim(0), "matmul inner extents differ: ", shape_str(a.shape()),
          " @ ", shape_str(b.shape()));
    const int m = a.dim(0), k = a.dim(1), n = b.dim(1);
    Tensor out({m, n});
    const double* pa = a.data().data();
    const double* pb = b.data().data();
    double* pc = out.data().data();
    for (int i = 0; i < m; ++i) {
        double* ci = pc + static_cast<int64_t>(i) * n;
        const double* ai = pa + static_cast<int64_t>(i) * k;
        for (int kk = 0; kk < k; ++kk) {
            const double av = ai[kk];
            const double* bk = pb + static_cast<int64_t>(kk) * n;
            for (int j = 0; j < n; ++j) ci[j] += av * bk[j];
        }
    }
    Tensor result = out;
    maybe_record(OpKind::MatMul, {&a, &b}, result);
    return result;
}

Tensor add(const Tensor& a, const Tensor& b) {
    // b's shape must equal a trailing suffix of a's shape
    check(b.rank() <= a.rank(), "add: second operand rank exceeds first: ",
          shape_str(a.shape()), " + ", shape_str(b.shape()));
    const int off = a.rank() - b.rank();
    for (int i = 0; i < b.rank(); ++i) {
        check(a.dim(off + i) == b.dim(i), "add: shape mismatch ", shape_str(a.shape()),
              " + ", shape_str(b.shape()));
    }
    Tensor out(a.shape());
    const int64_t nb = b.numel();
    const int64_t rep = a.numel() / nb;
    const double* pa = a.data().data();
    const double* pb = b.data().data();
    double* po = out.data().data();
    for (int64_t r = 0; r < rep; ++r) {
        const double* ar = pa + r * nb;
        double* orr = po + r * nb;
        for (int64_t i = 0; i < nb; ++i) orr[i] = ar[i] + pb[i];
    }
    maybe_record(OpKind::Add, {&a, &b}, out);
    return out;
}

namespace {

void check_same_shape(const Tensor& a, const Tensor& b, OpKind kind) {
    check(a.shape() == b.shape(), op_name(kind), ": shape mismatch ",
          shape_str(a.shape()), " vs ", shape_str(b.shape()));
}

}  // namespace

Tensor mul(const Tensor& a, const Tensor& b) {
    check_same_shape(a, b, OpKind::Mul);
    Tensor out(a.shape());
    const int64_t n = a.numel();
    for (int64_t i = 0; i < n; ++i) out.data()[i] = a.data()[i] * b.data()[i];
    maybe_record(OpKind::Mul, {&a, &b}, out);
    return out;
}

Tensor minimum(const Tensor& a, const Tensor& b) {
    check_same_shape(a, b, OpKind::Min);
    Tensor out(a.shape());
    const int64_t n = a.numel();
    for (int64_t i = 0; i < n; ++i) out.data()[i] = std::min(a.data()[i], b.data()[i]);
    maybe_record(OpKind::Min, {&a, &b}, out);
    return out;
}

Tensor sigmoid(const Tensor& x) {
    Tensor out(x.shape());
    const int64_t n = x.numel();
    for (int64_t i = 0; i < n; ++i) {
        const double v = x.data()[i];
        out.data()[i] = v >= 0.0 ? 1.0 / (1.0 + std::exp(-v))
                                 : std::exp(v) / (1.0 + std::exp(v));
    }
    maybe_record(OpKind::Sigmoid, {&x}, out);
    return out;
}

Tensor tanh_(const Tensor& x) {
    Tensor out(x.shape());
    const int64_t n = x.numel();
    for (int64_t i = 0; i < n; ++i) out.data()[i] = std::tanh(x.data()[i]);
    maybe_record(OpKind::Tanh, {&x}, out);
    return out;
}

Tensor relu(const Tensor& x) {
    Tensor out(x.shape());
    const int64_t n = x.numel();
    for (int64_t i = 0; i < n; ++i) out.data()[i] = std::max(0.0, x.data()[i]);
    maybe_record(OpKind::Relu, {&x}, out);
    return out;
}

namespace {

// softmax / log_softmax over the last axis with max-subtraction
void softmax_rows(const Tensor& x, Tensor& out, bool log_form) {
    const int k = x.shape().back();
    const int64_t rows = x.numel() / k;
    const double* px = x.data().data();
    double* po = out.data().data();
    for (int64_t r = 0; r < rows; ++r) {
        const double* xr = px + r * k;
        double* orr = po + r * k;
        double mx = xr[0];
        for (int i = 1; i < k; ++i) mx = std::max(mx, xr[i]);
        double sum = 0.0;
        for (int i = 0; i < k; ++i) {
            orr[i] = std::exp(xr[i] - mx);
            sum += orr[i];
        }
        if (log_form) {
            const double lse = std::log(sum) + mx;
            for (int i = 0; i < k; ++i) orr[i] = xr[i] - lse;
        } else {
            for (int i = 0; i < k; ++i) orr[i] /= sum;
        }
    }
}

}  // namespace

Tensor softmax(const Tensor& x) {
    Tensor out(x.shape());
    softmax_rows(x, out, false);
    maybe_record(OpKind::Softmax, {&x}, out);
    return out;
}

Tensor log_softmax(const Tensor& x) {
    Tensor out(x.shape());
    softmax_rows(x, out, true);
    maybe_record(OpKind::LogSoftmax, {&x}, out);
    return out;
}

Tensor embedding(const Tensor& table, const std::vector<int>& indices) {
    check(table.rank() == 2, "embedding table must be rank 2, got ", shape_str(table.shape()));
    const int v = table.dim(0), e = table.dim(1);
    const int n = static_cast<int>(indices.size());
    check(n > 0, "embedding: empty index list");
    for (int idx : indices) {
        check(idx >= 0 && idx < v, "embedding index ", idx, " out of range [0, ", v, ")");
    }
    Tensor out({n, e});
    for (int i = 0; i < n; ++i) {
        std::memcpy(out.data().data() + static_cast<int64_t>(i) * e,
                    table.data().data() + static_cast<int64_t>(indices[i]) * e,
                    sizeof(double) * e);
    }
    maybe_record(OpKind::Embedding, {&table}, out, 0, 0, 0, 0.0, indices);
    return out;
}

Tensor conv2d(const Tensor& input, const Tensor& kernel, int stride) {
    check(stride >= 1, "conv2d: stride must be >= 1, got ", stride);
    check(input.rank() == 3, "conv2d input must be [H, W, C], got ", shape_str(input.shape()));
    check(kernel.rank() == 4, "conv2d kernel must be [kh, kw, Ci, Co], got ",
          shape_str(kernel.shape()));
    const int h = input.dim(0), w = input.dim(1), ci = input.dim(2);
    const int kh = kernel.dim(0), kw = kernel.dim(1), co = kernel.dim(3);
    check(kernel.dim(2) == ci, "conv2d: input channels ", ci, " vs kernel ",
          kernel.dim(2), " (shapes ", shape_str(input.shape()), " and ",
          shape_str(kernel.shape()), ")");
    check(h >= kh && w >= kw, "conv2d: kernel ", shape_str(kernel.shape()),
          " larger than input ", shape_str(input.shape()));
    const int oh = (h - kh) / stride + 1;
    const int ow = (w - kw) / stride + 1;
    Tensor out({oh, ow, co});
    const double* pi = input.data().data();
    const double* pk = kernel.data().data();
    double* po = out.data().data();
    for (int oy = 0; oy < oh; ++oy) {
        for (int ox = 0; ox < ow; ++ox) {
            double* orow = po + (static_cast<int64_t>(oy) * ow + ox) * co;
            for (int u = 0; u < kh; ++u) {
                for (int v = 0; v < kw; ++v) {
                    const double* irow =
                        pi + ((static_cast<int64_t>(oy * stride + u) * w) + (ox * stride + v)) * ci;
                    const double* krow = pk + (static_cast<int64_t>(u) * kw + v) * ci * co;
                    for (int c = 0; c < ci; ++c) {
                        const double iv = irow[c];
                        const double* kc = krow + static_cast<int64_t>(c) * co;
                        for (int o = 0; o < co; ++o) orow[o] += iv * kc[o];
                    }
                }
            }
        }
    }
    Tensor result = out;
    maybe_record(OpKind::Conv2d, {&input, &kernel}, result, 0, stride);
    return result;
}

Tensor pad2d(const Tensor& input, int pad) {
    check(pad >= 0, "pad2d: negative pad ", pad);
    check(input.rank() == 3, "pad2d input must be [H, W, C], got ", shape_str(input.shape()));
    const int h = input.dim(0), w = input.dim(1), c = input.dim(2);
    Tensor out({h + 2 * pad, w + 2 * pad, c});
    const int ow = w + 2 * pad;
    for (int y = 0; y < h; ++y) {
        std::memcpy(out.data().data() + ((static_cast<int64_t>(y + pad) * ow) + pad) * c,
                    input.data().data() + static_cast<int64_t>(y) * w * c,
                    sizeof(double) * w * c);
    }
    maybe_record(OpKind::Pad2d, {&input}, out, 0, pad);
    return out;
}

Tensor sum_axis(const Tensor& x, int axis) {
    check(axis >= 0 && axis < x.rank(), "sum_axis: axis ", axis, " out of range for ",
          shape_str(x.shape()));
    Shape oshape = x.shape();
    oshape.erase(oshape.begin() + axis);
    if (oshape.empty()) oshape = {1};
    const int64_t outer = outer_size(x.shape(), axis);
    const int64_t extent = x.dim(axis);
    const int64_t inner = x.numel() / (outer * extent);
    Tensor out(oshape);
    const double* px = x.data().data();
    double* po = out.data().data();
    for (int64_t o = 0; o < outer; ++o) {
        for (int64_t e = 0; e < extent; ++e) {
            const double* src = px + (o * extent + e) * inner;
            double* dst = po + o * inner;
            for (int64_t i = 0; i < inner; ++i) dst[i] += src[i];
        }
    }
    maybe_record(OpKind::SumAxis, {&x}, out, axis);
    return out;
}

Tensor mean_axis(const Tensor& x, int axis) {
    check(axis >= 0 && axis < x.rank(), "mean_axis: axis ", axis, " out of range for ",
          shape_str(x.shape()));
    Tensor out = sum_axis(detach(x), axis);
    const double inv = 1.0 / x.dim(axis);
    for (double& v : out.data()) v *= inv;
    maybe_record(OpKind::MeanAxis, {&x}, out, axis);
    return out;
}

Tensor sum_all(const Tensor& x) {
    Tensor flat = reshape(x, {static_cast<int>(x.numel())});
    return sum_axis(flat, 0);
}

Tensor concat(const Tensor& a, const Tensor& b) {
    check(a.rank() == b.rank(), "concat: rank mismatch ", shape_str(a.shape()), " vs ",
          shape_str(b.shape()));
    for (int i = 0; i + 1 < a.rank(); ++i) {
        check(a.dim(i) == b.dim(i), "concat: leading shape mismatch ", shape_str(a.shape()),
              " vs ", shape_str(b.shape()));
    }
    const int ka = a.shape().back(), kb = b.shape().back();
    Shape oshape = a.shape();
    oshape.back() = ka + kb;
    Tensor out(oshape);
    const int64_t rows = a.numel() / ka;
    for (int64_t r = 0; r < rows; ++r) {
        std::memcpy(out.data().data() + r * (ka + kb), a.data().data() + r * ka,
                    sizeof(double) * ka);
        std::memcpy(out.data().data() + r * (ka + kb) + ka, b.data().data() + r * kb,
                    sizeof(double) * kb);
    }
    maybe_record(OpKind::Concat, {&a, &b}, out);
    return out;
}

Tensor scale(const Tensor& x, double factor) {
    check(std::isfinite(factor), "scale: non-finite factor");
    Tensor out(x.shape());
    const int64_t n = x.numel();
    for (int64_t i = 0; i < n; ++i) out.data()[i] = x.data()[i] * factor;
    maybe_record(OpKind::Scale, {&x}, out, 0, 0, 0, factor);
    return out;
}

Tensor pick_index(const Tensor& x, const std::vector<int>& indices) {
    check(x.rank() == 2, "pick_index expects [n, K], got ", shape_str(x.shape()));
    const int n = x.dim(0), k = x.dim(1);
    check(static_cast<int>(indices.size()) == n, "pick_index: ", indices.size(),
          " indices for ", n, " rows");
    for (int idx : indices) {
        check(idx >= 0 && idx < k, "pick_index: index ", idx, " out of range [0, ", k, ")");
    }
    Tensor out({n});
    for (int i = 0; i < n; ++i) {
        out.data()[i] = x.data()[static_cast<int64_t>(i) * k + indices[i]];
    }
    maybe_record(OpKind::PickIndex, {&x}, out, 0, 0, 0, 0.0, indices);
    return out;
}

Tensor slice_last(const Tensor& x, int offset, int len) {
    const int k = x.shape().back();
    check(offset >= 0 && len > 0 && offset + len <= k, "slice_last: range [", offset, ", ",
          offset + len, ") out of bounds for last extent ", k);
    Shape oshape = x.shape();
    oshape.back() = len;
    Tensor out(oshape);
    const int64_t rows = x.numel() / k;
    for (int64_t r = 0; r < rows; ++r) {
        std::memcpy(out.data().data() + r * len, x.data().data() + r * k + offset,
                    sizeof(double) * len);
    }
    maybe_record(OpKind::SliceLast, {&x}, out, 0, offset, len);
    return out;
}

Tensor reshape(const Tensor& x, Shape shape) {
    check(numel_of(shape) == x.numel(), "reshape: ", shape_str(x.shape()), " to ",
          shape_str(shape), " changes element count");
    Tensor out(shape, x.data());
    maybe_record(OpKind::Reshape, {&x}, out);
    return out;
}

Tensor detach(const Tensor& x) {
    return Tensor(x.shape(), x.data(), false);
}

// ---- backward -----------------------------------------------------------------

namespace {

// dst.grad += g  (allocating on first touch)
void accumulate(Tensor& t, const std::vector<double>& g) {
    auto& grad = t.grad();
    for (size_t i = 0; i < g.size(); ++i) grad[i] += g[i];
}

void backward_node(TapeNode& node) {
    const std::vector<double>& go = node.output.grad();
    switch (node.kind) {
        case OpKind::MatMul: {
            Tensor& a = node.inputs[0];
            Tensor& b = node.inputs[1];
            const int m = a.dim(0), k = a.dim(1), n = b.dim(1);
            if (a.requires_grad()) {
                auto& ga = a.grad();
                const double* pb = b.data().data();
                for (int i = 0; i < m; ++i) {
                    const double* gor = go.data() + static_cast<int64_t>(i) * n;
                    double* gar = ga.data() + static_cast<int64_t>(i) * k;
                    for (int kk = 0; kk < k; ++kk) {
                        const double* br = pb + static_cast<int64_t>(kk) * n;
                        double acc = 0.0;
                        for (int j = 0; j < n; ++j) acc += gor[j] * br[j];
                        gar[kk] += acc;
                    }
                }
            }
            if (b.requires_grad()) {
                auto& gb = b.grad();
                const double* pa = a.data().data();
                for (int i = 0; i < m; ++i) {
                    const double* ar = pa + static_cast<int64_t>(i) * k;
                    const double* gor = go.data() + static_cast<int64_t>(i) * n;
                    for (int kk = 0; kk < k; ++kk) {
                        const double av = ar[kk];
                        double* gbr = gb.data() + static_cast<int64_t>(kk) * n;
                        for (int j = 0; j < n; ++j) gbr[j] += av * gor[j];
                    }
                }
            }
            break;
        }
        case OpKind::Add: {
            Tensor& a = node.inputs[0];
            Tensor& b = node.inputs[1];
            if (a.requires_grad()) accumulate(a, go);
            if (b.requires_grad()) {
                auto& gb = b.grad();
                const int64_t nb = b.numel();
                const int64_t rep = a.numel() / nb;
                for (int64_t r = 0; r < rep; ++r) {
                    const double* src = go.data() + r * nb;
                    for (int64_t i = 0; i < nb; ++i) gb[i] += src[i];
                }
            }
            break;
        }
        case OpKind::Mul: {
            Tensor& a = node.inputs[0];
            Tensor& b = node.inputs[1];
            const int64_t n = a.numel();
            if (a.requires_grad()) {
                auto& ga = a.grad();
                for (int64_t i = 0; i < n; ++i) ga[i] += go[i] * b.data()[i];
            }
            if (b.requires_grad()) {
                auto& gb = b.grad();
                for (int64_t i = 0; i < n; ++i) gb[i] += go[i] * a.data()[i];
            }
            break;
        }
        case OpKind::Min: {
            Tensor& a = node.inputs[0];
            Tensor& b = node.inputs[1];
            const int64_t n = a.numel();
            // ties send the gradient to the first input
            if (a.requires_grad()) {
                auto& ga = a.grad();
                for (int64_t i = 0; i < n; ++i) {
                    if (a.data()[i] <= b.data()[i]) ga[i] += go[i];
                }
            }
            if (b.requires_grad()) {
                auto& gb = b.grad();
                for (int64_t i = 0; i < n; ++i) {
                    if (b.data()[i] < a.data()[i]) gb[i] += go[i];
                }
            }
            break;
        }
        case OpKind::Sigmoid: {
            Tensor& x = node.inputs[0];
            if (!x.requires_grad()) break;
            auto& gx = x.grad();
            const auto& y = node.output.data();
            const int64_t n = x.numel();
            for (int64_t i = 0; i < n; ++i) gx[i] += go[i] * y[i] * (1.0 - y[i]);
            break;
        }
        case OpKind::Tanh: {
            Tensor& x = node.inputs[0];
            if (!x.requires_grad()) break;
            auto& gx = x.grad();
            const auto& y = node.output.data();
            const int64_t n = x.numel();
            for (int64_t i = 0; i < n; ++i) gx[i] += go[i] * (1.0 - y[i] * y[i]);
            break;
        }
        case OpKind::Relu: {
            Tensor& x = node.inputs[0];
            if (!x.requires_grad()) break;
            auto& gx = x.grad();
            const int64_t n = x.numel();
            for (int64_t i = 0; i < n; ++i) {
                if (x.data()[i] > 0.0) gx[i] += go[i];
            }
            break;
        }
        case OpKind::Softmax: {
            Tensor& x = node.inputs[0];
            if (!x.requires_grad()) break;
            auto& gx = x.grad();
            const auto& y = node.output.data();
            const int k = x.shape().back();
            const int64_t rows = x.numel() / k;
            for (int64_t r = 0; r < rows; ++r) {
                const double* yr = y.data() + r * k;
                const double* gr = go.data() + r * k;
                double dot = 0.0;
                for (int i = 0; i < k; ++i) dot += yr[i] * gr[i];
                double* gxr = gx.data() + r * k;
                for (int i = 0; i < k; ++i) gxr[i] += yr[i] * (gr[i] - dot);
            }
            break;
        }
        case OpKind::LogSoftmax: {
            Tensor& x = node.inputs[0];
            if (!x.requires_grad()) break;
            auto& gx = x.grad();
            const auto& y = node.output.data();  // log-probabilities
            const int k = x.shape().back();
            const int64_t rows = x.numel() / k;
            for (int64_t r = 0; r < rows; ++r) {
                const double* yr = y.data() + r * k;
                const double* gr = go.data() + r * k;
                double gsum = 0.0;
                for (int i = 0; i < k; ++i) gsum += gr[i];
                double* gxr = gx.data() + r * k;
                for (int i = 0; i < k; ++i) gxr[i] += gr[i] - std::exp(yr[i]) * gsum;
            }
            break;
        }
        case OpKind::Embedding: {
            Tensor& table = node.inputs[0];
            if (!table.requires_grad()) break;
            auto& gt = table.grad();
            const int e = table.dim(1);
            for (size_t i = 0; i < node.indices.size(); ++i) {
                double* dst = gt.data() + static_cast<int64_t>(node.indices[i]) * e;
                const double* src = go.data() + static_cast<int64_t>(i) * e;
                for (int j = 0; j < e; ++j) dst[j] += src[j];
            }
            break;
        }
        case OpKind::Conv2d: {
            Tensor& input = node.inputs[0];
            Tensor& kernel = node.inputs[1];
            const int stride = node.i0;
            const int h = input.dim(0), w = input.dim(1), ci = input.dim(2);
            const int kh = kernel.dim(0), kw = kernel.dim(1), co = kernel.dim(3);
            const int oh = (h - kh) / stride + 1;
            const int ow = (w - kw) / stride + 1;
            const bool gi = input.requires_grad();
            const bool gk = kernel.requires_grad();
            double* pgi = gi ? input.grad().data() : nullptr;
            double* pgk = gk ? kernel.grad().data() : nullptr;
            const double* pin = input.data().data();
            const double* pk = kernel.data().data();
            for (int oy = 0; oy < oh; ++oy) {
                for (int ox = 0; ox < ow; ++ox) {
                    const double* gorow = go.data() + (static_cast<int64_t>(oy) * ow + ox) * co;
                    for (int u = 0; u < kh; ++u) {
                        for (int v = 0; v < kw; ++v) {
                            const int64_t ioff =
                                ((static_cast<int64_t>(oy * stride + u) * w) + (ox * stride + v)) * ci;
                            const int64_t koff = (static_cast<int64_t>(u) * kw + v) * ci * co;
                            for (int c = 0; c < ci; ++c) {
                                if (gi) {
                                    const double* kc = pk + koff + static_cast<int64_t>(c) * co;
                                    double acc = 0.0;
                                    for (int o = 0; o < co; ++o) acc += kc[o] * gorow[o];
                                    pgi[ioff + c] += acc;
                                }
                                if (gk) {
                                    const double iv = pin[ioff + c];
                                    double* gkc = pgk + koff + static_cast<int64_t>(c) * co;
                                    for (int o = 0; o < co; ++o) gkc[o] += iv * gorow[o];
                                }
                            }
                        }
                    }
                }
            }
            break;
        }
        case OpKind::Pad2d: {
            Tensor& input = node.inputs[0];
            if (!input.requires_grad()) break;
            auto& gx = input.grad();
            const int pad = node.i0;
            const int h = input.dim(0), w = input.dim(1), c = input.dim(2);
            const int ow = w + 2 * pad;
            for (int y = 0; y < h; ++y) {
                const double* src = go.data() + ((static_cast<int64_t>(y + pad) * ow) + pad) * c;
                double* dst = gx.data() + static_cast<int64_t>(y) * w * c;
                for (int i = 0; i < w * c; ++i) dst[i] += src[i];
            }
            break;
        }
        case OpKind::SumAxis:
        case OpKind::MeanAxis: {
            Tensor& x = node.inputs[0];
            if (!x.requires_grad()) break;
            auto& gx = x.grad();
            const int axis = node.axis;
            const int64_t outer = outer_size(x.shape(), axis);
            const int64_t extent = x.dim(axis);
            const int64_t inner = x.numel() / (outer * extent);
            const double f = node.kind == OpKind::MeanAxis ? 1.0 / static_cast<double>(extent) : 1.0;
            for (int64_t o = 0; o < outer; ++o) {
                const double* src = go.data() + o * inner;
                for (int64_t e = 0; e < extent; ++e) {
                    double* dst = gx.data() + (o * extent + e) * inner;
                    for (int64_t i = 0; i < inner; ++i) dst[i] += f * src[i];
                }
            }
            break;
        }
        case OpKind::Concat: {
            Tensor& a = node.inputs[0];
            Tensor& b = node.inputs[1];
            const int ka = a.shape().back(), kb = b.shape().back();
            const int64_t rows = a.numel() / ka;
            if (a.requires_grad()) {
                auto& ga = a.grad();
                for (int64_t r = 0; r < rows; ++r) {
                    const double* src = go.data() + r * (ka + kb);
                    for (int i = 0; i < ka; ++i) ga[r * ka + i] += src[i];
                }
            }
            if (b.requires_grad()) {
                auto& gb = b.grad();
                for (int64_t r = 0; r < rows; ++r) {
                    const double* src = go.data() + r * (ka + kb) + ka;
                    for (int i = 0; i < kb; ++i) gb[r * kb + i] += src[i];
                }
            }
            break;
        }
        case OpKind::Scale: {
            Tensor& x = node.inputs[0];
            if (!x.requires_grad()) break;
            auto& gx = x.grad();
            const int64_t n = x.numel();
            for (int64_t i = 0; i < n; ++i) gx[i] += node.scalar * go[i];
            break;
        }
        case OpKind::PickIndex: {
            Tensor& x = node.inputs[0];
            if (!x.requires_grad()) break;
            auto& gx = x.grad();
            const int k = x.dim(1);
            for (size_t i = 0; i < node.indices.size(); ++i) {
                gx[static_cast<int64_t>(i) * k + node.indices[i]] += go[i];
            }
            break;
        }
        case OpKind::SliceLast: {
            Tensor& x = node.inputs[0];
            if (!x.requires_grad()) break;
            auto& gx = x.grad();
            const int k = x.shape().back();
            const int offset = node.i0, len = node.i1;
            const int64_t rows = x.numel() / k;
            for (int64_t r = 0; r < rows; ++r) {
                const double* src = go.data() + r * len;
                double* dst = gx.data() + r * k + offset;
                for (int i = 0; i < len; ++i) dst[i] += src[i];
            }
            break;
        }
        case OpKind::Reshape: {
            Tensor& x = node.inputs[0];
            if (!x.requires_grad()) break;
            accumulate(x, go);
            break;
        }
    }
}

}  // namespace

void Tape::backward(const Tensor& loss) {
    check(!consumed_, "tape already consumed by a previous backward pass");
    check(loss.is_scalar(), "backward expects a scalar loss, got shape ",
          shape_str(loss.shape()));
    bool found = false;
    for (const TapeNode& n : nodes_) {
        if (n.output.same_as(loss)) {
            found = true;
            break;
        }
    }
    check(found, "loss tensor was not produced on this tape");
    consumed_ = true;
    {
        Tensor seed = loss;  // shared handle; grad() needs non-const access
        seed.grad()[0] += 1.0;
    }
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
        if (!it->output.has_grad()) continue;  // not on the path to the loss
        backward_node(*it);
    }
}

// ---- Adam ----------------------------------------------------------------------

Adam::Adam(ParamList params, double lr, double beta1, double beta2, double eps)
    : params_(std::move(params)), lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {
    m_.resize(params_.size());
    v_.resize(params_.size());
    for (size_t i = 0; i < params_.size(); ++i) {
        const size_t n = params_[i].second.data().size();
        m_[i].assign(n, 0.0);
        v_[i].assign(n, 0.0);
    }
}

void Adam::step() {
    ++t_;
    const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
    for (size_t p = 0; p < params_.size(); ++p) {
        Tensor& t = params_[p].second;
        check(t.has_grad(), "adam: parameter '", params_[p].first, "' has no gradient");
        auto& g = t.grad();
        auto& val = t.data();
        auto& m = m_[p];
        auto& v = v_[p];
        for (size_t i = 0; i < val.size(); ++i) {
            const double gi = g[i];
            if (!std::isfinite(gi)) {
                fail("adam: non-finite gradient in parameter '", params_[p].first, "'");
            }
            m[i] = beta1_ * m[i] + (1.0 - beta1_) * gi;
            v[i] = beta2_ * v[i] + (1.0 - beta2_) * gi * gi;
            const double mhat = m[i] / bc1;
            const double vhat = v[i] / bc2;
            val[i] -= lr_ * mhat / (std::sqrt(vhat) + eps_);
        }
        t.zero_grad();
    }
}

// ---- gradient check -------------------------------------------------------------

GradCheckReport gradient_check(const std::function<Tensor(const Tensor&)>& f, Tensor point,
                               double h, double rtol, int64_t max_coords) {
    check(h > 0.0, "gradient_check: step must be positive");
    GradCheckReport report;

    point.set_requires_grad(true);
    point.zero_grad();
    std::vector<double> analytic;
    {
        Tape tape;
        Tensor loss = f(point);
        check(loss.is_scalar(), "gradient_check: f must be scalar-valued, got shape ",
              shape_str(loss.shape()));
        // a relu evaluated near zero or a min near a tie makes finite
        // differences non-comparable at this point
        const double kink_tol = 10.0 * h;
        for (const TapeNode& n : tape.nodes()) {
            if (n.kind == OpKind::Relu) {
                for (double v : n.inputs[0].data()) {
                    if (std::abs(v) <= kink_tol) report.comparable = false;
                }
            } else if (n.kind == OpKind::Min) {
                const auto& a = n.inputs[0].data();
                const auto& b = n.inputs[1].data();
                for (size_t i = 0; i < a.size(); ++i) {
                    if (std::abs(a[i] - b[i]) <= kink_tol) report.comparable = false;
                }
            }
        }
        tape.backward(loss);
        analytic = point.grad();
    }
    point.zero_grad();

    auto eval = [&] {
        Tensor y = f(point);  // no tape active: pure forward
        return y.item();
    };
    const double denom_floor = rtol > 0.0 ? 1e-7 / rtol : 1e-3;
    const int64_t total = point.numel();
    std::vector<int64_t> coords;
    if (max_coords <= 0 || max_coords >= total) {
        coords.resize(total);
        for (int64_t i = 0; i < total; ++i) coords[i] = i;
    } else {
        coords.reserve(max_coords);
        for (int64_t j = 0; j < max_coords; ++j) {
            coords.push_back(j * total / max_coords);
        }
    }
    for (int64_t i : coords) {
        const double saved = point.data()[i];
        point.data()[i] = saved + h;
        const double fp = eval();
        point.data()[i] = saved - h;
        const double fm = eval();
        point.data()[i] = saved;
        const double numeric = (fp - fm) / (2.0 * h);
        const double denom = std::max({std::abs(analytic[i]), std::abs(numeric), denom_floor});
        const double rel = std::abs(analytic[i] - numeric) / denom;
        if (rel > report.max_rel_err) {
            report.max_rel_err = rel;
            report.worst_index = i;
        }
        ++report.coords_checked;
    }
    report.pass = !report.comparable || report.max_rel_err <= rtol;
    return report;
}

}  // namespace lpvqa::ad
