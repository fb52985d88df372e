#pragma once

#include <memory>
#include <string>
#include <vector>

#include "lpvqa/common.hpp"

namespace lpvqa::ad {

using Shape = std::vector<int>;

inline int64_t numel_of(const Shape& shape) {
    int64_t n = 1;
    for (int d : shape) n *= d;
    return n;
}

std::string shape_str(const Shape& shape);

struct TensorImpl {
    Shape shape;
    std::vector<double> value;
    std::vector<double> grad;  // empty until backward touches this tensor
    bool requires_grad = false;
};

/// Dense float64 tensor, row-major. Cheap shared handle; ops produce new
/// tensors and record themselves on the active tape when gradients are needed.
class Tensor {
public:
    Tensor() = default;
    Tensor(Shape shape, double fill = 0.0, bool requires_grad = false);
    Tensor(Shape shape, std::vector<double> values, bool requires_grad = false);

    static Tensor scalar(double v, bool requires_grad = false) {
        return Tensor({1}, {v}, requires_grad);
    }

    bool defined() const { return impl_ != nullptr; }
    const Shape& shape() const { return impl_->shape; }
    int dim(int i) const { return impl_->shape[i]; }
    int rank() const { return static_cast<int>(impl_->shape.size()); }
    int64_t numel() const { return static_cast<int64_t>(impl_->value.size()); }
    bool is_scalar() const { return numel() == 1; }

    std::vector<double>& data() { return impl_->value; }
    const std::vector<double>& data() const { return impl_->value; }
    double item() const {
        check(is_scalar(), "item() on non-scalar tensor of shape ", shape_str(shape()));
        return impl_->value[0];
    }

    bool requires_grad() const { return impl_->requires_grad; }
    void set_requires_grad(bool b) { impl_->requires_grad = b; }

    bool has_grad() const { return !impl_->grad.empty(); }
    std::vector<double>& grad();              // allocates zeros on first use
    const std::vector<double>& grad() const;  // fails if absent
    void zero_grad() { impl_->grad.clear(); }

    /// Identity comparison (same storage).
    bool same_as(const Tensor& other) const { return impl_ == other.impl_; }
    const TensorImpl* id() const { return impl_.get(); }

private:
    std::shared_ptr<TensorImpl> impl_;
};

/// Named parameter list; the unit the optimizer and checkpoints work with.
using ParamList = std::vector<std::pair<std::string, Tensor>>;

void append_params(ParamList& dst, const ParamList& src, const std::string& prefix = "");

}  // namespace lpvqa::ad
