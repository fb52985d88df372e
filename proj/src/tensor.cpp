#include "lpvqa/tensor.hpp"

namespace lpvqa::ad {

std::string shape_str(const Shape& shape) {
    std::string s = "[";
    for (size_t i = 0; i < shape.size(); ++i) {
        if (i) s += ", ";
        s += std::to_string(shape[i]);
    }
    return s + "]";
}

Tensor::Tensor(Shape shape, double fill, bool requires_grad)
    : impl_(std::make_shared<TensorImpl>()) {
    for (int d : shape) check(d > 0, "non-positive extent in shape ", shape_str(shape));
    impl_->shape = std::move(shape);
    impl_->value.assign(static_cast<size_t>(numel_of(impl_->shape)), fill);
    impl_->requires_grad = requires_grad;
}

Tensor::Tensor(Shape shape, std::vector<double> values, bool requires_grad)
    : impl_(std::make_shared<TensorImpl>()) {
    for (int d : shape) check(d > 0, "non-positive extent in shape ", shape_str(shape));
    check(numel_of(shape) == static_cast<int64_t>(values.size()),
          "shape ", shape_str(shape), " does not match ", values.size(), " values");
    impl_->shape = std::move(shape);
    impl_->value = std::move(values);
    impl_->requires_grad = requires_grad;
}

std::vector<double>& Tensor::grad() {
    if (impl_->grad.empty()) impl_->grad.assign(impl_->value.size(), 0.0);
    return impl_->grad;
}

const std::vector<double>& Tensor::grad() const {
    check(!impl_->grad.empty(), "tensor has no gradient");
    return impl_->grad;
}

void append_params(ParamList& dst, const ParamList& src, const std::string& prefix) {
    for (const auto& [name, t] : src) {
        dst.emplace_back(prefix.empty() ? name : prefix + "." + name, t);
    }
}

}  // namespace lpvqa::ad
