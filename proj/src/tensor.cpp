#include "diat/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace diat {

namespace detail {
struct TensorImpl {
  Shape shape;
  DType dtype = DType::f32;
  std::shared_ptr<Buffer> data;
  std::shared_ptr<Buffer> grad;
  bool requires_grad = false;
};
}  // namespace detail

namespace {

thread_local GradTape* g_active_tape = nullptr;
thread_local bool g_anomaly = false;

template <class T>
AlignedVector<T>& buf(detail::Buffer& b) {
  return std::get<AlignedVector<T>>(b);
}

template <class T>
const AlignedVector<T>& buf(const detail::Buffer& b) {
  return std::get<AlignedVector<T>>(b);
}

detail::Buffer zero_buffer(DType dt, std::int64_t n) {
  if (dt == DType::f32) return AlignedVector<float>(static_cast<std::size_t>(n), 0.0f);
  return AlignedVector<double>(static_cast<std::size_t>(n), 0.0);
}

}  // namespace

std::string_view dtype_name(DType dt) { return dt == DType::f32 ? "f32" : "f64"; }

Shape::Shape(std::initializer_list<std::int64_t> dims) : dims_(dims) { validate(); }

Shape::Shape(std::vector<std::int64_t> dims) : dims_(std::move(dims)) { validate(); }

void Shape::validate() const {
  if (dims_.size() > 4) throw ShapeError("tensor rank exceeds 4: " + str());
  for (auto d : dims_)
    if (d <= 0) throw ShapeError("tensor extents must be positive: " + str());
}

std::int64_t Shape::numel() const {
  std::int64_t n = 1;
  for (auto d : dims_) n *= d;
  return n;
}

std::string Shape::str() const {
  if (dims_.empty()) return "scalar";
  std::ostringstream os;
  for (std::size_t i = 0; i < dims_.size(); ++i) os << (i ? "x" : "") << dims_[i];
  return os.str();
}

namespace {

template <class T>
std::shared_ptr<detail::TensorImpl> make_impl(Shape shape, AlignedVector<T> values) {
  if (static_cast<std::int64_t>(values.size()) != shape.numel())
    throw ShapeError("value count " + std::to_string(values.size()) + " does not match shape " +
                     shape.str());
  auto impl = std::make_shared<detail::TensorImpl>();
  impl->shape = std::move(shape);
  impl->dtype = std::is_same_v<T, float> ? DType::f32 : DType::f64;
  impl->data = std::make_shared<detail::Buffer>(std::move(values));
  return impl;
}

}  // namespace

Tensor::Tensor(Shape shape, std::vector<float> values)
    : impl_(make_impl(std::move(shape), AlignedVector<float>(values.begin(), values.end()))) {}
Tensor::Tensor(Shape shape, std::vector<double> values)
    : impl_(make_impl(std::move(shape), AlignedVector<double>(values.begin(), values.end()))) {}
Tensor::Tensor(Shape shape, AlignedVector<float> values) : impl_(make_impl(std::move(shape), std::move(values))) {}
Tensor::Tensor(Shape shape, AlignedVector<double> values) : impl_(make_impl(std::move(shape), std::move(values))) {}

Tensor Tensor::zeros(const Shape& shape, DType dt) { return full(shape, 0.0, dt); }

Tensor Tensor::full(const Shape& shape, double value, DType dt) {
  const auto n = static_cast<std::size_t>(shape.numel());
  if (dt == DType::f32) return Tensor(shape, AlignedVector<float>(n, static_cast<float>(value)));
  return Tensor(shape, AlignedVector<double>(n, value));
}

Tensor Tensor::scalar(double value, DType dt) { return full(Shape{}, value, dt); }

Tensor Tensor::from(const Shape& shape, std::span<const double> values, DType dt) {
  if (dt == DType::f64) return Tensor(shape, AlignedVector<double>(values.begin(), values.end()));
  AlignedVector<float> v(values.size());
  std::transform(values.begin(), values.end(), v.begin(),
                 [](double x) { return static_cast<float>(x); });
  return Tensor(shape, std::move(v));
}

const Shape& Tensor::shape() const {
  if (!impl_) throw std::logic_error("undefined tensor");
  return impl_->shape;
}

DType Tensor::dtype() const {
  if (!impl_) throw std::logic_error("undefined tensor");
  return impl_->dtype;
}

template <class T>
std::span<const T> Tensor::data() const {
  if (dtype() != dtype_of<T>())
    throw std::logic_error("dtype mismatch: tensor is " + std::string(dtype_name(dtype())));
  return buf<T>(*impl_->data);
}

template <class T>
std::span<T> Tensor::mutable_data() {
  if (dtype() != dtype_of<T>())
    throw std::logic_error("dtype mismatch: tensor is " + std::string(dtype_name(dtype())));
  return buf<T>(*impl_->data);
}

template std::span<const float> Tensor::data<float>() const;
template std::span<const double> Tensor::data<double>() const;
template std::span<float> Tensor::mutable_data<float>();
template std::span<double> Tensor::mutable_data<double>();

double Tensor::at(std::int64_t i) const {
  return dispatch(dtype(), [&]<class T>() { return static_cast<double>(data<T>()[static_cast<std::size_t>(i)]); });
}

double Tensor::item() const {
  if (numel() != 1) throw ShapeError("item() requires a one-element tensor, got " + shape().str());
  return at(0);
}

std::vector<double> Tensor::to_vector() const {
  return dispatch(dtype(), [&]<class T>() {
    auto d = data<T>();
    return std::vector<double>(d.begin(), d.end());
  });
}

bool Tensor::requires_grad() const { return impl_ && impl_->requires_grad; }

Tensor& Tensor::set_requires_grad(bool on) {
  shape();
  impl_->requires_grad = on;
  return *this;
}

bool Tensor::has_grad() const { return impl_ && impl_->grad; }

Tensor Tensor::grad() const {
  if (!has_grad()) return {};
  Tensor g;
  g.impl_ = std::make_shared<detail::TensorImpl>();
  g.impl_->shape = impl_->shape;
  g.impl_->dtype = impl_->dtype;
  g.impl_->data = impl_->grad;
  return g;
}

template <class T>
std::span<T> Tensor::grad_data() {
  if (!has_grad()) return {};
  if (dtype() != dtype_of<T>()) throw std::logic_error("dtype mismatch on grad access");
  return buf<T>(*impl_->grad);
}

template <class T>
std::span<T> Tensor::ensure_grad() {
  if (dtype() != dtype_of<T>()) throw std::logic_error("dtype mismatch on grad access");
  if (!impl_->grad) impl_->grad = std::make_shared<detail::Buffer>(zero_buffer(dtype(), numel()));
  return buf<T>(*impl_->grad);
}

template std::span<float> Tensor::grad_data<float>();
template std::span<double> Tensor::grad_data<double>();
template std::span<float> Tensor::ensure_grad<float>();
template std::span<double> Tensor::ensure_grad<double>();

void Tensor::zero_grad() {
  if (!has_grad()) return;
  dispatch(dtype(), [&]<class T>() {
    auto g = grad_data<T>();
    std::fill(g.begin(), g.end(), T(0));
  });
}

void Tensor::clear_grad() {
  if (impl_) impl_->grad.reset();
}

Tensor Tensor::detach() const {
  Tensor t;
  t.impl_ = std::make_shared<detail::TensorImpl>();
  t.impl_->shape = shape();
  t.impl_->dtype = dtype();
  t.impl_->data = impl_->data;
  return t;
}

Tensor Tensor::clone() const {
  Tensor t;
  t.impl_ = std::make_shared<detail::TensorImpl>();
  t.impl_->shape = shape();
  t.impl_->dtype = dtype();
  t.impl_->data = std::make_shared<detail::Buffer>(*impl_->data);
  return t;
}

Tensor Tensor::to(DType dt) const {
  if (dt == dtype()) return clone();
  auto v = to_vector();
  return from(shape(), v, dt);
}

Tensor Tensor::view(const Shape& s) const {
  if (s.numel() != numel())
    throw ShapeError("cannot view " + shape().str() + " as " + s.str());
  Tensor t;
  t.impl_ = std::make_shared<detail::TensorImpl>(*impl_);
  t.impl_->shape = s;
  t.impl_->grad.reset();
  t.impl_->requires_grad = false;
  return t;
}

bool Tensor::all_finite() const {
  return dispatch(dtype(), [&]<class T>() {
    auto d = data<T>();
    return std::all_of(d.begin(), d.end(), [](T v) { return std::isfinite(v); });
  });
}

bool Tensor::same_storage(const Tensor& other) const {
  return impl_ && other.impl_ && impl_->data == other.impl_->data;
}

GradTape::GradTape() : previous_(g_active_tape) { g_active_tape = this; }

GradTape::~GradTape() {
  if (g_active_tape == this) g_active_tape = previous_;
}

GradTape* GradTape::active() { return g_active_tape; }

void GradTape::record(std::vector<Tensor> inputs, Tensor output, BackwardFn fn) {
  entries_.push_back(Entry{std::move(inputs), std::move(output), std::move(fn)});
}

void GradTape::reset() { entries_.clear(); }

void GradTape::backward(const Tensor& root) {
  if (!root.defined()) throw std::invalid_argument("backward: undefined root");
  if (root.numel() != 1 || root.rank() > 1)
    throw ShapeError("backward: root must be a scalar, got " + root.shape().str());
  if (!root.requires_grad())
    throw std::invalid_argument("backward: root is not connected to any trainable tensor");

  Tensor r = root;
  dispatch(r.dtype(), [&]<class T>() { r.ensure_grad<T>()[0] += T(1); });

  for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) {
    if (!it->output.has_grad()) continue;
    it->fn(it->output.grad());
  }
  entries_.clear();
}

NoGradGuard::NoGradGuard() : saved_(g_active_tape) { g_active_tape = nullptr; }

NoGradGuard::~NoGradGuard() { g_active_tape = saved_; }

void set_anomaly_detection(bool on) { g_anomaly = on; }
bool anomaly_detection() { return g_anomaly; }

namespace detail {

Tensor finish(Tensor out, std::vector<Tensor> inputs, BackwardFn fn) {
  if (g_anomaly && !out.all_finite()) throw NumericError("non-finite value produced by op");
  GradTape* tape = g_active_tape;
  if (!tape) return out;
  const bool needs =
      std::any_of(inputs.begin(), inputs.end(), [](const Tensor& t) { return t.requires_grad(); });
  if (!needs) return out;
  out.set_requires_grad(true);
  tape->record(std::move(inputs), out, std::move(fn));
  return out;
}

}  // namespace detail

}  // namespace diat
