#pragma once

#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <new>
#include <string_view>
#include <variant>
#include <vector>

namespace diat {

/// Thrown when operand shapes do not satisfy an op's contract.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Thrown when a non-finite value is produced while anomaly detection is on,
/// or when a caller asks for a value that is not finite.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class DType : std::uint8_t { f32 = 0, f64 = 1 };

std::string_view dtype_name(DType dt);

template <class T>
constexpr DType dtype_of();
template <>
constexpr DType dtype_of<float>() { return DType::f32; }
template <>
constexpr DType dtype_of<double>() { return DType::f64; }

/// Calls `fn.template operator()<T>()` with T matching the runtime dtype.
template <class Fn>
decltype(auto) dispatch(DType dt, Fn&& fn) {
  if (dt == DType::f32) return fn.template operator()<float>();
  return fn.template operator()<double>();
}

/// Ordered list of positive extents, rank 0..4. Rank 0 is a scalar.
class Shape {
 public:
  Shape() = default;
  Shape(std::initializer_list<std::int64_t> dims);
  explicit Shape(std::vector<std::int64_t> dims);

  std::size_t rank() const { return dims_.size(); }
  std::int64_t operator[](std::size_t i) const { return dims_.at(i); }
  std::int64_t numel() const;
  const std::vector<std::int64_t>& dims() const { return dims_; }
  std::string str() const;

  bool operator==(const Shape&) const = default;

 private:
  void validate() const;
  std::vector<std::int64_t> dims_;
};

/// 64-byte aligned storage. Vectorized kernels peel a scalar prologue up to
/// the first aligned element, so the summation order (and the last bits of
/// the result) would otherwise depend on where the heap put a buffer.
template <class T>
struct AlignedAllocator {
  using value_type = T;
  static constexpr std::align_val_t kAlign{64};
  AlignedAllocator() = default;
  template <class U>
  AlignedAllocator(const AlignedAllocator<U>&) noexcept {}
  T* allocate(std::size_t n) { return static_cast<T*>(::operator new(n * sizeof(T), kAlign)); }
  void deallocate(T* p, std::size_t) noexcept { ::operator delete(p, kAlign); }
  template <class U>
  bool operator==(const AlignedAllocator<U>&) const noexcept {
    return true;
  }
};

template <class T>
using AlignedVector = std::vector<T, AlignedAllocator<T>>;

namespace detail {
using Buffer = std::variant<AlignedVector<float>, AlignedVector<double>>;
struct TensorImpl;
}  // namespace detail

/// Dense array handle with shared storage. Copies alias the same tensor;
/// values are treated as immutable once an op has consumed them, except for
/// parameter updates performed by an optimizer.
class Tensor {
 public:
  Tensor() = default;
  Tensor(Shape shape, std::vector<float> values);
  Tensor(Shape shape, std::vector<double> values);
  Tensor(Shape shape, AlignedVector<float> values);
  Tensor(Shape shape, AlignedVector<double> values);

  static Tensor zeros(const Shape& shape, DType dt = DType::f32);
  static Tensor full(const Shape& shape, double value, DType dt = DType::f32);
  static Tensor scalar(double value, DType dt = DType::f32);
  /// Converts `values` to `dt`.
  static Tensor from(const Shape& shape, std::span<const double> values,
                     DType dt = DType::f32);

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const;
  DType dtype() const;
  std::int64_t numel() const { return shape().numel(); }
  std::size_t rank() const { return shape().rank(); }

  template <class T>
  std::span<const T> data() const;
  template <class T>
  std::span<T> mutable_data();

  /// Element i converted to double.
  double at(std::int64_t i) const;
  /// Value of a one-element tensor.
  double item() const;
  std::vector<double> to_vector() const;

  bool requires_grad() const;
  /// Marks a leaf as trainable. Returns *this for chaining.
  Tensor& set_requires_grad(bool on);

  bool has_grad() const;
  /// Gradient as a tensor aliasing the grad buffer; undefined if none.
  Tensor grad() const;
  template <class T>
  std::span<T> grad_data();
  /// Zero-filled grad buffer, allocated if missing.
  template <class T>
  std::span<T> ensure_grad();
  void zero_grad();
  void clear_grad();

  /// New tensor sharing storage, without gradient tracking.
  Tensor detach() const;
  /// Deep copy of the values (no grad, not trainable).
  Tensor clone() const;
  /// Converted copy; returns a deep copy even if dt matches.
  Tensor to(DType dt) const;
  /// Storage-sharing view with a different shape of equal numel.
  Tensor view(const Shape& shape) const;

  bool all_finite() const;
  bool same_storage(const Tensor& other) const;

 private:
  friend class GradTape;
  friend struct TensorAccess;
  std::shared_ptr<detail::TensorImpl> impl_;
};

/// Backward rule: receives d(root)/d(output) and accumulates into inputs.
using BackwardFn = std::function<void(const Tensor& grad_output)>;

/// Records differentiable ops issued on this thread while alive. Tapes nest
/// and must be destroyed in reverse order of construction.
class GradTape {
 public:
  GradTape();
  ~GradTape();
  GradTape(const GradTape&) = delete;
  GradTape& operator=(const GradTape&) = delete;

  /// Seeds d(root)/d(root)=1 and replays recorded ops in reverse. Grads are
  /// summed into every requires_grad tensor reachable from root. Consumes the
  /// tape.
  void backward(const Tensor& root);
  void reset();
  std::size_t size() const { return entries_.size(); }

  static GradTape* active();
  void record(std::vector<Tensor> inputs, Tensor output, BackwardFn fn);

 private:
  struct Entry {
    std::vector<Tensor> inputs;
    Tensor output;
    BackwardFn fn;
  };
  std::vector<Entry> entries_;
  GradTape* previous_ = nullptr;
  bool active_ = true;
};

/// Suspends recording on this thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  GradTape* saved_;
};

/// When enabled, every op output is checked and a NumericError is thrown on
/// the first NaN/Inf. Thread-local.
void set_anomaly_detection(bool on);
bool anomaly_detection();

namespace detail {

/// Wraps an op result: marks it as requiring grad and records `fn` when a
/// tape is active and any input requires grad.
Tensor finish(Tensor out, std::vector<Tensor> inputs, BackwardFn fn);

/// Runs `fn(grad span)` if `t` requires grad, allocating a zero grad first.
template <class T, class Fn>
void accumulate(Tensor t, Fn&& fn) {
  if (!t.requires_grad()) return;
  fn(t.ensure_grad<T>());
}

}  // namespace detail

}  // namespace diat
