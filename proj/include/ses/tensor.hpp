#pragma once

#include <Eigen/Core>

#include <cstddef>
#include <cstdint>
#include <functional>
#include <iosfwd>
#include <memory>
#include <new>
#include <random>
#include <span>
#include <string>
#include <vector>

namespace ses {

using Shape = std::vector<std::size_t>;
using Rng = std::mt19937_64;

/// Hands out 64-byte aligned blocks. Vectorised loops split off a scalar head
/// up to the first aligned address, so a fixed base alignment keeps results
/// bit-identical no matter where a buffer lands in memory.
template <typename T>
struct AlignedAllocator {
  using value_type = T;
  static constexpr std::align_val_t alignment{64};

  AlignedAllocator() = default;
  template <typename U>
  AlignedAllocator(const AlignedAllocator<U>&) noexcept {}

  T* allocate(std::size_t n) { return static_cast<T*>(::operator new(n * sizeof(T), alignment)); }
  void deallocate(T* p, std::size_t n) noexcept { ::operator delete(p, n * sizeof(T), alignment); }

  template <typename U>
  bool operator==(const AlignedAllocator<U>&) const noexcept {
    return true;
  }
};

/// Storage of tensor values and gradients.
using Buffer = std::vector<double, AlignedAllocator<double>>;

std::size_t numel(const Shape& shape);
std::string to_string(const Shape& shape);

class Tensor;
struct Node;

/// Hands a backward rule the gradient buffers of its inputs. Buffers are
/// zero-initialised on first request and rules must accumulate (+=) into them.
class GradSink {
 public:
  virtual ~GradSink() = default;
  /// Empty span when the input does not take part in differentiation.
  virtual std::span<double> operator()(std::size_t input) = 0;
  virtual bool wants(std::size_t input) const = 0;
};

using BackwardRule = std::function<void(std::span<const double> grad_out, GradSink& sink)>;

/// One recorded operation. Nodes are numbered in creation order, which is a
/// topological order of the graph.
struct Node {
  std::uint64_t seq = 0;
  const char* op = "";
  std::vector<Tensor> inputs;
  BackwardRule rule;
};

/// Dense row-major array of doubles with optional reverse-mode gradient
/// tracking. Copies share storage; use clone() for a deep copy.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, double fill = 0.0);
  Tensor(Shape shape, Buffer values);
  /// Copies the values into aligned storage.
  Tensor(Shape shape, const std::vector<double>& values);

  static Tensor zeros(Shape shape) { return Tensor(std::move(shape), 0.0); }
  static Tensor ones(Shape shape) { return Tensor(std::move(shape), 1.0); }
  static Tensor scalar(double value) { return Tensor(Shape{}, value); }
  static Tensor randn(Shape shape, Rng& rng, double stddev = 1.0);
  static Tensor uniform(Shape shape, Rng& rng, double lo, double hi);

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const;
  std::size_t rank() const { return shape().size(); }
  std::size_t size(std::size_t axis) const;
  std::size_t numel() const;

  std::span<const double> data() const;
  /// Writable storage. Reserved for leaves (initialisation, optimizer steps).
  std::span<double> mutable_data();
  double item() const;
  double at(std::size_t flat) const { return data()[flat]; }

  Eigen::Map<const Eigen::VectorXd> vec() const;
  Eigen::Map<Eigen::VectorXd> mutable_vec();

  bool requires_grad() const;
  Tensor& set_requires_grad(bool on = true);
  bool is_leaf() const;
  const Node* grad_fn() const;

  bool has_grad() const;
  /// Copy of the accumulated gradient; throws when none has been accumulated.
  Tensor grad() const;
  std::span<const double> grad_data() const;
  void zero_grad();

  /// Reverse sweep from a scalar. Gradients accumulate into every leaf that
  /// requires them; calling twice without zero_grad adds twice.
  void backward() const;

  /// Same values, no history, no gradient tracking.
  Tensor detach() const;
  Tensor clone() const;
  Tensor reshape(Shape shape) const;

  bool same_storage(const Tensor& other) const { return impl_ == other.impl_; }

  /// Builds an op result. Records a node when grad mode is on and any input
  /// requires grad; otherwise the rule is discarded.
  static Tensor from_op(Shape shape, Buffer values, const char* op,
                        std::vector<Tensor> inputs, BackwardRule rule);

 private:
  struct Impl;
  std::shared_ptr<Impl> impl_;
  friend class TapeSink;
};

/// Disables graph recording on this thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

bool grad_enabled();

/// Keeps freed memory in the heap instead of handing it back to the OS, so
/// the large per-step temporaries are reused without fresh page faults.
/// Call once at program start. No effect outside glibc.
void retain_freed_memory();

/// When on (the default), every op result is scanned and a NumericError is
/// raised on the first NaN or infinity.
void set_finite_checks(bool on);
bool finite_checks();

void save_tensor(std::ostream& out, const Tensor& t);
Tensor load_tensor(std::istream& in);
void save_tensor(const std::string& path, const Tensor& t);
Tensor load_tensor(const std::string& path);

}  // namespace ses
