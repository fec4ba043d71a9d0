#include "ses/tensor.hpp"

#include "ses/error.hpp"

#include <algorithm>
#if defined(__GLIBC__)
#include <malloc.h>
#endif
#include <atomic>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>
#include <unordered_map>
#include <unordered_set>

namespace ses {

namespace {

thread_local bool g_grad_enabled = true;
std::atomic<bool> g_finite_checks{true};
std::atomic<std::uint64_t> g_node_counter{0};

}  // namespace

struct Tensor::Impl {
  Shape shape;
  Buffer data;
  bool requires_grad = false;
  Buffer grad;  // empty: no gradient accumulated
  std::shared_ptr<Node> grad_fn;
};

std::size_t numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto e : shape) n *= e;
  return n;
}

std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

static void check_shape(const Shape& shape) {
  for (auto e : shape)
    if (e == 0) throw ShapeError("tensor extents must be positive, got " + to_string(shape));
}

Tensor::Tensor(Shape shape, double fill) : impl_(std::make_shared<Impl>()) {
  check_shape(shape);
  impl_->data.assign(ses::numel(shape), fill);
  impl_->shape = std::move(shape);
}

Tensor::Tensor(Shape shape, Buffer values) : impl_(std::make_shared<Impl>()) {
  check_shape(shape);
  if (ses::numel(shape) != values.size())
    throw ShapeError("shape " + to_string(shape) + " does not match " +
                     std::to_string(values.size()) + " values");
  impl_->shape = std::move(shape);
  impl_->data = std::move(values);
}

Tensor::Tensor(Shape shape, const std::vector<double>& values)
    : Tensor(std::move(shape), Buffer(values.begin(), values.end())) {}

Tensor Tensor::randn(Shape shape, Rng& rng, double stddev) {
  Tensor t(std::move(shape));
  std::normal_distribution<double> dist(0.0, stddev);
  for (auto& v : t.impl_->data) v = dist(rng);
  return t;
}

Tensor Tensor::uniform(Shape shape, Rng& rng, double lo, double hi) {
  Tensor t(std::move(shape));
  std::uniform_real_distribution<double> dist(lo, hi);
  for (auto& v : t.impl_->data) v = dist(rng);
  return t;
}

const Shape& Tensor::shape() const {
  if (!impl_) throw ValueError("use of an undefined tensor");
  return impl_->shape;
}

std::size_t Tensor::size(std::size_t axis) const {
  const auto& s = shape();
  if (axis >= s.size())
    throw ShapeError("axis " + std::to_string(axis) + " out of range for " + to_string(s));
  return s[axis];
}

std::size_t Tensor::numel() const { return impl_ ? impl_->data.size() : 0; }

std::span<const double> Tensor::data() const {
  if (!impl_) throw ValueError("use of an undefined tensor");
  return impl_->data;
}

std::span<double> Tensor::mutable_data() {
  if (!impl_) throw ValueError("use of an undefined tensor");
  return impl_->data;
}

double Tensor::item() const {
  if (numel() != 1) throw ShapeError("item() on tensor of shape " + to_string(shape()));
  return impl_->data[0];
}

Eigen::Map<const Eigen::VectorXd> Tensor::vec() const {
  auto d = data();
  return {d.data(), static_cast<Eigen::Index>(d.size())};
}

Eigen::Map<Eigen::VectorXd> Tensor::mutable_vec() {
  auto d = mutable_data();
  return {d.data(), static_cast<Eigen::Index>(d.size())};
}

bool Tensor::requires_grad() const { return impl_ && impl_->requires_grad; }

Tensor& Tensor::set_requires_grad(bool on) {
  if (!impl_) throw ValueError("use of an undefined tensor");
  if (impl_->grad_fn && !on) throw ValueError("cannot clear requires_grad on a non-leaf tensor");
  impl_->requires_grad = on;
  return *this;
}

bool Tensor::is_leaf() const { return !impl_ || !impl_->grad_fn; }

const Node* Tensor::grad_fn() const { return impl_ ? impl_->grad_fn.get() : nullptr; }

bool Tensor::has_grad() const { return impl_ && !impl_->grad.empty(); }

Tensor Tensor::grad() const {
  if (!has_grad()) throw ValueError("tensor has no accumulated gradient");
  return Tensor(impl_->shape, impl_->grad);
}

std::span<const double> Tensor::grad_data() const {
  if (!impl_) return {};
  return impl_->grad;
}

void Tensor::zero_grad() {
  if (impl_) impl_->grad.clear();
}

Tensor Tensor::detach() const {
  if (!impl_) return {};
  return Tensor(impl_->shape, impl_->data);
}

Tensor Tensor::clone() const {
  Tensor t = detach();
  if (impl_ && impl_->requires_grad && !impl_->grad_fn) t.impl_->requires_grad = true;
  return t;
}

static void scan_finite(const Buffer& values, const char* op) {
  for (double v : values)
    if (!std::isfinite(v)) throw NumericError(std::string("non-finite value produced by ") + op);
}

Tensor Tensor::from_op(Shape shape, Buffer values, const char* op,
                       std::vector<Tensor> inputs, BackwardRule rule) {
  if (g_finite_checks.load(std::memory_order_relaxed)) scan_finite(values, op);
  Tensor out(std::move(shape), std::move(values));
  if (!g_grad_enabled) return out;
  bool any = std::any_of(inputs.begin(), inputs.end(),
                         [](const Tensor& t) { return t.requires_grad(); });
  if (!any) return out;
  auto node = std::make_shared<Node>();
  node->seq = g_node_counter.fetch_add(1, std::memory_order_relaxed);
  node->op = op;
  node->inputs = std::move(inputs);
  node->rule = std::move(rule);
  out.impl_->requires_grad = true;
  out.impl_->grad_fn = std::move(node);
  return out;
}

Tensor Tensor::reshape(Shape shape) const {
  if (ses::numel(shape) != numel())
    throw ShapeError("cannot reshape " + to_string(this->shape()) + " to " + to_string(shape));
  return from_op(std::move(shape), impl_->data, "reshape", {*this},
                 [](std::span<const double> g, GradSink& sink) {
                   auto gi = sink(0);
                   for (std::size_t i = 0; i < gi.size(); ++i) gi[i] += g[i];
                 });
}

class TapeSink final : public GradSink {
 public:
  TapeSink(const Node& node, std::unordered_map<const Node*, Buffer>& grads)
      : node_(node), grads_(grads) {}

  std::span<double> operator()(std::size_t input) override {
    const Tensor& t = node_.inputs.at(input);
    auto& impl = *t.impl_;
    if (impl.grad_fn) {
      auto& buf = grads_[impl.grad_fn.get()];
      if (buf.empty()) buf.assign(impl.data.size(), 0.0);
      return buf;
    }
    if (!impl.requires_grad) return {};
    if (impl.grad.empty()) impl.grad.assign(impl.data.size(), 0.0);
    return impl.grad;
  }

  bool wants(std::size_t input) const override {
    return node_.inputs.at(input).requires_grad();
  }

 private:
  const Node& node_;
  std::unordered_map<const Node*, Buffer>& grads_;
};

void Tensor::backward() const {
  if (!impl_) throw ValueError("backward on an undefined tensor");
  if (impl_->data.size() != 1)
    throw ShapeError("backward requires a scalar loss, got shape " + to_string(impl_->shape));
  if (!impl_->grad_fn) {
    if (!impl_->requires_grad) throw ValueError("loss does not depend on any tensor requiring grad");
    if (impl_->grad.empty()) impl_->grad.assign(1, 0.0);
    impl_->grad[0] += 1.0;
    return;
  }

  std::vector<const Node*> order;
  std::unordered_set<const Node*> seen;
  std::vector<const Node*> stack{impl_->grad_fn.get()};
  seen.insert(stack.back());
  while (!stack.empty()) {
    const Node* n = stack.back();
    stack.pop_back();
    order.push_back(n);
    for (const auto& in : n->inputs) {
      const Node* p = in.grad_fn();
      if (p && seen.insert(p).second) stack.push_back(p);
    }
  }
  std::sort(order.begin(), order.end(),
            [](const Node* a, const Node* b) { return a->seq > b->seq; });

  std::unordered_map<const Node*, Buffer> grads;
  grads[impl_->grad_fn.get()] = {1.0};
  for (const Node* n : order) {
    auto it = grads.find(n);
    if (it == grads.end()) continue;
    Buffer g = std::move(it->second);
    grads.erase(it);
    TapeSink sink(*n, grads);
    n->rule(g, sink);
  }
}

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

bool grad_enabled() { return g_grad_enabled; }

void set_finite_checks(bool on) { g_finite_checks.store(on); }
bool finite_checks() { return g_finite_checks.load(); }

// Serialization: "SEST", u32 rank, u64 extents, f64 values; all little-endian.

namespace {

constexpr char kMagic[4] = {'S', 'E', 'S', 'T'};

template <typename U>
void put_le(std::ostream& out, U value) {
  unsigned char bytes[sizeof(U)];
  for (std::size_t i = 0; i < sizeof(U); ++i) bytes[i] = static_cast<unsigned char>(value >> (8 * i));
  out.write(reinterpret_cast<const char*>(bytes), sizeof(U));
}

template <typename U>
U get_le(std::istream& in) {
  unsigned char bytes[sizeof(U)];
  if (!in.read(reinterpret_cast<char*>(bytes), sizeof(U))) throw IoError("truncated tensor record");
  U value = 0;
  for (std::size_t i = 0; i < sizeof(U); ++i) value |= static_cast<U>(bytes[i]) << (8 * i);
  return value;
}

}  // namespace

void save_tensor(std::ostream& out, const Tensor& t) {
  out.write(kMagic, 4);
  put_le<std::uint32_t>(out, static_cast<std::uint32_t>(t.rank()));
  for (auto e : t.shape()) put_le<std::uint64_t>(out, e);
  for (double v : t.data()) put_le<std::uint64_t>(out, std::bit_cast<std::uint64_t>(v));
  if (!out) throw IoError("failed writing tensor record");
}

Tensor load_tensor(std::istream& in) {
  char magic[4];
  if (!in.read(magic, 4)) throw IoError("truncated tensor record");
  if (std::memcmp(magic, kMagic, 4) != 0) throw IoError("bad tensor magic (expected SEST)");
  auto rank = get_le<std::uint32_t>(in);
  if (rank > 16) throw IoError("implausible tensor rank " + std::to_string(rank));
  Shape shape(rank);
  for (auto& e : shape) {
    e = static_cast<std::size_t>(get_le<std::uint64_t>(in));
    if (e == 0) throw IoError("zero extent in tensor record");
  }
  Buffer values(numel(shape));
  for (auto& v : values) v = std::bit_cast<double>(get_le<std::uint64_t>(in));
  return Tensor(std::move(shape), std::move(values));
}

void save_tensor(const std::string& path, const Tensor& t) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open " + path + " for writing");
  save_tensor(out, t);
}

Tensor load_tensor(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path);
  return load_tensor(in);
}

void retain_freed_memory() {
#if defined(__GLIBC__)
  mallopt(M_MMAP_MAX, 0);
  mallopt(M_TRIM_THRESHOLD, -1);
#endif
}

}  // namespace ses
