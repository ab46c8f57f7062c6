#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "mkunet/tensor.hpp"

namespace mkunet {

template <typename Scalar>
struct Node {
  Tensor4<Scalar> value;
  std::optional<Tensor4<Scalar>> grad;
  bool requires_grad = false;
  const char* op = "leaf";
  std::vector<std::shared_ptr<Node>> inputs;
  // Reads `self.grad` and accumulates into the inputs' grad buffers.
  std::function<void(Node& self)> backward;

  [[nodiscard]] bool is_leaf() const { return !backward; }

  /// Gradient buffer, zero-initialised on first use.
  Tensor4<Scalar>& grad_buffer() {
    if (!grad) grad.emplace(value.shape());
    return *grad;
  }
};

/// Handle to a value on the define-by-run graph. Copies share the node.
template <typename Scalar>
class Var {
 public:
  Var() : node_(std::make_shared<Node<Scalar>>()) {}
  explicit Var(Tensor4<Scalar> value, bool requires_grad = false)
      : node_(std::make_shared<Node<Scalar>>()) {
    node_->value = std::move(value);
    node_->requires_grad = requires_grad;
  }
  explicit Var(std::shared_ptr<Node<Scalar>> node) : node_(std::move(node)) {}

  static Var parameter(Tensor4<Scalar> value) { return Var(std::move(value), true); }

  const Tensor4<Scalar>& value() const { return node_->value; }
  Tensor4<Scalar>& value() { return node_->value; }
  const Shape4& shape() const { return node_->value.shape(); }
  bool requires_grad() const { return node_->requires_grad; }
  bool has_grad() const { return node_->grad.has_value(); }
  const Tensor4<Scalar>& grad() const;
  Tensor4<Scalar>& grad_buffer() { return node_->grad_buffer(); }
  void zero_grad() { node_->grad.reset(); }

  const std::shared_ptr<Node<Scalar>>& node() const { return node_; }

 private:
  std::shared_ptr<Node<Scalar>> node_;
};

/// Grad recording is on by default; NoGradGuard disables it for the current
/// thread (inference, data preparation).
bool grad_enabled();

class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

/// Records one hash per non-smooth op (relu masks, pooling argmax) so a finite
/// difference probe can tell whether a perturbation crossed a kink.
class KinkRecorder {
 public:
  void record(std::uint64_t signature) { signatures_.push_back(signature); }
  const std::vector<std::uint64_t>& signatures() const { return signatures_; }
  void clear() { signatures_.clear(); }

 private:
  std::vector<std::uint64_t> signatures_;
};

KinkRecorder* active_kink_recorder();

class KinkRecordingScope {
 public:
  explicit KinkRecordingScope(KinkRecorder& rec);
  ~KinkRecordingScope();
  KinkRecordingScope(const KinkRecordingScope&) = delete;
  KinkRecordingScope& operator=(const KinkRecordingScope&) = delete;

 private:
  KinkRecorder* previous_;
};

/// FNV-1a over a boolean pattern; cheap enough to run on every kink op.
class PatternHash {
 public:
  void add(bool bit) { add_word(bit ? 1u : 0u); }
  void add_word(std::uint64_t v) {
    hash_ ^= v;
    hash_ *= 1099511628211ull;
  }
  std::uint64_t value() const { return hash_; }

 private:
  std::uint64_t hash_ = 14695981039346656037ull;
};

/// Builds the result node of an op. When no input requires grad (or grad mode
/// is off) the node is detached and `backward` is dropped.
template <typename Scalar>
Var<Scalar> make_result(Tensor4<Scalar> value, std::vector<Var<Scalar>> inputs, const char* op,
                        std::function<void(Node<Scalar>&)> backward);

/// Reverse topological order of the graph rooted at `root` (root first).
template <typename Scalar>
std::vector<Node<Scalar>*> tape_order(const Var<Scalar>& root);

/// Populates grads of every requires_grad leaf reachable from `loss`.
/// Leaf gradients accumulate across calls; intermediate grads are released.
template <typename Scalar>
void backward(const Var<Scalar>& loss);

/// Worker count used by batch-parallel kernels. Results do not depend on it:
/// every reduction runs in a fixed order.
void set_num_threads(int n);
int num_threads();
void parallel_for(Index count, const std::function<void(Index)>& body);

extern template class Var<float>;
extern template class Var<double>;

}  // namespace mkunet
