#include "mkunet/autograd.hpp"

#include <algorithm>
#include <thread>
#include <unordered_set>

namespace mkunet {

namespace {
thread_local bool g_grad_enabled = true;
thread_local KinkRecorder* g_kink_recorder = nullptr;
int g_num_threads = 1;
}  // namespace

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

KinkRecorder* active_kink_recorder() { return g_kink_recorder; }

KinkRecordingScope::KinkRecordingScope(KinkRecorder& rec) : previous_(g_kink_recorder) {
  g_kink_recorder = &rec;
}
KinkRecordingScope::~KinkRecordingScope() { g_kink_recorder = previous_; }

template <typename Scalar>
const Tensor4<Scalar>& Var<Scalar>::grad() const {
  if (!node_->grad) throw std::logic_error("gradient not populated");
  return *node_->grad;
}

template <typename Scalar>
Var<Scalar> make_result(Tensor4<Scalar> value, std::vector<Var<Scalar>> inputs, const char* op,
                        std::function<void(Node<Scalar>&)> backward) {
  auto node = std::make_shared<Node<Scalar>>();
  node->value = std::move(value);
  node->op = op;
  const bool needs = g_grad_enabled && std::any_of(inputs.begin(), inputs.end(),
                                                   [](const Var<Scalar>& v) {
                                                     return v.requires_grad();
                                                   });
  if (needs) {
    node->requires_grad = true;
    node->inputs.reserve(inputs.size());
    for (auto& in : inputs) node->inputs.push_back(in.node());
    node->backward = std::move(backward);
  }
  return Var<Scalar>(std::move(node));
}

template <typename Scalar>
std::vector<Node<Scalar>*> tape_order(const Var<Scalar>& root) {
  // Iterative post-order DFS gives a topological order (inputs first).
  std::vector<Node<Scalar>*> order;
  std::unordered_set<Node<Scalar>*> seen;
  std::vector<std::pair<Node<Scalar>*, std::size_t>> stack;
  stack.emplace_back(root.node().get(), 0);
  seen.insert(root.node().get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->inputs.size()) {
      Node<Scalar>* child = node->inputs[next++].get();
      if (child->requires_grad && seen.insert(child).second) stack.emplace_back(child, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  std::reverse(order.begin(), order.end());
  return order;
}

template <typename Scalar>
void backward(const Var<Scalar>& loss) {
  if (loss.shape() != Shape4{1, 1, 1, 1}) {
    throw ShapeError("backward requires a scalar (1,1,1,1) loss, got " + loss.shape().str());
  }
  if (!loss.requires_grad()) {
    throw std::logic_error("loss is detached from the tape (no input requires grad)");
  }
  auto order = tape_order(loss);
  for (auto* node : order) {
    if (!node->is_leaf()) node->grad.reset();
  }
  Node<Scalar>& root = *loss.node();
  if (root.is_leaf()) {
    root.grad_buffer()[0] += Scalar(1);
    return;
  }
  root.grad_buffer()[0] = Scalar(1);
  for (auto* node : order) {
    if (node->is_leaf()) continue;
    if (node->grad) node->backward(*node);
    node->grad.reset();
  }
}

void set_num_threads(int n) { g_num_threads = std::max(1, n); }
int num_threads() { return g_num_threads; }

void parallel_for(Index count, const std::function<void(Index)>& body) {
  const Index workers = std::min<Index>(g_num_threads, count);
  if (workers <= 1) {
    for (Index i = 0; i < count; ++i) body(i);
    return;
  }
  std::vector<std::thread> pool;
  pool.reserve(static_cast<std::size_t>(workers));
  for (Index t = 0; t < workers; ++t) {
    pool.emplace_back([&, t] {
      for (Index i = t; i < count; i += workers) body(i);
    });
  }
  for (auto& th : pool) th.join();
}

template class Var<float>;
template class Var<double>;
template Var<float> make_result(Tensor4<float>, std::vector<Var<float>>, const char*,
                                std::function<void(Node<float>&)>);
template Var<double> make_result(Tensor4<double>, std::vector<Var<double>>, const char*,
                                 std::function<void(Node<double>&)>);
template std::vector<Node<float>*> tape_order(const Var<float>&);
template std::vector<Node<double>*> tape_order(const Var<double>&);
template void backward(const Var<float>&);
template void backward(const Var<double>&);

}  // namespace mkunet
