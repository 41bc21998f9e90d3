#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "attdrive/errors.hpp"
#include "attdrive/geometry.hpp"

namespace attdrive::nn {

class Tape;

// Dense double tensor. Data layout is row-major over dims(); for image-like
// tensors the convention throughout the project is dims {W, H, C} with flat
// index (x*H + y)*C + c. Copies are shallow (shared storage).
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::vector<int> dims, bool requires_grad = false);

  static Tensor zeros(std::vector<int> dims) { return Tensor(std::move(dims)); }
  static Tensor from(std::vector<int> dims, std::span<const double> values);
  // Wraps externally owned storage (e.g. a ParameterStore slice). The owner
  // must outlive the view.
  static Tensor view(std::vector<int> dims, double* data, double* grad);

  const std::vector<int>& dims() const { return dims_; }
  int dim(int i) const { return dims_[static_cast<std::size_t>(i)]; }
  std::size_t size() const { return size_; }
  bool defined() const { return data_ != nullptr; }
  bool requires_grad() const { return requires_grad_; }

  std::span<double> data() { return {data_.get(), size_}; }
  std::span<const double> data() const { return {data_.get(), size_}; }
  double value() const;  // scalar tensors only

  // Gradient buffer; allocated lazily (zero-filled) on first access.
  std::span<double> grad();
  bool grad_allocated() const { return grad_ != nullptr; }
  void zero_grad();

  double& operator[](std::size_t i) { return data_.get()[i]; }
  double operator[](std::size_t i) const { return data_.get()[i]; }

  // {W,H,C} indexing helper.
  static std::size_t at3(int H, int C, int x, int y, int c) {
    return (static_cast<std::size_t>(x) * H + y) * C + c;
  }

 private:
  friend class Tape;
  std::vector<int> dims_;
  std::size_t size_ = 0;
  std::shared_ptr<double[]> data_;
  std::shared_ptr<double[]> grad_;
  bool requires_grad_ = false;

  // Tape bookkeeping: which node of which tape produced/registered this
  // tensor. Mutable so recording can intern const inputs; recording is
  // single-writer by contract, so this is not a data race in practice.
  mutable std::uint64_t tape_id_ = 0;
  mutable int node_ = -1;
};

enum class Activation { none, relu };

enum class Op {
  leaf,
  conv2d,
  dense,
  row_dense,
  softmax,
  tanh_act,
  weighted_sum,
  mse,
  roi_pool,
};

// Reverse-mode tape. Ops append nodes in execution order; backward() walks
// nodes in reverse, so the topological order is by construction. A null Tape*
// passed to any op runs pure inference (no recording, thread-safe on frozen
// parameters).
class Tape {
 public:
  Tape();
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  // Seeds d(loss)/d(loss) = seed and accumulates into the grad() buffers of
  // every reachable requires-grad leaf. Unreachable leaves are untouched
  // (their lazily allocated grads read as exact zeros). `loss` must be a
  // scalar recorded on this tape.
  void backward(const Tensor& loss, double seed = 1.0);

  std::size_t node_count() const { return nodes_.size(); }

 private:
  struct Node {
    Op op = Op::leaf;
    int a = -1, b = -1, c = -1;   // input node ids
    Tensor out;                   // forward result (leaf: the user tensor)
    std::vector<double> grad;     // d(loss)/d(out), filled during backward
    bool needs_grad = false;      // some requires-grad leaf feeds this node

    // Op payloads.
    int stride = 0;
    Activation act = Activation::none;
    std::vector<double> saved;       // conv2d: im2col matrix of the input
    std::vector<std::int32_t> arg;   // roi_pool: per-output argmax flat index
    std::vector<Rect> rects;         // roi_pool: projected rects
  };

  int use(const Tensor& t);  // interns t as a leaf if not already recorded
  Tensor push(Node n);   // appends and returns the registered output tensor
  std::span<double> grad_of(int node);
  void backward_node(Node& n);

  std::uint64_t id_ = 0;
  std::vector<Node> nodes_;

  friend Tensor conv2d(Tape*, const Tensor&, const Tensor&, const Tensor&,
                       int, Activation);
  friend Tensor dense(Tape*, const Tensor&, const Tensor&, const Tensor&,
                      Activation);
  friend Tensor row_dense(Tape*, const Tensor&, const Tensor&, const Tensor&);
  friend Tensor softmax(Tape*, const Tensor&);
  friend Tensor tanh_act(Tape*, const Tensor&);
  friend Tensor weighted_sum(Tape*, const Tensor&, const Tensor&);
  friend Tensor mse_loss(Tape*, const Tensor&, const Tensor&);
  friend Tensor roi_pool_cells(Tape*, const Tensor&, std::span<const Rect>);
};

// Valid-padding 2D convolution. input {W,H,Cin}; kernels {K,K,Cin,Cout}
// (flat index ((kx*K+ky)*Cin+ci)*Cout+co); bias {Cout}. Output
// {W',H',Cout} with W' = (W-K)/stride + 1 (floor), rejecting W < K.
Tensor conv2d(Tape* tape, const Tensor& input, const Tensor& kernels,
              const Tensor& bias, int stride, Activation act);

// y = x*W + b on the flattened input; W is {In, Out} row-major, b {Out}.
Tensor dense(Tape* tape, const Tensor& input, const Tensor& weight,
             const Tensor& bias, Activation act);

// One shared linear scorer applied to each row: rows {R, D} -> {R};
// out[r] = rows[r,:] . w + b. w {D}, b {1}.
Tensor row_dense(Tape* tape, const Tensor& rows, const Tensor& weight,
                 const Tensor& bias);

// Numerically stable softmax over the whole (flattened) tensor.
Tensor softmax(Tape* tape, const Tensor& logits);

Tensor tanh_act(Tape* tape, const Tensor& input);

// rows {R, D}, weights {R} -> {D}: out = sum_r weights[r] * rows[r,:].
Tensor weighted_sum(Tape* tape, const Tensor& rows, const Tensor& weights);

// Sum of squared differences ||a - b||^2 (scalar). b is typically a
// no-grad target leaf.
Tensor mse_loss(Tape* tape, const Tensor& predicted, const Tensor& target);

// Max-pools each rect of the feature map {W,H,C} into a 4x4 spatial grid of
// bins -> output {R, 16*C} with flat index r*(16*C) + (bx*4+by)*C + c.
// Bin edges: for an extent of n cells split into 4 bins, bin i covers
// [floor(i*n/4), ceil((i+1)*n/4)) -- never empty, repeating source cells
// when n < 4. Gradients route to each argmax cell; ties resolve to the
// lowest flat input index (scan order x asc, then y asc, strict >).
Tensor roi_pool_cells(Tape* tape, const Tensor& fmap,
                      std::span<const Rect> rects);

// ---------------------------------------------------------------------------

// Flat parameter/gradient arena. Individual layer tensors are views into it,
// so the optimizer can treat the whole model as one vector. Usage: declare()
// every parameter, then finalize() once, then take view()s.
class ParameterStore {
 public:
  struct Entry {
    std::string name;
    std::vector<int> dims;
    std::size_t offset = 0;
    std::size_t size = 0;
  };

  void declare(const std::string& name, std::vector<int> dims);
  void finalize();

  std::span<double> values() { return values_; }
  std::span<const double> values() const { return values_; }
  std::span<double> grads() { return grads_; }
  std::span<const double> grads() const { return grads_; }
  void zero_grads();
  std::size_t size() const { return values_.size(); }

  const std::vector<Entry>& entries() const { return entries_; }
  const Entry& entry(const std::string& name) const;
  Tensor view(const std::string& name);

 private:
  bool finalized_ = false;
  std::vector<Entry> entries_;
  std::vector<double> values_;
  std::vector<double> grads_;
};

// ---------------------------------------------------------------------------

struct AdamState {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  std::int64_t step_count = 0;
  std::vector<double> m;
  std::vector<double> v;
};

// One Adam update with bias correction. Throws NumericError on any
// non-finite gradient, leaving params and state untouched.
void adam_step(std::span<double> params, std::span<const double> grads,
               AdamState& state);

// ---------------------------------------------------------------------------

struct FiniteDiffOptions {
  double epsilon = 1e-5;     // must lie in [1e-7, 1e-4]
  int samples = 20;          // coordinates probed (<= params.size())
  std::uint64_t seed = 0;
};

// Central-difference check of `analytic` (d f / d params) at the current
// params. f() must be deterministic (checked by evaluating twice) and must
// not itself mutate params. Returns the max over sampled coordinates of
// |analytic - central_difference| / max(1, |analytic|); params are restored
// bit-exactly.
double finite_diff_check(const std::function<double()>& f,
                         std::span<double> params,
                         std::span<const double> analytic,
                         const FiniteDiffOptions& opt = {});

}  // namespace attdrive::nn
