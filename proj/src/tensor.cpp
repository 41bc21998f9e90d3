#include "attdrive/tensor.hpp"

#include "attdrive/rng.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstring>
#include <limits>
#include <unordered_set>

namespace attdrive::nn {

namespace {

using MatRM =
    Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapM = Eigen::Map<MatRM>;
using MapCM = Eigen::Map<const MatRM>;
using MapV = Eigen::Map<Eigen::VectorXd>;
using MapCV = Eigen::Map<const Eigen::VectorXd>;

std::size_t product(const std::vector<int>& dims) {
  std::size_t n = 1;
  for (int d : dims) {
    if (d <= 0) throw ShapeError("tensor dims must be positive");
    n *= static_cast<std::size_t>(d);
  }
  return n;
}

std::string dims_str(const std::vector<int>& dims) {
  std::string s = "{";
  for (std::size_t i = 0; i < dims.size(); ++i)
    s += (i ? "," : "") + std::to_string(dims[i]);
  return s + "}";
}

}  // namespace

// --------------------------------------------------------------- Tensor ----

Tensor::Tensor(std::vector<int> dims, bool requires_grad)
    : dims_(std::move(dims)),
      size_(product(dims_)),
      data_(new double[size_]()),
      requires_grad_(requires_grad) {
  // Allocate the grad buffer up front so every shallow copy (in particular
  // the tape's leaf registration) shares it.
  if (requires_grad_) grad_ = std::shared_ptr<double[]>(new double[size_]());
}

Tensor Tensor::from(std::vector<int> dims, std::span<const double> values) {
  Tensor t(std::move(dims));
  if (values.size() != t.size_)
    throw ShapeError("Tensor::from: " + std::to_string(values.size()) +
                     " values for shape " + dims_str(t.dims_));
  std::copy(values.begin(), values.end(), t.data_.get());
  return t;
}

Tensor Tensor::view(std::vector<int> dims, double* data, double* grad) {
  Tensor t;
  t.dims_ = std::move(dims);
  t.size_ = product(t.dims_);
  t.data_ = std::shared_ptr<double[]>(std::shared_ptr<double[]>{}, data);
  if (grad)
    t.grad_ = std::shared_ptr<double[]>(std::shared_ptr<double[]>{}, grad);
  t.requires_grad_ = grad != nullptr;
  return t;
}

double Tensor::value() const {
  if (size_ != 1)
    throw ShapeError("Tensor::value: tensor " + dims_str(dims_) +
                     " is not scalar");
  return data_.get()[0];
}

std::span<double> Tensor::grad() {
  if (!grad_) grad_ = std::shared_ptr<double[]>(new double[size_]());
  return {grad_.get(), size_};
}

void Tensor::zero_grad() {
  if (grad_) std::fill_n(grad_.get(), size_, 0.0);
}

// ----------------------------------------------------------------- Tape ----

namespace {
std::atomic<std::uint64_t> g_tape_counter{1};
}

Tape::Tape() : id_(g_tape_counter.fetch_add(1)) {}

int Tape::use(const Tensor& t) {
  if (!t.defined()) throw ShapeError("op input tensor is undefined");
  if (t.tape_id_ == id_ && t.node_ >= 0 &&
      static_cast<std::size_t>(t.node_) < nodes_.size())
    return t.node_;
  Node n;
  n.op = Op::leaf;
  n.out = t;  // shares storage, including the grad buffer
  n.needs_grad = t.requires_grad();
  nodes_.push_back(std::move(n));
  const int id = static_cast<int>(nodes_.size()) - 1;
  t.tape_id_ = id_;
  t.node_ = id;
  return id;
}

Tensor Tape::push(Node n) {
  for (int in : {n.a, n.b, n.c})
    if (in >= 0 && nodes_[static_cast<std::size_t>(in)].needs_grad)
      n.needs_grad = true;
  n.out.tape_id_ = id_;
  n.out.node_ = static_cast<int>(nodes_.size());
  nodes_.push_back(std::move(n));
  return nodes_.back().out;
}

std::span<double> Tape::grad_of(int node) {
  Node& n = nodes_[static_cast<std::size_t>(node)];
  if (n.op == Op::leaf) return n.out.grad();
  if (n.grad.empty()) n.grad.assign(n.out.size(), 0.0);
  return n.grad;
}

void Tape::backward(const Tensor& loss, double seed) {
  if (loss.tape_id_ != id_ || loss.node_ < 0 ||
      static_cast<std::size_t>(loss.node_) >= nodes_.size())
    throw ShapeError("backward: loss tensor was not recorded on this tape");
  if (loss.size() != 1) throw ShapeError("backward: loss must be scalar");
  const int root = loss.node_;
  {
    auto g = grad_of(root);
    g[0] += seed;
  }
  for (int j = root; j >= 0; --j) {
    Node& n = nodes_[static_cast<std::size_t>(j)];
    if (!n.needs_grad || n.op == Op::leaf) continue;
    if (n.grad.empty()) continue;  // not on the path to the loss
    backward_node(n);
  }
}

// ------------------------------------------------------------- conv2d ------

namespace {

// Fills `col` (rows = outW*outH, cols = K*K*Cin; row index ox*outH + oy,
// col index (kx*K + ky)*Cin + ci) from input {W,H,Cin}.
void im2col(std::span<const double> in, int /*W*/, int H, int C, int K,
            int stride, int outW, int outH, std::vector<double>& col) {
  const std::size_t cols = static_cast<std::size_t>(K) * K * C;
  col.resize(static_cast<std::size_t>(outW) * outH * cols);
  double* dst = col.data();
  for (int ox = 0; ox < outW; ++ox)
    for (int oy = 0; oy < outH; ++oy)
      for (int kx = 0; kx < K; ++kx) {
        const int x = ox * stride + kx;
        const double* src =
            in.data() +
            (static_cast<std::size_t>(x) * H + oy * stride) * C;
        for (int ky = 0; ky < K; ++ky) {
          std::memcpy(dst, src + static_cast<std::size_t>(ky) * C,
                      sizeof(double) * static_cast<std::size_t>(C));
          dst += C;
        }
      }
}

}  // namespace

Tensor conv2d(Tape* tape, const Tensor& input, const Tensor& kernels,
              const Tensor& bias, int stride, Activation act) {
  if (input.dims().size() != 3)
    throw ShapeError("conv2d: input must be {W,H,C}, got " +
                     dims_str(input.dims()));
  if (kernels.dims().size() != 4 || kernels.dim(0) != kernels.dim(1))
    throw ShapeError("conv2d: kernels must be {K,K,Cin,Cout}, got " +
                     dims_str(kernels.dims()));
  const int W = input.dim(0), H = input.dim(1), Cin = input.dim(2);
  const int K = kernels.dim(0), Cout = kernels.dim(3);
  if (kernels.dim(2) != Cin)
    throw ShapeError("conv2d: kernel Cin " + std::to_string(kernels.dim(2)) +
                     " != input C " + std::to_string(Cin));
  if (bias.size() != static_cast<std::size_t>(Cout))
    throw ShapeError("conv2d: bias size mismatch");
  if (stride < 1) throw ConfigError("conv2d: stride must be >= 1");
  if (W < K || H < K)
    throw ShapeError("conv2d: input " + std::to_string(W) + "x" +
                     std::to_string(H) + " smaller than kernel " +
                     std::to_string(K));
  const int outW = (W - K) / stride + 1;
  const int outH = (H - K) / stride + 1;
  const std::size_t rows = static_cast<std::size_t>(outW) * outH;
  const std::size_t cols = static_cast<std::size_t>(K) * K * Cin;

  std::vector<double> col;
  im2col(input.data(), W, H, Cin, K, stride, outW, outH, col);

  Tensor out({outW, outH, Cout});
  MapM o(out.data().data(), static_cast<Eigen::Index>(rows), Cout);
  MapCM cm(col.data(), static_cast<Eigen::Index>(rows),
           static_cast<Eigen::Index>(cols));
  MapCM km(kernels.data().data(), static_cast<Eigen::Index>(cols), Cout);
  o.noalias() = cm * km;
  o.rowwise() += MapCV(bias.data().data(), Cout).transpose();
  if (act == Activation::relu) o = o.cwiseMax(0.0);

  if (!tape) return out;
  Tape::Node n;
  n.op = Op::conv2d;
  n.a = tape->use(input);
  n.b = tape->use(kernels);
  n.c = tape->use(bias);
  n.out = out;
  n.stride = stride;
  n.act = act;
  n.saved = std::move(col);
  return tape->push(std::move(n));
}

// -------------------------------------------------------------- dense ------

Tensor dense(Tape* tape, const Tensor& input, const Tensor& weight,
             const Tensor& bias, Activation act) {
  if (weight.dims().size() != 2)
    throw ShapeError("dense: weight must be {In,Out}, got " +
                     dims_str(weight.dims()));
  const int In = weight.dim(0), Out = weight.dim(1);
  if (input.size() != static_cast<std::size_t>(In))
    throw ShapeError("dense: input size " + std::to_string(input.size()) +
                     " != weight In " + std::to_string(In));
  if (bias.size() != static_cast<std::size_t>(Out))
    throw ShapeError("dense: bias size mismatch");

  Tensor out({Out});
  MapV o(out.data().data(), Out);
  MapCM wm(weight.data().data(), In, Out);
  MapCV x(input.data().data(), In);
  o.noalias() = wm.transpose() * x;
  o += MapCV(bias.data().data(), Out);
  if (act == Activation::relu) o = o.cwiseMax(0.0);

  if (!tape) return out;
  Tape::Node n;
  n.op = Op::dense;
  n.a = tape->use(input);
  n.b = tape->use(weight);
  n.c = tape->use(bias);
  n.out = out;
  n.act = act;
  return tape->push(std::move(n));
}

// ---------------------------------------------------------- row_dense ------

Tensor row_dense(Tape* tape, const Tensor& rows, const Tensor& weight,
                 const Tensor& bias) {
  if (rows.dims().size() != 2)
    throw ShapeError("row_dense: rows must be {R,D}, got " +
                     dims_str(rows.dims()));
  const int R = rows.dim(0), D = rows.dim(1);
  if (weight.size() != static_cast<std::size_t>(D))
    throw ShapeError("row_dense: weight size != row width");
  if (bias.size() != 1) throw ShapeError("row_dense: bias must be scalar");

  Tensor out({R});
  MapCM rm(rows.data().data(), R, D);
  MapCV w(weight.data().data(), D);
  MapV o(out.data().data(), R);
  o.noalias() = rm * w;
  o.array() += bias[0];

  if (!tape) return out;
  Tape::Node n;
  n.op = Op::row_dense;
  n.a = tape->use(rows);
  n.b = tape->use(weight);
  n.c = tape->use(bias);
  n.out = out;
  return tape->push(std::move(n));
}

// ------------------------------------------------------------ softmax ------

Tensor softmax(Tape* tape, const Tensor& logits) {
  const std::size_t n = logits.size();
  if (n == 0) throw ShapeError("softmax: empty input");
  auto in = logits.data();
  double mx = in[0];
  for (double v : in) mx = std::max(mx, v);
  if (!std::isfinite(mx)) throw NumericError("softmax: non-finite logits");
  Tensor out(logits.dims());
  auto o = out.data();
  double sum = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    o[i] = std::exp(in[i] - mx);
    sum += o[i];
  }
  for (std::size_t i = 0; i < n; ++i) o[i] /= sum;

  if (!tape) return out;
  Tape::Node node;
  node.op = Op::softmax;
  node.a = tape->use(logits);
  node.out = out;
  return tape->push(std::move(node));
}

// --------------------------------------------------------------- tanh ------

Tensor tanh_act(Tape* tape, const Tensor& input) {
  Tensor out(input.dims());
  auto in = input.data();
  auto o = out.data();
  for (std::size_t i = 0; i < input.size(); ++i) o[i] = std::tanh(in[i]);

  if (!tape) return out;
  Tape::Node n;
  n.op = Op::tanh_act;
  n.a = tape->use(input);
  n.out = out;
  return tape->push(std::move(n));
}

// ------------------------------------------------------- weighted_sum ------

Tensor weighted_sum(Tape* tape, const Tensor& rows, const Tensor& weights) {
  if (rows.dims().size() != 2)
    throw ShapeError("weighted_sum: rows must be {R,D}");
  const int R = rows.dim(0), D = rows.dim(1);
  if (weights.size() != static_cast<std::size_t>(R))
    throw ShapeError("weighted_sum: weights size " +
                     std::to_string(weights.size()) + " != row count " +
                     std::to_string(R));
  Tensor out({D});
  MapCM rm(rows.data().data(), R, D);
  MapCV w(weights.data().data(), R);
  MapV o(out.data().data(), D);
  o.noalias() = rm.transpose() * w;

  if (!tape) return out;
  Tape::Node n;
  n.op = Op::weighted_sum;
  n.a = tape->use(rows);
  n.b = tape->use(weights);
  n.out = out;
  return tape->push(std::move(n));
}

// ---------------------------------------------------------------- mse ------

Tensor mse_loss(Tape* tape, const Tensor& predicted, const Tensor& target) {
  if (predicted.size() != target.size())
    throw ShapeError("mse_loss: size mismatch");
  auto a = predicted.data();
  auto b = target.data();
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = a[i] - b[i];
    s += d * d;
  }
  Tensor out({1});
  out[0] = s;

  if (!tape) return out;
  Tape::Node n;
  n.op = Op::mse;
  n.a = tape->use(predicted);
  n.b = tape->use(target);
  n.out = out;
  return tape->push(std::move(n));
}

// ------------------------------------------------------ roi_pool_cells -----

Tensor roi_pool_cells(Tape* tape, const Tensor& fmap,
                      std::span<const Rect> rects) {
  if (fmap.dims().size() != 3)
    throw ShapeError("roi_pool: feature map must be {W,H,C}");
  const int W = fmap.dim(0), H = fmap.dim(1), C = fmap.dim(2);
  const int R = static_cast<int>(rects.size());
  if (R == 0) throw ShapeError("roi_pool: no rects");
  for (const Rect& r : rects) {
    if (r.empty() || r.x0 < 0 || r.y0 < 0 || r.x1 > W || r.y1 > H)
      throw ShapeError("roi_pool: rect [" + std::to_string(r.x0) + "," +
                       std::to_string(r.y0) + "," + std::to_string(r.x1) +
                       "," + std::to_string(r.y1) + ") invalid for " +
                       std::to_string(W) + "x" + std::to_string(H) + " map");
  }

  Tensor out({R, 16 * C});
  std::vector<std::int32_t> arg(out.size());
  auto in = fmap.data();
  auto o = out.data();
  std::vector<double> best(static_cast<std::size_t>(C));
  std::vector<std::int32_t> besti(static_cast<std::size_t>(C));
  for (int r = 0; r < R; ++r) {
    const Rect& rc = rects[r];
    const int rw = rc.width(), rh = rc.height();
    for (int bx = 0; bx < 4; ++bx) {
      const int x0 = rc.x0 + bx * rw / 4;
      const int x1 = rc.x0 + ((bx + 1) * rw + 3) / 4;  // ceil
      for (int by = 0; by < 4; ++by) {
        const int y0 = rc.y0 + by * rh / 4;
        const int y1 = rc.y0 + ((by + 1) * rh + 3) / 4;
        bool first = true;
        for (int x = x0; x < x1; ++x)
          for (int y = y0; y < y1; ++y) {
            const std::size_t base = Tensor::at3(H, C, x, y, 0);
            if (first) {
              for (int c = 0; c < C; ++c) {
                best[static_cast<std::size_t>(c)] = in[base + c];
                besti[static_cast<std::size_t>(c)] =
                    static_cast<std::int32_t>(base + c);
              }
              first = false;
            } else {
              for (int c = 0; c < C; ++c)
                if (in[base + c] > best[static_cast<std::size_t>(c)]) {
                  best[static_cast<std::size_t>(c)] = in[base + c];
                  besti[static_cast<std::size_t>(c)] =
                      static_cast<std::int32_t>(base + c);
                }
            }
          }
        const std::size_t obase =
            (static_cast<std::size_t>(r) * 16 + (bx * 4 + by)) * C;
        for (int c = 0; c < C; ++c) {
          o[obase + c] = best[static_cast<std::size_t>(c)];
          arg[obase + c] = besti[static_cast<std::size_t>(c)];
        }
      }
    }
  }

  if (!tape) return out;
  Tape::Node n;
  n.op = Op::roi_pool;
  n.a = tape->use(fmap);
  n.out = out;
  n.arg = std::move(arg);
  n.rects.assign(rects.begin(), rects.end());
  return tape->push(std::move(n));
}

// ------------------------------------------------------- backward rules ----

void Tape::backward_node(Node& n) {
  const std::span<const double> g = n.grad;
  switch (n.op) {
    case Op::leaf:
      break;

    case Op::conv2d: {
      Node& in = nodes_[static_cast<std::size_t>(n.a)];
      Node& ker = nodes_[static_cast<std::size_t>(n.b)];
      Node& bia = nodes_[static_cast<std::size_t>(n.c)];
      const int outW = n.out.dim(0), outH = n.out.dim(1),
                Cout = n.out.dim(2);
      const int K = ker.out.dim(0), Cin = ker.out.dim(2);
      const std::size_t rows = static_cast<std::size_t>(outW) * outH;
      const std::size_t cols = static_cast<std::size_t>(K) * K * Cin;
      // Mask the upstream gradient through the ReLU (out > 0 passes).
      std::vector<double> gm(g.begin(), g.end());
      if (n.act == Activation::relu) {
        auto ov = n.out.data();
        for (std::size_t i = 0; i < gm.size(); ++i)
          if (ov[i] <= 0.0) gm[i] = 0.0;
      }
      MapCM gmat(gm.data(), static_cast<Eigen::Index>(rows), Cout);
      if (bia.needs_grad) {
        auto gb = grad_of(n.c);
        MapV(gb.data(), Cout).noalias() += gmat.colwise().sum().transpose();
      }
      if (ker.needs_grad) {
        auto gk = grad_of(n.b);
        MapCM cm(n.saved.data(), static_cast<Eigen::Index>(rows),
                 static_cast<Eigen::Index>(cols));
        MapM(gk.data(), static_cast<Eigen::Index>(cols), Cout).noalias() +=
            cm.transpose() * gmat;
      }
      if (in.needs_grad) {
        MatRM dcol(rows, cols);
        MapCM km(ker.out.data().data(), static_cast<Eigen::Index>(cols),
                 Cout);
        dcol.noalias() = gmat * km.transpose();
        auto gi = grad_of(n.a);
        const int H = in.out.dim(1);
        const double* src = dcol.data();
        for (int ox = 0; ox < outW; ++ox)
          for (int oy = 0; oy < outH; ++oy)
            for (int kx = 0; kx < K; ++kx) {
              const int x = ox * n.stride + kx;
              for (int ky = 0; ky < K; ++ky) {
                double* dst =
                    gi.data() +
                    (static_cast<std::size_t>(x) * H + oy * n.stride + ky) *
                        Cin;
                for (int ci = 0; ci < Cin; ++ci) dst[ci] += src[ci];
                src += Cin;
              }
            }
      }
      break;
    }

    case Op::dense: {
      Node& in = nodes_[static_cast<std::size_t>(n.a)];
      Node& wgt = nodes_[static_cast<std::size_t>(n.b)];
      Node& bia = nodes_[static_cast<std::size_t>(n.c)];
      const int In = wgt.out.dim(0), Out = wgt.out.dim(1);
      std::vector<double> gm(g.begin(), g.end());
      if (n.act == Activation::relu) {
        auto ov = n.out.data();
        for (std::size_t i = 0; i < gm.size(); ++i)
          if (ov[i] <= 0.0) gm[i] = 0.0;
      }
      MapCV gv(gm.data(), Out);
      if (bia.needs_grad) {
        auto gb = grad_of(n.c);
        MapV(gb.data(), Out).noalias() += gv;
      }
      if (wgt.needs_grad) {
        auto gw = grad_of(n.b);
        MapCV x(in.out.data().data(), In);
        MapM(gw.data(), In, Out).noalias() += x * gv.transpose();
      }
      if (in.needs_grad) {
        auto gi = grad_of(n.a);
        MapCM wm(wgt.out.data().data(), In, Out);
        MapV(gi.data(), In).noalias() += wm * gv;
      }
      break;
    }

    case Op::row_dense: {
      Node& in = nodes_[static_cast<std::size_t>(n.a)];
      Node& wgt = nodes_[static_cast<std::size_t>(n.b)];
      Node& bia = nodes_[static_cast<std::size_t>(n.c)];
      const int R = in.out.dim(0), D = in.out.dim(1);
      MapCV gv(g.data(), R);
      if (bia.needs_grad) grad_of(n.c)[0] += gv.sum();
      if (wgt.needs_grad) {
        auto gw = grad_of(n.b);
        MapCM rm(in.out.data().data(), R, D);
        MapV(gw.data(), D).noalias() += rm.transpose() * gv;
      }
      if (in.needs_grad) {
        auto gi = grad_of(n.a);
        MapCV w(wgt.out.data().data(), D);
        MapM(gi.data(), R, D).noalias() += gv * w.transpose();
      }
      break;
    }

    case Op::softmax: {
      Node& in = nodes_[static_cast<std::size_t>(n.a)];
      if (!in.needs_grad) break;
      auto y = n.out.data();
      auto gi = grad_of(n.a);
      double dot = 0.0;
      for (std::size_t i = 0; i < y.size(); ++i) dot += g[i] * y[i];
      for (std::size_t i = 0; i < y.size(); ++i)
        gi[i] += y[i] * (g[i] - dot);
      break;
    }

    case Op::tanh_act: {
      Node& in = nodes_[static_cast<std::size_t>(n.a)];
      if (!in.needs_grad) break;
      auto y = n.out.data();
      auto gi = grad_of(n.a);
      for (std::size_t i = 0; i < y.size(); ++i)
        gi[i] += g[i] * (1.0 - y[i] * y[i]);
      break;
    }

    case Op::weighted_sum: {
      Node& in = nodes_[static_cast<std::size_t>(n.a)];
      Node& wts = nodes_[static_cast<std::size_t>(n.b)];
      const int R = in.out.dim(0), D = in.out.dim(1);
      MapCV gv(g.data(), D);
      if (wts.needs_grad) {
        auto gw = grad_of(n.b);
        MapCM rm(in.out.data().data(), R, D);
        MapV(gw.data(), R).noalias() += rm * gv;
      }
      if (in.needs_grad) {
        auto gi = grad_of(n.a);
        MapCV w(wts.out.data().data(), R);
        MapM(gi.data(), R, D).noalias() += w * gv.transpose();
      }
      break;
    }

    case Op::mse: {
      Node& a = nodes_[static_cast<std::size_t>(n.a)];
      Node& b = nodes_[static_cast<std::size_t>(n.b)];
      const double gs = g[0];
      auto av = a.out.data();
      auto bv = b.out.data();
      if (a.needs_grad) {
        auto ga = grad_of(n.a);
        for (std::size_t i = 0; i < av.size(); ++i)
          ga[i] += 2.0 * (av[i] - bv[i]) * gs;
      }
      if (b.needs_grad) {
        auto gb = grad_of(n.b);
        for (std::size_t i = 0; i < av.size(); ++i)
          gb[i] -= 2.0 * (av[i] - bv[i]) * gs;
      }
      break;
    }

    case Op::roi_pool: {
      Node& in = nodes_[static_cast<std::size_t>(n.a)];
      if (!in.needs_grad) break;
      auto gi = grad_of(n.a);
      for (std::size_t i = 0; i < n.arg.size(); ++i)
        gi[static_cast<std::size_t>(n.arg[i])] += g[i];
      break;
    }
  }
}

// ------------------------------------------------------- ParameterStore ----

void ParameterStore::declare(const std::string& name, std::vector<int> dims) {
  if (finalized_)
    throw ConfigError("ParameterStore: declare after finalize: " + name);
  for (const Entry& e : entries_)
    if (e.name == name)
      throw ConfigError("ParameterStore: duplicate parameter " + name);
  Entry e;
  e.name = name;
  e.size = product(dims);
  e.dims = std::move(dims);
  e.offset = entries_.empty()
                 ? 0
                 : entries_.back().offset + entries_.back().size;
  entries_.push_back(std::move(e));
}

void ParameterStore::finalize() {
  if (finalized_) throw ConfigError("ParameterStore: already finalized");
  finalized_ = true;
  const std::size_t total =
      entries_.empty() ? 0 : entries_.back().offset + entries_.back().size;
  values_.assign(total, 0.0);
  grads_.assign(total, 0.0);
}

void ParameterStore::zero_grads() {
  std::fill(grads_.begin(), grads_.end(), 0.0);
}

const ParameterStore::Entry& ParameterStore::entry(
    const std::string& name) const {
  for (const Entry& e : entries_)
    if (e.name == name) return e;
  throw ConfigError("ParameterStore: unknown parameter " + name);
}

Tensor ParameterStore::view(const std::string& name) {
  if (!finalized_) throw ConfigError("ParameterStore: view before finalize");
  const Entry& e = entry(name);
  return Tensor::view(e.dims, values_.data() + e.offset,
                      grads_.data() + e.offset);
}

// ----------------------------------------------------------------- Adam ----

void adam_step(std::span<double> params, std::span<const double> grads,
               AdamState& state) {
  const std::size_t n = params.size();
  if (grads.size() != n)
    throw ShapeError("adam_step: params/grads size mismatch");
  if (state.m.empty()) state.m.assign(n, 0.0);
  if (state.v.empty()) state.v.assign(n, 0.0);
  if (state.m.size() != n || state.v.size() != n)
    throw ShapeError("adam_step: stale moment buffers");
  for (std::size_t i = 0; i < n; ++i)
    if (!std::isfinite(grads[i]))
      throw NumericError("adam_step: non-finite gradient at index " +
                         std::to_string(i));

  state.step_count += 1;
  const double bc1 =
      1.0 - std::pow(state.beta1, static_cast<double>(state.step_count));
  const double bc2 =
      1.0 - std::pow(state.beta2, static_cast<double>(state.step_count));
  for (std::size_t i = 0; i < n; ++i) {
    const double gi = grads[i];
    state.m[i] = state.beta1 * state.m[i] + (1.0 - state.beta1) * gi;
    state.v[i] = state.beta2 * state.v[i] + (1.0 - state.beta2) * gi * gi;
    const double mhat = state.m[i] / bc1;
    const double vhat = state.v[i] / bc2;
    params[i] -= state.lr * mhat / (std::sqrt(vhat) + state.epsilon);
  }
}

// -------------------------------------------------- finite_diff_check ------

double finite_diff_check(const std::function<double()>& f,
                         std::span<double> params,
                         std::span<const double> analytic,
                         const FiniteDiffOptions& opt) {
  if (params.size() != analytic.size())
    throw ShapeError("finite_diff_check: params/analytic size mismatch");
  if (params.empty()) throw ShapeError("finite_diff_check: empty params");
  if (opt.epsilon < 1e-7 || opt.epsilon > 1e-4)
    throw ConfigError("finite_diff_check: epsilon must be in [1e-7, 1e-4]");
  if (opt.samples <= 0)
    throw ConfigError("finite_diff_check: samples must be > 0");

  const double f0a = f();
  const double f0b = f();
  if (!(f0a == f0b))
    throw NumericError(
        "finite_diff_check: f() is not deterministic (got " +
        std::to_string(f0a) + " then " + std::to_string(f0b) + ")");

  const std::size_t P = params.size();
  std::vector<std::size_t> idx;
  if (static_cast<std::size_t>(opt.samples) >= P) {
    idx.resize(P);
    for (std::size_t i = 0; i < P; ++i) idx[i] = i;
  } else {
    Rng rng(opt.seed);
    std::unordered_set<std::size_t> seen;
    while (idx.size() < static_cast<std::size_t>(opt.samples)) {
      const std::size_t i = rng.below(P);
      if (seen.insert(i).second) idx.push_back(i);
    }
  }

  double worst = 0.0;
  for (std::size_t i : idx) {
    const double old = params[i];
    params[i] = old + opt.epsilon;
    const double fp = f();
    params[i] = old - opt.epsilon;
    const double fm = f();
    params[i] = old;
    const double fd = (fp - fm) / (2.0 * opt.epsilon);
    const double an = analytic[i];
    if (!std::isfinite(fd) || !std::isfinite(an))
      throw NumericError("finite_diff_check: non-finite derivative at " +
                         std::to_string(i));
    const double rel = std::abs(an - fd) / std::max(1.0, std::abs(an));
    worst = std::max(worst, rel);
  }
  return worst;
}

}  // namespace attdrive::nn
