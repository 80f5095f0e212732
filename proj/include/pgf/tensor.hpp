#pragma once

// Dense float64 tensors with tape-based reverse-mode differentiation.
// The tape is rebuilt on every forward pass; ops record onto the active
// tape only while a TapeScope is alive, so evaluation passes run
// allocation-light with no graph bookkeeping.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace pgf {

using Shape = std::vector<std::size_t>;

struct error : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct shape_error : error {
    using error::error;
};
struct value_error : error {
    using error::error;
};
struct config_error : error {
    using error::error;
};
struct io_error : error {
    using error::error;
};

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << "[";
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (i) os << ",";
        os << s[i];
    }
    os << "]";
    return os.str();
}

inline std::size_t shape_numel(const Shape& s) {
    std::size_t n = 1;
    for (auto d : s) n *= d;
    return n;
}

namespace detail {

struct TensorImpl {
    Shape shape;
    std::vector<double> data;
    std::vector<double> grad;  // empty until backward touches this tensor
    bool requires_grad = false;
};

}  // namespace detail

class Tensor {
  public:
    Tensor() = default;

    static Tensor zeros(Shape shape, bool requires_grad = false) {
        Tensor t;
        t.impl_ = std::make_shared<detail::TensorImpl>();
        t.impl_->shape = std::move(shape);
        t.impl_->data.assign(shape_numel(t.impl_->shape), 0.0);
        t.impl_->requires_grad = requires_grad;
        return t;
    }

    static Tensor full(Shape shape, double value) {
        Tensor t = zeros(std::move(shape));
        std::fill(t.impl_->data.begin(), t.impl_->data.end(), value);
        return t;
    }

    static Tensor scalar(double value) { return full({1}, value); }

    static Tensor from_vector(Shape shape, std::vector<double> values) {
        if (shape_numel(shape) != values.size())
            throw shape_error("from_vector: shape " + shape_str(shape) + " does not hold " +
                              std::to_string(values.size()) + " values");
        Tensor t;
        t.impl_ = std::make_shared<detail::TensorImpl>();
        t.impl_->shape = std::move(shape);
        t.impl_->data = std::move(values);
        return t;
    }

    static Tensor randn(Shape shape, std::mt19937_64& rng, double stddev = 1.0) {
        Tensor t = zeros(std::move(shape));
        std::normal_distribution<double> dist(0.0, stddev);
        for (auto& v : t.impl_->data) v = dist(rng);
        return t;
    }

    // Weight matrices are stored [out_features, in_features]; linear() applies x.W^T.
    static Tensor xavier_uniform(std::size_t out_features, std::size_t in_features,
                                 std::mt19937_64& rng) {
        double limit = std::sqrt(6.0 / double(in_features + out_features));
        Tensor t = zeros({out_features, in_features});
        std::uniform_real_distribution<double> dist(-limit, limit);
        for (auto& v : t.impl_->data) v = dist(rng);
        return t;
    }

    bool defined() const { return impl_ != nullptr; }

    const Shape& shape() const { return impl_->shape; }
    std::size_t rank() const { return impl_->shape.size(); }
    std::size_t numel() const { return impl_->data.size(); }
    std::size_t dim(std::size_t i) const { return impl_->shape[i]; }

    double* data() { return impl_->data.data(); }
    const double* data() const { return impl_->data.data(); }
    std::vector<double>& vec() { return impl_->data; }
    const std::vector<double>& vec() const { return impl_->data; }

    double item() const {
        if (numel() != 1) throw value_error("item: tensor has " + std::to_string(numel()) + " elements");
        return impl_->data[0];
    }

    bool requires_grad() const { return impl_ && impl_->requires_grad; }
    void set_requires_grad(bool rg) { impl_->requires_grad = rg; }

    bool has_grad() const { return impl_ && !impl_->grad.empty(); }

    // Lazily allocated, zero-initialized.
    std::vector<double>& grad() {
        if (impl_->grad.empty()) impl_->grad.assign(impl_->data.size(), 0.0);
        return impl_->grad;
    }
    const std::vector<double>& grad_const() const { return impl_->grad; }

    void zero_grad() {
        if (impl_) impl_->grad.clear();
    }

    // Identity of the underlying buffer; used by the tape.
    const void* id() const { return impl_.get(); }

    bool all_finite() const {
        for (double v : impl_->data)
            if (!std::isfinite(v)) return false;
        return true;
    }

  private:
    std::shared_ptr<detail::TensorImpl> impl_;
};

// Boolean mask over the last axis of some tensor, or a full-shape mask.
// Not differentiable, never recorded on the tape.
struct Mask {
    Shape shape;
    std::vector<std::uint8_t> on;

    static Mask ones(Shape s) {
        Mask m;
        m.shape = std::move(s);
        m.on.assign(shape_numel(m.shape), 1);
        return m;
    }
    static Mask from_vector(Shape s, std::vector<std::uint8_t> v) {
        if (shape_numel(s) != v.size()) throw shape_error("mask: shape/data mismatch");
        Mask m;
        m.shape = std::move(s);
        m.on = std::move(v);
        return m;
    }
    std::size_t numel() const { return on.size(); }
    bool at(std::size_t i) const { return on[i] != 0; }
};

// ---------------------------------------------------------------------------
// Tape
// ---------------------------------------------------------------------------

class Tape {
  public:
    struct Node {
        std::vector<Tensor> inputs;
        Tensor output;
        // Reads output.grad, accumulates into inputs' grads.
        std::function<void(Node&)> backward;
    };

    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    static Tape*& active() {
        thread_local Tape* current = nullptr;
        return current;
    }

    void record(Node node) { nodes_.push_back(std::move(node)); }

    std::size_t size() const { return nodes_.size(); }

    // Seeds d(output)/d(output) = 1 and walks the recorded ops in reverse.
    // Recording order is a topological order by construction, so each node
    // is visited exactly once. Gradients sum across fan-out.
    void backward(const Tensor& output) {
        if (!output.defined() || output.numel() != 1)
            throw value_error("backward: output must be a scalar tensor");
        Tensor out = output;
        out.grad()[0] += 1.0;
        for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
            if (!it->output.has_grad()) continue;  // not an ancestor of the loss
            it->backward(*it);
        }
    }

    void clear() { nodes_.clear(); }

  private:
    std::vector<Node> nodes_;
};

class TapeScope {
  public:
    explicit TapeScope(Tape& tape) : prev_(Tape::active()) { Tape::active() = &tape; }
    ~TapeScope() { Tape::active() = prev_; }
    TapeScope(const TapeScope&) = delete;
    TapeScope& operator=(const TapeScope&) = delete;

  private:
    Tape* prev_;
};

inline void backward(const Tensor& output) {
    Tape* tape = Tape::active();
    if (!tape) throw value_error("backward: no active tape");
    tape->backward(output);
}

namespace detail {

inline bool any_requires_grad(std::initializer_list<Tensor> ts) {
    for (const auto& t : ts)
        if (t.defined() && t.requires_grad()) return true;
    return false;
}

// Marks `out` differentiable and records the node when a tape is active and
// some input carries gradient. `fn` must accumulate into input grads.
inline void record(std::initializer_list<Tensor> inputs, Tensor out,
                   std::function<void(Tape::Node&)> fn) {
    Tape* tape = Tape::active();
    if (!tape || !any_requires_grad(inputs)) return;
    out.set_requires_grad(true);
    Tape::Node node;
    node.inputs.assign(inputs.begin(), inputs.end());
    node.output = std::move(out);
    node.backward = std::move(fn);
    tape->record(std::move(node));
}

inline void check_same_shape(const char* op, const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape())
        throw shape_error(std::string(op) + ": shapes differ: " + shape_str(a.shape()) + " vs " +
                          shape_str(b.shape()));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise ops
// ---------------------------------------------------------------------------

inline Tensor add(const Tensor& a, const Tensor& b) {
    detail::check_same_shape("add", a, b);
    Tensor out = Tensor::zeros(a.shape());
    const double* pa = a.data();
    const double* pb = b.data();
    double* po = out.data();
    for (std::size_t i = 0; i < out.numel(); ++i) po[i] = pa[i] + pb[i];
    detail::record({a, b}, out, [](Tape::Node& n) {
        const auto& g = n.output.grad_const();
        for (int k = 0; k < 2; ++k) {
            if (!n.inputs[k].requires_grad()) continue;
            auto& gi = n.inputs[k].grad();
            for (std::size_t i = 0; i < g.size(); ++i) gi[i] += g[i];
        }
    });
    return out;
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
    detail::check_same_shape("sub", a, b);
    Tensor out = Tensor::zeros(a.shape());
    const double* pa = a.data();
    const double* pb = b.data();
    double* po = out.data();
    for (std::size_t i = 0; i < out.numel(); ++i) po[i] = pa[i] - pb[i];
    detail::record({a, b}, out, [](Tape::Node& n) {
        const auto& g = n.output.grad_const();
        if (n.inputs[0].requires_grad()) {
            auto& ga = n.inputs[0].grad();
            for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
        }
        if (n.inputs[1].requires_grad()) {
            auto& gb = n.inputs[1].grad();
            for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
        }
    });
    return out;
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
    detail::check_same_shape("mul", a, b);
    Tensor out = Tensor::zeros(a.shape());
    const double* pa = a.data();
    const double* pb = b.data();
    double* po = out.data();
    for (std::size_t i = 0; i < out.numel(); ++i) po[i] = pa[i] * pb[i];
    detail::record({a, b}, out, [](Tape::Node& n) {
        const auto& g = n.output.grad_const();
        const double* pa = n.inputs[0].data();
        const double* pb = n.inputs[1].data();
        if (n.inputs[0].requires_grad()) {
            auto& ga = n.inputs[0].grad();
            for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * pb[i];
        }
        if (n.inputs[1].requires_grad()) {
            auto& gb = n.inputs[1].grad();
            for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * pa[i];
        }
    });
    return out;
}

// a*x + b, scalar coefficients.
inline Tensor affine(const Tensor& x, double a, double b) {
    Tensor out = Tensor::zeros(x.shape());
    const double* px = x.data();
    double* po = out.data();
    for (std::size_t i = 0; i < out.numel(); ++i) po[i] = a * px[i] + b;
    detail::record({x}, out, [a](Tape::Node& n) {
        const auto& g = n.output.grad_const();
        auto& gx = n.inputs[0].grad();
        for (std::size_t i = 0; i < g.size(); ++i) gx[i] += a * g[i];
    });
    return out;
}

inline Tensor scale(const Tensor& x, double a) { return affine(x, a, 0.0); }

// Broadcast add of a rank-1 bias over the last axis.
inline Tensor add_bias(const Tensor& x, const Tensor& bias) {
    if (bias.rank() != 1 || bias.dim(0) != x.shape().back())
        throw shape_error("add_bias: bias " + shape_str(bias.shape()) + " does not match last axis of " +
                          shape_str(x.shape()));
    Tensor out = Tensor::zeros(x.shape());
    std::size_t d = bias.dim(0);
    std::size_t rows = x.numel() / d;
    const double* px = x.data();
    const double* pb = bias.data();
    double* po = out.data();
    for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t j = 0; j < d; ++j) po[r * d + j] = px[r * d + j] + pb[j];
    detail::record({x, bias}, out, [d, rows](Tape::Node& n) {
        const auto& g = n.output.grad_const();
        if (n.inputs[0].requires_grad()) {
            auto& gx = n.inputs[0].grad();
            for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
        }
        if (n.inputs[1].requires_grad()) {
            auto& gb = n.inputs[1].grad();
            for (std::size_t r = 0; r < rows; ++r)
                for (std::size_t j = 0; j < d; ++j) gb[j] += g[r * d + j];
        }
    });
    return out;
}

// ---------------------------------------------------------------------------
// matmul
// ---------------------------------------------------------------------------

namespace detail {

// c[m,n] += a[m,k] * b[k,n]
inline void gemm_acc(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
                     std::size_t n) {
    for (std::size_t i = 0; i < m; ++i) {
        const double* ai = a + i * k;
        double* ci = c + i * n;
        for (std::size_t p = 0; p < k; ++p) {
            double av = ai[p];
            if (av == 0.0) continue;
            const double* bp = b + p * n;
            for (std::size_t j = 0; j < n; ++j) ci[j] += av * bp[j];
        }
    }
}

// c[m,n] += a[m,k] * b[n,k]^T
inline void gemm_bt_acc(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
                        std::size_t n) {
    for (std::size_t i = 0; i < m; ++i) {
        const double* ai = a + i * k;
        double* ci = c + i * n;
        for (std::size_t j = 0; j < n; ++j) {
            const double* bj = b + j * k;
            double acc = 0.0;
            for (std::size_t p = 0; p < k; ++p) acc += ai[p] * bj[p];
            ci[j] += acc;
        }
    }
}

// c[k,n] += a[m,k]^T * b[m,n]
inline void gemm_at_acc(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
                        std::size_t n) {
    for (std::size_t i = 0; i < m; ++i) {
        const double* ai = a + i * k;
        const double* bi = b + i * n;
        for (std::size_t p = 0; p < k; ++p) {
            double av = ai[p];
            if (av == 0.0) continue;
            double* cp = c + p * n;
            for (std::size_t j = 0; j < n; ++j) cp[j] += av * bi[j];
        }
    }
}

}  // namespace detail

// Matrix product over the trailing two axes. Leading (batch) axes must match
// exactly; no broadcasting. Gradients: dA = G.B^T, dB = A^T.G per batch.
inline Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.rank() < 2 || b.rank() < 2 || a.rank() != b.rank())
        throw shape_error("matmul: need equal-rank tensors of rank >= 2, got " + shape_str(a.shape()) +
                          " and " + shape_str(b.shape()));
    std::size_t r = a.rank();
    for (std::size_t i = 0; i + 2 < r; ++i)
        if (a.dim(i) != b.dim(i))
            throw shape_error("matmul: batch dims differ: " + shape_str(a.shape()) + " vs " +
                              shape_str(b.shape()));
    std::size_t m = a.dim(r - 2), k = a.dim(r - 1);
    std::size_t k2 = b.dim(r - 2), n = b.dim(r - 1);
    if (k != k2)
        throw shape_error("matmul: inner dims differ: " + shape_str(a.shape()) + " vs " +
                          shape_str(b.shape()));
    Shape out_shape(a.shape().begin(), a.shape().end() - 2);
    std::size_t batch = shape_numel(out_shape);
    out_shape.push_back(m);
    out_shape.push_back(n);
    Tensor out = Tensor::zeros(out_shape);
    for (std::size_t s = 0; s < batch; ++s)
        detail::gemm_acc(a.data() + s * m * k, b.data() + s * k * n, out.data() + s * m * n, m, k, n);
    detail::record({a, b}, out, [batch, m, k, n](Tape::Node& node) {
        const double* g = node.output.grad_const().data();
        const Tensor& a = node.inputs[0];
        const Tensor& b = node.inputs[1];
        if (a.requires_grad()) {
            double* ga = node.inputs[0].grad().data();
            for (std::size_t s = 0; s < batch; ++s)
                detail::gemm_bt_acc(g + s * m * n, b.data() + s * k * n, ga + s * m * k, m, n, k);
        }
        if (b.requires_grad()) {
            double* gb = node.inputs[1].grad().data();
            for (std::size_t s = 0; s < batch; ++s)
                detail::gemm_at_acc(a.data() + s * m * k, g + s * m * n, gb + s * k * n, m, k, n);
        }
    });
    return out;
}

// y = x.W^T (+ bias), W stored [out_features, in_features]. Accepts any rank;
// leading axes are flattened row-wise.
inline Tensor linear(const Tensor& x, const Tensor& w, const Tensor& bias = Tensor()) {
    if (w.rank() != 2)
        throw shape_error("linear: weight must be rank 2, got " + shape_str(w.shape()));
    std::size_t in = w.dim(1), out_f = w.dim(0);
    if (x.shape().back() != in)
        throw shape_error("linear: input " + shape_str(x.shape()) + " does not match weight " +
                          shape_str(w.shape()));
    if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != out_f))
        throw shape_error("linear: bias " + shape_str(bias.shape()) + " does not match weight " +
                          shape_str(w.shape()));
    Shape out_shape = x.shape();
    out_shape.back() = out_f;
    std::size_t rows = x.numel() / in;
    Tensor out = Tensor::zeros(out_shape);
    detail::gemm_bt_acc(x.data(), w.data(), out.data(), rows, in, out_f);
    if (bias.defined()) {
        double* po = out.data();
        const double* pb = bias.data();
        for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t j = 0; j < out_f; ++j) po[r * out_f + j] += pb[j];
    }
    auto fn = [rows, in, out_f](Tape::Node& n) {
        const double* g = n.output.grad_const().data();
        const Tensor& x = n.inputs[0];
        const Tensor& w = n.inputs[1];
        if (x.requires_grad())
            detail::gemm_acc(g, w.data(), n.inputs[0].grad().data(), rows, out_f, in);
        if (w.requires_grad())
            detail::gemm_at_acc(g, x.data(), n.inputs[1].grad().data(), rows, out_f, in);
        if (n.inputs.size() > 2 && n.inputs[2].requires_grad()) {
            double* gb = n.inputs[2].grad().data();
            for (std::size_t r = 0; r < rows; ++r)
                for (std::size_t j = 0; j < out_f; ++j) gb[j] += g[r * out_f + j];
        }
    };
    if (bias.defined())
        detail::record({x, w, bias}, out, fn);
    else
        detail::record({x, w}, out, fn);
    return out;
}

// ---------------------------------------------------------------------------
// Nonlinearities
// ---------------------------------------------------------------------------

inline Tensor relu(const Tensor& x) {
    Tensor out = Tensor::zeros(x.shape());
    const double* px = x.data();
    double* po = out.data();
    for (std::size_t i = 0; i < out.numel(); ++i) po[i] = px[i] > 0.0 ? px[i] : 0.0;
    detail::record({x}, out, [](Tape::Node& n) {
        const auto& g = n.output.grad_const();
        const double* px = n.inputs[0].data();
        auto& gx = n.inputs[0].grad();
        for (std::size_t i = 0; i < g.size(); ++i)
            if (px[i] > 0.0) gx[i] += g[i];
    });
    return out;
}

inline double stable_sigmoid(double v) {
    if (v >= 0.0) return 1.0 / (1.0 + std::exp(-v));
    double e = std::exp(v);
    return e / (1.0 + e);
}

inline Tensor sigmoid(const Tensor& x) {
    Tensor out = Tensor::zeros(x.shape());
    const double* px = x.data();
    double* po = out.data();
    for (std::size_t i = 0; i < out.numel(); ++i) po[i] = stable_sigmoid(px[i]);
    detail::record({x}, out, [](Tape::Node& n) {
        const auto& g = n.output.grad_const();
        const double* py = n.output.data();
        auto& gx = n.inputs[0].grad();
        for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * py[i] * (1.0 - py[i]);
    });
    return out;
}

enum class Activation { sigmoid, relu };

inline Tensor activation(Activation kind, const Tensor& x) {
    return kind == Activation::sigmoid ? sigmoid(x) : relu(x);
}

inline Tensor abs(const Tensor& x) {
    Tensor out = Tensor::zeros(x.shape());
    const double* px = x.data();
    double* po = out.data();
    for (std::size_t i = 0; i < out.numel(); ++i) po[i] = std::fabs(px[i]);
    // subgradient at 0 taken as 0
    detail::record({x}, out, [](Tape::Node& n) {
        const auto& g = n.output.grad_const();
        const double* px = n.inputs[0].data();
        auto& gx = n.inputs[0].grad();
        for (std::size_t i = 0; i < g.size(); ++i) {
            if (px[i] > 0.0)
                gx[i] += g[i];
            else if (px[i] < 0.0)
                gx[i] -= g[i];
        }
    });
    return out;
}

// ---------------------------------------------------------------------------
// softmax over the last axis, with optional boolean mask
// ---------------------------------------------------------------------------

namespace detail {

// Resolves the mask entry feeding x's flat row r of width n. Allowed mask
// shapes: exactly x.shape, [batch, n] with batch == x.shape[0], or [n].
struct MaskView {
    const Mask* mask = nullptr;
    std::size_t n = 0;
    std::size_t rows_per_batch = 1;  // flat rows sharing one mask row
    bool full_shape = false;

    bool on(std::size_t row, std::size_t j) const {
        if (!mask) return true;
        if (full_shape) return mask->at(row * n + j);
        return mask->at((row / rows_per_batch) * n + j);
    }
};

inline MaskView make_mask_view(const Tensor& x, const Mask* mask) {
    MaskView v;
    v.n = x.shape().back();
    if (!mask) return v;
    v.mask = mask;
    if (mask->shape == x.shape()) {
        v.full_shape = true;
        return v;
    }
    std::size_t rows = x.numel() / v.n;
    if (mask->shape.size() == 1 && mask->shape[0] == v.n) {
        v.rows_per_batch = rows;
        return v;
    }
    if (mask->shape.size() == 2 && mask->shape[1] == v.n && x.rank() >= 2 &&
        mask->shape[0] == x.shape()[0]) {
        v.rows_per_batch = rows / x.shape()[0];
        return v;
    }
    throw shape_error("softmax: mask " + shape_str(mask->shape) + " incompatible with " +
                      shape_str(x.shape()));
}

}  // namespace detail

// Max-subtracted softmax along the last axis. Masked positions get exactly
// zero probability; a fully masked row is an error naming the row.
inline Tensor softmax_lastdim(const Tensor& x, const Mask* mask = nullptr) {
    std::size_t n = x.shape().back();
    std::size_t rows = x.numel() / n;
    detail::MaskView mv = detail::make_mask_view(x, mask);
    Tensor out = Tensor::zeros(x.shape());
    const double* px = x.data();
    double* po = out.data();
    for (std::size_t r = 0; r < rows; ++r) {
        double mx = -std::numeric_limits<double>::infinity();
        for (std::size_t j = 0; j < n; ++j)
            if (mv.on(r, j)) mx = std::max(mx, px[r * n + j]);
        if (!std::isfinite(mx))
            throw value_error("softmax: fully masked row " + std::to_string(r));
        double sum = 0.0;
        for (std::size_t j = 0; j < n; ++j) {
            if (!mv.on(r, j)) continue;
            double e = std::exp(px[r * n + j] - mx);
            po[r * n + j] = e;
            sum += e;
        }
        for (std::size_t j = 0; j < n; ++j)
            if (mv.on(r, j)) po[r * n + j] /= sum;
    }
    detail::record({x}, out, [rows, n](Tape::Node& node) {
        const auto& g = node.output.grad_const();
        const double* y = node.output.data();
        auto& gx = node.inputs[0].grad();
        for (std::size_t r = 0; r < rows; ++r) {
            double dot = 0.0;
            for (std::size_t j = 0; j < n; ++j) dot += g[r * n + j] * y[r * n + j];
            for (std::size_t j = 0; j < n; ++j)
                gx[r * n + j] += y[r * n + j] * (g[r * n + j] - dot);
        }
    });
    return out;
}

// ---------------------------------------------------------------------------
// layer norm over the last axis
// ---------------------------------------------------------------------------

inline Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps) {
    std::size_t d = x.shape().back();
    if (eps <= 0.0) throw value_error("layer_norm: eps must be positive");
    if (gain.rank() != 1 || gain.dim(0) != d || bias.rank() != 1 || bias.dim(0) != d)
        throw shape_error("layer_norm: gain/bias must be rank-1 of size " + std::to_string(d));
    std::size_t rows = x.numel() / d;
    Tensor out = Tensor::zeros(x.shape());
    // xhat kept for the backward pass
    Tensor xhat = Tensor::zeros(x.shape());
    Tensor inv_std = Tensor::zeros({rows});
    const double* px = x.data();
    const double* pg = gain.data();
    const double* pb = bias.data();
    double* po = out.data();
    double* ph = xhat.data();
    double* pis = inv_std.data();
    for (std::size_t r = 0; r < rows; ++r) {
        const double* row = px + r * d;
        double mean = 0.0;
        for (std::size_t j = 0; j < d; ++j) mean += row[j];
        mean /= double(d);
        double var = 0.0;
        for (std::size_t j = 0; j < d; ++j) {
            double c = row[j] - mean;
            var += c * c;
        }
        var /= double(d);
        double is = 1.0 / std::sqrt(var + eps);
        pis[r] = is;
        for (std::size_t j = 0; j < d; ++j) {
            double h = (row[j] - mean) * is;
            ph[r * d + j] = h;
            po[r * d + j] = pg[j] * h + pb[j];
        }
    }
    detail::record({x, gain, bias}, out, [rows, d, xhat, inv_std](Tape::Node& n) {
        const auto& g = n.output.grad_const();
        const double* ph = xhat.data();
        const double* pis = inv_std.data();
        const double* pg = n.inputs[1].data();
        if (n.inputs[1].requires_grad()) {
            auto& gg = n.inputs[1].grad();
            for (std::size_t r = 0; r < rows; ++r)
                for (std::size_t j = 0; j < d; ++j) gg[j] += g[r * d + j] * ph[r * d + j];
        }
        if (n.inputs[2].requires_grad()) {
            auto& gb = n.inputs[2].grad();
            for (std::size_t r = 0; r < rows; ++r)
                for (std::size_t j = 0; j < d; ++j) gb[j] += g[r * d + j];
        }
        if (n.inputs[0].requires_grad()) {
            auto& gx = n.inputs[0].grad();
            for (std::size_t r = 0; r < rows; ++r) {
                double sum_gy = 0.0, sum_gyh = 0.0;
                for (std::size_t j = 0; j < d; ++j) {
                    double gy = g[r * d + j] * pg[j];
                    sum_gy += gy;
                    sum_gyh += gy * ph[r * d + j];
                }
                double m1 = sum_gy / double(d);
                double m2 = sum_gyh / double(d);
                for (std::size_t j = 0; j < d; ++j) {
                    double gy = g[r * d + j] * pg[j];
                    gx[r * d + j] += (gy - m1 - ph[r * d + j] * m2) * pis[r];
                }
            }
        }
    });
    return out;
}

// Parameter-free normalization (gain 1, bias 0); used where the layer wiring
// calls for a norm without introducing trainable parameters.
inline Tensor plain_layer_norm(const Tensor& x, double eps) {
    static thread_local Tensor one, zero;
    std::size_t d = x.shape().back();
    if (!one.defined() || one.dim(0) != d) {
        one = Tensor::full({d}, 1.0);
        zero = Tensor::zeros({d});
    }
    return layer_norm(x, one, zero, eps);
}

// ---------------------------------------------------------------------------
// Shape ops
// ---------------------------------------------------------------------------

inline Tensor reshape(const Tensor& x, Shape new_shape) {
    if (shape_numel(new_shape) != x.numel())
        throw shape_error("reshape: cannot view " + shape_str(x.shape()) + " as " +
                          shape_str(new_shape));
    Tensor out = Tensor::from_vector(std::move(new_shape), x.vec());
    detail::record({x}, out, [](Tape::Node& n) {
        const auto& g = n.output.grad_const();
        auto& gx = n.inputs[0].grad();
        for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
    });
    return out;
}

namespace detail {

inline void swap_axes_copy(const double* src, double* dst, const Shape& shape, std::size_t ax0,
                           std::size_t ax1) {
    std::size_t r = shape.size();
    std::vector<std::size_t> strides(r, 1);
    for (std::size_t i = r - 1; i-- > 0;) strides[i] = strides[i + 1] * shape[i + 1];
    Shape out_shape = shape;
    std::swap(out_shape[ax0], out_shape[ax1]);
    std::vector<std::size_t> out_strides(r, 1);
    for (std::size_t i = r - 1; i-- > 0;) out_strides[i] = out_strides[i + 1] * out_shape[i + 1];
    std::vector<std::size_t> src_stride_for_out(r);
    for (std::size_t i = 0; i < r; ++i) src_stride_for_out[i] = strides[i];
    std::swap(src_stride_for_out[ax0], src_stride_for_out[ax1]);
    std::size_t total = shape_numel(shape);
    std::vector<std::size_t> idx(r, 0);
    for (std::size_t o = 0; o < total; ++o) {
        std::size_t s = 0;
        std::size_t rem = o;
        for (std::size_t i = 0; i < r; ++i) {
            std::size_t q = rem / out_strides[i];
            rem -= q * out_strides[i];
            s += q * src_stride_for_out[i];
        }
        dst[o] = src[s];
    }
}

}  // namespace detail

inline Tensor swap_axes(const Tensor& x, std::size_t ax0, std::size_t ax1) {
    if (ax0 >= x.rank() || ax1 >= x.rank()) throw shape_error("swap_axes: axis out of range");
    Shape out_shape = x.shape();
    std::swap(out_shape[ax0], out_shape[ax1]);
    Tensor out = Tensor::zeros(out_shape);
    detail::swap_axes_copy(x.data(), out.data(), x.shape(), ax0, ax1);
    detail::record({x}, out, [ax0, ax1, out_shape](Tape::Node& n) {
        // gradient of a transpose is the inverse transpose
        std::vector<double> gt(n.output.grad_const().size());
        detail::swap_axes_copy(n.output.grad_const().data(), gt.data(), out_shape, ax0, ax1);
        auto& gx = n.inputs[0].grad();
        for (std::size_t i = 0; i < gt.size(); ++i) gx[i] += gt[i];
    });
    return out;
}

inline Tensor transpose_last2(const Tensor& x) {
    if (x.rank() < 2) throw shape_error("transpose_last2: rank must be >= 2");
    return swap_axes(x, x.rank() - 2, x.rank() - 1);
}

// Concatenation of two tensors along `axis`; all other extents must agree.
inline Tensor concat(const Tensor& a, const Tensor& b, std::size_t axis) {
    if (a.rank() != b.rank() || axis >= a.rank())
        throw shape_error("concat: rank mismatch or bad axis: " + shape_str(a.shape()) + " vs " +
                          shape_str(b.shape()));
    for (std::size_t i = 0; i < a.rank(); ++i)
        if (i != axis && a.dim(i) != b.dim(i))
            throw shape_error("concat: shapes differ off-axis: " + shape_str(a.shape()) + " vs " +
                              shape_str(b.shape()));
    Shape out_shape = a.shape();
    out_shape[axis] += b.dim(axis);
    Tensor out = Tensor::zeros(out_shape);
    std::size_t inner = 1;
    for (std::size_t i = axis + 1; i < a.rank(); ++i) inner *= a.dim(i);
    std::size_t outer = 1;
    for (std::size_t i = 0; i < axis; ++i) outer *= a.dim(i);
    std::size_t wa = a.dim(axis) * inner, wb = b.dim(axis) * inner;
    const double* pa = a.data();
    const double* pb = b.data();
    double* po = out.data();
    for (std::size_t o = 0; o < outer; ++o) {
        std::copy(pa + o * wa, pa + (o + 1) * wa, po + o * (wa + wb));
        std::copy(pb + o * wb, pb + (o + 1) * wb, po + o * (wa + wb) + wa);
    }
    detail::record({a, b}, out, [outer, wa, wb](Tape::Node& n) {
        const auto& g = n.output.grad_const();
        if (n.inputs[0].requires_grad()) {
            auto& ga = n.inputs[0].grad();
            for (std::size_t o = 0; o < outer; ++o)
                for (std::size_t i = 0; i < wa; ++i) ga[o * wa + i] += g[o * (wa + wb) + i];
        }
        if (n.inputs[1].requires_grad()) {
            auto& gb = n.inputs[1].grad();
            for (std::size_t o = 0; o < outer; ++o)
                for (std::size_t i = 0; i < wb; ++i) gb[o * wb + i] += g[o * (wa + wb) + wa + i];
        }
    });
    return out;
}

// Row concatenation of [La,d] and [Lb,d] (sequence axis for batched input).
inline Tensor concat_seq(const Tensor& a, const Tensor& b) {
    if (a.rank() < 2) throw shape_error("concat_seq: rank must be >= 2");
    return concat(a, b, a.rank() - 2);
}

// ---------------------------------------------------------------------------
// Reductions, selection, broadcast
// ---------------------------------------------------------------------------

inline Tensor sum_all(const Tensor& x) {
    Tensor out = Tensor::zeros({1});
    double acc = 0.0;
    const double* px = x.data();
    for (std::size_t i = 0; i < x.numel(); ++i) acc += px[i];
    out.data()[0] = acc;
    detail::record({x}, out, [](Tape::Node& n) {
        double g = n.output.grad_const()[0];
        auto& gx = n.inputs[0].grad();
        for (auto& v : gx) v += g;
    });
    return out;
}

inline Tensor mean_all(const Tensor& x) {
    if (x.numel() == 0) throw value_error("mean_all: empty tensor");
    return scale(sum_all(x), 1.0 / double(x.numel()));
}

// x[B,T,D] -> x[:, t, :]
inline Tensor select_time(const Tensor& x, std::size_t t) {
    if (x.rank() != 3) throw shape_error("select_time: need rank-3 input");
    std::size_t B = x.dim(0), T = x.dim(1), D = x.dim(2);
    if (t >= T) throw shape_error("select_time: index out of range");
    Tensor out = Tensor::zeros({B, D});
    for (std::size_t b = 0; b < B; ++b)
        std::copy(x.data() + (b * T + t) * D, x.data() + (b * T + t + 1) * D, out.data() + b * D);
    detail::record({x}, out, [B, T, D, t](Tape::Node& n) {
        const auto& g = n.output.grad_const();
        auto& gx = n.inputs[0].grad();
        for (std::size_t b = 0; b < B; ++b)
            for (std::size_t j = 0; j < D; ++j) gx[(b * T + t) * D + j] += g[b * D + j];
    });
    return out;
}

// v[B,D] -> [B,T,D], repeating along the new time axis.
inline Tensor broadcast_time(const Tensor& v, std::size_t T) {
    if (v.rank() != 2) throw shape_error("broadcast_time: need rank-2 input");
    std::size_t B = v.dim(0), D = v.dim(1);
    Tensor out = Tensor::zeros({B, T, D});
    for (std::size_t b = 0; b < B; ++b)
        for (std::size_t t = 0; t < T; ++t)
            std::copy(v.data() + b * D, v.data() + (b + 1) * D, out.data() + (b * T + t) * D);
    detail::record({v}, out, [B, T, D](Tape::Node& n) {
        const auto& g = n.output.grad_const();
        auto& gv = n.inputs[0].grad();
        for (std::size_t b = 0; b < B; ++b)
            for (std::size_t t = 0; t < T; ++t)
                for (std::size_t j = 0; j < D; ++j) gv[b * D + j] += g[(b * T + t) * D + j];
    });
    return out;
}

// Mean of unmasked time steps: x[B,T,D], mask[B,T] -> [B,D].
inline Tensor masked_mean_time(const Tensor& x, const Mask& mask) {
    if (x.rank() != 3) throw shape_error("masked_mean_time: need rank-3 input");
    std::size_t B = x.dim(0), T = x.dim(1), D = x.dim(2);
    if (mask.shape != Shape{B, T}) throw shape_error("masked_mean_time: mask must be [B,T]");
    std::vector<double> inv_count(B);
    for (std::size_t b = 0; b < B; ++b) {
        std::size_t c = 0;
        for (std::size_t t = 0; t < T; ++t) c += mask.at(b * T + t) ? 1 : 0;
        if (c == 0) throw value_error("masked_mean_time: row " + std::to_string(b) + " fully masked");
        inv_count[b] = 1.0 / double(c);
    }
    Tensor out = Tensor::zeros({B, D});
    for (std::size_t b = 0; b < B; ++b)
        for (std::size_t t = 0; t < T; ++t) {
            if (!mask.at(b * T + t)) continue;
            for (std::size_t j = 0; j < D; ++j)
                out.data()[b * D + j] += x.data()[(b * T + t) * D + j] * inv_count[b];
        }
    Mask m = mask;
    detail::record({x}, out, [B, T, D, m, inv_count](Tape::Node& n) {
        const auto& g = n.output.grad_const();
        auto& gx = n.inputs[0].grad();
        for (std::size_t b = 0; b < B; ++b)
            for (std::size_t t = 0; t < T; ++t) {
                if (!m.at(b * T + t)) continue;
                for (std::size_t j = 0; j < D; ++j)
                    gx[(b * T + t) * D + j] += g[b * D + j] * inv_count[b];
            }
    });
    return out;
}

// First n rows of a rank-2 tensor.
inline Tensor slice_rows(const Tensor& x, std::size_t n) {
    if (x.rank() != 2) throw shape_error("slice_rows: need rank-2 input");
    std::size_t N = x.dim(0), D = x.dim(1);
    if (n > N) throw shape_error("slice_rows: slice longer than input");
    Tensor out = Tensor::zeros({n, D});
    std::copy(x.data(), x.data() + n * D, out.data());
    detail::record({x}, out, [n, D](Tape::Node& node) {
        const auto& g = node.output.grad_const();
        auto& gx = node.inputs[0].grad();
        for (std::size_t i = 0; i < n * D; ++i) gx[i] += g[i];
    });
    return out;
}

// x[B,T,D] + pos[T',D] broadcast over the batch axis, using the first T rows
// of the position table (T' >= T).
inline Tensor add_position(const Tensor& x, const Tensor& pos) {
    if (x.rank() != 3 || pos.rank() != 2) throw shape_error("add_position: need [B,T,D] and [T',D]");
    std::size_t B = x.dim(0), T = x.dim(1), D = x.dim(2);
    if (pos.dim(0) < T || pos.dim(1) != D)
        throw shape_error("add_position: table " + shape_str(pos.shape()) + " too small for " +
                          shape_str(x.shape()));
    Tensor out = Tensor::zeros(x.shape());
    const double* px = x.data();
    const double* pp = pos.data();
    double* po = out.data();
    for (std::size_t b = 0; b < B; ++b)
        for (std::size_t t = 0; t < T; ++t)
            for (std::size_t j = 0; j < D; ++j)
                po[(b * T + t) * D + j] = px[(b * T + t) * D + j] + pp[t * D + j];
    detail::record({x, pos}, out, [B, T, D](Tape::Node& n) {
        const auto& g = n.output.grad_const();
        if (n.inputs[0].requires_grad()) {
            auto& gx = n.inputs[0].grad();
            for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
        }
        if (n.inputs[1].requires_grad()) {
            auto& gp = n.inputs[1].grad();
            for (std::size_t b = 0; b < B; ++b)
                for (std::size_t t = 0; t < T; ++t)
                    for (std::size_t j = 0; j < D; ++j) gp[t * D + j] += g[(b * T + t) * D + j];
        }
    });
    return out;
}

// Embedding lookup: table[V,D] gathered by integer ids (shape ids_shape).
inline Tensor embedding(const Tensor& table, const std::vector<int>& ids, Shape ids_shape) {
    if (table.rank() != 2) throw shape_error("embedding: table must be rank 2");
    if (shape_numel(ids_shape) != ids.size()) throw shape_error("embedding: ids shape mismatch");
    std::size_t V = table.dim(0), D = table.dim(1);
    Shape out_shape = ids_shape;
    out_shape.push_back(D);
    Tensor out = Tensor::zeros(out_shape);
    for (std::size_t i = 0; i < ids.size(); ++i) {
        int id = ids[i];
        if (id < 0 || std::size_t(id) >= V)
            throw value_error("embedding: id " + std::to_string(id) + " outside vocab of " +
                              std::to_string(V));
        std::copy(table.data() + std::size_t(id) * D, table.data() + (std::size_t(id) + 1) * D,
                  out.data() + i * D);
    }
    detail::record({table}, out, [ids, D](Tape::Node& n) {
        const auto& g = n.output.grad_const();
        auto& gt = n.inputs[0].grad();
        for (std::size_t i = 0; i < ids.size(); ++i)
            for (std::size_t j = 0; j < D; ++j) gt[std::size_t(ids[i]) * D + j] += g[i * D + j];
    });
    return out;
}

// Inverted dropout with an explicit random source; identity in eval mode.
inline Tensor dropout(const Tensor& x, double p, std::mt19937_64& rng, bool training) {
    if (p < 0.0 || p >= 1.0) throw value_error("dropout: p must be in [0,1)");
    if (!training || p == 0.0) return x;
    Tensor keep = Tensor::zeros(x.shape());
    std::bernoulli_distribution dist(1.0 - p);
    double inv = 1.0 / (1.0 - p);
    for (auto& v : keep.vec()) v = dist(rng) ? inv : 0.0;
    return mul(x, keep);
}

// x.W^T + b + lora_scale * (x.A^T).B^T, with W frozen and A,B the trainable
// low-rank factors (A:[r,in], B:[out,r]). Composed from primitive ops so the
// tape handles all gradients.
inline Tensor lora_linear(const Tensor& x, const Tensor& w, const Tensor& bias, const Tensor& a,
                          const Tensor& b, double lora_scale) {
    Tensor out = linear(x, w, bias);
    if (!a.defined() || !b.defined()) return out;
    if (a.dim(0) > w.dim(1))
        throw config_error("lora_linear: rank " + std::to_string(a.dim(0)) + " exceeds width " +
                           std::to_string(w.dim(1)));
    Tensor low = linear(x, a);          // [..., r]
    Tensor up = linear(low, b);         // [..., out]
    return add(out, scale(up, lora_scale));
}

}  // namespace pgf
