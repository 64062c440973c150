#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "dkgen/common.hpp"

namespace dkgen {

using Shape = std::vector<std::size_t>;

std::string shape_str(const Shape& s);

namespace detail {

struct TensorImpl {
    Shape shape;
    std::vector<double> data;
    bool requires_grad = false;
    std::vector<double> grad;  // empty until first needed
    std::vector<std::shared_ptr<TensorImpl>> parents;
    std::function<void()> backprop;  // reads this->grad, accumulates into parents

    std::size_t size() const { return data.size(); }
    std::vector<double>& grad_buf();  // lazily zero-initialized
};

}  // namespace detail

// Dense float64 tensor with dynamic tape-based reverse-mode autodiff.
// Values are immutable once created; only optimizer updates mutate in place
// (via mutable_data on leaf parameters).
class Tensor {
  public:
    Tensor() = default;

    static Tensor zeros(Shape shape, bool requires_grad = false);
    static Tensor full(Shape shape, double value, bool requires_grad = false);
    static Tensor from(Shape shape, std::vector<double> data, bool requires_grad = false);
    static Tensor scalar(double value, bool requires_grad = false);

    bool defined() const { return impl_ != nullptr; }
    const Shape& shape() const;
    std::size_t size() const;
    std::size_t dim(std::size_t axis) const;
    std::size_t rank() const { return shape().size(); }

    std::span<const double> data() const;
    std::span<double> mutable_data();  // for optimizer in-place updates only
    double item() const;               // requires size() == 1
    double at(std::size_t i) const;
    double at(std::size_t r, std::size_t c) const;  // 2-D

    bool requires_grad() const;
    bool has_grad() const;
    std::span<const double> grad() const;
    void zero_grad();

    // Accumulates gradients over the recorded graph. Requires a scalar with
    // requires_grad; repeated calls accumulate additively.
    void backward() const;

    // Same values, detached from the graph (no grad tracking).
    Tensor detach() const;

    std::shared_ptr<detail::TensorImpl> impl() const { return impl_; }

  private:
    explicit Tensor(std::shared_ptr<detail::TensorImpl> impl) : impl_(std::move(impl)) {}
    std::shared_ptr<detail::TensorImpl> impl_;

    friend Tensor make_op(Shape shape, std::vector<double> data,
                          std::vector<Tensor> inputs,
                          std::function<void(detail::TensorImpl&)> backprop);
};

// Scoped guard disabling tape recording (inference / finite differences).
class NoGradGuard {
  public:
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

  private:
    bool prev_;
};

bool grad_enabled();

// ---- elementwise / arithmetic ----
Tensor add(const Tensor& a, const Tensor& b);        // same shape
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);        // elementwise
Tensor scale(const Tensor& a, double c);
Tensor add_scalar(const Tensor& a, double c);
Tensor neg(const Tensor& a);
Tensor log(const Tensor& a);
Tensor exp(const Tensor& a);
Tensor relu(const Tensor& a);
Tensor gelu(const Tensor& a);      // exact erf form
Tensor softplus(const Tensor& a);  // ln(1 + e^x), overflow-safe

// ---- matrix ops (2-D) ----
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);
Tensor slice_rows(const Tensor& a, std::size_t begin, std::size_t end);
Tensor slice_cols(const Tensor& a, std::size_t begin, std::size_t end);
Tensor concat_rows(const std::vector<Tensor>& parts);
Tensor concat_cols(const std::vector<Tensor>& parts);
Tensor reshape(const Tensor& a, Shape shape);  // same element count

// ---- reductions ----
Tensor sum(const Tensor& a);   // scalar
Tensor mean(const Tensor& a);  // scalar
Tensor stack_scalars(const std::vector<Tensor>& scalars);  // k scalars -> [k]

// ---- nn primitives ----
// Softmax along `axis` (0 or last); max-subtracted for stability.
Tensor softmax(const Tensor& a, int axis = -1);
// Row softmax over a 2-D tensor with a 0/1 keep-mask; masked entries get 0.
Tensor softmax_masked(const Tensor& a, const std::vector<uint8_t>& keep);
// Row-wise log-softmax over the last axis (1-D or 2-D).
Tensor log_softmax(const Tensor& a);
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias,
                  double eps = 1e-5);
Tensor embedding_lookup(const Tensor& table, const std::vector<int>& ids);
Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b);  // x·w + b

class Rng;
// Inverted dropout; identity when rate == 0. Draws one uniform per element.
Tensor dropout(const Tensor& a, double rate, Rng& rng);

// Deterministic RNG. Raw mt19937_64 output is standardized by the C++
// standard; the value transforms below are hand-rolled so streams are
// bit-identical across standard libraries (std distributions are not).
class Rng {
  public:
    static constexpr const char* kAlgorithm = "mt19937_64";

    explicit Rng(std::uint64_t seed);

    std::uint64_t seed() const { return seed_; }
    std::uint64_t next_u64();
    double uniform();                          // [0, 1)
    double normal(double mean = 0.0, double stddev = 1.0);
    std::size_t uniform_index(std::size_t n);  // [0, n)

    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (std::size_t i = v.size(); i > 1; --i) {
            std::swap(v[i - 1], v[uniform_index(i)]);
        }
    }

  private:
    std::uint64_t seed_;
    struct State;
    std::shared_ptr<State> state_;
    bool have_spare_ = false;
    double spare_ = 0.0;
};

using ParamMap = std::map<std::string, Tensor>;

struct AdamWOptions {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.01;
};

// Decoupled-weight-decay Adam, in-place on named parameters.
class AdamW {
  public:
    explicit AdamW(AdamWOptions opt) : opt_(opt) {}

    // Updates every requires_grad parameter; throws Error naming any
    // parameter missing its gradient.
    void step(ParamMap& params);
    static void zero_grads(ParamMap& params);
    long step_count() const { return t_; }
    const AdamWOptions& options() const { return opt_; }
    void set_lr(double lr) { opt_.lr = lr; }

  private:
    struct Slot {
        std::vector<double> m, v;
    };
    AdamWOptions opt_;
    std::map<std::string, Slot> slots_;
    long t_ = 0;
};

}  // namespace dkgen
