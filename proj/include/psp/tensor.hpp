#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "psp/rng.hpp"

namespace psp {

// Dense row-major f64 tensors with reverse-mode autodiff recorded on a tape.
// Scalars are rank-0 tensors (empty shape, one element).

using Shape = std::vector<int64_t>;

int64_t shape_numel(const Shape& s);
std::string shape_str(const Shape& s);

namespace detail {
struct TensorNode {
    Shape shape;
    std::vector<double> data;
    std::vector<double> grad;  // empty until a gradient is accumulated
    bool requires_grad = false;
};
}  // namespace detail

class Tensor {
  public:
    Tensor() = default;

    static Tensor zeros(Shape shape, bool requires_grad = false);
    static Tensor full(Shape shape, double value, bool requires_grad = false);
    static Tensor from_data(Shape shape, std::vector<double> data, bool requires_grad = false);
    static Tensor scalar(double value, bool requires_grad = false);
    static Tensor rand_uniform(Shape shape, RngState& rng, double lo, double hi,
                               bool requires_grad = false);
    static Tensor rand_normal(Shape shape, RngState& rng, double mean, double sigma,
                              bool requires_grad = false);

    bool defined() const { return node_ != nullptr; }
    const Shape& shape() const;
    int64_t dim() const { return static_cast<int64_t>(shape().size()); }
    int64_t numel() const;

    const std::vector<double>& data() const;
    // Direct access to the stored values. Mutating a tensor that already
    // participates in a recorded graph invalidates that tape; restrict to
    // leaves (parameters, buffers).
    std::vector<double>& raw_data();

    double item() const;  // value of a one-element tensor

    bool requires_grad() const;
    void set_requires_grad(bool v);
    bool has_grad() const;
    const std::vector<double>& grad() const;
    void zero_grad();

    // Value copy detached from the graph (requires_grad = false).
    Tensor detach() const;

    const void* id() const { return node_.get(); }
    std::shared_ptr<detail::TensorNode> node() const { return node_; }

  private:
    explicit Tensor(std::shared_ptr<detail::TensorNode> n) : node_(std::move(n)) {}
    std::shared_ptr<detail::TensorNode> node_;
    friend Tensor wrap_node(std::shared_ptr<detail::TensorNode>);
};

// --- gradient tape -----------------------------------------------------------

class Tape {
  public:
    static Tape& active();

    void record(std::function<void()> backward_step);
    // Seeds d(loss)/d(loss) = 1 and replays the tape in reverse, touching each
    // recorded step exactly once. A second call without clear() is an error.
    void run_backward(const Tensor& loss);
    void clear();
    size_t size() const { return steps_.size(); }
    bool consumed() const { return consumed_; }

  private:
    std::vector<std::function<void()>> steps_;
    bool consumed_ = false;
};

bool grad_enabled();

// Disables tape recording in scope (forward-only evaluation).
class NoGradGuard {
  public:
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

  private:
    bool prev_;
};

void backward(const Tensor& loss);

// --- operations --------------------------------------------------------------

// Batched matrix product [..., m, k] x [..., k, n] -> [..., m, n]; leading
// dimensions broadcast (equal or 1).
Tensor matmul(const Tensor& a, const Tensor& b);

// Elementwise binaries with trailing-aligned broadcasting.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);

Tensor tanh(const Tensor& x);
Tensor exp(const Tensor& x);
Tensor log(const Tensor& x);  // domain error on non-positive input
Tensor sqrt(const Tensor& x);
Tensor leaky_relu(const Tensor& x, double slope);
Tensor scale(const Tensor& x, double c);

enum class Reduce { sum, mean, max };
Tensor reduce(Reduce kind, const Tensor& x, std::vector<int64_t> axes);
Tensor reduce_sum(const Tensor& x, std::vector<int64_t> axes);
Tensor reduce_mean(const Tensor& x, std::vector<int64_t> axes);
Tensor reduce_max(const Tensor& x, std::vector<int64_t> axes);

Tensor reshape(const Tensor& x, Shape new_shape);
Tensor permute(const Tensor& x, std::vector<int64_t> axis_order);

// Affine map over the trailing axis; pass an undefined Tensor to skip the bias.
Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b = Tensor());

// Concatenate along axis 0.
Tensor concat0(const Tensor& a, const Tensor& b);

// out[..., i, j] = src[..., rows[i], cols[j]]; backward scatter-adds.
Tensor gather_grid(const Tensor& src, const std::vector<int64_t>& rows,
                   const std::vector<int64_t>& cols);

// Mean over groups of the trailing axis: out[..., s] = mean_{j: seg[j]==s} x[..., j].
// Every segment in [0, n_segments) must be non-empty.
Tensor segment_mean(const Tensor& x, const std::vector<int64_t>& seg, int64_t n_segments);

// Depthwise convolution over axis 1 of x: [M, T, N, C] with kernel [C, k]
// (k odd), zero padding, same-length output.
Tensor temporal_conv_depthwise(const Tensor& x, const Tensor& w, const Tensor& b);

// Inverted dropout; rate 0 is an exact pass-through that draws no randomness.
Tensor dropout(const Tensor& x, double rate, RngState& rng);

// Running statistics for batch_norm; plain value buffers, never on the tape.
struct BatchNormState {
    Tensor running_mean;
    Tensor running_var;
    static BatchNormState init(const Shape& feature_shape);
};

// Normalizes over the leading `n_stat_axes` axes; gamma/beta are shaped like
// the remaining (feature) axes. Train mode uses batch statistics and updates
// the running buffers with the given momentum; eval mode uses the buffers.
Tensor batch_norm(const Tensor& x, int64_t n_stat_axes, const Tensor& gamma, const Tensor& beta,
                  BatchNormState& state, bool train, double eps = 1e-5, double momentum = 0.1);

// Mean over rows of -log softmax(logits)[true class], max-subtraction stabilized.
// y must be exactly one-hot.
Tensor softmax_cross_entropy(const Tensor& logits, const Tensor& y);
Tensor softmax_rows(const Tensor& logits);

// --- optimizer ----------------------------------------------------------------

struct SgdState {
    // Velocity per parameter, keyed by node identity.
    std::vector<std::pair<std::shared_ptr<detail::TensorNode>, std::vector<double>>> velocity;
    std::vector<double>& velocity_for(const Tensor& param);
};

// Nesterov update: d = g + wd*p; v <- mu*v + d; p <- p - lr*(d + mu*v).
// Parameters without an accumulated gradient are skipped.
void sgd_nesterov_step(std::vector<Tensor>& params, double lr, double momentum,
                       double weight_decay, SgdState& state);

}  // namespace psp
