#include "psp/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <limits>
#include <sstream>
#include <stdexcept>

#include <cblas.h>

namespace psp {

int64_t shape_numel(const Shape& s) {
    int64_t n = 1;
    for (int64_t d : s) n *= d;
    return n;
}

std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << '[';
    for (size_t i = 0; i < s.size(); ++i) {
        if (i) os << ',';
        os << s[i];
    }
    os << ']';
    return os.str();
}

namespace {

void check_shape_valid(const Shape& s, const char* who) {
    for (int64_t d : s) {
        if (d < 1) {
            throw std::invalid_argument(std::string(who) + ": shape " + shape_str(s) +
                                        " has an entry < 1");
        }
    }
}

std::shared_ptr<detail::TensorNode> make_node(Shape shape, std::vector<double> data,
                                              bool requires_grad) {
    auto n = std::make_shared<detail::TensorNode>();
    n->shape = std::move(shape);
    n->data = std::move(data);
    n->requires_grad = requires_grad;
    return n;
}

void ensure_grad(detail::TensorNode& n) {
    if (n.grad.empty()) n.grad.assign(n.data.size(), 0.0);
}

// Leading-dim strides aligned to an output rank; 0 where the input broadcasts.
std::vector<int64_t> aligned_strides(const Shape& in, const Shape& out) {
    const int64_t r_out = static_cast<int64_t>(out.size());
    const int64_t r_in = static_cast<int64_t>(in.size());
    std::vector<int64_t> strides(r_out, 0);
    int64_t run = 1;
    std::vector<int64_t> own(r_in);
    for (int64_t d = r_in - 1; d >= 0; --d) {
        own[d] = run;
        run *= in[d];
    }
    for (int64_t d = 0; d < r_in; ++d) {
        const int64_t od = r_out - r_in + d;
        strides[od] = (in[d] == 1 && out[od] != 1) ? 0 : own[d];
    }
    return strides;
}

struct BinaryPlan {
    Shape out;
    std::vector<int64_t> sa, sb;
};

BinaryPlan make_binary_plan(const Shape& a, const Shape& b, const char* op) {
    const size_t rank = std::max(a.size(), b.size());
    Shape out(rank);
    for (size_t i = 0; i < rank; ++i) {
        const int64_t da = i < rank - a.size() ? 1 : a[i - (rank - a.size())];
        const int64_t db = i < rank - b.size() ? 1 : b[i - (rank - b.size())];
        if (da != db && da != 1 && db != 1) {
            throw std::invalid_argument(std::string(op) + ": shapes " + shape_str(a) + " and " +
                                        shape_str(b) + " are not broadcast-compatible");
        }
        out[i] = std::max(da, db);
    }
    return {out, aligned_strides(a, out), aligned_strides(b, out)};
}

// Calls f(out_flat, a_flat, b_flat) for every output element, row-major order.
template <typename Fn>
void for_each_pair(const BinaryPlan& p, Fn&& f) {
    const int64_t rank = static_cast<int64_t>(p.out.size());
    const int64_t n = shape_numel(p.out);
    std::vector<int64_t> idx(rank, 0);
    int64_t ia = 0, ib = 0;
    for (int64_t o = 0; o < n; ++o) {
        f(o, ia, ib);
        for (int64_t d = rank - 1; d >= 0; --d) {
            ++idx[d];
            ia += p.sa[d];
            ib += p.sb[d];
            if (idx[d] < p.out[d]) break;
            ia -= p.sa[d] * p.out[d];
            ib -= p.sb[d] * p.out[d];
            idx[d] = 0;
        }
    }
}

bool openblas_single_thread_init() {
    openblas_set_num_threads(1);
    return true;
}

}  // namespace

Tensor wrap_node(std::shared_ptr<detail::TensorNode> n) { return Tensor(std::move(n)); }

// --- Tensor ------------------------------------------------------------------

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
    check_shape_valid(shape, "Tensor::zeros");
    const int64_t n = shape_numel(shape);
    return wrap_node(make_node(std::move(shape), std::vector<double>(n, 0.0), requires_grad));
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
    check_shape_valid(shape, "Tensor::full");
    const int64_t n = shape_numel(shape);
    return wrap_node(make_node(std::move(shape), std::vector<double>(n, value), requires_grad));
}

Tensor Tensor::from_data(Shape shape, std::vector<double> data, bool requires_grad) {
    check_shape_valid(shape, "Tensor::from_data");
    if (shape_numel(shape) != static_cast<int64_t>(data.size())) {
        throw std::invalid_argument("Tensor::from_data: shape " + shape_str(shape) + " needs " +
                                    std::to_string(shape_numel(shape)) + " values, got " +
                                    std::to_string(data.size()));
    }
    return wrap_node(make_node(std::move(shape), std::move(data), requires_grad));
}

Tensor Tensor::scalar(double value, bool requires_grad) {
    return wrap_node(make_node({}, {value}, requires_grad));
}

Tensor Tensor::rand_uniform(Shape shape, RngState& rng, double lo, double hi,
                            bool requires_grad) {
    check_shape_valid(shape, "Tensor::rand_uniform");
    std::vector<double> d(shape_numel(shape));
    for (double& v : d) v = rng.uniform(lo, hi);
    return wrap_node(make_node(std::move(shape), std::move(d), requires_grad));
}

Tensor Tensor::rand_normal(Shape shape, RngState& rng, double mean, double sigma,
                           bool requires_grad) {
    check_shape_valid(shape, "Tensor::rand_normal");
    std::vector<double> d(shape_numel(shape));
    for (double& v : d) v = rng.normal(mean, sigma);
    return wrap_node(make_node(std::move(shape), std::move(d), requires_grad));
}

const Shape& Tensor::shape() const {
    if (!node_) throw std::runtime_error("Tensor: undefined tensor");
    return node_->shape;
}

int64_t Tensor::numel() const { return shape_numel(shape()); }

const std::vector<double>& Tensor::data() const {
    if (!node_) throw std::runtime_error("Tensor: undefined tensor");
    return node_->data;
}

std::vector<double>& Tensor::raw_data() {
    if (!node_) throw std::runtime_error("Tensor: undefined tensor");
    return node_->data;
}

double Tensor::item() const {
    if (numel() != 1) {
        throw std::invalid_argument("Tensor::item: tensor of shape " + shape_str(shape()) +
                                    " is not a scalar");
    }
    return node_->data[0];
}

bool Tensor::requires_grad() const { return node_ && node_->requires_grad; }

void Tensor::set_requires_grad(bool v) {
    if (!node_) throw std::runtime_error("Tensor: undefined tensor");
    node_->requires_grad = v;
}

bool Tensor::has_grad() const { return node_ && !node_->grad.empty(); }

const std::vector<double>& Tensor::grad() const {
    if (!has_grad()) {
        throw std::runtime_error("Tensor::grad: no gradient has been accumulated");
    }
    return node_->grad;
}

void Tensor::zero_grad() {
    if (node_) node_->grad.clear();
}

Tensor Tensor::detach() const {
    if (!node_) return Tensor();
    return wrap_node(make_node(node_->shape, node_->data, false));
}

// --- tape --------------------------------------------------------------------

namespace {
thread_local bool g_grad_enabled = true;
}

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : prev_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = prev_; }

Tape& Tape::active() {
    thread_local Tape tape;
    return tape;
}

void Tape::record(std::function<void()> backward_step) {
    steps_.push_back(std::move(backward_step));
}

void Tape::run_backward(const Tensor& loss) {
    if (!loss.defined() || loss.numel() != 1) {
        throw std::invalid_argument("backward: loss must be a scalar tensor");
    }
    if (consumed_) {
        throw std::runtime_error("backward: tape already consumed; call Tape::clear() first");
    }
    auto n = loss.node();
    ensure_grad(*n);
    n->grad[0] = 1.0;
    for (auto it = steps_.rbegin(); it != steps_.rend(); ++it) (*it)();
    consumed_ = true;
}

void Tape::clear() {
    steps_.clear();
    consumed_ = false;
}

void backward(const Tensor& loss) { Tape::active().run_backward(loss); }

// --- op helpers ----------------------------------------------------------------

namespace {

using NodePtr = std::shared_ptr<detail::TensorNode>;

Tensor make_result(Shape shape, std::vector<double> data, bool requires_grad) {
    return wrap_node(make_node(std::move(shape), std::move(data), requires_grad && g_grad_enabled));
}

bool track(const Tensor& t) { return g_grad_enabled && t.requires_grad(); }

}  // namespace

// --- matmul --------------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
    static const bool blas_ready = openblas_single_thread_init();
    (void)blas_ready;

    const Shape& sa = a.shape();
    const Shape& sb = b.shape();
    if (sa.size() < 2 || sb.size() < 2) {
        throw std::invalid_argument("matmul: operands must have rank >= 2, got " + shape_str(sa) +
                                    " and " + shape_str(sb));
    }
    const int64_t m = sa[sa.size() - 2], k = sa[sa.size() - 1];
    const int64_t kb = sb[sb.size() - 2], n = sb[sb.size() - 1];
    if (k != kb) {
        throw std::invalid_argument("matmul: inner dimensions disagree: " + shape_str(sa) +
                                    " x " + shape_str(sb));
    }
    const Shape lead_a(sa.begin(), sa.end() - 2);
    const Shape lead_b(sb.begin(), sb.end() - 2);
    BinaryPlan lead = make_binary_plan(lead_a, lead_b, "matmul");

    Shape out_shape = lead.out;
    out_shape.push_back(m);
    out_shape.push_back(n);
    std::vector<double> out(shape_numel(out_shape));

    const int64_t block_a = m * k, block_b = k * n, block_o = m * n;
    const double* pa = a.data().data();
    const double* pb = b.data().data();

    std::vector<std::pair<int64_t, int64_t>> block_offsets;  // (a, b) per leading index
    for_each_pair(lead, [&](int64_t o, int64_t ia, int64_t ib) {
        block_offsets.emplace_back(ia, ib);
        cblas_dgemm(CblasRowMajor, CblasNoTrans, CblasNoTrans, (int)m, (int)n, (int)k, 1.0,
                    pa + ia * block_a, (int)k, pb + ib * block_b, (int)n, 0.0,
                    out.data() + o * block_o, (int)n);
    });

    Tensor result = make_result(std::move(out_shape), std::move(out), track(a) || track(b));
    if (result.requires_grad()) {
        NodePtr an = a.node(), bn = b.node(), on = result.node();
        Tape::active().record([an, bn, on, block_offsets, m, n, k, block_a, block_b, block_o]() {
            if (on->grad.empty()) return;
            const double* go = on->grad.data();
            if (an->requires_grad) {
                ensure_grad(*an);
                for (size_t o = 0; o < block_offsets.size(); ++o) {
                    cblas_dgemm(CblasRowMajor, CblasNoTrans, CblasTrans, (int)m, (int)k, (int)n,
                                1.0, go + o * block_o, (int)n,
                                bn->data.data() + block_offsets[o].second * block_b, (int)n, 1.0,
                                an->grad.data() + block_offsets[o].first * block_a, (int)k);
                }
            }
            if (bn->requires_grad) {
                ensure_grad(*bn);
                for (size_t o = 0; o < block_offsets.size(); ++o) {
                    cblas_dgemm(CblasRowMajor, CblasTrans, CblasNoTrans, (int)k, (int)n, (int)m,
                                1.0, an->data.data() + block_offsets[o].first * block_a, (int)k,
                                go + o * block_o, (int)n, 1.0,
                                bn->grad.data() + block_offsets[o].second * block_b, (int)n);
                }
            }
        });
    }
    return result;
}

// --- elementwise binaries --------------------------------------------------------

namespace {

enum class BinKind { add, sub, mul, div };

Tensor binary_op(BinKind kind, const Tensor& a, const Tensor& b, const char* name) {
    BinaryPlan plan = make_binary_plan(a.shape(), b.shape(), name);
    const double* pa = a.data().data();
    const double* pb = b.data().data();
    std::vector<double> out(shape_numel(plan.out));

    if (a.shape() == b.shape()) {
        const int64_t n = static_cast<int64_t>(out.size());
        switch (kind) {
            case BinKind::add: for (int64_t i = 0; i < n; ++i) out[i] = pa[i] + pb[i]; break;
            case BinKind::sub: for (int64_t i = 0; i < n; ++i) out[i] = pa[i] - pb[i]; break;
            case BinKind::mul: for (int64_t i = 0; i < n; ++i) out[i] = pa[i] * pb[i]; break;
            case BinKind::div: for (int64_t i = 0; i < n; ++i) out[i] = pa[i] / pb[i]; break;
        }
    } else {
        for_each_pair(plan, [&](int64_t o, int64_t ia, int64_t ib) {
            switch (kind) {
                case BinKind::add: out[o] = pa[ia] + pb[ib]; break;
                case BinKind::sub: out[o] = pa[ia] - pb[ib]; break;
                case BinKind::mul: out[o] = pa[ia] * pb[ib]; break;
                case BinKind::div: out[o] = pa[ia] / pb[ib]; break;
            }
        });
    }

    Tensor result = make_result(plan.out, std::move(out), track(a) || track(b));
    if (result.requires_grad()) {
        NodePtr an = a.node(), bn = b.node(), on = result.node();
        Tape::active().record([kind, an, bn, on, plan]() {
            if (on->grad.empty()) return;
            const double* go = on->grad.data();
            const bool ga = an->requires_grad, gb = bn->requires_grad;
            if (ga) ensure_grad(*an);
            if (gb) ensure_grad(*bn);
            for_each_pair(plan, [&](int64_t o, int64_t ia, int64_t ib) {
                switch (kind) {
                    case BinKind::add:
                        if (ga) an->grad[ia] += go[o];
                        if (gb) bn->grad[ib] += go[o];
                        break;
                    case BinKind::sub:
                        if (ga) an->grad[ia] += go[o];
                        if (gb) bn->grad[ib] -= go[o];
                        break;
                    case BinKind::mul:
                        if (ga) an->grad[ia] += go[o] * bn->data[ib];
                        if (gb) bn->grad[ib] += go[o] * an->data[ia];
                        break;
                    case BinKind::div: {
                        const double inv = 1.0 / bn->data[ib];
                        if (ga) an->grad[ia] += go[o] * inv;
                        if (gb) bn->grad[ib] -= go[o] * an->data[ia] * inv * inv;
                        break;
                    }
                }
            });
        });
    }
    return result;
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) { return binary_op(BinKind::add, a, b, "add"); }
Tensor sub(const Tensor& a, const Tensor& b) { return binary_op(BinKind::sub, a, b, "sub"); }
Tensor mul(const Tensor& a, const Tensor& b) { return binary_op(BinKind::mul, a, b, "mul"); }
Tensor div(const Tensor& a, const Tensor& b) { return binary_op(BinKind::div, a, b, "div"); }

// --- elementwise unaries ---------------------------------------------------------

namespace {

// forward value and d(out)/d(in) as a function of (x, y).
template <typename Fwd, typename Bwd>
Tensor unary_op(const Tensor& x, Fwd&& fwd, Bwd&& bwd) {
    const int64_t n = x.numel();
    std::vector<double> out(n);
    const double* px = x.data().data();
    for (int64_t i = 0; i < n; ++i) out[i] = fwd(px[i]);

    Tensor result = make_result(x.shape(), std::move(out), track(x));
    if (result.requires_grad()) {
        NodePtr xn = x.node(), on = result.node();
        Tape::active().record([xn, on, bwd]() {
            if (on->grad.empty()) return;
            ensure_grad(*xn);
            const int64_t n = static_cast<int64_t>(on->grad.size());
            for (int64_t i = 0; i < n; ++i) {
                xn->grad[i] += on->grad[i] * bwd(xn->data[i], on->data[i]);
            }
        });
    }
    return result;
}

}  // namespace

Tensor tanh(const Tensor& x) {
    // std::tanh rounds to exactly +-1 for |v| >~ 19; keep the open range.
    return unary_op(
        x,
        [](double v) {
            const double y = std::tanh(v);
            if (y >= 1.0) return std::nextafter(1.0, 0.0);
            if (y <= -1.0) return std::nextafter(-1.0, 0.0);
            return y;
        },
        [](double, double y) { return 1.0 - y * y; });
}

Tensor exp(const Tensor& x) {
    return unary_op(
        x, [](double v) { return std::exp(v); }, [](double, double y) { return y; });
}

Tensor log(const Tensor& x) {
    const double* px = x.data().data();
    for (int64_t i = 0; i < x.numel(); ++i) {
        if (!(px[i] > 0.0)) {
            throw std::domain_error("log: input element " + std::to_string(i) + " is " +
                                    std::to_string(px[i]) + ", must be > 0");
        }
    }
    return unary_op(
        x, [](double v) { return std::log(v); }, [](double v, double) { return 1.0 / v; });
}

Tensor sqrt(const Tensor& x) {
    return unary_op(
        x, [](double v) { return std::sqrt(v); },
        [](double, double y) { return 0.5 / y; });
}

Tensor leaky_relu(const Tensor& x, double slope) {
    return unary_op(
        x, [slope](double v) { return v >= 0.0 ? v : slope * v; },
        [slope](double v, double) { return v >= 0.0 ? 1.0 : slope; });
}

Tensor scale(const Tensor& x, double c) {
    return unary_op(
        x, [c](double v) { return c * v; }, [c](double, double) { return c; });
}

// --- reductions ------------------------------------------------------------------

namespace {

struct ReducePlan {
    Shape out_shape;
    std::vector<int64_t> out_stride_per_in_dim;  // 0 for reduced dims
    int64_t count = 1;                           // elements folded into each output cell
};

ReducePlan make_reduce_plan(const Shape& in, std::vector<int64_t> axes, const char* op) {
    const int64_t rank = static_cast<int64_t>(in.size());
    std::vector<bool> reduced(rank, false);
    for (int64_t ax : axes) {
        if (ax < 0 || ax >= rank) {
            throw std::invalid_argument(std::string(op) + ": axis " + std::to_string(ax) +
                                        " out of range for shape " + shape_str(in));
        }
        if (reduced[ax]) {
            throw std::invalid_argument(std::string(op) + ": duplicate axis " +
                                        std::to_string(ax));
        }
        reduced[ax] = true;
    }
    ReducePlan plan;
    for (int64_t d = 0; d < rank; ++d) {
        if (reduced[d]) {
            plan.count *= in[d];
        } else {
            plan.out_shape.push_back(in[d]);
        }
    }
    plan.out_stride_per_in_dim.assign(rank, 0);
    int64_t run = 1;
    for (int64_t d = rank - 1; d >= 0; --d) {
        if (!reduced[d]) {
            plan.out_stride_per_in_dim[d] = run;
            run *= in[d];
        }
    }
    return plan;
}

// Calls f(in_flat, out_flat) over all input elements in row-major order.
template <typename Fn>
void for_each_reduce(const Shape& in, const ReducePlan& plan, Fn&& f) {
    const int64_t rank = static_cast<int64_t>(in.size());
    const int64_t n = shape_numel(in);
    std::vector<int64_t> idx(rank, 0);
    int64_t o = 0;
    for (int64_t i = 0; i < n; ++i) {
        f(i, o);
        for (int64_t d = rank - 1; d >= 0; --d) {
            ++idx[d];
            o += plan.out_stride_per_in_dim[d];
            if (idx[d] < in[d]) break;
            o -= plan.out_stride_per_in_dim[d] * in[d];
            idx[d] = 0;
        }
    }
}

}  // namespace

Tensor reduce(Reduce kind, const Tensor& x, std::vector<int64_t> axes) {
    const char* name = kind == Reduce::sum ? "reduce_sum"
                       : kind == Reduce::mean ? "reduce_mean"
                                              : "reduce_max";
    ReducePlan plan = make_reduce_plan(x.shape(), axes, name);
    const int64_t out_n = shape_numel(plan.out_shape);
    const double* px = x.data().data();

    std::vector<double> out;
    std::vector<int64_t> argmax;  // max only: first flat index attaining the maximum
    if (kind == Reduce::max) {
        out.assign(out_n, -std::numeric_limits<double>::infinity());
        argmax.assign(out_n, -1);
        for_each_reduce(x.shape(), plan, [&](int64_t i, int64_t o) {
            if (argmax[o] < 0 || px[i] > out[o]) {  // ties keep the lowest flat index
                out[o] = px[i];
                argmax[o] = i;
            }
        });
    } else {
        out.assign(out_n, 0.0);
        for_each_reduce(x.shape(), plan, [&](int64_t i, int64_t o) { out[o] += px[i]; });
        if (kind == Reduce::mean) {
            for (double& v : out) v /= static_cast<double>(plan.count);
        }
    }

    Tensor result = make_result(plan.out_shape, std::move(out), track(x));
    if (result.requires_grad()) {
        NodePtr xn = x.node(), on = result.node();
        Shape in_shape = x.shape();
        Tape::active().record([kind, xn, on, plan, in_shape, argmax]() {
            if (on->grad.empty()) return;
            ensure_grad(*xn);
            const double* go = on->grad.data();
            if (kind == Reduce::max) {
                for (size_t o = 0; o < argmax.size(); ++o) xn->grad[argmax[o]] += go[o];
            } else {
                const double w = kind == Reduce::mean ? 1.0 / static_cast<double>(plan.count)
                                                      : 1.0;
                for_each_reduce(in_shape, plan,
                                [&](int64_t i, int64_t o) { xn->grad[i] += go[o] * w; });
            }
        });
    }
    return result;
}

Tensor reduce_sum(const Tensor& x, std::vector<int64_t> axes) {
    return reduce(Reduce::sum, x, std::move(axes));
}
Tensor reduce_mean(const Tensor& x, std::vector<int64_t> axes) {
    return reduce(Reduce::mean, x, std::move(axes));
}
Tensor reduce_max(const Tensor& x, std::vector<int64_t> axes) {
    return reduce(Reduce::max, x, std::move(axes));
}

// --- layout ops ---------------------------------------------------------------

Tensor reshape(const Tensor& x, Shape new_shape) {
    check_shape_valid(new_shape, "reshape");
    if (shape_numel(new_shape) != x.numel()) {
        throw std::invalid_argument("reshape: cannot reshape " + shape_str(x.shape()) + " (" +
                                    std::to_string(x.numel()) + " elements) to " +
                                    shape_str(new_shape) + " (" +
                                    std::to_string(shape_numel(new_shape)) + " elements)");
    }
    Tensor result = make_result(std::move(new_shape), x.data(), track(x));
    if (result.requires_grad()) {
        NodePtr xn = x.node(), on = result.node();
        Tape::active().record([xn, on]() {
            if (on->grad.empty()) return;
            ensure_grad(*xn);
            for (size_t i = 0; i < on->grad.size(); ++i) xn->grad[i] += on->grad[i];
        });
    }
    return result;
}

Tensor permute(const Tensor& x, std::vector<int64_t> axis_order) {
    const Shape& in = x.shape();
    const int64_t rank = static_cast<int64_t>(in.size());
    if (static_cast<int64_t>(axis_order.size()) != rank) {
        throw std::invalid_argument("permute: order has " + std::to_string(axis_order.size()) +
                                    " entries for rank-" + std::to_string(rank) + " tensor");
    }
    std::vector<bool> seen(rank, false);
    for (int64_t ax : axis_order) {
        if (ax < 0 || ax >= rank || seen[ax]) {
            throw std::invalid_argument("permute: order is not a permutation of 0.." +
                                        std::to_string(rank - 1));
        }
        seen[ax] = true;
    }

    Shape out_shape(rank);
    for (int64_t i = 0; i < rank; ++i) out_shape[i] = in[axis_order[i]];

    // Output strides indexed by input dim: walking the input row-major while
    // stepping these strides lands on the transposed position.
    std::vector<int64_t> out_strides(rank), stride_for_in_dim(rank);
    int64_t run = 1;
    for (int64_t d = rank - 1; d >= 0; --d) {
        out_strides[d] = run;
        run *= out_shape[d];
    }
    for (int64_t i = 0; i < rank; ++i) stride_for_in_dim[axis_order[i]] = out_strides[i];

    const int64_t n = x.numel();
    const double* px = x.data().data();
    std::vector<double> out(n);
    {
        std::vector<int64_t> idx(rank, 0);
        int64_t o = 0;
        for (int64_t i = 0; i < n; ++i) {
            out[o] = px[i];
            for (int64_t d = rank - 1; d >= 0; --d) {
                ++idx[d];
                o += stride_for_in_dim[d];
                if (idx[d] < in[d]) break;
                o -= stride_for_in_dim[d] * in[d];
                idx[d] = 0;
            }
        }
    }

    Tensor result = make_result(std::move(out_shape), std::move(out), track(x));
    if (result.requires_grad()) {
        NodePtr xn = x.node(), on = result.node();
        Shape in_shape = in;
        Tape::active().record([xn, on, in_shape, stride_for_in_dim]() {
            if (on->grad.empty()) return;
            ensure_grad(*xn);
            const int64_t rank = static_cast<int64_t>(in_shape.size());
            const int64_t n = static_cast<int64_t>(xn->data.size());
            std::vector<int64_t> idx(rank, 0);
            int64_t o = 0;
            for (int64_t i = 0; i < n; ++i) {
                xn->grad[i] += on->grad[o];
                for (int64_t d = rank - 1; d >= 0; --d) {
                    ++idx[d];
                    o += stride_for_in_dim[d];
                    if (idx[d] < in_shape[d]) break;
                    o -= stride_for_in_dim[d] * in_shape[d];
                    idx[d] = 0;
                }
            }
        });
    }
    return result;
}

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) {
    if (w.dim() != 2) {
        throw std::invalid_argument("linear: weight must be rank 2, got " + shape_str(w.shape()));
    }
    const Shape& sx = x.shape();
    if (sx.empty() || sx.back() != w.shape()[0]) {
        throw std::invalid_argument("linear: input " + shape_str(sx) +
                                    " does not match weight " + shape_str(w.shape()));
    }
    if (b.defined() && b.shape() != Shape{w.shape()[1]}) {
        throw std::invalid_argument("linear: bias " + shape_str(b.shape()) +
                                    " does not match weight " + shape_str(w.shape()));
    }
    const bool vector_in = sx.size() == 1;
    Tensor x2 = vector_in ? reshape(x, {1, sx[0]}) : x;
    Tensor y = matmul(x2, w);
    if (b.defined()) y = add(y, b);
    if (vector_in) y = reshape(y, {w.shape()[1]});
    return y;
}

Tensor concat0(const Tensor& a, const Tensor& b) {
    const Shape& sa = a.shape();
    const Shape& sb = b.shape();
    if (sa.size() != sb.size() || sa.empty() ||
        !std::equal(sa.begin() + 1, sa.end(), sb.begin() + 1)) {
        throw std::invalid_argument("concat0: shapes " + shape_str(sa) + " and " + shape_str(sb) +
                                    " differ beyond axis 0");
    }
    Shape out_shape = sa;
    out_shape[0] += sb[0];
    std::vector<double> out;
    out.reserve(a.numel() + b.numel());
    out.insert(out.end(), a.data().begin(), a.data().end());
    out.insert(out.end(), b.data().begin(), b.data().end());

    Tensor result = make_result(std::move(out_shape), std::move(out), track(a) || track(b));
    if (result.requires_grad()) {
        NodePtr an = a.node(), bn = b.node(), on = result.node();
        Tape::active().record([an, bn, on]() {
            if (on->grad.empty()) return;
            const size_t na = an->data.size();
            if (an->requires_grad) {
                ensure_grad(*an);
                for (size_t i = 0; i < na; ++i) an->grad[i] += on->grad[i];
            }
            if (bn->requires_grad) {
                ensure_grad(*bn);
                for (size_t i = 0; i < bn->data.size(); ++i) bn->grad[i] += on->grad[na + i];
            }
        });
    }
    return result;
}

Tensor gather_grid(const Tensor& src, const std::vector<int64_t>& rows,
                   const std::vector<int64_t>& cols) {
    const Shape& s = src.shape();
    if (s.size() < 2) {
        throw std::invalid_argument("gather_grid: source must have rank >= 2, got " +
                                    shape_str(s));
    }
    const int64_t r = s[s.size() - 2], c = s[s.size() - 1];
    for (int64_t v : rows) {
        if (v < 0 || v >= r) {
            throw std::invalid_argument("gather_grid: row index " + std::to_string(v) +
                                        " out of range [0," + std::to_string(r) + ")");
        }
    }
    for (int64_t v : cols) {
        if (v < 0 || v >= c) {
            throw std::invalid_argument("gather_grid: column index " + std::to_string(v) +
                                        " out of range [0," + std::to_string(c) + ")");
        }
    }
    const int64_t nr = static_cast<int64_t>(rows.size());
    const int64_t nc = static_cast<int64_t>(cols.size());
    const int64_t n_lead = src.numel() / (r * c);
    Shape out_shape(s.begin(), s.end() - 2);
    out_shape.push_back(nr);
    out_shape.push_back(nc);

    std::vector<double> out(n_lead * nr * nc);
    const double* ps = src.data().data();
    for (int64_t l = 0; l < n_lead; ++l) {
        const double* blk = ps + l * r * c;
        double* ob = out.data() + l * nr * nc;
        for (int64_t i = 0; i < nr; ++i) {
            for (int64_t j = 0; j < nc; ++j) ob[i * nc + j] = blk[rows[i] * c + cols[j]];
        }
    }

    Tensor result = make_result(std::move(out_shape), std::move(out), track(src));
    if (result.requires_grad()) {
        NodePtr sn = src.node(), on = result.node();
        Tape::active().record([sn, on, rows, cols, n_lead, r, c, nr, nc]() {
            if (on->grad.empty()) return;
            ensure_grad(*sn);
            for (int64_t l = 0; l < n_lead; ++l) {
                double* gb = sn->grad.data() + l * r * c;
                const double* ob = on->grad.data() + l * nr * nc;
                for (int64_t i = 0; i < nr; ++i) {
                    for (int64_t j = 0; j < nc; ++j) gb[rows[i] * c + cols[j]] += ob[i * nc + j];
                }
            }
        });
    }
    return result;
}

Tensor segment_mean(const Tensor& x, const std::vector<int64_t>& seg, int64_t n_segments) {
    const Shape& s = x.shape();
    if (s.empty()) throw std::invalid_argument("segment_mean: input must have rank >= 1");
    const int64_t n = s.back();
    if (static_cast<int64_t>(seg.size()) != n) {
        throw std::invalid_argument("segment_mean: map has " + std::to_string(seg.size()) +
                                    " entries for trailing dimension " + std::to_string(n));
    }
    std::vector<int64_t> count(n_segments, 0);
    for (int64_t v : seg) {
        if (v < 0 || v >= n_segments) {
            throw std::invalid_argument("segment_mean: segment index " + std::to_string(v) +
                                        " out of range [0," + std::to_string(n_segments) + ")");
        }
        ++count[v];
    }
    for (int64_t p = 0; p < n_segments; ++p) {
        if (count[p] == 0) {
            throw std::invalid_argument("segment_mean: segment " + std::to_string(p) +
                                        " is empty (map not surjective)");
        }
    }

    const int64_t n_lead = x.numel() / n;
    Shape out_shape(s.begin(), s.end() - 1);
    out_shape.push_back(n_segments);
    std::vector<double> out(n_lead * n_segments, 0.0);
    const double* px = x.data().data();
    for (int64_t l = 0; l < n_lead; ++l) {
        const double* xb = px + l * n;
        double* ob = out.data() + l * n_segments;
        for (int64_t j = 0; j < n; ++j) ob[seg[j]] += xb[j];
        for (int64_t p = 0; p < n_segments; ++p) ob[p] /= static_cast<double>(count[p]);
    }

    Tensor result = make_result(std::move(out_shape), std::move(out), track(x));
    if (result.requires_grad()) {
        NodePtr xn = x.node(), on = result.node();
        Tape::active().record([xn, on, seg, count, n_lead, n, n_segments]() {
            if (on->grad.empty()) return;
            ensure_grad(*xn);
            for (int64_t l = 0; l < n_lead; ++l) {
                double* gb = xn->grad.data() + l * n;
                const double* ob = on->grad.data() + l * n_segments;
                for (int64_t j = 0; j < n; ++j) {
                    gb[j] += ob[seg[j]] / static_cast<double>(count[seg[j]]);
                }
            }
        });
    }
    return result;
}

Tensor temporal_conv_depthwise(const Tensor& x, const Tensor& w, const Tensor& b) {
    const Shape& s = x.shape();
    if (s.size() != 4) {
        throw std::invalid_argument("temporal_conv_depthwise: input must be [M,T,N,C], got " +
                                    shape_str(s));
    }
    const int64_t M = s[0], T = s[1], N = s[2], C = s[3];
    if (w.dim() != 2 || w.shape()[0] != C || w.shape()[1] % 2 == 0) {
        throw std::invalid_argument(
            "temporal_conv_depthwise: kernel must be [C, odd k] with C=" + std::to_string(C) +
            ", got " + shape_str(w.shape()));
    }
    if (b.shape() != Shape{C}) {
        throw std::invalid_argument("temporal_conv_depthwise: bias must be [C], got " +
                                    shape_str(b.shape()));
    }
    const int64_t k = w.shape()[1], half = k / 2;
    const double* px = x.data().data();
    const double* pw = w.data().data();
    const double* pb = b.data().data();
    std::vector<double> out(x.numel());
    const int64_t stride_t = N * C;
    for (int64_t m = 0; m < M; ++m) {
        const double* xm = px + m * T * stride_t;
        double* om = out.data() + m * T * stride_t;
        for (int64_t t = 0; t < T; ++t) {
            for (int64_t nn = 0; nn < N; ++nn) {
                for (int64_t c = 0; c < C; ++c) {
                    double acc = pb[c];
                    for (int64_t d = 0; d < k; ++d) {
                        const int64_t ts = t + d - half;
                        if (ts < 0 || ts >= T) continue;
                        acc += pw[c * k + d] * xm[ts * stride_t + nn * C + c];
                    }
                    om[t * stride_t + nn * C + c] = acc;
                }
            }
        }
    }

    Tensor result =
        make_result(s, std::move(out), track(x) || track(w) || track(b));
    if (result.requires_grad()) {
        NodePtr xn = x.node(), wn = w.node(), bn = b.node(), on = result.node();
        Tape::active().record([xn, wn, bn, on, M, T, N, C, k, half, stride_t]() {
            if (on->grad.empty()) return;
            const double* go = on->grad.data();
            const bool gx = xn->requires_grad, gw = wn->requires_grad, gb = bn->requires_grad;
            if (gx) ensure_grad(*xn);
            if (gw) ensure_grad(*wn);
            if (gb) ensure_grad(*bn);
            for (int64_t m = 0; m < M; ++m) {
                const double* gm = go + m * T * stride_t;
                const double* xm = xn->data.data() + m * T * stride_t;
                for (int64_t t = 0; t < T; ++t) {
                    for (int64_t nn = 0; nn < N; ++nn) {
                        for (int64_t c = 0; c < C; ++c) {
                            const double g = gm[t * stride_t + nn * C + c];
                            if (g == 0.0) continue;
                            if (gb) bn->grad[c] += g;
                            for (int64_t d = 0; d < k; ++d) {
                                const int64_t ts = t + d - half;
                                if (ts < 0 || ts >= T) continue;
                                const int64_t xi = m * T * stride_t + ts * stride_t + nn * C + c;
                                if (gw) wn->grad[c * k + d] += g * xm[ts * stride_t + nn * C + c];
                                if (gx) xn->grad[xi] += g * wn->data[c * k + d];
                            }
                        }
                    }
                }
            }
        });
    }
    return result;
}

Tensor dropout(const Tensor& x, double rate, RngState& rng) {
    if (rate < 0.0 || rate >= 1.0) {
        throw std::invalid_argument("dropout: rate must be in [0,1), got " + std::to_string(rate));
    }
    if (rate == 0.0) return x;
    const double keep_scale = 1.0 / (1.0 - rate);
    std::vector<double> mask(x.numel());
    for (double& v : mask) v = rng.uniform() >= rate ? keep_scale : 0.0;
    return mul(x, Tensor::from_data(x.shape(), std::move(mask)));
}

// --- batch norm ------------------------------------------------------------------

BatchNormState BatchNormState::init(const Shape& feature_shape) {
    return {Tensor::zeros(feature_shape), Tensor::full(feature_shape, 1.0)};
}

Tensor batch_norm(const Tensor& x, int64_t n_stat_axes, const Tensor& gamma, const Tensor& beta,
                  BatchNormState& state, bool train, double eps, double momentum) {
    const Shape& s = x.shape();
    const int64_t rank = static_cast<int64_t>(s.size());
    if (n_stat_axes < 1 || n_stat_axes >= rank) {
        throw std::invalid_argument("batch_norm: need 1 <= stat axes < rank, got " +
                                    std::to_string(n_stat_axes) + " for " + shape_str(s));
    }
    if (!(eps > 0.0)) throw std::invalid_argument("batch_norm: eps must be > 0");
    Shape feature(s.begin() + n_stat_axes, s.end());
    if (gamma.shape() != feature || beta.shape() != feature) {
        throw std::invalid_argument("batch_norm: gamma/beta must have feature shape " +
                                    shape_str(feature));
    }
    if (state.running_mean.shape() != feature || state.running_var.shape() != feature) {
        throw std::invalid_argument("batch_norm: running stats must have feature shape " +
                                    shape_str(feature));
    }
    int64_t group = 1;
    for (int64_t d = 0; d < n_stat_axes; ++d) group *= s[d];
    if (group == 0) throw std::invalid_argument("batch_norm: zero-size normalization group");

    std::vector<int64_t> axes(n_stat_axes);
    for (int64_t d = 0; d < n_stat_axes; ++d) axes[d] = d;

    Tensor eps_t = Tensor::full(feature, eps);
    if (train) {
        Tensor mu = reduce_mean(x, axes);
        Tensor xc = sub(x, mu);
        Tensor var = reduce_mean(mul(xc, xc), axes);
        Tensor xhat = div(xc, sqrt(add(var, eps_t)));
        Tensor y = add(mul(xhat, gamma), beta);
        // Running-buffer update stays off the tape.
        auto& rm = state.running_mean.raw_data();
        auto& rv = state.running_var.raw_data();
        const auto& mud = mu.data();
        const auto& vard = var.data();
        for (size_t i = 0; i < rm.size(); ++i) {
            rm[i] = (1.0 - momentum) * rm[i] + momentum * mud[i];
            rv[i] = (1.0 - momentum) * rv[i] + momentum * vard[i];
        }
        return y;
    }
    Tensor xhat = div(sub(x, state.running_mean), sqrt(add(state.running_var, eps_t)));
    return add(mul(xhat, gamma), beta);
}

// --- softmax cross entropy ---------------------------------------------------------

namespace {

void check_one_hot(const Tensor& y, const char* op) {
    const Shape& s = y.shape();
    if (s.size() != 2) {
        throw std::invalid_argument(std::string(op) + ": labels must be [M, classes], got " +
                                    shape_str(s));
    }
    if (s[1] < 2) {
        throw std::invalid_argument(std::string(op) + ": need >= 2 classes, got " +
                                    std::to_string(s[1]));
    }
    const double* p = y.data().data();
    for (int64_t m = 0; m < s[0]; ++m) {
        int64_t ones = 0;
        for (int64_t c = 0; c < s[1]; ++c) {
            const double v = p[m * s[1] + c];
            if (v == 1.0) {
                ++ones;
            } else if (v != 0.0) {
                throw std::invalid_argument(std::string(op) + ": row " + std::to_string(m) +
                                            " of y is not one-hot (entry " + std::to_string(v) +
                                            ")");
            }
        }
        if (ones != 1) {
            throw std::invalid_argument(std::string(op) + ": row " + std::to_string(m) +
                                        " of y is not one-hot (" + std::to_string(ones) +
                                        " ones)");
        }
    }
}

Tensor stabilized_logits(const Tensor& logits) {
    const int64_t m = logits.shape()[0];
    Tensor row_max;
    {
        NoGradGuard ng;
        row_max = reduce_max(logits, {1});
    }
    return sub(logits, reshape(row_max, {m, 1}));
}

}  // namespace

Tensor softmax_cross_entropy(const Tensor& logits, const Tensor& y) {
    if (logits.dim() != 2 || logits.shape() != y.shape()) {
        throw std::invalid_argument("softmax_cross_entropy: logits " + shape_str(logits.shape()) +
                                    " and labels " + shape_str(y.shape()) +
                                    " must be matching [M, classes]");
    }
    check_one_hot(y, "softmax_cross_entropy");
    Tensor z = stabilized_logits(logits);
    Tensor lse = log(reduce_sum(exp(z), {1}));
    Tensor z_true = reduce_sum(mul(z, y.detach()), {1});
    return reduce_mean(sub(lse, z_true), {0});
}

Tensor softmax_rows(const Tensor& logits) {
    if (logits.dim() != 2) {
        throw std::invalid_argument("softmax_rows: logits must be [M, classes], got " +
                                    shape_str(logits.shape()));
    }
    const int64_t m = logits.shape()[0];
    Tensor e = exp(stabilized_logits(logits));
    return div(e, reshape(reduce_sum(e, {1}), {m, 1}));
}

// --- optimizer ----------------------------------------------------------------------

std::vector<double>& SgdState::velocity_for(const Tensor& param) {
    for (auto& [node, vel] : velocity) {
        if (node.get() == param.id()) {
            if (vel.size() != param.data().size()) {
                throw std::invalid_argument(
                    "sgd: velocity size " + std::to_string(vel.size()) +
                    " does not match parameter shape " + shape_str(param.shape()));
            }
            return vel;
        }
    }
    velocity.emplace_back(param.node(), std::vector<double>(param.numel(), 0.0));
    return velocity.back().second;
}

void sgd_nesterov_step(std::vector<Tensor>& params, double lr, double momentum,
                       double weight_decay, SgdState& state) {
    if (lr < 0.0) throw std::invalid_argument("sgd: learning rate must be >= 0");
    if (momentum < 0.0 || momentum >= 1.0) {
        throw std::invalid_argument("sgd: momentum must be in [0,1)");
    }
    for (Tensor& p : params) {
        if (!p.has_grad()) continue;
        auto& vel = state.velocity_for(p);
        auto& data = p.raw_data();
        const auto& grad = p.grad();
        for (size_t i = 0; i < data.size(); ++i) {
            const double d = grad[i] + weight_decay * data[i];
            vel[i] = momentum * vel[i] + d;
            data[i] -= lr * (d + momentum * vel[i]);
        }
    }
}

}  // namespace psp
