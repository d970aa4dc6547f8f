#ifndef GRACE_DIFFCORE_HPP
#define GRACE_DIFFCORE_HPP

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "grace/errors.hpp"

namespace grace::diffcore {

// All tensors are dense row-major 64-bit float matrices. Vectors are 1xN or
// Nx1, scalars 1x1.
struct Matrix {
    int rows = 0;
    int cols = 0;
    std::vector<double> data;

    Matrix() = default;
    Matrix(int r, int c) : rows(r), cols(c), data(static_cast<std::size_t>(r) * c, 0.0) {}
    Matrix(int r, int c, std::vector<double> d) : rows(r), cols(c), data(std::move(d)) {}

    double& at(int i, int j) { return data[static_cast<std::size_t>(i) * cols + j]; }
    double at(int i, int j) const { return data[static_cast<std::size_t>(i) * cols + j]; }
    std::size_t size() const { return data.size(); }
};

enum class Op : std::uint8_t {
    leaf,            // constant or parameter input
    matmul,          // a(r x k) * b(k x c)
    transpose,       // a^T
    add,             // a + b elementwise
    sub,             // a - b elementwise
    mul,             // a .* b elementwise
    add_rowvec,      // a(n x m) + b(1 x m) broadcast over rows
    add_colvec,      // a(n x m) + b(n x 1) broadcast over columns
    div_colvec,      // a(n x m) / b(n x 1) broadcast over columns
    outer_add,       // a(n x 1), b(m x 1) -> (n x m) with out[i][j] = a[i] + b[j]
    scalar_mul,      // a(1 x 1) * b, scalar times matrix (both differentiable)
    add_scalar,      // a + b(1 x 1) broadcast (both differentiable)
    scale,           // a * c0
    add_const,       // a + c0
    act_leaky_relu,  // slope c0; derivative at 0 is the slope
    act_sigmoid,
    act_tanh,
    exp_elem,
    abs_elem,     // subgradient 0 at 0
    clamp,        // [c0, c1], zero gradient outside
    sum_all,      // -> 1 x 1
    sum_rows,     // (n x m) -> (n x 1)
    sum_cols,     // (n x m) -> (1 x m)
    slice_cols,   // columns [c0, c1)
    slice_rows,   // rows [c0, c1)
    concat_rows,  // [a; b]
    concat_cols,  // [a, b]
    reshape,      // same data, new shape
    softmax_temp,        // row-wise softmax of c0 * a, max-stabilized
    masked_row_softmax,  // aux: 0/1 mask, same shape; masked-out entries -> 0
    const_left_mul,      // aux matrix A (k x k): out = blockdiag(A,...) * a, c0 = block rows
};

// One recorded operation. `off` indexes the tape's value arena.
struct Node {
    Op op = Op::leaf;
    int a = -1;
    int b = -1;
    int rows = 0;
    int cols = 0;
    double c0 = 0.0;
    double c1 = 0.0;
    std::size_t off = 0;
    int aux = -1;  // index into the tape's aux payload list
    bool requires_grad = false;
};

class Tape;

// Lightweight handle to a tape node.
struct Var {
    Tape* tape = nullptr;
    int id = -1;

    bool valid() const { return tape != nullptr && id >= 0; }
    int rows() const;
    int cols() const;
    // copies the node's current value out of the arena
    Matrix value() const;
    double scalar() const;
};

// Named trainable tensor living outside any tape. Tapes bind leaves to these
// and accumulate gradients back after backward().
struct ParamTensor {
    std::string name;
    int rows = 0;
    int cols = 0;
    std::vector<double> value;
    std::vector<double> grad;
    // Adam state
    std::vector<double> m;
    std::vector<double> v;

    ParamTensor() = default;
    ParamTensor(std::string n, int r, int c)
        : name(std::move(n)),
          rows(r),
          cols(c),
          value(static_cast<std::size_t>(r) * c, 0.0),
          grad(value.size(), 0.0),
          m(value.size(), 0.0),
          v(value.size(), 0.0) {}
    std::size_t size() const { return value.size(); }
};

// Recorded computation: ordered list of operations plus a value arena.
// Confined to one thread; distinct tapes may run concurrently.
class Tape {
public:
    // --- leaves ---
    Var constant(const Matrix& m);
    Var constant(int rows, int cols, const double* data);
    Var scalar_const(double x);
    // binds a parameter; gradients flow to it via accumulate_param_grads()
    Var param(ParamTensor& p);

    // --- ops ---
    Var matmul(Var a, Var b);
    Var transpose(Var a);
    Var add(Var a, Var b);
    Var sub(Var a, Var b);
    Var mul(Var a, Var b);
    Var add_rowvec(Var a, Var b);
    Var add_colvec(Var a, Var b);
    Var div_colvec(Var a, Var b);
    Var outer_add(Var a, Var b);
    Var scalar_mul(Var s, Var a);
    Var add_scalar(Var a, Var s);
    Var scale(Var a, double c);
    Var add_const(Var a, double c);
    Var leaky_relu(Var a, double slope);
    Var sigmoid(Var a);
    Var tanh_(Var a);
    Var exp_(Var a);
    Var abs_(Var a);
    Var clamp(Var a, double lo, double hi);
    Var sum_all(Var a);
    Var sum_rows(Var a);
    Var sum_cols(Var a);
    Var slice_cols(Var a, int begin, int end);
    Var slice_rows(Var a, int begin, int end);
    Var concat_rows(Var a, Var b);
    Var concat_cols(Var a, Var b);
    Var reshape(Var a, int rows, int cols);
    Var softmax_temp(Var a, double t);
    Var masked_row_softmax(Var a, const Matrix& mask);
    Var const_left_mul(const Matrix& A, Var a);

    // activation dispatch by name-like enum used in a few call sites
    enum class Activation { leaky_relu, sigmoid, tanh, identity };
    Var activate(Var a, Activation kind, double slope = 0.01);

    // z = mu + exp(logvar / 2) .* noise
    Var reparameterize(Var mu, Var logvar, Var noise);

    // --- autodiff ---
    // Computes gradients of a scalar loss w.r.t. every requires_grad node.
    void backward(Var loss);
    // Gradient of the last backward() w.r.t. node v (zero matrix if unreached).
    Matrix grad_of(Var v) const;
    // Adds bound-leaf gradients into their ParamTensor::grad buffers.
    void accumulate_param_grads();

    // Re-executes every non-leaf op from current leaf values; outputs are
    // bit-identical to the original forward pass.
    void replay();

    std::size_t node_count() const { return nodes_.size(); }
    const Node& node(int id) const { return nodes_[static_cast<std::size_t>(id)]; }

    // drops all nodes but keeps arena capacity for reuse
    void reset();

    double* val(int id) { return arena_.data() + nodes_[static_cast<std::size_t>(id)].off; }
    const double* val(int id) const { return arena_.data() + nodes_[static_cast<std::size_t>(id)].off; }
    const double* gradv(int id) const { return grad_arena_.data() + nodes_[static_cast<std::size_t>(id)].off; }

private:
    struct Aux {
        int rows = 0;
        int cols = 0;
        std::vector<double> data;
    };

    std::vector<Node> nodes_;
    std::vector<double> arena_;
    std::vector<double> grad_arena_;
    std::vector<Aux> aux_;
    std::vector<std::pair<int, ParamTensor*>> bindings_;
    bool has_grads_ = false;

    int push(Node n, std::size_t elems);
    Var emit(Op op, int a, int b, int rows, int cols, double c0 = 0.0, double c1 = 0.0, int aux = -1);
    void forward_node(int id);
    void backward_node(int id);
    double* gval(int id) { return grad_arena_.data() + nodes_[static_cast<std::size_t>(id)].off; }
    static void require(bool cond, const std::string& msg);
};

// Max relative finite-difference error over all coordinates of all params:
// |analytic - numeric| / max(1, |analytic|, |numeric|), central differences
// with step eps. loss_fn(true) must evaluate the loss AND fill param->grad
// (zeroed beforehand by the checker); loss_fn(false) evaluates only. The
// function must be deterministic given the parameter values.
double grad_check(const std::function<double(bool compute_grad)>& loss_fn,
                  const std::vector<ParamTensor*>& params, double eps);

}  // namespace grace::diffcore

#endif
