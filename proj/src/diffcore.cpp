#include "grace/diffcore.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

namespace grace::diffcore {

int Var::rows() const { return tape->node(id).rows; }
int Var::cols() const { return tape->node(id).cols; }

Matrix Var::value() const {
    const Node& n = tape->node(id);
    Matrix m(n.rows, n.cols);
    std::memcpy(m.data.data(), tape->val(id), m.size() * sizeof(double));
    return m;
}

double Var::scalar() const {
    const Node& n = tape->node(id);
    if (n.rows != 1 || n.cols != 1)
        throw contract_error("scalar() on tensor of shape " + std::to_string(n.rows) + "x" +
                             std::to_string(n.cols));
    return *tape->val(id);
}

void Tape::require(bool cond, const std::string& msg) {
    if (!cond) throw contract_error(msg);
}

int Tape::push(Node n, std::size_t elems) {
    n.off = arena_.size();
    arena_.resize(arena_.size() + elems, 0.0);
    nodes_.push_back(n);
    return static_cast<int>(nodes_.size()) - 1;
}

Var Tape::emit(Op op, int a, int b, int rows, int cols, double c0, double c1, int aux) {
    Node n;
    n.op = op;
    n.a = a;
    n.b = b;
    n.rows = rows;
    n.cols = cols;
    n.c0 = c0;
    n.c1 = c1;
    n.aux = aux;
    n.requires_grad = (a >= 0 && nodes_[static_cast<std::size_t>(a)].requires_grad) ||
                      (b >= 0 && nodes_[static_cast<std::size_t>(b)].requires_grad);
    int id = push(n, static_cast<std::size_t>(rows) * cols);
    forward_node(id);
    return Var{this, id};
}

Var Tape::constant(const Matrix& m) { return constant(m.rows, m.cols, m.data.data()); }

Var Tape::constant(int rows, int cols, const double* data) {
    Node n;
    n.op = Op::leaf;
    n.rows = rows;
    n.cols = cols;
    n.requires_grad = false;
    int id = push(n, static_cast<std::size_t>(rows) * cols);
    std::memcpy(val(id), data, static_cast<std::size_t>(rows) * cols * sizeof(double));
    return Var{this, id};
}

Var Tape::scalar_const(double x) { return constant(1, 1, &x); }

Var Tape::param(ParamTensor& p) {
    Node n;
    n.op = Op::leaf;
    n.rows = p.rows;
    n.cols = p.cols;
    n.requires_grad = true;
    int id = push(n, p.size());
    std::memcpy(val(id), p.value.data(), p.size() * sizeof(double));
    bindings_.emplace_back(id, &p);
    return Var{this, id};
}

Var Tape::matmul(Var a, Var b) {
    if (a.cols() != b.rows())
        throw contract_error("matmul: inner dimensions disagree: " + std::to_string(a.rows()) + "x" +
                             std::to_string(a.cols()) + " vs " + std::to_string(b.rows()) + "x" +
                             std::to_string(b.cols()));
    return emit(Op::matmul, a.id, b.id, a.rows(), b.cols());
}

Var Tape::transpose(Var a) { return emit(Op::transpose, a.id, -1, a.cols(), a.rows()); }

Var Tape::add(Var a, Var b) {
    require(a.rows() == b.rows() && a.cols() == b.cols(), "add: shape mismatch");
    return emit(Op::add, a.id, b.id, a.rows(), a.cols());
}

Var Tape::sub(Var a, Var b) {
    require(a.rows() == b.rows() && a.cols() == b.cols(), "sub: shape mismatch");
    return emit(Op::sub, a.id, b.id, a.rows(), a.cols());
}

Var Tape::mul(Var a, Var b) {
    require(a.rows() == b.rows() && a.cols() == b.cols(), "mul: shape mismatch");
    return emit(Op::mul, a.id, b.id, a.rows(), a.cols());
}

Var Tape::add_rowvec(Var a, Var b) {
    require(b.rows() == 1 && b.cols() == a.cols(), "add_rowvec: expected 1x" + std::to_string(a.cols()));
    return emit(Op::add_rowvec, a.id, b.id, a.rows(), a.cols());
}

Var Tape::add_colvec(Var a, Var b) {
    require(b.cols() == 1 && b.rows() == a.rows(), "add_colvec: expected " + std::to_string(a.rows()) + "x1");
    return emit(Op::add_colvec, a.id, b.id, a.rows(), a.cols());
}

Var Tape::div_colvec(Var a, Var b) {
    require(b.cols() == 1 && b.rows() == a.rows(), "div_colvec: expected " + std::to_string(a.rows()) + "x1");
    return emit(Op::div_colvec, a.id, b.id, a.rows(), a.cols());
}

Var Tape::outer_add(Var a, Var b) {
    require(a.cols() == 1 && b.cols() == 1, "outer_add: expects column vectors");
    return emit(Op::outer_add, a.id, b.id, a.rows(), b.rows());
}

Var Tape::scalar_mul(Var s, Var a) {
    require(s.rows() == 1 && s.cols() == 1, "scalar_mul: s must be 1x1");
    return emit(Op::scalar_mul, s.id, a.id, a.rows(), a.cols());
}

Var Tape::add_scalar(Var a, Var s) {
    require(s.rows() == 1 && s.cols() == 1, "add_scalar: s must be 1x1");
    return emit(Op::add_scalar, a.id, s.id, a.rows(), a.cols());
}

Var Tape::scale(Var a, double c) { return emit(Op::scale, a.id, -1, a.rows(), a.cols(), c); }
Var Tape::add_const(Var a, double c) { return emit(Op::add_const, a.id, -1, a.rows(), a.cols(), c); }
Var Tape::leaky_relu(Var a, double slope) { return emit(Op::act_leaky_relu, a.id, -1, a.rows(), a.cols(), slope); }
Var Tape::sigmoid(Var a) { return emit(Op::act_sigmoid, a.id, -1, a.rows(), a.cols()); }
Var Tape::tanh_(Var a) { return emit(Op::act_tanh, a.id, -1, a.rows(), a.cols()); }
Var Tape::exp_(Var a) { return emit(Op::exp_elem, a.id, -1, a.rows(), a.cols()); }
Var Tape::abs_(Var a) { return emit(Op::abs_elem, a.id, -1, a.rows(), a.cols()); }

Var Tape::clamp(Var a, double lo, double hi) {
    require(lo <= hi, "clamp: lo > hi");
    return emit(Op::clamp, a.id, -1, a.rows(), a.cols(), lo, hi);
}

Var Tape::sum_all(Var a) { return emit(Op::sum_all, a.id, -1, 1, 1); }
Var Tape::sum_rows(Var a) { return emit(Op::sum_rows, a.id, -1, a.rows(), 1); }
Var Tape::sum_cols(Var a) { return emit(Op::sum_cols, a.id, -1, 1, a.cols()); }

Var Tape::slice_cols(Var a, int begin, int end) {
    require(0 <= begin && begin < end && end <= a.cols(), "slice_cols: bad range");
    return emit(Op::slice_cols, a.id, -1, a.rows(), end - begin, begin, end);
}

Var Tape::slice_rows(Var a, int begin, int end) {
    require(0 <= begin && begin < end && end <= a.rows(), "slice_rows: bad range");
    return emit(Op::slice_rows, a.id, -1, end - begin, a.cols(), begin, end);
}

Var Tape::concat_rows(Var a, Var b) {
    require(a.cols() == b.cols(), "concat_rows: column mismatch");
    return emit(Op::concat_rows, a.id, b.id, a.rows() + b.rows(), a.cols());
}

Var Tape::concat_cols(Var a, Var b) {
    require(a.rows() == b.rows(), "concat_cols: row mismatch");
    return emit(Op::concat_cols, a.id, b.id, a.rows(), a.cols() + b.cols());
}

Var Tape::reshape(Var a, int rows, int cols) {
    require(static_cast<long long>(rows) * cols == static_cast<long long>(a.rows()) * a.cols(),
            "reshape: element count mismatch");
    return emit(Op::reshape, a.id, -1, rows, cols);
}

Var Tape::softmax_temp(Var a, double t) {
    if (t <= 0.0) throw Error(ErrorKind::numeric, "softmax_with_temperature: t must be positive, got " + std::to_string(t));
    return emit(Op::softmax_temp, a.id, -1, a.rows(), a.cols(), t);
}

Var Tape::masked_row_softmax(Var a, const Matrix& mask) {
    require(mask.rows == a.rows() && mask.cols == a.cols(), "masked_row_softmax: mask shape mismatch");
    aux_.push_back(Aux{mask.rows, mask.cols, mask.data});
    return emit(Op::masked_row_softmax, a.id, -1, a.rows(), a.cols(), 0.0, 0.0,
                static_cast<int>(aux_.size()) - 1);
}

Var Tape::const_left_mul(const Matrix& A, Var a) {
    require(A.rows == A.cols, "const_left_mul: A must be square");
    require(a.rows() % A.rows == 0, "const_left_mul: rows not a multiple of block size");
    aux_.push_back(Aux{A.rows, A.cols, A.data});
    return emit(Op::const_left_mul, a.id, -1, a.rows(), a.cols(), static_cast<double>(A.rows), 0.0,
                static_cast<int>(aux_.size()) - 1);
}

Var Tape::activate(Var a, Activation kind, double slope) {
    switch (kind) {
        case Activation::leaky_relu: return leaky_relu(a, slope);
        case Activation::sigmoid: return sigmoid(a);
        case Activation::tanh: return tanh_(a);
        case Activation::identity: return a;
    }
    throw contract_error("activate: unsupported kind");
}

Var Tape::reparameterize(Var mu, Var logvar, Var noise) {
    require(mu.rows() == logvar.rows() && mu.cols() == logvar.cols() && mu.rows() == noise.rows() &&
                mu.cols() == noise.cols(),
            "reparameterize: shape mismatch");
    Var std_dev = exp_(scale(logvar, 0.5));
    return add(mu, mul(std_dev, noise));
}

void Tape::forward_node(int id) {
    Node& n = nodes_[static_cast<std::size_t>(id)];
    double* out = arena_.data() + n.off;
    const double* a = n.a >= 0 ? arena_.data() + nodes_[static_cast<std::size_t>(n.a)].off : nullptr;
    const double* b = n.b >= 0 ? arena_.data() + nodes_[static_cast<std::size_t>(n.b)].off : nullptr;
    const int R = n.rows, C = n.cols;
    const std::size_t N = static_cast<std::size_t>(R) * C;

    switch (n.op) {
        case Op::leaf:
            break;
        case Op::matmul: {
            const Node& na = nodes_[static_cast<std::size_t>(n.a)];
            const int K = na.cols;
            std::fill(out, out + N, 0.0);
            for (int i = 0; i < R; ++i)
                for (int k = 0; k < K; ++k) {
                    const double aik = a[static_cast<std::size_t>(i) * K + k];
                    if (aik == 0.0) continue;
                    const double* brow = b + static_cast<std::size_t>(k) * C;
                    double* orow = out + static_cast<std::size_t>(i) * C;
                    for (int j = 0; j < C; ++j) orow[j] += aik * brow[j];
                }
            break;
        }
        case Op::transpose: {
            const int AR = C, AC = R;
            for (int i = 0; i < AR; ++i)
                for (int j = 0; j < AC; ++j)
                    out[static_cast<std::size_t>(j) * C + i] = a[static_cast<std::size_t>(i) * AC + j];
            break;
        }
        case Op::add:
            for (std::size_t i = 0; i < N; ++i) out[i] = a[i] + b[i];
            break;
        case Op::sub:
            for (std::size_t i = 0; i < N; ++i) out[i] = a[i] - b[i];
            break;
        case Op::mul:
            for (std::size_t i = 0; i < N; ++i) out[i] = a[i] * b[i];
            break;
        case Op::add_rowvec:
            for (int i = 0; i < R; ++i)
                for (int j = 0; j < C; ++j)
                    out[static_cast<std::size_t>(i) * C + j] = a[static_cast<std::size_t>(i) * C + j] + b[j];
            break;
        case Op::add_colvec:
            for (int i = 0; i < R; ++i)
                for (int j = 0; j < C; ++j)
                    out[static_cast<std::size_t>(i) * C + j] = a[static_cast<std::size_t>(i) * C + j] + b[i];
            break;
        case Op::div_colvec:
            for (int i = 0; i < R; ++i)
                for (int j = 0; j < C; ++j)
                    out[static_cast<std::size_t>(i) * C + j] = a[static_cast<std::size_t>(i) * C + j] / b[i];
            break;
        case Op::outer_add:
            for (int i = 0; i < R; ++i)
                for (int j = 0; j < C; ++j) out[static_cast<std::size_t>(i) * C + j] = a[i] + b[j];
            break;
        case Op::scalar_mul:
            for (std::size_t i = 0; i < N; ++i) out[i] = a[0] * b[i];
            break;
        case Op::add_scalar:
            for (std::size_t i = 0; i < N; ++i) out[i] = a[i] + b[0];
            break;
        case Op::scale:
            for (std::size_t i = 0; i < N; ++i) out[i] = a[i] * n.c0;
            break;
        case Op::add_const:
            for (std::size_t i = 0; i < N; ++i) out[i] = a[i] + n.c0;
            break;
        case Op::act_leaky_relu:
            for (std::size_t i = 0; i < N; ++i) out[i] = a[i] > 0.0 ? a[i] : n.c0 * a[i];
            break;
        case Op::act_sigmoid:
            for (std::size_t i = 0; i < N; ++i) out[i] = 1.0 / (1.0 + std::exp(-a[i]));
            break;
        case Op::act_tanh:
            for (std::size_t i = 0; i < N; ++i) out[i] = std::tanh(a[i]);
            break;
        case Op::exp_elem:
            for (std::size_t i = 0; i < N; ++i) out[i] = std::exp(a[i]);
            break;
        case Op::abs_elem:
            for (std::size_t i = 0; i < N; ++i) out[i] = std::fabs(a[i]);
            break;
        case Op::clamp:
            for (std::size_t i = 0; i < N; ++i) out[i] = std::min(std::max(a[i], n.c0), n.c1);
            break;
        case Op::sum_all: {
            const Node& na = nodes_[static_cast<std::size_t>(n.a)];
            double s = 0.0;
            const std::size_t an = static_cast<std::size_t>(na.rows) * na.cols;
            for (std::size_t i = 0; i < an; ++i) s += a[i];
            out[0] = s;
            break;
        }
        case Op::sum_rows: {
            const Node& na = nodes_[static_cast<std::size_t>(n.a)];
            for (int i = 0; i < na.rows; ++i) {
                double s = 0.0;
                const double* row = a + static_cast<std::size_t>(i) * na.cols;
                for (int j = 0; j < na.cols; ++j) s += row[j];
                out[i] = s;
            }
            break;
        }
        case Op::sum_cols: {
            const Node& na = nodes_[static_cast<std::size_t>(n.a)];
            std::fill(out, out + na.cols, 0.0);
            for (int i = 0; i < na.rows; ++i) {
                const double* row = a + static_cast<std::size_t>(i) * na.cols;
                for (int j = 0; j < na.cols; ++j) out[j] += row[j];
            }
            break;
        }
        case Op::slice_cols: {
            const Node& na = nodes_[static_cast<std::size_t>(n.a)];
            const int begin = static_cast<int>(n.c0);
            for (int i = 0; i < R; ++i)
                std::memcpy(out + static_cast<std::size_t>(i) * C,
                            a + static_cast<std::size_t>(i) * na.cols + begin, C * sizeof(double));
            break;
        }
        case Op::slice_rows: {
            const int begin = static_cast<int>(n.c0);
            std::memcpy(out, a + static_cast<std::size_t>(begin) * C, N * sizeof(double));
            break;
        }
        case Op::concat_rows: {
            const Node& na = nodes_[static_cast<std::size_t>(n.a)];
            const std::size_t an = static_cast<std::size_t>(na.rows) * na.cols;
            std::memcpy(out, a, an * sizeof(double));
            std::memcpy(out + an, b, (N - an) * sizeof(double));
            break;
        }
        case Op::concat_cols: {
            const Node& na = nodes_[static_cast<std::size_t>(n.a)];
            const Node& nb = nodes_[static_cast<std::size_t>(n.b)];
            for (int i = 0; i < R; ++i) {
                std::memcpy(out + static_cast<std::size_t>(i) * C,
                            a + static_cast<std::size_t>(i) * na.cols, na.cols * sizeof(double));
                std::memcpy(out + static_cast<std::size_t>(i) * C + na.cols,
                            b + static_cast<std::size_t>(i) * nb.cols, nb.cols * sizeof(double));
            }
            break;
        }
        case Op::reshape:
            std::memcpy(out, a, N * sizeof(double));
            break;
        case Op::softmax_temp: {
            for (int i = 0; i < R; ++i) {
                const double* row = a + static_cast<std::size_t>(i) * C;
                double* orow = out + static_cast<std::size_t>(i) * C;
                double mx = row[0];
                for (int j = 1; j < C; ++j) mx = std::max(mx, row[j]);
                double s = 0.0;
                for (int j = 0; j < C; ++j) {
                    orow[j] = std::exp(n.c0 * (row[j] - mx));
                    s += orow[j];
                }
                for (int j = 0; j < C; ++j) orow[j] /= s;
            }
            break;
        }
        case Op::masked_row_softmax: {
            const Aux& mask = aux_[static_cast<std::size_t>(n.aux)];
            for (int i = 0; i < R; ++i) {
                const double* row = a + static_cast<std::size_t>(i) * C;
                const double* mrow = mask.data.data() + static_cast<std::size_t>(i) * C;
                double* orow = out + static_cast<std::size_t>(i) * C;
                double mx = -1e300;
                for (int j = 0; j < C; ++j)
                    if (mrow[j] != 0.0) mx = std::max(mx, row[j]);
                double s = 0.0;
                for (int j = 0; j < C; ++j) {
                    orow[j] = mrow[j] != 0.0 ? std::exp(row[j] - mx) : 0.0;
                    s += orow[j];
                }
                if (s > 0.0)
                    for (int j = 0; j < C; ++j) orow[j] /= s;
            }
            break;
        }
        case Op::const_left_mul: {
            const Aux& A = aux_[static_cast<std::size_t>(n.aux)];
            const int K = A.rows;
            const int nblocks = R / K;
            std::fill(out, out + N, 0.0);
            for (int blk = 0; blk < nblocks; ++blk) {
                const double* ablk = a + static_cast<std::size_t>(blk) * K * C;
                double* oblk = out + static_cast<std::size_t>(blk) * K * C;
                for (int i = 0; i < K; ++i) {
                    const double* Arow = A.data.data() + static_cast<std::size_t>(i) * K;
                    double* orow = oblk + static_cast<std::size_t>(i) * C;
                    for (int k = 0; k < K; ++k) {
                        const double w = Arow[k];
                        if (w == 0.0) continue;
                        const double* arow = ablk + static_cast<std::size_t>(k) * C;
                        for (int j = 0; j < C; ++j) orow[j] += w * arow[j];
                    }
                }
            }
            break;
        }
    }
}

void Tape::backward(Var loss) {
    if (!loss.valid() || loss.tape != this) throw contract_error("backward: loss not on this tape");
    const Node& ln = nodes_[static_cast<std::size_t>(loss.id)];
    if (ln.rows != 1 || ln.cols != 1)
        throw contract_error("backward: loss must be scalar, got " + std::to_string(ln.rows) + "x" +
                             std::to_string(ln.cols));
    grad_arena_.assign(arena_.size(), 0.0);
    grad_arena_[ln.off] = 1.0;
    has_grads_ = true;
    for (int id = loss.id; id >= 0; --id) {
        const Node& n = nodes_[static_cast<std::size_t>(id)];
        if (!n.requires_grad || n.op == Op::leaf) continue;
        backward_node(id);
    }
}

void Tape::backward_node(int id) {
    const Node& n = nodes_[static_cast<std::size_t>(id)];
    const double* g = grad_arena_.data() + n.off;
    const double* out = arena_.data() + n.off;
    const int R = n.rows, C = n.cols;
    const std::size_t N = static_cast<std::size_t>(R) * C;

    const Node* na = n.a >= 0 ? &nodes_[static_cast<std::size_t>(n.a)] : nullptr;
    const Node* nb = n.b >= 0 ? &nodes_[static_cast<std::size_t>(n.b)] : nullptr;
    const bool ga_req = na && na->requires_grad;
    const bool gb_req = nb && nb->requires_grad;
    double* ga = ga_req ? grad_arena_.data() + na->off : nullptr;
    double* gb = gb_req ? grad_arena_.data() + nb->off : nullptr;
    const double* av = na ? arena_.data() + na->off : nullptr;
    const double* bv = nb ? arena_.data() + nb->off : nullptr;

    switch (n.op) {
        case Op::leaf:
            break;
        case Op::matmul: {
            // dA = g * B^T ; dB = A^T * g
            const int K = na->cols;
            if (ga_req) {
                for (int i = 0; i < R; ++i)
                    for (int k = 0; k < K; ++k) {
                        const double* grow = g + static_cast<std::size_t>(i) * C;
                        const double* brow = bv + static_cast<std::size_t>(k) * C;
                        double s = 0.0;
                        for (int j = 0; j < C; ++j) s += grow[j] * brow[j];
                        ga[static_cast<std::size_t>(i) * K + k] += s;
                    }
            }
            if (gb_req) {
                for (int k = 0; k < K; ++k)
                    for (int i = 0; i < R; ++i) {
                        const double aik = av[static_cast<std::size_t>(i) * K + k];
                        if (aik == 0.0) continue;
                        const double* grow = g + static_cast<std::size_t>(i) * C;
                        double* gbrow = gb + static_cast<std::size_t>(k) * C;
                        for (int j = 0; j < C; ++j) gbrow[j] += aik * grow[j];
                    }
            }
            break;
        }
        case Op::transpose:
            if (ga_req)
                for (int i = 0; i < R; ++i)
                    for (int j = 0; j < C; ++j)
                        ga[static_cast<std::size_t>(j) * R + i] += g[static_cast<std::size_t>(i) * C + j];
            break;
        case Op::add:
            if (ga_req)
                for (std::size_t i = 0; i < N; ++i) ga[i] += g[i];
            if (gb_req)
                for (std::size_t i = 0; i < N; ++i) gb[i] += g[i];
            break;
        case Op::sub:
            if (ga_req)
                for (std::size_t i = 0; i < N; ++i) ga[i] += g[i];
            if (gb_req)
                for (std::size_t i = 0; i < N; ++i) gb[i] -= g[i];
            break;
        case Op::mul:
            if (ga_req)
                for (std::size_t i = 0; i < N; ++i) ga[i] += g[i] * bv[i];
            if (gb_req)
                for (std::size_t i = 0; i < N; ++i) gb[i] += g[i] * av[i];
            break;
        case Op::add_rowvec:
            if (ga_req)
                for (std::size_t i = 0; i < N; ++i) ga[i] += g[i];
            if (gb_req)
                for (int i = 0; i < R; ++i)
                    for (int j = 0; j < C; ++j) gb[j] += g[static_cast<std::size_t>(i) * C + j];
            break;
        case Op::add_colvec:
            if (ga_req)
                for (std::size_t i = 0; i < N; ++i) ga[i] += g[i];
            if (gb_req)
                for (int i = 0; i < R; ++i)
                    for (int j = 0; j < C; ++j) gb[i] += g[static_cast<std::size_t>(i) * C + j];
            break;
        case Op::div_colvec:
            for (int i = 0; i < R; ++i) {
                const double inv = 1.0 / bv[i];
                for (int j = 0; j < C; ++j) {
                    const std::size_t idx = static_cast<std::size_t>(i) * C + j;
                    if (ga_req) ga[idx] += g[idx] * inv;
                    if (gb_req) gb[i] -= g[idx] * av[idx] * inv * inv;
                }
            }
            break;
        case Op::outer_add:
            for (int i = 0; i < R; ++i)
                for (int j = 0; j < C; ++j) {
                    const double gij = g[static_cast<std::size_t>(i) * C + j];
                    if (ga_req) ga[i] += gij;
                    if (gb_req) gb[j] += gij;
                }
            break;
        case Op::scalar_mul: {
            // out = s * B with s scalar (input a), B matrix (input b)
            if (ga_req) {
                double s = 0.0;
                for (std::size_t i = 0; i < N; ++i) s += g[i] * bv[i];
                ga[0] += s;
            }
            if (gb_req)
                for (std::size_t i = 0; i < N; ++i) gb[i] += g[i] * av[0];
            break;
        }
        case Op::add_scalar:
            if (ga_req)
                for (std::size_t i = 0; i < N; ++i) ga[i] += g[i];
            if (gb_req) {
                double s = 0.0;
                for (std::size_t i = 0; i < N; ++i) s += g[i];
                gb[0] += s;
            }
            break;
        case Op::scale:
            if (ga_req)
                for (std::size_t i = 0; i < N; ++i) ga[i] += g[i] * n.c0;
            break;
        case Op::add_const:
            if (ga_req)
                for (std::size_t i = 0; i < N; ++i) ga[i] += g[i];
            break;
        case Op::act_leaky_relu:
            if (ga_req)
                for (std::size_t i = 0; i < N; ++i) ga[i] += g[i] * (av[i] > 0.0 ? 1.0 : n.c0);
            break;
        case Op::act_sigmoid:
            if (ga_req)
                for (std::size_t i = 0; i < N; ++i) ga[i] += g[i] * out[i] * (1.0 - out[i]);
            break;
        case Op::act_tanh:
            if (ga_req)
                for (std::size_t i = 0; i < N; ++i) ga[i] += g[i] * (1.0 - out[i] * out[i]);
            break;
        case Op::exp_elem:
            if (ga_req)
                for (std::size_t i = 0; i < N; ++i) ga[i] += g[i] * out[i];
            break;
        case Op::abs_elem:
            if (ga_req)
                for (std::size_t i = 0; i < N; ++i)
                    ga[i] += g[i] * (av[i] > 0.0 ? 1.0 : (av[i] < 0.0 ? -1.0 : 0.0));
            break;
        case Op::clamp:
            if (ga_req)
                for (std::size_t i = 0; i < N; ++i)
                    ga[i] += (av[i] >= n.c0 && av[i] <= n.c1) ? g[i] : 0.0;
            break;
        case Op::sum_all:
            if (ga_req) {
                const std::size_t an = static_cast<std::size_t>(na->rows) * na->cols;
                for (std::size_t i = 0; i < an; ++i) ga[i] += g[0];
            }
            break;
        case Op::sum_rows:
            if (ga_req)
                for (int i = 0; i < na->rows; ++i)
                    for (int j = 0; j < na->cols; ++j) ga[static_cast<std::size_t>(i) * na->cols + j] += g[i];
            break;
        case Op::sum_cols:
            if (ga_req)
                for (int i = 0; i < na->rows; ++i)
                    for (int j = 0; j < na->cols; ++j) ga[static_cast<std::size_t>(i) * na->cols + j] += g[j];
            break;
        case Op::slice_cols:
            if (ga_req) {
                const int begin = static_cast<int>(n.c0);
                for (int i = 0; i < R; ++i)
                    for (int j = 0; j < C; ++j)
                        ga[static_cast<std::size_t>(i) * na->cols + begin + j] +=
                            g[static_cast<std::size_t>(i) * C + j];
            }
            break;
        case Op::slice_rows:
            if (ga_req) {
                const int begin = static_cast<int>(n.c0);
                for (std::size_t i = 0; i < N; ++i)
                    ga[static_cast<std::size_t>(begin) * C + i] += g[i];
            }
            break;
        case Op::concat_rows:
            if (ga_req) {
                const std::size_t an = static_cast<std::size_t>(na->rows) * na->cols;
                for (std::size_t i = 0; i < an; ++i) ga[i] += g[i];
            }
            if (gb_req) {
                const std::size_t an = static_cast<std::size_t>(na->rows) * na->cols;
                const std::size_t bn = static_cast<std::size_t>(nb->rows) * nb->cols;
                for (std::size_t i = 0; i < bn; ++i) gb[i] += g[an + i];
            }
            break;
        case Op::concat_cols:
            for (int i = 0; i < R; ++i) {
                if (ga_req)
                    for (int j = 0; j < na->cols; ++j)
                        ga[static_cast<std::size_t>(i) * na->cols + j] += g[static_cast<std::size_t>(i) * C + j];
                if (gb_req)
                    for (int j = 0; j < nb->cols; ++j)
                        gb[static_cast<std::size_t>(i) * nb->cols + j] +=
                            g[static_cast<std::size_t>(i) * C + na->cols + j];
            }
            break;
        case Op::reshape:
            if (ga_req)
                for (std::size_t i = 0; i < N; ++i) ga[i] += g[i];
            break;
        case Op::softmax_temp:
            if (ga_req) {
                // ds_j = t * s_j * (g_j - sum_k g_k s_k), row-wise
                for (int i = 0; i < R; ++i) {
                    const double* srow = out + static_cast<std::size_t>(i) * C;
                    const double* grow = g + static_cast<std::size_t>(i) * C;
                    double dot = 0.0;
                    for (int j = 0; j < C; ++j) dot += grow[j] * srow[j];
                    for (int j = 0; j < C; ++j)
                        ga[static_cast<std::size_t>(i) * C + j] += n.c0 * srow[j] * (grow[j] - dot);
                }
            }
            break;
        case Op::masked_row_softmax:
            if (ga_req) {
                const Aux& mask = aux_[static_cast<std::size_t>(n.aux)];
                for (int i = 0; i < R; ++i) {
                    const double* srow = out + static_cast<std::size_t>(i) * C;
                    const double* grow = g + static_cast<std::size_t>(i) * C;
                    const double* mrow = mask.data.data() + static_cast<std::size_t>(i) * C;
                    double dot = 0.0;
                    for (int j = 0; j < C; ++j) dot += grow[j] * srow[j];
                    for (int j = 0; j < C; ++j)
                        if (mrow[j] != 0.0)
                            ga[static_cast<std::size_t>(i) * C + j] += srow[j] * (grow[j] - dot);
                }
            }
            break;
        case Op::const_left_mul:
            if (ga_req) {
                // dA_in = blockdiag(A^T) * g
                const Aux& A = aux_[static_cast<std::size_t>(n.aux)];
                const int K = A.rows;
                const int nblocks = R / K;
                for (int blk = 0; blk < nblocks; ++blk) {
                    const double* gblk = g + static_cast<std::size_t>(blk) * K * C;
                    double* gablk = ga + static_cast<std::size_t>(blk) * K * C;
                    for (int i = 0; i < K; ++i) {
                        const double* Arow = A.data.data() + static_cast<std::size_t>(i) * K;
                        const double* grow = gblk + static_cast<std::size_t>(i) * C;
                        for (int k = 0; k < K; ++k) {
                            const double w = Arow[k];
                            if (w == 0.0) continue;
                            double* garow = gablk + static_cast<std::size_t>(k) * C;
                            for (int j = 0; j < C; ++j) garow[j] += w * grow[j];
                        }
                    }
                }
            }
            break;
    }
}

Matrix Tape::grad_of(Var v) const {
    const Node& n = nodes_[static_cast<std::size_t>(v.id)];
    Matrix m(n.rows, n.cols);
    if (has_grads_ && n.requires_grad)
        std::memcpy(m.data.data(), grad_arena_.data() + n.off, m.size() * sizeof(double));
    return m;
}

void Tape::accumulate_param_grads() {
    if (!has_grads_) throw contract_error("accumulate_param_grads: backward() has not run");
    for (auto& [id, p] : bindings_) {
        const Node& n = nodes_[static_cast<std::size_t>(id)];
        const double* g = grad_arena_.data() + n.off;
        for (std::size_t i = 0; i < p->size(); ++i) p->grad[i] += g[i];
    }
}

void Tape::replay() {
    for (int id = 0; id < static_cast<int>(nodes_.size()); ++id)
        if (nodes_[static_cast<std::size_t>(id)].op != Op::leaf) forward_node(id);
}

void Tape::reset() {
    nodes_.clear();
    arena_.clear();
    grad_arena_.clear();
    aux_.clear();
    bindings_.clear();
    has_grads_ = false;
}

double grad_check(const std::function<double(bool)>& loss_fn, const std::vector<ParamTensor*>& params,
                  double eps) {
    for (ParamTensor* p : params) std::fill(p->grad.begin(), p->grad.end(), 0.0);
    const double base = loss_fn(true);
    if (!std::isfinite(base)) throw numeric_error("grad_check: non-finite loss at base point");

    std::vector<std::vector<double>> analytic;
    analytic.reserve(params.size());
    for (ParamTensor* p : params) analytic.push_back(p->grad);

    double max_err = 0.0;
    for (std::size_t pi = 0; pi < params.size(); ++pi) {
        ParamTensor* p = params[pi];
        for (std::size_t i = 0; i < p->size(); ++i) {
            const double saved = p->value[i];
            p->value[i] = saved + eps;
            const double fp = loss_fn(false);
            p->value[i] = saved - eps;
            const double fm = loss_fn(false);
            p->value[i] = saved;
            if (!std::isfinite(fp) || !std::isfinite(fm))
                throw numeric_error("grad_check: non-finite loss while perturbing " + p->name);
            const double numeric = (fp - fm) / (2.0 * eps);
            const double a = analytic[pi][i];
            const double denom = std::max({1.0, std::fabs(a), std::fabs(numeric)});
            max_err = std::max(max_err, std::fabs(a - numeric) / denom);
        }
    }
    return max_err;
}

}  // namespace grace::diffcore
