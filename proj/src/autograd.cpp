#include "memecap/autograd.hpp"

#include "memecap/error.hpp"

#include <cmath>
#include <limits>
#include <sstream>

namespace memecap::ad {

namespace {

std::string shape_str(const Mat &m) {
    std::ostringstream os;
    os << m.rows() << "x" << m.cols();
    return os.str();
}

void require_same_shape(const Var &a, const Var &b, const char *op) {
    if (a.rows() != b.rows() || a.cols() != b.cols()) {
        throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.value()) + " vs " +
                         shape_str(b.value()));
    }
}

Tape &tape_of(const Var &a) {
    if (a.tape() == nullptr) {
        throw Error("operation on an unbound variable");
    }
    return *a.tape();
}

double stable_log_sigmoid(double x) { return x >= 0 ? -std::log1p(std::exp(-x)) : x - std::log1p(std::exp(x)); }

double stable_sigmoid(double x) {
    if (x >= 0) {
        return 1.0 / (1.0 + std::exp(-x));
    }
    const double e = std::exp(x);
    return e / (1.0 + e);
}

constexpr double kGeluC = 0.7978845608028654; // sqrt(2/pi)

} // namespace

void zero_grads(const ParamList &params) {
    for (Parameter *p : params) {
        p->zero_grad();
    }
}

const Mat &Var::value() const { return tape_->value_of(id_); }
const Mat &Var::grad() const { return tape_->grad_of(id_); }

double Var::scalar() const {
    const Mat &v = value();
    if (v.size() != 1) {
        throw ShapeError("scalar(): variable is " + shape_str(v));
    }
    return v(0, 0);
}

Var Tape::constant(Mat value) {
    Node n;
    n.value = std::move(value);
    nodes_.push_back(std::move(n));
    return Var(this, static_cast<int>(nodes_.size()) - 1);
}

Var Tape::scalar(double v) { return constant(Mat::Constant(1, 1, v)); }

Var Tape::param(Parameter &p) {
    Node n;
    n.value = p.value;
    n.param = &p;
    n.needs_grad = true;
    nodes_.push_back(std::move(n));
    return Var(this, static_cast<int>(nodes_.size()) - 1);
}

Var Tape::push(Mat value, std::vector<int> parents, BackwardFn fn) {
    Node n;
    n.value = std::move(value);
    for (int p : parents) {
        n.needs_grad = n.needs_grad || nodes_[p].needs_grad;
    }
    if (n.needs_grad) {
        n.backward = std::move(fn);
    }
    nodes_.push_back(std::move(n));
    return Var(this, static_cast<int>(nodes_.size()) - 1);
}

void Tape::accumulate(int id, const Mat &g) {
    Node &n = nodes_[id];
    if (!n.needs_grad) {
        return;
    }
    if (n.grad.size() == 0) {
        n.grad = g;
    } else {
        n.grad += g;
    }
}

void Tape::backward(const Var &loss) {
    if (loss.tape() != this) {
        throw Error("backward(): variable belongs to another tape");
    }
    if (loss.value().size() != 1) {
        throw ShapeError("backward(): loss must be 1x1, got " + shape_str(loss.value()));
    }
    for (Node &n : nodes_) {
        n.grad.resize(0, 0);
    }
    accumulate(loss.id(), Mat::Ones(1, 1));
    for (int i = loss.id(); i >= 0; --i) {
        Node &n = nodes_[i];
        if (!n.needs_grad || n.grad.size() == 0) {
            continue;
        }
        if (n.param != nullptr) {
            n.param->grad += n.grad;
        } else if (n.backward) {
            const Mat upstream = std::move(n.grad);
            n.grad.resize(0, 0);
            n.backward(*this, i, upstream);
        }
    }
}

// ---------------------------------------------------------------------------
// elementwise

Var add(const Var &a, const Var &b) {
    require_same_shape(a, b, "add");
    const int ia = a.id(), ib = b.id();
    return tape_of(a).push(a.value() + b.value(), {ia, ib}, [ia, ib](Tape &t, int, const Mat &g) {
        t.accumulate(ia, g);
        t.accumulate(ib, g);
    });
}

Var sub(const Var &a, const Var &b) {
    require_same_shape(a, b, "sub");
    const int ia = a.id(), ib = b.id();
    return tape_of(a).push(a.value() - b.value(), {ia, ib}, [ia, ib](Tape &t, int, const Mat &g) {
        t.accumulate(ia, g);
        t.accumulate(ib, -g);
    });
}

Var mul(const Var &a, const Var &b) {
    require_same_shape(a, b, "mul");
    const int ia = a.id(), ib = b.id();
    return tape_of(a).push(a.value().cwiseProduct(b.value()), {ia, ib}, [ia, ib](Tape &t, int, const Mat &g) {
        t.accumulate(ia, g.cwiseProduct(t.value_of(ib)));
        t.accumulate(ib, g.cwiseProduct(t.value_of(ia)));
    });
}

Var scale(const Var &a, double s) {
    const int ia = a.id();
    return tape_of(a).push(a.value() * s, {ia}, [ia, s](Tape &t, int, const Mat &g) { t.accumulate(ia, g * s); });
}

Var add_scalar(const Var &a, double s) {
    const int ia = a.id();
    Mat out = a.value().array() + s;
    return tape_of(a).push(std::move(out), {ia}, [ia](Tape &t, int, const Mat &g) { t.accumulate(ia, g); });
}

Var scale_by(const Var &a, const Var &s) {
    if (s.value().size() != 1) {
        throw ShapeError("scale_by: scale must be 1x1, got " + shape_str(s.value()));
    }
    const int ia = a.id(), is = s.id();
    return tape_of(a).push(a.value() * s.scalar(), {ia, is}, [ia, is](Tape &t, int, const Mat &g) {
        t.accumulate(ia, g * t.value_of(is)(0, 0));
        t.accumulate(is, Mat::Constant(1, 1, g.cwiseProduct(t.value_of(ia)).sum()));
    });
}

Var add_row(const Var &a, const Var &row) {
    if (row.rows() != 1 || row.cols() != a.cols()) {
        throw ShapeError("add_row: expected 1x" + std::to_string(a.cols()) + " row, got " +
                         shape_str(row.value()));
    }
    const int ia = a.id(), ir = row.id();
    Mat out = a.value().rowwise() + row.value().row(0);
    return tape_of(a).push(std::move(out), {ia, ir}, [ia, ir](Tape &t, int, const Mat &g) {
        t.accumulate(ia, g);
        t.accumulate(ir, g.colwise().sum());
    });
}

Var neg(const Var &a) { return scale(a, -1.0); }

Var exp(const Var &a) {
    const int ia = a.id();
    Mat out = a.value().array().exp();
    return tape_of(a).push(std::move(out), {ia}, [ia](Tape &t, int self, const Mat &g) {
        t.accumulate(ia, g.cwiseProduct(t.value_of(self)));
    });
}

Var log(const Var &a) {
    const int ia = a.id();
    Mat out = a.value().array().log();
    return tape_of(a).push(std::move(out), {ia}, [ia](Tape &t, int, const Mat &g) {
        t.accumulate(ia, g.cwiseQuotient(t.value_of(ia)));
    });
}

Var tanh(const Var &a) {
    const int ia = a.id();
    Mat out = a.value().array().tanh();
    return tape_of(a).push(std::move(out), {ia}, [ia](Tape &t, int self, const Mat &g) {
        const Mat &y = t.value_of(self);
        t.accumulate(ia, g.array() * (1.0 - y.array().square()));
    });
}

Var sigmoid(const Var &a) {
    const int ia = a.id();
    Mat out = a.value().unaryExpr([](double x) { return stable_sigmoid(x); });
    return tape_of(a).push(std::move(out), {ia}, [ia](Tape &t, int self, const Mat &g) {
        const Mat &y = t.value_of(self);
        t.accumulate(ia, g.array() * y.array() * (1.0 - y.array()));
    });
}

Var log_sigmoid(const Var &a) {
    const int ia = a.id();
    Mat out = a.value().unaryExpr([](double x) { return stable_log_sigmoid(x); });
    return tape_of(a).push(std::move(out), {ia}, [ia](Tape &t, int, const Mat &g) {
        // d/dx log(sigmoid(x)) = sigmoid(-x)
        Mat s = t.value_of(ia).unaryExpr([](double x) { return stable_sigmoid(-x); });
        t.accumulate(ia, g.cwiseProduct(s));
    });
}

Var gelu(const Var &a) {
    const int ia = a.id();
    Mat out = a.value().unaryExpr([](double x) {
        return 0.5 * x * (1.0 + std::tanh(kGeluC * (x + 0.044715 * x * x * x)));
    });
    return tape_of(a).push(std::move(out), {ia}, [ia](Tape &t, int, const Mat &g) {
        Mat d = t.value_of(ia).unaryExpr([](double x) {
            const double u = kGeluC * (x + 0.044715 * x * x * x);
            const double th = std::tanh(u);
            const double du = kGeluC * (1.0 + 3.0 * 0.044715 * x * x);
            return 0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * du;
        });
        t.accumulate(ia, g.cwiseProduct(d));
    });
}

// ---------------------------------------------------------------------------
// linear algebra

Var matmul(const Var &a, const Var &b) {
    if (a.cols() != b.rows()) {
        throw ShapeError("matmul: " + shape_str(a.value()) + " * " + shape_str(b.value()));
    }
    const int ia = a.id(), ib = b.id();
    Mat out = a.value() * b.value();
    return tape_of(a).push(std::move(out), {ia, ib}, [ia, ib](Tape &t, int, const Mat &g) {
        if (t.needs_grad(ia)) {
            t.accumulate(ia, g * t.value_of(ib).transpose());
        }
        if (t.needs_grad(ib)) {
            t.accumulate(ib, t.value_of(ia).transpose() * g);
        }
    });
}

Var matmul_nt(const Var &a, const Var &b) {
    if (a.cols() != b.cols()) {
        throw ShapeError("matmul_nt: " + shape_str(a.value()) + " * (" + shape_str(b.value()) + ")^T");
    }
    const int ia = a.id(), ib = b.id();
    Mat out = a.value() * b.value().transpose();
    return tape_of(a).push(std::move(out), {ia, ib}, [ia, ib](Tape &t, int, const Mat &g) {
        if (t.needs_grad(ia)) {
            t.accumulate(ia, g * t.value_of(ib));
        }
        if (t.needs_grad(ib)) {
            t.accumulate(ib, g.transpose() * t.value_of(ia));
        }
    });
}

Var transpose(const Var &a) {
    const int ia = a.id();
    Mat out = a.value().transpose();
    return tape_of(a).push(std::move(out), {ia}, [ia](Tape &t, int, const Mat &g) {
        t.accumulate(ia, g.transpose());
    });
}

// ---------------------------------------------------------------------------
// reductions

Var sum(const Var &a) {
    const int ia = a.id();
    const Eigen::Index r = a.rows(), c = a.cols();
    return tape_of(a).push(Mat::Constant(1, 1, a.value().sum()), {ia}, [ia, r, c](Tape &t, int, const Mat &g) {
        t.accumulate(ia, Mat::Constant(r, c, g(0, 0)));
    });
}

Var mean(const Var &a) {
    const Eigen::Index n = a.value().size();
    if (n == 0) {
        throw ShapeError("mean of an empty matrix");
    }
    return scale(sum(a), 1.0 / static_cast<double>(n));
}

Var col_mean(const Var &a) {
    const int ia = a.id();
    const Eigen::Index r = a.rows();
    if (r == 0) {
        throw ShapeError("col_mean of a matrix with no rows");
    }
    Mat out = a.value().colwise().mean();
    return tape_of(a).push(std::move(out), {ia}, [ia, r](Tape &t, int, const Mat &g) {
        Mat d = g.replicate(r, 1) / static_cast<double>(r);
        t.accumulate(ia, d);
    });
}

Var row_sum(const Var &a) {
    const int ia = a.id();
    const Eigen::Index c = a.cols();
    Mat out = a.value().rowwise().sum();
    return tape_of(a).push(std::move(out), {ia}, [ia, c](Tape &t, int, const Mat &g) {
        t.accumulate(ia, g.replicate(1, c));
    });
}

// ---------------------------------------------------------------------------
// normalizations

Var softmax_rows(const Var &a, bool causal, int offset) {
    const Mat &x = a.value();
    Mat out = Mat::Zero(x.rows(), x.cols());
    for (Eigen::Index i = 0; i < x.rows(); ++i) {
        const Eigen::Index limit = causal ? std::min<Eigen::Index>(x.cols(), i + offset + 1) : x.cols();
        if (limit <= 0) {
            continue;
        }
        const double m = x.row(i).head(limit).maxCoeff();
        double z = 0.0;
        for (Eigen::Index j = 0; j < limit; ++j) {
            out(i, j) = std::exp(x(i, j) - m);
            z += out(i, j);
        }
        out.row(i).head(limit) /= z;
    }
    const int ia = a.id();
    return tape_of(a).push(std::move(out), {ia}, [ia](Tape &t, int self, const Mat &g) {
        const Mat &y = t.value_of(self);
        // dx = y * (g - sum(g * y)) row-wise; masked entries have y = 0.
        Mat dot = g.cwiseProduct(y).rowwise().sum();
        Mat d = y.cwiseProduct(g - dot.replicate(1, g.cols()));
        t.accumulate(ia, d);
    });
}

Var log_softmax_rows(const Var &a) {
    const Mat &x = a.value();
    Mat out(x.rows(), x.cols());
    for (Eigen::Index i = 0; i < x.rows(); ++i) {
        const double m = x.row(i).maxCoeff();
        const double lse = m + std::log((x.row(i).array() - m).exp().sum());
        out.row(i) = x.row(i).array() - lse;
    }
    const int ia = a.id();
    return tape_of(a).push(std::move(out), {ia}, [ia](Tape &t, int self, const Mat &g) {
        const Mat p = t.value_of(self).array().exp();
        Mat gs = g.rowwise().sum();
        t.accumulate(ia, g - p.cwiseProduct(gs.replicate(1, g.cols())));
    });
}

Var layer_norm_rows(const Var &x, const Var &gain, const Var &bias, double eps) {
    const Mat &v = x.value();
    const Eigen::Index n = v.rows(), d = v.cols();
    if (gain.rows() != 1 || gain.cols() != d || bias.rows() != 1 || bias.cols() != d) {
        throw ShapeError("layer_norm_rows: gain/bias must be 1x" + std::to_string(d));
    }
    Mat xhat(n, d);
    Vec inv_std(n);
    for (Eigen::Index i = 0; i < n; ++i) {
        const double mu = v.row(i).mean();
        const double var = (v.row(i).array() - mu).square().mean();
        inv_std(i) = 1.0 / std::sqrt(var + eps);
        xhat.row(i) = (v.row(i).array() - mu) * inv_std(i);
    }
    Mat out = (xhat.array().rowwise() * gain.value().row(0).array()).rowwise() + bias.value().row(0).array();
    const int ix = x.id(), ig = gain.id(), ib = bias.id();
    return tape_of(x).push(std::move(out), {ix, ig, ib},
                           [ix, ig, ib, xhat, inv_std, d](Tape &t, int, const Mat &g) {
                               if (t.needs_grad(ig)) {
                                   t.accumulate(ig, g.cwiseProduct(xhat).colwise().sum());
                               }
                               if (t.needs_grad(ib)) {
                                   t.accumulate(ib, g.colwise().sum());
                               }
                               if (t.needs_grad(ix)) {
                                   const RowVec gv = t.value_of(ig).row(0);
                                   Mat gx(g.rows(), d);
                                   for (Eigen::Index i = 0; i < g.rows(); ++i) {
                                       const RowVec gh = g.row(i).cwiseProduct(gv);
                                       const double m1 = gh.mean();
                                       const double m2 = gh.cwiseProduct(xhat.row(i)).mean();
                                       gx.row(i) = inv_std(i) * (gh.array() - m1 - xhat.row(i).array() * m2);
                                   }
                                   t.accumulate(ix, gx);
                               }
                           });
}

// ---------------------------------------------------------------------------
// indexing

Var gather_rows(const Var &table, std::span<const int> ids) {
    const Mat &v = table.value();
    std::vector<int> idx(ids.begin(), ids.end());
    Mat out(static_cast<Eigen::Index>(idx.size()), v.cols());
    for (std::size_t i = 0; i < idx.size(); ++i) {
        if (idx[i] < 0 || idx[i] >= v.rows()) {
            throw ShapeError("gather_rows: index " + std::to_string(idx[i]) + " outside table of " +
                             std::to_string(v.rows()) + " rows");
        }
        out.row(static_cast<Eigen::Index>(i)) = v.row(idx[i]);
    }
    const int it = table.id();
    const Eigen::Index rows = v.rows(), cols = v.cols();
    return tape_of(table).push(std::move(out), {it}, [it, idx, rows, cols](Tape &t, int, const Mat &g) {
        Mat d = Mat::Zero(rows, cols);
        for (std::size_t i = 0; i < idx.size(); ++i) {
            d.row(idx[i]) += g.row(static_cast<Eigen::Index>(i));
        }
        t.accumulate(it, d);
    });
}

Var concat_rows(std::span<const Var> parts) {
    if (parts.empty()) {
        throw ShapeError("concat_rows: no inputs");
    }
    const Eigen::Index cols = parts[0].cols();
    Eigen::Index rows = 0;
    std::vector<int> ids;
    std::vector<Eigen::Index> offsets;
    for (const Var &p : parts) {
        if (p.cols() != cols) {
            throw ShapeError("concat_rows: column mismatch " + shape_str(parts[0].value()) + " vs " +
                             shape_str(p.value()));
        }
        ids.push_back(p.id());
        offsets.push_back(rows);
        rows += p.rows();
    }
    Mat out(rows, cols);
    for (std::size_t k = 0; k < parts.size(); ++k) {
        out.middleRows(offsets[k], parts[k].rows()) = parts[k].value();
    }
    return tape_of(parts[0]).push(std::move(out), ids, [ids, offsets](Tape &t, int, const Mat &g) {
        for (std::size_t k = 0; k < ids.size(); ++k) {
            const Eigen::Index r = t.value_of(ids[k]).rows();
            t.accumulate(ids[k], g.middleRows(offsets[k], r));
        }
    });
}

Var slice_rows(const Var &a, Eigen::Index start, Eigen::Index count) {
    if (start < 0 || count < 0 || start + count > a.rows()) {
        throw ShapeError("slice_rows: [" + std::to_string(start) + ", +" + std::to_string(count) + ") outside " +
                         shape_str(a.value()));
    }
    const int ia = a.id();
    const Eigen::Index r = a.rows(), c = a.cols();
    Mat out = a.value().middleRows(start, count);
    return tape_of(a).push(std::move(out), {ia}, [ia, r, c, start, count](Tape &t, int, const Mat &g) {
        Mat d = Mat::Zero(r, c);
        d.middleRows(start, count) = g;
        t.accumulate(ia, d);
    });
}

Var slice_cols(const Var &a, Eigen::Index start, Eigen::Index count) {
    if (start < 0 || count < 0 || start + count > a.cols()) {
        throw ShapeError("slice_cols: [" + std::to_string(start) + ", +" + std::to_string(count) + ") outside " +
                         shape_str(a.value()));
    }
    const int ia = a.id();
    const Eigen::Index r = a.rows(), c = a.cols();
    Mat out = a.value().middleCols(start, count);
    return tape_of(a).push(std::move(out), {ia}, [ia, r, c, start, count](Tape &t, int, const Mat &g) {
        Mat d = Mat::Zero(r, c);
        d.middleCols(start, count) = g;
        t.accumulate(ia, d);
    });
}

Var pick(const Var &a, Eigen::Index r, Eigen::Index c) {
    if (r < 0 || c < 0 || r >= a.rows() || c >= a.cols()) {
        throw ShapeError("pick: (" + std::to_string(r) + "," + std::to_string(c) + ") outside " +
                         shape_str(a.value()));
    }
    const int ia = a.id();
    const Eigen::Index rows = a.rows(), cols = a.cols();
    return tape_of(a).push(Mat::Constant(1, 1, a.value()(r, c)), {ia},
                           [ia, rows, cols, r, c](Tape &t, int, const Mat &g) {
                               Mat d = Mat::Zero(rows, cols);
                               d(r, c) = g(0, 0);
                               t.accumulate(ia, d);
                           });
}

Var pick_per_row(const Var &a, std::span<const int> cols) {
    if (static_cast<Eigen::Index>(cols.size()) != a.rows()) {
        throw ShapeError("pick_per_row: " + std::to_string(cols.size()) + " indices for " + shape_str(a.value()));
    }
    std::vector<int> idx(cols.begin(), cols.end());
    Mat out(a.rows(), 1);
    for (Eigen::Index i = 0; i < a.rows(); ++i) {
        if (idx[i] < 0 || idx[i] >= a.cols()) {
            throw ShapeError("pick_per_row: column " + std::to_string(idx[i]) + " outside " + shape_str(a.value()));
        }
        out(i, 0) = a.value()(i, idx[i]);
    }
    const int ia = a.id();
    const Eigen::Index rows = a.rows(), ncols = a.cols();
    return tape_of(a).push(std::move(out), {ia}, [ia, idx, rows, ncols](Tape &t, int, const Mat &g) {
        Mat d = Mat::Zero(rows, ncols);
        for (Eigen::Index i = 0; i < rows; ++i) {
            d(i, idx[i]) = g(i, 0);
        }
        t.accumulate(ia, d);
    });
}

Var cosine(const Var &a, const Var &b) {
    require_same_shape(a, b, "cosine");
    if (a.rows() != 1) {
        throw ShapeError("cosine: expected row vectors, got " + shape_str(a.value()));
    }
    const RowVec u = a.value().row(0), v = b.value().row(0);
    const double nu = u.norm(), nv = v.norm();
    if (nu == 0.0 || nv == 0.0) {
        throw NumericError("cosine: zero-norm vector");
    }
    const double c = u.dot(v) / (nu * nv);
    const int ia = a.id(), ib = b.id();
    return tape_of(a).push(Mat::Constant(1, 1, c), {ia, ib}, [ia, ib, u, v, nu, nv, c](Tape &t, int, const Mat &g) {
        const double s = g(0, 0);
        t.accumulate(ia, s * (v / (nu * nv) - c * u / (nu * nu)));
        t.accumulate(ib, s * (u / (nu * nv) - c * v / (nv * nv)));
    });
}

} // namespace memecap::ad
