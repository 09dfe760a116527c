#pragma once

// Minimal reverse-mode automatic differentiation over dense double matrices.
//
// A Tape records every operation of one forward pass. Leaves are either
// constants or Parameters; calling backward() on a 1x1 result accumulates
// d(result)/d(param) into each Parameter::grad. Tapes are single-use and
// not thread-safe; Parameters may be shared by several tapes as long as
// backward() calls are serialized.

#include <Eigen/Dense>

#include <functional>
#include <span>
#include <string>
#include <vector>

namespace memecap {

using Mat = Eigen::MatrixXd;
using Vec = Eigen::VectorXd;
using RowVec = Eigen::RowVectorXd;

namespace ad {

struct Parameter {
    std::string name;
    Mat value;
    Mat grad;

    Parameter() = default;
    Parameter(std::string n, Mat v) : name(std::move(n)), value(std::move(v)), grad(Mat::Zero(value.rows(), value.cols())) {}

    void zero_grad() { grad.setZero(value.rows(), value.cols()); }
    Eigen::Index size() const { return value.size(); }
};

/// Flat list of non-owning parameter pointers; the unit optimizers and
/// checkpoints operate on.
using ParamList = std::vector<Parameter *>;

void zero_grads(const ParamList &params);

class Tape;

class Var {
  public:
    Var() = default;

    const Mat &value() const;
    const Mat &grad() const;
    Eigen::Index rows() const { return value().rows(); }
    Eigen::Index cols() const { return value().cols(); }
    /// Value of a 1x1 variable.
    double scalar() const;
    Tape *tape() const { return tape_; }
    int id() const { return id_; }
    bool valid() const { return tape_ != nullptr; }

  private:
    friend class Tape;
    Var(Tape *tape, int id) : tape_(tape), id_(id) {}
    Tape *tape_ = nullptr;
    int id_ = -1;
};

class Tape {
  public:
    /// Receives the tape, the id of the node being differentiated and d(loss)/d(node).
    using BackwardFn = std::function<void(Tape &, int self, const Mat &upstream)>;

    Tape() = default;
    Tape(const Tape &) = delete;
    Tape &operator=(const Tape &) = delete;

    Var constant(Mat value);
    Var scalar(double v);
    Var param(Parameter &p);

    /// Seeds d(loss)/d(loss) = 1 and propagates to every parameter leaf.
    void backward(const Var &loss);

    // Used by op implementations.
    Var push(Mat value, std::vector<int> parents, BackwardFn fn);
    const Mat &value_of(int id) const { return nodes_[id].value; }
    const Mat &grad_of(int id) const { return nodes_[id].grad; }
    void accumulate(int id, const Mat &g);
    bool needs_grad(int id) const { return nodes_[id].needs_grad; }
    std::size_t size() const { return nodes_.size(); }

  private:
    struct Node {
        Mat value;
        Mat grad;
        Parameter *param = nullptr;
        bool needs_grad = false;
        BackwardFn backward;
    };
    std::vector<Node> nodes_;
};

// ---- elementwise / structural ops ----
Var add(const Var &a, const Var &b);
Var sub(const Var &a, const Var &b);
Var mul(const Var &a, const Var &b);
Var scale(const Var &a, double s);
Var add_scalar(const Var &a, double s);
/// a * s where s is a 1x1 variable.
Var scale_by(const Var &a, const Var &s);
/// Adds a 1 x cols row to every row of a.
Var add_row(const Var &a, const Var &row);
Var neg(const Var &a);

Var exp(const Var &a);
Var log(const Var &a);
Var tanh(const Var &a);
Var sigmoid(const Var &a);
/// log(sigmoid(a)), stable for large |a|.
Var log_sigmoid(const Var &a);
/// tanh approximation of GELU.
Var gelu(const Var &a);

Var matmul(const Var &a, const Var &b);
/// a * b^T
Var matmul_nt(const Var &a, const Var &b);
Var transpose(const Var &a);

// ---- reductions ----
Var sum(const Var &a);
Var mean(const Var &a);
/// 1 x cols vector of column means.
Var col_mean(const Var &a);
/// rows x 1 vector of row sums.
Var row_sum(const Var &a);

// ---- row-wise normalizations ----
/// Softmax of each row. With causal = true, entry (i, j) is masked for j > i + offset.
Var softmax_rows(const Var &a, bool causal = false, int offset = 0);
Var log_softmax_rows(const Var &a);
Var layer_norm_rows(const Var &x, const Var &gain, const Var &bias, double eps = 1e-5);

// ---- indexing ----
Var gather_rows(const Var &table, std::span<const int> ids);
Var concat_rows(std::span<const Var> parts);
Var slice_rows(const Var &a, Eigen::Index start, Eigen::Index count);
Var slice_cols(const Var &a, Eigen::Index start, Eigen::Index count);
Var pick(const Var &a, Eigen::Index r, Eigen::Index c);
/// n x 1 vector with entry i = a(i, cols[i]).
Var pick_per_row(const Var &a, std::span<const int> cols);

/// Cosine similarity of two 1 x d row vectors, as a 1x1 variable.
Var cosine(const Var &a, const Var &b);

} // namespace ad
} // namespace memecap
