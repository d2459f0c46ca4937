#include "rlvr/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <unordered_map>
#include <unordered_set>

#include "rlvr/rng.hpp"

namespace rlvr {

namespace {

void check_finite(const Tensor& t, const char* op) {
    for (double x : t.v) {
        if (!std::isfinite(x)) {
            throw std::invalid_argument(std::string(op) + ": non-finite value in result");
        }
    }
}

[[noreturn]] void shape_error(const char* op, const std::string& detail) {
    throw std::invalid_argument(std::string(op) + ": shape mismatch (" + detail + ")");
}

std::string shape_str(const std::vector<int>& s) {
    std::string r = "[";
    for (size_t i = 0; i < s.size(); ++i) r += (i ? "," : "") + std::to_string(s[i]);
    return r + "]";
}

bool any_grad(std::initializer_list<const TensorPtr*> ts) {
    for (const TensorPtr* t : ts)
        if ((*t)->requires_grad) return true;
    return false;
}

// Wire out's graph metadata when gradients are needed.
template <class Fn>
void attach(const TensorPtr& out, std::vector<TensorPtr> parents, Fn fn) {
    bool need = false;
    for (const auto& p : parents) need = need || p->requires_grad;
    if (!need) return;
    out->requires_grad = true;
    out->parents = std::move(parents);
    out->grad_fn = std::move(fn);
}

}  // namespace

double Tensor::item() const {
    if (!is_scalar()) throw std::invalid_argument("item: tensor is not scalar");
    return v[0];
}

void Tensor::zero_grad() {
    grad.assign(v.size(), 0.0);
}

TensorPtr Tensor::zeros(std::vector<int> shape, bool requires_grad) {
    auto t = std::make_shared<Tensor>();
    int64_t n = 1;
    for (int e : shape) {
        if (e <= 0) throw std::invalid_argument("zeros: non-positive extent");
        n *= e;
    }
    t->shape = std::move(shape);
    t->v.assign(n, 0.0);
    t->requires_grad = requires_grad;
    if (requires_grad) t->grad.assign(n, 0.0);
    return t;
}

TensorPtr Tensor::from(std::vector<int> shape, std::vector<double> values, bool requires_grad) {
    int64_t n = 1;
    for (int e : shape) n *= e;
    if (n != static_cast<int64_t>(values.size()))
        throw std::invalid_argument("from: value count does not match shape");
    auto t = std::make_shared<Tensor>();
    t->shape = std::move(shape);
    t->v = std::move(values);
    t->requires_grad = requires_grad;
    if (requires_grad) t->grad.assign(t->v.size(), 0.0);
    check_finite(*t, "from");
    return t;
}

TensorPtr Tensor::scalar(double x, bool requires_grad) {
    return from({1}, {x}, requires_grad);
}

TensorPtr Tensor::randn(std::vector<int> shape, Rng& rng, double stdev, bool requires_grad) {
    auto t = zeros(std::move(shape), requires_grad);
    for (double& x : t->v) x = rng.gaussian() * stdev;
    return t;
}

// --- matmul ------------------------------------------------------------------

TensorPtr matmul(const TensorPtr& a, const TensorPtr& b) {
    if (a->shape.size() != 2 || b->shape.size() != 2)
        shape_error("matmul", "both operands must be rank 2, got " + shape_str(a->shape) + " x " + shape_str(b->shape));
    const int n = a->shape[0], k = a->shape[1], m = b->shape[1];
    if (b->shape[0] != k)
        shape_error("matmul", shape_str(a->shape) + " x " + shape_str(b->shape));
    auto out = Tensor::zeros({n, m});
    // ikj order keeps the inner loop contiguous.
    for (int i = 0; i < n; ++i) {
        const double* ar = &a->v[static_cast<size_t>(i) * k];
        double* orow = &out->v[static_cast<size_t>(i) * m];
        for (int kk = 0; kk < k; ++kk) {
            const double av = ar[kk];
            if (av == 0.0) continue;
            const double* br = &b->v[static_cast<size_t>(kk) * m];
            for (int j = 0; j < m; ++j) orow[j] += av * br[j];
        }
    }
    check_finite(*out, "matmul");
    attach(out, {a, b},
           [n, k, m](const Tensor& node, const std::vector<double>& dout,
                     const std::vector<std::vector<double>*>& pg) {
               const auto& A = node.parents[0]->v;
               const auto& B = node.parents[1]->v;
               if (pg[0]) {  // dA = dout * B^T
                   for (int i = 0; i < n; ++i)
                       for (int kk = 0; kk < k; ++kk) {
                           double s = 0.0;
                           const double* dr = &dout[static_cast<size_t>(i) * m];
                           const double* br = &B[static_cast<size_t>(kk) * m];
                           for (int j = 0; j < m; ++j) s += dr[j] * br[j];
                           (*pg[0])[static_cast<size_t>(i) * k + kk] += s;
                       }
               }
               if (pg[1]) {  // dB = A^T * dout
                   for (int kk = 0; kk < k; ++kk)
                       for (int i = 0; i < n; ++i) {
                           const double av = A[static_cast<size_t>(i) * k + kk];
                           if (av == 0.0) continue;
                           const double* dr = &dout[static_cast<size_t>(i) * m];
                           double* gr = &(*pg[1])[static_cast<size_t>(kk) * m];
                           for (int j = 0; j < m; ++j) gr[j] += av * dr[j];
                       }
               }
           });
    return out;
}

TensorPtr transpose(const TensorPtr& a) {
    if (a->shape.size() != 2) shape_error("transpose", "rank 2 required, got " + shape_str(a->shape));
    const int n = a->shape[0], m = a->shape[1];
    auto out = Tensor::zeros({m, n});
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < m; ++j) out->v[static_cast<size_t>(j) * n + i] = a->v[static_cast<size_t>(i) * m + j];
    attach(out, {a},
           [n, m](const Tensor&, const std::vector<double>& dout, const std::vector<std::vector<double>*>& pg) {
               if (!pg[0]) return;
               for (int i = 0; i < n; ++i)
                   for (int j = 0; j < m; ++j)
                       (*pg[0])[static_cast<size_t>(i) * m + j] += dout[static_cast<size_t>(j) * n + i];
           });
    return out;
}

// --- add / sub / mul ----------------------------------------------------------

namespace {
enum class BroadcastKind { Same, RowVec, Scalar };

BroadcastKind broadcast_kind(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape == b.shape) return BroadcastKind::Same;
    if (b.is_scalar()) return BroadcastKind::Scalar;
    if (a.shape.size() == 2 && b.shape.size() == 1 && b.shape[0] == a.shape[1]) return BroadcastKind::RowVec;
    shape_error(op, shape_str(a.shape) + " vs " + shape_str(b.shape));
}
}  // namespace

TensorPtr add(const TensorPtr& a, const TensorPtr& b) {
    const BroadcastKind kind = broadcast_kind(*a, *b, "add");
    auto out = Tensor::zeros(a->shape);
    const int64_t n = a->size();
    const int cols = a->cols();
    for (int64_t i = 0; i < n; ++i) {
        double bv = kind == BroadcastKind::Same ? b->v[i] : kind == BroadcastKind::Scalar ? b->v[0] : b->v[i % cols];
        out->v[i] = a->v[i] + bv;
    }
    check_finite(*out, "add");
    attach(out, {a, b},
           [kind, n, cols](const Tensor&, const std::vector<double>& dout,
                           const std::vector<std::vector<double>*>& pg) {
               if (pg[0])
                   for (int64_t i = 0; i < n; ++i) (*pg[0])[i] += dout[i];
               if (pg[1]) {
                   if (kind == BroadcastKind::Same)
                       for (int64_t i = 0; i < n; ++i) (*pg[1])[i] += dout[i];
                   else if (kind == BroadcastKind::Scalar)
                       for (int64_t i = 0; i < n; ++i) (*pg[1])[0] += dout[i];
                   else
                       for (int64_t i = 0; i < n; ++i) (*pg[1])[i % cols] += dout[i];
               }
           });
    return out;
}

TensorPtr sub(const TensorPtr& a, const TensorPtr& b) {
    return add(a, scale(b, -1.0));
}

TensorPtr mul(const TensorPtr& a, const TensorPtr& b) {
    const BroadcastKind kind = broadcast_kind(*a, *b, "mul");
    if (kind == BroadcastKind::RowVec) shape_error("mul", "row-vector broadcast not supported");
    auto out = Tensor::zeros(a->shape);
    const int64_t n = a->size();
    for (int64_t i = 0; i < n; ++i) out->v[i] = a->v[i] * (kind == BroadcastKind::Same ? b->v[i] : b->v[0]);
    check_finite(*out, "mul");
    attach(out, {a, b},
           [kind, n](const Tensor& node, const std::vector<double>& dout,
                     const std::vector<std::vector<double>*>& pg) {
               const auto& av = node.parents[0]->v;
               const auto& bv = node.parents[1]->v;
               if (pg[0])
                   for (int64_t i = 0; i < n; ++i) (*pg[0])[i] += dout[i] * (kind == BroadcastKind::Same ? bv[i] : bv[0]);
               if (pg[1]) {
                   if (kind == BroadcastKind::Same)
                       for (int64_t i = 0; i < n; ++i) (*pg[1])[i] += dout[i] * av[i];
                   else
                       for (int64_t i = 0; i < n; ++i) (*pg[1])[0] += dout[i] * av[i];
               }
           });
    return out;
}

TensorPtr scale(const TensorPtr& a, double c) {
    if (!std::isfinite(c)) throw std::invalid_argument("scale: non-finite constant");
    auto out = Tensor::zeros(a->shape);
    const int64_t n = a->size();
    for (int64_t i = 0; i < n; ++i) out->v[i] = a->v[i] * c;
    check_finite(*out, "scale");
    attach(out, {a},
           [c, n](const Tensor&, const std::vector<double>& dout, const std::vector<std::vector<double>*>& pg) {
               if (!pg[0]) return;
               for (int64_t i = 0; i < n; ++i) (*pg[0])[i] += dout[i] * c;
           });
    return out;
}

// --- pointwise ----------------------------------------------------------------

TensorPtr exp_op(const TensorPtr& a) {
    auto out = Tensor::zeros(a->shape);
    const int64_t n = a->size();
    for (int64_t i = 0; i < n; ++i) out->v[i] = std::exp(a->v[i]);
    check_finite(*out, "exp");
    attach(out, {a},
           [n](const Tensor& node, const std::vector<double>& dout, const std::vector<std::vector<double>*>& pg) {
               if (!pg[0]) return;
               for (int64_t i = 0; i < n; ++i) (*pg[0])[i] += dout[i] * node.v[i];
           });
    return out;
}

TensorPtr log_op(const TensorPtr& a) {
    auto out = Tensor::zeros(a->shape);
    const int64_t n = a->size();
    for (int64_t i = 0; i < n; ++i) out->v[i] = std::log(a->v[i]);
    check_finite(*out, "log");
    attach(out, {a},
           [n](const Tensor& node, const std::vector<double>& dout, const std::vector<std::vector<double>*>& pg) {
               if (!pg[0]) return;
               const auto& av = node.parents[0]->v;
               for (int64_t i = 0; i < n; ++i) (*pg[0])[i] += dout[i] / av[i];
           });
    return out;
}

TensorPtr relu(const TensorPtr& a) {
    auto out = Tensor::zeros(a->shape);
    const int64_t n = a->size();
    for (int64_t i = 0; i < n; ++i) out->v[i] = a->v[i] > 0.0 ? a->v[i] : 0.0;
    attach(out, {a},
           [n](const Tensor& node, const std::vector<double>& dout, const std::vector<std::vector<double>*>& pg) {
               if (!pg[0]) return;
               const auto& av = node.parents[0]->v;
               for (int64_t i = 0; i < n; ++i)
                   if (av[i] > 0.0) (*pg[0])[i] += dout[i];
           });
    return out;
}

// --- softmax family -------------------------------------------------------------

namespace {
// Shared forward for (masked) softmax; allow empty => all allowed.
TensorPtr softmax_impl(const TensorPtr& a, std::vector<uint8_t> allow, const char* op) {
    const int rows = a->rows(), cols = a->cols();
    if (!allow.empty() && static_cast<int64_t>(allow.size()) != a->size())
        shape_error(op, "mask size does not match tensor");
    auto out = Tensor::zeros(a->shape);
    for (int i = 0; i < rows; ++i) {
        const double* x = &a->v[static_cast<size_t>(i) * cols];
        const uint8_t* al = allow.empty() ? nullptr : &allow[static_cast<size_t>(i) * cols];
        double mx = -1e300;
        bool any = false;
        for (int j = 0; j < cols; ++j) {
            if (al && !al[j]) continue;
            any = true;
            mx = std::max(mx, x[j]);
        }
        if (!any) throw std::invalid_argument(std::string(op) + ": row with no allowed entries");
        double z = 0.0;
        double* o = &out->v[static_cast<size_t>(i) * cols];
        for (int j = 0; j < cols; ++j) {
            if (al && !al[j]) {
                o[j] = 0.0;
                continue;
            }
            o[j] = std::exp(x[j] - mx);
            z += o[j];
        }
        for (int j = 0; j < cols; ++j) o[j] /= z;
    }
    check_finite(*out, op);
    attach(out, {a},
           [rows, cols](const Tensor& node, const std::vector<double>& dout,
                        const std::vector<std::vector<double>*>& pg) {
               if (!pg[0]) return;
               for (int i = 0; i < rows; ++i) {
                   const double* p = &node.v[static_cast<size_t>(i) * cols];
                   const double* d = &dout[static_cast<size_t>(i) * cols];
                   double dot = 0.0;
                   for (int j = 0; j < cols; ++j) dot += p[j] * d[j];
                   double* g = &(*pg[0])[static_cast<size_t>(i) * cols];
                   for (int j = 0; j < cols; ++j) g[j] += p[j] * (d[j] - dot);
               }
           });
    return out;
}
}  // namespace

TensorPtr softmax_rows(const TensorPtr& a) { return softmax_impl(a, {}, "softmax"); }

TensorPtr softmax_rows_masked(const TensorPtr& a, std::vector<uint8_t> allow) {
    return softmax_impl(a, std::move(allow), "softmax_masked");
}

TensorPtr log_softmax_rows(const TensorPtr& a) {
    const int rows = a->rows(), cols = a->cols();
    auto out = Tensor::zeros(a->shape);
    for (int i = 0; i < rows; ++i) {
        const double* x = &a->v[static_cast<size_t>(i) * cols];
        double* o = &out->v[static_cast<size_t>(i) * cols];
        double mx = x[0];
        for (int j = 1; j < cols; ++j) mx = std::max(mx, x[j]);
        double z = 0.0;
        for (int j = 0; j < cols; ++j) z += std::exp(x[j] - mx);
        const double lz = mx + std::log(z);
        for (int j = 0; j < cols; ++j) o[j] = x[j] - lz;
    }
    check_finite(*out, "log_softmax");
    attach(out, {a},
           [rows, cols](const Tensor& node, const std::vector<double>& dout,
                        const std::vector<std::vector<double>*>& pg) {
               if (!pg[0]) return;
               for (int i = 0; i < rows; ++i) {
                   const double* lp = &node.v[static_cast<size_t>(i) * cols];
                   const double* d = &dout[static_cast<size_t>(i) * cols];
                   double dsum = 0.0;
                   for (int j = 0; j < cols; ++j) dsum += d[j];
                   double* g = &(*pg[0])[static_cast<size_t>(i) * cols];
                   for (int j = 0; j < cols; ++j) g[j] += d[j] - std::exp(lp[j]) * dsum;
               }
           });
    return out;
}

// --- normalization ----------------------------------------------------------------

TensorPtr rms_norm_rows(const TensorPtr& a, const TensorPtr& gain, double eps) {
    const int rows = a->rows(), cols = a->cols();
    if (gain->shape.size() != 1 || gain->shape[0] != cols)
        shape_error("rms_norm", "gain must be a length-cols vector");
    auto out = Tensor::zeros(a->shape);
    std::vector<double> inv_rms(rows);
    for (int i = 0; i < rows; ++i) {
        const double* x = &a->v[static_cast<size_t>(i) * cols];
        double ms = 0.0;
        for (int j = 0; j < cols; ++j) ms += x[j] * x[j];
        ms = ms / cols + eps;
        const double ir = 1.0 / std::sqrt(ms);
        inv_rms[i] = ir;
        double* o = &out->v[static_cast<size_t>(i) * cols];
        for (int j = 0; j < cols; ++j) o[j] = x[j] * ir * gain->v[j];
    }
    check_finite(*out, "rms_norm");
    attach(out, {a, gain},
           [rows, cols, inv_rms](const Tensor& node, const std::vector<double>& dout,
                                 const std::vector<std::vector<double>*>& pg) {
               const auto& x = node.parents[0]->v;
               const auto& g = node.parents[1]->v;
               for (int i = 0; i < rows; ++i) {
                   const double ir = inv_rms[i];
                   const double* xr = &x[static_cast<size_t>(i) * cols];
                   const double* d = &dout[static_cast<size_t>(i) * cols];
                   if (pg[1]) {
                       for (int j = 0; j < cols; ++j) (*pg[1])[j] += d[j] * xr[j] * ir;
                   }
                   if (pg[0]) {
                       // y_j = x_j * ir * g_j, ir = (mean(x^2)+eps)^{-1/2}
                       // dy_j/dx_k = ir*g_j*(delta_jk - x_j*x_k*ir^2/cols)
                       double dot = 0.0;
                       for (int j = 0; j < cols; ++j) dot += d[j] * g[j] * xr[j];
                       dot *= ir * ir * ir / cols;
                       double* px = &(*pg[0])[static_cast<size_t>(i) * cols];
                       for (int j = 0; j < cols; ++j) px[j] += d[j] * g[j] * ir - xr[j] * dot;
                   }
               }
           });
    return out;
}

TensorPtr l2_normalize_rows(const TensorPtr& a, double eps) {
    const int rows = a->rows(), cols = a->cols();
    auto out = Tensor::zeros(a->shape);
    std::vector<double> inv_norm(rows);
    for (int i = 0; i < rows; ++i) {
        const double* x = &a->v[static_cast<size_t>(i) * cols];
        double ss = eps;
        for (int j = 0; j < cols; ++j) ss += x[j] * x[j];
        const double in = 1.0 / std::sqrt(ss);
        inv_norm[i] = in;
        double* o = &out->v[static_cast<size_t>(i) * cols];
        for (int j = 0; j < cols; ++j) o[j] = x[j] * in;
    }
    check_finite(*out, "l2_normalize");
    attach(out, {a},
           [rows, cols, inv_norm](const Tensor& node, const std::vector<double>& dout,
                                  const std::vector<std::vector<double>*>& pg) {
               if (!pg[0]) return;
               const auto& x = node.parents[0]->v;
               for (int i = 0; i < rows; ++i) {
                   const double in = inv_norm[i];
                   const double* xr = &x[static_cast<size_t>(i) * cols];
                   const double* d = &dout[static_cast<size_t>(i) * cols];
                   double dot = 0.0;
                   for (int j = 0; j < cols; ++j) dot += d[j] * xr[j];
                   dot *= in * in * in;
                   double* px = &(*pg[0])[static_cast<size_t>(i) * cols];
                   for (int j = 0; j < cols; ++j) px[j] += d[j] * in - xr[j] * dot;
               }
           });
    return out;
}

// --- gathers ----------------------------------------------------------------------

TensorPtr embedding_rows(const TensorPtr& table, const std::vector<int>& ids) {
    if (table->shape.size() != 2) shape_error("embedding", "table must be rank 2");
    const int v = table->shape[0], d = table->shape[1];
    const int n = static_cast<int>(ids.size());
    for (int id : ids)
        if (id < 0 || id >= v) throw std::invalid_argument("embedding: id out of range");
    auto out = Tensor::zeros({n, d});
    for (int i = 0; i < n; ++i)
        std::copy_n(&table->v[static_cast<size_t>(ids[i]) * d], d, &out->v[static_cast<size_t>(i) * d]);
    attach(out, {table},
           [ids, d](const Tensor&, const std::vector<double>& dout, const std::vector<std::vector<double>*>& pg) {
               if (!pg[0]) return;
               for (size_t i = 0; i < ids.size(); ++i) {
                   double* g = &(*pg[0])[static_cast<size_t>(ids[i]) * d];
                   const double* dr = &dout[i * d];
                   for (int j = 0; j < d; ++j) g[j] += dr[j];
               }
           });
    return out;
}

TensorPtr select_cols(const TensorPtr& a, const std::vector<int>& ids) {
    const int rows = a->rows(), cols = a->cols();
    if (static_cast<int>(ids.size()) != rows) shape_error("select_cols", "one id per row required");
    for (int id : ids)
        if (id < 0 || id >= cols) throw std::invalid_argument("select_cols: id out of range");
    auto out = Tensor::zeros({rows});
    for (int i = 0; i < rows; ++i) out->v[i] = a->v[static_cast<size_t>(i) * cols + ids[i]];
    attach(out, {a},
           [ids, cols](const Tensor&, const std::vector<double>& dout, const std::vector<std::vector<double>*>& pg) {
               if (!pg[0]) return;
               for (size_t i = 0; i < ids.size(); ++i) (*pg[0])[i * cols + ids[i]] += dout[i];
           });
    return out;
}

TensorPtr slice_cols(const TensorPtr& a, int c0, int c1) {
    if (a->shape.size() != 2) shape_error("slice_cols", "rank 2 required");
    const int rows = a->shape[0], cols = a->shape[1];
    if (c0 < 0 || c1 > cols || c0 >= c1) shape_error("slice_cols", "bad column range");
    const int w = c1 - c0;
    auto out = Tensor::zeros({rows, w});
    for (int i = 0; i < rows; ++i)
        std::copy_n(&a->v[static_cast<size_t>(i) * cols + c0], w, &out->v[static_cast<size_t>(i) * w]);
    attach(out, {a},
           [rows, cols, c0, w](const Tensor&, const std::vector<double>& dout,
                               const std::vector<std::vector<double>*>& pg) {
               if (!pg[0]) return;
               for (int i = 0; i < rows; ++i) {
                   const double* d = &dout[static_cast<size_t>(i) * w];
                   double* g = &(*pg[0])[static_cast<size_t>(i) * cols + c0];
                   for (int j = 0; j < w; ++j) g[j] += d[j];
               }
           });
    return out;
}

TensorPtr slice_rows(const TensorPtr& a, int r0, int r1) {
    if (a->shape.size() != 2) shape_error("slice_rows", "rank 2 required");
    const int rows = a->shape[0], cols = a->shape[1];
    if (r0 < 0 || r1 > rows || r0 >= r1) shape_error("slice_rows", "bad row range");
    const int h = r1 - r0;
    auto out = Tensor::zeros({h, cols});
    std::copy_n(&a->v[static_cast<size_t>(r0) * cols], static_cast<size_t>(h) * cols, out->v.begin());
    attach(out, {a},
           [r0, h, cols](const Tensor&, const std::vector<double>& dout,
                         const std::vector<std::vector<double>*>& pg) {
               if (!pg[0]) return;
               for (size_t i = 0; i < static_cast<size_t>(h) * cols; ++i)
                   (*pg[0])[static_cast<size_t>(r0) * cols + i] += dout[i];
           });
    return out;
}

// --- losses -----------------------------------------------------------------------

TensorPtr masked_cross_entropy(const TensorPtr& logits, const std::vector<int>& targets,
                               const std::vector<uint8_t>& mask) {
    const int rows = logits->rows(), cols = logits->cols();
    if (static_cast<int>(targets.size()) != rows || static_cast<int>(mask.size()) != rows)
        shape_error("masked_cross_entropy", "targets/mask must have one entry per row");
    double msum = 0.0;
    for (uint8_t m : mask) msum += m ? 1.0 : 0.0;
    if (msum == 0.0) throw std::invalid_argument("masked_cross_entropy: empty mask");
    for (int i = 0; i < rows; ++i)
        if (mask[i] && (targets[i] < 0 || targets[i] >= cols))
            throw std::invalid_argument("masked_cross_entropy: target out of range");

    // Row-wise log-sum-exp, stored for backward.
    std::vector<double> lse(rows);
    double loss = 0.0;
    for (int i = 0; i < rows; ++i) {
        const double* x = &logits->v[static_cast<size_t>(i) * cols];
        double mx = x[0];
        for (int j = 1; j < cols; ++j) mx = std::max(mx, x[j]);
        double z = 0.0;
        for (int j = 0; j < cols; ++j) z += std::exp(x[j] - mx);
        lse[i] = mx + std::log(z);
        if (mask[i]) loss -= (x[targets[i]] - lse[i]);
    }
    auto out = Tensor::scalar(loss / msum);
    check_finite(*out, "masked_cross_entropy");
    attach(out, {logits},
           [rows, cols, targets, mask, msum, lse](const Tensor& node, const std::vector<double>& dout,
                                                  const std::vector<std::vector<double>*>& pg) {
               if (!pg[0]) return;
               const auto& x = node.parents[0]->v;
               const double c = dout[0] / msum;
               for (int i = 0; i < rows; ++i) {
                   if (!mask[i]) continue;
                   const double* xr = &x[static_cast<size_t>(i) * cols];
                   double* g = &(*pg[0])[static_cast<size_t>(i) * cols];
                   for (int j = 0; j < cols; ++j) g[j] += c * std::exp(xr[j] - lse[i]);
                   g[targets[i]] -= c;
               }
           });
    return out;
}

TensorPtr topk_rows(const TensorPtr& a, int k) {
    const int rows = a->rows(), cols = a->cols();
    if (k < 1 || k > cols) throw std::invalid_argument("topk_rows: k out of range");
    auto out = Tensor::zeros(a->shape);
    std::vector<uint8_t> kept(a->size(), 0);
    std::vector<int> order(cols);
    for (int i = 0; i < rows; ++i) {
        const double* x = &a->v[static_cast<size_t>(i) * cols];
        for (int j = 0; j < cols; ++j) order[j] = j;
        // Stable value-descending order; equal values keep the lower index.
        std::stable_sort(order.begin(), order.end(), [x](int p, int q) { return x[p] > x[q]; });
        for (int r = 0; r < k; ++r) {
            const int j = order[r];
            out->v[static_cast<size_t>(i) * cols + j] = x[j];
            kept[static_cast<size_t>(i) * cols + j] = 1;
        }
    }
    attach(out, {a},
           [kept](const Tensor&, const std::vector<double>& dout, const std::vector<std::vector<double>*>& pg) {
               if (!pg[0]) return;
               for (size_t i = 0; i < kept.size(); ++i)
                   if (kept[i]) (*pg[0])[i] += dout[i];
           });
    return out;
}

TensorPtr sum_all(const TensorPtr& a) {
    double s = 0.0;
    for (double x : a->v) s += x;
    auto out = Tensor::scalar(s);
    check_finite(*out, "sum");
    const int64_t n = a->size();
    attach(out, {a},
           [n](const Tensor&, const std::vector<double>& dout, const std::vector<std::vector<double>*>& pg) {
               if (!pg[0]) return;
               for (int64_t i = 0; i < n; ++i) (*pg[0])[i] += dout[0];
           });
    return out;
}

TensorPtr mean_all(const TensorPtr& a) {
    return scale(sum_all(a), 1.0 / static_cast<double>(a->size()));
}

TensorPtr ppo_token_surrogate(const TensorPtr& new_logprob, const std::vector<double>& old_logprob,
                              const std::vector<double>& advantage, double clip_eps) {
    if (new_logprob->shape.size() != 1) shape_error("ppo_surrogate", "per-token logprobs must be rank 1");
    const int n = new_logprob->shape[0];
    if (static_cast<int>(old_logprob.size()) != n || static_cast<int>(advantage.size()) != n)
        shape_error("ppo_surrogate", "mismatched lengths");
    if (clip_eps <= 0.0) throw std::invalid_argument("ppo_surrogate: clip epsilon must be positive");
    auto out = Tensor::zeros({n});
    std::vector<double> dsurr_dlp(n);  // d surrogate / d new_logprob
    const double lo = 1.0 - clip_eps, hi = 1.0 + clip_eps;
    for (int i = 0; i < n; ++i) {
        const double r = std::exp(new_logprob->v[i] - old_logprob[i]);
        const double adv = advantage[i];
        const double u = r * adv;
        const double v = std::clamp(r, lo, hi) * adv;
        if (u <= v) {
            out->v[i] = u;
            dsurr_dlp[i] = adv * r;  // d(r*adv)/dlp = r*adv
        } else {
            out->v[i] = v;
            dsurr_dlp[i] = (r > lo && r < hi) ? adv * r : 0.0;
        }
    }
    check_finite(*out, "ppo_surrogate");
    attach(out, {new_logprob},
           [dsurr_dlp, n](const Tensor&, const std::vector<double>& dout,
                          const std::vector<std::vector<double>*>& pg) {
               if (!pg[0]) return;
               for (int i = 0; i < n; ++i) (*pg[0])[i] += dout[i] * dsurr_dlp[i];
           });
    return out;
}

// --- backward ------------------------------------------------------------------------

void backward(const TensorPtr& loss) {
    if (!loss->is_scalar()) throw std::invalid_argument("backward: loss must be scalar");
    if (!loss->requires_grad) return;  // nothing trainable upstream

    // Topological order via iterative post-order DFS.
    std::vector<Tensor*> order;
    std::unordered_set<Tensor*> visited;
    std::vector<std::pair<Tensor*, size_t>> stack;
    stack.emplace_back(loss.get(), 0);
    visited.insert(loss.get());
    while (!stack.empty()) {
        auto& [node, idx] = stack.back();
        if (idx < node->parents.size()) {
            Tensor* p = node->parents[idx++].get();
            if (p->requires_grad && !visited.count(p)) {
                visited.insert(p);
                stack.emplace_back(p, 0);
            }
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }

    // Per-pass scratch buffers; leaf grads accumulate into .grad at the end so
    // repeated backward calls sum their contributions.
    std::unordered_map<Tensor*, std::vector<double>> buf;
    buf.reserve(order.size());
    for (Tensor* t : order) buf.emplace(t, std::vector<double>(t->v.size(), 0.0));
    buf[loss.get()][0] = 1.0;

    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Tensor* node = *it;
        if (!node->grad_fn) continue;
        std::vector<std::vector<double>*> pgrads(node->parents.size(), nullptr);
        for (size_t i = 0; i < node->parents.size(); ++i) {
            Tensor* p = node->parents[i].get();
            if (p->requires_grad) pgrads[i] = &buf[p];
        }
        node->grad_fn(*node, buf[node], pgrads);
    }

    for (Tensor* t : order) {
        if (t->is_leaf()) {
            if (t->grad.size() != t->v.size()) t->grad.assign(t->v.size(), 0.0);
            const auto& b = buf[t];
            for (size_t i = 0; i < b.size(); ++i) t->grad[i] += b[i];
        }
    }
}

}  // namespace rlvr
