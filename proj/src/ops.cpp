#include "hmoe/ops.hpp"

#include "hmoe/error.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <limits>

namespace hmoe::ops {

namespace {

using MatR = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using CMap = Eigen::Map<const MatR>;
using Map = Eigen::Map<MatR>;
using StridedCMap = Eigen::Map<const MatR, 0, Eigen::OuterStride<>>;
using StridedMap = Eigen::Map<MatR, 0, Eigen::OuterStride<>>;

using detail::Node;

Map as_matrix(std::vector<double>& v, std::size_t rows, std::size_t cols)
{
    return Map(v.data(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
}

void require_rank(const Tensor& t, std::size_t rank, const char* op, const char* name)
{
    if (t.rank() != rank)
        throw DimensionError(std::string(op) + ": " + name + " must have rank " + std::to_string(rank) +
                             ", got shape " + shape_str(t.shape()));
}

[[noreturn]] void mismatch(const char* op, const Tensor& a, const Tensor& b)
{
    throw DimensionError(std::string(op) + ": shape mismatch between " + shape_str(a.shape()) + " and " +
                         shape_str(b.shape()));
}

double sigmoid(double z)
{
    if (z >= 0.0)
        return 1.0 / (1.0 + std::exp(-z));
    const double e = std::exp(z);
    return e / (1.0 + e);
}

// Rank-1 b promoted across the rows of a.
bool row_promotion(const Tensor& a, const Tensor& b)
{
    return b.rank() == 1 && a.rank() >= 1 && a.shape().back() == b.dim(0) && a.shape() != b.shape();
}

void check_ids(std::span<const std::int32_t> ids, std::size_t bound, const char* op)
{
    for (auto id : ids)
        if (id < 0 || static_cast<std::size_t>(id) >= bound)
            throw IndexError(std::string(op) + ": index " + std::to_string(id) + " outside [0," +
                             std::to_string(bound) + ")");
}

} // namespace

Tensor matmul(const Tensor& a, const Tensor& b)
{
    require_rank(a, 2, "matmul", "a");
    require_rank(b, 2, "matmul", "b");
    if (a.dim(1) != b.dim(0))
        mismatch("matmul", a, b);
    const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
    std::vector<double> out(m * n);
    as_matrix(out, m, n).noalias() = as_matrix(a.node()->data, m, k) * as_matrix(b.node()->data, k, n);
    return detail::make_result({m, n}, std::move(out), {a, b}, [m, k, n](Node& self) {
        auto& pa = *self.parents[0];
        auto& pb = *self.parents[1];
        const auto dc = as_matrix(self.grad, m, n);
        if (pa.requires_grad)
            as_matrix(pa.ensure_grad(), m, k).noalias() += dc * as_matrix(pb.data, k, n).transpose();
        if (pb.requires_grad)
            as_matrix(pb.ensure_grad(), k, n).noalias() += as_matrix(pa.data, m, k).transpose() * dc;
    });
}

namespace {

Tensor linear_impl(const Tensor& x, const Tensor& w, bool rowwise)
{
    require_rank(x, 2, "linear", "x");
    require_rank(w, 2, "linear", "w");
    if (x.dim(1) != w.dim(1))
        mismatch("linear", x, w);
    const std::size_t t = x.dim(0), in = x.dim(1), out_dim = w.dim(0);
    std::vector<double> out(t * out_dim);
    const auto xm = as_matrix(x.node()->data, t, in);
    const auto wm = as_matrix(w.node()->data, out_dim, in);
    if (rowwise)
        as_matrix(out, t, out_dim).noalias() = xm.lazyProduct(wm.transpose());
    else
        as_matrix(out, t, out_dim).noalias() = xm * wm.transpose();
    return detail::make_result({t, out_dim}, std::move(out), {x, w}, [t, in, out_dim](Node& self) {
        auto& px = *self.parents[0];
        auto& pw = *self.parents[1];
        const auto dy = as_matrix(self.grad, t, out_dim);
        if (px.requires_grad)
            as_matrix(px.ensure_grad(), t, in).noalias() += dy * as_matrix(pw.data, out_dim, in);
        if (pw.requires_grad)
            as_matrix(pw.ensure_grad(), out_dim, in).noalias() += dy.transpose() * as_matrix(px.data, t, in);
    });
}

} // namespace

Tensor linear(const Tensor& x, const Tensor& w) { return linear_impl(x, w, false); }

Tensor linear_rowwise(const Tensor& x, const Tensor& w) { return linear_impl(x, w, true); }

Tensor add(const Tensor& a, const Tensor& b)
{
    if (a.shape() == b.shape()) {
        const auto& da = a.node()->data;
        const auto& db = b.node()->data;
        std::vector<double> out(da.size());
        for (std::size_t i = 0; i < out.size(); ++i)
            out[i] = da[i] + db[i];
        return detail::make_result(a.shape(), std::move(out), {a, b}, [](Node& self) {
            for (int p = 0; p < 2; ++p) {
                auto& parent = *self.parents[p];
                if (!parent.requires_grad)
                    continue;
                auto& g = parent.ensure_grad();
                for (std::size_t i = 0; i < g.size(); ++i)
                    g[i] += self.grad[i];
            }
        });
    }
    if (!row_promotion(a, b))
        mismatch("add", a, b);
    const std::size_t n = b.dim(0);
    const std::size_t rows = a.numel() / n;
    const auto& da = a.node()->data;
    const auto& db = b.node()->data;
    std::vector<double> out(da.size());
    for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t j = 0; j < n; ++j)
            out[r * n + j] = da[r * n + j] + db[j];
    return detail::make_result(a.shape(), std::move(out), {a, b}, [rows, n](Node& self) {
        auto& pa = *self.parents[0];
        auto& pb = *self.parents[1];
        if (pa.requires_grad) {
            auto& g = pa.ensure_grad();
            for (std::size_t i = 0; i < g.size(); ++i)
                g[i] += self.grad[i];
        }
        if (pb.requires_grad) {
            auto& g = pb.ensure_grad();
            for (std::size_t r = 0; r < rows; ++r)
                for (std::size_t j = 0; j < n; ++j)
                    g[j] += self.grad[r * n + j];
        }
    });
}

Tensor mul(const Tensor& a, const Tensor& b)
{
    const bool same = a.shape() == b.shape();
    if (!same && !row_promotion(a, b))
        mismatch("mul", a, b);
    const std::size_t n = same ? a.numel() : b.dim(0);
    const std::size_t rows = same ? 1 : a.numel() / n;
    const auto& da = a.node()->data;
    const auto& db = b.node()->data;
    std::vector<double> out(da.size());
    for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t j = 0; j < n; ++j)
            out[r * n + j] = da[r * n + j] * db[j];
    return detail::make_result(a.shape(), std::move(out), {a, b}, [rows, n](Node& self) {
        auto& pa = *self.parents[0];
        auto& pb = *self.parents[1];
        if (pa.requires_grad) {
            auto& g = pa.ensure_grad();
            for (std::size_t r = 0; r < rows; ++r)
                for (std::size_t j = 0; j < n; ++j)
                    g[r * n + j] += self.grad[r * n + j] * pb.data[j];
        }
        if (pb.requires_grad) {
            auto& g = pb.ensure_grad();
            for (std::size_t r = 0; r < rows; ++r)
                for (std::size_t j = 0; j < n; ++j)
                    g[j] += self.grad[r * n + j] * pa.data[r * n + j];
        }
    });
}

Tensor scale(const Tensor& a, double factor)
{
    const auto& da = a.node()->data;
    std::vector<double> out(da.size());
    for (std::size_t i = 0; i < out.size(); ++i)
        out[i] = da[i] * factor;
    return detail::make_result(a.shape(), std::move(out), {a}, [factor](Node& self) {
        auto& g = self.parents[0]->ensure_grad();
        for (std::size_t i = 0; i < g.size(); ++i)
            g[i] += self.grad[i] * factor;
    });
}

Tensor silu(const Tensor& x)
{
    const auto& dx = x.node()->data;
    std::vector<double> out(dx.size());
    for (std::size_t i = 0; i < out.size(); ++i)
        out[i] = dx[i] * sigmoid(dx[i]);
    return detail::make_result(x.shape(), std::move(out), {x}, [](Node& self) {
        auto& p = *self.parents[0];
        auto& g = p.ensure_grad();
        for (std::size_t i = 0; i < g.size(); ++i) {
            const double z = p.data[i];
            const double s = sigmoid(z);
            g[i] += self.grad[i] * s * (1.0 + z * (1.0 - s));
        }
    });
}

Tensor softmax(const Tensor& x, int axis)
{
    const auto& shape = x.shape();
    if (shape.empty())
        throw DimensionError("softmax: scalar input has no axis");
    const int rank = static_cast<int>(shape.size());
    if (axis < 0)
        axis += rank;
    if (axis < 0 || axis >= rank)
        throw DimensionError("softmax: axis out of range for shape " + shape_str(shape));
    std::size_t outer = 1, inner = 1;
    for (int i = 0; i < axis; ++i)
        outer *= shape[i];
    for (int i = axis + 1; i < rank; ++i)
        inner *= shape[i];
    const std::size_t n = shape[axis];
    const auto& in = x.node()->data;
    std::vector<double> out(in.size());
    for (std::size_t o = 0; o < outer; ++o)
        for (std::size_t s = 0; s < inner; ++s) {
            const std::size_t base = o * n * inner + s;
            double mx = -std::numeric_limits<double>::infinity();
            for (std::size_t j = 0; j < n; ++j)
                mx = std::max(mx, in[base + j * inner]);
            double total = 0.0;
            for (std::size_t j = 0; j < n; ++j) {
                const double e = std::exp(in[base + j * inner] - mx);
                out[base + j * inner] = e;
                total += e;
            }
            for (std::size_t j = 0; j < n; ++j)
                out[base + j * inner] /= total;
        }
    return detail::make_result(shape, std::move(out), {x}, [outer, inner, n](Node& self) {
        auto& g = self.parents[0]->ensure_grad();
        const auto& y = self.data;
        for (std::size_t o = 0; o < outer; ++o)
            for (std::size_t s = 0; s < inner; ++s) {
                const std::size_t base = o * n * inner + s;
                double dot = 0.0;
                for (std::size_t j = 0; j < n; ++j)
                    dot += self.grad[base + j * inner] * y[base + j * inner];
                for (std::size_t j = 0; j < n; ++j) {
                    const std::size_t idx = base + j * inner;
                    g[idx] += y[idx] * (self.grad[idx] - dot);
                }
            }
    });
}

std::vector<double> token_nll(const Tensor& logits, std::span<const std::int32_t> targets)
{
    require_rank(logits, 2, "cross_entropy", "logits");
    const std::size_t rows = logits.dim(0), vocab = logits.dim(1);
    if (targets.size() != rows)
        throw DimensionError("cross_entropy: " + std::to_string(targets.size()) + " targets for logits " +
                             shape_str(logits.shape()));
    check_ids(targets, vocab, "cross_entropy");
    const auto& z = logits.node()->data;
    std::vector<double> nll(rows);
    for (std::size_t r = 0; r < rows; ++r) {
        const double* row = z.data() + r * vocab;
        const double mx = *std::max_element(row, row + vocab);
        double total = 0.0;
        for (std::size_t j = 0; j < vocab; ++j)
            total += std::exp(row[j] - mx);
        nll[r] = mx + std::log(total) - row[targets[r]];
    }
    return nll;
}

Tensor cross_entropy(const Tensor& logits, std::span<const std::int32_t> targets)
{
    const auto nll = token_nll(logits, targets);
    const std::size_t rows = logits.dim(0), vocab = logits.dim(1);
    if (rows == 0)
        throw ContractError("cross_entropy: empty batch");
    double total = 0.0;
    for (double v : nll)
        total += v;
    std::vector<std::int32_t> tgt(targets.begin(), targets.end());
    return detail::make_result({}, {total / static_cast<double>(rows)}, {logits},
                               [rows, vocab, tgt = std::move(tgt)](Node& self) {
                                   auto& p = *self.parents[0];
                                   auto& g = p.ensure_grad();
                                   const double upstream = self.grad[0] / static_cast<double>(rows);
                                   for (std::size_t r = 0; r < rows; ++r) {
                                       const double* row = p.data.data() + r * vocab;
                                       const double mx = *std::max_element(row, row + vocab);
                                       double total = 0.0;
                                       for (std::size_t j = 0; j < vocab; ++j)
                                           total += std::exp(row[j] - mx);
                                       for (std::size_t j = 0; j < vocab; ++j)
                                           g[r * vocab + j] += upstream * std::exp(row[j] - mx) / total;
                                       g[r * vocab + tgt[r]] -= upstream;
                                   }
                               });
}

Tensor sum(const Tensor& x)
{
    double total = 0.0;
    for (double v : x.node()->data)
        total += v;
    return detail::make_result({}, {total}, {x}, [](Node& self) {
        auto& g = self.parents[0]->ensure_grad();
        for (auto& v : g)
            v += self.grad[0];
    });
}

Tensor mean(const Tensor& x)
{
    if (x.numel() == 0)
        throw ContractError("mean of empty tensor");
    return scale(sum(x), 1.0 / static_cast<double>(x.numel()));
}

Tensor embedding(const Tensor& table, std::span<const std::int32_t> ids)
{
    require_rank(table, 2, "embedding", "table");
    const std::size_t vocab = table.dim(0), width = table.dim(1);
    check_ids(ids, vocab, "embedding");
    const auto& src = table.node()->data;
    std::vector<double> out(ids.size() * width);
    for (std::size_t r = 0; r < ids.size(); ++r)
        std::copy_n(src.begin() + static_cast<std::ptrdiff_t>(ids[r] * width), width,
                    out.begin() + static_cast<std::ptrdiff_t>(r * width));
    std::vector<std::int32_t> rows(ids.begin(), ids.end());
    return detail::make_result({ids.size(), width}, std::move(out), {table},
                               [width, rows = std::move(rows)](Node& self) {
                                   auto& g = self.parents[0]->ensure_grad();
                                   for (std::size_t r = 0; r < rows.size(); ++r)
                                       for (std::size_t j = 0; j < width; ++j)
                                           g[rows[r] * width + j] += self.grad[r * width + j];
                               });
}

Tensor rms_norm(const Tensor& x, const Tensor& gain, double eps)
{
    require_rank(x, 2, "rms_norm", "x");
    require_rank(gain, 1, "rms_norm", "gain");
    if (x.dim(1) != gain.dim(0))
        mismatch("rms_norm", x, gain);
    const std::size_t rows = x.dim(0), width = x.dim(1);
    const auto& in = x.node()->data;
    const auto& gn = gain.node()->data;
    std::vector<double> out(in.size());
    std::vector<double> inv(rows);
    for (std::size_t r = 0; r < rows; ++r) {
        double ss = 0.0;
        for (std::size_t j = 0; j < width; ++j)
            ss += in[r * width + j] * in[r * width + j];
        inv[r] = 1.0 / std::sqrt(ss / static_cast<double>(width) + eps);
        for (std::size_t j = 0; j < width; ++j)
            out[r * width + j] = in[r * width + j] * inv[r] * gn[j];
    }
    return detail::make_result({rows, width}, std::move(out), {x, gain},
                               [rows, width, inv = std::move(inv)](Node& self) {
                                   auto& px = *self.parents[0];
                                   auto& pg = *self.parents[1];
                                   std::vector<double> dn(width);
                                   for (std::size_t r = 0; r < rows; ++r) {
                                       const double* xr = px.data.data() + r * width;
                                       const double* dy = self.grad.data() + r * width;
                                       double dot = 0.0;
                                       for (std::size_t j = 0; j < width; ++j) {
                                           dn[j] = dy[j] * pg.data[j];
                                           dot += dn[j] * xr[j] * inv[r];
                                       }
                                       if (pg.requires_grad) {
                                           auto& gg = pg.ensure_grad();
                                           for (std::size_t j = 0; j < width; ++j)
                                               gg[j] += dy[j] * xr[j] * inv[r];
                                       }
                                       if (px.requires_grad) {
                                           auto& gx = px.ensure_grad();
                                           const double m = dot / static_cast<double>(width);
                                           for (std::size_t j = 0; j < width; ++j)
                                               gx[r * width + j] += inv[r] * (dn[j] - xr[j] * inv[r] * m);
                                       }
                                   }
                               });
}

Tensor causal_attention(const Tensor& q, const Tensor& k, const Tensor& v, std::size_t batch, std::size_t seq,
                        std::size_t heads)
{
    require_rank(q, 2, "causal_attention", "q");
    if (q.shape() != k.shape())
        mismatch("causal_attention", q, k);
    if (q.shape() != v.shape())
        mismatch("causal_attention", q, v);
    if (q.dim(0) != batch * seq || heads == 0 || q.dim(1) % heads != 0)
        throw DimensionError("causal_attention: shape " + shape_str(q.shape()) + " incompatible with batch " +
                             std::to_string(batch) + ", seq " + std::to_string(seq) + ", heads " +
                             std::to_string(heads));
    const std::size_t width = q.dim(1);
    const std::size_t hd = width / heads;
    const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(hd));
    const auto S = static_cast<Eigen::Index>(seq);
    const auto D = static_cast<Eigen::Index>(hd);
    const Eigen::OuterStride<> stride(static_cast<Eigen::Index>(width));

    std::vector<double> out(q.numel());
    // Attention probabilities per (batch, head), each seq x seq, kept for backward.
    auto probs = std::make_shared<std::vector<double>>(batch * heads * seq * seq, 0.0);
    MatR scores(S, S);
    for (std::size_t b = 0; b < batch; ++b)
        for (std::size_t h = 0; h < heads; ++h) {
            const std::size_t off = b * seq * width + h * hd;
            StridedCMap qm(q.node()->data.data() + off, S, D, stride);
            StridedCMap km(k.node()->data.data() + off, S, D, stride);
            StridedCMap vm(v.node()->data.data() + off, S, D, stride);
            scores.noalias() = qm * km.transpose();
            Map pm(probs->data() + (b * heads + h) * seq * seq, S, S);
            for (Eigen::Index i = 0; i < S; ++i) {
                double mx = -std::numeric_limits<double>::infinity();
                for (Eigen::Index j = 0; j <= i; ++j)
                    mx = std::max(mx, scores(i, j) * inv_sqrt);
                double total = 0.0;
                for (Eigen::Index j = 0; j <= i; ++j) {
                    const double e = std::exp(scores(i, j) * inv_sqrt - mx);
                    pm(i, j) = e;
                    total += e;
                }
                for (Eigen::Index j = 0; j <= i; ++j)
                    pm(i, j) /= total;
            }
            StridedMap om(out.data() + off, S, D, stride);
            om.noalias() = pm * vm;
        }

    return detail::make_result(
        q.shape(), std::move(out), {q, k, v},
        [batch, seq, heads, width, hd, inv_sqrt, probs](Node& self) {
            const auto S = static_cast<Eigen::Index>(seq);
            const auto D = static_cast<Eigen::Index>(hd);
            const Eigen::OuterStride<> stride(static_cast<Eigen::Index>(width));
            auto& pq = *self.parents[0];
            auto& pk = *self.parents[1];
            auto& pv = *self.parents[2];
            double* gq = pq.requires_grad ? pq.ensure_grad().data() : nullptr;
            double* gk = pk.requires_grad ? pk.ensure_grad().data() : nullptr;
            double* gv = pv.requires_grad ? pv.ensure_grad().data() : nullptr;
            MatR dp(S, S);
            for (std::size_t b = 0; b < batch; ++b)
                for (std::size_t h = 0; h < heads; ++h) {
                    const std::size_t off = b * seq * width + h * hd;
                    StridedCMap qm(pq.data.data() + off, S, D, stride);
                    StridedCMap km(pk.data.data() + off, S, D, stride);
                    StridedCMap vm(pv.data.data() + off, S, D, stride);
                    StridedCMap dom(self.grad.data() + off, S, D, stride);
                    CMap pm(probs->data() + (b * heads + h) * seq * seq, S, S);
                    if (gv) {
                        StridedMap dv(gv + off, S, D, stride);
                        dv.noalias() += pm.transpose() * dom;
                    }
                    dp.noalias() = dom * vm.transpose();
                    for (Eigen::Index i = 0; i < S; ++i) {
                        double dot = 0.0;
                        for (Eigen::Index j = 0; j <= i; ++j)
                            dot += dp(i, j) * pm(i, j);
                        for (Eigen::Index j = 0; j <= i; ++j)
                            dp(i, j) = pm(i, j) * (dp(i, j) - dot) * inv_sqrt;
                        for (Eigen::Index j = i + 1; j < S; ++j)
                            dp(i, j) = 0.0;
                    }
                    if (gq) {
                        StridedMap dq(gq + off, S, D, stride);
                        dq.noalias() += dp * km;
                    }
                    if (gk) {
                        StridedMap dk(gk + off, S, D, stride);
                        dk.noalias() += dp.transpose() * qm;
                    }
                }
        });
}

Tensor gather_rows(const Tensor& x, std::span<const std::size_t> rows)
{
    require_rank(x, 2, "gather_rows", "x");
    const std::size_t n = x.dim(0), width = x.dim(1);
    const auto& src = x.node()->data;
    std::vector<double> out(rows.size() * width);
    for (std::size_t r = 0; r < rows.size(); ++r) {
        if (rows[r] >= n)
            throw IndexError("gather_rows: row " + std::to_string(rows[r]) + " outside [0," + std::to_string(n) + ")");
        std::copy_n(src.begin() + static_cast<std::ptrdiff_t>(rows[r] * width), width,
                    out.begin() + static_cast<std::ptrdiff_t>(r * width));
    }
    std::vector<std::size_t> idx(rows.begin(), rows.end());
    return detail::make_result({rows.size(), width}, std::move(out), {x}, [width, idx = std::move(idx)](Node& self) {
        auto& g = self.parents[0]->ensure_grad();
        for (std::size_t r = 0; r < idx.size(); ++r)
            for (std::size_t j = 0; j < width; ++j)
                g[idx[r] * width + j] += self.grad[r * width + j];
    });
}

Tensor moe_combine(const Tensor& gates, const std::vector<Tensor>& outputs,
                   const std::vector<std::vector<std::size_t>>& token_lists, std::size_t width)
{
    require_rank(gates, 2, "moe_combine", "gates");
    const std::size_t tokens = gates.dim(0), experts = gates.dim(1);
    if (outputs.size() != experts || token_lists.size() != experts)
        throw DimensionError("moe_combine: " + std::to_string(outputs.size()) + " expert outputs for gates " +
                             shape_str(gates.shape()));
    for (std::size_t e = 0; e < experts; ++e) {
        const Shape want{token_lists[e].size(), width};
        if (outputs[e].shape() != want)
            throw DimensionError("moe_combine: expert " + std::to_string(e) + " output " +
                                 shape_str(outputs[e].shape()) + " expected " + shape_str(want));
        for (auto t : token_lists[e])
            if (t >= tokens)
                throw IndexError("moe_combine: token " + std::to_string(t) + " outside batch");
    }
    const auto& g = gates.node()->data;
    std::vector<double> out(tokens * width, 0.0);
    for (std::size_t e = 0; e < experts; ++e) {
        const auto& y = outputs[e].node()->data;
        const auto& list = token_lists[e];
        for (std::size_t r = 0; r < list.size(); ++r) {
            const double w = g[list[r] * experts + e];
            double* dst = out.data() + list[r] * width;
            const double* src = y.data() + r * width;
            for (std::size_t j = 0; j < width; ++j)
                dst[j] += w * src[j];
        }
    }
    std::vector<Tensor> inputs;
    inputs.reserve(experts + 1);
    inputs.push_back(gates);
    for (const auto& o : outputs)
        inputs.push_back(o);
    return detail::make_result({tokens, width}, std::move(out), inputs,
                               [experts, width, lists = token_lists](Node& self) {
                                   auto& pg = *self.parents[0];
                                   for (std::size_t e = 0; e < experts; ++e) {
                                       auto& py = *self.parents[e + 1];
                                       const auto& list = lists[e];
                                       for (std::size_t r = 0; r < list.size(); ++r) {
                                           const double* dout = self.grad.data() + list[r] * width;
                                           const double w = pg.data[list[r] * experts + e];
                                           if (py.requires_grad) {
                                               double* dy = py.ensure_grad().data() + r * width;
                                               for (std::size_t j = 0; j < width; ++j)
                                                   dy[j] += w * dout[j];
                                           }
                                           if (pg.requires_grad) {
                                               const double* y = py.data.data() + r * width;
                                               double dot = 0.0;
                                               for (std::size_t j = 0; j < width; ++j)
                                                   dot += dout[j] * y[j];
                                               pg.ensure_grad()[list[r] * experts + e] += dot;
                                           }
                                       }
                                   }
                               });
}

Tensor column_mean(const Tensor& x)
{
    require_rank(x, 2, "column_mean", "x");
    const std::size_t rows = x.dim(0), cols = x.dim(1);
    if (rows == 0)
        throw ContractError("column_mean: no rows");
    const auto& d = x.node()->data;
    std::vector<double> out(cols, 0.0);
    for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < cols; ++c)
            out[c] += d[r * cols + c];
    for (auto& v : out)
        v /= static_cast<double>(rows);
    return detail::make_result({cols}, std::move(out), {x}, [rows, cols](Node& self) {
        auto& g = self.parents[0]->ensure_grad();
        for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t c = 0; c < cols; ++c)
                g[r * cols + c] += self.grad[c] / static_cast<double>(rows);
    });
}

Tensor dot_const(const Tensor& x, std::span<const double> weights)
{
    if (x.numel() != weights.size())
        throw DimensionError("dot_const: tensor " + shape_str(x.shape()) + " against " +
                             std::to_string(weights.size()) + " weights");
    const auto& d = x.node()->data;
    double total = 0.0;
    for (std::size_t i = 0; i < d.size(); ++i)
        total += d[i] * weights[i];
    std::vector<double> w(weights.begin(), weights.end());
    return detail::make_result({}, {total}, {x}, [w = std::move(w)](Node& self) {
        auto& g = self.parents[0]->ensure_grad();
        for (std::size_t i = 0; i < g.size(); ++i)
            g[i] += self.grad[0] * w[i];
    });
}

Tensor entropy_mean(const Tensor& probs)
{
    require_rank(probs, 2, "entropy_mean", "probs");
    const std::size_t rows = probs.dim(0);
    if (rows == 0)
        throw ContractError("entropy_mean: no rows");
    const auto& p = probs.node()->data;
    double total = 0.0;
    for (double v : p)
        if (v > 0.0)
            total -= v * std::log(v);
    return detail::make_result({}, {total / static_cast<double>(rows)}, {probs}, [rows](Node& self) {
        auto& parent = *self.parents[0];
        auto& g = parent.ensure_grad();
        const double upstream = self.grad[0] / static_cast<double>(rows);
        for (std::size_t i = 0; i < g.size(); ++i)
            if (parent.data[i] > 0.0)
                g[i] -= upstream * (std::log(parent.data[i]) + 1.0);
    });
}

Tensor renormalize_selected(const Tensor& probs, std::span<const std::uint8_t> mask)
{
    require_rank(probs, 2, "renormalize_selected", "probs");
    if (mask.size() != probs.numel())
        throw DimensionError("renormalize_selected: mask length " + std::to_string(mask.size()) + " for probs " +
                             shape_str(probs.shape()));
    const std::size_t rows = probs.dim(0), cols = probs.dim(1);
    const auto& p = probs.node()->data;
    std::vector<double> out(p.size(), 0.0);
    std::vector<double> denom(rows, 0.0);
    for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t c = 0; c < cols; ++c)
            if (mask[r * cols + c])
                denom[r] += p[r * cols + c];
        if (!(denom[r] > 0.0))
            throw ContractError("renormalize_selected: row " + std::to_string(r) + " has no selected mass");
        for (std::size_t c = 0; c < cols; ++c)
            if (mask[r * cols + c])
                out[r * cols + c] = p[r * cols + c] / denom[r];
    }
    std::vector<std::uint8_t> m(mask.begin(), mask.end());
    return detail::make_result({rows, cols}, std::move(out), {probs},
                               [rows, cols, m = std::move(m), denom = std::move(denom)](Node& self) {
                                   auto& g = self.parents[0]->ensure_grad();
                                   for (std::size_t r = 0; r < rows; ++r) {
                                       double dot = 0.0;
                                       for (std::size_t c = 0; c < cols; ++c)
                                           dot += self.grad[r * cols + c] * self.data[r * cols + c];
                                       for (std::size_t c = 0; c < cols; ++c)
                                           if (m[r * cols + c])
                                               g[r * cols + c] += (self.grad[r * cols + c] - dot) / denom[r];
                                   }
                               });
}

} // namespace hmoe::ops
