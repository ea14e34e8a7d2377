#pragma once

#include <cmath>
#include <functional>
#include <span>
#include <vector>

#include "declip/mat.hpp"
#include "declip/numerics.hpp"

namespace declip::ad {

/// Minimal reverse-mode tape over Mat-valued nodes. Forward values are
/// computed eagerly with the same float32 kernels as the plain inference path;
/// backward closures accumulate gradients in reverse node order.
class Tape {
public:
    struct Var {
        int id = -1;
        bool valid() const { return id >= 0; }
    };

    Var input(Mat v, bool requires_grad) {
        return push(std::move(v), requires_grad, nullptr);
    }

    const Mat& value(Var v) const { return nodes_[v.id].val; }
    int rows(Var v) const { return nodes_[v.id].val.rows; }
    int cols(Var v) const { return nodes_[v.id].val.cols; }

    /// Gradient of the last backward() target w.r.t. v. Zero matrix when no
    /// gradient reached the node.
    Mat grad(Var v) const {
        if (grads_[v.id].numel() == 0) return Mat(nodes_[v.id].val.rows, nodes_[v.id].val.cols);
        return grads_[v.id];
    }

    Var matmul(Var a, Var b) {
        Mat out = declip::matmul(value(a), value(b));
        return push(std::move(out), needs(a) || needs(b), [this, a, b](const Mat& g) {
            if (needs(a)) accum(a, matmul_nt(g, value(b)));
            if (needs(b)) accum(b, matmul_tn(value(a), g));
        });
    }

    /// a * b^T
    Var matmul_nt_op(Var a, Var b) {
        Mat out = declip::matmul_nt(value(a), value(b));
        return push(std::move(out), needs(a) || needs(b), [this, a, b](const Mat& g) {
            if (needs(a)) accum(a, declip::matmul(g, value(b)));
            if (needs(b)) accum(b, matmul_tn(g, value(a)));
        });
    }

    /// a * a^T with a single parent (self-similarity logits).
    Var matmul_nt_self(Var a) {
        Mat out = declip::matmul_nt(value(a), value(a));
        return push(std::move(out), needs(a), [this, a](const Mat& g) {
            if (!needs(a)) return;
            // d/dA of G : (A A^T) = (G + G^T) A
            Mat gt(g.cols, g.rows);
            for (int i = 0; i < g.rows; ++i)
                for (int j = 0; j < g.cols; ++j) gt(j, i) = g(i, j);
            accum(a, declip::matmul(declip::add(g, gt), value(a)));
        });
    }

    Var add(Var a, Var b) {
        Mat out = declip::add(value(a), value(b));
        return push(std::move(out), needs(a) || needs(b), [this, a, b](const Mat& g) {
            if (needs(a)) accum(a, g);
            if (needs(b)) accum(b, g);
        });
    }

    Var sub(Var a, Var b) {
        Mat out = declip::sub(value(a), value(b));
        return push(std::move(out), needs(a) || needs(b), [this, a, b](const Mat& g) {
            if (needs(a)) accum(a, g);
            if (needs(b)) accum(b, declip::scale(g, -1.0f));
        });
    }

    /// scale * x + shift, elementwise.
    Var affine(Var x, float sc, float shift) {
        Mat out = value(x);
        for (float& v : out.data) v = sc * v + shift;
        return push(std::move(out), needs(x), [this, x, sc](const Mat& g) {
            if (needs(x)) accum(x, declip::scale(g, sc));
        });
    }

    /// a + s * b
    Var add_scaled(Var a, Var b, float s) {
        Mat out = value(a);
        const Mat& bv = value(b);
        for (size_t i = 0; i < out.data.size(); ++i) out.data[i] += s * bv.data[i];
        return push(std::move(out), needs(a) || needs(b), [this, a, b, s](const Mat& g) {
            if (needs(a)) accum(a, g);
            if (needs(b)) accum(b, declip::scale(g, s));
        });
    }

    Var add_row_broadcast(Var a, Var rowvec) {
        Mat out = declip::add_row_broadcast(value(a), value(rowvec));
        return push(std::move(out), needs(a) || needs(rowvec), [this, a, rowvec](const Mat& g) {
            if (needs(a)) accum(a, g);
            if (needs(rowvec)) {
                Mat gb(1, g.cols);
                for (int i = 0; i < g.rows; ++i)
                    for (int j = 0; j < g.cols; ++j) gb(0, j) += g(i, j);
                accum(rowvec, gb);
            }
        });
    }

    Var layer_norm_rows(Var x, Var gain, Var bias, float eps) {
        Mat out = declip::layer_norm_rows(value(x), value(gain), value(bias), eps);
        return push(std::move(out), needs(x) || needs(gain) || needs(bias),
                    [this, x, gain, bias, eps](const Mat& g) {
            const Mat& xv = value(x);
            const Mat& gv = value(gain);
            const int n = xv.cols;
            Mat gx(xv.rows, n), gg(1, n), gb(1, n);
            for (int i = 0; i < xv.rows; ++i) {
                float mean = 0.0f;
                for (int j = 0; j < n; ++j) mean += xv(i, j);
                mean /= static_cast<float>(n);
                float var = 0.0f;
                for (int j = 0; j < n; ++j) var += (xv(i, j) - mean) * (xv(i, j) - mean);
                var /= static_cast<float>(n);
                const float inv = 1.0f / std::sqrt(var + eps);
                // dxhat, then the two coupled reduction terms
                float sum_dxhat = 0.0f, sum_dxhat_xhat = 0.0f;
                for (int j = 0; j < n; ++j) {
                    const float xhat = (xv(i, j) - mean) * inv;
                    const float dxhat = g(i, j) * gv(0, j);
                    sum_dxhat += dxhat;
                    sum_dxhat_xhat += dxhat * xhat;
                    gg(0, j) += g(i, j) * xhat;
                    gb(0, j) += g(i, j);
                }
                for (int j = 0; j < n; ++j) {
                    const float xhat = (xv(i, j) - mean) * inv;
                    const float dxhat = g(i, j) * gv(0, j);
                    gx(i, j) = inv * (dxhat - (sum_dxhat + xhat * sum_dxhat_xhat) / static_cast<float>(n));
                }
            }
            if (needs(x)) accum(x, gx);
            if (needs(gain)) accum(gain, gg);
            if (needs(bias)) accum(bias, gb);
        });
    }

    Var gelu(Var x) {
        Mat out = value(x);
        for (float& v : out.data) v = declip::gelu(v);
        return push(std::move(out), needs(x), [this, x](const Mat& g) {
            if (!needs(x)) return;
            const Mat& xv = value(x);
            Mat gx(xv.rows, xv.cols);
            for (size_t i = 0; i < xv.data.size(); ++i) gx.data[i] = g.data[i] * gelu_grad(xv.data[i]);
            accum(x, gx);
        });
    }

    Var softmax_rows(Var x, float sc) {
        Mat out = declip::softmax_rows(value(x), sc);
        const int id_hint = static_cast<int>(nodes_.size());
        return push(std::move(out), needs(x), [this, x, sc, id_hint](const Mat& g) {
            if (!needs(x)) return;
            const Mat& y = nodes_[id_hint].val;
            Mat gx(y.rows, y.cols);
            for (int i = 0; i < y.rows; ++i) {
                float dot = 0.0f;
                for (int j = 0; j < y.cols; ++j) dot += g(i, j) * y(i, j);
                for (int j = 0; j < y.cols; ++j) gx(i, j) = sc * y(i, j) * (g(i, j) - dot);
            }
            accum(x, gx);
        });
    }

    Var slice_cols(Var x, int c0, int n) {
        Mat out = declip::slice_cols(value(x), c0, n);
        return push(std::move(out), needs(x), [this, x, c0, n](const Mat& g) {
            if (!needs(x)) return;
            Mat gx(rows(x), cols(x));
            for (int i = 0; i < g.rows; ++i)
                for (int j = 0; j < n; ++j) gx(i, c0 + j) = g(i, j);
            accum(x, gx);
        });
    }

    Var slice_rows(Var x, int r0, int n) {
        Mat out = declip::slice_rows(value(x), r0, n);
        return push(std::move(out), needs(x), [this, x, r0, n](const Mat& g) {
            if (!needs(x)) return;
            Mat gx(rows(x), cols(x));
            for (int i = 0; i < n; ++i)
                for (int j = 0; j < g.cols; ++j) gx(r0 + i, j) = g(i, j);
            accum(x, gx);
        });
    }

    Var concat_cols(const std::vector<Var>& parts) {
        std::vector<Mat> vals;
        vals.reserve(parts.size());
        bool rg = false;
        for (Var p : parts) {
            vals.push_back(value(p));
            rg = rg || needs(p);
        }
        Mat out = declip::concat_cols(vals);
        return push(std::move(out), rg, [this, parts](const Mat& g) {
            int off = 0;
            for (Var p : parts) {
                const int n = cols(p);
                if (needs(p)) accum(p, declip::slice_cols(g, off, n));
                off += n;
            }
        });
    }

    /// Rows scaled to unit L2 norm; zero rows stay zero.
    Var normalize_rows(Var x) {
        const Mat& xv = value(x);
        Mat out(xv.rows, xv.cols);
        std::vector<float> norms(xv.rows);
        for (int i = 0; i < xv.rows; ++i) {
            float s = 0.0f;
            for (int j = 0; j < xv.cols; ++j) s += xv(i, j) * xv(i, j);
            norms[i] = std::sqrt(s);
            const float inv = norms[i] > 0.0f ? 1.0f / norms[i] : 0.0f;
            for (int j = 0; j < xv.cols; ++j) out(i, j) = xv(i, j) * inv;
        }
        const int id_hint = static_cast<int>(nodes_.size());
        return push(std::move(out), needs(x), [this, x, norms, id_hint](const Mat& g) {
            if (!needs(x)) return;
            const Mat& u = nodes_[id_hint].val;
            Mat gx(u.rows, u.cols);
            for (int i = 0; i < u.rows; ++i) {
                if (norms[i] == 0.0f) continue;
                float dot = 0.0f;
                for (int j = 0; j < u.cols; ++j) dot += g(i, j) * u(i, j);
                const float inv = 1.0f / norms[i];
                for (int j = 0; j < u.cols; ++j) gx(i, j) = (g(i, j) - dot * u(i, j)) * inv;
            }
            accum(x, gx);
        });
    }

    /// Square matrix with its diagonal overwritten by 1 (self-correlation
    /// convention); no gradient flows through the diagonal.
    Var set_diag_one(Var x) {
        Mat out = value(x);
        for (int i = 0; i < out.rows; ++i) out(i, i) = 1.0f;
        return push(std::move(out), needs(x), [this, x](const Mat& g) {
            if (!needs(x)) return;
            Mat gx = g;
            for (int i = 0; i < gx.rows; ++i) gx(i, i) = 0.0f;
            accum(x, gx);
        });
    }

    /// Per-row L2 norm, R x 1. Zero rows get zero gradient.
    Var row_l2_norms(Var x) {
        const Mat& xv = value(x);
        Mat out(xv.rows, 1);
        for (int i = 0; i < xv.rows; ++i) {
            float s = 0.0f;
            for (int j = 0; j < xv.cols; ++j) s += xv(i, j) * xv(i, j);
            out(i, 0) = std::sqrt(s);
        }
        const int id_hint = static_cast<int>(nodes_.size());
        return push(std::move(out), needs(x), [this, x, id_hint](const Mat& g) {
            if (!needs(x)) return;
            const Mat& xv = value(x);
            const Mat& y = nodes_[id_hint].val;
            Mat gx(xv.rows, xv.cols);
            for (int i = 0; i < xv.rows; ++i) {
                if (y(i, 0) == 0.0f) continue;
                const float gi = g(i, 0) / y(i, 0);
                for (int j = 0; j < xv.cols; ++j) gx(i, j) = gi * xv(i, j);
            }
            accum(x, gx);
        });
    }

    Var abs(Var x) {
        Mat out = value(x);
        for (float& v : out.data) v = std::fabs(v);
        return push(std::move(out), needs(x), [this, x](const Mat& g) {
            if (!needs(x)) return;
            const Mat& xv = value(x);
            Mat gx(xv.rows, xv.cols);
            for (size_t i = 0; i < xv.data.size(); ++i)
                gx.data[i] = xv.data[i] > 0.0f ? g.data[i] : (xv.data[i] < 0.0f ? -g.data[i] : 0.0f);
            accum(x, gx);
        });
    }

    /// Mean over all entries, 1 x 1.
    Var mean_all(Var x) {
        const Mat& xv = value(x);
        float s = 0.0f;
        for (float v : xv.data) s += v;
        Mat out(1, 1);
        out(0, 0) = s / static_cast<float>(xv.numel());
        return push(std::move(out), needs(x), [this, x](const Mat& g) {
            if (!needs(x)) return;
            const float gi = g(0, 0) / static_cast<float>(value(x).numel());
            Mat gx(rows(x), cols(x));
            for (float& v : gx.data) v = gi;
            accum(x, gx);
        });
    }

    /// y[0, c] = sum_i w[i] * x(i, c); fixed pooling weights (RoI Align).
    Var weighted_row_sum(Var x, std::vector<float> w) {
        const Mat& xv = value(x);
        Mat out(1, xv.cols);
        for (int i = 0; i < xv.rows; ++i) {
            if (w[i] == 0.0f) continue;
            for (int j = 0; j < xv.cols; ++j) out(0, j) += w[i] * xv(i, j);
        }
        return push(std::move(out), needs(x), [this, x, w = std::move(w)](const Mat& g) {
            if (!needs(x)) return;
            Mat gx(rows(x), cols(x));
            for (int i = 0; i < gx.rows; ++i) {
                if (w[i] == 0.0f) continue;
                for (int j = 0; j < gx.cols; ++j) gx(i, j) = w[i] * g(0, j);
            }
            accum(x, gx);
        });
    }

    /// Cosine similarity of a 1 x C row against a fixed target, clamped to
    /// [-1, 1]. Zero-norm input yields value 0 with zero gradient.
    Var cosine_vs_const(Var x, Mat target) {
        const Mat& xv = value(x);
        float dot = 0.0f, nx = 0.0f, nt = 0.0f;
        for (int j = 0; j < xv.cols; ++j) {
            dot += xv(0, j) * target(0, j);
            nx += xv(0, j) * xv(0, j);
            nt += target(0, j) * target(0, j);
        }
        Mat out(1, 1);
        float c = 0.0f;
        if (nx > 0.0f && nt > 0.0f) c = std::clamp(dot / (std::sqrt(nx) * std::sqrt(nt)), -1.0f, 1.0f);
        out(0, 0) = c;
        return push(std::move(out), needs(x), [this, x, target = std::move(target), nx, nt, c](const Mat& g) {
            if (!needs(x) || nx == 0.0f || nt == 0.0f) return;
            const Mat& xv = value(x);
            const float rx = std::sqrt(nx), rt = std::sqrt(nt);
            Mat gx(1, xv.cols);
            for (int j = 0; j < xv.cols; ++j)
                gx(0, j) = g(0, 0) * (target(0, j) / (rt * rx) - c * xv(0, j) / nx);
            accum(x, gx);
        });
    }

    /// Reverse sweep from a 1 x 1 loss node.
    void backward(Var loss) {
        grads_.assign(nodes_.size(), Mat());
        Mat seed(1, 1);
        seed(0, 0) = 1.0f;
        grads_[loss.id] = std::move(seed);
        for (int i = loss.id; i >= 0; --i) {
            if (!nodes_[i].back || grads_[i].numel() == 0) continue;
            nodes_[i].back(grads_[i]);
        }
    }

private:
    struct Node {
        Mat val;
        bool requires_grad = false;
        std::function<void(const Mat&)> back;
    };

    bool needs(Var v) const { return nodes_[v.id].requires_grad; }

    void accum(Var v, const Mat& g) {
        Mat& slot = grads_[v.id];
        if (slot.numel() == 0) slot = g;
        else add_inplace(slot, g);
    }

    Var push(Mat val, bool requires_grad, std::function<void(const Mat&)> back) {
        nodes_.push_back(Node{std::move(val), requires_grad, std::move(back)});
        grads_.emplace_back();
        return Var{static_cast<int>(nodes_.size()) - 1};
    }

    std::vector<Node> nodes_;
    std::vector<Mat> grads_;
};

} // namespace declip::ad
