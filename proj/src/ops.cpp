#include "emi/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace emi {

namespace {

GradTape* tape_for(std::initializer_list<const Tensor*> inputs)
{
    GradTape* tape = GradTape::active();
    if (!tape) {
        return nullptr;
    }
    for (const Tensor* t : inputs) {
        if (t->requires_grad()) {
            return tape;
        }
    }
    return nullptr;
}

GradTape* tape_for(const std::vector<Tensor>& inputs)
{
    GradTape* tape = GradTape::active();
    if (!tape) {
        return nullptr;
    }
    for (const auto& t : inputs) {
        if (t.requires_grad()) {
            return tape;
        }
    }
    return nullptr;
}

Tensor make_output(Shape shape, std::vector<double> data, GradTape* tape)
{
    return Tensor(std::move(shape), std::move(data), tape != nullptr);
}

// Rows/cols view used for broadcasting.
struct View {
    std::size_t rows;
    std::size_t cols;

    std::size_t index(std::size_t r, std::size_t c) const
    {
        return (rows == 1 ? 0 : r) * cols + (cols == 1 ? 0 : c);
    }
};

View as_view(const Tensor& t)
{
    switch (t.rank()) {
    case 0:
        return {1, 1};
    case 1:
        return {1, t.shape()[0]};
    case 2:
        return {t.shape()[0], t.shape()[1]};
    default:
        if (t.numel() == 1) {
            return {1, 1};
        }
        throw DimensionError("broadcasting is limited to rank <= 2, got " + shape_str(t.shape()));
    }
}

struct Broadcast {
    Shape out_shape;
    View out;
    View a;
    View b;
};

Broadcast plan_broadcast(const Tensor& a, const Tensor& b, const char* op)
{
    if (a.shape() == b.shape()) {
        View v{1, a.numel()};
        return {a.shape(), v, v, v};
    }
    if (b.numel() == 1) {
        View v{1, a.numel()};
        return {a.shape(), v, v, View{1, 1}};
    }
    if (a.numel() == 1) {
        View v{1, b.numel()};
        return {b.shape(), v, View{1, 1}, v};
    }
    View va = as_view(a);
    View vb = as_view(b);
    auto merge = [&](std::size_t x, std::size_t y) {
        if (x == y || y == 1) {
            return x;
        }
        if (x == 1) {
            return y;
        }
        throw DimensionError(std::string(op) + ": incompatible shapes " + shape_str(a.shape()) + " and " +
                             shape_str(b.shape()));
    };
    View out{merge(va.rows, vb.rows), merge(va.cols, vb.cols)};
    return {Shape{out.rows, out.cols}, out, va, vb};
}

enum class BinaryKind { Add, Sub, Mul };

Tensor binary(const Tensor& a, const Tensor& b, BinaryKind kind, const char* name)
{
    Broadcast bc = plan_broadcast(a, b, name);
    const auto& da = a.values();
    const auto& db = b.values();
    std::vector<double> out(bc.out.rows * bc.out.cols);
    for (std::size_t r = 0; r < bc.out.rows; ++r) {
        for (std::size_t c = 0; c < bc.out.cols; ++c) {
            double x = da[bc.a.index(r, c)];
            double y = db[bc.b.index(r, c)];
            double v = kind == BinaryKind::Add ? x + y : kind == BinaryKind::Sub ? x - y : x * y;
            out[r * bc.out.cols + c] = v;
        }
    }
    GradTape* tape = tape_for({&a, &b});
    Tensor result = make_output(bc.out_shape, std::move(out), tape);
    if (tape) {
        tape->record(result, {a, b}, [a, b, bc, kind](std::span<const double> g, GradTape& t) {
            const auto& da = a.values();
            const auto& db = b.values();
            std::vector<double> ga(a.requires_grad() ? a.numel() : 0, 0.0);
            std::vector<double> gb(b.requires_grad() ? b.numel() : 0, 0.0);
            for (std::size_t r = 0; r < bc.out.rows; ++r) {
                for (std::size_t c = 0; c < bc.out.cols; ++c) {
                    double go = g[r * bc.out.cols + c];
                    std::size_t ia = bc.a.index(r, c);
                    std::size_t ib = bc.b.index(r, c);
                    if (!ga.empty()) {
                        ga[ia] += kind == BinaryKind::Mul ? go * db[ib] : go;
                    }
                    if (!gb.empty()) {
                        gb[ib] += kind == BinaryKind::Mul ? go * da[ia] : kind == BinaryKind::Sub ? -go : go;
                    }
                }
            }
            if (!ga.empty()) {
                t.accumulate(a, std::move(ga));
            }
            if (!gb.empty()) {
                t.accumulate(b, std::move(gb));
            }
        });
    }
    return result;
}

// Elementwise unary op where the local derivative is a function of (x, y).
template <typename Fwd, typename Deriv>
Tensor unary(const Tensor& a, Fwd fwd, Deriv deriv)
{
    const auto& da = a.values();
    std::vector<double> out(da.size());
    for (std::size_t i = 0; i < da.size(); ++i) {
        out[i] = fwd(da[i]);
    }
    GradTape* tape = tape_for({&a});
    Tensor result = make_output(a.shape(), std::move(out), tape);
    if (tape) {
        tape->record(result, {a}, [a, result, deriv](std::span<const double> g, GradTape& t) {
            const auto& x = a.values();
            const auto& y = result.values();
            std::vector<double> ga(x.size());
            for (std::size_t i = 0; i < x.size(); ++i) {
                ga[i] = g[i] * deriv(x[i], y[i]);
            }
            t.accumulate(a, std::move(ga));
        });
    }
    return result;
}

void require_matrix(const Tensor& t, const char* op)
{
    if (t.rank() != 2) {
        throw DimensionError(std::string(op) + ": expected a matrix, got " + shape_str(t.shape()));
    }
}

} // namespace

Tensor add(const Tensor& a, const Tensor& b) { return binary(a, b, BinaryKind::Add, "add"); }
Tensor sub(const Tensor& a, const Tensor& b) { return binary(a, b, BinaryKind::Sub, "sub"); }
Tensor mul(const Tensor& a, const Tensor& b) { return binary(a, b, BinaryKind::Mul, "mul"); }

Tensor scale(const Tensor& a, double s)
{
    return unary(a, [s](double x) { return x * s; }, [s](double, double) { return s; });
}

Tensor add_scalar(const Tensor& a, double s)
{
    return unary(a, [s](double x) { return x + s; }, [](double, double) { return 1.0; });
}

Tensor pow(const Tensor& a, double p)
{
    return unary(
        a, [p](double x) { return std::pow(x, p); }, [p](double x, double) { return p * std::pow(x, p - 1.0); });
}

Tensor sigmoid(const Tensor& a)
{
    return unary(
        a,
        [](double x) {
            if (x >= 0) {
                return 1.0 / (1.0 + std::exp(-x));
            }
            double e = std::exp(x);
            return e / (1.0 + e);
        },
        [](double, double y) { return y * (1.0 - y); });
}

Tensor tanh(const Tensor& a)
{
    return unary(a, [](double x) { return std::tanh(x); }, [](double, double y) { return 1.0 - y * y; });
}

Tensor relu(const Tensor& a)
{
    return unary(a, [](double x) { return x > 0 ? x : 0.0; }, [](double x, double) { return x > 0 ? 1.0 : 0.0; });
}

Tensor exp(const Tensor& a)
{
    return unary(a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

Tensor log(const Tensor& a)
{
    return unary(a, [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}

Tensor matmul(const Tensor& a, const Tensor& b)
{
    require_matrix(a, "matmul");
    require_matrix(b, "matmul");
    const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
    if (b.rows() != k) {
        throw DimensionError("matmul: inner dimensions disagree for " + shape_str(a.shape()) + " x " +
                             shape_str(b.shape()));
    }
    const auto& da = a.values();
    const auto& db = b.values();
    std::vector<double> out(m * n, 0.0);
    for (std::size_t i = 0; i < m; ++i) {
        double* orow = out.data() + i * n;
        for (std::size_t p = 0; p < k; ++p) {
            double x = da[i * k + p];
            const double* brow = db.data() + p * n;
            for (std::size_t j = 0; j < n; ++j) {
                orow[j] += x * brow[j];
            }
        }
    }
    GradTape* tape = tape_for({&a, &b});
    Tensor result = make_output({m, n}, std::move(out), tape);
    if (tape) {
        tape->record(result, {a, b}, [a, b, m, k, n](std::span<const double> g, GradTape& t) {
            const auto& da = a.values();
            const auto& db = b.values();
            if (a.requires_grad()) {
                // dA = G * B^T, with B^T laid out row-major so the inner loop is contiguous
                std::vector<double> bt(n * k);
                for (std::size_t p = 0; p < k; ++p) {
                    for (std::size_t j = 0; j < n; ++j) {
                        bt[j * k + p] = db[p * n + j];
                    }
                }
                std::vector<double> ga(m * k, 0.0);
                for (std::size_t i = 0; i < m; ++i) {
                    double* arow = ga.data() + i * k;
                    for (std::size_t j = 0; j < n; ++j) {
                        const double x = g[i * n + j];
                        const double* brow = bt.data() + j * k;
                        for (std::size_t p = 0; p < k; ++p) {
                            arow[p] += x * brow[p];
                        }
                    }
                }
                t.accumulate(a, std::move(ga));
            }
            if (b.requires_grad()) {
                // dB = A^T * G
                std::vector<double> gb(k * n, 0.0);
                for (std::size_t i = 0; i < m; ++i) {
                    for (std::size_t p = 0; p < k; ++p) {
                        double x = da[i * k + p];
                        for (std::size_t j = 0; j < n; ++j) {
                            gb[p * n + j] += x * g[i * n + j];
                        }
                    }
                }
                t.accumulate(b, std::move(gb));
            }
        });
    }
    return result;
}

Tensor transpose(const Tensor& a)
{
    require_matrix(a, "transpose");
    const std::size_t m = a.rows(), n = a.cols();
    const auto& da = a.values();
    std::vector<double> out(m * n);
    for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t j = 0; j < n; ++j) {
            out[j * m + i] = da[i * n + j];
        }
    }
    GradTape* tape = tape_for({&a});
    Tensor result = make_output({n, m}, std::move(out), tape);
    if (tape) {
        tape->record(result, {a}, [a, m, n](std::span<const double> g, GradTape& t) {
            std::vector<double> ga(m * n);
            for (std::size_t i = 0; i < m; ++i) {
                for (std::size_t j = 0; j < n; ++j) {
                    ga[i * n + j] = g[j * m + i];
                }
            }
            t.accumulate(a, std::move(ga));
        });
    }
    return result;
}

Tensor concat(const std::vector<Tensor>& parts, std::size_t axis)
{
    if (parts.empty()) {
        throw DimensionError("concat: no inputs");
    }
    if (axis > 1) {
        throw DimensionError("concat: axis must be 0 or 1");
    }
    for (const auto& p : parts) {
        require_matrix(p, "concat");
    }
    const std::size_t other = parts[0].shape()[1 - axis];
    std::size_t total = 0;
    for (const auto& p : parts) {
        if (p.shape()[1 - axis] != other) {
            throw DimensionError("concat: mismatched shapes " + shape_str(parts[0].shape()) + " and " +
                                 shape_str(p.shape()));
        }
        total += p.shape()[axis];
    }
    Shape out_shape = axis == 0 ? Shape{total, other} : Shape{other, total};
    std::vector<double> out;
    out.reserve(total * other);
    if (axis == 0) {
        for (const auto& p : parts) {
            out.insert(out.end(), p.values().begin(), p.values().end());
        }
    } else {
        out.resize(total * other);
        std::size_t offset = 0;
        for (const auto& p : parts) {
            const std::size_t w = p.cols();
            for (std::size_t r = 0; r < other; ++r) {
                std::copy_n(p.values().data() + r * w, w, out.data() + r * total + offset);
            }
            offset += w;
        }
    }
    GradTape* tape = tape_for(parts);
    Tensor result = make_output(out_shape, std::move(out), tape);
    if (tape) {
        tape->record(result, parts, [parts, axis, total, other](std::span<const double> g, GradTape& t) {
            std::size_t offset = 0;
            for (const auto& p : parts) {
                const std::size_t w = p.shape()[axis];
                if (p.requires_grad()) {
                    std::vector<double> gp(p.numel());
                    if (axis == 0) {
                        std::copy_n(g.data() + offset * other, gp.size(), gp.data());
                    } else {
                        for (std::size_t r = 0; r < other; ++r) {
                            std::copy_n(g.data() + r * total + offset, w, gp.data() + r * w);
                        }
                    }
                    t.accumulate(p, std::move(gp));
                }
                offset += w;
            }
        });
    }
    return result;
}

Tensor slice(const Tensor& a, std::size_t axis, std::size_t begin, std::size_t end)
{
    require_matrix(a, "slice");
    if (axis > 1) {
        throw DimensionError("slice: axis must be 0 or 1");
    }
    if (begin > end || end > a.shape()[axis]) {
        throw DimensionError("slice: range [" + std::to_string(begin) + "," + std::to_string(end) +
                             ") outside " + shape_str(a.shape()));
    }
    const std::size_t m = a.rows(), n = a.cols();
    const std::size_t w = end - begin;
    const auto& da = a.values();
    std::vector<double> out;
    Shape out_shape;
    if (axis == 0) {
        out.assign(da.begin() + begin * n, da.begin() + end * n);
        out_shape = {w, n};
    } else {
        out.resize(m * w);
        for (std::size_t r = 0; r < m; ++r) {
            std::copy_n(da.data() + r * n + begin, w, out.data() + r * w);
        }
        out_shape = {m, w};
    }
    GradTape* tape = tape_for({&a});
    Tensor result = make_output(out_shape, std::move(out), tape);
    if (tape) {
        tape->record(result, {a}, [a, axis, begin, w, m, n](std::span<const double> g, GradTape& t) {
            std::vector<double> ga(m * n, 0.0);
            if (axis == 0) {
                std::copy_n(g.data(), w * n, ga.data() + begin * n);
            } else {
                for (std::size_t r = 0; r < m; ++r) {
                    std::copy_n(g.data() + r * w, w, ga.data() + r * n + begin);
                }
            }
            t.accumulate(a, std::move(ga));
        });
    }
    return result;
}

namespace {

Tensor reduce_all(const Tensor& a, double factor)
{
    double s = 0.0;
    for (double v : a.values()) {
        s += v;
    }
    GradTape* tape = tape_for({&a});
    Tensor result = make_output({}, {s * factor}, tape);
    if (tape) {
        tape->record(result, {a}, [a, factor](std::span<const double> g, GradTape& t) {
            t.accumulate(a, std::vector<double>(a.numel(), g[0] * factor));
        });
    }
    return result;
}

Tensor reduce_axis(const Tensor& a, std::size_t axis, bool average)
{
    require_matrix(a, average ? "mean" : "sum");
    if (axis > 1) {
        throw DimensionError("reduction axis must be 0 or 1");
    }
    const std::size_t m = a.rows(), n = a.cols();
    const std::size_t count = axis == 0 ? m : n;
    if (count == 0) {
        throw DimensionError("reduction over an empty axis");
    }
    const double factor = average ? 1.0 / static_cast<double>(count) : 1.0;
    const auto& da = a.values();
    Shape out_shape = axis == 0 ? Shape{1, n} : Shape{m, 1};
    std::vector<double> out(axis == 0 ? n : m, 0.0);
    for (std::size_t r = 0; r < m; ++r) {
        for (std::size_t c = 0; c < n; ++c) {
            out[axis == 0 ? c : r] += da[r * n + c];
        }
    }
    for (double& v : out) {
        v *= factor;
    }
    GradTape* tape = tape_for({&a});
    Tensor result = make_output(out_shape, std::move(out), tape);
    if (tape) {
        tape->record(result, {a}, [a, axis, factor, m, n](std::span<const double> g, GradTape& t) {
            std::vector<double> ga(m * n);
            for (std::size_t r = 0; r < m; ++r) {
                for (std::size_t c = 0; c < n; ++c) {
                    ga[r * n + c] = g[axis == 0 ? c : r] * factor;
                }
            }
            t.accumulate(a, std::move(ga));
        });
    }
    return result;
}

std::size_t trailing(const Tensor& x)
{
    if (x.rank() == 0 || x.shape().back() == 0) {
        throw DimensionError("softmax needs a non-empty trailing axis, got " + shape_str(x.shape()));
    }
    return x.shape().back();
}

} // namespace

Tensor sum(const Tensor& a) { return reduce_all(a, 1.0); }

Tensor mean(const Tensor& a)
{
    if (a.numel() == 0) {
        throw DimensionError("mean of an empty tensor");
    }
    return reduce_all(a, 1.0 / static_cast<double>(a.numel()));
}

Tensor sum(const Tensor& a, std::size_t axis) { return reduce_axis(a, axis, false); }
Tensor mean(const Tensor& a, std::size_t axis) { return reduce_axis(a, axis, true); }

Tensor softmax_rows(const Tensor& x)
{
    const std::size_t n = trailing(x);
    const std::size_t rows = x.numel() / n;
    const auto& dx = x.values();
    std::vector<double> out(x.numel());
    for (std::size_t r = 0; r < rows; ++r) {
        const double* in = dx.data() + r * n;
        double* o = out.data() + r * n;
        double mx = *std::max_element(in, in + n);
        double s = 0.0;
        for (std::size_t j = 0; j < n; ++j) {
            o[j] = std::exp(in[j] - mx);
            s += o[j];
        }
        for (std::size_t j = 0; j < n; ++j) {
            o[j] /= s;
        }
    }
    GradTape* tape = tape_for({&x});
    Tensor result = make_output(x.shape(), std::move(out), tape);
    if (tape) {
        tape->record(result, {x}, [x, result, n, rows](std::span<const double> g, GradTape& t) {
            const auto& y = result.values();
            std::vector<double> gx(y.size());
            for (std::size_t r = 0; r < rows; ++r) {
                double dot = 0.0;
                for (std::size_t j = 0; j < n; ++j) {
                    dot += g[r * n + j] * y[r * n + j];
                }
                for (std::size_t j = 0; j < n; ++j) {
                    gx[r * n + j] = y[r * n + j] * (g[r * n + j] - dot);
                }
            }
            t.accumulate(x, std::move(gx));
        });
    }
    return result;
}

Tensor log_softmax_rows(const Tensor& x)
{
    const std::size_t n = trailing(x);
    const std::size_t rows = x.numel() / n;
    const auto& dx = x.values();
    std::vector<double> out(x.numel());
    for (std::size_t r = 0; r < rows; ++r) {
        const double* in = dx.data() + r * n;
        double mx = *std::max_element(in, in + n);
        double s = 0.0;
        for (std::size_t j = 0; j < n; ++j) {
            s += std::exp(in[j] - mx);
        }
        double lse = mx + std::log(s);
        for (std::size_t j = 0; j < n; ++j) {
            out[r * n + j] = in[j] - lse;
        }
    }
    GradTape* tape = tape_for({&x});
    Tensor result = make_output(x.shape(), std::move(out), tape);
    if (tape) {
        tape->record(result, {x}, [x, result, n, rows](std::span<const double> g, GradTape& t) {
            const auto& y = result.values();
            std::vector<double> gx(y.size());
            for (std::size_t r = 0; r < rows; ++r) {
                double gs = 0.0;
                for (std::size_t j = 0; j < n; ++j) {
                    gs += g[r * n + j];
                }
                for (std::size_t j = 0; j < n; ++j) {
                    gx[r * n + j] = g[r * n + j] - std::exp(y[r * n + j]) * gs;
                }
            }
            t.accumulate(x, std::move(gx));
        });
    }
    return result;
}

Tensor dilated_conv1d(const Tensor& x, const Tensor& kernel, std::size_t dilation)
{
    if (dilation < 1) {
        throw ParameterError("dilated_conv1d: dilation must be positive");
    }
    require_matrix(x, "dilated_conv1d");
    if (kernel.rank() != 3) {
        throw DimensionError("dilated_conv1d: kernel must be [k x C_in x C_out], got " + shape_str(kernel.shape()));
    }
    const std::size_t T = x.rows(), cin = x.cols();
    const std::size_t k = kernel.shape()[0], kc = kernel.shape()[1], cout = kernel.shape()[2];
    if (k < 1) {
        throw ParameterError("dilated_conv1d: kernel width must be positive");
    }
    if (kc != cin) {
        throw DimensionError("dilated_conv1d: input " + shape_str(x.shape()) + " does not match kernel " +
                             shape_str(kernel.shape()));
    }
    const auto& dx = x.values();
    const auto& dk = kernel.values();
    std::vector<double> out(T * cout, 0.0);
    for (std::size_t t = 0; t < T; ++t) {
        double* o = out.data() + t * cout;
        for (std::size_t j = 0; j < k; ++j) {
            if (j * dilation > t) {
                break;
            }
            const double* in = dx.data() + (t - j * dilation) * cin;
            const double* w = dk.data() + j * cin * cout;
            for (std::size_t c = 0; c < cin; ++c) {
                double v = in[c];
                const double* wc = w + c * cout;
                for (std::size_t q = 0; q < cout; ++q) {
                    o[q] += v * wc[q];
                }
            }
        }
    }
    GradTape* tape = tape_for({&x, &kernel});
    Tensor result = make_output({T, cout}, std::move(out), tape);
    if (tape) {
        tape->record(result, {x, kernel},
                     [x, kernel, dilation, T, cin, cout, k](std::span<const double> g, GradTape& t) {
                         const auto& dx = x.values();
                         const auto& dk = kernel.values();
                         std::vector<double> gx(x.requires_grad() ? T * cin : 0, 0.0);
                         std::vector<double> gk(kernel.requires_grad() ? k * cin * cout : 0, 0.0);
                         for (std::size_t tt = 0; tt < T; ++tt) {
                             const double* go = g.data() + tt * cout;
                             for (std::size_t j = 0; j < k; ++j) {
                                 if (j * dilation > tt) {
                                     break;
                                 }
                                 std::size_t src = tt - j * dilation;
                                 for (std::size_t c = 0; c < cin; ++c) {
                                     const double* w = dk.data() + (j * cin + c) * cout;
                                     double xin = dx[src * cin + c];
                                     double acc = 0.0;
                                     for (std::size_t q = 0; q < cout; ++q) {
                                         acc += go[q] * w[q];
                                         if (!gk.empty()) {
                                             gk[(j * cin + c) * cout + q] += xin * go[q];
                                         }
                                     }
                                     if (!gx.empty()) {
                                         gx[src * cin + c] += acc;
                                     }
                                 }
                             }
                         }
                         if (!gx.empty()) {
                             t.accumulate(x, std::move(gx));
                         }
                         if (!gk.empty()) {
                             t.accumulate(kernel, std::move(gk));
                         }
                     });
    }
    return result;
}

namespace {

double sigmoid_scalar(double v) { return v >= 0.0 ? 1.0 / (1.0 + std::exp(-v)) : std::exp(v) / (1.0 + std::exp(v)); }

} // namespace

Tensor lstm_recurrence(const Tensor& x_terms, const Tensor& w_h, bool reverse)
{
    require_matrix(x_terms, "lstm_recurrence");
    require_matrix(w_h, "lstm_recurrence");
    const std::size_t T = x_terms.rows(), H = w_h.rows();
    if (w_h.cols() != 4 * H || x_terms.cols() != 4 * H) {
        throw DimensionError("lstm_recurrence: terms " + shape_str(x_terms.shape()) + " and recurrent weights " +
                             shape_str(w_h.shape()) + " do not describe 4 gates");
    }
    const auto& xt = x_terms.values();
    const auto& wh = w_h.values();
    // Per processed step: gates (i,f,g,o) after activation, cell state, tanh(cell).
    auto gates = std::make_shared<std::vector<double>>(T * 4 * H);
    auto cells = std::make_shared<std::vector<double>>(T * H);
    auto tcells = std::make_shared<std::vector<double>>(T * H);
    std::vector<double> out(T * H, 0.0);
    std::vector<double> h(H, 0.0), c(H, 0.0), z(4 * H);
    for (std::size_t s = 0; s < T; ++s) {
        const std::size_t t = reverse ? T - 1 - s : s;
        std::copy_n(xt.data() + t * 4 * H, 4 * H, z.begin());
        for (std::size_t r = 0; r < H; ++r) {
            const double hr = h[r];
            const double* w = wh.data() + r * 4 * H;
            for (std::size_t q = 0; q < 4 * H; ++q) {
                z[q] += hr * w[q];
            }
        }
        double* gt = gates->data() + s * 4 * H;
        for (std::size_t q = 0; q < H; ++q) {
            gt[q] = sigmoid_scalar(z[q]);
            gt[H + q] = sigmoid_scalar(z[H + q]);
            gt[2 * H + q] = std::tanh(z[2 * H + q]);
            gt[3 * H + q] = sigmoid_scalar(z[3 * H + q]);
            c[q] = gt[H + q] * c[q] + gt[q] * gt[2 * H + q];
            const double tc = std::tanh(c[q]);
            (*cells)[s * H + q] = c[q];
            (*tcells)[s * H + q] = tc;
            h[q] = gt[3 * H + q] * tc;
            out[t * H + q] = h[q];
        }
    }
    GradTape* tape = tape_for({&x_terms, &w_h});
    Tensor result = make_output({T, H}, std::move(out), tape);
    if (tape) {
        tape->record(result, {x_terms, w_h},
                     [x_terms, w_h, result, gates, cells, tcells, reverse, T, H](std::span<const double> g,
                                                                                  GradTape& tp) {
                         const auto& wh = w_h.values();
                         const auto& hs = result.values();
                         std::vector<double> gx(T * 4 * H, 0.0);
                         std::vector<double> gw(w_h.requires_grad() ? H * 4 * H : 0, 0.0);
                         std::vector<double> dh_next(H, 0.0), dc_next(H, 0.0);
                         for (std::size_t s = T; s-- > 0;) {
                             const std::size_t t = reverse ? T - 1 - s : s;
                             const double* gt = gates->data() + s * 4 * H;
                             const double* tc = tcells->data() + s * H;
                             double* dz = gx.data() + t * 4 * H;
                             for (std::size_t q = 0; q < H; ++q) {
                                 const double i = gt[q], f = gt[H + q], gg = gt[2 * H + q], o = gt[3 * H + q];
                                 const double c_prev = s > 0 ? (*cells)[(s - 1) * H + q] : 0.0;
                                 const double dh = g[t * H + q] + dh_next[q];
                                 const double dc = dc_next[q] + dh * o * (1.0 - tc[q] * tc[q]);
                                 dz[q] = dc * gg * i * (1.0 - i);
                                 dz[H + q] = dc * c_prev * f * (1.0 - f);
                                 dz[2 * H + q] = dc * i * (1.0 - gg * gg);
                                 dz[3 * H + q] = dh * tc[q] * o * (1.0 - o);
                                 dc_next[q] = dc * f;
                             }
                             // Previous hidden state in processing order.
                             const double* h_prev = nullptr;
                             if (s > 0) {
                                 const std::size_t tp_idx = reverse ? T - s : s - 1;
                                 h_prev = hs.data() + tp_idx * H;
                             }
                             for (std::size_t r = 0; r < H; ++r) {
                                 const double* w = wh.data() + r * 4 * H;
                                 double acc = 0.0;
                                 for (std::size_t q = 0; q < 4 * H; ++q) {
                                     acc += dz[q] * w[q];
                                 }
                                 dh_next[r] = acc;
                                 if (h_prev && !gw.empty()) {
                                     double* gwr = gw.data() + r * 4 * H;
                                     const double hr = h_prev[r];
                                     for (std::size_t q = 0; q < 4 * H; ++q) {
                                         gwr[q] += hr * dz[q];
                                     }
                                 }
                             }
                         }
                         if (x_terms.requires_grad()) {
                             tp.accumulate(x_terms, std::move(gx));
                         }
                         if (!gw.empty()) {
                             tp.accumulate(w_h, std::move(gw));
                         }
                     });
    }
    return result;
}

Tensor l2_normalize_rows(const Tensor& x, double eps)
{
    Tensor norm_sq = sum(mul(x, x), 1);
    return mul(x, pow(add_scalar(norm_sq, eps), -0.5));
}

Tensor layer_norm_rows(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps)
{
    Tensor centered = sub(x, mean(x, 1));
    Tensor var = mean(mul(centered, centered), 1);
    Tensor normed = mul(centered, pow(add_scalar(var, eps), -0.5));
    return add(mul(normed, gamma), beta);
}

Tensor mse(const Tensor& pred, const Tensor& target)
{
    if (pred.numel() != target.numel()) {
        throw DimensionError("mse: length mismatch " + shape_str(pred.shape()) + " vs " + shape_str(target.shape()));
    }
    Tensor t = target.shape() == pred.shape() ? target : Tensor(pred.shape(), target.values());
    Tensor diff = sub(pred, t);
    return mean(mul(diff, diff));
}

} // namespace emi
