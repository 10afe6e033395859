#include "gct/tensor.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <sstream>
#include <stdexcept>
#include <unordered_map>
#include <unordered_set>

namespace gct::ad {

namespace {

std::atomic<uint64_t> g_next_id{1};

thread_local bool g_grad_enabled = true;

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapRM = Eigen::Map<RowMat>;
using CMapRM = Eigen::Map<const RowMat>;

[[noreturn]] void fail(const std::string& msg) { throw std::invalid_argument(msg); }

void check_finite(const std::vector<double>& v, const char* op) {
    for (double x : v) {
        if (!std::isfinite(x)) {
            fail(std::string("non-finite value produced by ") + op);
        }
    }
}

std::vector<double>& grad_buf(const Tensor& t) {
    return const_cast<Tensor&>(t).grad();
}

// Broadcast plan for a binary elementwise op: per-output-dim strides into
// each input, 0 where that input's extent is 1.
struct Bcast {
    Shape out;
    std::vector<long long> sa, sb;
    bool same = false;
};

Bcast make_bcast(const Shape& a, const Shape& b, const char* op) {
    if (a == b) {
        Bcast bc;
        bc.out = a;
        bc.same = true;
        return bc;
    }
    int ra = static_cast<int>(a.size()), rb = static_cast<int>(b.size());
    int r = std::max(ra, rb);
    Bcast bc;
    bc.out.resize(r);
    std::vector<int> ea(r, 1), eb(r, 1);
    for (int i = 0; i < ra; ++i) ea[r - ra + i] = a[i];
    for (int i = 0; i < rb; ++i) eb[r - rb + i] = b[i];
    for (int i = 0; i < r; ++i) {
        if (ea[i] == eb[i]) {
            bc.out[i] = ea[i];
        } else if (ea[i] == 1 || eb[i] == 1) {
            bc.out[i] = std::max(ea[i], eb[i]);
        } else {
            fail(std::string(op) + ": shapes " + shape_str(a) + " and " + shape_str(b) +
                 " are not broadcastable");
        }
    }
    bc.sa.assign(r, 0);
    bc.sb.assign(r, 0);
    long long st = 1;
    for (int i = r - 1; i >= 0; --i) {
        bc.sa[i] = (ea[i] == 1) ? 0 : st;
        st *= ea[i];
    }
    st = 1;
    for (int i = r - 1; i >= 0; --i) {
        bc.sb[i] = (eb[i] == 1) ? 0 : st;
        st *= eb[i];
    }
    return bc;
}

template <class F>
void bcast_for_each(const Bcast& bc, F&& f) {
    long long n = shape_numel(bc.out);
    if (bc.same) {
        for (long long i = 0; i < n; ++i) f(i, i, i);
        return;
    }
    int r = static_cast<int>(bc.out.size());
    std::vector<int> coord(r, 0);
    long long ai = 0, bi = 0;
    for (long long oi = 0; oi < n; ++oi) {
        f(oi, ai, bi);
        for (int d = r - 1; d >= 0; --d) {
            ++coord[d];
            ai += bc.sa[d];
            bi += bc.sb[d];
            if (coord[d] < bc.out[d]) break;
            coord[d] = 0;
            ai -= bc.sa[d] * bc.out[d];
            bi -= bc.sb[d] * bc.out[d];
        }
    }
}

// pre / axis extent / post decomposition for single-axis ops.
struct AxisSplit {
    long long pre, mid, post;
};

AxisSplit split_axis(const Shape& s, int axis, const char* op) {
    if (axis < 0 || axis >= static_cast<int>(s.size())) {
        fail(std::string(op) + ": axis " + std::to_string(axis) + " out of range for shape " +
             shape_str(s));
    }
    AxisSplit sp{1, s[axis], 1};
    for (int i = 0; i < axis; ++i) sp.pre *= s[i];
    for (int i = axis + 1; i < static_cast<int>(s.size()); ++i) sp.post *= s[i];
    if (sp.mid <= 0) fail(std::string(op) + ": empty axis in shape " + shape_str(s));
    return sp;
}

Shape drop_axis(const Shape& s, int axis, bool keepdim) {
    Shape out = s;
    if (keepdim) {
        out[axis] = 1;
    } else {
        out.erase(out.begin() + axis);
        if (out.empty()) out = {1};
    }
    return out;
}

}  // namespace

std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << "(";
    for (size_t i = 0; i < s.size(); ++i) {
        if (i) os << ",";
        os << s[i];
    }
    os << ")";
    return os.str();
}

long long shape_numel(const Shape& s) {
    long long n = 1;
    for (int d : s) n *= d;
    return n;
}

// ---- Tensor ----

static std::shared_ptr<TensorImpl> new_impl(Shape shape, std::vector<double> data) {
    for (int d : shape) {
        if (d <= 0) fail("tensor dimensions must be positive, got " + shape_str(shape));
    }
    if (shape_numel(shape) != static_cast<long long>(data.size())) {
        fail("data size " + std::to_string(data.size()) + " does not match shape " +
             shape_str(shape));
    }
    auto impl = std::make_shared<TensorImpl>();
    impl->shape = std::move(shape);
    impl->data = std::move(data);
    impl->id = g_next_id.fetch_add(1);
    return impl;
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
    return full(std::move(shape), 0.0, requires_grad);
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
    long long n = shape_numel(shape);
    auto impl = new_impl(std::move(shape), std::vector<double>(n, value));
    impl->requires_grad = requires_grad;
    return Tensor(std::move(impl));
}

Tensor Tensor::from_data(Shape shape, std::vector<double> data, bool requires_grad) {
    auto impl = new_impl(std::move(shape), std::move(data));
    impl->requires_grad = requires_grad;
    return Tensor(std::move(impl));
}

Tensor Tensor::scalar(double v, bool requires_grad) {
    return from_data({1}, {v}, requires_grad);
}

Tensor Tensor::randn(Shape shape, Rng& rng, double stddev, bool requires_grad) {
    long long n = shape_numel(shape);
    std::vector<double> data(n);
    for (auto& x : data) x = rng.normal(0.0, stddev);
    return from_data(std::move(shape), std::move(data), requires_grad);
}

const Shape& Tensor::shape() const { return impl_->shape; }
int Tensor::rank() const { return static_cast<int>(impl_->shape.size()); }
int Tensor::dim(int i) const { return impl_->shape[i]; }
long long Tensor::numel() const { return static_cast<long long>(impl_->data.size()); }
bool Tensor::requires_grad() const { return impl_ && impl_->requires_grad; }
const std::string& Tensor::name() const { return impl_->name; }

Tensor& Tensor::set_name(std::string n) {
    impl_->name = std::move(n);
    return *this;
}

std::vector<double>& Tensor::data() { return impl_->data; }
const std::vector<double>& Tensor::data() const { return impl_->data; }

std::vector<double>& Tensor::grad() {
    if (impl_->grad.empty()) impl_->grad.assign(impl_->data.size(), 0.0);
    return impl_->grad;
}

bool Tensor::has_grad() const { return !impl_->grad.empty(); }

void Tensor::zero_grad() {
    if (!impl_->grad.empty()) std::fill(impl_->grad.begin(), impl_->grad.end(), 0.0);
}

double Tensor::value() const {
    if (numel() != 1) fail("value() requires a scalar tensor, shape is " + shape_str(shape()));
    return impl_->data[0];
}

double Tensor::at(int i) const { return impl_->data[i]; }

double Tensor::at(int i, int j) const {
    return impl_->data[static_cast<long long>(i) * impl_->shape.back() + j];
}

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : prev_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = prev_; }

Tensor make_op(const char* op_name, Shape shape, std::vector<double> data,
               std::vector<Tensor> parents,
               std::function<void(const std::vector<double>&)> backward) {
    auto impl = new_impl(std::move(shape), std::move(data));
    impl->op = op_name;
    bool track = false;
    if (g_grad_enabled) {
        for (const auto& p : parents) track = track || p.requires_grad();
    }
    if (track) {
        impl->requires_grad = true;
        impl->parents = std::move(parents);
        impl->backward_fn = [fn = std::move(backward)](TensorImpl& self) { fn(self.grad); };
    }
    return Tensor(std::move(impl));
}

// ---- elementwise ----

static Tensor bin_op(const char* name, const Tensor& a, const Tensor& b,
                     double (*fwd)(double, double), int mode) {
    Bcast bc = make_bcast(a.shape(), b.shape(), name);
    std::vector<double> out(shape_numel(bc.out));
    const auto& da = a.data();
    const auto& db = b.data();
    bcast_for_each(bc, [&](long long oi, long long ai, long long bi) {
        out[oi] = fwd(da[ai], db[bi]);
    });
    if (mode == 3) check_finite(out, name);  // div
    return make_op(name, bc.out, std::move(out), {a, b},
                   [a, b, bc, mode](const std::vector<double>& g) {
                       const bool ga = a.requires_grad(), gb = b.requires_grad();
                       auto* gva = ga ? &grad_buf(a) : nullptr;
                       auto* gvb = gb ? &grad_buf(b) : nullptr;
                       const auto& da = a.data();
                       const auto& db = b.data();
                       bcast_for_each(bc, [&](long long oi, long long ai, long long bi) {
                           switch (mode) {
                               case 0:  // add
                                   if (gva) (*gva)[ai] += g[oi];
                                   if (gvb) (*gvb)[bi] += g[oi];
                                   break;
                               case 1:  // sub
                                   if (gva) (*gva)[ai] += g[oi];
                                   if (gvb) (*gvb)[bi] -= g[oi];
                                   break;
                               case 2:  // mul
                                   if (gva) (*gva)[ai] += g[oi] * db[bi];
                                   if (gvb) (*gvb)[bi] += g[oi] * da[ai];
                                   break;
                               case 3:  // div
                                   if (gva) (*gva)[ai] += g[oi] / db[bi];
                                   if (gvb) (*gvb)[bi] -= g[oi] * da[ai] / (db[bi] * db[bi]);
                                   break;
                           }
                       });
                   });
}

Tensor add(const Tensor& a, const Tensor& b) {
    return bin_op("add", a, b, [](double x, double y) { return x + y; }, 0);
}
Tensor sub(const Tensor& a, const Tensor& b) {
    return bin_op("sub", a, b, [](double x, double y) { return x - y; }, 1);
}
Tensor mul(const Tensor& a, const Tensor& b) {
    return bin_op("mul", a, b, [](double x, double y) { return x * y; }, 2);
}
Tensor div(const Tensor& a, const Tensor& b) {
    return bin_op("div", a, b, [](double x, double y) { return x / y; }, 3);
}

static Tensor unary_op(const char* name, const Tensor& a, std::vector<double> out,
                       std::function<void(const std::vector<double>&, std::vector<double>&)> back) {
    return make_op(name, a.shape(), std::move(out), {a},
                   [a, back = std::move(back)](const std::vector<double>& g) {
                       if (!a.requires_grad()) return;
                       back(g, grad_buf(a));
                   });
}

Tensor add_scalar(const Tensor& a, double s) {
    std::vector<double> out(a.data());
    for (auto& x : out) x += s;
    return unary_op("add_scalar", a, std::move(out),
                    [](const std::vector<double>& g, std::vector<double>& ga) {
                        for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
                    });
}

Tensor mul_scalar(const Tensor& a, double s) {
    std::vector<double> out(a.data());
    for (auto& x : out) x *= s;
    return unary_op("mul_scalar", a, std::move(out),
                    [s](const std::vector<double>& g, std::vector<double>& ga) {
                        const long long n = static_cast<long long>(g.size());
                        for (long long i = 0; i < n; ++i) ga[i] += g[i] * s;
                    });
}

Tensor neg(const Tensor& a) { return mul_scalar(a, -1.0); }

Tensor relu(const Tensor& a) {
    std::vector<double> out(a.data());
    for (auto& x : out) x = x > 0.0 ? x : 0.0;
    return unary_op("relu", a, std::move(out),
                    [a](const std::vector<double>& g, std::vector<double>& ga) {
                        const auto& da = a.data();
                        const long long n = static_cast<long long>(g.size());
                        for (long long i = 0; i < n; ++i) {
                            if (da[i] > 0.0) ga[i] += g[i];
                        }
                    });
}

Tensor tanh_act(const Tensor& a) {
    std::vector<double> out(a.data());
    for (auto& x : out) x = std::tanh(x);
    auto y = out;  // saved for backward
    return unary_op("tanh", a, std::move(out),
                    [y = std::move(y)](const std::vector<double>& g, std::vector<double>& ga) {
                        for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * (1.0 - y[i] * y[i]);
                    });
}

Tensor sigmoid(const Tensor& a) {
    std::vector<double> out(a.data());
    for (auto& x : out) x = x >= 0.0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
    auto y = out;
    return unary_op("sigmoid", a, std::move(out),
                    [y = std::move(y)](const std::vector<double>& g, std::vector<double>& ga) {
                        const long long n = static_cast<long long>(g.size());
                        for (long long i = 0; i < n; ++i) ga[i] += g[i] * y[i] * (1.0 - y[i]);
                    });
}

Tensor clamp(const Tensor& a, double lo, double hi) {
    std::vector<double> out(a.data());
    for (auto& x : out) x = std::min(std::max(x, lo), hi);
    return unary_op("clamp", a, std::move(out),
                    [a, lo, hi](const std::vector<double>& g, std::vector<double>& ga) {
                        const auto& da = a.data();
                        for (size_t i = 0; i < g.size(); ++i) {
                            if (da[i] > lo && da[i] < hi) ga[i] += g[i];
                        }
                    });
}

Tensor clamp_min(const Tensor& a, double lo) {
    std::vector<double> out(a.data());
    for (auto& x : out) x = std::max(x, lo);
    return unary_op("clamp_min", a, std::move(out),
                    [a, lo](const std::vector<double>& g, std::vector<double>& ga) {
                        const auto& da = a.data();
                        for (size_t i = 0; i < g.size(); ++i) {
                            if (da[i] > lo) ga[i] += g[i];
                        }
                    });
}

// ---- matmul ----

Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.rank() < 2 || b.rank() < 2) {
        fail("matmul requires rank >= 2 tensors, got " + shape_str(a.shape()) + " and " +
             shape_str(b.shape()));
    }
    const Shape& sa = a.shape();
    const Shape& sb = b.shape();
    int m = sa[sa.size() - 2], ka = sa[sa.size() - 1];
    int kb = sb[sb.size() - 2], n = sb[sb.size() - 1];
    if (ka != kb) {
        fail("matmul: inner dimensions disagree, " + shape_str(sa) + " vs " + shape_str(sb));
    }
    Shape batch_a(sa.begin(), sa.end() - 2), batch_b(sb.begin(), sb.end() - 2);
    Bcast bc = make_bcast(batch_a, batch_b, "matmul");
    Shape out_shape = bc.out;
    out_shape.push_back(m);
    out_shape.push_back(n);

    const long long slice_a = static_cast<long long>(m) * ka;
    const long long slice_b = static_cast<long long>(ka) * n;
    const long long slice_o = static_cast<long long>(m) * n;
    std::vector<double> out(shape_numel(out_shape));
    const double* pa = a.data().data();
    const double* pb = b.data().data();
    bcast_for_each(bc, [&](long long oi, long long ai, long long bi) {
        MapRM c(out.data() + oi * slice_o, m, n);
        c.noalias() = CMapRM(pa + ai * slice_a, m, ka) * CMapRM(pb + bi * slice_b, ka, n);
    });

    return make_op("matmul", out_shape, std::move(out), {a, b},
                   [a, b, bc, m, n, k = ka, slice_a, slice_b, slice_o](const std::vector<double>& g) {
                       const double* pa = a.data().data();
                       const double* pb = b.data().data();
                       double* ga = a.requires_grad() ? grad_buf(a).data() : nullptr;
                       double* gb = b.requires_grad() ? grad_buf(b).data() : nullptr;
                       bcast_for_each(bc, [&](long long oi, long long ai, long long bi) {
                           CMapRM gm(g.data() + oi * slice_o, m, n);
                           if (ga) {
                               MapRM(ga + ai * slice_a, m, k).noalias() +=
                                   gm * CMapRM(pb + bi * slice_b, k, n).transpose();
                           }
                           if (gb) {
                               MapRM(gb + bi * slice_b, k, n).noalias() +=
                                   CMapRM(pa + ai * slice_a, m, k).transpose() * gm;
                           }
                       });
                   });
}

Tensor transpose(const Tensor& a) {
    if (a.rank() != 2) fail("transpose expects a 2-D tensor, got " + shape_str(a.shape()));
    int r = a.dim(0), c = a.dim(1);
    std::vector<double> out(a.numel());
    CMapRM src(a.data().data(), r, c);
    MapRM dst(out.data(), c, r);
    dst = src.transpose();
    return make_op("transpose", {c, r}, std::move(out), {a},
                   [a, r, c](const std::vector<double>& g) {
                       if (!a.requires_grad()) return;
                       MapRM(grad_buf(a).data(), r, c) += CMapRM(g.data(), c, r).transpose();
                   });
}

// ---- shape ----

Tensor reshape(const Tensor& a, Shape shape) {
    if (shape_numel(shape) != a.numel()) {
        fail("reshape: cannot view " + shape_str(a.shape()) + " as " + shape_str(shape));
    }
    return make_op("reshape", std::move(shape), a.data(), {a},
                   [a](const std::vector<double>& g) {
                       if (!a.requires_grad()) return;
                       auto& ga = grad_buf(a);
                       for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
                   });
}

Tensor concat_cols(const Tensor& a, const Tensor& b) {
    if (a.rank() != 2 || b.rank() != 2 || a.dim(0) != b.dim(0)) {
        fail("concat_cols: incompatible shapes " + shape_str(a.shape()) + " and " +
             shape_str(b.shape()));
    }
    int rows = a.dim(0), ca = a.dim(1), cb = b.dim(1);
    std::vector<double> out(static_cast<size_t>(rows) * (ca + cb));
    for (int i = 0; i < rows; ++i) {
        std::memcpy(out.data() + static_cast<size_t>(i) * (ca + cb), a.data().data() + static_cast<size_t>(i) * ca,
                    ca * sizeof(double));
        std::memcpy(out.data() + static_cast<size_t>(i) * (ca + cb) + ca,
                    b.data().data() + static_cast<size_t>(i) * cb, cb * sizeof(double));
    }
    return make_op("concat_cols", {rows, ca + cb}, std::move(out), {a, b},
                   [a, b, rows, ca, cb](const std::vector<double>& g) {
                       if (a.requires_grad()) {
                           auto& ga = grad_buf(a);
                           for (int i = 0; i < rows; ++i)
                               for (int j = 0; j < ca; ++j)
                                   ga[static_cast<size_t>(i) * ca + j] += g[static_cast<size_t>(i) * (ca + cb) + j];
                       }
                       if (b.requires_grad()) {
                           auto& gb = grad_buf(b);
                           for (int i = 0; i < rows; ++i)
                               for (int j = 0; j < cb; ++j)
                                   gb[static_cast<size_t>(i) * cb + j] +=
                                       g[static_cast<size_t>(i) * (ca + cb) + ca + j];
                       }
                   });
}

Tensor slice_cols(const Tensor& a, int start, int count) {
    if (a.rank() != 2) fail("slice_cols expects a 2-D tensor, got " + shape_str(a.shape()));
    int rows = a.dim(0), cols = a.dim(1);
    if (start < 0 || count <= 0 || start + count > cols) {
        fail("slice_cols: window [" + std::to_string(start) + "," + std::to_string(start + count) +
             ") out of range for " + shape_str(a.shape()));
    }
    std::vector<double> out(static_cast<size_t>(rows) * count);
    for (int i = 0; i < rows; ++i) {
        std::memcpy(out.data() + static_cast<size_t>(i) * count,
                    a.data().data() + static_cast<size_t>(i) * cols + start, count * sizeof(double));
    }
    return make_op("slice_cols", {rows, count}, std::move(out), {a},
                   [a, rows, cols, start, count](const std::vector<double>& g) {
                       if (!a.requires_grad()) return;
                       auto& ga = grad_buf(a);
                       for (int i = 0; i < rows; ++i)
                           for (int j = 0; j < count; ++j)
                               ga[static_cast<size_t>(i) * cols + start + j] += g[static_cast<size_t>(i) * count + j];
                   });
}

Tensor gather_rows(const Tensor& a, const std::vector<int>& indices) {
    if (a.rank() < 1) fail("gather_rows expects rank >= 1");
    int rows = a.dim(0);
    long long rowsize = a.numel() / rows;
    for (int idx : indices) {
        if (idx < 0 || idx >= rows) {
            fail("gather_rows: index " + std::to_string(idx) + " out of range [0," +
                 std::to_string(rows) + ")");
        }
    }
    Shape out_shape = a.shape();
    out_shape[0] = static_cast<int>(indices.size());
    std::vector<double> out(shape_numel(out_shape));
    for (size_t i = 0; i < indices.size(); ++i) {
        std::memcpy(out.data() + i * rowsize, a.data().data() + indices[i] * rowsize,
                    rowsize * sizeof(double));
    }
    return make_op("gather_rows", out_shape, std::move(out), {a},
                   [a, indices, rowsize](const std::vector<double>& g) {
                       if (!a.requires_grad()) return;
                       auto& ga = grad_buf(a);
                       for (size_t i = 0; i < indices.size(); ++i) {
                           double* dst = ga.data() + indices[i] * rowsize;
                           const double* src = g.data() + i * rowsize;
                           for (long long j = 0; j < rowsize; ++j) dst[j] += src[j];
                       }
                   });
}

// ---- reductions ----

Tensor softmax(const Tensor& a, int axis) {
    AxisSplit sp = split_axis(a.shape(), axis, "softmax");
    std::vector<double> out(a.numel());
    const auto& d = a.data();
    const long long slices = sp.pre * sp.post;
    for (long long s = 0; s < slices; ++s) {
        {
            const long long p = s / sp.post, q = s % sp.post;
            const long long base = p * sp.mid * sp.post + q;
            double mx = -std::numeric_limits<double>::infinity();
            for (long long j = 0; j < sp.mid; ++j) mx = std::max(mx, d[base + j * sp.post]);
            double sum = 0.0;
            for (long long j = 0; j < sp.mid; ++j) {
                double e = std::exp(d[base + j * sp.post] - mx);
                out[base + j * sp.post] = e;
                sum += e;
            }
            for (long long j = 0; j < sp.mid; ++j) out[base + j * sp.post] /= sum;
        }
    }
    auto y = out;
    return make_op("softmax", a.shape(), std::move(out), {a},
                   [a, sp, y = std::move(y)](const std::vector<double>& g) {
                       if (!a.requires_grad()) return;
                       auto& ga = grad_buf(a);
                       const long long slices = sp.pre * sp.post;
                       for (long long s = 0; s < slices; ++s) {
                           {
                               const long long p = s / sp.post, q = s % sp.post;
                               const long long base = p * sp.mid * sp.post + q;
                               double dot = 0.0;
                               for (long long j = 0; j < sp.mid; ++j) {
                                   const long long i = base + j * sp.post;
                                   dot += g[i] * y[i];
                               }
                               for (long long j = 0; j < sp.mid; ++j) {
                                   const long long i = base + j * sp.post;
                                   ga[i] += y[i] * (g[i] - dot);
                               }
                           }
                       }
                   });
}

MaxReduce reduce_max(const Tensor& a, int axis) {
    AxisSplit sp = split_axis(a.shape(), axis, "reduce_max");
    Shape out_shape = drop_axis(a.shape(), axis, false);
    std::vector<double> out(sp.pre * sp.post);
    std::vector<int> arg(sp.pre * sp.post);
    const auto& d = a.data();
    for (long long p = 0; p < sp.pre; ++p) {
        for (long long q = 0; q < sp.post; ++q) {
            const long long base = p * sp.mid * sp.post + q;
            double best = d[base];
            int best_j = 0;
            for (long long j = 1; j < sp.mid; ++j) {
                double v = d[base + j * sp.post];
                if (v > best) {  // strict: first index wins ties
                    best = v;
                    best_j = static_cast<int>(j);
                }
            }
            out[p * sp.post + q] = best;
            arg[p * sp.post + q] = best_j;
        }
    }
    Tensor values = make_op("reduce_max", out_shape, std::move(out), {a},
                            [a, sp, arg](const std::vector<double>& g) {
                                if (!a.requires_grad()) return;
                                auto& ga = grad_buf(a);
                                for (long long p = 0; p < sp.pre; ++p) {
                                    for (long long q = 0; q < sp.post; ++q) {
                                        const long long o = p * sp.post + q;
                                        ga[p * sp.mid * sp.post + arg[o] * sp.post + q] += g[o];
                                    }
                                }
                            });
    return {values, arg};
}

static Tensor reduce_impl(const Tensor& a, int axis, bool keepdim, bool mean) {
    AxisSplit sp = split_axis(a.shape(), axis, mean ? "reduce_mean" : "reduce_sum");
    Shape out_shape = drop_axis(a.shape(), axis, keepdim);
    const double scale = mean ? 1.0 / static_cast<double>(sp.mid) : 1.0;
    std::vector<double> out(sp.pre * sp.post, 0.0);
    const auto& d = a.data();
    for (long long p = 0; p < sp.pre; ++p) {
        for (long long j = 0; j < sp.mid; ++j) {
            const long long base = p * sp.mid * sp.post + j * sp.post;
            for (long long q = 0; q < sp.post; ++q) out[p * sp.post + q] += d[base + q];
        }
    }
    if (mean) {
        for (auto& x : out) x *= scale;
    }
    return make_op(mean ? "reduce_mean" : "reduce_sum", out_shape, std::move(out), {a},
                   [a, sp, scale](const std::vector<double>& g) {
                       if (!a.requires_grad()) return;
                       auto& ga = grad_buf(a);
                       for (long long p = 0; p < sp.pre; ++p) {
                           for (long long j = 0; j < sp.mid; ++j) {
                               const long long base = p * sp.mid * sp.post + j * sp.post;
                               for (long long q = 0; q < sp.post; ++q)
                                   ga[base + q] += g[p * sp.post + q] * scale;
                           }
                       }
                   });
}

Tensor reduce_sum(const Tensor& a, int axis, bool keepdim) {
    return reduce_impl(a, axis, keepdim, false);
}

Tensor reduce_mean(const Tensor& a, int axis, bool keepdim) {
    return reduce_impl(a, axis, keepdim, true);
}

Tensor sum_all(const Tensor& a) {
    double s = 0.0;
    for (double x : a.data()) s += x;
    return make_op("sum_all", {1}, {s}, {a}, [a](const std::vector<double>& g) {
        if (!a.requires_grad()) return;
        auto& ga = grad_buf(a);
        for (auto& x : ga) x += g[0];
    });
}

Tensor mean_all(const Tensor& a) {
    double s = 0.0;
    for (double x : a.data()) s += x;
    const double inv = 1.0 / static_cast<double>(a.numel());
    return make_op("mean_all", {1}, {s * inv}, {a}, [a, inv](const std::vector<double>& g) {
        if (!a.requires_grad()) return;
        auto& ga = grad_buf(a);
        for (auto& x : ga) x += g[0] * inv;
    });
}

// ---- normalization ----

// style 0: (x - mu) / sqrt(var + eps)   (layer norm)
// style 1: (x - mu) / (sqrt(var) + eps) (context norm; constant slice -> 0)
static Tensor normalize_impl(const Tensor& a, int axis, double eps, int style) {
    AxisSplit sp = split_axis(a.shape(), axis, "normalize");
    if (sp.mid < 2) fail("normalize: axis extent must be >= 2, shape " + shape_str(a.shape()));
    std::vector<double> out(a.numel());
    std::vector<double> denom(sp.pre * sp.post);  // S for style 0, D for style 1
    std::vector<double> sdev(style == 1 ? sp.pre * sp.post : 0);
    const auto& d = a.data();
    const long long slices = sp.pre * sp.post;
    for (long long s = 0; s < slices; ++s) {
        {
            const long long p = s / sp.post, q = s % sp.post;
            const long long base = p * sp.mid * sp.post + q;
            double mu = 0.0;
            for (long long j = 0; j < sp.mid; ++j) mu += d[base + j * sp.post];
            mu /= static_cast<double>(sp.mid);
            double var = 0.0;
            for (long long j = 0; j < sp.mid; ++j) {
                double c = d[base + j * sp.post] - mu;
                var += c * c;
            }
            var /= static_cast<double>(sp.mid);
            double dn;
            if (style == 0) {
                dn = std::sqrt(var + eps);
            } else {
                double s = std::sqrt(var);
                sdev[p * sp.post + q] = s;
                dn = s + eps;
            }
            denom[p * sp.post + q] = dn;
            for (long long j = 0; j < sp.mid; ++j) {
                out[base + j * sp.post] = (d[base + j * sp.post] - mu) / dn;
            }
        }
    }
    auto y = out;
    return make_op(style == 0 ? "layer_normalize" : "context_normalize", a.shape(), std::move(out),
                   {a},
                   [a, sp, style, denom = std::move(denom), sdev = std::move(sdev),
                    y = std::move(y)](const std::vector<double>& g) {
                       if (!a.requires_grad()) return;
                       auto& ga = grad_buf(a);
                       const double inv_n = 1.0 / static_cast<double>(sp.mid);
                       const long long slices = sp.pre * sp.post;
                       for (long long s = 0; s < slices; ++s) {
                           {
                               const long long p = s / sp.post, q = s % sp.post;
                               const long long base = p * sp.mid * sp.post + q;
                               const long long o = p * sp.post + q;
                               double gm = 0.0, gym = 0.0;
                               for (long long j = 0; j < sp.mid; ++j) {
                                   const long long i = base + j * sp.post;
                                   gm += g[i];
                                   gym += g[i] * y[i];
                               }
                               gm *= inv_n;
                               gym *= inv_n;
                               if (style == 0) {
                                   const double inv_s = 1.0 / denom[o];
                                   for (long long j = 0; j < sp.mid; ++j) {
                                       const long long i = base + j * sp.post;
                                       ga[i] += inv_s * (g[i] - gm - y[i] * gym);
                                   }
                               } else {
                                   const double inv_d = 1.0 / denom[o];
                                   const double s = sdev[o];
                                   const double curv = s > 1e-12 ? gym / s : 0.0;
                                   for (long long j = 0; j < sp.mid; ++j) {
                                       const long long i = base + j * sp.post;
                                       ga[i] += (g[i] - gm) * inv_d - y[i] * curv;
                                   }
                               }
                           }
                       }
                   });
}

Tensor layer_normalize(const Tensor& a, int axis, double eps) {
    return normalize_impl(a, axis, eps, 0);
}

Tensor context_normalize(const Tensor& a, int axis, double eps) {
    return normalize_impl(a, axis, eps, 1);
}

Tensor bce_with_logits_mean(const Tensor& logits, const std::vector<double>& targets,
                            const std::vector<double>& weights) {
    const size_t n = logits.data().size();
    if (targets.size() != n || weights.size() != n) {
        fail("bce_with_logits_mean: logits " + shape_str(logits.shape()) + " vs " +
             std::to_string(targets.size()) + " targets / " + std::to_string(weights.size()) +
             " weights");
    }
    const auto& o = logits.data();
    double loss = 0.0;
    for (size_t i = 0; i < n; ++i) {
        loss += weights[i] * (std::max(o[i], 0.0) - o[i] * targets[i] +
                              std::log1p(std::exp(-std::abs(o[i]))));
    }
    loss /= static_cast<double>(n);
    return make_op("bce_with_logits_mean", {1}, {loss}, {logits},
                   [logits, targets, weights, n](const std::vector<double>& g) {
                       if (!logits.requires_grad()) return;
                       auto& ga = grad_buf(logits);
                       const auto& o = logits.data();
                       const double scale = g[0] / static_cast<double>(n);
                       for (size_t i = 0; i < n; ++i) {
                           double s = o[i] >= 0.0 ? 1.0 / (1.0 + std::exp(-o[i]))
                                                  : std::exp(o[i]) / (1.0 + std::exp(o[i]));
                           ga[i] += scale * weights[i] * (s - targets[i]);
                       }
                   });
}

// ---- reverse pass ----

static std::vector<TensorImpl*> topo_order(TensorImpl* root) {
    std::vector<TensorImpl*> order;
    std::unordered_set<TensorImpl*> visited;
    // Iterative post-order DFS; parent visit order is the recording order, so
    // repeated runs on the same graph produce identical traversals.
    std::vector<std::pair<TensorImpl*, size_t>> stack;
    stack.emplace_back(root, 0);
    visited.insert(root);
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (next < node->parents.size()) {
            TensorImpl* p = node->parents[next].impl();
            ++next;
            if (p && !visited.count(p)) {
                visited.insert(p);
                stack.emplace_back(p, 0);
            }
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }
    return order;
}

GraphRecord record_graph(const Tensor& root) {
    GraphRecord rec;
    for (TensorImpl* n : topo_order(root.impl())) {
        GraphNode gn;
        gn.id = n->id;
        gn.op = n->op;
        for (const auto& p : n->parents) gn.inputs.push_back(p.impl()->id);
        rec.nodes.push_back(std::move(gn));
    }
    return rec;
}

void backward(const Tensor& loss) {
    if (!loss.defined() || loss.numel() != 1) {
        fail("backward requires a scalar loss, got " +
             (loss.defined() ? shape_str(loss.shape()) : std::string("undefined")));
    }
    auto order = topo_order(loss.impl());
    loss.impl()->grad.assign(1, 1.0);
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        TensorImpl* node = *it;
        if (!node->backward_fn || node->grad.empty()) continue;
        node->backward_fn(*node);
    }
    // Interior gradients are scratch; release them so repeated backwards on
    // fresh graphs start clean. Leaf grads are kept (they accumulate).
    for (TensorImpl* node : order) {
        if (node->backward_fn) node->grad.clear();
    }
}

// ---- Adam ----

Adam::Adam(std::vector<Tensor> params, double lr, double beta1, double beta2, double eps)
    : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {
    for (auto& p : params) {
        Slot s;
        s.param = p;
        s.m.assign(p.numel(), 0.0);
        s.v.assign(p.numel(), 0.0);
        slots_.push_back(std::move(s));
    }
}

void Adam::step() {
    ++step_;
    const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(step_));
    const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(step_));
    for (auto& s : slots_) {
        auto& g = s.param.grad();
        for (double gv : g) {
            if (!std::isfinite(gv)) {
                throw std::runtime_error("Adam: non-finite gradient in parameter '" +
                                         (s.param.name().empty() ? std::string("<unnamed>")
                                                                 : s.param.name()) +
                                         "'");
            }
        }
        auto& d = s.param.data();
        const long long count = static_cast<long long>(d.size());
        for (long long i = 0; i < count; ++i) {
            s.m[i] = beta1_ * s.m[i] + (1.0 - beta1_) * g[i];
            s.v[i] = beta2_ * s.v[i] + (1.0 - beta2_) * g[i] * g[i];
            const double mhat = s.m[i] / bc1;
            const double vhat = s.v[i] / bc2;
            d[i] -= lr_ * mhat / (std::sqrt(vhat) + eps_);
        }
    }
}

void Adam::zero_grad() {
    for (auto& s : slots_) s.param.zero_grad();
}

// ---- checkpoints ----

namespace {

void write_u32(std::ostream& os, uint32_t v) { os.write(reinterpret_cast<const char*>(&v), 4); }
void write_i64(std::ostream& os, int64_t v) { os.write(reinterpret_cast<const char*>(&v), 8); }

uint32_t read_u32(std::istream& is) {
    uint32_t v = 0;
    is.read(reinterpret_cast<char*>(&v), 4);
    return v;
}
int64_t read_i64(std::istream& is) {
    int64_t v = 0;
    is.read(reinterpret_cast<char*>(&v), 8);
    return v;
}

constexpr char kCkptMagic[9] = "GCTCKPT1";

}  // namespace

void save_checkpoint(const std::string& path, const std::vector<Tensor>& params) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("cannot open checkpoint for writing: " + path);
    os.write(kCkptMagic, 8);
    write_u32(os, static_cast<uint32_t>(params.size()));
    for (const auto& p : params) {
        const std::string& name = p.name();
        write_u32(os, static_cast<uint32_t>(name.size()));
        os.write(name.data(), static_cast<std::streamsize>(name.size()));
        write_u32(os, static_cast<uint32_t>(p.rank()));
        for (int d : p.shape()) write_i64(os, d);
        os.write(reinterpret_cast<const char*>(p.data().data()),
                 static_cast<std::streamsize>(p.numel() * sizeof(double)));
    }
    if (!os) throw std::runtime_error("checkpoint write failed: " + path);
}

void load_checkpoint(const std::string& path, std::vector<Tensor>& params) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("cannot open checkpoint: " + path);
    char magic[8];
    is.read(magic, 8);
    if (!is || std::memcmp(magic, kCkptMagic, 8) != 0) {
        throw std::runtime_error("bad checkpoint magic in " + path);
    }
    std::unordered_map<std::string, Tensor> by_name;
    for (auto& p : params) by_name.emplace(p.name(), p);
    uint32_t count = read_u32(is);
    std::unordered_set<std::string> seen;
    for (uint32_t i = 0; i < count; ++i) {
        uint32_t name_len = read_u32(is);
        std::string name(name_len, '\0');
        is.read(name.data(), name_len);
        uint32_t rank = read_u32(is);
        Shape shape(rank);
        for (uint32_t d = 0; d < rank; ++d) shape[d] = static_cast<int>(read_i64(is));
        auto it = by_name.find(name);
        if (it == by_name.end()) {
            throw std::runtime_error("checkpoint parameter '" + name + "' is not in the model");
        }
        if (it->second.shape() != shape) {
            throw std::runtime_error("checkpoint parameter '" + name + "' has shape " +
                                     shape_str(shape) + ", model expects " +
                                     shape_str(it->second.shape()));
        }
        is.read(reinterpret_cast<char*>(it->second.data().data()),
                static_cast<std::streamsize>(it->second.numel() * sizeof(double)));
        seen.insert(name);
    }
    if (!is) throw std::runtime_error("truncated checkpoint: " + path);
    if (seen.size() != params.size()) {
        for (const auto& p : params) {
            if (!seen.count(p.name())) {
                throw std::runtime_error("checkpoint is missing parameter '" + p.name() + "'");
            }
        }
    }
}

}  // namespace gct::ad
