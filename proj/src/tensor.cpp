#include "cpl/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <sstream>

#include "cpl/kernels.hpp"

namespace cpl {

struct Tensor::Impl {
    std::vector<int> shape;
    std::vector<double> data;
    std::vector<double> grad;  // empty until first accumulation
    bool requires_grad = false;
};

namespace {

size_t shape_numel(std::span<const int> shape) {
    size_t n = 1;
    for (int e : shape) {
        if (e <= 0) throw DimError("tensor extent must be positive, got shape " +
                                   shape_to_string(shape));
        n *= static_cast<size_t>(e);
    }
    return n;
}

void round_buffer_f32(std::vector<double>& buf) {
    for (double& v : buf) v = round_f32(v);
}

// Gradient accumulation endpoint; also applies the f32 rounding policy so
// 32-bit runs stay 32-bit through the backward pass.
void accumulate(Tensor::Impl& dst, const double* src, size_t n) {
    if (dst.grad.empty()) dst.grad.assign(dst.data.size(), 0.0);
    if (precision() == Precision::f32) {
        for (size_t i = 0; i < n; ++i) dst.grad[i] = round_f32(dst.grad[i] + src[i]);
    } else {
        for (size_t i = 0; i < n; ++i) dst.grad[i] += src[i];
    }
}

void accumulate_at(Tensor::Impl& dst, size_t offset, const double* src, size_t n) {
    if (dst.grad.empty()) dst.grad.assign(dst.data.size(), 0.0);
    if (precision() == Precision::f32) {
        for (size_t i = 0; i < n; ++i)
            dst.grad[offset + i] = round_f32(dst.grad[offset + i] + src[i]);
    } else {
        for (size_t i = 0; i < n; ++i) dst.grad[offset + i] += src[i];
    }
}

const std::vector<double>& out_grad(const std::shared_ptr<Tensor::Impl>& impl) {
    static const std::vector<double> empty;
    return impl->grad.empty() ? empty : impl->grad;
}

void check_2d(const Tensor& t, const char* op) {
    if (t.rank() != 2)
        throw DimError(std::string(op) + ": expected rank-2 tensor, got " + t.shape_str());
}

} // namespace

std::string shape_to_string(std::span<const int> shape) {
    std::ostringstream os;
    os << '[';
    for (size_t i = 0; i < shape.size(); ++i) {
        if (i) os << 'x';
        os << shape[i];
    }
    os << ']';
    return os.str();
}

// ---------------------------------------------------------------------------
// Tensor

Tensor Tensor::zeros(std::vector<int> shape, bool requires_grad) {
    auto impl = std::make_shared<Impl>();
    size_t n = shape_numel(shape);
    impl->shape = std::move(shape);
    impl->data.assign(n, 0.0);
    impl->requires_grad = requires_grad;
    return Tensor(std::move(impl));
}

Tensor Tensor::full(std::vector<int> shape, double value, bool requires_grad) {
    Tensor t = zeros(std::move(shape), requires_grad);
    std::fill(t.impl_->data.begin(), t.impl_->data.end(), value);
    return t;
}

Tensor Tensor::from(std::vector<int> shape, std::vector<double> data, bool requires_grad) {
    size_t n = shape_numel(shape);
    if (n != data.size())
        throw DimError("tensor data length " + std::to_string(data.size()) +
                       " does not match shape " + shape_to_string(shape));
    auto impl = std::make_shared<Impl>();
    impl->shape = std::move(shape);
    impl->data = std::move(data);
    impl->requires_grad = requires_grad;
    return Tensor(std::move(impl));
}

Tensor Tensor::scalar(double v, bool requires_grad) {
    return from({1}, {v}, requires_grad);
}

Tensor Tensor::randn(Rng& rng, std::vector<int> shape, double stddev, bool requires_grad) {
    Tensor t = zeros(std::move(shape), requires_grad);
    for (auto& v : t.impl_->data) v = rng.normal(0.0, stddev);
    if (precision() == Precision::f32) round_buffer_f32(t.impl_->data);
    return t;
}

const std::vector<int>& Tensor::shape() const { return impl_->shape; }
int Tensor::rank() const { return static_cast<int>(impl_->shape.size()); }
size_t Tensor::size() const { return impl_->data.size(); }

int Tensor::rows() const {
    check_2d(*this, "rows");
    return impl_->shape[0];
}
int Tensor::cols() const {
    check_2d(*this, "cols");
    return impl_->shape[1];
}

double* Tensor::data() { return impl_->data.data(); }
const double* Tensor::data() const { return impl_->data.data(); }

double& Tensor::at(int i) { return impl_->data.at(static_cast<size_t>(i)); }
double& Tensor::at(int i, int j) {
    return impl_->data.at(static_cast<size_t>(i) * impl_->shape[1] + j);
}
double Tensor::at(int i) const { return impl_->data.at(static_cast<size_t>(i)); }
double Tensor::at(int i, int j) const {
    return impl_->data.at(static_cast<size_t>(i) * impl_->shape[1] + j);
}

double Tensor::item() const {
    if (size() != 1)
        throw ContractError("item(): tensor is not scalar, shape " + shape_str());
    return impl_->data[0];
}

bool Tensor::requires_grad() const { return impl_->requires_grad; }
void Tensor::set_requires_grad(bool b) { impl_->requires_grad = b; }

bool Tensor::has_grad() const { return !impl_->grad.empty(); }
double* Tensor::grad() { return impl_->grad.empty() ? nullptr : impl_->grad.data(); }
const double* Tensor::grad() const { return impl_->grad.empty() ? nullptr : impl_->grad.data(); }
void Tensor::zero_grad() { impl_->grad.assign(impl_->data.size(), 0.0); }
void Tensor::ensure_grad() {
    if (impl_->grad.empty()) impl_->grad.assign(impl_->data.size(), 0.0);
}

Tensor Tensor::clone() const {
    auto impl = std::make_shared<Impl>(*impl_);
    return Tensor(std::move(impl));
}

std::string Tensor::shape_str() const { return shape_to_string(impl_->shape); }

// ---------------------------------------------------------------------------
// Tape

void Tape::clear() { nodes_.clear(); }

bool Tape::recording(std::initializer_list<const Tensor*> inputs) const {
    if (mode_ != GradMode::record) return false;
    for (const Tensor* t : inputs)
        if (t->requires_grad()) return true;
    return false;
}

void Tape::finalize(const char* op, Tensor& out) {
    auto& buf = out.impl()->data;
    if (precision() == Precision::f32) round_buffer_f32(buf);
    for (double v : buf) {
        if (!std::isfinite(v))
            throw NumericsError(std::string("op '") + op + "' produced a non-finite value");
    }
}

void Tape::record(const char* op, std::initializer_list<const Tensor*> inputs,
                  Tensor& out, std::function<void()> backward_fn) {
    finalize(op, out);
    if (!recording(inputs)) return;
    out.set_requires_grad(true);
    Node node;
    node.op = op;
    for (const Tensor* t : inputs) node.inputs.push_back(t->impl());
    node.out = out.impl();
    node.backward_fn = std::move(backward_fn);
    nodes_.push_back(std::move(node));
}

void Tape::backward(const Tensor& loss) {
    if (loss.size() != 1)
        throw ContractError("backward: loss must be scalar, got " + loss.shape_str());
    if (mode_ != GradMode::record)
        throw ContractError("backward: tape is not recording");
    if (!loss.requires_grad())
        throw ContractError("backward: loss is not connected to any recorded parameter");

    // Zero every gradient this tape touches, then seed the loss. Running
    // backward twice therefore produces identical bytes.
    for (auto& node : nodes_) {
        node.out->grad.assign(node.out->data.size(), 0.0);
        for (auto& in : node.inputs)
            if (in->requires_grad) in->grad.assign(in->data.size(), 0.0);
    }
    loss.impl()->grad.assign(1, 1.0);

    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
        if (it->out->grad.empty()) it->out->grad.assign(it->out->data.size(), 0.0);
        it->backward_fn();
    }
}

// ---------------------------------------------------------------------------
// primitives

Tensor Tape::matmul(const Tensor& a, const Tensor& b) {
    check_2d(a, "matmul");
    check_2d(b, "matmul");
    const int m = a.rows(), k = a.cols(), n = b.cols();
    if (b.rows() != k)
        throw DimError("matmul: inner extents disagree, " + a.shape_str() + " vs " +
                       b.shape_str());
    Tensor out = Tensor::zeros({m, n});
    kernels::matmul(a.data(), b.data(), out.data(), m, k, n);

    auto ai = a.impl(), bi = b.impl(), oi = out.impl();
    record("matmul", {&a, &b}, out, [ai, bi, oi, m, k, n] {
        const auto& g = out_grad(oi);
        if (g.empty()) return;
        std::vector<double> tmp;
        if (ai->requires_grad) {
            tmp.resize(static_cast<size_t>(m) * k);
            kernels::matmul_nt(g.data(), bi->data.data(), tmp.data(), m, n, k);
            accumulate(*ai, tmp.data(), tmp.size());
        }
        if (bi->requires_grad) {
            tmp.resize(static_cast<size_t>(k) * n);
            kernels::matmul_tn(ai->data.data(), g.data(), tmp.data(), k, m, n);
            accumulate(*bi, tmp.data(), tmp.size());
        }
    });
    return out;
}

Tensor Tape::transpose(const Tensor& x) {
    check_2d(x, "transpose");
    const int r = x.rows(), c = x.cols();
    Tensor out = Tensor::zeros({c, r});
    for (int i = 0; i < r; ++i)
        for (int j = 0; j < c; ++j) out.at(j, i) = x.at(i, j);

    auto xi = x.impl(), oi = out.impl();
    record("transpose", {&x}, out, [xi, oi, r, c] {
        const auto& g = out_grad(oi);
        if (g.empty() || !xi->requires_grad) return;
        std::vector<double> tmp(static_cast<size_t>(r) * c);
        for (int i = 0; i < r; ++i)
            for (int j = 0; j < c; ++j)
                tmp[static_cast<size_t>(i) * c + j] = g[static_cast<size_t>(j) * r + i];
        accumulate(*xi, tmp.data(), tmp.size());
    });
    return out;
}

Tensor Tape::reshape(const Tensor& x, std::vector<int> shape) {
    if (shape_numel(shape) != x.size())
        throw DimError("reshape: " + x.shape_str() + " cannot take shape " +
                       shape_to_string(shape));
    Tensor out = Tensor::from(std::move(shape),
                              std::vector<double>(x.data(), x.data() + x.size()));
    auto xi = x.impl(), oi = out.impl();
    record("reshape", {&x}, out, [xi, oi] {
        const auto& g = out_grad(oi);
        if (g.empty() || !xi->requires_grad) return;
        accumulate(*xi, g.data(), g.size());
    });
    return out;
}

Tensor Tape::add(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape())
        throw DimError("add: shape mismatch " + a.shape_str() + " vs " + b.shape_str());
    Tensor out = Tensor::zeros(a.shape());
    const size_t n = a.size();
    for (size_t i = 0; i < n; ++i) out.data()[i] = a.data()[i] + b.data()[i];

    auto ai = a.impl(), bi = b.impl(), oi = out.impl();
    record("add", {&a, &b}, out, [ai, bi, oi] {
        const auto& g = out_grad(oi);
        if (g.empty()) return;
        if (ai->requires_grad) accumulate(*ai, g.data(), g.size());
        if (bi->requires_grad) accumulate(*bi, g.data(), g.size());
    });
    return out;
}

Tensor Tape::sub(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape())
        throw DimError("sub: shape mismatch " + a.shape_str() + " vs " + b.shape_str());
    Tensor out = Tensor::zeros(a.shape());
    const size_t n = a.size();
    for (size_t i = 0; i < n; ++i) out.data()[i] = a.data()[i] - b.data()[i];

    auto ai = a.impl(), bi = b.impl(), oi = out.impl();
    record("sub", {&a, &b}, out, [ai, bi, oi] {
        const auto& g = out_grad(oi);
        if (g.empty()) return;
        if (ai->requires_grad) accumulate(*ai, g.data(), g.size());
        if (bi->requires_grad) {
            std::vector<double> neg(g.size());
            for (size_t i = 0; i < g.size(); ++i) neg[i] = -g[i];
            accumulate(*bi, neg.data(), neg.size());
        }
    });
    return out;
}

Tensor Tape::mul(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape())
        throw DimError("mul: shape mismatch " + a.shape_str() + " vs " + b.shape_str());
    Tensor out = Tensor::zeros(a.shape());
    const size_t n = a.size();
    for (size_t i = 0; i < n; ++i) out.data()[i] = a.data()[i] * b.data()[i];

    auto ai = a.impl(), bi = b.impl(), oi = out.impl();
    record("mul", {&a, &b}, out, [ai, bi, oi] {
        const auto& g = out_grad(oi);
        if (g.empty()) return;
        std::vector<double> tmp(g.size());
        if (ai->requires_grad) {
            for (size_t i = 0; i < g.size(); ++i) tmp[i] = g[i] * bi->data[i];
            accumulate(*ai, tmp.data(), tmp.size());
        }
        if (bi->requires_grad) {
            for (size_t i = 0; i < g.size(); ++i) tmp[i] = g[i] * ai->data[i];
            accumulate(*bi, tmp.data(), tmp.size());
        }
    });
    return out;
}

Tensor Tape::scale(const Tensor& x, double alpha) {
    Tensor out = Tensor::zeros(x.shape());
    for (size_t i = 0; i < x.size(); ++i) out.data()[i] = x.data()[i] * alpha;

    auto xi = x.impl(), oi = out.impl();
    record("scale", {&x}, out, [xi, oi, alpha] {
        const auto& g = out_grad(oi);
        if (g.empty() || !xi->requires_grad) return;
        std::vector<double> tmp(g.size());
        for (size_t i = 0; i < g.size(); ++i) tmp[i] = g[i] * alpha;
        accumulate(*xi, tmp.data(), tmp.size());
    });
    return out;
}

Tensor Tape::add_scalar(const Tensor& x, double c) {
    Tensor out = Tensor::zeros(x.shape());
    for (size_t i = 0; i < x.size(); ++i) out.data()[i] = x.data()[i] + c;

    auto xi = x.impl(), oi = out.impl();
    record("add_scalar", {&x}, out, [xi, oi] {
        const auto& g = out_grad(oi);
        if (g.empty() || !xi->requires_grad) return;
        accumulate(*xi, g.data(), g.size());
    });
    return out;
}

Tensor Tape::add_bias(const Tensor& x, const Tensor& bias) {
    check_2d(x, "add_bias");
    if (bias.rank() != 1 || bias.shape()[0] != x.cols())
        throw DimError("add_bias: bias " + bias.shape_str() + " does not match " +
                       x.shape_str());
    const int r = x.rows(), c = x.cols();
    Tensor out = Tensor::zeros({r, c});
    for (int i = 0; i < r; ++i)
        for (int j = 0; j < c; ++j) out.at(i, j) = x.at(i, j) + bias.at(j);

    auto xi = x.impl(), bi = bias.impl(), oi = out.impl();
    record("add_bias", {&x, &bias}, out, [xi, bi, oi, r, c] {
        const auto& g = out_grad(oi);
        if (g.empty()) return;
        if (xi->requires_grad) accumulate(*xi, g.data(), g.size());
        if (bi->requires_grad) {
            std::vector<double> col(static_cast<size_t>(c), 0.0);
            for (int i = 0; i < r; ++i)
                for (int j = 0; j < c; ++j) col[j] += g[static_cast<size_t>(i) * c + j];
            accumulate(*bi, col.data(), col.size());
        }
    });
    return out;
}

Tensor Tape::mean_rows(const Tensor& x) {
    check_2d(x, "mean_rows");
    const int r = x.rows(), c = x.cols();
    Tensor out = Tensor::zeros({c});
    for (int i = 0; i < r; ++i)
        for (int j = 0; j < c; ++j) out.at(j) += x.at(i, j);
    for (int j = 0; j < c; ++j) out.at(j) /= r;

    auto xi = x.impl(), oi = out.impl();
    record("mean_rows", {&x}, out, [xi, oi, r, c] {
        const auto& g = out_grad(oi);
        if (g.empty() || !xi->requires_grad) return;
        std::vector<double> tmp(static_cast<size_t>(r) * c);
        for (int i = 0; i < r; ++i)
            for (int j = 0; j < c; ++j) tmp[static_cast<size_t>(i) * c + j] = g[j] / r;
        accumulate(*xi, tmp.data(), tmp.size());
    });
    return out;
}

Tensor Tape::slice_rows(const Tensor& x, int begin, int count) {
    check_2d(x, "slice_rows");
    const int r = x.rows(), c = x.cols();
    if (begin < 0 || count <= 0 || begin + count > r)
        throw DimError("slice_rows: range [" + std::to_string(begin) + ", " +
                       std::to_string(begin + count) + ") out of " + x.shape_str());
    Tensor out = Tensor::zeros({count, c});
    std::memcpy(out.data(), x.data() + static_cast<size_t>(begin) * c,
                static_cast<size_t>(count) * c * sizeof(double));

    auto xi = x.impl(), oi = out.impl();
    record("slice_rows", {&x}, out, [xi, oi, begin, c] {
        const auto& g = out_grad(oi);
        if (g.empty() || !xi->requires_grad) return;
        accumulate_at(*xi, static_cast<size_t>(begin) * c, g.data(), g.size());
    });
    return out;
}

Tensor Tape::slice_cols(const Tensor& x, int begin, int count) {
    check_2d(x, "slice_cols");
    const int r = x.rows(), c = x.cols();
    if (begin < 0 || count <= 0 || begin + count > c)
        throw DimError("slice_cols: range [" + std::to_string(begin) + ", " +
                       std::to_string(begin + count) + ") out of " + x.shape_str());
    Tensor out = Tensor::zeros({r, count});
    for (int i = 0; i < r; ++i)
        std::memcpy(out.data() + static_cast<size_t>(i) * count,
                    x.data() + static_cast<size_t>(i) * c + begin,
                    static_cast<size_t>(count) * sizeof(double));

    auto xi = x.impl(), oi = out.impl();
    record("slice_cols", {&x}, out, [xi, oi, begin, r, c, count] {
        const auto& g = out_grad(oi);
        if (g.empty() || !xi->requires_grad) return;
        std::vector<double> tmp(static_cast<size_t>(r) * c, 0.0);
        for (int i = 0; i < r; ++i)
            for (int j = 0; j < count; ++j)
                tmp[static_cast<size_t>(i) * c + begin + j] = g[static_cast<size_t>(i) * count + j];
        accumulate(*xi, tmp.data(), tmp.size());
    });
    return out;
}

Tensor Tape::concat_rows(const std::vector<Tensor>& parts) {
    if (parts.empty()) throw DimError("concat_rows: no parts");
    const int c = parts[0].cols();
    int total = 0;
    for (const Tensor& p : parts) {
        check_2d(p, "concat_rows");
        if (p.cols() != c)
            throw DimError("concat_rows: width mismatch " + p.shape_str() + " vs " +
                           parts[0].shape_str());
        total += p.rows();
    }
    Tensor out = Tensor::zeros({total, c});
    size_t offset = 0;
    for (const Tensor& p : parts) {
        std::memcpy(out.data() + offset, p.data(), p.size() * sizeof(double));
        offset += p.size();
    }

    std::vector<std::shared_ptr<Tensor::Impl>> impls;
    impls.reserve(parts.size());
    bool any_grad = false;
    for (const Tensor& p : parts) {
        impls.push_back(p.impl());
        any_grad = any_grad || p.requires_grad();
    }
    Tensor out2 = out;  // keep handle for record()
    finalize("concat_rows", out2);
    if (mode_ == GradMode::record && any_grad) {
        out2.set_requires_grad(true);
        Node node;
        node.op = "concat_rows";
        node.inputs = impls;
        node.out = out2.impl();
        auto oi = out2.impl();
        node.backward_fn = [impls, oi] {
            const auto& g = out_grad(oi);
            if (g.empty()) return;
            size_t off = 0;
            for (auto& in : impls) {
                if (in->requires_grad) accumulate(*in, g.data() + off, in->data.size());
                off += in->data.size();
            }
        };
        nodes_.push_back(std::move(node));
    }
    return out2;
}

Tensor Tape::concat_cols(const std::vector<Tensor>& parts) {
    if (parts.empty()) throw DimError("concat_cols: no parts");
    const int r = parts[0].rows();
    int total = 0;
    for (const Tensor& p : parts) {
        check_2d(p, "concat_cols");
        if (p.rows() != r)
            throw DimError("concat_cols: row mismatch " + p.shape_str() + " vs " +
                           parts[0].shape_str());
        total += p.cols();
    }
    Tensor out = Tensor::zeros({r, total});
    int col0 = 0;
    for (const Tensor& p : parts) {
        const int pc = p.cols();
        for (int i = 0; i < r; ++i)
            std::memcpy(out.data() + static_cast<size_t>(i) * total + col0,
                        p.data() + static_cast<size_t>(i) * pc,
                        static_cast<size_t>(pc) * sizeof(double));
        col0 += pc;
    }

    std::vector<std::shared_ptr<Tensor::Impl>> impls;
    bool any_grad = false;
    for (const Tensor& p : parts) {
        impls.push_back(p.impl());
        any_grad = any_grad || p.requires_grad();
    }
    finalize("concat_cols", out);
    if (mode_ == GradMode::record && any_grad) {
        out.set_requires_grad(true);
        Node node;
        node.op = "concat_cols";
        node.inputs = impls;
        node.out = out.impl();
        auto oi = out.impl();
        node.backward_fn = [impls, oi, r, total] {
            const auto& g = out_grad(oi);
            if (g.empty()) return;
            int c0 = 0;
            for (auto& in : impls) {
                const int pc = in->shape[1];
                if (in->requires_grad) {
                    std::vector<double> tmp(in->data.size());
                    for (int i = 0; i < r; ++i)
                        for (int j = 0; j < pc; ++j)
                            tmp[static_cast<size_t>(i) * pc + j] =
                                g[static_cast<size_t>(i) * total + c0 + j];
                    accumulate(*in, tmp.data(), tmp.size());
                }
                c0 += pc;
            }
        };
        nodes_.push_back(std::move(node));
    }
    return out;
}

Tensor Tape::softmax(const Tensor& x, int axis) {
    const int r = x.rank();
    if (axis < 0) axis += r;
    if (axis < 0 || axis >= r)
        throw DimError("softmax: axis out of range for " + x.shape_str());
    const int k = x.shape()[axis];
    if (k < 1) throw DimError("softmax: empty axis");

    // View as [outer × k × inner]; each (outer, inner) pair is one softmax row.
    size_t outer = 1, inner = 1;
    for (int i = 0; i < axis; ++i) outer *= static_cast<size_t>(x.shape()[i]);
    for (int i = axis + 1; i < r; ++i) inner *= static_cast<size_t>(x.shape()[i]);

    Tensor out = Tensor::zeros(x.shape());
    if (inner == 1) {
        kernels::softmax_rows(x.data(), out.data(), static_cast<int>(outer), k);
    } else {
        std::vector<double> row(static_cast<size_t>(k)), srow(static_cast<size_t>(k));
        for (size_t o = 0; o < outer; ++o)
            for (size_t in = 0; in < inner; ++in) {
                for (int j = 0; j < k; ++j)
                    row[j] = x.data()[(o * k + j) * inner + in];
                kernels::serial::softmax_rows(row.data(), srow.data(), 1, k);
                for (int j = 0; j < k; ++j)
                    out.data()[(o * k + j) * inner + in] = srow[j];
            }
    }

    auto xi = x.impl(), oi = out.impl();
    record("softmax", {&x}, out, [xi, oi, outer, inner, k] {
        const auto& g = out_grad(oi);
        if (g.empty() || !xi->requires_grad) return;
        std::vector<double> tmp(xi->data.size());
        const auto& y = oi->data;
        for (size_t o = 0; o < outer; ++o)
            for (size_t in = 0; in < inner; ++in) {
                double dot = 0.0;
                for (int j = 0; j < k; ++j) {
                    const size_t idx = (o * k + j) * inner + in;
                    dot += g[idx] * y[idx];
                }
                for (int j = 0; j < k; ++j) {
                    const size_t idx = (o * k + j) * inner + in;
                    tmp[idx] = (g[idx] - dot) * y[idx];
                }
            }
        accumulate(*xi, tmp.data(), tmp.size());
    });
    return out;
}

Tensor Tape::layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
    if (eps <= 0.0) throw ContractError("layer_norm: eps must be positive");
    check_2d(x, "layer_norm");
    const int r = x.rows(), c = x.cols();
    if (gamma.rank() != 1 || gamma.shape()[0] != c || beta.rank() != 1 || beta.shape()[0] != c)
        throw DimError("layer_norm: gamma/beta must be [" + std::to_string(c) + "]");

    Tensor out = Tensor::zeros({r, c});
    kernels::layer_norm_rows(x.data(), gamma.data(), beta.data(), out.data(), r, c, eps);

    auto xi = x.impl(), gi = gamma.impl(), bi = beta.impl(), oi = out.impl();
    record("layer_norm", {&x, &gamma, &beta}, out, [xi, gi, bi, oi, r, c, eps] {
        const auto& g = out_grad(oi);
        if (g.empty()) return;
        std::vector<double> dx(xi->data.size(), 0.0);
        std::vector<double> dgamma(static_cast<size_t>(c), 0.0);
        std::vector<double> dbeta(static_cast<size_t>(c), 0.0);
        for (int i = 0; i < r; ++i) {
            const double* xr = xi->data.data() + static_cast<size_t>(i) * c;
            const double* gr = g.data() + static_cast<size_t>(i) * c;
            double mean = 0.0;
            for (int j = 0; j < c; ++j) mean += xr[j];
            mean /= c;
            double var = 0.0;
            for (int j = 0; j < c; ++j) var += (xr[j] - mean) * (xr[j] - mean);
            var /= c;
            const double inv = 1.0 / std::sqrt(var + eps);
            double sum_dxhat = 0.0, sum_dxhat_xhat = 0.0;
            std::vector<double> xhat(static_cast<size_t>(c)), dxhat(static_cast<size_t>(c));
            for (int j = 0; j < c; ++j) {
                xhat[j] = (xr[j] - mean) * inv;
                dgamma[j] += gr[j] * xhat[j];
                dbeta[j] += gr[j];
                dxhat[j] = gr[j] * gi->data[j];
                sum_dxhat += dxhat[j];
                sum_dxhat_xhat += dxhat[j] * xhat[j];
            }
            for (int j = 0; j < c; ++j)
                dx[static_cast<size_t>(i) * c + j] =
                    inv * (dxhat[j] - sum_dxhat / c - xhat[j] * sum_dxhat_xhat / c);
        }
        if (xi->requires_grad) accumulate(*xi, dx.data(), dx.size());
        if (gi->requires_grad) accumulate(*gi, dgamma.data(), dgamma.size());
        if (bi->requires_grad) accumulate(*bi, dbeta.data(), dbeta.size());
    });
    return out;
}

Tensor Tape::gelu(const Tensor& x) {
    Tensor out = Tensor::zeros(x.shape());
    kernels::gelu(x.data(), out.data(), x.size());

    auto xi = x.impl(), oi = out.impl();
    record("gelu", {&x}, out, [xi, oi] {
        const auto& g = out_grad(oi);
        if (g.empty() || !xi->requires_grad) return;
        std::vector<double> tmp(g.size());
        for (size_t i = 0; i < g.size(); ++i)
            tmp[i] = g[i] * kernels::gelu_grad_scalar(xi->data[i]);
        accumulate(*xi, tmp.data(), tmp.size());
    });
    return out;
}

Tensor Tape::sin(const Tensor& x) {
    Tensor out = Tensor::zeros(x.shape());
    for (size_t i = 0; i < x.size(); ++i) out.data()[i] = std::sin(x.data()[i]);

    auto xi = x.impl(), oi = out.impl();
    record("sin", {&x}, out, [xi, oi] {
        const auto& g = out_grad(oi);
        if (g.empty() || !xi->requires_grad) return;
        std::vector<double> tmp(g.size());
        for (size_t i = 0; i < g.size(); ++i) tmp[i] = g[i] * std::cos(xi->data[i]);
        accumulate(*xi, tmp.data(), tmp.size());
    });
    return out;
}

Tensor Tape::sum(const Tensor& x) {
    double acc = 0.0;
    for (size_t i = 0; i < x.size(); ++i) acc += x.data()[i];
    Tensor out = Tensor::scalar(acc);

    auto xi = x.impl(), oi = out.impl();
    record("sum", {&x}, out, [xi, oi] {
        const auto& g = out_grad(oi);
        if (g.empty() || !xi->requires_grad) return;
        std::vector<double> tmp(xi->data.size(), g[0]);
        accumulate(*xi, tmp.data(), tmp.size());
    });
    return out;
}

Tensor Tape::normalize(const Tensor& v) {
    if (v.rank() != 1) throw DimError("normalize: expected 1-D tensor, got " + v.shape_str());
    const size_t n = v.size();
    double nrm2 = 0.0;
    for (size_t i = 0; i < n; ++i) nrm2 += v.data()[i] * v.data()[i];
    const double nrm = std::sqrt(nrm2);
    if (nrm == 0.0) throw ContractError("normalize: zero-norm vector");
    Tensor out = Tensor::zeros(v.shape());
    for (size_t i = 0; i < n; ++i) out.data()[i] = v.data()[i] / nrm;

    auto vi = v.impl(), oi = out.impl();
    record("normalize", {&v}, out, [vi, oi, nrm] {
        const auto& g = out_grad(oi);
        if (g.empty() || !vi->requires_grad) return;
        const auto& y = oi->data;
        double dot = 0.0;
        for (size_t i = 0; i < g.size(); ++i) dot += g[i] * y[i];
        std::vector<double> tmp(g.size());
        for (size_t i = 0; i < g.size(); ++i) tmp[i] = (g[i] - y[i] * dot) / nrm;
        accumulate(*vi, tmp.data(), tmp.size());
    });
    return out;
}

Tensor Tape::cosine(const Tensor& u, const Tensor& v) {
    if (u.rank() != 1 || v.rank() != 1 || u.size() != v.size())
        throw DimError("cosine: expected equal-length 1-D tensors, got " + u.shape_str() +
                       " vs " + v.shape_str());
    const size_t n = u.size();
    double dot = 0.0, nu2 = 0.0, nv2 = 0.0;
    for (size_t i = 0; i < n; ++i) {
        dot += u.data()[i] * v.data()[i];
        nu2 += u.data()[i] * u.data()[i];
        nv2 += v.data()[i] * v.data()[i];
    }
    const double nu = std::sqrt(nu2), nv = std::sqrt(nv2);
    if (nu == 0.0 || nv == 0.0) throw ContractError("cosine: zero-norm vector");
    const double raw = dot / (nu * nv);
    // clamp rounding spill so downstream ranges like [0,4] hold exactly
    const double c = std::clamp(raw, -1.0, 1.0);
    Tensor out = Tensor::scalar(c);

    auto ui = u.impl(), vi = v.impl(), oi = out.impl();
    const bool saturated = (raw != c);
    record("cosine", {&u, &v}, out, [ui, vi, oi, nu, nv, c, saturated] {
        const auto& g = out_grad(oi);
        if (g.empty() || saturated) return;
        const double go = g[0];
        const size_t n = ui->data.size();
        if (ui->requires_grad) {
            std::vector<double> tmp(n);
            for (size_t i = 0; i < n; ++i)
                tmp[i] = go * (vi->data[i] / (nu * nv) - c * ui->data[i] / (nu * nu));
            accumulate(*ui, tmp.data(), tmp.size());
        }
        if (vi->requires_grad) {
            std::vector<double> tmp(n);
            for (size_t i = 0; i < n; ++i)
                tmp[i] = go * (ui->data[i] / (nu * nv) - c * vi->data[i] / (nv * nv));
            accumulate(*vi, tmp.data(), tmp.size());
        }
    });
    return out;
}

Tensor Tape::cross_entropy(const Tensor& logits, int target) {
    if (logits.rank() != 1)
        throw DimError("cross_entropy: expected 1-D logits, got " + logits.shape_str());
    const int k = logits.shape()[0];
    if (target < 0 || target >= k)
        throw ContractError("cross_entropy: target " + std::to_string(target) +
                            " out of range for " + std::to_string(k) + " classes");
    double mx = logits.data()[0];
    for (int j = 1; j < k; ++j) mx = std::max(mx, logits.data()[j]);
    double denom = 0.0;
    for (int j = 0; j < k; ++j) denom += std::exp(logits.data()[j] - mx);
    const double lse = mx + std::log(denom);
    Tensor out = Tensor::scalar(lse - logits.data()[target]);

    auto li = logits.impl(), oi = out.impl();
    record("cross_entropy", {&logits}, out, [li, oi, target, k, mx, denom] {
        const auto& g = out_grad(oi);
        if (g.empty() || !li->requires_grad) return;
        std::vector<double> tmp(static_cast<size_t>(k));
        for (int j = 0; j < k; ++j)
            tmp[j] = g[0] * (std::exp(li->data[j] - mx) / denom - (j == target ? 1.0 : 0.0));
        accumulate(*li, tmp.data(), tmp.size());
    });
    return out;
}

// ---------------------------------------------------------------------------
// composites

Tensor Tape::linear(const Tensor& x, const Tensor& w, const Tensor& b) {
    return add_bias(matmul(x, w), b);
}

Tensor Tape::multi_head_attention(const Tensor& q_in, const Tensor& k_in,
                                  const Tensor& v_in, const AttentionWeights& w) {
    check_2d(q_in, "multi_head_attention");
    check_2d(k_in, "multi_head_attention");
    check_2d(v_in, "multi_head_attention");
    if (k_in.rows() != v_in.rows())
        throw DimError("multi_head_attention: key/value row mismatch " + k_in.shape_str() +
                       " vs " + v_in.shape_str());
    const int d_attn = w.attn_width();
    if (w.heads < 1 || d_attn % w.heads != 0)
        throw ConfigError("multi_head_attention: head count " + std::to_string(w.heads) +
                          " does not divide width " + std::to_string(d_attn));
    const int dh = d_attn / w.heads;
    const double inv_sqrt_dh = 1.0 / std::sqrt(static_cast<double>(dh));

    Tensor q = linear(q_in, w.wq, w.bq);
    Tensor k = linear(k_in, w.wk, w.bk);
    Tensor v = linear(v_in, w.wv, w.bv);

    std::vector<Tensor> head_outs;
    head_outs.reserve(static_cast<size_t>(w.heads));
    for (int h = 0; h < w.heads; ++h) {
        Tensor qh = slice_cols(q, h * dh, dh);
        Tensor kh = slice_cols(k, h * dh, dh);
        Tensor vh = slice_cols(v, h * dh, dh);
        Tensor logits = scale(matmul(qh, transpose(kh)), inv_sqrt_dh);
        Tensor attn = softmax(logits, -1);
        head_outs.push_back(matmul(attn, vh));
    }
    Tensor merged = w.heads == 1 ? head_outs[0] : concat_cols(head_outs);
    return linear(merged, w.wo, w.bo);
}

AttentionWeights make_attention_weights(Rng rng, int d_q, int d_kv, int d_attn,
                                        int d_out, int heads, bool requires_grad) {
    if (heads < 1 || d_attn % heads != 0)
        throw ConfigError("attention width " + std::to_string(d_attn) +
                          " not divisible by heads " + std::to_string(heads));
    AttentionWeights w;
    auto proj = [&](const char* name, int fan_in, int fan_out) {
        Rng r = rng.split(name);
        return Tensor::randn(r, {fan_in, fan_out}, 1.0 / std::sqrt(static_cast<double>(fan_in)),
                             requires_grad);
    };
    w.wq = proj("wq", d_q, d_attn);
    w.wk = proj("wk", d_kv, d_attn);
    w.wv = proj("wv", d_kv, d_attn);
    w.wo = proj("wo", d_attn, d_out);
    w.bq = Tensor::zeros({d_attn}, requires_grad);
    w.bk = Tensor::zeros({d_attn}, requires_grad);
    w.bv = Tensor::zeros({d_attn}, requires_grad);
    w.bo = Tensor::zeros({d_out}, requires_grad);
    w.heads = heads;
    return w;
}

// ---------------------------------------------------------------------------
// finite differences

FdReport finite_diff_check(const std::function<Tensor(Tape&)>& f,
                           std::span<const Param> params, double step) {
    auto eval = [&f]() {
        Tape t(GradMode::none);
        Tensor out = f(t);
        if (out.size() != 1)
            throw ContractError("finite_diff_check: f must return a scalar");
        return out.item();
    };

    const double v1 = eval();
    const double v2 = eval();
    if (std::memcmp(&v1, &v2, sizeof(double)) != 0)
        throw DeterminismError("finite_diff_check: two evaluations of f differ");

    Tape tape(GradMode::record);
    Tensor loss = f(tape);
    tape.backward(loss);

    FdReport report;
    for (const Param& p : params) {
        FdEntry entry;
        entry.name = p.name;
        Tensor t = p.tensor;
        const double* ga = t.grad();
        for (size_t i = 0; i < t.size(); ++i) {
            const double orig = t.data()[i];
            t.data()[i] = orig + step;
            const double fp = eval();
            t.data()[i] = orig - step;
            const double fm = eval();
            t.data()[i] = orig;
            const double gn = (fp - fm) / (2.0 * step);
            const double an = ga ? ga[i] : 0.0;
            const double rel = std::abs(an - gn) /
                               std::max({1.0, std::abs(an), std::abs(gn)});
            if (rel >= entry.max_rel_err) {
                entry.max_rel_err = rel;
                entry.worst_index = i;
                entry.analytic = an;
                entry.numeric = gn;
            }
        }
        report.max_rel_err = std::max(report.max_rel_err, entry.max_rel_err);
        report.entries.push_back(std::move(entry));
    }
    return report;
}

} // namespace cpl
