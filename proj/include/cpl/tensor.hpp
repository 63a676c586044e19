#pragma once

#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "cpl/common.hpp"
#include "cpl/rng.hpp"

namespace cpl {

// A Tensor is a cheap shared handle onto a dense double buffer plus shape.
// Copies alias the same storage; clone() deep-copies. Gradients live next to
// the data and are filled in by Tape::backward. All extents are positive and
// every op checks its outputs for NaN/Inf before returning.
class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(std::vector<int> shape, bool requires_grad = false);
    static Tensor full(std::vector<int> shape, double value, bool requires_grad = false);
    static Tensor from(std::vector<int> shape, std::vector<double> data, bool requires_grad = false);
    static Tensor scalar(double v, bool requires_grad = false);
    static Tensor randn(Rng& rng, std::vector<int> shape, double stddev, bool requires_grad = false);

    bool defined() const { return impl_ != nullptr; }
    const std::vector<int>& shape() const;
    int rank() const;
    size_t size() const;
    int rows() const;  // 2-D helpers
    int cols() const;

    double* data();
    const double* data() const;
    double& at(int i);
    double& at(int i, int j);
    double at(int i) const;
    double at(int i, int j) const;
    double item() const;  // scalar tensors only

    bool requires_grad() const;
    void set_requires_grad(bool b);

    bool has_grad() const;
    double* grad();
    const double* grad() const;
    void zero_grad();
    void ensure_grad();  // allocate zero-filled grad buffer

    Tensor clone() const;
    bool same_storage(const Tensor& other) const { return impl_ == other.impl_; }

    std::string shape_str() const;

    struct Impl;
    const std::shared_ptr<Impl>& impl() const { return impl_; }

private:
    explicit Tensor(std::shared_ptr<Impl> impl) : impl_(std::move(impl)) {}
    std::shared_ptr<Impl> impl_;
};

std::string shape_to_string(std::span<const int> shape);

// Multi-head attention parameter block: input projections for query/key/value,
// output projection, all with bias. q side maps d_q -> d_attn, k/v side maps
// d_kv -> d_attn, output maps d_attn -> d_out.
struct AttentionWeights {
    Tensor wq, bq;
    Tensor wk, bk;
    Tensor wv, bv;
    Tensor wo, bo;
    int heads = 1;

    int attn_width() const { return wq.cols(); }
    int out_width() const { return wo.cols(); }
};

AttentionWeights make_attention_weights(Rng rng, int d_q, int d_kv, int d_attn,
                                        int d_out, int heads, bool requires_grad);

enum class GradMode { none, record };

// Reverse-mode tape. Ops are methods so every call site names the tape it
// records onto; a GradMode::none tape evaluates forward only and records
// nothing, which is what concurrent inference paths use. Recording tapes are
// single-threaded by contract. backward() zeroes all touched gradients first,
// so running it twice on the same tape gives bit-identical results.
class Tape {
public:
    explicit Tape(GradMode mode = GradMode::record) : mode_(mode) {}

    GradMode mode() const { return mode_; }
    size_t node_count() const { return nodes_.size(); }
    void clear();

    // ---- primitives -------------------------------------------------------
    Tensor matmul(const Tensor& a, const Tensor& b);
    Tensor transpose(const Tensor& x);
    Tensor reshape(const Tensor& x, std::vector<int> shape);
    Tensor add(const Tensor& a, const Tensor& b);
    Tensor sub(const Tensor& a, const Tensor& b);
    Tensor mul(const Tensor& a, const Tensor& b);
    Tensor scale(const Tensor& x, double alpha);
    Tensor add_scalar(const Tensor& x, double c);
    Tensor add_bias(const Tensor& x, const Tensor& bias);  // bias[d] broadcast over rows
    Tensor mean_rows(const Tensor& x);                     // [n×d] -> [d]
    Tensor slice_rows(const Tensor& x, int begin, int count);
    Tensor slice_cols(const Tensor& x, int begin, int count);
    Tensor concat_rows(const std::vector<Tensor>& parts);
    Tensor concat_cols(const std::vector<Tensor>& parts);
    Tensor softmax(const Tensor& x, int axis);
    Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps);
    Tensor gelu(const Tensor& x);
    Tensor sin(const Tensor& x);
    Tensor sum(const Tensor& x);                           // -> scalar
    Tensor normalize(const Tensor& v);                     // v / |v|, 1-D
    Tensor cosine(const Tensor& u, const Tensor& v);       // -> scalar in [-1,1]
    Tensor cross_entropy(const Tensor& logits, int target);// -> scalar, logsumexp form

    // ---- composites -------------------------------------------------------
    Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b);
    Tensor multi_head_attention(const Tensor& q_in, const Tensor& k_in,
                                const Tensor& v_in, const AttentionWeights& w);

    // Seeds d(loss)/d(loss)=1 and replays the tape in reverse, accumulating
    // into the grad buffer of every tensor that requires grad. loss must be
    // a scalar recorded on this tape.
    void backward(const Tensor& loss);

private:
    struct Node {
        const char* op;
        std::vector<std::shared_ptr<Tensor::Impl>> inputs;
        std::shared_ptr<Tensor::Impl> out;
        std::function<void()> backward_fn;
    };

    bool recording(std::initializer_list<const Tensor*> inputs) const;
    void record(const char* op, std::initializer_list<const Tensor*> inputs,
                Tensor& out, std::function<void()> backward_fn);
    static void finalize(const char* op, Tensor& out);

    GradMode mode_;
    std::vector<Node> nodes_;
};

// Named leaf parameter, used by the optimizer, the checkpoint container and
// the finite-difference checker.
struct Param {
    std::string name;
    Tensor tensor;
};

struct FdEntry {
    std::string name;
    double max_rel_err = 0.0;
    size_t worst_index = 0;
    double analytic = 0.0;
    double numeric = 0.0;
};

struct FdReport {
    std::vector<FdEntry> entries;
    double max_rel_err = 0.0;
    bool pass(double tolerance) const { return max_rel_err < tolerance; }
};

// Central finite differences against tape gradients for every element of
// every listed parameter. f must be deterministic (checked by evaluating it
// twice) and must build its scalar result on the tape it is handed.
// Relative error per element: |ga-gn| / max(1, |ga|, |gn|).
FdReport finite_diff_check(const std::function<Tensor(Tape&)>& f,
                           std::span<const Param> params, double step);

} // namespace cpl
