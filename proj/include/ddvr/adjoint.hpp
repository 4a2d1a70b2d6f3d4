#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "ddvr/grid.hpp"

namespace ddvr::ad {

using BlockId = std::size_t;

/// Named blocks of trainable scalars with matching gradient accumulators.
class ParamStore {
public:
    BlockId add(std::string name, std::vector<std::size_t> shape, std::vector<double> init = {});

    std::size_t block_count() const { return blocks_.size(); }
    bool contains(std::string_view name) const;
    BlockId find(std::string_view name) const;

    const std::string& name(BlockId b) const { return blocks_.at(b).name; }
    const std::vector<std::size_t>& shape(BlockId b) const { return blocks_.at(b).shape; }

    std::span<double> value(BlockId b) { return blocks_.at(b).value; }
    std::span<const double> value(BlockId b) const { return blocks_.at(b).value; }
    std::span<double> grad(BlockId b) { return blocks_.at(b).grad; }
    std::span<const double> grad(BlockId b) const { return blocks_.at(b).grad; }

    void zero_grad();
    std::size_t parameter_count() const;

    /// Copies values from `other`, which must have identical block names and shapes.
    void assign_values(const ParamStore& other);

private:
    struct Block {
        std::string name;
        std::vector<std::size_t> shape;
        std::vector<double> value;
        std::vector<double> grad;
    };
    std::vector<Block> blocks_;
};

struct Var {
    static constexpr std::uint32_t invalid = 0xFFFFFFFFu;
    std::uint32_t id = invalid;
    bool valid() const { return id != invalid; }
};

/// Reverse-mode tape over vector-valued nodes.
///
/// Records are appended in evaluation order, so inputs always precede their
/// consumers. backward() walks the records once in reverse. Leaves created
/// from external memory add their adjoints into a caller-provided sink at the
/// end of backward(); intermediate adjoints live only inside the tape.
///
/// Binary elementwise ops accept equal sizes or a size-1 operand.
class Tape {
public:
    using BackwardFn = std::function<void(Tape&, Var self)>;

    Var constant(std::span<const double> values);
    Var constant(double v) { return constant(std::span<const double>(&v, 1)); }
    /// External leaf; `values` must outlive the tape. An empty sink marks a constant.
    Var leaf(std::span<const double> values, std::span<double> grad_sink = {});
    Var param(ParamStore& store, BlockId b) { return leaf(store.value(b), store.grad(b)); }

    Var add(Var a, Var b);
    Var sub(Var a, Var b);
    Var mul(Var a, Var b);
    Var div(Var a, Var b);
    Var neg(Var a);
    Var exp(Var a);
    Var log(Var a);
    Var relu(Var a);
    Var sigmoid(Var a);
    Var clamp01(Var a);
    Var scale(Var a, double c);
    /// a + t * (b - a); t may be size 1.
    Var lerp(Var a, Var b, Var t);
    Var dot(Var a, Var b);
    Var sum(Var a);
    /// y = W x + b for each of the size(x)/in rows of x. W is out x in, row-major.
    Var affine(Var w, Var x, Var b, std::size_t out, std::size_t in);
    /// 3x3x3 convolution, stride 1, zero padding 1. Input and output are
    /// channel-innermost over `dims`; weights are [c_out][c_in][kz][ky][kx].
    Var conv3x3x3(Var input, Var w, Var b, grid::Dims3 dims, std::size_t c_in, std::size_t c_out);
    /// Rows of `stride` values; keeps channels [first, first + count) of every row.
    Var select_channels(Var a, std::size_t stride, std::size_t first, std::size_t count);

    /// Coarse-grained op with a hand-written adjoint. `backward` reads
    /// adjoint(self) and adds into adjoint(inputs).
    Var custom(std::span<const Var> inputs, std::vector<double> output, BackwardFn backward);

    std::size_t size(Var v) const;
    std::span<const double> value(Var v) const;
    double scalar(Var v) const;
    /// Only meaningful inside backward().
    std::span<double> adjoint(Var v);

    /// Seeds the scalar output and propagates adjoints to every leaf sink.
    void backward(Var output, double seed = 1.0);

    void clear();
    std::size_t record_count() const { return nodes_.size(); }

private:
    enum class Op : std::uint8_t {
        leaf, constant, add, sub, mul, div, neg, exp, log, relu, sigmoid, clamp01, scale,
        lerp, dot, sum, affine, conv, select, custom
    };
    struct Node {
        Op op;
        std::uint32_t a = Var::invalid, b = Var::invalid, c = Var::invalid;
        std::size_t offset = 0;
        std::size_t size = 0;
        std::size_t aux = 0;
        const double* external = nullptr;
        double* sink = nullptr;
    };

    Var push(Node n, std::size_t size);
    const Node& node(Var v) const;
    const double* val(std::uint32_t id) const;
    double* adj(std::uint32_t id) { return adj_.data() + nodes_[id].offset; }
    Var binary(Op op, Var a, Var b);
    void backward_node(std::uint32_t id);

    std::vector<Node> nodes_;
    std::vector<double> vals_;
    std::vector<double> adj_;
    std::vector<double> scalars_;
    std::vector<std::size_t> aux_;
    std::vector<BackwardFn> customs_;
    bool in_backward_ = false;
};

namespace kernels {

void affine_forward(std::span<const double> w, std::span<const double> x, std::span<const double> b,
                    std::size_t out, std::size_t in, std::span<double> y);
/// Accumulates dW, dx, db (any may be empty to skip).
void affine_backward(std::span<const double> w, std::span<const double> x, std::span<const double> dy,
                     std::size_t out, std::size_t in, std::span<double> dw, std::span<double> dx,
                     std::span<double> db);

void conv3x3x3_forward(std::span<const double> input, std::span<const double> w, std::span<const double> b,
                       grid::Dims3 dims, std::size_t c_in, std::size_t c_out, std::span<double> out);
void conv3x3x3_backward(std::span<const double> input, std::span<const double> w, std::span<const double> dout,
                        grid::Dims3 dims, std::size_t c_in, std::size_t c_out, std::span<double> dinput,
                        std::span<double> dw, std::span<double> db);

inline double sigmoid(double x)
{
    if (x >= 0.0)
        return 1.0 / (1.0 + std::exp(-x));
    const double e = std::exp(x);
    return e / (1.0 + e);
}

} // namespace kernels

// -- verification -------------------------------------------------------------

struct FdReport {
    double max_rel_error = 0.0;
    std::size_t checked = 0;
    /// "block[index]" entries skipped because one-sided differences disagree (a kink).
    std::vector<std::string> excluded;
    std::string worst;
    double worst_tape = 0.0;
    double worst_fd = 0.0;
};

/// Compares tape gradients against central differences.
///
/// `f` evaluates the scalar objective and must accumulate its gradient into
/// the store (it is called with zeroed gradients). Relative error per scalar is
/// |g_tape - g_fd| / max(floor, |g_tape| + |g_fd|); `floor` keeps gradients at
/// the level of the differencing roundoff from dominating. An empty `blocks` checks every block.
FdReport finite_diff_check(const std::function<double(ParamStore&)>& f, ParamStore& store, double eps = 1e-5,
                           std::span<const BlockId> blocks = {}, double floor = 1e-12);

} // namespace ddvr::ad
