#include "ddvr/adjoint.hpp"

#include <algorithm>
#include <cmath>

#include "ddvr/error.hpp"

namespace ddvr::ad {

// -- ParamStore ---------------------------------------------------------------

BlockId ParamStore::add(std::string name, std::vector<std::size_t> shape, std::vector<double> init)
{
    if (contains(name))
        throw ConfigError("duplicate parameter block '" + name + "'");
    std::size_t n = 1;
    for (auto d : shape)
        n *= d;
    if (init.empty())
        init.assign(n, 0.0);
    if (init.size() != n)
        throw ShapeError("initial values for '" + name + "' do not match its shape");
    Block b{std::move(name), std::move(shape), std::move(init), std::vector<double>(n, 0.0)};
    blocks_.push_back(std::move(b));
    return blocks_.size() - 1;
}

bool ParamStore::contains(std::string_view name) const
{
    return std::any_of(blocks_.begin(), blocks_.end(), [&](const Block& b) { return b.name == name; });
}

BlockId ParamStore::find(std::string_view name) const
{
    for (std::size_t i = 0; i < blocks_.size(); ++i)
        if (blocks_[i].name == name)
            return i;
    throw ConfigError("no parameter block named '" + std::string(name) + "'");
}

void ParamStore::zero_grad()
{
    for (auto& b : blocks_)
        std::fill(b.grad.begin(), b.grad.end(), 0.0);
}

std::size_t ParamStore::parameter_count() const
{
    std::size_t n = 0;
    for (const auto& b : blocks_)
        n += b.value.size();
    return n;
}

void ParamStore::assign_values(const ParamStore& other)
{
    if (other.blocks_.size() != blocks_.size())
        throw ShapeError("parameter stores differ in block count");
    for (std::size_t i = 0; i < blocks_.size(); ++i) {
        if (blocks_[i].name != other.blocks_[i].name || blocks_[i].shape != other.blocks_[i].shape)
            throw ShapeError("parameter block '" + other.blocks_[i].name + "' does not match");
        blocks_[i].value = other.blocks_[i].value;
    }
}

// -- Tape ---------------------------------------------------------------------

Var Tape::push(Node n, std::size_t size)
{
    if (in_backward_)
        throw Error("cannot record on a tape during backward");
    n.offset = vals_.size();
    n.size = size;
    vals_.resize(vals_.size() + size);
    nodes_.push_back(n);
    return Var{static_cast<std::uint32_t>(nodes_.size() - 1)};
}

const Tape::Node& Tape::node(Var v) const
{
    if (!v.valid() || v.id >= nodes_.size())
        throw Error("variable does not belong to this tape");
    return nodes_[v.id];
}

const double* Tape::val(std::uint32_t id) const
{
    const Node& n = nodes_[id];
    return n.external ? n.external : vals_.data() + n.offset;
}

std::size_t Tape::size(Var v) const { return node(v).size; }

std::span<const double> Tape::value(Var v) const
{
    const Node& n = node(v);
    return {val(v.id), n.size};
}

double Tape::scalar(Var v) const
{
    if (size(v) != 1)
        throw ShapeError("scalar() on a non-scalar variable");
    return value(v)[0];
}

std::span<double> Tape::adjoint(Var v)
{
    const Node& n = node(v);
    if (adj_.size() < vals_.size())
        throw Error("adjoints are only available during backward");
    return {adj_.data() + n.offset, n.size};
}

Var Tape::constant(std::span<const double> values)
{
    Node n{Op::constant};
    Var v = push(n, values.size());
    std::copy(values.begin(), values.end(), vals_.begin() + static_cast<std::ptrdiff_t>(nodes_[v.id].offset));
    return v;
}

Var Tape::leaf(std::span<const double> values, std::span<double> grad_sink)
{
    if (!grad_sink.empty() && grad_sink.size() != values.size())
        throw ShapeError("leaf gradient sink size does not match its values");
    Node n{Op::leaf};
    n.external = values.data();
    n.sink = grad_sink.empty() ? nullptr : grad_sink.data();
    return push(n, values.size());
}

Var Tape::binary(Op op, Var a, Var b)
{
    const std::size_t na = size(a), nb = size(b);
    if (na != nb && na != 1 && nb != 1)
        throw ShapeError("operand sizes " + std::to_string(na) + " and " + std::to_string(nb) + " are incompatible");
    const std::size_t n = std::max(na, nb);
    Node nd{op, a.id, b.id};
    Var out = push(nd, n);
    const double* x = val(a.id);
    const double* y = val(b.id);
    double* z = vals_.data() + nodes_[out.id].offset;
    const std::size_t sa = na == 1 ? 0 : 1, sb = nb == 1 ? 0 : 1;
    for (std::size_t i = 0; i < n; ++i) {
        const double u = x[i * sa], w = y[i * sb];
        switch (op) {
        case Op::add: z[i] = u + w; break;
        case Op::sub: z[i] = u - w; break;
        case Op::mul: z[i] = u * w; break;
        case Op::div: z[i] = u / w; break;
        default: break;
        }
    }
    return out;
}

Var Tape::add(Var a, Var b) { return binary(Op::add, a, b); }
Var Tape::sub(Var a, Var b) { return binary(Op::sub, a, b); }
Var Tape::mul(Var a, Var b) { return binary(Op::mul, a, b); }
Var Tape::div(Var a, Var b) { return binary(Op::div, a, b); }

namespace {

template <class F>
void map_values(const double* x, double* y, std::size_t n, F f)
{
    for (std::size_t i = 0; i < n; ++i)
        y[i] = f(x[i]);
}

} // namespace

#define DDVR_UNARY(NAME, OP, EXPR)                                                     \
    Var Tape::NAME(Var a)                                                              \
    {                                                                                  \
        const std::size_t n = size(a);                                                 \
        Var out = push(Node{Op::OP, a.id}, n);                                         \
        map_values(val(a.id), vals_.data() + nodes_[out.id].offset, n,                 \
                   [](double x) { return EXPR; });                                     \
        return out;                                                                    \
    }

DDVR_UNARY(neg, neg, -x)
DDVR_UNARY(exp, exp, std::exp(x))
DDVR_UNARY(log, log, std::log(x))
DDVR_UNARY(relu, relu, x > 0.0 ? x : 0.0)
DDVR_UNARY(sigmoid, sigmoid, kernels::sigmoid(x))
DDVR_UNARY(clamp01, clamp01, std::clamp(x, 0.0, 1.0))

#undef DDVR_UNARY

Var Tape::scale(Var a, double c)
{
    const std::size_t n = size(a);
    Node nd{Op::scale, a.id};
    nd.aux = scalars_.size();
    scalars_.push_back(c);
    Var out = push(nd, n);
    map_values(val(a.id), vals_.data() + nodes_[out.id].offset, n, [c](double x) { return c * x; });
    return out;
}

Var Tape::lerp(Var a, Var b, Var t)
{
    const std::size_t n = size(a);
    if (size(b) != n)
        throw ShapeError("lerp endpoints differ in size");
    const std::size_t nt = size(t);
    if (nt != n && nt != 1)
        throw ShapeError("lerp weight must be scalar or match the endpoints");
    Var out = push(Node{Op::lerp, a.id, b.id, t.id}, n);
    const double *x = val(a.id), *y = val(b.id), *w = val(t.id);
    double* z = vals_.data() + nodes_[out.id].offset;
    for (std::size_t i = 0; i < n; ++i) {
        const double ti = w[nt == 1 ? 0 : i];
        z[i] = x[i] + ti * (y[i] - x[i]);
    }
    return out;
}

Var Tape::dot(Var a, Var b)
{
    const std::size_t n = size(a);
    if (size(b) != n)
        throw ShapeError("dot operands differ in size");
    Var out = push(Node{Op::dot, a.id, b.id}, 1);
    const double *x = val(a.id), *y = val(b.id);
    double s = 0.0;
    for (std::size_t i = 0; i < n; ++i)
        s += x[i] * y[i];
    vals_[nodes_[out.id].offset] = s;
    return out;
}

Var Tape::sum(Var a)
{
    const std::size_t n = size(a);
    Var out = push(Node{Op::sum, a.id}, 1);
    const double* x = val(a.id);
    double s = 0.0;
    for (std::size_t i = 0; i < n; ++i)
        s += x[i];
    vals_[nodes_[out.id].offset] = s;
    return out;
}

Var Tape::affine(Var w, Var x, Var b, std::size_t out, std::size_t in)
{
    if (size(w) != out * in)
        throw ShapeError("affine weight size does not match out x in");
    if (size(b) != out)
        throw ShapeError("affine bias size does not match out");
    if (in == 0 || size(x) % in != 0)
        throw ShapeError("affine input size is not a multiple of the input width");
    const std::size_t rows = size(x) / in;
    Node nd{Op::affine, w.id, x.id, b.id};
    nd.aux = aux_.size();
    aux_.insert(aux_.end(), {out, in});
    Var y = push(nd, rows * out);
    const double *W = val(w.id), *X = val(x.id), *B = val(b.id);
    double* Y = vals_.data() + nodes_[y.id].offset;
    for (std::size_t r = 0; r < rows; ++r)
        kernels::affine_forward({W, out * in}, {X + r * in, in}, {B, out}, out, in, {Y + r * out, out});
    return y;
}

Var Tape::conv3x3x3(Var input, Var w, Var b, grid::Dims3 dims, std::size_t c_in, std::size_t c_out)
{
    if (size(input) != dims.count() * c_in)
        throw ShapeError("conv input size does not match dims x c_in");
    if (size(w) != c_out * c_in * 27)
        throw ShapeError("conv weight size must be c_out x c_in x 27");
    if (size(b) != c_out)
        throw ShapeError("conv bias size must be c_out");
    Node nd{Op::conv, input.id, w.id, b.id};
    nd.aux = aux_.size();
    aux_.insert(aux_.end(), {dims.nx, dims.ny, dims.nz, c_in, c_out});
    Var out = push(nd, dims.count() * c_out);
    kernels::conv3x3x3_forward(value(input), value(w), value(b), dims, c_in, c_out,
                               {vals_.data() + nodes_[out.id].offset, dims.count() * c_out});
    return out;
}

Var Tape::select_channels(Var a, std::size_t stride, std::size_t first, std::size_t count)
{
    if (stride == 0 || size(a) % stride != 0 || first + count > stride)
        throw ShapeError("select_channels range is outside the row stride");
    const std::size_t rows = size(a) / stride;
    Node nd{Op::select, a.id};
    nd.aux = aux_.size();
    aux_.insert(aux_.end(), {stride, first, count});
    Var out = push(nd, rows * count);
    const double* x = val(a.id);
    double* y = vals_.data() + nodes_[out.id].offset;
    for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < count; ++c)
            y[r * count + c] = x[r * stride + first + c];
    return out;
}

Var Tape::custom(std::span<const Var> inputs, std::vector<double> output, BackwardFn backward)
{
    for (Var v : inputs)
        (void)node(v);
    Node nd{Op::custom};
    nd.aux = customs_.size();
    customs_.push_back(std::move(backward));
    Var out = push(nd, output.size());
    std::copy(output.begin(), output.end(), vals_.begin() + static_cast<std::ptrdiff_t>(nodes_[out.id].offset));
    return out;
}

void Tape::clear()
{
    nodes_.clear();
    vals_.clear();
    adj_.clear();
    scalars_.clear();
    aux_.clear();
    customs_.clear();
}

void Tape::backward(Var output, double seed)
{
    if (nodes_.empty())
        throw Error("backward called before any forward computation was recorded");
    if (size(output) != 1)
        throw ShapeError("backward needs a scalar output");
    adj_.assign(vals_.size(), 0.0);
    adj_[nodes_[output.id].offset] = seed;
    in_backward_ = true;
    try {
        for (std::uint32_t id = output.id + 1; id-- > 0;)
            backward_node(id);
    } catch (...) {
        in_backward_ = false;
        throw;
    }
    in_backward_ = false;
    for (const Node& n : nodes_) {
        if (n.op != Op::leaf || !n.sink)
            continue;
        const double* g = adj_.data() + n.offset;
        for (std::size_t i = 0; i < n.size; ++i)
            n.sink[i] += g[i];
    }
}

void Tape::backward_node(std::uint32_t id)
{
    const Node& n = nodes_[id];
    const double* dy = adj_.data() + n.offset;
    const double* y = vals_.data() + n.offset;
    switch (n.op) {
    case Op::leaf:
    case Op::constant: return;
    case Op::add:
    case Op::sub:
    case Op::mul:
    case Op::div: {
        const std::size_t na = nodes_[n.a].size, nb = nodes_[n.b].size;
        const std::size_t sa = na == 1 ? 0 : 1, sb = nb == 1 ? 0 : 1;
        const double *x = val(n.a), *w = val(n.b);
        double *dx = adj(n.a), *dw = adj(n.b);
        for (std::size_t i = 0; i < n.size; ++i) {
            const double g = dy[i];
            switch (n.op) {
            case Op::add:
                dx[i * sa] += g;
                dw[i * sb] += g;
                break;
            case Op::sub:
                dx[i * sa] += g;
                dw[i * sb] -= g;
                break;
            case Op::mul:
                dx[i * sa] += g * w[i * sb];
                dw[i * sb] += g * x[i * sa];
                break;
            case Op::div: {
                const double q = w[i * sb];
                dx[i * sa] += g / q;
                dw[i * sb] -= g * x[i * sa] / (q * q);
                break;
            }
            default: break;
            }
        }
        return;
    }
    case Op::neg: {
        double* dx = adj(n.a);
        for (std::size_t i = 0; i < n.size; ++i)
            dx[i] -= dy[i];
        return;
    }
    case Op::exp: {
        double* dx = adj(n.a);
        for (std::size_t i = 0; i < n.size; ++i)
            dx[i] += dy[i] * y[i];
        return;
    }
    case Op::log: {
        const double* x = val(n.a);
        double* dx = adj(n.a);
        for (std::size_t i = 0; i < n.size; ++i)
            dx[i] += dy[i] / x[i];
        return;
    }
    case Op::relu: {
        const double* x = val(n.a);
        double* dx = adj(n.a);
        for (std::size_t i = 0; i < n.size; ++i)
            if (x[i] > 0.0)
                dx[i] += dy[i];
        return;
    }
    case Op::sigmoid: {
        double* dx = adj(n.a);
        for (std::size_t i = 0; i < n.size; ++i)
            dx[i] += dy[i] * y[i] * (1.0 - y[i]);
        return;
    }
    case Op::clamp01: {
        const double* x = val(n.a);
        double* dx = adj(n.a);
        for (std::size_t i = 0; i < n.size; ++i)
            if (x[i] >= 0.0 && x[i] <= 1.0)
                dx[i] += dy[i];
        return;
    }
    case Op::scale: {
        const double c = scalars_[n.aux];
        double* dx = adj(n.a);
        for (std::size_t i = 0; i < n.size; ++i)
            dx[i] += c * dy[i];
        return;
    }
    case Op::lerp: {
        const std::size_t nt = nodes_[n.c].size;
        const double *x = val(n.a), *w = val(n.b), *t = val(n.c);
        double *dx = adj(n.a), *dw = adj(n.b), *dt = adj(n.c);
        for (std::size_t i = 0; i < n.size; ++i) {
            const std::size_t k = nt == 1 ? 0 : i;
            dx[i] += dy[i] * (1.0 - t[k]);
            dw[i] += dy[i] * t[k];
            dt[k] += dy[i] * (w[i] - x[i]);
        }
        return;
    }
    case Op::dot: {
        const std::size_t m = nodes_[n.a].size;
        const double *x = val(n.a), *w = val(n.b);
        double *dx = adj(n.a), *dw = adj(n.b);
        for (std::size_t i = 0; i < m; ++i) {
            dx[i] += dy[0] * w[i];
            dw[i] += dy[0] * x[i];
        }
        return;
    }
    case Op::sum: {
        const std::size_t m = nodes_[n.a].size;
        double* dx = adj(n.a);
        for (std::size_t i = 0; i < m; ++i)
            dx[i] += dy[0];
        return;
    }
    case Op::affine: {
        const std::size_t out = aux_[n.aux], in = aux_[n.aux + 1];
        const std::size_t rows = n.size / out;
        const double *W = val(n.a), *X = val(n.b);
        double *dW = adj(n.a), *dX = adj(n.b), *dB = adj(n.c);
        for (std::size_t r = 0; r < rows; ++r)
            kernels::affine_backward({W, out * in}, {X + r * in, in}, {dy + r * out, out}, out, in,
                                     {dW, out * in}, {dX + r * in, in}, {dB, out});
        return;
    }
    case Op::conv: {
        const grid::Dims3 dims{aux_[n.aux], aux_[n.aux + 1], aux_[n.aux + 2]};
        const std::size_t c_in = aux_[n.aux + 3], c_out = aux_[n.aux + 4];
        const std::size_t vox = dims.count();
        kernels::conv3x3x3_backward({val(n.a), vox * c_in}, {val(n.b), c_out * c_in * 27}, {dy, n.size}, dims,
                                    c_in, c_out, {adj(n.a), vox * c_in}, {adj(n.b), c_out * c_in * 27},
                                    {adj(n.c), c_out});
        return;
    }
    case Op::select: {
        const std::size_t stride = aux_[n.aux], first = aux_[n.aux + 1], count = aux_[n.aux + 2];
        const std::size_t rows = n.size / count;
        double* dx = adj(n.a);
        for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t c = 0; c < count; ++c)
                dx[r * stride + first + c] += dy[r * count + c];
        return;
    }
    case Op::custom: customs_[n.aux](*this, Var{id}); return;
    }
}

// -- kernels ------------------------------------------------------------------

namespace kernels {

void affine_forward(std::span<const double> w, std::span<const double> x, std::span<const double> b,
                    std::size_t out, std::size_t in, std::span<double> y)
{
    for (std::size_t o = 0; o < out; ++o) {
        const double* row = w.data() + o * in;
        double s = b[o];
        for (std::size_t i = 0; i < in; ++i)
            s += row[i] * x[i];
        y[o] = s;
    }
}

void affine_backward(std::span<const double> w, std::span<const double> x, std::span<const double> dy,
                     std::size_t out, std::size_t in, std::span<double> dw, std::span<double> dx,
                     std::span<double> db)
{
    for (std::size_t o = 0; o < out; ++o) {
        const double g = dy[o];
        if (g == 0.0)
            continue;
        if (!db.empty())
            db[o] += g;
        if (!dw.empty()) {
            double* drow = dw.data() + o * in;
            for (std::size_t i = 0; i < in; ++i)
                drow[i] += g * x[i];
        }
        if (!dx.empty()) {
            const double* row = w.data() + o * in;
            for (std::size_t i = 0; i < in; ++i)
                dx[i] += g * row[i];
        }
    }
}

namespace {

// Visits the in-bounds taps of every output voxel: fn(out_voxel, in_voxel, tap).
template <class F>
void for_each_tap(grid::Dims3 d, F&& fn)
{
    const auto nx = static_cast<std::ptrdiff_t>(d.nx), ny = static_cast<std::ptrdiff_t>(d.ny),
               nz = static_cast<std::ptrdiff_t>(d.nz);
    for (std::ptrdiff_t z = 0; z < nz; ++z)
        for (std::ptrdiff_t y = 0; y < ny; ++y)
            for (std::ptrdiff_t x = 0; x < nx; ++x) {
                const std::size_t v = static_cast<std::size_t>((z * ny + y) * nx + x);
                for (std::ptrdiff_t kz = 0; kz < 3; ++kz) {
                    const std::ptrdiff_t zz = z + kz - 1;
                    if (zz < 0 || zz >= nz)
                        continue;
                    for (std::ptrdiff_t ky = 0; ky < 3; ++ky) {
                        const std::ptrdiff_t yy = y + ky - 1;
                        if (yy < 0 || yy >= ny)
                            continue;
                        for (std::ptrdiff_t kx = 0; kx < 3; ++kx) {
                            const std::ptrdiff_t xx = x + kx - 1;
                            if (xx < 0 || xx >= nx)
                                continue;
                            fn(v, static_cast<std::size_t>((zz * ny + yy) * nx + xx),
                               static_cast<std::size_t>((kz * 3 + ky) * 3 + kx));
                        }
                    }
                }
            }
}

} // namespace

void conv3x3x3_forward(std::span<const double> input, std::span<const double> w, std::span<const double> b,
                       grid::Dims3 dims, std::size_t c_in, std::size_t c_out, std::span<double> out)
{
    for (std::size_t v = 0; v < dims.count(); ++v)
        for (std::size_t co = 0; co < c_out; ++co)
            out[v * c_out + co] = b[co];
    for_each_tap(dims, [&](std::size_t v, std::size_t nb, std::size_t tap) {
        const double* src = input.data() + nb * c_in;
        double* dst = out.data() + v * c_out;
        for (std::size_t co = 0; co < c_out; ++co) {
            const double* wk = w.data() + co * c_in * 27 + tap;
            double s = 0.0;
            for (std::size_t ci = 0; ci < c_in; ++ci)
                s += wk[ci * 27] * src[ci];
            dst[co] += s;
        }
    });
}

void conv3x3x3_backward(std::span<const double> input, std::span<const double> w, std::span<const double> dout,
                        grid::Dims3 dims, std::size_t c_in, std::size_t c_out, std::span<double> dinput,
                        std::span<double> dw, std::span<double> db)
{
    for (std::size_t v = 0; v < dims.count(); ++v)
        for (std::size_t co = 0; co < c_out; ++co)
            db[co] += dout[v * c_out + co];
    for_each_tap(dims, [&](std::size_t v, std::size_t nb, std::size_t tap) {
        const double* src = input.data() + nb * c_in;
        double* dsrc = dinput.data() + nb * c_in;
        const double* g = dout.data() + v * c_out;
        for (std::size_t co = 0; co < c_out; ++co) {
            const double gc = g[co];
            if (gc == 0.0)
                continue;
            const std::size_t base = co * c_in * 27 + tap;
            for (std::size_t ci = 0; ci < c_in; ++ci) {
                dw[base + ci * 27] += gc * src[ci];
                dsrc[ci] += gc * w[base + ci * 27];
            }
        }
    });
}

} // namespace kernels

// -- finite differences ---------------------------------------------------------

FdReport finite_diff_check(const std::function<double(ParamStore&)>& f, ParamStore& store, double eps,
                           std::span<const BlockId> blocks, double floor)
{
    std::vector<BlockId> ids(blocks.begin(), blocks.end());
    if (ids.empty())
        for (BlockId b = 0; b < store.block_count(); ++b)
            ids.push_back(b);

    store.zero_grad();
    const double f0 = f(store);
    std::vector<std::vector<double>> tape_grad;
    for (BlockId b : ids) {
        auto g = store.grad(b);
        tape_grad.emplace_back(g.begin(), g.end());
    }

    FdReport report;
    for (std::size_t bi = 0; bi < ids.size(); ++bi) {
        const BlockId b = ids[bi];
        auto values = store.value(b);
        for (std::size_t i = 0; i < values.size(); ++i) {
            const double x0 = values[i];
            values[i] = x0 + eps;
            store.zero_grad();
            const double fp = f(store);
            values[i] = x0 - eps;
            store.zero_grad();
            const double fm = f(store);
            values[i] = x0;

            const double fd = (fp - fm) / (2.0 * eps);
            const double gp = (fp - f0) / eps, gm = (f0 - fm) / eps;
            const std::string tag = store.name(b) + "[" + std::to_string(i) + "]";
            if (std::abs(gp - gm) > 1e-3 * std::max(floor, std::abs(gp) + std::abs(gm))) {
                report.excluded.push_back(tag);
                continue;
            }
            const double g = tape_grad[bi][i];
            const double rel = std::abs(g - fd) / std::max(floor, std::abs(g) + std::abs(fd));
            ++report.checked;
            if (rel >= report.max_rel_error) {
                report.max_rel_error = rel;
                report.worst = tag;
                report.worst_tape = g;
                report.worst_fd = fd;
            }
        }
    }
    store.zero_grad();
    return report;
}

} // namespace ddvr::ad
