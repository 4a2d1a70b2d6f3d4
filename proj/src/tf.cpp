#include "ddvr/tf.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <random>

#include "ddvr/error.hpp"

namespace ddvr::tf {

using nlohmann::json;
namespace fs = std::filesystem;

namespace {

constexpr int kFileVersion = 1;

double logit(double p) { return std::log(p / (1.0 - p)); }

} // namespace

// -- lookup -------------------------------------------------------------------

LookupTF LookupTF::create(ad::ParamStore& store, double kappa_max, const std::string& prefix)
{
    std::vector<double> rgb(kLookupBins * 3), k(kLookupBins, logit(0.05));
    for (std::size_t i = 0; i < kLookupBins; ++i)
        for (int c = 0; c < 3; ++c)
            rgb[i * 3 + c] = static_cast<double>(i) / 255.0;
    LookupTF tf;
    tf.kappa_max = kappa_max;
    tf.color = store.add(prefix + ".color", {kLookupBins, 3}, std::move(rgb));
    tf.kappa = store.add(prefix + ".kappa", {kLookupBins}, std::move(k));
    return tf;
}

LookupTF LookupTF::from_mapped(ad::ParamStore& store, std::span<const double> rgb, std::span<const double> kappa,
                               double kappa_max, const std::string& prefix)
{
    if (rgb.size() != kLookupBins * 3 || kappa.size() != kLookupBins)
        throw ShapeError("lookup table needs 256 rgb triples and 256 kappa values");
    std::vector<double> k(kLookupBins);
    for (std::size_t i = 0; i < kLookupBins; ++i) {
        const double p = kappa[i] / kappa_max;
        if (p < 0.0 || p >= 1.0)
            throw ConfigError("lookup kappa must lie in [0, kappa_max)");
        k[i] = p == 0.0 ? kTransparentRaw : std::max(kTransparentRaw, logit(p));
    }
    LookupTF tf;
    tf.kappa_max = kappa_max;
    tf.color = store.add(prefix + ".color", {kLookupBins, 3}, std::vector<double>(rgb.begin(), rgb.end()));
    tf.kappa = store.add(prefix + ".kappa", {kLookupBins}, std::move(k));
    return tf;
}

LookupTF::Table LookupTF::mapped(const ad::ParamStore& store) const
{
    Table t;
    const auto c = store.value(color);
    const auto k = store.value(kappa);
    t.color.resize(c.size());
    t.kappa.resize(k.size());
    for (std::size_t i = 0; i < c.size(); ++i)
        t.color[i] = std::clamp(c[i], 0.0, 1.0);
    for (std::size_t i = 0; i < k.size(); ++i)
        t.kappa[i] = kappa_max * ad::kernels::sigmoid(k[i]);
    return t;
}

void LookupTF::project(ad::ParamStore& store) const
{
    for (auto& v : store.value(color))
        v = std::clamp(v, 0.0, 1.0);
}

BinPosition lookup_position(double intensity)
{
    const double u = std::clamp(intensity, 0.0, 1.0) * static_cast<double>(kLookupBins - 1);
    std::size_t lo = static_cast<std::size_t>(u);
    if (lo > kLookupBins - 2)
        lo = kLookupBins - 2;
    return {lo, u - static_cast<double>(lo)};
}

Optical lookup_eval(const LookupTF::Table& table, double intensity)
{
    const auto [lo, f] = lookup_position(intensity);
    Optical o;
    for (int c = 0; c < 3; ++c)
        o.rgb[c] = (1.0 - f) * table.color[lo * 3 + c] + f * table.color[(lo + 1) * 3 + c];
    o.kappa = (1.0 - f) * table.kappa[lo] + f * table.kappa[lo + 1];
    return o;
}

Optical lookup_eval(const LookupTF& tf, const ad::ParamStore& store, double intensity)
{
    return lookup_eval(tf.mapped(store), intensity);
}

// -- MLP ----------------------------------------------------------------------

MlpTF MlpTF::create(ad::ParamStore& store, const std::string& prefix, std::size_t n_in,
                    std::vector<std::size_t> hidden, std::size_t n_out, Head head, double kappa_max,
                    std::uint64_t seed)
{
    if (n_in == 0 || n_out == 0)
        throw ShapeError("MLP needs at least one input and one output");
    if (head == Head::kappa && n_out != 1)
        throw ShapeError("a kappa-head MLP has exactly one output");
    MlpTF m;
    m.n_in = n_in;
    m.hidden = std::move(hidden);
    m.n_out = n_out;
    m.head = head;
    m.kappa_max = kappa_max;
    std::mt19937_64 rng(seed);
    for (std::size_t l = 0; l <= m.hidden.size(); ++l) {
        const std::size_t in = m.layer_in(l), out = m.layer_out(l);
        const double bound = 1.0 / std::sqrt(static_cast<double>(in));
        std::uniform_real_distribution<double> u(-bound, bound);
        std::vector<double> w(out * in), b(out, 0.0);
        for (auto& v : w)
            v = u(rng);
        if (l == m.hidden.size())
            for (std::size_t o = 0; o < out; ++o)
                if (m.scales_output(o))
                    b[o] = logit(0.05);
        m.weights.push_back(store.add(prefix + ".w" + std::to_string(l), {out, in}, std::move(w)));
        m.biases.push_back(store.add(prefix + ".b" + std::to_string(l), {out}, std::move(b)));
    }
    return m;
}

std::size_t MlpTF::parameter_count() const
{
    std::size_t n = 0;
    for (std::size_t l = 0; l < layer_count(); ++l)
        n += layer_out(l) * layer_in(l) + layer_out(l);
    return n;
}

void MlpTF::forward(const ad::ParamStore& store, std::span<const double> in, Workspace& ws) const
{
    if (in.size() != n_in)
        throw ShapeError("MLP expects " + std::to_string(n_in) + " inputs, got " + std::to_string(in.size()));
    const std::size_t L = layer_count();
    ws.act.resize(L + 1);
    ws.act[0].assign(in.begin(), in.end());
    for (std::size_t l = 0; l < L; ++l) {
        auto& y = ws.act[l + 1];
        y.resize(layer_out(l));
        ad::kernels::affine_forward(store.value(weights[l]), ws.act[l], store.value(biases[l]), layer_out(l),
                                    layer_in(l), y);
        if (l + 1 < L) {
            for (auto& v : y)
                v = v > 0.0 ? v : 0.0;
        } else {
            for (std::size_t o = 0; o < y.size(); ++o) {
                y[o] = ad::kernels::sigmoid(y[o]);
                if (scales_output(o))
                    y[o] *= kappa_max;
            }
        }
    }
}

void MlpTF::backward(const ad::ParamStore& store, Workspace& ws, std::span<const double> d_out,
                     std::span<double> grad, std::span<double> d_in) const
{
    const std::size_t L = layer_count();
    ws.delta.resize(L + 1);
    // delta[l+1] = d(loss)/d(pre-activation of layer l)
    auto& top = ws.delta[L];
    top.resize(n_out);
    for (std::size_t o = 0; o < n_out; ++o) {
        double y = ws.act[L][o];
        double g = d_out[o];
        if (scales_output(o)) {
            y /= kappa_max;
            g *= kappa_max;
        }
        top[o] = g * y * (1.0 - y);
    }
    // Walk the gradient layout (w0, b0, w1, b1, ...) from its end.
    std::size_t offset = parameter_count();
    for (std::size_t l = L; l-- > 0;) {
        const std::size_t in = layer_in(l), out = layer_out(l);
        offset -= out * in + out;
        auto& below = ws.delta[l];
        below.assign(in, 0.0);
        auto dw = grad.subspan(offset, out * in);
        auto db = grad.subspan(offset + out * in, out);
        const bool need_dx = l > 0 || !d_in.empty();
        ad::kernels::affine_backward(store.value(weights[l]), ws.act[l], ws.delta[l + 1], out, in, dw,
                                     need_dx ? std::span<double>(below) : std::span<double>{}, db);
        if (l > 0)
            for (std::size_t i = 0; i < in; ++i)
                if (!(ws.act[l][i] > 0.0))
                    below[i] = 0.0;
    }
    if (!d_in.empty())
        for (std::size_t i = 0; i < n_in; ++i)
            d_in[i] += ws.delta[0][i];
}

ad::Var MlpTF::record(ad::Tape& tape, ad::ParamStore& store, ad::Var input) const
{
    const std::size_t L = layer_count();
    ad::Var h = input;
    for (std::size_t l = 0; l < L; ++l) {
        h = tape.affine(tape.param(store, weights[l]), h, tape.param(store, biases[l]), layer_out(l), layer_in(l));
        h = l + 1 < L ? tape.relu(h) : tape.sigmoid(h);
    }
    if (head == Head::color)
        return h;
    std::vector<double> scale(n_out, 1.0);
    for (std::size_t o = 0; o < n_out; ++o)
        if (scales_output(o))
            scale[o] = kappa_max;
    const std::size_t rows = tape.size(h) / n_out;
    std::vector<double> tiled;
    tiled.reserve(rows * n_out);
    for (std::size_t r = 0; r < rows; ++r)
        tiled.insert(tiled.end(), scale.begin(), scale.end());
    return tape.mul(h, tape.constant(tiled));
}

std::vector<double> mlp_eval(const MlpTF& tf, const ad::ParamStore& store, std::span<const double> feature)
{
    MlpTF::Workspace ws;
    tf.forward(store, feature, ws);
    auto out = tf.output(ws);
    return {out.begin(), out.end()};
}

// -- files --------------------------------------------------------------------

namespace {

std::string head_name(MlpTF::Head h)
{
    switch (h) {
    case MlpTF::Head::color: return "color";
    case MlpTF::Head::kappa: return "kappa";
    case MlpTF::Head::color_kappa: return "color_kappa";
    }
    return "?";
}

MlpTF::Head head_from_name(const std::string& s)
{
    if (s == "color")
        return MlpTF::Head::color;
    if (s == "kappa")
        return MlpTF::Head::kappa;
    if (s == "color_kappa")
        return MlpTF::Head::color_kappa;
    throw FormatError("unknown MLP head '" + s + "'");
}

json read_json(const fs::path& file)
{
    std::ifstream in(file);
    if (!in)
        throw IoError("cannot open " + file.string());
    try {
        json j;
        in >> j;
        return j;
    } catch (const json::exception& e) {
        throw FormatError(file.string() + ": " + e.what());
    }
}

void write_json(const json& j, const fs::path& file)
{
    if (file.has_parent_path())
        fs::create_directories(file.parent_path());
    std::ofstream out(file);
    if (!out)
        throw IoError("cannot write " + file.string());
    out << j.dump(1) << "\n";
}

} // namespace

json to_json(const LookupTF& tf, const ad::ParamStore& store)
{
    const auto c = store.value(tf.color);
    const auto k = store.value(tf.kappa);
    json bins = json::array();
    for (std::size_t i = 0; i < kLookupBins; ++i)
        bins.push_back({c[i * 3], c[i * 3 + 1], c[i * 3 + 2], k[i]});
    return json{{"kind", "lookup"}, {"version", kFileVersion}, {"kappa_max", tf.kappa_max},
                {"n_F", 1},         {"n_C", 3},                {"bins", std::move(bins)}};
}

json to_json(const MlpTF& tf, const ad::ParamStore& store)
{
    json layers = json::array();
    for (std::size_t l = 0; l < tf.layer_count(); ++l) {
        const std::size_t in = tf.layer_in(l), out = tf.layer_out(l);
        const auto w = store.value(tf.weights[l]);
        json rows = json::array();
        for (std::size_t o = 0; o < out; ++o)
            rows.push_back(std::vector<double>(w.begin() + static_cast<std::ptrdiff_t>(o * in),
                                               w.begin() + static_cast<std::ptrdiff_t>((o + 1) * in)));
        const auto b = store.value(tf.biases[l]);
        layers.push_back({{"w", std::move(rows)}, {"b", std::vector<double>(b.begin(), b.end())}});
    }
    const std::size_t n_c = tf.head == MlpTF::Head::color_kappa ? tf.n_out - 1
                            : tf.head == MlpTF::Head::color      ? tf.n_out
                                                                 : 0;
    return json{{"kind", "mlp"}, {"version", kFileVersion}, {"kappa_max", tf.kappa_max}, {"n_F", tf.n_in},
                {"n_C", n_c},    {"head", head_name(tf.head)}, {"layers", std::move(layers)}};
}

void tf_save(const LookupTF& tf, const ad::ParamStore& store, const fs::path& file)
{
    write_json(to_json(tf, store), file);
}

void tf_save(const MlpTF& tf, const ad::ParamStore& store, const fs::path& file)
{
    write_json(to_json(tf, store), file);
}

AnyTF tf_from_json(const json& j, ad::ParamStore& store, const std::string& prefix)
{
    try {
        const int version = j.at("version").get<int>();
        if (version != kFileVersion)
            throw FormatError("unsupported transfer-function file version " + std::to_string(version));
        const auto kind = j.at("kind").get<std::string>();
        const double kappa_max = j.at("kappa_max").get<double>();
        if (kind == "lookup") {
            const auto& bins = j.at("bins");
            if (bins.size() != kLookupBins)
                throw ShapeError("lookup file must hold 256 bins");
            std::vector<double> rgb, k;
            for (const auto& b : bins) {
                auto v = b.get<std::vector<double>>();
                if (v.size() != 4)
                    throw ShapeError("lookup bins hold r, g, b, kappa_raw");
                rgb.insert(rgb.end(), v.begin(), v.begin() + 3);
                k.push_back(v[3]);
            }
            LookupTF tf;
            tf.kappa_max = kappa_max;
            tf.color = store.add(prefix + ".color", {kLookupBins, 3}, std::move(rgb));
            tf.kappa = store.add(prefix + ".kappa", {kLookupBins}, std::move(k));
            return tf;
        }
        if (kind == "mlp") {
            MlpTF m;
            m.kappa_max = kappa_max;
            m.head = head_from_name(j.at("head").get<std::string>());
            m.n_in = j.at("n_F").get<std::size_t>();
            const auto& layers = j.at("layers");
            if (layers.empty())
                throw ShapeError("MLP file has no layers");
            std::size_t in = m.n_in;
            for (std::size_t l = 0; l < layers.size(); ++l) {
                const auto rows = layers[l].at("w").get<std::vector<std::vector<double>>>();
                const auto b = layers[l].at("b").get<std::vector<double>>();
                if (rows.size() != b.size())
                    throw ShapeError("MLP layer " + std::to_string(l) + " weight/bias mismatch");
                std::vector<double> w;
                for (const auto& r : rows) {
                    if (r.size() != in)
                        throw ShapeError("MLP layer " + std::to_string(l) + " has wrong input width");
                    w.insert(w.end(), r.begin(), r.end());
                }
                const std::size_t out = rows.size();
                if (l + 1 < layers.size())
                    m.hidden.push_back(out);
                else
                    m.n_out = out;
                m.weights.push_back(store.add(prefix + ".w" + std::to_string(l), {out, in}, std::move(w)));
                m.biases.push_back(store.add(prefix + ".b" + std::to_string(l), {out}, b));
                in = out;
            }
            return m;
        }
        throw FormatError("unknown transfer-function kind '" + kind + "'");
    } catch (const json::exception& e) {
        throw FormatError(std::string("malformed transfer-function file: ") + e.what());
    }
}

AnyTF tf_load(const fs::path& file, ad::ParamStore& store, const std::string& prefix)
{
    return tf_from_json(read_json(file), store, prefix);
}

LookupTF tf_load_lookup(const fs::path& file, ad::ParamStore& store, const std::string& prefix)
{
    const json j = read_json(file);
    if (j.value("kind", std::string()) != "lookup")
        throw TfKindError(file.string() + " does not hold a lookup transfer function");
    return std::get<LookupTF>(tf_from_json(j, store, prefix));
}

MlpTF tf_load_mlp(const fs::path& file, ad::ParamStore& store, const std::string& prefix)
{
    const json j = read_json(file);
    if (j.value("kind", std::string()) != "mlp")
        throw TfKindError(file.string() + " does not hold an MLP transfer function");
    return std::get<MlpTF>(tf_from_json(j, store, prefix));
}

void export_lookup_csv(const LookupTF& tf, const ad::ParamStore& store, const fs::path& file)
{
    std::ofstream out(file);
    if (!out)
        throw IoError("cannot write " + file.string());
    const auto t = tf.mapped(store);
    out << std::setprecision(17);
    for (std::size_t i = 0; i < kLookupBins; ++i)
        out << t.color[i * 3] << ',' << t.color[i * 3 + 1] << ',' << t.color[i * 3 + 2] << ',' << t.kappa[i]
            << '\n';
}

} // namespace ddvr::tf
