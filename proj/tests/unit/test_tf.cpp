#include <cmath>
#include <fstream>
#include <random>
#include <sstream>

#include "doctest.h"
#include "helpers.hpp"

#include "ddvr/error.hpp"
#include "ddvr/tf.hpp"

using namespace ddvr;
using namespace ddvr::tf;

namespace {

double logit(double p) { return std::log(p / (1.0 - p)); }

void randomize(ad::ParamStore& s, std::uint64_t seed, double sd = 0.7)
{
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> n(0.0, sd);
    for (std::size_t b = 0; b < s.block_count(); ++b)
        for (auto& x : s.value(b))
            x = n(rng);
}

} // namespace

TEST_CASE("lookup evaluation")
{
    ad::ParamStore s;
    const auto tf = LookupTF::create(s);
    auto col = s.value(tf.color);
    auto kap = s.value(tf.kappa);
    col[0] = 0.1;
    col[1] = 0.2;
    col[2] = 0.3;
    kap[0] = logit(0.25);
    // Bins 100 and 101 map to kappa 2 and 4.
    kap[100] = logit(2.0 / tf.kappa_max);
    kap[101] = logit(4.0 / tf.kappa_max);

    const auto o0 = lookup_eval(tf, s, 0.0);
    CHECK(o0.rgb[0] == 0.1);
    CHECK(o0.rgb[2] == 0.3);
    CHECK(o0.kappa == doctest::Approx(0.25 * tf.kappa_max).epsilon(1e-14));

    const auto mid = lookup_eval(tf, s, 100.5 / 255.0);
    CHECK(mid.kappa == doctest::Approx(3.0).epsilon(1e-12));

    CHECK(lookup_position(1.0).lo == 254);
    CHECK(lookup_position(1.0).frac == 1.0);
    CHECK(lookup_position(-0.5).lo == 0);
    CHECK(lookup_position(-0.5).frac == 0.0);
}

TEST_CASE("lookup mapping and projection")
{
    ad::ParamStore s;
    const auto tf = LookupTF::create(s);
    s.value(tf.color)[5] = 1.7;
    s.value(tf.color)[6] = -0.3;
    s.value(tf.kappa)[9] = kTransparentRaw;
    const auto t = tf.mapped(s);
    CHECK(t.color[5] == 1.0);
    CHECK(t.color[6] == 0.0);
    CHECK(t.kappa[9] == 0.0);
    for (double k : t.kappa) {
        CHECK(k >= 0.0);
        CHECK(k < tf.kappa_max);
    }
    tf.project(s);
    CHECK(s.value(tf.color)[5] == 1.0);
    CHECK(s.value(tf.color)[6] == 0.0);

    std::vector<double> rgb(kLookupBins * 3, 0.25), kappa(kLookupBins, 0.0);
    kappa[7] = 3.5;
    ad::ParamStore s2;
    const auto back = LookupTF::from_mapped(s2, rgb, kappa, 64.0, "x");
    const auto t2 = back.mapped(s2);
    CHECK(t2.kappa[7] == doctest::Approx(3.5).epsilon(1e-12));
    CHECK(t2.kappa[8] == 0.0);
    CHECK(t2.color[100] == 0.25);
    kappa[3] = 64.0;
    ad::ParamStore s3;
    CHECK_THROWS_AS(LookupTF::from_mapped(s3, rgb, kappa), ConfigError);
}

TEST_CASE("mlp evaluation")
{
    ad::ParamStore s;
    const auto m = MlpTF::create(s, "mlp", 1, {16, 16}, 4, MlpTF::Head::color);
    CHECK(m.parameter_count() == 372);
    CHECK(s.parameter_count() == 372);
    for (std::size_t b = 0; b < s.block_count(); ++b)
        for (auto& x : s.value(b))
            x = 0.0;
    const double f = 0.4;
    const auto out = mlp_eval(m, s, std::span<const double>(&f, 1));
    REQUIRE(out.size() == 4);
    for (double o : out)
        CHECK(o == 0.5);
    const double two[2] = {0.1, 0.2};
    CHECK_THROWS_AS(mlp_eval(m, s, two), ShapeError);

    ad::ParamStore s2;
    const auto k = MlpTF::create(s2, "k", 2, {8}, 1, MlpTF::Head::kappa, 10.0);
    for (std::size_t b = 0; b < s2.block_count(); ++b)
        for (auto& x : s2.value(b))
            x = 0.0;
    CHECK(mlp_eval(k, s2, two)[0] == 5.0);
}

TEST_CASE("mlp hand-written backward matches finite differences")
{
    ad::ParamStore s;
    const auto m = MlpTF::create(s, "mlp", 3, {6, 5}, 4, MlpTF::Head::color_kappa, 8.0, 3);
    randomize(s, 4);
    const double in[3] = {0.2, 0.9, -0.4};
    const double w_out[4] = {0.3, -1.1, 0.7, 0.05};
    std::vector<double> d_in(3);
    const auto f = [&](ad::ParamStore& st) {
        MlpTF::Workspace ws;
        m.forward(st, in, ws);
        double v = 0.0;
        for (int o = 0; o < 4; ++o)
            v += w_out[o] * m.output(ws)[o] * m.output(ws)[o];
        double d_out[4];
        for (int o = 0; o < 4; ++o)
            d_out[o] = 2.0 * w_out[o] * m.output(ws)[o];
        std::vector<double> grad(m.parameter_count(), 0.0);
        std::fill(d_in.begin(), d_in.end(), 0.0);
        m.backward(st, ws, d_out, grad, d_in);
        std::size_t off = 0;
        for (std::size_t l = 0; l < m.layer_count(); ++l)
            for (auto b : {m.weights[l], m.biases[l]}) {
                auto g = st.grad(b);
                for (std::size_t i = 0; i < g.size(); ++i)
                    g[i] += grad[off + i];
                off += g.size();
            }
        return v;
    };
    const auto rep = ad::finite_diff_check(f, s);
    CHECK(rep.max_rel_error < 1e-6);

    // Tape recording agrees with the direct path.
    ad::Tape t;
    const auto y = m.record(t, s, t.constant(std::span<const double>(in, 3)));
    MlpTF::Workspace ws;
    m.forward(s, in, ws);
    for (int o = 0; o < 4; ++o)
        CHECK(t.value(y)[o] == doctest::Approx(m.output(ws)[o]).epsilon(1e-14));
}

TEST_CASE("transfer function files")
{
    testutil::TempDir dir("tf");
    std::mt19937_64 rng(2);
    std::uniform_real_distribution<double> u(0.0, 1.0);

    SUBCASE("lookup round trip is bit-identical")
    {
        ad::ParamStore s;
        const auto tf = LookupTF::create(s);
        randomize(s, 5, 2.0);
        tf_save(tf, s, dir / "l.json");
        ad::ParamStore s2;
        const auto back = tf_load_lookup(dir / "l.json", s2);
        for (int i = 0; i < 1000; ++i) {
            const double x = u(rng);
            const auto a = lookup_eval(tf, s, x), b = lookup_eval(back, s2, x);
            CHECK(a.kappa == b.kappa);
            CHECK(a.rgb == b.rgb);
        }
        CHECK_THROWS_AS(tf_load_mlp(dir / "l.json", s2, "m"), TfKindError);
    }
    SUBCASE("mlp round trip is bit-identical")
    {
        ad::ParamStore s;
        const auto tf = MlpTF::create(s, "mlp", 1, {16, 16}, 4, MlpTF::Head::color_kappa);
        randomize(s, 6);
        tf_save(tf, s, dir / "m.json");
        ad::ParamStore s2;
        const auto back = tf_load_mlp(dir / "m.json", s2);
        for (int i = 0; i < 1000; ++i) {
            const double x = u(rng);
            CHECK(mlp_eval(tf, s, std::span<const double>(&x, 1)) == mlp_eval(back, s2, std::span<const double>(&x, 1)));
        }
        CHECK_THROWS_AS(tf_load_lookup(dir / "m.json", s2, "l"), TfKindError);
    }
    SUBCASE("CSV export equals the mapped table")
    {
        ad::ParamStore s;
        const auto tf = LookupTF::create(s);
        randomize(s, 7, 1.5);
        export_lookup_csv(tf, s, dir / "t.csv");
        const auto t = tf.mapped(s);
        std::ifstream in(dir / "t.csv");
        std::string line;
        std::size_t row = 0;
        while (std::getline(in, line)) {
            std::stringstream ss(line);
            std::string cell;
            std::vector<double> v;
            while (std::getline(ss, cell, ','))
                v.push_back(std::stod(cell));
            REQUIRE(v.size() == 4);
            for (int c = 0; c < 3; ++c)
                CHECK(v[c] == t.color[row * 3 + c]);
            CHECK(v[3] == t.kappa[row]);
            ++row;
        }
        CHECK(row == kLookupBins);
    }
    SUBCASE("bad files")
    {
        std::ofstream(dir / "v.json") << R"({"kind":"lookup","version":9,"kappa_max":64,"bins":[]})";
        ad::ParamStore s;
        CHECK_THROWS_AS(tf_load(dir / "v.json", s), FormatError);
        std::ofstream(dir / "b.json") << R"({"kind":"lookup","version":1,"kappa_max":64,"bins":[[0,0,0,0]]})";
        CHECK_THROWS_AS(tf_load(dir / "b.json", s), ShapeError);
    }
}
