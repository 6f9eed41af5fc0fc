#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "fedgfm/rng.hpp"
#include "fedgfm/tape.hpp"

#include <cmath>
#include <cstring>

using namespace fedgfm;
using namespace fedgfm::ad;

namespace {

bool bitwise_equal(const Matrix& a, const Matrix& b) {
    if (a.rows() != b.rows() || a.cols() != b.cols()) return false;
    return std::memcmp(a.data(), b.data(), sizeof(double) * a.size()) == 0;
}

Matrix random_matrix(Rng& rng, Eigen::Index r, Eigen::Index c) { return rng.uniform_matrix(r, c, -1.0, 1.0); }

// Nearest-of-two selector used to exercise the quantization-boundary path
// without pulling in the full codebook machinery.
Handle select_nearer(Tape& t, Handle w, double t0, double t1) {
    double wv = t.value(w)(0, 0);
    std::int32_t idx = (std::abs(wv - t1) < std::abs(wv - t0)) ? 1 : 0;
    t.record_discrete(&idx, 1);
    Matrix tokens(2, 1);
    tokens << t0, t1;
    Handle tok = t.constant(tokens);
    return gather_rows(t, tok, {idx});
}

}  // namespace

TEST_CASE("backward: analytic derivative of w^2") {
    Tape t;
    Matrix w(1, 1);
    w << 3.0;
    Handle hw = t.parameter(w);
    Handle loss = hadamard(t, hw, hw);
    GradientMap g = t.backward(loss);
    CHECK(g.at(hw)(0, 0) == doctest::Approx(6.0).epsilon(1e-14));
}

TEST_CASE("backward: sum of zero vector has all-ones gradient") {
    Tape t;
    Handle hw = t.parameter(Matrix::Zero(5, 1));
    Handle loss = sum_all(t, hw);
    GradientMap g = t.backward(loss);
    CHECK(g.at(hw).isApprox(Matrix::Ones(5, 1)));
}

TEST_CASE("backward: unused parameter gets an all-zero gradient") {
    Tape t;
    Handle used = t.parameter(Matrix::Ones(2, 2));
    Handle unused = t.parameter(Matrix::Ones(3, 3));
    Handle loss = sum_all(t, used);
    GradientMap g = t.backward(loss);
    CHECK(g.at(unused).isZero(0.0));
    CHECK(g.at(unused).rows() == 3);
}

TEST_CASE("backward: non-scalar loss is a contract violation") {
    Tape t;
    Handle hw = t.parameter(Matrix::Ones(2, 2));
    CHECK_THROWS_AS((void)t.backward(hw), ContractViolation);
}

TEST_CASE("forward NaN carries the offending op") {
    Tape t;
    Matrix x(1, 1);
    x << -1.0;
    Handle hx = t.parameter(x);
    try {
        (void)pow_const(t, hx, 0.5);
        FAIL("expected NumericError");
    } catch (const NumericError& e) {
        CHECK(std::string(e.what()).find("pow_const") != std::string::npos);
    }
}

TEST_CASE("backward: random 3-layer composite matches finite differences") {
    Rng rng(71);
    Matrix w1 = random_matrix(rng, 4, 5), b1 = random_matrix(rng, 1, 5);
    Matrix w2 = random_matrix(rng, 5, 3), b2 = random_matrix(rng, 1, 3);
    Matrix w3 = random_matrix(rng, 3, 2);
    Matrix x = random_matrix(rng, 6, 4);
    auto build = [&](Tape& t, const std::vector<Handle>& p) {
        Handle hx = t.constant(x);
        Handle h1 = sigmoid(t, add_rowvec(t, matmul(t, hx, p[0]), p[1]));
        Handle h2 = sigmoid(t, add_rowvec(t, matmul(t, h1, p[2]), p[3]));
        Handle h3 = matmul(t, h2, p[4]);
        return mean_all(t, hadamard(t, h3, h3));
    };
    FdResult r = finite_difference_check(build, {w1, b1, w2, b2, w3}, 1e-5);
    CHECK(r.excluded.empty());
    CHECK(r.max_rel_error < 1e-4);
}

TEST_CASE("stop_gradient: forward identity, zero route to z, 2(zq-z) to zq") {
    Rng rng(5);
    Matrix zv = random_matrix(rng, 3, 4), qv = random_matrix(rng, 3, 4);

    Tape t;
    Handle z = t.parameter(zv);
    Handle zq = t.parameter(qv);
    Handle sg = stop_gradient(t, z);
    CHECK(bitwise_equal(t.value(sg), zv));

    Handle diff = sub(t, sg, zq);
    Handle loss = sum_all(t, hadamard(t, diff, diff));
    GradientMap g = t.backward(loss);
    CHECK(g.at(z).isZero(0.0));
    Matrix expected = 2.0 * (qv - zv);
    CHECK(g.at(zq).isApprox(expected, 1e-12));

    auto build = [&](Tape& tt, const std::vector<Handle>& p) {
        Handle s = stop_gradient(tt, tt.constant(zv));
        Handle d = sub(tt, s, p[0]);
        return sum_all(tt, hadamard(tt, d, d));
    };
    FdResult r = finite_difference_check(build, {qv}, 1e-5);
    CHECK(r.max_rel_error < 1e-6);
}

TEST_CASE("straight_through: forward equals z_q, gradient routes to z") {
    Rng rng(6);
    Matrix zv = random_matrix(rng, 3, 4), qv = random_matrix(rng, 3, 4);
    Tape t;
    Handle z = t.parameter(zv);
    Handle zq = t.parameter(qv);
    Handle st = straight_through(t, z, zq);
    CHECK(bitwise_equal(t.value(st), qv));

    // f(y) = sum y^2 => df/dy = 2 z_q, routed unchanged onto z
    Handle loss = sum_all(t, hadamard(t, st, st));
    GradientMap g = t.backward(loss);
    CHECK(g.at(z).isApprox(Matrix(2.0 * qv), 1e-12));
    CHECK(g.at(zq).isZero(0.0));

    Tape t2;
    CHECK_THROWS_AS((void)straight_through(t2, t2.parameter(Matrix::Zero(2, 2)), t2.parameter(Matrix::Zero(3, 2))),
                    ContractViolation);
}

TEST_CASE("straight_through composite matches finite differences with frozen selection") {
    Rng rng(7);
    Matrix zv = random_matrix(rng, 4, 3);
    Matrix tokens = random_matrix(rng, 6, 3);
    std::vector<std::int32_t> frozen = {2, 0, 5, 2};
    auto build = [&](Tape& t, const std::vector<Handle>& p) {
        Handle tok = t.constant(tokens);
        Handle zq = gather_rows(t, tok, frozen);
        Handle st = straight_through(t, p[0], zq);
        return mean_all(t, hadamard(t, st, st));
    };
    FdResult r = finite_difference_check(build, {zv}, 1e-5);
    CHECK(r.max_rel_error < 1e-6);
}

TEST_CASE("finite_difference_check: linear function is near-exact") {
    Rng rng(8);
    Matrix w = random_matrix(rng, 3, 3);
    Matrix c = random_matrix(rng, 3, 3);
    auto build = [&](Tape& t, const std::vector<Handle>& p) {
        return sum_all(t, hadamard(t, p[0], t.constant(c)));
    };
    FdResult r = finite_difference_check(build, {w}, 1e-5);
    CHECK(r.max_rel_error < 1e-8);
}

TEST_CASE("finite_difference_check: quadratic within truncation budget") {
    Rng rng(9);
    Matrix w = random_matrix(rng, 4, 2);
    auto build = [&](Tape& t, const std::vector<Handle>& p) { return sum_all(t, hadamard(t, p[0], p[0])); };
    FdResult r = finite_difference_check(build, {w}, 1e-5);
    CHECK(r.max_rel_error < 1e-6);
}

TEST_CASE("finite_difference_check: boundary crossing is excluded and reported") {
    double eps = 1e-5;
    Matrix w(1, 1);
    w << 0.5 + eps / 3.0;  // +/- eps flips the nearest-token choice
    auto build = [&](Tape& t, const std::vector<Handle>& p) {
        Handle q = select_nearer(t, p[0], 0.0, 1.0);
        Handle d = sub(t, p[0], q);
        return sum_all(t, hadamard(t, d, d));
    };
    FdResult r = finite_difference_check(build, {w}, eps);
    REQUIRE(r.excluded.size() == 1);
    CHECK(r.excluded[0].param == 0);
    CHECK(r.excluded[0].row == 0);
}

TEST_CASE("finite_difference_check: nondeterministic function rejected") {
    int calls = 0;
    auto build = [&](Tape& t, const std::vector<Handle>& p) {
        Matrix drift(1, 1);
        drift << static_cast<double>(calls++);
        return sum_all(t, hadamard(t, p[0], t.constant(drift)));
    };
    CHECK_THROWS_AS((void)finite_difference_check(build, {Matrix::Ones(1, 1)}, 1e-5), ContractViolation);
}

TEST_CASE("determinism: identical tape and inputs give bitwise identical values and gradients") {
    Rng rng(10);
    Matrix w = random_matrix(rng, 3, 3), x = random_matrix(rng, 5, 3);
    auto run = [&](Matrix* grad_out) {
        Tape t;
        Handle hw = t.parameter(w);
        Handle hx = t.constant(x);
        Handle y = sigmoid(t, matmul(t, hx, hw));
        Handle loss = mean_all(t, hadamard(t, y, y));
        *grad_out = t.backward(loss).at(hw);
        return t.value(loss)(0, 0);
    };
    Matrix g1, g2;
    double l1 = run(&g1), l2 = run(&g2);
    CHECK(std::memcmp(&l1, &l2, sizeof(double)) == 0);
    CHECK(bitwise_equal(g1, g2));
}

TEST_CASE("replay reproduces identical forward values") {
    Rng rng(11);
    Matrix w = random_matrix(rng, 4, 4), x = random_matrix(rng, 4, 4);
    Tape t;
    Handle hw = t.parameter(w);
    Handle y = softmax_rows(t, matmul(t, t.constant(x), hw));
    Handle loss = mean_all(t, y);
    Matrix before = t.value(y);
    double lv = t.value(loss)(0, 0);
    t.replay();
    CHECK(bitwise_equal(t.value(y), before));
    CHECK(std::memcmp(&lv, &t.value(loss)(0, 0), sizeof(double)) == 0);
}

TEST_CASE("gradient linearity of combined losses") {
    Rng rng(12);
    Matrix w = random_matrix(rng, 3, 4);
    Tape t;
    Handle hw = t.parameter(w);
    Handle f = sum_all(t, hadamard(t, hw, hw));
    Handle g = mean_all(t, sigmoid(t, hw));
    double a = 0.7, b = -2.5;
    Handle combo = add(t, scale(t, f, a), scale(t, g, b));
    Matrix gf = t.backward(f).at(hw);
    Matrix gg = t.backward(g).at(hw);
    Matrix gc = t.backward(combo).at(hw);
    Matrix expect = a * gf + b * gg;
    for (Eigen::Index i = 0; i < gc.size(); ++i)
        CHECK(relative_error(gc.data()[i], expect.data()[i]) < 1e-10);
}

TEST_CASE("every differentiable primitive passes the finite-difference oracle") {
    Rng rng(13);
    double eps = 1e-5;
    auto check = [&](const char* name, const std::vector<Matrix>& params,
                     const std::function<Handle(Tape&, const std::vector<Handle>&)>& build) {
        CAPTURE(name);
        FdResult r = finite_difference_check(build, params, eps);
        CHECK(r.excluded.empty());
        CHECK(r.max_rel_error < 1e-4);
    };

    Matrix a = random_matrix(rng, 4, 3), b = random_matrix(rng, 3, 5), s = random_matrix(rng, 4, 3);
    Matrix rowv = random_matrix(rng, 1, 3);

    auto quad = [](Tape& t, Handle y) { return mean_all(t, hadamard(t, y, y)); };

    check("matmul", {a, b},
          [&](Tape& t, const std::vector<Handle>& p) { return quad(t, matmul(t, p[0], p[1])); });
    check("transpose", {a},
          [&](Tape& t, const std::vector<Handle>& p) { return quad(t, transpose(t, p[0])); });
    check("add", {a, s}, [&](Tape& t, const std::vector<Handle>& p) { return quad(t, add(t, p[0], p[1])); });
    check("sub", {a, s}, [&](Tape& t, const std::vector<Handle>& p) { return quad(t, sub(t, p[0], p[1])); });
    check("add_rowvec", {a, rowv},
          [&](Tape& t, const std::vector<Handle>& p) { return quad(t, add_rowvec(t, p[0], p[1])); });
    check("hadamard", {a, s},
          [&](Tape& t, const std::vector<Handle>& p) { return quad(t, hadamard(t, p[0], p[1])); });
    check("scale", {a},
          [&](Tape& t, const std::vector<Handle>& p) { return quad(t, scale(t, p[0], -1.7)); });
    check("sigmoid", {a},
          [&](Tape& t, const std::vector<Handle>& p) { return quad(t, sigmoid(t, p[0])); });
    check("row_mean", {a},
          [&](Tape& t, const std::vector<Handle>& p) { return quad(t, row_mean(t, p[0])); });
    check("sum_all", {a}, [&](Tape& t, const std::vector<Handle>& p) { return sum_all(t, p[0]); });
    check("softmax_rows", {a},
          [&](Tape& t, const std::vector<Handle>& p) { return quad(t, softmax_rows(t, p[0])); });
    check("rowwise_dot", {a, s},
          [&](Tape& t, const std::vector<Handle>& p) { return quad(t, rowwise_dot(t, p[0], p[1])); });
    check("rowwise_cosine", {a, s},
          [&](Tape& t, const std::vector<Handle>& p) { return quad(t, rowwise_cosine(t, p[0], p[1])); });
    check("concat_cols", {a, s}, [&](Tape& t, const std::vector<Handle>& p) {
        return quad(t, concat_cols(t, {p[0], p[1]}));
    });
    check("gather_rows", {a}, [&](Tape& t, const std::vector<Handle>& p) {
        return quad(t, gather_rows(t, p[0], {3, 1, 1, 0}));
    });

    // relu away from its kink; entries are clamped to |x| >= 0.05
    Matrix ra = random_matrix(rng, 4, 3);
    for (Eigen::Index i = 0; i < ra.size(); ++i)
        if (std::abs(ra.data()[i]) < 0.05) ra.data()[i] = 0.05;
    check("relu", {ra}, [&](Tape& t, const std::vector<Handle>& p) { return quad(t, relu(t, p[0])); });

    // pow with positive base, mirrors the (1 - cos)^gamma use
    Matrix pa = rng.uniform_matrix(4, 3, 0.1, 1.9);
    check("pow_const", {pa},
          [&](Tape& t, const std::vector<Handle>& p) { return sum_all(t, pow_const(t, p[0], 2.0)); });
}

TEST_CASE("softmax rows sum to one and are max-shift stable") {
    Tape t;
    Matrix x(2, 3);
    x << 1000.0, 1001.0, 999.0, -5.0, 0.0, 5.0;
    Handle y = softmax_rows(t, t.constant(x));
    const Matrix& s = t.value(y);
    CHECK(s.allFinite());
    CHECK(s.row(0).sum() == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(s.row(1).sum() == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("rowwise_cosine clamps zero rows instead of dividing by zero") {
    Tape t;
    Matrix a = Matrix::Zero(2, 3), b = Matrix::Ones(2, 3);
    a.row(1) << 1.0, 0.0, 0.0;
    Handle ha = t.parameter(a);
    Handle c = rowwise_cosine(t, ha, t.constant(b));
    CHECK(t.value(c)(0, 0) == 0.0);
    CHECK(t.value(c)(1, 0) == doctest::Approx(1.0 / std::sqrt(3.0)));
    GradientMap g = t.backward(sum_all(t, c));
    CHECK(g.at(ha).row(0).isZero(0.0));  // clamped row contributes no gradient
}
