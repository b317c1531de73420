#include "doctest.h"

#include <cmath>
#include <string>

#include "helpers.hpp"
#include "whnn/tensor.hpp"

using namespace whnn;
using namespace whnn::testing;

TEST_CASE("matmul against identity returns the input") {
  Tape tape;
  Tensor a = tape.constant({2, 2}, {1, 2, 3, 4});
  Tensor eye = tape.constant({2, 2}, {1, 0, 0, 1});
  Tensor c = matmul(a, eye);
  CHECK(c.values()[0] == 1);
  CHECK(c.values()[1] == 2);
  CHECK(c.values()[2] == 3);
  CHECK(c.values()[3] == 4);
}

TEST_CASE("softmax of a constant row is uniform and rows sum to one") {
  Tape tape;
  Tensor x = tape.constant({1, 2}, {0, 0});
  Tensor p = softmax_rows(x);
  CHECK(p.values()[0] == doctest::Approx(0.5).epsilon(1e-15));
  CHECK(p.values()[1] == doctest::Approx(0.5).epsilon(1e-15));

  Rng rng(5);
  Tensor y = tape.constant({7, 9}, rand_values(63, rng, -4, 4));
  Tensor q = softmax_rows(y);
  for (int64_t r = 0; r < 7; ++r) {
    Real sum = 0;
    for (int64_t c = 0; c < 9; ++c) sum += q.at(r, c);
    CHECK(std::abs(sum - 1.0) < 1e-12);
  }
}

TEST_CASE("layer norm rows have mean 0 and variance 1 before gain/bias") {
  Tape tape;
  Rng rng(11);
  ParamStore store;
  Parameter& gain = store.create("g", {1, 16});
  Parameter& bias = store.create("b", {1, 16});
  init_ones(gain);
  init_zeros(bias);
  Tensor x = tape.constant({5, 16}, rand_values(80, rng, -3, 3));
  Tensor y = layer_norm_rows(x, tape.leaf(gain), tape.leaf(bias));
  for (int64_t r = 0; r < 5; ++r) {
    Real mean = 0, var = 0;
    for (int64_t c = 0; c < 16; ++c) mean += y.at(r, c);
    mean /= 16;
    for (int64_t c = 0; c < 16; ++c) var += (y.at(r, c) - mean) * (y.at(r, c) - mean);
    var /= 16;
    CHECK(std::abs(mean) < 1e-6);
    CHECK(std::abs(var - 1.0) < 1e-6);
  }
}

TEST_CASE("segment mean of {[2],[4]} in one segment is [3]") {
  Tape tape;
  Tensor x = tape.constant({2, 1}, {2, 4});
  Tensor m = segment_mean(x, {0, 2});
  CHECK(m.scalar() == doctest::Approx(3.0));
}

TEST_CASE("segment sum conserves totals") {
  Rng rng(3);
  Tape tape;
  Tensor x = tape.constant({10, 4}, rand_values(40, rng));
  Tensor s = segment_sum(x, {0, 3, 3, 7, 10});  // includes an empty segment
  Real in = 0, out = 0;
  for (Real v : x.values()) in += v;
  for (Real v : s.values()) out += v;
  CHECK(std::abs(in - out) < 1e-9);
}

TEST_CASE("sort returns a permutation with correct indices") {
  Tape tape;
  Tensor x = tape.constant({3, 1}, {3, 1, 2});
  auto [sorted, perm] = sort_columns(x);
  CHECK(sorted.values()[0] == 1);
  CHECK(sorted.values()[1] == 2);
  CHECK(sorted.values()[2] == 3);
  CHECK(perm == std::vector<int64_t>{1, 2, 0});

  Tensor y = tape.constant({3, 1}, {1, 2, 3});
  auto [s2, p2] = sort_columns(y);
  CHECK(p2 == std::vector<int64_t>{0, 1, 2});  // already sorted: identity

  // multiset equality, exact
  Rng rng(7);
  auto vals = rand_values(64, rng);
  Tensor z = tape.constant({64, 1}, vals);
  auto [s3, p3] = sort_columns(z);
  auto sorted_vals = vals;
  std::sort(sorted_vals.begin(), sorted_vals.end());
  for (int64_t i = 0; i < 64; ++i) CHECK(s3.values()[i] == sorted_vals[i]);
}

TEST_CASE("sort backward scatters through the permutation") {
  // f(x) = sum c * sort(x), c = [10,20,30], x = [3,1,2] -> df/dx = [30,10,20]
  ParamStore store;
  Parameter& x = store.create("x", {3, 1});
  x.value = {3, 1, 2};
  Tape tape;
  Tensor xs = sort_columns(tape.leaf(x)).sorted;
  Tensor c = tape.constant({3, 1}, {10, 20, 30});
  Tensor loss = sum_all(mul(xs, c));
  tape.backward(loss);
  CHECK(x.grad[0] == doctest::Approx(30));
  CHECK(x.grad[1] == doctest::Approx(10));
  CHECK(x.grad[2] == doctest::Approx(20));

  // and the same against central finite differences
  x.zero_grad();
  double err = grad_check(
      [&](Tape& t) {
        Tensor s = sort_columns(t.leaf(x)).sorted;
        Tensor cc = t.constant({3, 1}, {10, 20, 30});
        return sum_all(mul(s, cc));
      },
      {&x});
  CHECK(err < 1e-6);
}

TEST_CASE("quantile interpolation examples") {
  Tape tape;
  SUBCASE("n == r is the exact identity") {
    Rng rng(13);
    auto vals = distinct_values(9, rng);
    std::sort(vals.begin(), vals.end());
    Tensor x = tape.constant({9, 1}, vals);
    Tensor q = quantile_interp_columns(x, 9);
    for (int64_t i = 0; i < 9; ++i) CHECK(q.values()[i] == vals[i]);
  }
  SUBCASE("linear midpoint") {
    Tensor x = tape.constant({2, 1}, {0, 2});
    Tensor q = quantile_interp_columns(x, 3);
    CHECK(q.values()[0] == doctest::Approx(0));
    CHECK(q.values()[1] == doctest::Approx(1));
    CHECK(q.values()[2] == doctest::Approx(2));
  }
  SUBCASE("single sample gives a constant quantile function") {
    Tensor x = tape.constant({1, 1}, {5});
    Tensor q = quantile_interp_columns(x, 3);
    for (Real v : q.values()) CHECK(v == 5);
  }
  SUBCASE("r = 1 evaluates the median point") {
    Tensor x = tape.constant({3, 1}, {0, 1, 4});
    Tensor q = quantile_interp_columns(x, 1);
    CHECK(q.scalar() == doctest::Approx(1.0));  // t = 0.5 -> middle node
  }
  SUBCASE("output is nondecreasing") {
    Rng rng(17);
    auto vals = rand_values(6, rng);
    std::sort(vals.begin(), vals.end());
    Tensor x = tape.constant({6, 1}, vals);
    Tensor q = quantile_interp_columns(x, 17);
    for (int64_t i = 1; i < 17; ++i) CHECK(q.values()[i] >= q.values()[i - 1]);
  }
}

TEST_CASE("backward basics") {
  SUBCASE("f = x^2 at x = 3 has gradient 6") {
    ParamStore store;
    Parameter& x = store.create("x", {1, 1});
    x.value = {3};
    Tape tape;
    Tensor xl = tape.leaf(x);
    tape.backward(sum_all(mul(xl, xl)));
    CHECK(x.grad[0] == doctest::Approx(6));
  }
  SUBCASE("fan-out accumulates: f = x + x has gradient 2") {
    ParamStore store;
    Parameter& x = store.create("x", {1, 1});
    x.value = {1};
    Tape tape;
    Tensor xl = tape.leaf(x);
    tape.backward(sum_all(add(xl, xl)));
    CHECK(x.grad[0] == doctest::Approx(2));
  }
  SUBCASE("loss must be scalar") {
    ParamStore store;
    Parameter& x = store.create("x", {2, 1});
    Tape tape;
    Tensor xl = tape.leaf(x);
    CHECK_THROWS(tape.backward(xl));
  }
  SUBCASE("a tape backpropagates only once") {
    ParamStore store;
    Parameter& x = store.create("x", {1, 1});
    Tape tape;
    Tensor loss = sum_all(tape.leaf(x));
    tape.backward(loss);
    CHECK_THROWS(tape.backward(loss));
  }
  SUBCASE("composite expression matches finite differences") {
    ParamStore store;
    Rng rng(23);
    Parameter& a = rand_param(store, "a", 4, 5, rng);
    Parameter& b = rand_param(store, "b", 5, 3, rng);
    Parameter& g = store.create("g", {1, 3});
    Parameter& bb = store.create("bb", {1, 3});
    init_ones(g);
    init_zeros(bb);
    double err = grad_check(
        [&](Tape& t) {
          Tensor y = relu(matmul(t.leaf(a), t.leaf(b)));
          y = layer_norm_rows(y, t.leaf(g), t.leaf(bb));
          y = softmax_rows(y);
          return reduce_loss(t, y);
        },
        {&a, &b, &g, &bb});
    CHECK(err < 1e-6);
  }
}

// Every op of the catalogue passes a finite-difference check on random
// shapes. Inputs that feed sort-like ops are kept distinct.
TEST_CASE("gradient check across the op catalogue") {
  ParamStore store;
  Rng rng(31);
  Parameter& a = rand_param(store, "a", 7, 5, rng);
  Parameter& b = rand_param(store, "b", 5, 6, rng);
  Parameter& sq = rand_param(store, "sq", 7, 5, rng);
  Parameter& vrow = rand_param(store, "vrow", 1, 5, rng);
  Parameter& vcol = rand_param(store, "vcol", 7, 1, rng);
  Parameter& gain = store.create("gain", {1, 5});
  Parameter& bias = store.create("bias", {1, 5});
  init_ones(gain);
  init_zeros(bias);
  Parameter& wide = store.create("wide", {16, 32});
  {
    auto vals = distinct_values(16 * 32, rng);
    wide.value = vals;
  }
  std::vector<int64_t> seg_off{0, 3, 7, 16};

  auto check_op = [&](const char* name, std::function<Tensor(Tape&)> build,
                      std::vector<Parameter*> params) {
    INFO("op: " << std::string(name));
    CHECK(grad_check(build, params) < 1e-6);
  };

  check_op("matmul", [&](Tape& t) { return reduce_loss(t, matmul(t.leaf(a), t.leaf(b))); },
           {&a, &b});
  check_op("transpose", [&](Tape& t) { return reduce_loss(t, transpose(t.leaf(a))); }, {&a});
  check_op("add", [&](Tape& t) { return reduce_loss(t, add(t.leaf(a), t.leaf(sq))); },
           {&a, &sq});
  check_op("sub", [&](Tape& t) { return reduce_loss(t, sub(t.leaf(a), t.leaf(sq))); },
           {&a, &sq});
  check_op("mul", [&](Tape& t) { return reduce_loss(t, mul(t.leaf(a), t.leaf(sq))); },
           {&a, &sq});
  check_op("scale", [&](Tape& t) { return reduce_loss(t, scale(t.leaf(a), -1.7)); }, {&a});
  check_op("add_rowvec",
           [&](Tape& t) { return reduce_loss(t, add_rowvec(t.leaf(a), t.leaf(vrow))); },
           {&a, &vrow});
  check_op("mul_rowvec",
           [&](Tape& t) { return reduce_loss(t, mul_rowvec(t.leaf(a), t.leaf(vrow))); },
           {&a, &vrow});
  check_op("mul_colvec",
           [&](Tape& t) { return reduce_loss(t, mul_colvec(t.leaf(a), t.leaf(vcol))); },
           {&a, &vcol});
  check_op("relu", [&](Tape& t) { return reduce_loss(t, relu(t.leaf(a))); }, {&a});
  check_op("softmax_rows",
           [&](Tape& t) { return reduce_loss(t, softmax_rows(t.leaf(a))); }, {&a});
  check_op("layer_norm",
           [&](Tape& t) {
             return reduce_loss(t, layer_norm_rows(t.leaf(a), t.leaf(gain), t.leaf(bias)));
           },
           {&a, &gain, &bias});
  check_op("concat_cols",
           [&](Tape& t) { return reduce_loss(t, concat_cols(t.leaf(a), t.leaf(sq))); },
           {&a, &sq});
  check_op("concat_rows",
           [&](Tape& t) {
             return reduce_loss(t, concat_rows({t.leaf(a), t.leaf(sq)}));
           },
           {&a, &sq});
  check_op("slice_cols",
           [&](Tape& t) { return reduce_loss(t, slice_cols(t.leaf(a), 1, 3)); }, {&a});
  check_op("gather_rows",
           [&](Tape& t) {
             return reduce_loss(t, gather_rows(t.leaf(a), {6, 0, 0, 2, 4}));
           },
           {&a});
  check_op("reshape", [&](Tape& t) { return reduce_loss(t, reshape(t.leaf(a), 5, 7)); },
           {&a});
  check_op("sum_all", [&](Tape& t) { return sum_all(t.leaf(a)); }, {&a});
  check_op("mean_all", [&](Tape& t) { return mean_all(t.leaf(a)); }, {&a});
  check_op("segment_sum",
           [&](Tape& t) {
             return reduce_loss(t, segment_sum(t.leaf(wide), seg_off));
           },
           {&wide});
  check_op("segment_mean",
           [&](Tape& t) {
             return reduce_loss(t, segment_mean(t.leaf(wide), seg_off));
           },
           {&wide});
  check_op("segment_softmax",
           [&](Tape& t) {
             return reduce_loss(t, segment_softmax_col(t.leaf(vcol), {0, 2, 7}));
           },
           {&vcol});
  check_op("repeat_rows",
           [&](Tape& t) { return reduce_loss(t, repeat_rows(t.leaf(a), 3)); }, {&a});
  check_op("sort_columns",
           [&](Tape& t) { return reduce_loss(t, sort_columns(t.leaf(wide)).sorted); },
           {&wide});
  check_op("quantile_interp",
           [&](Tape& t) {
             Tensor s = sort_columns(t.leaf(wide)).sorted;
             return reduce_loss(t, quantile_interp_columns(s, 9));
           },
           {&wide});
  check_op("segment_sort_interpolate",
           [&](Tape& t) {
             return reduce_loss(t, segment_sort_interpolate(t.leaf(wide), seg_off, 6));
           },
           {&wide});
  check_op("block_column_rms",
           [&](Tape& t) { return reduce_loss(t, block_column_rms(t.leaf(wide), 4)); },
           {&wide});
  check_op("blocked_matmul_nt",
           [&](Tape& t) {
             return reduce_loss(t, blocked_matmul_nt(t.leaf(wide), t.leaf(wide), 4, 4));
           },
           {&wide});
  check_op("blocked_matmul_nn",
           [&](Tape& t) {
             Tensor s = blocked_matmul_nt(t.leaf(wide), t.leaf(wide), 4, 4);
             Tensor sm = softmax_rows(s);
             return reduce_loss(t, blocked_matmul_nn(sm, t.leaf(wide), 4, 4));
           },
           {&wide});
  check_op("cross_entropy",
           [&](Tape& t) {
             std::vector<int32_t> labels{0, 2, 1, 4, 3, 0, 2};
             std::vector<uint8_t> mask{1, 0, 1, 1, 0, 1, 1};
             return masked_cross_entropy(t.leaf(a), labels, mask);
           },
           {&a});
  check_op("dropout",
           [&](Tape& t) {
             Rng drop(404);  // same mask on every rebuild
             return reduce_loss(t, dropout(t.leaf(a), 0.4, drop));
           },
           {&a});
}

TEST_CASE("dropout scales kept entries and is skipped at rate 0") {
  ParamStore store;
  Rng rng(41);
  Parameter& a = rand_param(store, "a", 50, 20, rng, 1.0, 2.0);
  Tape tape;
  Tensor x = tape.leaf(a);
  Rng drop(7);
  Tensor y = dropout(x, 0.5, drop);
  int64_t kept = 0;
  for (int64_t i = 0; i < y.numel(); ++i) {
    if (y.values()[i] != 0) {
      ++kept;
      CHECK(y.values()[i] == doctest::Approx(a.value[i] * 2.0));
    }
  }
  CHECK(kept > 300);
  CHECK(kept < 700);
  Rng drop2(7);
  Tensor z = dropout(x, 0.0, drop2);
  CHECK(z.id() == x.id());  // identity: no op recorded
}

TEST_CASE("adam bias-corrected first step and zero-grad behaviour") {
  SUBCASE("constant gradient at t=1 gives -lr * g / (|g| + eps)") {
    ParamStore store;
    Parameter& p = store.create("p", {1, 2});
    p.value = {1.0, -2.0};
    p.grad = {0.3, -0.7};
    p.grad_seen = true;
    Adam opt({&p}, AdamConfig{.lr = 0.01});
    opt.step();
    CHECK(p.value[0] == doctest::Approx(1.0 - 0.01 * 0.3 / (0.3 + 1e-8)).epsilon(1e-9));
    CHECK(p.value[1] == doctest::Approx(-2.0 + 0.01 * 0.7 / (0.7 + 1e-8)).epsilon(1e-9));
    CHECK(p.grad[0] == 0);  // grads zeroed after the step
  }
  SUBCASE("zero gradient leaves the parameter unchanged") {
    ParamStore store;
    Parameter& p = store.create("p", {1, 1});
    p.value = {5.0};
    p.grad_seen = true;
    Adam opt({&p});
    opt.step();
    CHECK(p.value[0] == 5.0);
  }
  SUBCASE("missing gradient raises") {
    ParamStore store;
    Parameter& p = store.create("p", {1, 1});
    Adam opt({&p});
    CHECK_THROWS_WITH_AS(opt.step(),
                         "adam_step: missing gradient on parameter 'p'",
                         std::runtime_error);
  }
  SUBCASE("quadratic bowl: windowed norm strictly decreases over 500 steps") {
    ParamStore store;
    Parameter& x = store.create("x", {1, 8});
    Rng rng(51);
    for (Real& v : x.value) v = rng.uniform(0.5, 1.5);
    Adam opt({&x}, AdamConfig{.lr = 0.001});
    std::vector<double> norms;
    for (int step = 0; step < 500; ++step) {
      Tape tape;
      Tensor xl = tape.leaf(x);
      tape.backward(sum_all(mul(xl, xl)));
      opt.step();
      double n = 0;
      for (Real v : x.value) n += v * v;
      norms.push_back(std::sqrt(n));
    }
    auto window = [&](int lo) {
      double s = 0;
      for (int i = lo; i < lo + 100; ++i) s += norms[i];
      return s / 100;
    };
    CHECK(window(0) > window(100));
    CHECK(window(100) > window(200));
    CHECK(window(200) > window(300));
    CHECK(window(300) > window(400));
  }
}

TEST_CASE("finite checks name the offending op") {
  Tape tape(/*check_finite=*/true);
  Tensor big = tape.constant({1, 1}, {1e308});
  CHECK_THROWS_WITH_AS(scale(scale(big, 1e308), 2.0),
                       "non-finite value produced by op 'scale'", std::runtime_error);

  Tape lax;  // default mode records silently but can locate the op post hoc
  Tensor b2 = lax.constant({1, 1}, {1e308});
  Tensor c = scale(scale(b2, 1e308), 2.0);
  (void)c;
  CHECK(lax.first_nonfinite_op() == std::string("scale"));
}

TEST_CASE("grad_check harness detects an injected sign bug") {
  // A deliberately broken op: forward is identity, backward flips the sign.
  ParamStore store;
  Rng rng(61);
  Parameter& a = rand_param(store, "a", 3, 3, rng);
  auto broken_identity = [](Tape& t, const Tensor& x) {
    int ix = x.id();
    return t.record("broken_identity", x.shape(),
                    std::vector<Real>(x.values().begin(), x.values().end()), {ix},
                    [ix](Tape& tp, int id) {
                      const Real* go = tp.grad_buffer(id);
                      Real* ga = tp.grad_buffer(ix);
                      for (int64_t i = 0; i < tp.shape(id).numel(); ++i) ga[i] -= go[i];
                    });
  };
  double err = grad_check(
      [&](Tape& t) { return reduce_loss(t, broken_identity(t, t.leaf(a))); }, {&a});
  CHECK(err > 0.5);
}

TEST_CASE("gradients accumulate across multiple uses of one parameter") {
  ParamStore store;
  Rng rng(71);
  Parameter& a = rand_param(store, "a", 4, 4, rng);
  double err = grad_check(
      [&](Tape& t) {
        Tensor x = t.leaf(a);
        return reduce_loss(t, add(matmul(x, x), x));
      },
      {&a});
  CHECK(err < 1e-6);
}
