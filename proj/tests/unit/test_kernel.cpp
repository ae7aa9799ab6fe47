#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>
#include <omp.h>

#include <cmath>
#include <functional>
#include <limits>
#include <numbers>
#include <set>

#include "cemformer/error.hpp"
#include "cemformer/kernel/gemm.hpp"
#include "cemformer/loss.hpp"
#include "support.hpp"

using namespace cem;
using namespace cem::kernel;
using cem::testing::bitwise_equal;
using cem::testing::pick;
using cem::testing::probe_loss;
using cem::testing::random_tensor;

namespace {

void check_close(std::span<const double> got, std::initializer_list<double> want, double tol) {
  REQUIRE(got.size() == want.size());
  std::size_t i = 0;
  for (double w : want) {
    CHECK(std::abs(got[i] - w) <= tol);
    ++i;
  }
}

// Runs the central-difference oracle on `build` with inputs as parameters.
GradCheckReport check_op(std::vector<Tensor> inputs, const std::function<Tensor(Tape&)>& build) {
  return finite_diff_grad_check(build, inputs, 1e-5, 1e-4);
}

}  // namespace

TEST_SUITE("tensor") {
  TEST_CASE("shape and values agree") {
    Tensor t({2, 3}, std::vector<double>(6, 1.0));
    CHECK(numel(t.shape()) == t.size());
    CHECK_THROWS_AS(Tensor({2, 3}, std::vector<double>(5)), DimensionError);
    CHECK_THROWS_AS(Tensor({2, 2, 2}, std::vector<double>(8)), DimensionError);
  }

  TEST_CASE("copies alias, clone does not") {
    Tensor a = Tensor::matrix(1, 2, {1, 2});
    Tensor b = a;
    Tensor c = a.clone();
    a.mutable_values()[0] = 9;
    CHECK(b.values()[0] == 9);
    CHECK(c.values()[0] == 1);
  }

  TEST_CASE("grad slot matches value shape") {
    Tensor x = Tensor::matrix(2, 2, {1, 2, 3, 4}, true);
    Tape tape;
    backward(sum(tape, mul(tape, x, x)), tape);
    REQUIRE(x.has_grad());
    CHECK(x.grad().size() == x.size());
  }
}

TEST_SUITE("gemm") {
  TEST_CASE("tiled kernels match the serial reference") {
    std::mt19937_64 rng(11);
    for (int trial = 0; trial < 40; ++trial) {
      const std::size_t m = pick(rng, 1, 45), n = pick(rng, 1, 45), k = pick(rng, 1, 70);
      auto a = random_tensor({m, k}, rng);
      auto b = random_tensor({k, n}, rng);
      auto bt = random_tensor({n, k}, rng);
      auto at = random_tensor({m, n}, rng);
      std::vector<double> fast(m * n, 0.5), slow(m * n, 0.5);
      gemm::nn(m, n, k, a.data(), b.data(), fast.data());
      reference::gemm_nn(m, n, k, a.data(), b.data(), slow.data());
      for (std::size_t i = 0; i < fast.size(); ++i) CHECK(std::abs(fast[i] - slow[i]) <= 1e-12 * (1 + std::abs(slow[i])));

      std::fill(fast.begin(), fast.end(), 0.0);
      std::fill(slow.begin(), slow.end(), 0.0);
      gemm::nt(m, n, k, a.data(), bt.data(), fast.data());
      reference::gemm_nt(m, n, k, a.data(), bt.data(), slow.data());
      for (std::size_t i = 0; i < fast.size(); ++i) CHECK(std::abs(fast[i] - slow[i]) <= 1e-12 * (1 + std::abs(slow[i])));

      std::vector<double> fk(k * n, 0.0), sk(k * n, 0.0);
      gemm::tn(m, n, k, a.data(), at.data(), fk.data());
      reference::gemm_tn(m, n, k, a.data(), at.data(), sk.data());
      for (std::size_t i = 0; i < fk.size(); ++i) CHECK(std::abs(fk[i] - sk[i]) <= 1e-12 * (1 + std::abs(sk[i])));
    }
  }

  TEST_CASE("results do not depend on the thread count") {
    std::mt19937_64 rng(12);
    const std::size_t m = 150, n = 70, k = 90;
    auto a = random_tensor({m, k}, rng);
    auto b = random_tensor({k, n}, rng);
    std::vector<double> one(m * n, 0.0), many(m * n, 0.0);
    const int saved = omp_get_max_threads();
    omp_set_num_threads(1);
    gemm::nn(m, n, k, a.data(), b.data(), one.data());
    omp_set_num_threads(4);
    gemm::nn(m, n, k, a.data(), b.data(), many.data());
    omp_set_num_threads(saved);
    CHECK(bitwise_equal(one, many));
  }
}

TEST_SUITE("matmul") {
  TEST_CASE("identity leaves A unchanged") {
    std::mt19937_64 rng(1);
    auto a = random_tensor({2, 2}, rng);
    Tape tape;
    auto c = matmul(tape, Tensor::matrix(2, 2, {1, 0, 0, 1}), a);
    CHECK(bitwise_equal(c.values(), a.values()));
  }

  TEST_CASE("hand product") {
    Tape tape;
    auto c = matmul(tape, Tensor::matrix(2, 2, {1, 2, 3, 4}), Tensor::matrix(2, 1, {5, 6}));
    CHECK(c.shape() == Shape{2, 1});
    CHECK(c.values()[0] == 17.0);
    CHECK(c.values()[1] == 39.0);
  }

  TEST_CASE("inner mismatch names both shapes") {
    Tape tape;
    try {
      matmul(tape, Tensor::zeros({2, 3}), Tensor::zeros({2, 2}));
      FAIL("expected DimensionError");
    } catch (const DimensionError& e) {
      const std::string what = e.what();
      CHECK(what.find("[2x3]") != std::string::npos);
      CHECK(what.find("[2x2]") != std::string::npos);
    }
  }
}

TEST_SUITE("softmax") {
  TEST_CASE("uniform row") {
    Tape tape;
    auto p = softmax_rows(tape, Tensor::matrix(1, 3, {0, 0, 0}));
    for (double v : p.values()) CHECK(std::abs(v - 1.0 / 3.0) < 1e-15);
  }

  TEST_CASE("log weights give proportional probabilities") {
    Tape tape;
    auto p = softmax_rows(tape, Tensor::matrix(1, 3, {std::log(1.0), std::log(2.0), std::log(3.0)}));
    check_close(p.values(), {1.0 / 6, 2.0 / 6, 3.0 / 6}, 1e-15);
  }

  TEST_CASE("large logits do not overflow") {
    Tape tape;
    auto p = softmax_rows(tape, Tensor::matrix(1, 3, {1000, 0, 0}));
    CHECK(p.values()[0] == doctest::Approx(1.0));
    CHECK(p.values()[1] < 1e-300);
    CHECK(std::isfinite(p.values()[1]));
  }

  TEST_CASE("rows sum to one and ignore a constant shift") {
    std::mt19937_64 rng(3);
    for (int trial = 0; trial < 50; ++trial) {
      const std::size_t r = pick(rng, 1, 6), c = pick(rng, 1, 9);
      auto x = random_tensor({r, c}, rng, 5.0, false);
      auto shifted = x.clone();
      const double k = std::uniform_real_distribution<double>(-50, 50)(rng);
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) shifted.mutable_values()[i * c + j] += k;
      Tape tape(false);
      auto p = softmax_rows(tape, x);
      auto q = softmax_rows(tape, shifted);
      for (std::size_t i = 0; i < r; ++i) {
        double s = 0;
        for (std::size_t j = 0; j < c; ++j) {
          s += p.at(i, j);
          CHECK(p.at(i, j) >= 0.0);
          CHECK(std::abs(p.at(i, j) - q.at(i, j)) <= 1e-12);
        }
        CHECK(std::abs(s - 1.0) <= 1e-12);
      }
    }
  }
}

TEST_SUITE("layer_norm") {
  TEST_CASE("constant row maps to zeros") {
    Tape tape;
    auto y = layer_norm(tape, Tensor::matrix(1, 4, {3, 3, 3, 3}), Tensor({4}, {1, 1, 1, 1}), Tensor({4}, {0, 0, 0, 0}),
                        1e-5);
    for (double v : y.values()) CHECK(v == 0.0);
  }

  TEST_CASE("two-element row") {
    Tape tape;
    auto y = layer_norm(tape, Tensor::matrix(1, 2, {1, 3}), Tensor({2}, {1, 1}), Tensor({2}, {0, 0}), 1e-12);
    check_close(y.values(), {-1.0, 1.0}, 1e-9);
  }

  TEST_CASE("zero gamma collapses to beta") {
    std::mt19937_64 rng(4);
    auto x = random_tensor({3, 5}, rng);
    Tensor beta({5}, {0.1, -0.2, 0.3, -0.4, 0.5});
    Tape tape;
    auto y = layer_norm(tape, x, Tensor::zeros({5}), beta, 1e-5);
    for (std::size_t i = 0; i < 3; ++i)
      for (std::size_t j = 0; j < 5; ++j) CHECK(y.at(i, j) == beta.values()[j]);
  }

  TEST_CASE("rows are standardized before the affine step") {
    std::mt19937_64 rng(5);
    auto x = random_tensor({4, 16}, rng, 3.0);
    Tape tape;
    auto y = layer_norm(tape, x, Tensor({16}, std::vector<double>(16, 1.0)), Tensor::zeros({16}), 1e-12);
    for (std::size_t i = 0; i < 4; ++i) {
      double mean = 0, var = 0;
      for (std::size_t j = 0; j < 16; ++j) mean += y.at(i, j) / 16;
      for (std::size_t j = 0; j < 16; ++j) var += (y.at(i, j) - mean) * (y.at(i, j) - mean) / 16;
      CHECK(std::abs(mean) < 1e-12);
      CHECK(std::abs(var - 1.0) < 1e-9);
    }
  }

  TEST_CASE("eps must be positive") {
    Tape tape;
    CHECK_THROWS_AS(layer_norm(tape, Tensor::matrix(1, 2, {1, 2}), Tensor({2}, {1, 1}), Tensor({2}, {0, 0}), 0.0),
                    ContractError);
  }
}

TEST_SUITE("gelu") {
  // x * Phi(x), with Phi written out independently of the library.
  double oracle(double x) { return x * 0.5 * std::erfc(-x / std::numbers::sqrt2); }

  TEST_CASE("fixed points") {
    Tape tape;
    auto y = gelu(tape, Tensor::matrix(1, 3, {0.0, 10.0, 1.0}));
    CHECK(y.values()[0] == 0.0);
    CHECK(std::abs(y.values()[1] - 10.0) < 1e-20 + 1e-15 * 10);
    CHECK(std::abs(y.values()[2] - oracle(1.0)) < 1e-15);
    CHECK(std::abs(y.values()[2] - 0.8413447460685429) < 1e-15);
  }

  TEST_CASE("matches the erf form on random inputs") {
    std::mt19937_64 rng(6);
    auto x = random_tensor({5, 7}, rng, 3.0, false);
    Tape tape(false);
    auto y = gelu(tape, x);
    for (std::size_t i = 0; i < x.size(); ++i) CHECK(std::abs(y.values()[i] - oracle(x.values()[i])) < 1e-14);
  }
}

TEST_SUITE("concat and slice") {
  TEST_CASE("single part is returned unchanged") {
    std::mt19937_64 rng(7);
    auto a = random_tensor({3, 4}, rng);
    Tape tape;
    const Tensor parts[] = {a};
    CHECK(bitwise_equal(concat_tokens(tape, parts).values(), a.values()));
  }

  TEST_CASE("row counts add") {
    std::mt19937_64 rng(8);
    Tape tape;
    const Tensor parts[] = {random_tensor({3, 4}, rng), random_tensor({5, 4}, rng)};
    CHECK(concat_tokens(tape, parts).rows() == 8);
  }

  TEST_CASE("concat then slice restores the parts bitwise") {
    std::mt19937_64 rng(9);
    for (int trial = 0; trial < 20; ++trial) {
      const std::size_t d = pick(rng, 1, 6);
      std::vector<Tensor> parts;
      for (std::size_t p = 0, n = pick(rng, 1, 4); p < n; ++p) parts.push_back(random_tensor({pick(rng, 1, 5), d}, rng));
      Tape tape;
      auto joined = concat_tokens(tape, parts);
      std::size_t lo = 0;
      for (const auto& p : parts) {
        auto back = slice_tokens(tape, joined, lo, lo + p.rows());
        CHECK(bitwise_equal(back.values(), p.values()));
        lo += p.rows();
      }
      std::vector<Tensor> cols;
      for (std::size_t p = 0; p < 3; ++p) cols.push_back(random_tensor({4, pick(rng, 1, 5)}, rng));
      auto wide = concat_cols(tape, cols);
      std::size_t c0 = 0;
      for (const auto& p : cols) {
        CHECK(bitwise_equal(slice_cols(tape, wide, c0, c0 + p.cols()).values(), p.values()));
        c0 += p.cols();
      }
    }
  }

  TEST_CASE("slice ranges") {
    std::mt19937_64 rng(10);
    auto x = random_tensor({4, 3}, rng);
    Tape tape;
    CHECK(bitwise_equal(slice_tokens(tape, x, 0, 4).values(), x.values()));
    auto empty = slice_tokens(tape, x, 0, 0);
    CHECK(empty.rows() == 0);
    CHECK(empty.cols() == 3);
    CHECK_THROWS_AS(slice_tokens(tape, x, 2, 5), IndexError);
    CHECK_THROWS_AS(slice_tokens(tape, x, 3, 2), IndexError);
  }

  TEST_CASE("width mismatch") {
    Tape tape;
    const Tensor parts[] = {Tensor::zeros({2, 3}), Tensor::zeros({2, 4})};
    CHECK_THROWS_AS(concat_tokens(tape, parts), DimensionError);
  }

  TEST_CASE("slice backward scatters into the source range") {
    std::mt19937_64 rng(13);
    auto x = random_tensor({5, 2}, rng);
    Tape tape;
    backward(sum(tape, slice_tokens(tape, x, 1, 3)), tape);
    for (std::size_t r = 0; r < 5; ++r)
      for (std::size_t c = 0; c < 2; ++c) CHECK(x.grad()[r * 2 + c] == ((r == 1 || r == 2) ? 1.0 : 0.0));
  }
}

TEST_SUITE("backward") {
  TEST_CASE("sum of squares") {
    std::mt19937_64 rng(14);
    auto x = random_tensor({3, 4}, rng);
    Tape tape;
    backward(sum(tape, mul(tape, x, x)), tape);
    for (std::size_t i = 0; i < x.size(); ++i) CHECK(x.grad()[i] == 2.0 * x.values()[i]);
  }

  TEST_CASE("softmax cross-entropy gives p minus onehot") {
    std::mt19937_64 rng(15);
    for (std::size_t y = 0; y < 5; ++y) {
      auto z = random_tensor({1, 5}, rng);
      Tape tape;
      auto p = softmax_rows(tape, z);
      backward(loss::cross_entropy(tape, p, y), tape);
      for (std::size_t j = 0; j < 5; ++j)
        CHECK(std::abs(z.grad()[j] - (p.values()[j] - (j == y ? 1.0 : 0.0))) < 1e-14);
    }
  }

  TEST_CASE("tensors off the tape get no gradient") {
    std::mt19937_64 rng(16);
    auto x = random_tensor({2, 2}, rng);
    auto unused = random_tensor({2, 2}, rng);
    Tape tape;
    backward(sum(tape, x), tape);
    CHECK_FALSE(unused.has_grad());
  }

  TEST_CASE("non-scalar loss is rejected") {
    std::mt19937_64 rng(17);
    auto x = random_tensor({2, 2}, rng);
    Tape tape;
    auto y = scale(tape, x, 2.0);
    CHECK_THROWS_AS(backward(y, tape), ContractError);
  }

  TEST_CASE("reuse accumulates") {
    Tensor w = Tensor::matrix(1, 2, {1.5, -2.0}, true);
    Tape tape;
    // Three uses of the same parameter, like a memory read at three steps.
    const Tensor terms[] = {sum(tape, w), sum(tape, scale(tape, w, 2.0)), sum(tape, mul(tape, w, w))};
    const double weights[] = {1.0, 1.0, 1.0};
    backward(weighted_sum(tape, terms, weights), tape);
    CHECK(w.grad()[0] == 1.0 + 2.0 + 2 * 1.5);
    CHECK(w.grad()[1] == 1.0 + 2.0 - 2 * 2.0);
  }

  TEST_CASE("two runs give bitwise identical gradients") {
    std::mt19937_64 rng(18);
    auto a = random_tensor({4, 6}, rng);
    auto b = random_tensor({6, 3}, rng);
    auto r = random_tensor({4, 3}, rng, 1.0, false);
    Tape tape;
    auto loss = probe_loss(tape, gelu(tape, matmul(tape, a, b)), r);
    backward(loss, tape);
    std::vector<double> first(a.grad().begin(), a.grad().end());
    a.zero_grad();
    b.zero_grad();
    backward(loss, tape);
    CHECK(bitwise_equal(first, a.grad()));
  }

  TEST_CASE("tape log is topological") {
    std::mt19937_64 rng(19);
    auto a = random_tensor({3, 4}, rng);
    auto g = Tensor({4}, std::vector<double>(4, 1.0), true);
    auto b = Tensor::zeros({4}, true);
    Tape tape;
    auto h = gelu(tape, layer_norm(tape, a, g, b, 1e-5));
    probe_loss(tape, h, random_tensor({3, 4}, rng, 1.0, false));
    std::set<std::uint64_t> seen{a.id(), g.id(), b.id()};
    std::set<std::uint64_t> outputs;
    for (const auto& rec : tape.log()) outputs.insert(rec.output);
    for (const auto& rec : tape.log()) {
      for (auto in : rec.inputs)
        if (outputs.count(in)) CHECK(seen.count(in) == 1);
      seen.insert(rec.output);
    }
  }
}

TEST_SUITE("finite differences") {
  TEST_CASE("affine function is exact up to rounding") {
    std::mt19937_64 rng(20);
    auto x = random_tensor({3, 3}, rng);
    auto w = random_tensor({3, 3}, rng, 1.0, false);
    std::vector<Tensor> params{x};
    auto r = finite_diff_grad_check([&](Tape& t) { return probe_loss(t, add(t, x, w), w); }, params, 1e-3, 1e-9);
    CHECK(r.passed);
    CHECK(r.max_rel_error < 1e-9);
  }

  TEST_CASE("two-layer MLP with softmax cross-entropy") {
    std::mt19937_64 rng(21);
    auto x = random_tensor({6, 5}, rng, 1.0, false);
    auto w1 = random_tensor({5, 8}, rng, 0.5);
    auto b1 = random_tensor({8}, rng, 0.1);
    auto w2 = random_tensor({8, 4}, rng, 0.5);
    auto b2 = random_tensor({4}, rng, 0.1);
    const std::vector<std::size_t> labels{0, 1, 2, 3, 1, 2};
    auto build = [&](Tape& t) {
      auto h = gelu(t, add_bias(t, matmul(t, x, w1), b1));
      auto p = softmax_rows(t, add_bias(t, matmul(t, h, w2), b2));
      std::vector<Tensor> terms;
      for (std::size_t i = 0; i < labels.size(); ++i)
        terms.push_back(loss::cross_entropy(t, slice_tokens(t, p, i, i + 1), labels[i]));
      const std::vector<double> w(labels.size(), 1.0 / labels.size());
      return weighted_sum(t, terms, w);
    };
    std::vector<Tensor> params{w1, b1, w2, b2};
    const auto before = std::vector<double>(w1.values().begin(), w1.values().end());
    auto r = finite_diff_grad_check(build, params, 1e-5, 1e-4);
    CHECK(r.passed);
    CHECK(bitwise_equal(before, w1.values()));
  }

  TEST_CASE("step must be positive") {
    std::vector<Tensor> params;
    CHECK_THROWS_AS(finite_diff_grad_check([](Tape&) { return Tensor::scalar(0.0); }, params, 0.0, 1e-4),
                    ContractError);
  }
}

TEST_SUITE("op gradients") {
  constexpr int kTrials = 20;

  TEST_CASE("matmul") {
    std::mt19937_64 rng(100);
    for (int i = 0; i < kTrials; ++i) {
      const std::size_t m = pick(rng, 1, 5), k = pick(rng, 1, 5), n = pick(rng, 1, 5);
      auto a = random_tensor({m, k}, rng), b = random_tensor({k, n}, rng), r = random_tensor({m, n}, rng, 1, false);
      CHECK(check_op({a, b}, [&](Tape& t) { return probe_loss(t, matmul(t, a, b), r); }).passed);
    }
  }

  TEST_CASE("transpose, add, mul, scale") {
    std::mt19937_64 rng(101);
    for (int i = 0; i < kTrials; ++i) {
      const std::size_t m = pick(rng, 1, 5), n = pick(rng, 1, 5);
      auto a = random_tensor({m, n}, rng), b = random_tensor({m, n}, rng);
      auto r = random_tensor({m, n}, rng, 1, false), rt = random_tensor({n, m}, rng, 1, false);
      CHECK(check_op({a}, [&](Tape& t) { return probe_loss(t, transpose(t, a), rt); }).passed);
      CHECK(check_op({a, b}, [&](Tape& t) { return probe_loss(t, add(t, a, b), r); }).passed);
      CHECK(check_op({a, b}, [&](Tape& t) { return probe_loss(t, mul(t, a, b), r); }).passed);
      CHECK(check_op({a}, [&](Tape& t) { return probe_loss(t, scale(t, a, -1.7), r); }).passed);
    }
  }

  TEST_CASE("add_bias, sum, mean_rows, weighted_sum") {
    std::mt19937_64 rng(102);
    for (int i = 0; i < kTrials; ++i) {
      const std::size_t m = pick(rng, 1, 5), n = pick(rng, 1, 5);
      auto x = random_tensor({m, n}, rng), bias = random_tensor({n}, rng);
      auto r = random_tensor({m, n}, rng, 1, false), r1 = random_tensor({1, n}, rng, 1, false);
      CHECK(check_op({x, bias}, [&](Tape& t) { return probe_loss(t, add_bias(t, x, bias), r); }).passed);
      CHECK(check_op({x}, [&](Tape& t) { return probe_loss(t, mean_rows(t, x), r1); }).passed);
      auto s1 = random_tensor({}, rng), s2 = random_tensor({}, rng);
      const double w[] = {0.3, -2.0};
      CHECK(check_op({x, s1, s2}, [&](Tape& t) {
              const Tensor terms[] = {mul(t, s1, s2), sum(t, mul(t, x, r))};
              return weighted_sum(t, terms, w);
            }).passed);
    }
  }

  TEST_CASE("softmax_rows") {
    std::mt19937_64 rng(103);
    for (int i = 0; i < kTrials; ++i) {
      const std::size_t m = pick(rng, 1, 5), n = pick(rng, 1, 6);
      auto x = random_tensor({m, n}, rng, 2.0), r = random_tensor({m, n}, rng, 1, false);
      CHECK(check_op({x}, [&](Tape& t) { return probe_loss(t, softmax_rows(t, x), r); }).passed);
    }
  }

  TEST_CASE("layer_norm") {
    std::mt19937_64 rng(104);
    for (int i = 0; i < kTrials; ++i) {
      const std::size_t m = pick(rng, 1, 5), n = pick(rng, 2, 8);
      auto x = random_tensor({m, n}, rng), g = random_tensor({n}, rng), b = random_tensor({n}, rng);
      auto r = random_tensor({m, n}, rng, 1, false);
      CHECK(check_op({x, g, b}, [&](Tape& t) { return probe_loss(t, layer_norm(t, x, g, b, 1e-5), r); }).passed);
    }
  }

  TEST_CASE("gelu") {
    std::mt19937_64 rng(105);
    for (int i = 0; i < kTrials; ++i) {
      const std::size_t m = pick(rng, 1, 5), n = pick(rng, 1, 6);
      auto x = random_tensor({m, n}, rng, 2.0), r = random_tensor({m, n}, rng, 1, false);
      CHECK(check_op({x}, [&](Tape& t) { return probe_loss(t, gelu(t, x), r); }).passed);
    }
  }

  TEST_CASE("multi_head_attention") {
    std::mt19937_64 rng(106);
    for (int i = 0; i < kTrials; ++i) {
      const std::size_t heads = pick(rng, 1, 3), dh = pick(rng, 1, 4), n = pick(rng, 1, 6);
      auto qkv = random_tensor({n, 3 * heads * dh}, rng), r = random_tensor({n, heads * dh}, rng, 1, false);
      CHECK(check_op({qkv}, [&](Tape& t) { return probe_loss(t, multi_head_attention(t, qkv, heads), r); }).passed);
    }
  }

  TEST_CASE("concat and slice") {
    std::mt19937_64 rng(107);
    for (int i = 0; i < kTrials; ++i) {
      const std::size_t d = pick(rng, 1, 4), n1 = pick(rng, 1, 4), n2 = pick(rng, 1, 4);
      auto a = random_tensor({n1, d}, rng), b = random_tensor({n2, d}, rng);
      auto r = random_tensor({n1 + n2, d}, rng, 1, false);
      CHECK(check_op({a, b}, [&](Tape& t) {
              const Tensor parts[] = {a, b};
              return probe_loss(t, concat_tokens(t, parts), r);
            }).passed);
      auto rs = random_tensor({1, d}, rng, 1, false);
      CHECK(check_op({a}, [&](Tape& t) { return probe_loss(t, slice_tokens(t, a, n1 - 1, n1), rs); }).passed);
      auto rc = random_tensor({n1, 2 * d}, rng, 1, false);
      auto c = random_tensor({n1, d}, rng);
      CHECK(check_op({a, c}, [&](Tape& t) {
              const Tensor parts[] = {a, c};
              return probe_loss(t, concat_cols(t, parts), rc);
            }).passed);
      auto rcs = random_tensor({n1, 1}, rng, 1, false);
      CHECK(check_op({a}, [&](Tape& t) { return probe_loss(t, slice_cols(t, a, d - 1, d), rcs); }).passed);
    }
  }
}

TEST_SUITE("attention op") {
  TEST_CASE("matches per-head softmax(QK^T / sqrt(dh)) V") {
    std::mt19937_64 rng(30);
    const std::size_t n = 5, heads = 2, dh = 3, d = heads * dh;
    auto qkv = random_tensor({n, 3 * d}, rng);
    Tape tape(false);
    std::vector<std::vector<double>> weights;
    auto out = multi_head_attention(tape, qkv, heads, &weights);
    REQUIRE(weights.size() == heads);
    for (std::size_t h = 0; h < heads; ++h) {
      for (std::size_t i = 0; i < n; ++i) {
        std::vector<double> s(n);
        double mx = -1e300, z = 0;
        for (std::size_t j = 0; j < n; ++j) {
          double dot = 0;
          for (std::size_t c = 0; c < dh; ++c) dot += qkv.at(i, h * dh + c) * qkv.at(j, d + h * dh + c);
          s[j] = dot / std::sqrt(static_cast<double>(dh));
          mx = std::max(mx, s[j]);
        }
        for (auto& v : s) z += (v = std::exp(v - mx));
        double row = 0;
        for (std::size_t j = 0; j < n; ++j) {
          s[j] /= z;
          row += weights[h][i * n + j];
          CHECK(std::abs(weights[h][i * n + j] - s[j]) < 1e-14);
        }
        CHECK(std::abs(row - 1.0) < 1e-12);
        for (std::size_t c = 0; c < dh; ++c) {
          double o = 0;
          for (std::size_t j = 0; j < n; ++j) o += s[j] * qkv.at(j, 2 * d + h * dh + c);
          CHECK(std::abs(out.at(i, h * dh + c) - o) < 1e-13);
        }
      }
    }
  }

  TEST_CASE("width must split into heads") {
    Tape tape;
    CHECK_THROWS_AS(multi_head_attention(tape, Tensor::zeros({2, 9}), 2), DimensionError);
  }
}

TEST_SUITE("finiteness") {
  TEST_CASE("overflow raises NumericError") {
    Tape tape;
    auto x = Tensor::matrix(1, 2, {1e308, 1.0});
    CHECK_THROWS_AS(scale(tape, x, 10.0), NumericError);
    CHECK_THROWS_AS(check_finite(Tensor::matrix(1, 2, {std::numeric_limits<double>::quiet_NaN(), 0}), "x"),
                    NumericError);
  }
}
