#include <doctest.h>

#include <cmath>

#include "gradcheck.hpp"
#include "ref_ops.hpp"
#include "ttabench/ops.hpp"
#include "ttabench/rng.hpp"
#include "ttabench/tensor.hpp"

using namespace ttb;
using gradcheck::fd_gradient;
using gradcheck::max_rel_err;
using gradcheck::random_tensor;
using gradcheck::to_double;
using refops::dvec;

namespace {
constexpr double kOpTol = 1e-4;

std::vector<float> random_projection(std::int64_t n, Rng& rng) {
  std::vector<float> r(static_cast<std::size_t>(n));
  for (auto& v : r) v = static_cast<float>(rng.uniform(-1.0, 1.0));
  return r;
}

double project(const dvec& y, const std::vector<float>& r) {
  double acc = 0.0;
  for (std::size_t i = 0; i < y.size(); ++i) acc += y[i] * r[i];
  return acc;
}
}  // namespace

TEST_CASE("tensor basics") {
  Tensor t = Tensor::from_data({2, 3}, {1, 2, 3, 4, 5, 6});
  CHECK(t.numel() == 6);
  CHECK(t.dim(1) == 3);
  Tensor shallow = t;
  shallow.data()[0] = 9.0f;
  CHECK(t.data()[0] == 9.0f);
  Tensor deep = t.clone();
  deep.data()[0] = 1.0f;
  CHECK(t.data()[0] == 9.0f);
  CHECK_THROWS_AS(Tensor::from_data({2, 2}, {1, 2, 3}), shape_error);
  CHECK_THROWS_AS(t.item(), shape_error);
}

TEST_CASE("matmul identity") {
  Rng rng(11);
  Tensor a = random_tensor({3, 3}, rng);
  Tensor eye = Tensor::zeros({3, 3});
  for (int i = 0; i < 3; ++i) eye.data()[i * 3 + i] = 1.0f;
  Tensor out = matmul(eye, a);
  for (int i = 0; i < 9; ++i) CHECK(out.data()[i] == doctest::Approx(a.data()[i]));
}

TEST_CASE("matmul against reference, all transpose cases") {
  Rng rng(5);
  for (bool ta : {false, true}) {
    for (bool tb : {false, true}) {
      const int m = 3, k = 4, n = 5;
      Tensor a = random_tensor(ta ? Shape{k, m} : Shape{m, k}, rng);
      Tensor b = random_tensor(tb ? Shape{n, k} : Shape{k, n}, rng);
      Tensor c = matmul(a, b, ta, tb);
      dvec want = refops::matmul(to_double(a), to_double(b), m, k, n, ta, tb);
      for (std::int64_t i = 0; i < c.numel(); ++i) {
        CHECK(c.data()[i] ==
              doctest::Approx(want[static_cast<std::size_t>(i)]).epsilon(1e-5));
      }
    }
  }
}

TEST_CASE("relu values") {
  Tensor x = Tensor::from_data({3}, {-1.0f, 0.0f, 2.0f});
  Tensor y = relu(x);
  CHECK(y.data()[0] == 0.0f);
  CHECK(y.data()[1] == 0.0f);
  CHECK(y.data()[2] == 2.0f);
}

TEST_CASE("conv2d output extent 32x32 for 3x3 stride 1 pad 1") {
  Rng rng(3);
  Tensor x = random_tensor({1, 3, 32, 32}, rng);
  Tensor w = random_tensor({8, 3, 3, 3}, rng);
  Tensor y = conv2d(x, w, 1, 1);
  CHECK(y.shape() == Shape{1, 8, 32, 32});
}

TEST_CASE("conv2d matches naive reference") {
  Rng rng(7);
  Tensor x = random_tensor({2, 3, 6, 6}, rng);
  Tensor w = random_tensor({4, 3, 3, 3}, rng);
  Tensor y = conv2d(x, w, 1, 1);
  dvec want = refops::conv2d(to_double(x), to_double(w), 2, 3, 6, 6, 4, 3, 3, 1, 1);
  REQUIRE(y.numel() == static_cast<std::int64_t>(want.size()));
  for (std::int64_t i = 0; i < y.numel(); ++i) {
    CHECK(y.data()[i] ==
          doctest::Approx(want[static_cast<std::size_t>(i)]).epsilon(1e-5));
  }
}

TEST_CASE("backward of sum of squares") {
  Tensor x = Tensor::from_data({1, 2}, {1.0f, 2.0f});
  x.set_requires_grad(true);
  Tape tape;
  Tensor loss;
  {
    TapeScope scope(tape);
    loss = matmul(x, x, false, true);  // [1x2] x [1x2]^T = sum of squares
  }
  CHECK(loss.item() == doctest::Approx(5.0));
  backward(loss, tape);
  CHECK(x.grad()[0] == doctest::Approx(2.0));
  CHECK(x.grad()[1] == doctest::Approx(4.0));
}

TEST_CASE("backward requires scalar loss and consumes the tape") {
  Rng rng(2);
  Tensor x = random_tensor({2, 3}, rng);
  x.set_requires_grad(true);
  Tape tape;
  Tensor y;
  {
    TapeScope scope(tape);
    y = relu(x);
  }
  CHECK_THROWS_AS(backward(y, tape), numeric_error);
  Tape tape2;
  Tensor loss;
  {
    TapeScope scope(tape2);
    loss = mean_entropy(random_tensor({2, 4}, rng));
  }
  Tensor l2 = loss;
  backward(loss, tape2);
  CHECK(tape2.consumed());
  CHECK_THROWS_AS(tape2.backward_from(l2), numeric_error);
}

// ---------------------------------------------------------------------------
// finite-difference gradient checks, one per differentiable op

TEST_CASE("gradcheck: matmul") {
  Rng rng(21);
  Tensor a = random_tensor({3, 4}, rng);
  Tensor b = random_tensor({4, 5}, rng);
  a.set_requires_grad(true);
  b.set_requires_grad(true);
  Tape tape;
  Tensor y;
  {
    TapeScope scope(tape);
    y = matmul(a, b);
  }
  auto r = random_projection(y.numel(), rng);
  tape.backward_seeded(y, r);
  const dvec b0 = to_double(b);
  auto fa = [&](const dvec& av) {
    return project(refops::matmul(av, b0, 3, 4, 5), r);
  };
  const dvec a0 = to_double(a);
  auto fb = [&](const dvec& bv) {
    return project(refops::matmul(a0, bv, 3, 4, 5), r);
  };
  CHECK(max_rel_err(a.grad(), fd_gradient(fa, a0)) < kOpTol);
  CHECK(max_rel_err(b.grad(), fd_gradient(fb, b0)) < kOpTol);
}

TEST_CASE("gradcheck: conv2d") {
  Rng rng(22);
  Tensor x = random_tensor({2, 3, 6, 6}, rng);
  Tensor w = random_tensor({4, 3, 3, 3}, rng);
  x.set_requires_grad(true);
  w.set_requires_grad(true);
  Tape tape;
  Tensor y;
  {
    TapeScope scope(tape);
    y = conv2d(x, w, 1, 1);
  }
  auto r = random_projection(y.numel(), rng);
  tape.backward_seeded(y, r);
  const dvec x0 = to_double(x), w0 = to_double(w);
  auto fx = [&](const dvec& v) {
    return project(refops::conv2d(v, w0, 2, 3, 6, 6, 4, 3, 3, 1, 1), r);
  };
  auto fw = [&](const dvec& v) {
    return project(refops::conv2d(x0, v, 2, 3, 6, 6, 4, 3, 3, 1, 1), r);
  };
  CHECK(max_rel_err(x.grad(), fd_gradient(fx, x0)) < kOpTol);
  CHECK(max_rel_err(w.grad(), fd_gradient(fw, w0)) < kOpTol);
}

TEST_CASE("gradcheck: relu / max_pool / global_avg_pool") {
  Rng rng(23);
  {
    Tensor x = random_tensor({3, 7}, rng);
    x.set_requires_grad(true);
    Tape tape;
    Tensor y;
    {
      TapeScope scope(tape);
      y = relu(x);
    }
    auto r = random_projection(y.numel(), rng);
    tape.backward_seeded(y, r);
    auto f = [&](const dvec& v) { return project(refops::relu(v), r); };
    CHECK(max_rel_err(x.grad(), fd_gradient(f, to_double(x))) < kOpTol);
  }
  {
    Tensor x = random_tensor({2, 3, 6, 6}, rng);
    x.set_requires_grad(true);
    Tape tape;
    Tensor y;
    {
      TapeScope scope(tape);
      y = max_pool(x, 2, 2);
    }
    auto r = random_projection(y.numel(), rng);
    tape.backward_seeded(y, r);
    auto f = [&](const dvec& v) {
      return project(refops::max_pool(v, 2, 3, 6, 6, 2, 2), r);
    };
    CHECK(max_rel_err(x.grad(), fd_gradient(f, to_double(x), 1e-4)) < kOpTol);
  }
  {
    Tensor x = random_tensor({2, 4, 3, 3}, rng);
    x.set_requires_grad(true);
    Tape tape;
    Tensor y;
    {
      TapeScope scope(tape);
      y = global_avg_pool(x);
    }
    auto r = random_projection(y.numel(), rng);
    tape.backward_seeded(y, r);
    auto f = [&](const dvec& v) {
      return project(refops::global_avg_pool(v, 2, 4, 9), r);
    };
    CHECK(max_rel_err(x.grad(), fd_gradient(f, to_double(x))) < kOpTol);
  }
}

TEST_CASE("gradcheck: batch_norm, both normalization modes") {
  Rng rng(24);
  for (bool batch_mode : {true, false}) {
    Tensor x = random_tensor({3, 4, 2, 2}, rng);
    Tensor gamma = random_tensor({4}, rng, 0.5, 1.5);
    Tensor beta = random_tensor({4}, rng, -0.5, 0.5);
    Tensor rmean = random_tensor({4}, rng, -0.2, 0.2);
    Tensor rvar = random_tensor({4}, rng, 0.5, 1.5);
    x.set_requires_grad(true);
    gamma.set_requires_grad(true);
    beta.set_requires_grad(true);
    BatchNormOpts opts;
    opts.mode = batch_mode ? NormMode::kBatchStats : NormMode::kRunningStats;
    opts.update_running = false;
    Tape tape;
    Tensor y;
    {
      TapeScope scope(tape);
      y = batch_norm(x, gamma, beta, rmean, rvar, opts);
    }
    auto r = random_projection(y.numel(), rng);
    tape.backward_seeded(y, r);
    const dvec x0 = to_double(x), g0 = to_double(gamma), b0 = to_double(beta);
    const dvec rm0 = to_double(rmean), rv0 = to_double(rvar);
    auto fx = [&](const dvec& v) {
      return project(refops::batch_norm(v, g0, b0, rm0, rv0, 3, 4, 4, batch_mode), r);
    };
    auto fg = [&](const dvec& v) {
      return project(refops::batch_norm(x0, v, b0, rm0, rv0, 3, 4, 4, batch_mode), r);
    };
    auto fb = [&](const dvec& v) {
      return project(refops::batch_norm(x0, g0, v, rm0, rv0, 3, 4, 4, batch_mode), r);
    };
    CHECK(max_rel_err(x.grad(), fd_gradient(fx, x0, 1e-4)) < kOpTol);
    CHECK(max_rel_err(gamma.grad(), fd_gradient(fg, g0)) < kOpTol);
    CHECK(max_rel_err(beta.grad(), fd_gradient(fb, b0)) < kOpTol);
  }
}

TEST_CASE("gradcheck: linear_bias_add / softmax / log_softmax / add / scale") {
  Rng rng(25);
  {
    Tensor x = random_tensor({3, 5}, rng);
    Tensor b = random_tensor({5}, rng);
    x.set_requires_grad(true);
    b.set_requires_grad(true);
    Tape tape;
    Tensor y;
    {
      TapeScope scope(tape);
      y = linear_bias_add(x, b);
    }
    auto r = random_projection(y.numel(), rng);
    tape.backward_seeded(y, r);
    const dvec x0 = to_double(x), b0 = to_double(b);
    auto fb = [&](const dvec& v) {
      return project(refops::linear_bias_add(x0, v, 3, 5), r);
    };
    CHECK(max_rel_err(b.grad(), fd_gradient(fb, b0)) < kOpTol);
  }
  for (bool log_mode : {false, true}) {
    Tensor x = random_tensor({4, 6}, rng);
    x.set_requires_grad(true);
    Tape tape;
    Tensor y;
    {
      TapeScope scope(tape);
      y = log_mode ? log_softmax(x) : softmax(x);
    }
    auto r = random_projection(y.numel(), rng);
    tape.backward_seeded(y, r);
    auto f = [&](const dvec& v) {
      return project(log_mode ? refops::log_softmax_rows(v, 4, 6)
                              : refops::softmax_rows(v, 4, 6),
                     r);
    };
    CHECK(max_rel_err(x.grad(), fd_gradient(f, to_double(x))) < kOpTol);
  }
  {
    Tensor a = random_tensor({2, 3}, rng);
    Tensor b = random_tensor({2, 3}, rng);
    a.set_requires_grad(true);
    b.set_requires_grad(true);
    Tape tape;
    Tensor y;
    {
      TapeScope scope(tape);
      y = scalar_scale(elementwise_add(a, b), 2.5f);
    }
    auto r = random_projection(y.numel(), rng);
    tape.backward_seeded(y, r);
    for (std::int64_t i = 0; i < a.numel(); ++i) {
      CHECK(a.grad()[i] == doctest::Approx(2.5f * r[static_cast<std::size_t>(i)]));
      CHECK(b.grad()[i] == doctest::Approx(2.5f * r[static_cast<std::size_t>(i)]));
    }
  }
}

// ---------------------------------------------------------------------------
// entropy and loss ops

TEST_CASE("mean_entropy trivial values") {
  // all-equal logits, C=10 -> ln 10
  Tensor uniform10 = Tensor::zeros({3, 10});
  CHECK(mean_entropy(uniform10).item() == doctest::Approx(std::log(10.0)).epsilon(1e-6));
  // one-hot limit
  Tensor hot = Tensor::zeros({1, 10});
  hot.data()[3] = 1000.0f;
  CHECK(mean_entropy(hot).item() == doctest::Approx(0.0).epsilon(1e-6));
  // [0, 0] rows, C=2 -> ln 2
  Tensor half = Tensor::zeros({4, 2});
  CHECK(mean_entropy(half).item() == doctest::Approx(std::log(2.0)).epsilon(1e-6));
}

TEST_CASE("gradcheck: mean_entropy on random 4x10 logits") {
  Rng rng(26);
  Tensor x = random_tensor({4, 10}, rng, -2.0, 2.0);
  x.set_requires_grad(true);
  Tape tape;
  Tensor loss;
  {
    TapeScope scope(tape);
    loss = mean_entropy(x);
  }
  backward(loss, tape);
  auto f = [&](const dvec& v) { return refops::mean_entropy(v, 4, 10); };
  CHECK(max_rel_err(x.grad(), fd_gradient(f, to_double(x), 1e-3)) < 1e-4);
}

TEST_CASE("gradcheck: weighted mean_entropy, cross_entropy, diversity term") {
  Rng rng(27);
  {
    Tensor x = random_tensor({5, 6}, rng, -2.0, 2.0);
    x.set_requires_grad(true);
    std::vector<float> w = {1.0f, 0.0f, 1.0f, 1.0f, 0.0f};
    Tape tape;
    Tensor loss;
    {
      TapeScope scope(tape);
      loss = mean_entropy_weighted(x, w);
    }
    backward(loss, tape);
    dvec wd(w.begin(), w.end());
    auto f = [&](const dvec& v) { return refops::mean_entropy(v, 5, 6, &wd); };
    CHECK(max_rel_err(x.grad(), fd_gradient(f, to_double(x))) < kOpTol);
  }
  {
    Tensor x = random_tensor({4, 7}, rng, -2.0, 2.0);
    x.set_requires_grad(true);
    std::vector<int> labels = {1, 0, 6, 3};
    Tape tape;
    Tensor loss;
    {
      TapeScope scope(tape);
      loss = cross_entropy_mean(x, labels, 0.1f);
    }
    backward(loss, tape);
    auto f = [&](const dvec& v) {
      return refops::cross_entropy_mean(v, labels, 4, 7, 0.1);
    };
    CHECK(max_rel_err(x.grad(), fd_gradient(f, to_double(x))) < kOpTol);
  }
  {
    Tensor x = random_tensor({4, 6}, rng, -2.0, 2.0);
    x.set_requires_grad(true);
    Tape tape;
    Tensor loss;
    {
      TapeScope scope(tape);
      loss = mean_softmax_entropy(x);
    }
    backward(loss, tape);
    auto f = [&](const dvec& v) { return refops::mean_softmax_entropy(v, 4, 6); };
    CHECK(max_rel_err(x.grad(), fd_gradient(f, to_double(x))) < kOpTol);
    // uniform mean prediction over C contributes ln C
    Tensor flat = Tensor::zeros({2, 10});
    CHECK(mean_softmax_entropy(flat).item() ==
          doctest::Approx(std::log(10.0)).epsilon(1e-6));
  }
}

// ---------------------------------------------------------------------------
// batch_norm semantics

TEST_CASE("batch_norm running-stats mode is pure") {
  Rng rng(31);
  Tensor x = random_tensor({4, 3, 5, 5}, rng);
  Tensor gamma = Tensor::full({3}, 1.0f);
  Tensor beta = Tensor::zeros({3});
  Tensor rmean = random_tensor({3}, rng, -0.1, 0.1);
  Tensor rvar = random_tensor({3}, rng, 0.8, 1.2);
  const std::uint64_t h_mean = rmean.content_hash();
  const std::uint64_t h_var = rvar.content_hash();
  BatchNormOpts opts;
  opts.mode = NormMode::kRunningStats;
  Tensor y1 = batch_norm(x, gamma, beta, rmean, rvar, opts);
  Tensor y2 = batch_norm(x, gamma, beta, rmean, rvar, opts);
  CHECK(y1.content_hash() == y2.content_hash());
  CHECK(rmean.content_hash() == h_mean);
  CHECK(rvar.content_hash() == h_var);
}

TEST_CASE("batch_norm batch mode updates running stats") {
  Rng rng(32);
  Tensor x = random_tensor({4, 3, 5, 5}, rng);
  Tensor gamma = Tensor::full({3}, 1.0f);
  Tensor beta = Tensor::zeros({3});
  Tensor rmean = Tensor::zeros({3});
  Tensor rvar = Tensor::full({3}, 1.0f);
  BatchNormOpts opts;
  opts.mode = NormMode::kBatchStats;
  opts.momentum = 0.1f;
  batch_norm(x, gamma, beta, rmean, rvar, opts);
  bool changed = false;
  for (int c = 0; c < 3; ++c) {
    if (rmean.data()[c] != 0.0f || rvar.data()[c] != 1.0f) changed = true;
  }
  CHECK(changed);
}

TEST_CASE("batch_norm B=1 with per-channel-constant input normalizes to zero") {
  // Constant planes make the batch variance exactly zero, so pre-affine
  // activations are zero and the output equals beta.
  Tensor x = Tensor::zeros({1, 2, 4, 4});
  for (int i = 0; i < 16; ++i) x.data()[i] = 0.7f;
  for (int i = 16; i < 32; ++i) x.data()[i] = -1.3f;
  Tensor gamma = Tensor::full({2}, 2.0f);
  Tensor beta = Tensor::from_data({2}, {0.25f, -0.5f});
  Tensor rmean = Tensor::zeros({2});
  Tensor rvar = Tensor::full({2}, 1.0f);
  BatchNormOpts opts;
  opts.mode = NormMode::kBatchStats;
  opts.update_running = false;
  Tensor y = batch_norm(x, gamma, beta, rmean, rvar, opts);
  for (int i = 0; i < 16; ++i) CHECK(y.data()[i] == doctest::Approx(0.25f));
  for (int i = 16; i < 32; ++i) CHECK(y.data()[i] == doctest::Approx(-0.5f));
}

TEST_CASE("instance-aware mode: soft shrink and purity") {
  CHECK(soft_shrink(0.5f, 1.0f) == 0.0f);
  CHECK(soft_shrink(3.0f, 1.0f) == 2.0f);
  CHECK(soft_shrink(-3.0f, 1.0f) == -2.0f);
  Rng rng(33);
  Tensor x = random_tensor({2, 3, 4, 4}, rng);
  Tensor gamma = Tensor::full({3}, 1.0f);
  Tensor beta = Tensor::zeros({3});
  Tensor rmean = Tensor::zeros({3});
  Tensor rvar = Tensor::full({3}, 1.0f);
  const std::uint64_t h0 = rmean.content_hash() ^ rvar.content_hash();
  BatchNormOpts opts;
  opts.mode = NormMode::kInstanceAware;
  Tensor y1 = batch_norm(x, gamma, beta, rmean, rvar, opts);
  Tensor y2 = batch_norm(x, gamma, beta, rmean, rvar, opts);
  CHECK(y1.content_hash() == y2.content_hash());
  CHECK((rmean.content_hash() ^ rvar.content_hash()) == h0);
}

// ---------------------------------------------------------------------------
// dispatcher and error contracts

TEST_CASE("forward_op dispatcher validates inputs") {
  Rng rng(41);
  Tensor a = random_tensor({2, 3}, rng);
  Tensor bad = random_tensor({2, 3}, rng);
  bad.data()[1] = std::numeric_limits<float>::quiet_NaN();
  std::vector<Tensor> ok = {a, random_tensor({3, 4}, rng)};
  OpCtx ctx;
  Tensor y = forward_op(OpKind::kMatmul, ok, ctx);
  CHECK(y.shape() == Shape{2, 4});
  std::vector<Tensor> nan_in = {bad, random_tensor({3, 4}, rng)};
  CHECK_THROWS_AS(forward_op(OpKind::kMatmul, nan_in, ctx), numeric_error);
  std::vector<Tensor> mismatched = {a, random_tensor({4, 2}, rng)};
  CHECK_THROWS_WITH_AS(forward_op(OpKind::kMatmul, mismatched, ctx),
                       doctest::Contains("matmul"), shape_error);
}

TEST_CASE("op counters record forwards and backwards") {
  OpCounters counters;
  CounterScope scope(counters);
  Rng rng(42);
  Tensor x = random_tensor({2, 4}, rng);
  x.set_requires_grad(true);
  Tape tape;
  Tensor loss;
  {
    TapeScope ts(tape);
    loss = mean_entropy(x);
  }
  backward(loss, tape);
  CHECK(counters.forward[static_cast<std::size_t>(OpKind::kMeanEntropy)] == 1);
  CHECK(counters.backward_passes == 1);
  CHECK(counters.tape_nodes == 1);
}

// ---------------------------------------------------------------------------
// allocator

TEST_CASE("allocator counters") {
  auto stats = std::make_shared<AllocStats>();
  {
    MemoryScope scope(stats);
    AllocSnapshot empty = alloc_stats();
    CHECK(empty.live_bytes == 0);
    CHECK(empty.peak_bytes == 0);
    {
      Tensor img = Tensor::zeros({3, 32, 32});
      AllocSnapshot s = alloc_stats();
      CHECK(s.live_bytes >= 12288);  // 3072 elements x 4 bytes
      CHECK(s.peak_bytes >= s.live_bytes);
    }
    {
      Tensor big = Tensor::zeros({262144});  // 1 MiB
    }
    AllocSnapshot after = alloc_stats();
    CHECK(after.live_bytes < after.peak_bytes);
    CHECK(after.live_bytes == 0);
    reset_peak();
    CHECK(alloc_stats().peak_bytes == 0);
  }
}

TEST_CASE("allocator peak is an upper envelope of live") {
  auto stats = std::make_shared<AllocStats>();
  MemoryScope scope(stats);
  Rng rng(43);
  std::vector<Tensor> held;
  for (int i = 0; i < 50; ++i) {
    AllocSnapshot s = alloc_stats();
    CHECK(s.peak_bytes >= s.live_bytes);
    if (rng.next_float() < 0.6f || held.empty()) {
      held.push_back(Tensor::zeros({static_cast<int>(rng.next_below(2000)) + 1}));
    } else {
      held.pop_back();
    }
  }
}

TEST_CASE("determinism: same seed and op sequence produce identical bytes") {
  auto run = [] {
    Rng rng(99);
    Tensor x = random_tensor({4, 3, 8, 8}, rng);
    Tensor w = random_tensor({5, 3, 3, 3}, rng);
    Tensor y = conv2d(x, w, 1, 1);
    Tensor p = max_pool(y, 2, 2);
    Tensor g = global_avg_pool(p);
    Tensor sm = softmax(g);
    return sm.content_hash();
  };
  CHECK(run() == run());
}
