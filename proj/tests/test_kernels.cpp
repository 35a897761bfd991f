#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <vector>

#include "ipslt/kernels.hpp"
#include "ipslt/rng.hpp"

namespace k = ipslt::kernels;
using ipslt::Rng;

namespace {

std::vector<float> random_vec(Rng& rng, std::size_t n) {
  std::vector<float> v(n);
  for (auto& x : v) x = static_cast<float>(rng.normal());
  return v;
}

// Force the parallel path regardless of size so the comparison is real.
struct ForceParallel {
  std::size_t saved;
  ForceParallel() : saved(k::parallel_min_work()) {
    k::set_parallel_min_work(0);
    k::set_parallel_enabled(true);
  }
  ~ForceParallel() { k::set_parallel_min_work(saved); }
};

}  // namespace

TEST_CASE("parallel matmul variants match the serial reference bitwise") {
  Rng rng(11);
  for (auto [m, kk, n] : {std::tuple{1, 1, 1}, std::tuple{3, 5, 7},
                          std::tuple{17, 33, 9}, std::tuple{64, 64, 64}}) {
    auto a = random_vec(rng, static_cast<std::size_t>(m) * kk);
    auto b = random_vec(rng, static_cast<std::size_t>(kk) * n);
    auto bt = random_vec(rng, static_cast<std::size_t>(n) * kk);
    auto at = random_vec(rng, static_cast<std::size_t>(kk) * m);
    std::vector<float> c_ser(static_cast<std::size_t>(m) * n, 0.5f);
    std::vector<float> c_par = c_ser;

    for (bool acc : {false, true}) {
      c_ser.assign(c_ser.size(), 0.5f);
      c_par.assign(c_par.size(), 0.5f);
      k::serial::matmul_nn(a.data(), b.data(), c_ser.data(), m, kk, n, acc);
      {
        ForceParallel fp;
        k::matmul_nn(a.data(), b.data(), c_par.data(), m, kk, n, acc);
      }
      CHECK(c_ser == c_par);

      c_ser.assign(c_ser.size(), 0.5f);
      c_par.assign(c_par.size(), 0.5f);
      k::serial::matmul_nt(a.data(), bt.data(), c_ser.data(), m, kk, n, acc);
      {
        ForceParallel fp;
        k::matmul_nt(a.data(), bt.data(), c_par.data(), m, kk, n, acc);
      }
      CHECK(c_ser == c_par);

      c_ser.assign(c_ser.size(), 0.5f);
      c_par.assign(c_par.size(), 0.5f);
      k::serial::matmul_tn(at.data(), b.data(), c_ser.data(), m, kk, n, acc);
      {
        ForceParallel fp;
        k::matmul_tn(at.data(), b.data(), c_par.data(), m, kk, n, acc);
      }
      CHECK(c_ser == c_par);
    }
  }
}

TEST_CASE("matmul_nn computes a hand example") {
  // [[1,2],[3,4]] x [[2,0],[1,2]] = [[4,4],[10,8]]
  std::vector<float> a{1, 2, 3, 4}, b{2, 0, 1, 2}, c(4, 0.f);
  k::serial::matmul_nn(a.data(), b.data(), c.data(), 2, 2, 2, false);
  CHECK(c == std::vector<float>{4, 4, 10, 8});
}

TEST_CASE("parallel row_softmax matches serial bitwise") {
  Rng rng(13);
  for (auto [rows, cols] : {std::pair{1, 4}, std::pair{37, 19}, std::pair{128, 64}}) {
    auto x = random_vec(rng, static_cast<std::size_t>(rows) * cols);
    std::vector<float> ys(x.size()), yp(x.size());
    k::serial::row_softmax(x.data(), ys.data(), rows, cols);
    {
      ForceParallel fp;
      k::row_softmax(x.data(), yp.data(), rows, cols);
    }
    CHECK(ys == yp);
  }
}

TEST_CASE("parallel adam_update matches serial bitwise") {
  Rng rng(17);
  const std::size_t n = 1023;
  auto p0 = random_vec(rng, n);
  auto g = random_vec(rng, n);
  std::vector<float> m0(n, 0.f), v0(n, 0.f);
  auto ps = p0, pp = p0;
  auto ms = m0, mp = m0;
  auto vs = v0, vp = v0;
  const float lr = 1e-3f, b1 = 0.9f, b2 = 0.999f, eps = 1e-8f;
  for (int step = 1; step <= 3; ++step) {
    const float bias1 = 1.f - std::pow(b1, static_cast<float>(step));
    const float bias2 = 1.f - std::pow(b2, static_cast<float>(step));
    k::serial::adam_update(ps.data(), g.data(), ms.data(), vs.data(), n, lr,
                           b1, b2, eps, bias1, bias2);
    ForceParallel fp;
    k::adam_update(pp.data(), g.data(), mp.data(), vp.data(), n, lr, b1, b2,
                   eps, bias1, bias2);
    CHECK(ps == pp);
    CHECK(ms == mp);
    CHECK(vs == vp);
  }
}

TEST_CASE("disabling parallelism routes through the serial path") {
  k::set_parallel_enabled(false);
  CHECK_FALSE(k::parallel_enabled());
  std::vector<float> a{1, 2}, b{3, 4}, c(1, 0.f);
  k::matmul_nn(a.data(), b.data(), c.data(), 1, 2, 1, false);
  CHECK(c[0] == doctest::Approx(11.f));
  k::set_parallel_enabled(true);
}
