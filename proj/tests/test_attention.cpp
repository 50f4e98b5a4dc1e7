#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <limits>
#include <random>

#include "bdlab/attention.hpp"
#include "bdlab/errors.hpp"

using namespace bdlab;

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

AttentionParams random_params(std::size_t d, std::uint64_t seed, double stddev = 0.5) {
  std::mt19937_64 rng(seed);
  AttentionParams p;
  p.q.weight = gaussian({d, d}, stddev, rng, false);
  p.k.weight = gaussian({d, d}, stddev, rng, false);
  p.v.weight = gaussian({d, d}, stddev, rng, false);
  p.o.weight = gaussian({d, d}, stddev, rng, false);
  return p;
}

Tensor random_input(Shape shape, std::uint64_t seed, bool grad = false) {
  std::mt19937_64 rng(seed);
  return gaussian(std::move(shape), 1.0, rng, grad);
}

// Rotates one pair the textbook way.
void rotate_pair(double& a, double& b, double angle) {
  const double x = a * std::cos(angle) - b * std::sin(angle);
  const double y = a * std::sin(angle) + b * std::cos(angle);
  a = x;
  b = y;
}

}  // namespace

TEST_CASE("causal_mask examples") {
  const auto one = causal_mask(1);
  CHECK(one.matrix.at({0, 0}) == 0.0);
  const auto three = causal_mask(3);
  const double want[3][3] = {{0, -kInf, -kInf}, {0, 0, -kInf}, {0, 0, 0}};
  for (std::size_t i = 0; i < 3; ++i) {
    for (std::size_t j = 0; j < 3; ++j) CHECK(three.matrix.at({i, j}) == want[i][j]);
  }
  const auto two = causal_mask(2);
  CHECK(two.blocked(0, 1));
  CHECK(!two.blocked(1, 0));
  CHECK_THROWS_AS(causal_mask(0), ContractError);
}

TEST_CASE("bidirectional_mask is the causal mask with the upper triangle cleared") {
  for (std::size_t n : {1u, 2u, 5u}) {
    const auto b = bidirectional_mask(n);
    for (double v : b.matrix.data()) CHECK(v == 0.0);
  }
}

TEST_CASE("combine_padding examples") {
  const auto base = causal_mask(3);
  const auto same = combine_padding(base, {false, false, false});
  for (std::size_t i = 0; i < 9; ++i) CHECK(same.matrix.data()[i] == base.matrix.data()[i]);

  const auto tok_pad = combine_padding(causal_mask(2), {false, true});
  CHECK(tok_pad.matrix.at({0, 0}) == 0.0);
  CHECK(tok_pad.matrix.at({0, 1}) == -kInf);
  CHECK(tok_pad.matrix.at({1, 0}) == -kInf);
  CHECK(tok_pad.matrix.at({1, 1}) == 0.0);

  const auto all_pad = combine_padding(bidirectional_mask(3), {true, true, true});
  for (std::size_t i = 0; i < 3; ++i) {
    for (std::size_t j = 0; j < 3; ++j) CHECK(all_pad.matrix.at({i, j}) == (i == j ? 0.0 : -kInf));
  }
  CHECK_THROWS_AS(combine_padding(base, {false}), DimensionError);
}

TEST_CASE("rope_rotate matches the textbook rotation") {
  const auto x = random_input({2, 5, 4}, 3);
  const auto y = rope_rotate(x, 10000.0);
  for (std::size_t h = 0; h < 2; ++h) {
    for (std::size_t t = 0; t < 5; ++t) {
      for (std::size_t i = 0; i < 2; ++i) {
        double a = x.at({h, t, 2 * i});
        double b = x.at({h, t, 2 * i + 1});
        rotate_pair(a, b, static_cast<double>(t) * std::pow(10000.0, -2.0 * static_cast<double>(i) / 4.0));
        CHECK(std::abs(y.at({h, t, 2 * i}) - a) < 1e-12);
        CHECK(std::abs(y.at({h, t, 2 * i + 1}) - b) < 1e-12);
      }
    }
  }
}

TEST_CASE("rope_rotate: position 0 unchanged, pair norms preserved") {
  const auto x = random_input({3, 6, 8}, 4);
  const auto y = rope_rotate(x);
  for (std::size_t h = 0; h < 3; ++h) {
    for (std::size_t d = 0; d < 8; ++d) CHECK(y.at({h, 0, d}) == x.at({h, 0, d}));
    for (std::size_t t = 0; t < 6; ++t) {
      for (std::size_t i = 0; i < 4; ++i) {
        const double before = std::hypot(x.at({h, t, 2 * i}), x.at({h, t, 2 * i + 1}));
        const double after = std::hypot(y.at({h, t, 2 * i}), y.at({h, t, 2 * i + 1}));
        CHECK(std::abs(before - after) < 1e-12);
      }
    }
  }
  CHECK_THROWS_AS(rope_rotate(random_input({2, 3}, 1)), ConfigError);
}

TEST_CASE("rope scores depend only on relative position") {
  const std::size_t d = 8;
  const std::size_t seq = 12;
  const auto qv = random_input({d}, 5);
  const auto kv = random_input({d}, 6);
  // Place q at row i and k at row j of otherwise-zero sequences.
  auto score = [&](std::size_t i, std::size_t j) {
    std::vector<double> qs(seq * d, 0.0), ks(seq * d, 0.0);
    std::copy(qv.data().begin(), qv.data().end(), qs.begin() + static_cast<std::ptrdiff_t>(i * d));
    std::copy(kv.data().begin(), kv.data().end(), ks.begin() + static_cast<std::ptrdiff_t>(j * d));
    const auto rq = rope_rotate(Tensor::from({seq, d}, qs));
    const auto rk = rope_rotate(Tensor::from({seq, d}, ks));
    double dot = 0.0;
    for (std::size_t c = 0; c < d; ++c) dot += rq.at({i, c}) * rk.at({j, c});
    return dot;
  };
  for (std::size_t i = 0; i < 4; ++i) {
    for (std::size_t j = 0; j < 4; ++j) {
      for (std::size_t s : {1u, 2u, 5u}) CHECK(std::abs(score(i, j) - score(i + s, j + s)) < 1e-9);
    }
  }
}

TEST_CASE("attend on one token returns the projected value row") {
  const std::size_t d = 4;
  const auto params = random_params(d, 7);
  const auto x = random_input({1, d}, 8);
  const auto out = attend(x, params, causal_mask(1), {2, 10000.0});
  CHECK(out.weights.shape() == Shape{2, 1, 1});
  CHECK(out.weights.data()[0] == 1.0);
  CHECK(out.weights.data()[1] == 1.0);
  const auto want = matmul(matmul(x, params.v.weight), params.o.weight);
  for (std::size_t i = 0; i < d; ++i) CHECK(std::abs(out.values.data()[i] - want.data()[i]) < 1e-12);
}

TEST_CASE("attend matches a direct evaluation of the formula on two tokens") {
  const std::size_t d = 4;
  const std::size_t heads = 2;
  const std::size_t dh = d / heads;
  const auto params = random_params(d, 9);
  const auto x = random_input({2, d}, 10);
  const auto out = attend(x, params, causal_mask(2), {heads, 10000.0});

  auto project = [&](const Tensor& w) {
    std::vector<double> y(2 * d, 0.0);
    for (std::size_t t = 0; t < 2; ++t) {
      for (std::size_t j = 0; j < d; ++j) {
        for (std::size_t i = 0; i < d; ++i) y[t * d + j] += x.at({t, i}) * w.at({i, j});
      }
    }
    return y;
  };
  auto q = project(params.q.weight);
  auto k = project(params.k.weight);
  const auto v = project(params.v.weight);
  for (std::size_t t = 0; t < 2; ++t) {
    for (std::size_t h = 0; h < heads; ++h) {
      // Head-local pair i rotates by t * base^(-2i/dh).
      for (std::size_t i = 0; i < dh / 2; ++i) {
        const double angle = static_cast<double>(t) * std::pow(10000.0, -2.0 * static_cast<double>(i) / dh);
        rotate_pair(q[t * d + h * dh + 2 * i], q[t * d + h * dh + 2 * i + 1], angle);
        rotate_pair(k[t * d + h * dh + 2 * i], k[t * d + h * dh + 2 * i + 1], angle);
      }
    }
  }
  std::vector<double> context(2 * d, 0.0);
  for (std::size_t h = 0; h < heads; ++h) {
    for (std::size_t t = 0; t < 2; ++t) {
      double s[2];
      for (std::size_t u = 0; u < 2; ++u) {
        double dot = 0.0;
        for (std::size_t c = 0; c < dh; ++c) dot += q[t * d + h * dh + c] * k[u * d + h * dh + c];
        s[u] = dot / std::sqrt(static_cast<double>(dh));
      }
      const double w0 = t == 0 ? 1.0 : std::exp(s[0]) / (std::exp(s[0]) + std::exp(s[1]));
      const double w1 = 1.0 - w0;
      CHECK(std::abs(out.weights.at({h, t, 0}) - w0) < 1e-10);
      CHECK(std::abs(out.weights.at({h, t, 1}) - w1) < 1e-10);
      for (std::size_t c = 0; c < dh; ++c) {
        context[t * d + h * dh + c] = w0 * v[0 * d + h * dh + c] + w1 * v[1 * d + h * dh + c];
      }
    }
  }
  for (std::size_t t = 0; t < 2; ++t) {
    for (std::size_t j = 0; j < d; ++j) {
      double y = 0.0;
      for (std::size_t i = 0; i < d; ++i) y += context[t * d + i] * params.o.weight.at({i, j});
      CHECK(std::abs(out.values.at({t, j}) - y) < 1e-10);
    }
  }
}

TEST_CASE("attention weights: rows sum to one, causal entries exactly zero") {
  const auto params = random_params(8, 11);
  const auto x = random_input({6, 8}, 12);
  const auto out = attend(x, params, causal_mask(6), {4, 10000.0});
  for (std::size_t h = 0; h < 4; ++h) {
    for (std::size_t i = 0; i < 6; ++i) {
      double total = 0.0;
      for (std::size_t j = 0; j < 6; ++j) {
        total += out.weights.at({h, i, j});
        if (j > i) CHECK(out.weights.at({h, i, j}) == 0.0);
      }
      CHECK(std::abs(total - 1.0) < 1e-9);
    }
  }
}

namespace {

// d out[p] / d x[q] summed over output and input features, via one backward per p.
std::vector<std::vector<double>> sensitivity(const AttentionMask& mask, std::size_t seq, std::size_t d,
                                             std::uint64_t seed) {
  const auto params = random_params(d, seed);
  std::vector<std::vector<double>> out(seq, std::vector<double>(seq, 0.0));
  std::mt19937_64 rng(seed + 1);
  std::normal_distribution<double> n(0.0, 1.0);
  for (std::size_t p = 0; p < seq; ++p) {
    auto x = random_input({seq, d}, seed + 2, true);
    const auto y = attend(x, params, mask, {2, 10000.0}).values;
    std::vector<double> probe(seq * d, 0.0);
    for (std::size_t c = 0; c < d; ++c) probe[p * d + c] = n(rng);
    sum(mul(y, Tensor::from({seq, d}, probe))).backward();
    for (std::size_t q = 0; q < seq; ++q) {
      double m = 0.0;
      for (std::size_t c = 0; c < d; ++c) m = std::max(m, std::abs(x.grad()[q * d + c]));
      out[p][q] = m;
    }
  }
  return out;
}

}  // namespace

TEST_CASE("causal attention has exactly zero sensitivity to later positions") {
  const std::size_t seq = 7;
  const auto s = sensitivity(causal_mask(seq), seq, 8, 20);
  for (std::size_t p = 0; p < seq; ++p) {
    for (std::size_t q = p + 1; q < seq; ++q) CHECK(s[p][q] == 0.0);
  }
}

TEST_CASE("bidirectional attention is sensitive to every position") {
  const std::size_t seq = 7;
  const auto s = sensitivity(bidirectional_mask(seq), seq, 8, 21);
  std::size_t nonzero = 0;
  for (std::size_t p = 0; p < seq; ++p) {
    for (std::size_t q = 0; q < seq; ++q) nonzero += s[p][q] > 1e-12;
  }
  CHECK(static_cast<double>(nonzero) >= 0.99 * seq * seq);
}

TEST_CASE("attend gradients pass fd_check") {
  const auto params = random_params(4, 30);
  const auto mask = combine_padding(causal_mask(3), {false, false, true});
  const auto probe = random_input({3, 4}, 31);
  const auto x = random_input({3, 4}, 32, true);
  auto f = [&](const Tensor& t) { return sum(mul(attend(t, params, mask, {2, 10000.0}).values, probe)); };
  CHECK(fd_check(f, x, 1e-6) < 1e-5);
}

TEST_CASE("attend rejects mismatched shapes") {
  const auto params = random_params(4, 1);
  CHECK_THROWS_AS(attend(random_input({3, 4}, 1), params, causal_mask(2), {2, 10000.0}), DimensionError);
  CHECK_THROWS_AS(attend(random_input({3, 4}, 1), params, causal_mask(3), {3, 10000.0}), DimensionError);
  CHECK_THROWS_AS(attend(random_input({3, 5}, 1), params, causal_mask(3), {1, 10000.0}), DimensionError);
}
