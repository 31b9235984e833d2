#include <catch2/catch_amalgamated.hpp>

#include <so3kit/optim.hpp>
#include <so3kit/tape.hpp>

#include <functional>
#include <random>

using namespace so3kit::ad;

namespace {

using Builder = std::function<Node(Tape&, std::vector<Node>&)>;

double eval(const Builder& f, const std::vector<Array>& inputs) {
  Tape tape;
  std::vector<Node> nodes;
  for (const auto& a : inputs) nodes.push_back(tape.constant(a));
  Node loss = f(tape, nodes);
  return tape.val(loss).data[0];
}

/// Compares tape gradients of a scalar builder against central finite
/// differences over every entry of every input.
void check_grads(const Builder& f, std::vector<Array> inputs, double tol = 1e-5,
                 double step = 1e-5) {
  Tape tape;
  std::vector<Node> nodes;
  for (const auto& a : inputs) nodes.push_back(tape.constant(a));
  Node loss = f(tape, nodes);
  tape.backward(loss);
  for (std::size_t p = 0; p < inputs.size(); ++p) {
    const Array& g = tape.grad(nodes[p]);
    for (std::size_t i = 0; i < inputs[p].size(); ++i) {
      double orig = inputs[p].data[i];
      inputs[p].data[i] = orig + step;
      double fp = eval(f, inputs);
      inputs[p].data[i] = orig - step;
      double fm = eval(f, inputs);
      inputs[p].data[i] = orig;
      double fd = (fp - fm) / (2 * step);
      INFO("input " << p << " entry " << i << " tape " << g.data[i] << " fd " << fd);
      REQUIRE(std::abs(g.data[i] - fd) <= tol * (1.0 + std::abs(fd)));
    }
  }
}

Array rand_arr(std::vector<std::size_t> shape, std::mt19937_64& rng, double lo = -1.0,
               double hi = 1.0) {
  return random_uniform(std::move(shape), lo, hi, rng);
}

}  // namespace

TEST_CASE("elementwise binary ops with broadcasting") {
  std::mt19937_64 rng(1);
  struct Case {
    const char* name;
    Node (*op)(Node, Node);
  };
  const Case cases[] = {{"add", add}, {"sub", sub}, {"mul", mul}, {"div", div}};
  const std::vector<std::pair<std::vector<std::size_t>, std::vector<std::size_t>>> shapes = {
      {{4}, {4}}, {{3, 4}, {4}}, {{2, 1, 3}, {2, 5, 3}}, {{2, 3}, {}}};
  for (const auto& c : cases)
    for (const auto& [sa, sb] : shapes) {
      Array a = rand_arr(sa, rng);
      Array b = rand_arr(sb, rng, 0.5, 1.5);  // keep div well away from zero
      check_grads([&c](Tape&, std::vector<Node>& in) { return sum_all(c.op(in[0], in[1])); },
                  {a, b});
    }
}

TEST_CASE("unary ops") {
  std::mt19937_64 rng(2);
  for (auto shape : std::vector<std::vector<std::size_t>>{{5}, {2, 3}, {2, 2, 2}}) {
    Array pos = rand_arr(shape, rng, 0.3, 2.0);
    Array any = rand_arr(shape, rng, -1.5, 1.5);
    check_grads([](Tape&, std::vector<Node>& in) { return sum_all(exp_(in[0])); }, {any});
    check_grads([](Tape&, std::vector<Node>& in) { return sum_all(sqrt_(in[0])); }, {pos});
    check_grads([](Tape&, std::vector<Node>& in) { return sum_all(smul(in[0], -2.5)); }, {any});
    check_grads([](Tape&, std::vector<Node>& in) { return sum_all(leaky_relu(in[0], 0.01)); },
                {any});
    check_grads(
        [](Tape&, std::vector<Node>& in) { return sum_all(signed_clamp_min(in[0], 1e-12)); },
        {any});
  }
}

TEST_CASE("relu gradient at reference points") {
  Tape tape;
  Node x = tape.constant(Array({2}, {-1.0, 2.0}));
  Node y = sum_all(relu(x));
  REQUIRE(tape.val(y).data[0] == 2.0);
  tape.backward(y);
  REQUIRE(tape.grad(x).data[0] == 0.0);
  REQUIRE(tape.grad(x).data[1] == 1.0);
}

TEST_CASE("matmul variants") {
  std::mt19937_64 rng(3);
  // plain 4x5 * 5x3 against finite differences, step 1e-5
  check_grads([](Tape&, std::vector<Node>& in) { return sum_all(matmul(in[0], in[1])); },
              {rand_arr({4, 5}, rng), rand_arr({5, 3}, rng)}, 1e-6);
  // batched
  check_grads([](Tape&, std::vector<Node>& in) { return sum_all(matmul(in[0], in[1])); },
              {rand_arr({3, 2, 4}, rng), rand_arr({3, 4, 2}, rng)});
  // 2D operand broadcast over the batch
  check_grads([](Tape&, std::vector<Node>& in) { return sum_all(matmul(in[0], in[1])); },
              {rand_arr({3, 2, 4}, rng), rand_arr({4, 2}, rng)});
  check_grads([](Tape&, std::vector<Node>& in) { return sum_all(matmul(in[0], in[1])); },
              {rand_arr({2, 4}, rng), rand_arr({3, 4, 2}, rng)});

  Tape tape;
  Node a = tape.constant(rand_arr({2, 3}, rng));
  Node b = tape.constant(rand_arr({4, 2}, rng));
  REQUIRE_THROWS_AS(matmul(a, b), std::invalid_argument);
}

TEST_CASE("contract") {
  std::mt19937_64 rng(4);
  check_grads([](Tape&, std::vector<Node>& in) { return sum_all(contract(in[0], in[1], 1, 0)); },
              {rand_arr({3, 4}, rng), rand_arr({4, 2}, rng)});
  check_grads([](Tape&, std::vector<Node>& in) { return sum_all(contract(in[0], in[1], 0, 2)); },
              {rand_arr({5, 2}, rng), rand_arr({2, 3, 5}, rng)});
  check_grads([](Tape&, std::vector<Node>& in) { return sum_all(contract(in[0], in[1], 2, 1)); },
              {rand_arr({2, 2, 3}, rng), rand_arr({2, 3}, rng)});
}

TEST_CASE("shape ops") {
  std::mt19937_64 rng(5);
  check_grads(
      [](Tape&, std::vector<Node>& in) {
        Node r = reshape(in[0], {6, 2});
        return sum_all(mul(r, r));
      },
      {rand_arr({3, 4}, rng)});
  check_grads(
      [](Tape&, std::vector<Node>& in) {
        Node t = transpose(in[0], {2, 0, 1});
        return sum_all(mul(t, t));
      },
      {rand_arr({2, 3, 4}, rng)});
  check_grads(
      [](Tape&, std::vector<Node>& in) {
        Node c = concat({in[0], in[1]}, 1);
        return sum_all(mul(c, c));
      },
      {rand_arr({2, 3}, rng), rand_arr({2, 2}, rng)});
  check_grads(
      [](Tape&, std::vector<Node>& in) {
        Node s = slice(in[0], 1, 1, 2);
        return sum_all(mul(s, s));
      },
      {rand_arr({3, 4}, rng)});
  check_grads([](Tape&, std::vector<Node>& in) { return sum_all(gather_rows(in[0], {2, 0, 2})); },
              {rand_arr({3, 2}, rng)});
}

TEST_CASE("reductions") {
  std::mt19937_64 rng(6);
  for (std::size_t axis : {0u, 1u, 2u})
    check_grads(
        [axis](Tape&, std::vector<Node>& in) {
          Node s = sum(in[0], axis);
          return sum_all(mul(s, s));
        },
        {rand_arr({2, 3, 4}, rng)});
  check_grads(
      [](Tape&, std::vector<Node>& in) {
        Node m = mean(in[0], 1);
        return sum_all(mul(m, m));
      },
      {rand_arr({3, 5}, rng)});
  check_grads([](Tape&, std::vector<Node>& in) { return mean_all(mul(in[0], in[0])); },
              {rand_arr({4, 2}, rng)});
  // max over axis 0: gradient flows only to the argmax rows
  check_grads([](Tape&, std::vector<Node>& in) { return sum_all(max_axis0(in[0])); },
              {rand_arr({4, 3}, rng)});
}

TEST_CASE("norms and normalizations") {
  std::mt19937_64 rng(7);
  check_grads([](Tape&, std::vector<Node>& in) { return sum_all(l2_norm_last(in[0], 1e-12)); },
              {rand_arr({3, 4}, rng, 0.2, 1.0)});
  check_grads(
      [](Tape&, std::vector<Node>& in) {
        Node y = layer_norm_last(in[0]);
        return sum_all(mul(y, y));
      },
      {rand_arr({3, 6}, rng)});
  check_grads(
      [](Tape&, std::vector<Node>& in) {
        Node y = softmax_last(in[0]);
        return sum_all(mul(y, y));
      },
      {rand_arr({3, 5}, rng)});
  check_grads(
      [](Tape&, std::vector<Node>& in) {
        Node y = softmax_segments(in[0], {0, 0, 1, 1, 1});
        return sum_all(mul(y, y));
      },
      {rand_arr({5, 2}, rng)});
  check_grads(
      [](Tape&, std::vector<Node>& in) {
        Node y = segment_sum(in[0], {0, 1, 0, 2}, 3);
        return sum_all(mul(y, y));
      },
      {rand_arr({4, 3}, rng)});
  check_grads(
      [](Tape&, std::vector<Node>& in) {
        Node y = segment_mean(in[0], {0, 1, 0, 2}, 3);
        return sum_all(mul(y, y));
      },
      {rand_arr({4, 3}, rng)});
}

TEST_CASE("layer_norm output statistics") {
  std::mt19937_64 rng(8);
  Tape tape;
  Node x = tape.constant(rand_arr({4, 16}, rng, -3.0, 3.0));
  const Array& y = tape.val(layer_norm_last(x));
  for (std::size_t r = 0; r < 4; ++r) {
    double m = 0, var = 0;
    for (std::size_t i = 0; i < 16; ++i) m += y.data[r * 16 + i];
    m /= 16;
    for (std::size_t i = 0; i < 16; ++i) {
      double d = y.data[r * 16 + i] - m;
      var += d * d;
    }
    var /= 16;
    REQUIRE(std::abs(m) <= 1e-12);
    REQUIRE(std::abs(var - 1.0) <= 1e-10);
  }
}

TEST_CASE("segmented softmax semantics") {
  Tape tape;
  Node x = tape.constant(Array({3, 1}, {0.7, -2.0, 1.3}));
  const Array& y = tape.val(softmax_segments(x, {0, 1, 1}));
  REQUIRE(y.data[0] == 1.0);  // singleton segment is exact
  REQUIRE(y.data[1] + y.data[2] == Catch::Approx(1.0).margin(1e-12));

  std::mt19937_64 rng(9);
  Node big = tape.constant(rand_arr({6, 4}, rng, -5.0, 5.0));
  const Array& ys = tape.val(softmax_segments(big, {0, 2, 0, 1, 2, 2}));
  for (std::size_t c = 0; c < 4; ++c) {
    std::vector<double> sums(3, 0.0);
    std::vector<std::size_t> seg = {0, 2, 0, 1, 2, 2};
    for (std::size_t r = 0; r < 6; ++r) sums[seg[r]] += ys.data[r * 4 + c];
    for (double s : sums) REQUIRE(std::abs(s - 1.0) <= 1e-12);
  }
}

TEST_CASE("backward bookkeeping") {
  Tape tape;
  Node x = tape.param("x", Array({3}, {1.0, -2.0, 0.5}));
  Node unused = tape.param("unused", Array({2}, {5.0, 5.0}));
  (void)unused;
  Node loss = sum_all(mul(x, x));
  REQUIRE_THROWS_AS(tape.grad(x), std::logic_error);  // before backward
  tape.backward(loss);
  auto grads = tape.named_grads();
  REQUIRE(grads.at("x").data == std::vector<double>{2.0, -4.0, 1.0});
  // disconnected parameter gets a zero gradient of matching shape
  REQUIRE(grads.at("unused").shape == std::vector<std::size_t>{2});
  REQUIRE(grads.at("unused").data == std::vector<double>{0.0, 0.0});
  REQUIRE_THROWS_AS(tape.backward(loss), std::logic_error);

  Tape t2;
  Node v = t2.constant(Array({2}, {1.0, 2.0}));
  REQUIRE_THROWS_AS(t2.backward(v), std::invalid_argument);  // non-scalar loss
}

TEST_CASE("sgd and adam updates") {
  ParameterStore ps;
  ps.add("p", Array::scalar(1.0));
  SgdOptimizer sgd;
  sgd.lr = 0.1;
  sgd.step(ps, {{"p", Array::scalar(2.0)}});
  REQUIRE(ps.at("p").data[0] == Catch::Approx(0.8));

  // first Adam step moves by ~lr regardless of gradient scale
  for (double gscale : {1e-4, 1.0, 1e4}) {
    ParameterStore ps2;
    ps2.add("p", Array::scalar(0.0));
    AdamOptimizer adam;
    adam.lr = 1e-3;
    adam.step(ps2, {{"p", Array::scalar(gscale)}});
    REQUIRE(std::abs(ps2.at("p").data[0] + 1e-3) < 1e-6);
  }

  // determinism over 100 steps
  auto run = []() {
    ParameterStore ps3;
    std::mt19937_64 rng(77);
    ps3.add("w", random_normal({4, 4}, 0.0, 1.0, rng));
    AdamOptimizer adam;
    for (int i = 0; i < 100; ++i) {
      std::map<std::string, Array> g;
      g.emplace("w", random_normal({4, 4}, 0.0, 1.0, rng));
      adam.step(ps3, g);
    }
    return ps3.at("w").data;
  };
  REQUIRE(run() == run());
}

TEST_CASE("checkpoint round-trip is bit exact") {
  std::mt19937_64 rng(99);
  ParameterStore ps;
  ps.add("a.w", random_normal({3, 4}, 0.0, 1.0, rng));
  ps.add("a.b", random_normal({4}, 0.0, 1.0, rng));
  AdamOptimizer adam;
  adam.lr = 0.01;
  std::map<std::string, Array> g;
  g.emplace("a.w", random_normal({3, 4}, 0.0, 1.0, rng));
  g.emplace("a.b", random_normal({4}, 0.0, 1.0, rng));
  adam.step(ps, g);
  nlohmann::json extra = {{"note", "round-trip"}, {"target_mean", 1.5}};
  std::string path = "test_ck_roundtrip.bin";
  save_checkpoint(path, ps, &adam, extra);
  Checkpoint ck = load_checkpoint(path);
  REQUIRE(ck.params.at("a.w").data == ps.at("a.w").data);
  REQUIRE(ck.params.at("a.b").data == ps.at("a.b").data);
  REQUIRE(ck.has_adam);
  REQUIRE(ck.adam.t == 1);
  REQUIRE(ck.adam.m.at("a.w").data == adam.m.at("a.w").data);
  REQUIRE(ck.adam.v.at("a.b").data == adam.v.at("a.b").data);
  REQUIRE(ck.extra.at("target_mean").get<double>() == 1.5);
  std::remove(path.c_str());

  REQUIRE_THROWS_AS(load_checkpoint("does_not_exist.bin"), std::runtime_error);
}
