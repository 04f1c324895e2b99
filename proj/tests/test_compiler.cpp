#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <cstring>
#include <filesystem>
#include <random>
#include <vector>

#include "json.hpp"
#include "posattn/compiler.hpp"
#include "posattn/model.hpp"
#include "posattn/pcoc.hpp"

using namespace posattn;

namespace {

Mat softmax_rows(const Mat& logits) {
  Mat a(logits.rows(), logits.cols());
  for (int i = 0; i < logits.rows(); ++i) {
    Vec e = (logits.row(i).array() - logits.row(i).maxCoeff()).exp().transpose();
    a.row(i) = (e / e.sum()).transpose();
  }
  return a;
}

Mat random_unique_pattern(int n, std::mt19937_64& rng) {
  std::uniform_int_distribution<int> col(0, n - 1);
  Mat p = Mat::Zero(n, n);
  for (int i = 0; i < n; ++i) p(i, col(rng)) = 1.0;
  return p;
}

Vec random_vec(int n, std::mt19937_64& rng, double lo = -2.0, double hi = 2.0) {
  std::uniform_real_distribution<double> dist(lo, hi);
  Vec v(n);
  for (int i = 0; i < n; ++i) v(i) = dist(rng);
  return v;
}

bool bitwise_equal(const Mat& a, const Mat& b) {
  return a.rows() == b.rows() && a.cols() == b.cols() &&
         (a.size() == 0 ||
          std::memcmp(a.data(), b.data(), sizeof(double) * a.size()) == 0);
}

}  // namespace

TEST_CASE("hardmax temperature realizes patterns to the requested accuracy") {
  SUBCASE("two-node identity at eps 0.1") {
    HardmaxParams hp = hardmax_params(Mat::Identity(2, 2), 0.1);
    CHECK(hp.temperature == doctest::Approx(0.5 * std::log(20.0)).epsilon(1e-14));
    CHECK(hp.W_K == Mat::Identity(2, 2));
    Mat a = softmax_rows(hp.W_Q * hp.W_K.transpose());
    CHECK(a(0, 0) >= 0.9);
    CHECK(a(1, 1) >= 0.9);
    CHECK((a - Mat::Identity(2, 2)).cwiseAbs().maxCoeff() <= 0.1);
  }
  SUBCASE("four-node pattern at eps 0.01") {
    Mat p = Mat::Zero(4, 4);
    p(0, 2) = p(1, 0) = p(2, 3) = p(3, 3) = 1.0;
    HardmaxParams hp = hardmax_params(p, 0.01);
    CHECK(hp.temperature == doctest::Approx(0.5 * std::log(400.0)).epsilon(1e-14));
    Mat a = softmax_rows(hp.W_Q * hp.W_K.transpose());
    CHECK((a - p).cwiseAbs().maxCoeff() <= 0.01);
  }
  SUBCASE("bound holds across random patterns, sizes and accuracies") {
    std::mt19937_64 rng(31337);
    for (int n : {3, 9, 33}) {
      for (double eps : {1e-1, 1e-2, 1e-3}) {
        for (int t = 0; t < 100; ++t) {
          Mat p = random_unique_pattern(n, rng);
          HardmaxParams hp = hardmax_params(p, eps);
          Mat a = softmax_rows(hp.W_Q * hp.W_K.transpose());
          INFO("n=", n, " eps=", eps, " trial=", t);
          CHECK((a - p).cwiseAbs().maxCoeff() <= eps);
          // rows must still be stochastic
          for (int i = 0; i < n; ++i) CHECK(a.row(i).sum() == doctest::Approx(1.0).epsilon(1e-12));
        }
      }
    }
  }
  SUBCASE("ties, empty rows, non-binary entries and bad eps are rejected") {
    Mat two = Mat::Zero(3, 3);
    two(0, 0) = two(0, 1) = 1.0;
    two(1, 1) = two(2, 2) = 1.0;
    CHECK_THROWS_AS(hardmax_params(two, 0.1), std::invalid_argument);
    Mat empty_row = Mat::Identity(3, 3);
    empty_row(1, 1) = 0.0;
    CHECK_THROWS_AS(hardmax_params(empty_row, 0.1), std::invalid_argument);
    Mat soft = Mat::Identity(2, 2);
    soft(0, 0) = 0.5;
    CHECK_THROWS_AS(hardmax_params(soft, 0.1), std::invalid_argument);
    CHECK_THROWS_AS(hardmax_params(Mat::Identity(2, 2), 0.0), std::invalid_argument);
    CHECK_THROWS_AS(hardmax_params(Mat::Identity(2, 2), 1.0), std::invalid_argument);
    CHECK_THROWS_AS(hardmax_params(Mat::Zero(2, 3), 0.1), std::invalid_argument);
  }
}

TEST_CASE("relu networks realize pairwise min and max") {
  ReluMlp mn = relu_min_mlp();
  ReluMlp mx = relu_max_mlp();
  CHECK(relu_mlp_eval(mn, 3.0, 5.0) == 3.0);
  CHECK(relu_mlp_eval(mx, 3.0, 5.0) == 5.0);
  CHECK(relu_mlp_eval(mn, -7.0, 2.0) == -7.0);
  CHECK(relu_mlp_eval(mx, -7.0, 2.0) == 2.0);
  CHECK(relu_mlp_eval(mn, 1.25, 1.25) == 1.25);
  CHECK(relu_mlp_eval(mx, 1.25, 1.25) == 1.25);

  std::mt19937_64 rng(4242);
  std::uniform_real_distribution<double> dist(-2.0, 2.0);
  double worst = 0.0;
  for (int t = 0; t < 1000000; ++t) {
    const double a = dist(rng), b = dist(rng);
    const double lo = relu_mlp_eval(mn, a, b);
    const double hi = relu_mlp_eval(mx, a, b);
    worst = std::max(worst, std::abs(lo - std::min(a, b)));
    worst = std::max(worst, std::abs(hi - std::max(a, b)));
    // min + max = a + b algebraically; the two evaluations round their
    // accumulations independently, so equality holds to a few ulps
    worst = std::max(worst, std::abs((lo + hi) - (a + b)));
  }
  CHECK(worst <= 1e-12);
}

TEST_CASE("routing patterns mirror the oracle with sink bookkeeping") {
  PCOCInstance tree = build_tree_reduce(4, ReduceOp::min, true);

  SUBCASE("round 0, slot 0: every machine keeps itself, sink keeps itself") {
    CHECK(routing_pattern(tree, 0, 0) == Mat::Identity(5, 5));
  }
  SUBCASE("round 0, slot 1: shift edges, non-receivers zero, sink collects") {
    Mat want = Mat::Zero(5, 5);
    want(1, 0) = want(2, 1) = want(3, 2) = 1.0;  // machine i reads i-1
    want(4, 3) = 1.0;                            // machine 3's slot 1 goes nowhere
    want(4, 4) = 1.0;                            // the sink itself is never used
    CHECK(routing_pattern(tree, 0, 1) == want);
    // machine 0 receives nothing at slot 1: its row is all zero
    CHECK(routing_pattern(tree, 0, 1).row(0).sum() == 0.0);
  }
  SUBCASE("a round with no routing sends every source to the sink") {
    PCOCInstance idle;
    idle.machines = 3;
    idle.rounds = 1;
    idle.mem_size = 2;
    idle.input_positions = {0, 1};
    idle.oracle.assign(1, std::vector<std::vector<RoutingEntry>>(3));
    idle.local_fns.assign(1, std::vector<LocalFn>(3, LocalFn::zero));
    for (int h = 0; h < 2; ++h) {
      Mat p = routing_pattern(idle, 0, h);
      CHECK(p.topRows(3) == Mat::Zero(3, 4));
      CHECK(p.row(3) == Mat::Ones(1, 4));
    }
  }
  SUBCASE("bad round or head indices are rejected") {
    CHECK_THROWS_AS(routing_pattern(tree, 2, 0), std::invalid_argument);
    CHECK_THROWS_AS(routing_pattern(tree, 0, 2), std::invalid_argument);
  }
}

TEST_CASE("compiled layers carry identity keys and values and a selection W_O") {
  PCOCInstance tree = build_tree_reduce(4, ReduceOp::min, true);
  const double eps = 1e-3;
  LayerParams layer = compile_round(tree, 0, eps);
  REQUIRE(layer.heads.size() == 2);
  for (int h = 0; h < 2; ++h) {
    CHECK(layer.heads[h].W_K == Mat::Identity(5, 5));
    CHECK(layer.heads[h].W_V == Mat::Identity(3, 3));
    Mat a = softmax_rows(layer.heads[h].W_Q * layer.heads[h].W_K.transpose());
    Mat pattern = routing_pattern(tree, 0, h);
    for (int i = 0; i < 5; ++i) {
      if (pattern.row(i).sum() == 1.0) {
        CHECK((a.row(i) - pattern.row(i)).cwiseAbs().maxCoeff() <= eps);
      } else if (pattern.row(i).sum() == 0.0) {
        // unrealizable rows fall back to a uniform read that the local
        // function table masks off
        CHECK((a.row(i).array() - 0.2).abs().maxCoeff() <= 1e-15);
      }
    }
  }
  Mat want_o = Mat::Zero(6, 2);
  want_o(0, 0) = 1.0;  // head 0, slot column 0
  want_o(4, 1) = 1.0;  // head 1, slot column 1
  CHECK(layer.W_O == want_o);
  CHECK(layer.W_1 == Mat::Zero(5, 4));
  CHECK(layer.W_2 == Mat::Zero(4, 3));
}

TEST_CASE("compiled networks reproduce the worked examples") {
  SUBCASE("binary-tree min lands at the last machine") {
    CompiledNetwork net = compile(build_tree_reduce(4, ReduceOp::min, false), 1e-6);
    Vec x(4);
    x << 2, 1, 3, 0;
    Mat out = compiled_forward(net, x);
    CHECK(std::abs(out(3, 0) - 0.0) <= 5.0 * 1e-6 * 2 * 2);
  }
  SUBCASE("odd-even sort decodes in order") {
    CompiledNetwork net = compile(build_odd_even_sort(4), 1e-8);
    Vec x(4);
    x << 3, 1, 4, 2;
    Mat out = compiled_forward(net, x);
    for (int i = 0; i < 4; ++i) CHECK(out(i, 0) == doctest::Approx(i + 1.0).epsilon(1e-6));
  }
}

TEST_CASE("layer states keep the sink empty and the identifiers intact") {
  CompiledNetwork net = compile(build_odd_even_sort(4), 1e-8);
  std::mt19937_64 rng(5);
  Vec x = random_vec(4, rng);
  Mat x0 = compiled_input(net.instance, x);
  for (int i = 0; i < 5; ++i) CHECK(x0(i, 2) == (i + 1.0) / 5.0);
  std::vector<Mat> states = compiled_states(net, x);
  REQUIRE(states.size() == 4);
  for (const Mat& s : states) {
    CHECK(s.row(4).head(2) == Mat::Zero(1, 2));          // sink slots wiped
    CHECK(bitwise_equal(s.col(2), x0.col(2)));           // identifiers exact
  }
}

TEST_CASE("compiled attention does not depend on the input values") {
  CompiledNetwork net = compile(build_tree_reduce(4, ReduceOp::min, true), 1e-8);
  std::mt19937_64 rng(17);
  Vec a = random_vec(4, rng), b = random_vec(4, rng);
  auto ma = attention_matrices(net.cfg, net.params, a);
  auto mb = attention_matrices(net.cfg, net.params, b);
  REQUIRE(ma.size() == mb.size());
  for (size_t l = 0; l < ma.size(); ++l) {
    REQUIRE(ma[l].size() == mb[l].size());
    for (size_t h = 0; h < ma[l].size(); ++h) {
      CHECK(bitwise_equal(ma[l][h], mb[l][h]));
      Mat pattern = routing_pattern(net.instance, static_cast<int>(l), static_cast<int>(h));
      for (int i = 0; i < pattern.rows(); ++i)
        if (pattern.row(i).sum() == 1.0)
          CHECK((ma[l][h].row(i) - pattern.row(i)).cwiseAbs().maxCoeff() <= net.eps);
    }
  }
}

TEST_CASE("verification agrees with the simulator within the eps budget") {
  SUBCASE("cumulative min, eight machines") {
    CompiledNetwork net = compile(build_tree_reduce(8, ReduceOp::min, true), 1e-8);
    VerifyReport rep = verify(net, 1000, 1e-4, 99);
    CHECK(rep.pass);
    CHECK(rep.final_max_dev < 1e-4);
    CHECK(rep.round_max_dev.size() == 3);
    for (double d : rep.round_max_dev) CHECK(d < 1e-4);
  }
  SUBCASE("odd-even sort, four machines") {
    VerifyReport rep = verify(compile(build_odd_even_sort(4), 1e-8), 1000, 1e-4, 99);
    CHECK(rep.pass);
    CHECK(rep.final_max_dev < 1e-4);
  }
  SUBCASE("cumulative sum exercises partial reception and copy") {
    VerifyReport rep = verify(compile(build_tree_reduce(8, ReduceOp::sum, true), 1e-8), 200, -1.0, 7);
    CHECK(rep.tol == default_verify_tol(1e-8, 2, 3));
    CHECK(rep.pass);
  }
  SUBCASE("sort with an idle machine exercises the identity function") {
    VerifyReport rep = verify(compile(build_odd_even_sort(5), 1e-8), 200, 1e-3, 7);
    CHECK(rep.pass);
  }
  SUBCASE("masking matches the simulator's read-as-zero rule") {
    PCOCInstance inst;
    inst.machines = 2;
    inst.rounds = 1;
    inst.mem_size = 2;
    inst.input_positions = {0, 1};
    inst.oracle.assign(1, std::vector<std::vector<RoutingEntry>>(2));
    inst.oracle[0][0] = {{1, {0}}};  // machine 0 hears machine 1's slot 0 only
    inst.local_fns.assign(1, std::vector<LocalFn>(2, LocalFn::identity));
    inst.local_fns[0][1] = LocalFn::zero;
    CompiledNetwork net = compile(inst, 1e-8);
    Vec x(2);
    x << 1.5, -0.75;
    Mat out = compiled_forward(net, x);
    CHECK(out(0, 0) == doctest::Approx(-0.75).epsilon(1e-7));
    CHECK(out(0, 1) == 0.0);  // never delivered: masked to zero exactly
    CHECK(out.row(1) == Mat::Zero(1, 2));
    CHECK(verify(net, 100, 1e-4, 3).pass);
  }
  SUBCASE("a loose temperature fails a tight tolerance") {
    VerifyReport rep = verify(compile(build_odd_even_sort(4), 0.4), 50, 1e-4, 99);
    CHECK_FALSE(rep.pass);
    CHECK(rep.final_max_dev > 1e-4);
  }
  SUBCASE("deviation shrinks monotonically with eps") {
    double prev = std::numeric_limits<double>::infinity();
    for (double eps : {1e-1, 1e-2, 1e-4, 1e-8}) {
      VerifyReport rep = verify(compile(build_tree_reduce(8, ReduceOp::min, true), eps), 200,
                                1e9, 1234);
      INFO("eps=", eps, " dev=", rep.final_max_dev);
      CHECK(rep.final_max_dev < prev);
      prev = rep.final_max_dev;
    }
  }
  SUBCASE("a zero-round instance deviates by exactly nothing") {
    PCOCInstance inst;
    inst.machines = 3;
    inst.rounds = 0;
    inst.mem_size = 2;
    inst.input_positions = {0, 1};
    VerifyReport rep = verify(compile(inst, 1e-8), 10, -1.0, 1);
    CHECK(rep.final_max_dev == 0.0);
    CHECK(rep.round_max_dev.empty());
    CHECK(rep.pass);  // default budget is zero for zero rounds
  }
}

TEST_CASE("compile rejects what it cannot realize") {
  PCOCInstance bad = build_odd_even_sort(4);
  bad.oracle[0][0].push_back({2, {1}});
  CHECK_THROWS_AS(compile(bad, 1e-6), std::invalid_argument);

  PCOCInstance odd = build_odd_even_sort(4);
  odd.local_fns[1][2] = static_cast<LocalFn>(42);
  CHECK_THROWS_WITH_AS(compile(odd, 1e-6),
                       "compile: machine 2, round 1: unsupported local function",
                       std::runtime_error);

  CHECK_THROWS_AS(compile(build_odd_even_sort(4), 0.0), std::invalid_argument);
  CHECK_THROWS_AS(compile(build_odd_even_sort(4), 1.5), std::invalid_argument);
}

TEST_CASE("compiled networks round-trip through checkpoint plus sidecar") {
  namespace fs = std::filesystem;
  const fs::path dir = fs::temp_directory_path() / "posattn_compiled_test";
  fs::create_directories(dir);
  const std::string ckpt = (dir / "net.json").string();
  const std::string side = (dir / "net.instance.json").string();

  CompiledNetwork net = compile(build_odd_even_sort(4), 1e-7);
  save_compiled(net, ckpt, side);
  CompiledNetwork back = load_compiled(ckpt, side);

  CHECK(back.eps == net.eps);
  CHECK(back.temperature == net.temperature);
  CHECK(instance_to_json(back.instance) == instance_to_json(net.instance));
  auto t0 = net.params.tensors();
  auto t1 = back.params.tensors();
  REQUIRE(t0.size() == t1.size());
  for (size_t i = 0; i < t0.size(); ++i) CHECK(bitwise_equal(*t0[i], *t1[i]));

  std::mt19937_64 rng(2);
  Vec x = random_vec(4, rng);
  CHECK(bitwise_equal(compiled_forward(net, x), compiled_forward(back, x)));

  SUBCASE("tampered sidecar schema is refused") {
    nlohmann::json j;
    {
      std::ifstream in(side);
      in >> j;
    }
    j["schema"] = "palab-compiled-v0";
    {
      std::ofstream out(side);
      out << j.dump();
    }
    CHECK_THROWS(load_compiled(ckpt, side));
    save_compiled(net, ckpt, side);  // restore for other subcases
  }
  SUBCASE("checkpoint from a different instance is refused") {
    const std::string other = (dir / "other.json").string();
    save_compiled(compile(build_odd_even_sort(5), 1e-7), other, (dir / "other.side.json").string());
    CHECK_THROWS(load_compiled(other, side));
  }
  SUBCASE("zero-round networks cannot be serialized") {
    PCOCInstance inst;
    inst.machines = 2;
    inst.rounds = 0;
    inst.mem_size = 2;
    inst.input_positions = {0, 1};
    CHECK_THROWS_AS(save_compiled(compile(inst, 1e-7), ckpt, side), std::invalid_argument);
  }
}
