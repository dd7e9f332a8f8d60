#include <Eigen/Dense>

#include "test_util.hpp"

using namespace splos;
using splos::testing::max_fd_error;
using splos::testing::random_matrix;
using splos::testing::values;

TEST(Backward, SumGivesOnes) {
  Tensor w = Tensor::vector({0.3, -1.0, 2.0}, true);
  sum(w).backward();
  EXPECT_EQ(w.grad(), (std::vector<double>{1, 1, 1}));
}

TEST(Backward, SquareGivesTwiceInput) {
  Tensor w = Tensor::vector({1, 2, 3}, true);
  sum(mul(w, w)).backward();
  EXPECT_EQ(w.grad(), (std::vector<double>{2, 4, 6}));
}

TEST(Backward, RepeatedCallsAccumulate) {
  Tensor w = Tensor::vector({1, 2}, true);
  Tensor loss = sum(mul(w, w));
  loss.backward();
  loss.backward();
  EXPECT_EQ(w.grad(), (std::vector<double>{4, 8}));
  w.zero_grad();
  EXPECT_EQ(w.grad(), (std::vector<double>{0, 0}));
}

TEST(Backward, NonScalarLossRejected) {
  Tensor w = Tensor::vector({1, 2}, true);
  EXPECT_THROW(mul(w, w).backward(), ContractError);
}

TEST(Backward, NonFiniteGradientNamesTheNode) {
  Tensor w = Tensor::vector({0.0}, true);
  // d/dw log(w) at 0 is infinite.
  try {
    sum(log(add_scalar(w, 1e-320))).backward();
    FAIL() << "expected NumericError";
  } catch (const NumericError& e) {
    EXPECT_NE(std::string(e.what()).find("log"), std::string::npos) << e.what();
  }
}

TEST(Backward, ShapeMismatchRejected) {
  EXPECT_THROW(Tensor({2, 2}, {1, 2, 3}), ContractError);
  EXPECT_THROW(add(Tensor::vector({1, 2}), Tensor::vector({1, 2, 3})), ContractError);
}

TEST(Backward, TwoLayerNetworkMatchesFiniteDifferences) {
  Rng rng(7);
  Tensor x = random_matrix(5, 4, rng);
  Tensor w1 = random_matrix(4, 6, rng, -1, 1, true);
  Tensor b1 = Tensor::vector({0.1, -0.2, 0.3, 0.05, -0.1, 0.2}, true);
  Tensor w2 = random_matrix(6, 3, rng, -1, 1, true);
  std::vector<int> y{0, 2, 1, 1, 0};
  auto forward = [&] {
    Tensor h = relu(add_row_vector(matmul(x, w1), b1));
    return scale(mean(pick(log_softmax_rows(matmul(h, w2)), y)), -1.0);
  };
  forward().backward();
  double err = max_fd_error([&] { NoGradGuard ng; return forward().item(); }, {w1, b1, w2});
  EXPECT_LE(err, 1e-4);
}

TEST(Backward, DeterministicAcrossRuns) {
  auto run = [] {
    Rng rng(11);
    Tensor w = random_matrix(3, 3, rng, -1, 1, true);
    Tensor x = random_matrix(4, 3, rng);
    sum(softmax_rows(matmul(x, w))).backward();
    sum(exp(matmul(x, w))).backward();
    return w.grad();
  };
  EXPECT_EQ(run(), run());
}

// Every differentiable primitive against central differences, 100 random
// instances each.
TEST(Backward, PrimitivesMatchFiniteDifferences) {
  Rng rng(3);
  using Op = std::function<Tensor(const Tensor&)>;
  Tensor probe_weights;
  std::vector<std::pair<std::string, Op>> ops = {
      {"add", [&](const Tensor& a) { return add(a, mul(a, a)); }},
      {"sub", [&](const Tensor& a) { return sub(mul(a, a), a); }},
      {"scale", [](const Tensor& a) { return scale(a, -2.5); }},
      {"exp", [](const Tensor& a) { return exp(a); }},
      {"log", [](const Tensor& a) { return log(add_scalar(mul(a, a), 0.5)); }},
      {"clamp", [](const Tensor& a) { return clamp(a, -0.5, 0.5); }},
      {"relu", [](const Tensor& a) { return relu(a); }},
      {"softmax", [](const Tensor& a) { return softmax_rows(a); }},
      {"log_softmax", [](const Tensor& a) { return log_softmax_rows(a); }},
      {"leaky_softmax", [](const Tensor& a) { return leaky_softmax_rows(a); }},
      {"row_sum", [](const Tensor& a) { return row_sum(a); }},
      {"slice_cols", [](const Tensor& a) { return slice_cols(a, 1, 3); }},
      {"column", [](const Tensor& a) { return column(a, 2); }},
      {"matmul", [&](const Tensor& a) { return matmul(a, probe_weights); }},
      {"grl", [](const Tensor& a) { return scale(gradient_reversal(a, 1.0), -1.0); }},
      {"nuclear_norm", [](const Tensor& a) { return nuclear_norm(a); }},
  };
  for (auto& [name, op] : ops) {
    double worst = 0;
    for (int trial = 0; trial < 100; ++trial) {
      Tensor a = random_matrix(4, 3, rng, -2, 2, true);
      probe_weights = random_matrix(3, 2, rng);
      // Random projection so every output component contributes.
      Tensor out = op(a);
      Tensor proj = random_matrix(1, out.size(), rng);
      auto loss = [&] {
        Tensor o = op(a);
        return sum(mul(Tensor(o.shape(), values(proj)), o));
      };
      loss().backward();
      // Skip instances within one step of a kink.
      bool near_kink = false;
      for (double v : a.data())
        if ((name == "relu" && std::abs(v) < 1e-4) || (name == "clamp" && std::abs(std::abs(v) - 0.5) < 1e-4))
          near_kink = true;
      if (!near_kink) {
        double sign = name == "grl" ? -1.0 : 1.0;
        worst = std::max(worst, max_fd_error([&] { NoGradGuard ng; return loss().item(); }, {a}, sign));
      }
    }
    EXPECT_LE(worst, 1e-4) << name;
  }
}

TEST(GradientReversal, IdentityForward) {
  Tensor x = Tensor::vector({1.5, -2});
  Tensor y = gradient_reversal(x);
  EXPECT_EQ(values(y), values(x));
}

TEST(GradientReversal, FlipsUpstreamGradient) {
  Tensor x = Tensor::vector({1.5, -2}, true);
  sum(gradient_reversal(x, 1.0)).backward();
  EXPECT_EQ(x.grad(), (std::vector<double>{-1, -1}));
}

TEST(GradientReversal, ScalesByCoefficient) {
  Tensor w = Tensor::vector({0.1, 4, -3}, true);
  sum(gradient_reversal(w, 2.0)).backward();
  EXPECT_EQ(w.grad(), (std::vector<double>{-2, -2, -2}));
}

TEST(GradientReversal, RejectsNonPositiveCoefficient) {
  EXPECT_THROW(gradient_reversal(Tensor::vector({1}), 0.0), ContractError);
}

TEST(StopGradient, IdentityForward) {
  Tensor x = Tensor::vector({0.2}, true);
  EXPECT_EQ(values(stop_gradient(x)), values(x));
}

TEST(StopGradient, BlocksGradient) {
  Tensor w = Tensor::vector({1, 2, 3}, true);
  Tensor loss = add(sum(stop_gradient(w)), sum(mul(w, Tensor::vector({0, 0, 0}))));
  loss.backward();
  EXPECT_EQ(w.grad(), (std::vector<double>{0, 0, 0}));
}

TEST(StopGradient, CutsOneBranchOfProduct) {
  Tensor w = Tensor::vector({3}, true);
  sum(mul(w, stop_gradient(w))).backward();
  EXPECT_EQ(w.grad(), (std::vector<double>{3}));
}

TEST(NuclearNorm, HandCases) {
  EXPECT_NEAR(nuclear_norm(Tensor::matrix(2, 2, {1, 0, 0, 1})).item(), 2.0, 1e-12);
  EXPECT_NEAR(nuclear_norm(Tensor::matrix(2, 2, {1, 0, 1, 0})).item(), std::sqrt(2.0), 1e-12);
  EXPECT_EQ(nuclear_norm(Tensor::matrix(3, 2, {0, 0, 0, 0, 0, 0})).item(), 0.0);
}

TEST(NuclearNorm, MatchesEigenSvd) {
  Rng rng(5);
  for (int trial = 0; trial < 100; ++trial) {
    Tensor a = random_matrix(48, 3, rng, 0, 1);
    Eigen::MatrixXd m(48, 3);
    for (int i = 0; i < 48; ++i)
      for (int j = 0; j < 3; ++j) m(i, j) = a.at(i, j);
    double expect = Eigen::JacobiSVD<Eigen::MatrixXd>(m).singularValues().sum();
    EXPECT_NEAR(nuclear_norm(a).item(), expect, 1e-8);
  }
}

TEST(NuclearNorm, AtLeastFrobeniusWithEqualityAtRankOne) {
  Rng rng(9);
  for (int trial = 0; trial < 50; ++trial) {
    Tensor a = random_matrix(6, 3, rng);
    double fro = 0;
    for (double v : a.data()) fro += v * v;
    fro = std::sqrt(fro);
    EXPECT_GE(nuclear_norm(a).item(), fro - 1e-12);

    Tensor u = random_matrix(6, 1, rng), v = random_matrix(1, 3, rng);
    Tensor r1 = matmul(u, v);
    double fro1 = 0;
    for (double x : r1.data()) fro1 += x * x;
    EXPECT_NEAR(nuclear_norm(r1).item(), std::sqrt(fro1), 1e-10);
  }
}

TEST(NuclearNorm, SubgradientIsUVt) {
  Rng rng(13);
  Tensor a = random_matrix(5, 3, rng, -1, 1, true);
  nuclear_norm(a).backward();
  Eigen::MatrixXd m(5, 3);
  for (int i = 0; i < 5; ++i)
    for (int j = 0; j < 3; ++j) m(i, j) = a.at(i, j);
  Eigen::JacobiSVD<Eigen::MatrixXd> svd(m, Eigen::ComputeThinU | Eigen::ComputeThinV);
  Eigen::MatrixXd uvt = svd.matrixU() * svd.matrixV().transpose();
  auto g = a.grad();
  for (int i = 0; i < 5; ++i)
    for (int j = 0; j < 3; ++j) EXPECT_NEAR(g[i * 3 + j], uvt(i, j), 1e-9);
}

TEST(NuclearNorm, NonFiniteInputReported) {
  EXPECT_THROW(nuclear_norm(Tensor::matrix(1, 2, {1, std::nan("")})), NumericError);
}

TEST(NoGrad, GuardSkipsGraph) {
  Tensor w = Tensor::vector({1, 2}, true);
  NoGradGuard ng;
  Tensor y = mul(w, w);
  EXPECT_FALSE(y.requires_grad());
}
