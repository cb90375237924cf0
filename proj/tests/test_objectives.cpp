#include <doctest.h>

#include "helpers.hpp"

using namespace testutil;

namespace {

double lse(const MatrixXd& row) {
  double s = 0.0;
  for (Eigen::Index k = 0; k < row.size(); ++k) s += std::exp(row(k));
  return std::log(s);
}

// dLoss/dlogits by central differences of the scalar loss.
template <typename Fn>
MatrixXd numeric_grad(MatrixXd logits, Fn&& loss) {
  MatrixXd g(logits.rows(), logits.cols());
  const double h = 1e-6;
  for (Eigen::Index i = 0; i < logits.size(); ++i) {
    const double s = logits.data()[i];
    logits.data()[i] = s + h;
    const double up = loss(logits);
    logits.data()[i] = s - h;
    const double down = loss(logits);
    logits.data()[i] = s;
    g.data()[i] = (up - down) / (2 * h);
  }
  return g;
}

}  // namespace

TEST_CASE("purr loss is cross-entropy plus z-loss") {
  const MatrixXd logits = mat({{0.5, -1.0, 2.0}, {0.0, 0.3, -0.4}});
  const CodeGrid target{{2, 0}};
  const LossReport r = purr_loss(logits, target, 1e-5);
  const double l0 = lse(logits.row(0)), l1 = lse(logits.row(1));
  const double ce = ((l0 - 2.0) + (l1 - 0.0)) / 2;
  CHECK(r.primary_term == doctest::Approx(ce).epsilon(1e-14));
  CHECK(r.z_term == doctest::Approx(1e-5 * (l0 * l0 + l1 * l1) / 2).epsilon(1e-14));
  CHECK(r.mean_log2z == doctest::Approx((l0 * l0 + l1 * l1) / 2).epsilon(1e-14));
  CHECK(r.total == doctest::Approx(r.primary_term + r.z_term).epsilon(1e-15));
  CHECK(r.per_position.size() == 2);
  CHECK(purr_loss(logits, target, 0.0).z_term == 0.0);
}

TEST_CASE("uniform logits give log K") {
  const LossReport r = purr_loss(MatrixXd::Zero(3, 8).eval(), CodeGrid{{0, 7, 3}}, 0.0);
  CHECK(r.primary_term == doctest::Approx(std::log(8.0)).epsilon(1e-14));
}

TEST_CASE("z-term on zero logits over a large codebook") {
  const int K = 16384;
  const LossReport r = purr_loss(MatrixXd::Zero(1, K).eval(), CodeGrid{{123}}, kDefaultZCoeff);
  const double expect = 1e-5 * std::pow(std::log(16384.0), 2);
  CHECK(std::abs(r.z_term - expect) <= 1e-12 * expect);
}

TEST_CASE("logit gradients match finite differences") {
  const MatrixXd logits = mat({{0.5, -1.0, 2.0, 0.1}, {0.0, 0.3, -0.4, 1.5}, {3.0, 2.0, 1.0, 0.0}});
  const CodeGrid target{{2, 0, 3}};
  MatrixXd grad;
  purr_loss(logits, target, 0.05, &grad);
  const MatrixXd fd = numeric_grad(logits, [&](const MatrixXd& l) { return purr_loss(l, target, 0.05).total; });
  CHECK((grad - fd).cwiseAbs().maxCoeff() < 1e-8);

  const MaskedGrid masked{{4, 0, 4}, {true, false, true}};
  dfm_loss(logits, target, masked, &grad);
  const MatrixXd fd2 = numeric_grad(logits, [&](const MatrixXd& l) { return dfm_loss(l, target, masked).total; });
  CHECK((grad - fd2).cwiseAbs().maxCoeff() < 1e-8);
  CHECK(grad.row(1).cwiseAbs().maxCoeff() == 0.0);

  const LatentPoint z0 = mat({{0.1, -0.3}, {1.0, 0.2}});
  const LatentPoint z1 = mat({{2, 0}, {0, 2}});
  const MatrixXd v = mat({{1.0, 0.5}, {-1.0, 1.0}});
  cfm_loss(v, z0, z1, 0.4, &grad);
  const MatrixXd fd3 = numeric_grad(v, [&](const MatrixXd& x) { return cfm_loss(x, z0, z1, 0.4).total; });
  CHECK((grad - fd3).cwiseAbs().maxCoeff() < 1e-8);
}

TEST_CASE("cfm loss targets the straight-line velocity") {
  const LatentPoint z0 = mat({{0.1, -0.3}});
  const LatentPoint z1 = mat({{2, 0}});
  const LossReport exact = cfm_loss(MatrixXd(z1 - z0), z0, z1, 0.7);
  CHECK(exact.total < 1e-24);
  const LossReport off = cfm_loss(MatrixXd(z1 - z0 + mat({{1, 1}})), z0, z1, 0.7);
  CHECK(off.total == doctest::Approx(1.0).epsilon(1e-12));
  CHECK_THROWS(cfm_loss(mat({{1, 2, 3}}), z0, z1, 0.5));
}

TEST_CASE("dfm corruption keeps each code with probability t") {
  const CodeGrid grid{std::vector<int>(10, 3)};
  Rng rng = make_rng(4, "c");
  double kept = 0.0;
  const int trials = 4000;
  for (int i = 0; i < trials; ++i) {
    const MaskedGrid m = dfm_corrupt(grid, 0.3, 5, rng);
    for (int g = 0; g < 10; ++g) {
      if (m.masked[static_cast<std::size_t>(g)]) {
        CHECK(m.codes[static_cast<std::size_t>(g)] == 5);
      } else {
        kept += 1.0 / (trials * 10);
      }
    }
  }
  CHECK(kept == doctest::Approx(0.3).epsilon(0.03));
  CHECK(dfm_corrupt(grid, 0.0, 5, 1).masked_count() == 10);
  CHECK(dfm_corrupt(grid, 0.6, 5, 9).codes == dfm_corrupt(grid, 0.6, 5, 9).codes);
}

TEST_CASE("dfm loss with nothing masked is zero") {
  const LossReport r = dfm_loss(mat({{1, 2}}), CodeGrid{{0}}, MaskedGrid{{0}, {false}});
  CHECK(r.total == 0.0);
}

TEST_CASE("invalid loss inputs") {
  CHECK_THROWS(purr_loss(mat({{1, 2}}), CodeGrid{{2}}));
  CHECK_THROWS(purr_loss(mat({{1, 2}}), CodeGrid{{0, 1}}));
  CHECK_THROWS_AS(purr_loss(mat({{1, std::nan("")}}), CodeGrid{{0}}), NumericalError);
  CHECK(method_from_name("dfm") == Method::dfm);
  CHECK_THROWS_AS(method_from_name("ddpm"), ConfigError);
}

TEST_CASE("network gradients pass the gradient check") {
  const Codebook cb = square_codebook();
  const DataSpec spec = markov_reference();
  for (Method m : {Method::purrception, Method::cfm, Method::dfm}) {
    CAPTURE(method_name(m));
    const ModelConfig cfg = tiny_model(m, 2, 4, 2);
    const Params<double> params = perturbed_params(cfg, 17);
    const Batch<double> batch = make_batch<double>(m, cfg, cb, spec, 8, 5);
    const double err = grad_check(params, cfg, cb, batch, LossSettings{m, kDefaultZCoeff}, GradCheckOptions{1e-5, 200, 3});
    CHECK(err <= 1e-4);
  }
}

TEST_CASE("batch loss averages per-sample losses") {
  const Codebook cb = square_codebook();
  const ModelConfig cfg = tiny_model(Method::purrception, 2, 4, 2);
  const Params<double> params = perturbed_params(cfg, 2);
  const Batch<double> batch = make_batch<double>(Method::purrception, cfg, cb, markov_reference(), 6, 1);
  const BatchResult<double> res = loss_and_grad(params, cfg, cb, batch, LossSettings{}, false);
  const Mat<double> logits = forward(params, cfg, cb, batch.input);
  double mean = 0.0;
  for (int i = 0; i < 6; ++i) {
    const MatrixXd block = Eigen::Map<const MatrixXd>(logits.row(i).data(), 2, 4);
    mean += purr_loss(block, batch.targets[static_cast<std::size_t>(i)]).total / 6;
  }
  CHECK(res.report.total == doctest::Approx(mean).epsilon(1e-12));

  Batch<double> empty;
  CHECK_THROWS(loss_and_grad(params, cfg, cb, empty, LossSettings{}));
  CHECK_THROWS(loss_and_grad(params, cfg, cb, batch, LossSettings{Method::cfm, 0.0}));
}
