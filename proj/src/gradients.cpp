#include "vqflow/gradients.hpp"

#include <algorithm>
#include <cmath>

namespace vqflow {

Head head_for(Method m) {
  switch (m) {
    case Method::purrception: return Head::categorical;
    case Method::cfm: return Head::velocity;
    case Method::dfm: return Head::discrete_token;
  }
  return Head::categorical;
}

template <typename T>
BatchResult<T> loss_and_grad(const Params<T>& params, const ModelConfig& cfg, const Codebook& cb, const Batch<T>& batch,
                             const LossSettings& loss, bool want_grad) {
  const std::size_t n = batch.size();
  if (n == 0) throw std::invalid_argument("loss_and_grad: empty batch");
  if (batch.input.size() != n) throw std::invalid_argument("loss_and_grad: input and target counts differ");
  if (cfg.head != head_for(loss.method)) throw std::invalid_argument("loss_and_grad: model head does not match method");

  ForwardCache<T> cache;
  const Mat<T> out = forward(params, cfg, cb, batch.input, want_grad ? &cache : nullptr);

  const int G = cfg.G;
  const int width = cfg.head == Head::velocity ? cfg.E : cfg.K;
  Mat<T> grad_out(out.rows(), out.cols());
  BatchResult<T> result;
  LossReport& mean = result.report;
  mean.per_position.assign(static_cast<std::size_t>(G), 0.0);
  const T inv_n = T(1) / static_cast<T>(n);

  Mat<T> sample_out(G, width);
  Mat<T> sample_grad;
  for (std::size_t i = 0; i < n; ++i) {
    const auto row = static_cast<Eigen::Index>(i);
    sample_out = Eigen::Map<const Mat<T>>(out.row(row).data(), G, width);
    LossReport r;
    Mat<T>* gp = want_grad ? &sample_grad : nullptr;
    switch (loss.method) {
      case Method::purrception:
        r = purr_loss<T>(sample_out, batch.targets[i], loss.z_coeff, gp);
        break;
      case Method::cfm: {
        const LatentPoint z0 = Eigen::Map<const MatrixXd>(batch.z0.row(row).data(), G, cfg.E);
        const LatentPoint z1 = Eigen::Map<const MatrixXd>(batch.z1.row(row).data(), G, cfg.E);
        r = cfm_loss<T>(sample_out, z0, z1, batch.input.t[i], gp);
        break;
      }
      case Method::dfm:
        r = dfm_loss<T>(sample_out, batch.targets[i], batch.input.tokens[i], gp);
        break;
    }
    mean.total += r.total;
    mean.primary_term += r.primary_term;
    mean.z_term += r.z_term;
    mean.mean_log2z += r.mean_log2z;
    for (int g = 0; g < G; ++g) mean.per_position[static_cast<std::size_t>(g)] += r.per_position[static_cast<std::size_t>(g)];
    if (want_grad) grad_out.row(row) = Eigen::Map<const Eigen::Matrix<T, 1, Eigen::Dynamic>>(sample_grad.data(), G * width) * inv_n;
  }
  const double dn = static_cast<double>(n);
  mean.total /= dn;
  mean.primary_term /= dn;
  mean.z_term /= dn;
  mean.mean_log2z /= dn;
  for (double& v : mean.per_position) v /= dn;
  if (!std::isfinite(mean.total)) throw NumericalError("loss_and_grad: non-finite loss");

  if (want_grad) {
    result.grads = backward(params, cfg, batch.input, cache, grad_out);
  } else {
    result.grads = Params<T>::zeros_like(params.layout);
  }
  return result;
}

template BatchResult<float> loss_and_grad<float>(const Params<float>&, const ModelConfig&, const Codebook&, const Batch<float>&,
                                                 const LossSettings&, bool);
template BatchResult<double> loss_and_grad<double>(const Params<double>&, const ModelConfig&, const Codebook&,
                                                   const Batch<double>&, const LossSettings&, bool);

double grad_check(const Params<double>& params, const ModelConfig& cfg, const Codebook& cb, const Batch<double>& batch,
                  const LossSettings& loss, const GradCheckOptions& opts) {
  const BatchResult<double> analytic = loss_and_grad(params, cfg, cb, batch, loss, true);
  Params<double> probe = params;
  Rng rng = make_rng(opts.seed, "grad_check");
  const std::size_t total = params.size();
  std::vector<std::size_t> coords(total);
  for (std::size_t i = 0; i < total; ++i) coords[i] = i;
  std::shuffle(coords.begin(), coords.end(), rng);
  coords.resize(std::min<std::size_t>(total, static_cast<std::size_t>(std::max(opts.coordinates, 0))));

  double worst = 0.0;
  for (std::size_t idx : coords) {
    const double orig = probe.values[idx];
    probe.values[idx] = orig + opts.epsilon;
    const double up = loss_and_grad(probe, cfg, cb, batch, loss, false).report.total;
    probe.values[idx] = orig - opts.epsilon;
    const double down = loss_and_grad(probe, cfg, cb, batch, loss, false).report.total;
    probe.values[idx] = orig;
    const double fd = (up - down) / (2.0 * opts.epsilon);
    const double ad = analytic.grads.values[idx];
    const double rel = std::abs(ad - fd) / std::max(1e-8, std::abs(ad) + std::abs(fd));
    worst = std::max(worst, rel);
  }
  return worst;
}

}  // namespace vqflow
