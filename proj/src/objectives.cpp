#include "vqflow/objectives.hpp"

#include <cmath>

#include "vqflow/path.hpp"

namespace vqflow {

namespace {

template <typename T>
void check_logits(const Mat<T>& logits, const CodeGrid& target, const char* where) {
  if (logits.rows() != target.size()) throw std::invalid_argument(std::string(where) + ": logits rows != grid size");
  if (!logits.allFinite()) throw NumericalError(std::string(where) + ": non-finite logits");
  for (int code : target.codes) {
    if (code < 0 || code >= logits.cols()) throw std::out_of_range(std::string(where) + ": target code out of range");
  }
}

// log-sum-exp and softmax of one row.
template <typename T>
T row_lse(const Mat<T>& logits, Eigen::Index g, Vec<T>* probs) {
  const T m = logits.row(g).maxCoeff();
  Vec<T> e = (logits.row(g).array() - m).exp().transpose();
  const T s = e.sum();
  if (probs) *probs = e / s;
  return m + std::log(s);
}

}  // namespace

const char* method_name(Method m) {
  switch (m) {
    case Method::purrception: return "purrception";
    case Method::cfm: return "cfm";
    case Method::dfm: return "dfm";
  }
  return "?";
}

Method method_from_name(const std::string& name) {
  if (name == "purrception") return Method::purrception;
  if (name == "cfm") return Method::cfm;
  if (name == "dfm") return Method::dfm;
  throw ConfigError("unknown method '" + name + "'");
}

template <typename T>
LossReport purr_loss(const Mat<T>& logits, const CodeGrid& target, double z_coeff, Mat<T>* grad) {
  check_logits(logits, target, "purr_loss");
  const auto G = logits.rows();
  LossReport r;
  r.per_position.resize(static_cast<std::size_t>(G));
  if (grad) grad->resize(logits.rows(), logits.cols());
  const T inv_g = T(1) / static_cast<T>(G);
  Vec<T> probs;
  for (Eigen::Index g = 0; g < G; ++g) {
    const T lse = row_lse(logits, g, grad ? &probs : nullptr);
    const int y = target[static_cast<int>(g)];
    const double ce = static_cast<double>(lse - logits(g, y));
    const double zl = z_coeff * static_cast<double>(lse) * static_cast<double>(lse);
    r.primary_term += ce;
    r.z_term += zl;
    r.mean_log2z += static_cast<double>(lse) * static_cast<double>(lse);
    r.per_position[static_cast<std::size_t>(g)] = ce + zl;
    if (grad) {
      const T zscale = static_cast<T>(2.0 * z_coeff) * lse;
      grad->row(g) = (probs * (T(1) + zscale)).transpose() * inv_g;
      (*grad)(g, y) -= inv_g;
    }
  }
  r.primary_term /= static_cast<double>(G);
  r.z_term /= static_cast<double>(G);
  r.mean_log2z /= static_cast<double>(G);
  r.total = r.primary_term + r.z_term;
  return r;
}

template <typename T>
LossReport cfm_loss(const Mat<T>& v_pred, const LatentPoint& z0, const LatentPoint& z1, double t, Mat<T>* grad) {
  if (v_pred.rows() != z1.rows() || v_pred.cols() != z1.cols()) throw std::invalid_argument("cfm_loss: shape mismatch");
  const LatentPoint target = conditional_velocity(interpolate(z0, z1, t), z1, t);
  const MatrixXd resid = v_pred.template cast<double>() - target;
  const double count = static_cast<double>(resid.size());
  LossReport r;
  r.per_position.resize(static_cast<std::size_t>(resid.rows()));
  for (Eigen::Index g = 0; g < resid.rows(); ++g) r.per_position[static_cast<std::size_t>(g)] = resid.row(g).squaredNorm() / count;
  r.primary_term = resid.squaredNorm() / count;
  r.total = r.primary_term;
  if (grad) *grad = (resid * (2.0 / count)).template cast<T>();
  return r;
}

MaskedGrid dfm_corrupt(const CodeGrid& target, double t, int K, Rng& rng) {
  MaskedGrid m;
  m.codes = target.codes;
  m.masked.assign(target.codes.size(), false);
  for (std::size_t g = 0; g < m.codes.size(); ++g) {
    if (uniform01(rng) >= t) {
      m.masked[g] = true;
      m.codes[g] = K;
    }
  }
  return m;
}

MaskedGrid dfm_corrupt(const CodeGrid& target, double t, int K, std::uint64_t seed) {
  Rng rng = make_rng(seed, "corrupt");
  return dfm_corrupt(target, t, K, rng);
}

template <typename T>
LossReport dfm_loss(const Mat<T>& logits, const CodeGrid& target, const MaskedGrid& masked, Mat<T>* grad) {
  check_logits(logits, target, "dfm_loss");
  if (masked.size() != target.size()) throw std::invalid_argument("dfm_loss: mask length mismatch");
  const auto G = logits.rows();
  LossReport r;
  r.per_position.assign(static_cast<std::size_t>(G), 0.0);
  if (grad) grad->setZero(logits.rows(), logits.cols());
  const int count = masked.masked_count();
  if (count == 0) return r;
  const T inv = T(1) / static_cast<T>(count);
  Vec<T> probs;
  for (Eigen::Index g = 0; g < G; ++g) {
    if (!masked.masked[static_cast<std::size_t>(g)]) continue;
    const T lse = row_lse(logits, g, grad ? &probs : nullptr);
    const int y = target[static_cast<int>(g)];
    const double ce = static_cast<double>(lse - logits(g, y));
    r.per_position[static_cast<std::size_t>(g)] = ce;
    r.primary_term += ce;
    if (grad) {
      grad->row(g) = probs.transpose() * inv;
      (*grad)(g, y) -= inv;
    }
  }
  r.primary_term /= count;
  r.total = r.primary_term;
  return r;
}

template LossReport purr_loss<float>(const Mat<float>&, const CodeGrid&, double, Mat<float>*);
template LossReport purr_loss<double>(const Mat<double>&, const CodeGrid&, double, Mat<double>*);
template LossReport cfm_loss<float>(const Mat<float>&, const LatentPoint&, const LatentPoint&, double, Mat<float>*);
template LossReport cfm_loss<double>(const Mat<double>&, const LatentPoint&, const LatentPoint&, double, Mat<double>*);
template LossReport dfm_loss<float>(const Mat<float>&, const CodeGrid&, const MaskedGrid&, Mat<float>*);
template LossReport dfm_loss<double>(const Mat<double>&, const CodeGrid&, const MaskedGrid&, Mat<double>*);

}  // namespace vqflow
