#pragma once

#include <string>
#include <vector>

#include "vqflow/codebook.hpp"

namespace vqflow {

inline constexpr double kDefaultZCoeff = 1e-5;

enum class Method { purrception, cfm, dfm };

const char* method_name(Method m);
Method method_from_name(const std::string& name);

struct LossReport {
  double total = 0.0;
  double primary_term = 0.0;
  double z_term = 0.0;
  std::vector<double> per_position;
  // Mean over positions of (log Z)^2; zero for losses without logits.
  double mean_log2z = 0.0;
};

/// Cross-entropy of the target codes under softmax(logits) (tau = 1),
/// averaged over positions, plus z_coeff * mean_g (log Z_g)^2.
/// `logits` is G x K. When `grad` is given it receives dLoss/dlogits.
template <typename T>
LossReport purr_loss(const Mat<T>& logits, const CodeGrid& target, double z_coeff = kDefaultZCoeff, Mat<T>* grad = nullptr);

/// Mean squared error against the conditional velocity of the straight path
/// from z0 to z1 evaluated at t.
template <typename T>
LossReport cfm_loss(const Mat<T>& v_pred, const LatentPoint& z0, const LatentPoint& z1, double t, Mat<T>* grad = nullptr);

/// Each position keeps its code with probability t, otherwise becomes MASK
/// (encoded as K).
MaskedGrid dfm_corrupt(const CodeGrid& target, double t, int K, Rng& rng);
MaskedGrid dfm_corrupt(const CodeGrid& target, double t, int K, std::uint64_t seed);

/// Cross-entropy over masked positions only; zero when nothing is masked.
template <typename T>
LossReport dfm_loss(const Mat<T>& logits, const CodeGrid& target, const MaskedGrid& masked, Mat<T>* grad = nullptr);

}  // namespace vqflow
