#ifndef SMOOTHCERT_SCORER_HPP
#define SMOOTHCERT_SCORER_HPP

#include "smoothcert/certify.hpp"
#include "smoothcert/vit.hpp"

namespace smoothcert {

/// Wraps a model as a certifiable batch scorer. Inference only touches
/// read-only parameter values, so the scorer is safe for concurrent calls.
inline BatchScorer make_vit_scorer(VitModel<float>& m) {
  return [&m](const Mat<float>& x) { return argmax_rows(forward_logits(m, x)); };
}

}  // namespace smoothcert

#endif  // SMOOTHCERT_SCORER_HPP
