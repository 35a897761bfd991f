#pragma once

#include <optional>
#include <vector>

#include "ipslt/rng.hpp"
#include "ipslt/tensor.hpp"

namespace ipslt {

// Reverse-mode primitives. Every op takes the active tape as first
// argument; passing nullptr evaluates values only (inference mode). An op
// records its gradient rule when the tape is set and at least one input
// requires a gradient, and then marks its output requires_grad so the
// chain continues downstream.

template <typename Real>
Tensor<Real> add(Tape<Real>* tape, const Tensor<Real>& a,
                 const Tensor<Real>& b);

// a[m x n] + row vector b[n] broadcast over rows (bias add).
template <typename Real>
Tensor<Real> add_rowvec(Tape<Real>* tape, const Tensor<Real>& a,
                        const Tensor<Real>& b);

template <typename Real>
Tensor<Real> scale(Tape<Real>* tape, const Tensor<Real>& a, Real c);

// Elementwise (Hadamard) product.
template <typename Real>
Tensor<Real> mul(Tape<Real>* tape, const Tensor<Real>& a,
                 const Tensor<Real>& b);

template <typename Real>
Tensor<Real> matmul(Tape<Real>* tape, const Tensor<Real>& a,
                    const Tensor<Real>& b);

template <typename Real>
Tensor<Real> transpose(Tape<Real>* tape, const Tensor<Real>& a);

// 2-D concat along axis 0 (rows) or 1 (columns).
template <typename Real>
Tensor<Real> concat(Tape<Real>* tape, const std::vector<Tensor<Real>>& parts,
                    int axis);

// 2-D slice of `len` indices starting at `start` along the given axis.
template <typename Real>
Tensor<Real> slice(Tape<Real>* tape, const Tensor<Real>& a, int axis,
                   int start, int len);

template <typename Real>
Tensor<Real> relu(Tape<Real>* tape, const Tensor<Real>& a);

// Softmax along `axis` (negative counts from the back). Slices along the
// axis are max-subtracted, non-negative, and sum to 1.
template <typename Real>
Tensor<Real> softmax(Tape<Real>* tape, const Tensor<Real>& a, int axis = -1);

// Per-row normalization over the last axis: (x - mean) / sqrt(var + eps),
// then the affine gain/bias. Requires last dimension >= 2.
template <typename Real>
Tensor<Real> layer_norm(Tape<Real>* tape, const Tensor<Real>& x,
                        const Tensor<Real>& gain, const Tensor<Real>& bias,
                        Real eps = Real(1e-5));

// Gathers table rows by id; gradient scatter-adds back into the table.
template <typename Real>
Tensor<Real> embedding_lookup(Tape<Real>* tape, const Tensor<Real>& table,
                              const std::vector<int>& ids);

// Inverted dropout: keep with probability 1-p and scale kept values by
// 1/(1-p) so evaluation mode is the identity. Training mode needs an rng.
template <typename Real>
Tensor<Real> dropout(Tape<Real>* tape, const Tensor<Real>& x, Real p,
                     bool training, Rng* rng);

template <typename Real>
Tensor<Real> sum(Tape<Real>* tape, const Tensor<Real>& a);

template <typename Real>
Tensor<Real> mean(Tape<Real>* tape, const Tensor<Real>& a);

// Mean over non-pad positions of -log softmax(logits)[target]. Pad
// positions (target == pad_id) contribute zero. Scalar output.
template <typename Real>
Tensor<Real> cross_entropy_from_logits(Tape<Real>* tape,
                                       const Tensor<Real>& logits,
                                       const std::vector<int>& targets,
                                       int pad_id);

// Mean over non-pad rows of KL(softmax(teacher) || softmax(student)).
// The teacher is a constant: no gradient ever flows into it, matching the
// usual distillation setup where only the student is pulled.
template <typename Real>
Tensor<Real> kl_divergence_from_logits(Tape<Real>* tape,
                                       const Tensor<Real>& student,
                                       const Tensor<Real>& teacher,
                                       const std::vector<bool>& is_pad);

// Boolean attention mask; allow[i*cols+j] says query i may see key j.
struct AttentionMaskSpec {
  int rows = 0;
  int cols = 0;
  std::vector<std::uint8_t> allow;

  static AttentionMaskSpec causal(int n);
  // Queries may see only the first `valid` keys.
  static AttentionMaskSpec key_prefix(int rows, int cols, int valid);
  bool allowed(int i, int j) const {
    return allow[static_cast<std::size_t>(i) * cols + j] != 0;
  }
};

// Sets disallowed score entries to -infinity so softmax zeroes them.
// A row with every position masked is rejected.
template <typename Real>
Tensor<Real> apply_attention_mask(Tape<Real>* tape, const Tensor<Real>& scores,
                                  const AttentionMaskSpec& mask);

}  // namespace ipslt
