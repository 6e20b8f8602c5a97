#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <stdexcept>
#include <string>
#include <vector>

#include "fbmtl/rng.hpp"
#include "fbmtl/tensor.hpp"

namespace fbmtl {

// Position gate for one feedback route: draws Gumbel noise, picks the infusion
// block by perturbed argmax in the forward pass, and exposes the paired
// softmax surrogate for the backward pass (straight-through).
//
// Two flavours:
//   Verbatim      - the threshold is the max-norm of the amplified signal,
//                   added identically to every candidate, so selection is
//                   driven by the noise alone and the surrogate carries no
//                   positional gradient (softmax shift invariance).
//   LearnedLogits - a trainable score per candidate position; selection
//                   frequencies follow softmax(scores) and the surrogate
//                   trains them.
enum class GateMode { kVerbatim, kLearnedLogits };

inline GateMode gate_mode_from_string(const std::string& s) {
  if (s == "verbatim") return GateMode::kVerbatim;
  if (s == "learned" || s == "learned-logits") return GateMode::kLearnedLogits;
  throw ConfigError("gate.mode must be 'verbatim' or 'learned', got '" + s + "'");
}

// i.i.d. standard Gumbel draws, G = -log(-log U) with U clamped away from the
// endpoints.
inline std::vector<double> sample_gumbel(std::size_t m, Rng& rng) {
  if (m == 0) throw std::invalid_argument("sample_gumbel: m must be positive");
  std::vector<double> g(m);
  for (double& x : g) {
    double u = std::clamp(rng.uniform01(), 1e-12, 1.0 - 1e-12);
    x = -std::log(-std::log(u));
  }
  return g;
}

struct GateState {
  std::string route_id;
  std::size_t candidates = 0;  // target branch depth
  GateMode mode = GateMode::kLearnedLogits;
  double temperature = 1.0;
  Tensor position_logits;  // [candidates], learned mode only

  // Last draw, kept so forward selection and backward weights stay paired.
  std::vector<double> last_gumbel;
  std::size_t last_selection = 0;
  std::vector<double> last_soft;
  bool has_draw = false;

  std::vector<std::size_t> selection_counts;  // filled during training

  GateState() = default;
  GateState(std::string route, std::size_t m, GateMode gate_mode, double tau)
      : route_id(std::move(route)),
        candidates(m),
        mode(gate_mode),
        temperature(tau),
        selection_counts(m, 0) {
    if (m == 0) throw ConfigError("gate: candidate count must be positive");
    if (tau <= 0.0) throw ConfigError("gate.temperature must be positive");
  }

  void attach_logits(Tensor z) {
    if (z.numel() != candidates)
      throw ShapeError("gate: logits size " + std::to_string(z.numel()) +
                       " != candidates " + std::to_string(candidates));
    position_logits = std::move(z);
  }

  void reset_counts() { selection_counts.assign(candidates, 0); }
};

namespace detail {

inline std::vector<double> gate_base_logits(const GateState& state, const Tensor& amplified) {
  if (state.mode == GateMode::kLearnedLogits) {
    if (!state.position_logits.defined())
      throw std::logic_error("gate: learned mode without attached logits");
    return state.position_logits.values();
  }
  double mx = 0.0;
  for (double v : amplified.values()) mx = std::max(mx, std::abs(v));
  return std::vector<double>(state.candidates, mx);
}

}  // namespace detail

// Forward selection: argmax over (threshold + G), ties broken by the lowest
// index. Pass rng = nullptr for noise-free evaluation (G = 0).
inline std::size_t gate_select(GateState& state, const Tensor& amplified, Rng* rng) {
  if (amplified.numel() == 0) throw ShapeError("gate_select: empty feedback signal");
  std::vector<double> logits = detail::gate_base_logits(state, amplified);
  state.last_gumbel = rng ? sample_gumbel(state.candidates, *rng)
                          : std::vector<double>(state.candidates, 0.0);
  std::size_t best = 0;
  double best_v = logits[0] + state.last_gumbel[0];
  for (std::size_t t = 1; t < state.candidates; ++t) {
    const double v = logits[t] + state.last_gumbel[t];
    if (v > best_v) {
      best_v = v;
      best = t;
    }
  }
  state.last_selection = best;
  state.has_draw = true;
  // noise-free evaluation calls do not pollute the training histogram
  if (rng && best < state.selection_counts.size()) state.selection_counts[best]++;
  return best;
}

inline std::vector<double> gate_forward_onehot(const GateState& state) {
  if (!state.has_draw) throw std::logic_error("gate: no selection drawn yet");
  std::vector<double> e(state.candidates, 0.0);
  e[state.last_selection] = 1.0;
  return e;
}

// Backward surrogate: softmax((threshold + G) / tau) with the same G as the
// matching forward selection. Differentiable w.r.t. the amplified signal in
// verbatim mode (through the max-norm) and w.r.t. the learned scores.
inline Tensor gate_backward_weights(GateState& state, const Tensor& amplified) {
  if (!state.has_draw)
    throw std::logic_error("gate_backward_weights: called before gate_select");
  Tensor base;
  if (state.mode == GateMode::kLearnedLogits) {
    base = state.position_logits;
  } else {
    base = scalar_mul(inf_norm(amplified), Tensor::full({state.candidates}, 1.0));
  }
  Tensor perturbed = add(base, Tensor::leaf({state.candidates}, state.last_gumbel));
  Tensor soft = softmax(scale(perturbed, 1.0 / state.temperature), 0);
  state.last_soft = soft.values();
  return soft;
}

// One-hot forward value with the softmax surrogate on the backward path.
inline Tensor gate_straight_through(GateState& state, const Tensor& amplified, Rng* rng) {
  gate_select(state, amplified, rng);
  Tensor soft = gate_backward_weights(state, amplified);
  std::vector<double> correction = gate_forward_onehot(state);
  for (std::size_t i = 0; i < correction.size(); ++i) correction[i] -= soft.values()[i];
  return add(soft, Tensor::leaf({state.candidates}, std::move(correction)));
}

// Feedback signal delivered to position t: the gate weight at t times the
// amplified output. With a one-hot gamma this is the signal at the selected
// position and a zero tensor everywhere else.
inline Tensor infuse_gated(const Tensor& gamma, const Tensor& amplified, std::size_t t) {
  if (gamma.rank() != 1) throw ShapeError("infuse_gated: gamma must be rank 1");
  if (t >= gamma.numel())
    throw std::out_of_range("infuse_gated: position " + std::to_string(t) + " out of " +
                            std::to_string(gamma.numel()));
  return scalar_mul(entry(gamma, t), amplified);
}

}  // namespace fbmtl
