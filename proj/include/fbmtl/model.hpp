#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "fbmtl/gate.hpp"
#include "fbmtl/rng.hpp"
#include "fbmtl/tensor.hpp"

namespace fbmtl {

// Multi-task model with output feedback. A shared stack encodes the input
// once per prediction; task branches then produce outputs repeatedly, each
// iteration re-injecting every task's previous output into sibling branches
// through per-route amplifier projections. The injection point is either a
// fixed block index or chosen by a Gumbel gate.

enum class BlockKind { kAffineTanh, kAffineRelu, kRecurrent, kAffine };

inline BlockKind block_kind_from_string(const std::string& s) {
  if (s == "tanh") return BlockKind::kAffineTanh;
  if (s == "relu") return BlockKind::kAffineRelu;
  if (s == "recurrent") return BlockKind::kRecurrent;
  if (s == "affine" || s == "linear") return BlockKind::kAffine;
  throw ConfigError("unknown block kind '" + s + "'");
}

enum class TaskKind { kIntent, kSlots, kNextWord, kLinear };

inline TaskKind task_kind_from_string(const std::string& s) {
  if (s == "intent") return TaskKind::kIntent;
  if (s == "slots") return TaskKind::kSlots;
  if (s == "nwp") return TaskKind::kNextWord;
  if (s == "linear") return TaskKind::kLinear;
  throw ConfigError("unknown task kind '" + s + "' (intent|slots|nwp|linear)");
}

inline std::string task_kind_to_string(TaskKind k) {
  switch (k) {
    case TaskKind::kIntent: return "intent";
    case TaskKind::kSlots: return "slots";
    case TaskKind::kNextWord: return "nwp";
    case TaskKind::kLinear: return "linear";
  }
  return "?";
}

// One layer. Inputs arrive row-wise ([rows, in_width]); a block that serves
// as a feedback infusion candidate carries one extra weight matrix per
// incoming route, which is the affine map of the concatenated
// (signal, input) pair split into per-source factors.
struct LayerBlock {
  BlockKind kind = BlockKind::kAffineTanh;
  std::size_t in_width = 0;
  std::size_t out_width = 0;
  Tensor w_in;                 // [in_width, out_width]
  Tensor w_rec;                // [out_width, out_width], recurrent only
  Tensor bias;                 // [1, out_width]
  std::vector<Tensor> w_fb;    // one [fb_width, out_width] per route slot
  std::vector<std::size_t> fb_widths;

  // fb holds one (possibly undefined) tensor per route slot; undefined slots
  // contribute nothing, identically to a zero signal.
  Tensor apply(const Tensor& input, const std::vector<Tensor>& fb) const {
    if (input.cols() != in_width)
      throw ShapeError("block: input width " + std::to_string(input.cols()) +
                       " != expected " + std::to_string(in_width));
    for (std::size_t s = 0; s < fb.size(); ++s)
      if (fb[s].defined() && fb[s].cols() != fb_widths[s])
        throw ShapeError("block: feedback width " + std::to_string(fb[s].cols()) +
                         " != slot width " + std::to_string(fb_widths[s]));
    if (kind == BlockKind::kRecurrent) return apply_recurrent(input, fb);
    Tensor pre = matmul(input, w_in);
    for (std::size_t s = 0; s < fb.size(); ++s)
      if (fb[s].defined()) pre = add(pre, matmul(fb[s], w_fb[s]));
    pre = add(pre, bias);
    switch (kind) {
      case BlockKind::kAffineTanh: return tanh_op(pre);
      case BlockKind::kAffineRelu: return relu(pre);
      default: return pre;  // plain affine
    }
  }

 private:
  Tensor apply_recurrent(const Tensor& input, const std::vector<Tensor>& fb) const {
    const std::size_t rows = input.rows();
    Tensor h = Tensor::zeros({1, out_width});
    std::vector<Tensor> states;
    states.reserve(rows);
    for (std::size_t t = 0; t < rows; ++t) {
      Tensor pre = add(matmul(row(input, t), w_in), matmul(h, w_rec));
      for (std::size_t s = 0; s < fb.size(); ++s)
        if (fb[s].defined()) pre = add(pre, matmul(row(fb[s], t), w_fb[s]));
      h = tanh_op(add(pre, bias));
      states.push_back(h);
    }
    return rows == 1 ? states[0] : concat(states, 0);
  }
};

struct TaskBranch {
  std::string name;
  TaskKind kind = TaskKind::kIntent;
  bool sentence_level = false;  // pools the shared sequence before block 1
  bool head_softmax = true;
  std::size_t label_count = 0;
  std::vector<LayerBlock> blocks;  // last block is the label-space head

  std::size_t depth() const { return blocks.size(); }
};

// Projection aligning a source task's output space with the target branch's
// feedback width.
struct Amplifier {
  std::size_t source_task = 0;
  std::size_t target_task = 0;
  Tensor w;     // [source labels, feedback width]
  Tensor bias;  // [1, feedback width]
};

struct Route {
  std::string id;  // "<src>_to_<dst>"
  Amplifier amp;
  bool gated = false;
  std::size_t fixed_position = 1;  // 1-based block index, used when !gated
  GateState gate;
  std::size_t target_slot = 0;  // index into the target blocks' w_fb
};

// y^0 source for the prediction trace.
enum class InitMode { kZeros, kUniform, kRandom };

inline InitMode init_mode_from_string(const std::string& s) {
  if (s == "zeros") return InitMode::kZeros;
  if (s == "uniform") return InitMode::kUniform;
  if (s == "random") return InitMode::kRandom;
  throw ConfigError("run.init must be zeros|uniform|random, got '" + s + "'");
}

// The per-task output sequences y^0..y^K of one prediction.
struct PredictionTrace {
  std::vector<std::vector<Tensor>> outputs;  // [task][k]

  std::size_t iteration_count() const {
    return outputs.empty() ? 0 : outputs[0].size() - 1;
  }
  const Tensor& final_output(std::size_t task) const { return outputs.at(task).back(); }
};

// ---------------------------------------------------------------------------
// Model
// ---------------------------------------------------------------------------

struct ModelSpec {
  // Input side: either a token vocabulary with an embedding table, or raw
  // [rows, input_width] features when vocab_size == 0.
  std::size_t vocab_size = 0;
  std::size_t embed_dim = 16;
  std::size_t input_width = 0;

  std::size_t shared_depth = 1;  // may be 0: tasks share no layers
  BlockKind shared_kind = BlockKind::kRecurrent;
  std::size_t hidden = 64;
  std::size_t feedback_width = 16;

  struct TaskDef {
    std::string name;
    TaskKind kind = TaskKind::kIntent;
    std::size_t labels = 0;
    std::size_t depth = 2;
    BlockKind block_kind = BlockKind::kAffineTanh;
    bool head_softmax = true;
  };
  std::vector<TaskDef> tasks;

  struct RouteDef {
    std::string source;
    std::string target;
    bool gated = false;
    std::size_t position = 1;  // 1-based, used when !gated
  };
  std::vector<RouteDef> routes;

  GateMode gate_mode = GateMode::kLearnedLogits;
  double gate_temperature = 1.0;
  std::string gate_init = "zeros";  // zeros | normal
};

class FeedbackModel {
 public:
  ModelSpec spec;
  Tensor embedding;  // undefined when the model runs on raw features
  std::vector<LayerBlock> shared;
  std::vector<TaskBranch> tasks;
  std::vector<Route> routes;

  std::size_t task_index(const std::string& name) const {
    for (std::size_t i = 0; i < tasks.size(); ++i)
      if (tasks[i].name == name) return i;
    throw ConfigError("unknown task '" + name + "'");
  }

  // Named parameter list in a stable order (checkpoint and optimizer order).
  std::vector<std::pair<std::string, Tensor>> parameters() {
    std::vector<std::pair<std::string, Tensor>> out;
    auto block_params = [&out](const std::string& prefix, LayerBlock& b) {
      out.emplace_back(prefix + ".w_in", b.w_in);
      if (b.w_rec.defined()) out.emplace_back(prefix + ".w_rec", b.w_rec);
      out.emplace_back(prefix + ".bias", b.bias);
      for (std::size_t s = 0; s < b.w_fb.size(); ++s)
        out.emplace_back(prefix + ".fb" + std::to_string(s), b.w_fb[s]);
    };
    if (embedding.defined()) out.emplace_back("embedding", embedding);
    for (std::size_t i = 0; i < shared.size(); ++i)
      block_params("shared." + std::to_string(i), shared[i]);
    for (TaskBranch& t : tasks)
      for (std::size_t i = 0; i < t.blocks.size(); ++i)
        block_params("task." + t.name + ".block" + std::to_string(i), t.blocks[i]);
    for (Route& r : routes) {
      out.emplace_back("route." + r.id + ".amp.w", r.amp.w);
      out.emplace_back("route." + r.id + ".amp.bias", r.amp.bias);
      if (r.gated && r.gate.mode == GateMode::kLearnedLogits)
        out.emplace_back("route." + r.id + ".gate_logits", r.gate.position_logits);
    }
    return out;
  }

  // Embeds a token-id sequence into the model's input features.
  Tensor encode(const std::vector<std::size_t>& token_ids) const {
    if (!embedding.defined())
      throw std::logic_error("encode: model has no embedding table");
    return row_lookup(embedding, token_ids);
  }

  // Deep copy: fresh parameter tensors, fresh gate state.
  FeedbackModel clone() const {
    FeedbackModel m(*this);
    auto copy_tensor = [](Tensor& t, bool rg) {
      if (t.defined()) t = Tensor::leaf(t.shape(), t.values(), rg);
    };
    auto copy_block = [&](LayerBlock& b) {
      copy_tensor(b.w_in, true);
      copy_tensor(b.w_rec, true);
      copy_tensor(b.bias, true);
      for (Tensor& t : b.w_fb) copy_tensor(t, true);
    };
    copy_tensor(m.embedding, true);
    for (LayerBlock& b : m.shared) copy_block(b);
    for (TaskBranch& t : m.tasks)
      for (LayerBlock& b : t.blocks) copy_block(b);
    for (Route& r : m.routes) {
      copy_tensor(r.amp.w, true);
      copy_tensor(r.amp.bias, true);
      if (r.gate.position_logits.defined()) {
        Tensor z = Tensor::leaf(r.gate.position_logits.shape(),
                                r.gate.position_logits.values(), true);
        r.gate.attach_logits(z);
      }
    }
    return m;
  }

  // Structural twin without any feedback route (blocks keep no fb slots).
  FeedbackModel without_routes() const {
    FeedbackModel m = clone();
    m.routes.clear();
    m.spec.routes.clear();
    for (TaskBranch& t : m.tasks)
      for (LayerBlock& b : t.blocks) {
        b.w_fb.clear();
        b.fb_widths.clear();
      }
    return m;
  }

  // Zeroes every amplifier parameter and every feedback weight in place.
  void zero_feedback() {
    for (Route& r : routes) {
      std::fill(r.amp.w.values_mut().begin(), r.amp.w.values_mut().end(), 0.0);
      std::fill(r.amp.bias.values_mut().begin(), r.amp.bias.values_mut().end(), 0.0);
    }
    zero_feedback_slots();
  }

  // Zeroes only the extra-slot weights, leaving amplifiers untouched.
  void zero_feedback_slots() {
    for (TaskBranch& t : tasks)
      for (LayerBlock& b : t.blocks)
        for (Tensor& w : b.w_fb)
          std::fill(w.values_mut().begin(), w.values_mut().end(), 0.0);
  }

  void reset_gate_counts() {
    for (Route& r : routes) r.gate.reset_counts();
  }
};

// ---------------------------------------------------------------------------
// Construction
// ---------------------------------------------------------------------------

inline FeedbackModel build_model(const ModelSpec& spec, Rng& rng) {
  if (spec.tasks.empty()) throw ConfigError("model: at least one task required");
  FeedbackModel m;
  m.spec = spec;

  auto init_weight = [&rng](std::size_t in, std::size_t out) {
    const double s = 1.0 / std::sqrt(static_cast<double>(in > 0 ? in : 1));
    return Tensor::rand_uniform({in, out}, rng, -s, s, true);
  };
  auto make_block = [&](BlockKind kind, std::size_t in, std::size_t out,
                        std::size_t fb_slots, std::size_t fb_width) {
    LayerBlock b;
    b.kind = kind;
    b.in_width = in;
    b.out_width = out;
    b.w_in = init_weight(in, out);
    if (kind == BlockKind::kRecurrent) b.w_rec = init_weight(out, out);
    b.bias = Tensor::zeros({1, out}, true);
    for (std::size_t s = 0; s < fb_slots; ++s) {
      b.w_fb.push_back(init_weight(fb_width, out));
      b.fb_widths.push_back(fb_width);
    }
    return b;
  };

  std::size_t input_width = spec.input_width;
  if (spec.vocab_size > 0) {
    m.embedding = Tensor::rand_uniform({spec.vocab_size, spec.embed_dim}, rng, -0.5, 0.5, true);
    input_width = spec.embed_dim;
  }
  if (input_width == 0) throw ConfigError("model: input width is zero");

  std::size_t width = input_width;
  for (std::size_t i = 0; i < spec.shared_depth; ++i) {
    m.shared.push_back(make_block(spec.shared_kind, width, spec.hidden, 0, 0));
    width = spec.hidden;
  }
  const std::size_t shared_out_width = width;

  // Count incoming routes per task first: every block of a target branch is
  // an infusion candidate and needs one weight slot per incoming route.
  std::vector<std::vector<std::size_t>> incoming(spec.tasks.size());
  auto find_task = [&spec](const std::string& name) {
    for (std::size_t i = 0; i < spec.tasks.size(); ++i)
      if (spec.tasks[i].name == name) return i;
    throw ConfigError("route references unknown task '" + name + "'");
  };
  for (std::size_t r = 0; r < spec.routes.size(); ++r) {
    const auto& rd = spec.routes[r];
    if (rd.source == rd.target) throw ConfigError("route " + rd.source + " -> itself");
    incoming[find_task(rd.target)].push_back(r);
  }

  for (std::size_t ti = 0; ti < spec.tasks.size(); ++ti) {
    const auto& td = spec.tasks[ti];
    if (td.labels == 0) throw ConfigError("task " + td.name + ": labels must be positive");
    if (td.depth == 0) throw ConfigError("task " + td.name + ": depth must be positive");
    TaskBranch branch;
    branch.name = td.name;
    branch.kind = td.kind;
    branch.sentence_level = td.kind == TaskKind::kIntent;
    branch.head_softmax = td.head_softmax;
    branch.label_count = td.labels;
    const std::size_t slots = incoming[ti].size();
    std::size_t w = shared_out_width;
    for (std::size_t b = 0; b + 1 < td.depth; ++b) {
      branch.blocks.push_back(
          make_block(td.block_kind, w, spec.hidden, slots, spec.feedback_width));
      w = spec.hidden;
    }
    branch.blocks.push_back(make_block(BlockKind::kAffine, w, td.labels, slots,
                                       spec.feedback_width));
    m.tasks.push_back(std::move(branch));
  }

  for (std::size_t r = 0; r < spec.routes.size(); ++r) {
    const auto& rd = spec.routes[r];
    Route route;
    route.id = rd.source + "_to_" + rd.target;
    route.amp.source_task = find_task(rd.source);
    route.amp.target_task = find_task(rd.target);
    route.amp.w = init_weight(spec.tasks[route.amp.source_task].labels, spec.feedback_width);
    route.amp.bias = Tensor::zeros({1, spec.feedback_width}, true);
    route.gated = rd.gated;
    const std::size_t target_depth = m.tasks[route.amp.target_task].depth();
    if (!rd.gated) {
      if (rd.position < 1 || rd.position > target_depth)
        throw ConfigError("route " + route.id + ": position " + std::to_string(rd.position) +
                          " outside [1," + std::to_string(target_depth) + "]");
      route.fixed_position = rd.position;
    }
    route.gate = GateState(route.id, target_depth, spec.gate_mode, spec.gate_temperature);
    if (rd.gated && spec.gate_mode == GateMode::kLearnedLogits) {
      Tensor z = spec.gate_init == "normal"
                     ? Tensor::randn({target_depth}, rng, 0.1, true)
                     : Tensor::zeros({target_depth}, true);
      route.gate.attach_logits(z);
    }
    // slot index: position of r within the target's incoming list
    const auto& inc = incoming[route.amp.target_task];
    route.target_slot =
        static_cast<std::size_t>(std::find(inc.begin(), inc.end(), r) - inc.begin());
    m.routes.push_back(std::move(route));
  }
  return m;
}

// All ordered task pairs; T tasks yield T*(T-1) routes.
inline std::vector<ModelSpec::RouteDef> fully_connected_routes(
    const std::vector<ModelSpec::TaskDef>& tasks, bool gated, std::size_t position = 1) {
  std::vector<ModelSpec::RouteDef> out;
  for (const auto& a : tasks)
    for (const auto& b : tasks)
      if (a.name != b.name) out.push_back({a.name, b.name, gated, position});
  return out;
}

// ---------------------------------------------------------------------------
// Forward passes
// ---------------------------------------------------------------------------

// Composition of the shared stack; the empty stack is the identity.
inline Tensor forward_shared(const FeedbackModel& model, const Tensor& x) {
  Tensor h = x;
  static const std::vector<Tensor> kNoFeedback;
  for (const LayerBlock& b : model.shared) h = b.apply(h, kNoFeedback);
  return h;
}

// Amplified feedback signal of one route, before granularity adaptation.
inline Tensor amplify(const Route& route, const Tensor& y_source) {
  if (y_source.cols() != route.amp.w.shape()[0])
    throw ShapeError("amplify: source width " + std::to_string(y_source.cols()) +
                     " != amplifier input " + std::to_string(route.amp.w.shape()[0]));
  return add(matmul(y_source, route.amp.w), route.amp.bias);
}

// Aligns a signal's row count with the target branch input.
inline Tensor adapt_signal(const Tensor& amplified, bool target_sentence_level,
                           std::size_t sequence_rows) {
  const bool source_single_row = amplified.rows() == 1;
  if (target_sentence_level)
    return source_single_row ? amplified : mean_axis(amplified, 0);
  if (source_single_row && sequence_rows > 1) return repeat_rows(amplified, sequence_rows);
  return amplified;
}

// position (1-based) -> list of (route slot, signal tensor)
using InfusionMap = std::map<std::size_t, std::vector<std::pair<std::size_t, Tensor>>>;

// Applies branch blocks in order; at an infusion position the block consumes
// the feedback signal through its per-route weight slot, which is the affine
// map of the (signal, previous output) concatenation. The head emits
// label-space logits followed by softmax.
inline Tensor forward_branch(const TaskBranch& branch, const Tensor& shared_out,
                             const InfusionMap& infusions) {
  for (const auto& [pos, signals] : infusions) {
    if (pos < 1 || pos > branch.depth())
      throw std::out_of_range("forward_branch: infusion position " + std::to_string(pos) +
                              " outside [1," + std::to_string(branch.depth()) + "]");
    (void)signals;
  }
  Tensor h = branch.sentence_level && shared_out.rows() > 1 ? mean_axis(shared_out, 0)
                                                            : shared_out;
  std::vector<Tensor> fb;
  for (std::size_t i = 0; i < branch.blocks.size(); ++i) {
    const LayerBlock& block = branch.blocks[i];
    fb.assign(block.w_fb.size(), Tensor());
    if (auto it = infusions.find(i + 1); it != infusions.end()) {
      for (const auto& [slot, signal] : it->second) {
        if (slot >= fb.size())
          throw std::out_of_range("forward_branch: route slot out of range");
        fb[slot] = signal;
      }
    }
    h = block.apply(h, fb);
  }
  if (branch.head_softmax) h = softmax(h, 1);
  return h;
}

struct IterateOptions {
  std::size_t steps = 4;  // K
  InitMode init = InitMode::kUniform;
  bool training = false;      // Gumbel draws + straight-through gating
  bool feedback_off = false;  // ignore all routes (static configuration)
  Rng* rng = nullptr;         // required for training gated models / random init
};

namespace detail {

inline Tensor initial_output(const TaskBranch& task, std::size_t rows, InitMode init,
                             Rng* rng) {
  const Shape shape{rows, task.label_count};
  switch (init) {
    case InitMode::kZeros: return Tensor::zeros(shape);
    case InitMode::kUniform:
      return Tensor::full(shape, 1.0 / static_cast<double>(task.label_count));
    case InitMode::kRandom: {
      if (!rng) throw std::invalid_argument("iterate: random init requires an rng");
      NoGradScope pause;
      return detach(softmax(Tensor::randn(shape, *rng, 1.0), 1));
    }
  }
  throw std::logic_error("unreachable");
}

}  // namespace detail

// The K-step dynamic forward pass. The shared stack runs once; every
// iteration k computes each task's y^k from the shared features and from
// every route's amplified y^{k-1} (synchronous update: all signals are read
// before any task output is advanced). The trace per task holds K+1 entries
// and the final prediction is the last one.
inline PredictionTrace iterate(FeedbackModel& model, const Tensor& x,
                               const IterateOptions& opt) {
  if (opt.steps < 1) throw std::invalid_argument("iterate: K must be >= 1");
  for (const Route& r : model.routes)
    if (r.gated && r.gate.candidates == 0)
      throw std::logic_error("iterate: gated route without an attached gate");

  Tensor y_c = forward_shared(model, x);
  const std::size_t seq_rows = y_c.rows();

  PredictionTrace trace;
  trace.outputs.resize(model.tasks.size());
  for (std::size_t ti = 0; ti < model.tasks.size(); ++ti) {
    const TaskBranch& task = model.tasks[ti];
    const std::size_t rows = task.sentence_level ? 1 : seq_rows;
    trace.outputs[ti].push_back(detail::initial_output(task, rows, opt.init, opt.rng));
  }

  std::vector<InfusionMap> maps(model.tasks.size());
  for (std::size_t k = 1; k <= opt.steps; ++k) {
    for (InfusionMap& m : maps) m.clear();
    if (!opt.feedback_off) {
      for (Route& route : model.routes) {
        const Tensor& y_prev = trace.outputs[route.amp.source_task].back();
        Tensor amplified = amplify(route, y_prev);
        const TaskBranch& target = model.tasks[route.amp.target_task];
        Tensor adapted = adapt_signal(amplified, target.sentence_level, seq_rows);
        InfusionMap& target_map = maps[route.amp.target_task];
        if (!route.gated) {
          target_map[route.fixed_position].emplace_back(route.target_slot, adapted);
        } else if (opt.training) {
          Tensor gamma = gate_straight_through(route.gate, amplified, opt.rng);
          for (std::size_t t = 0; t < target.depth(); ++t)
            target_map[t + 1].emplace_back(route.target_slot,
                                           infuse_gated(gamma, adapted, t));
        } else {
          const std::size_t sel = gate_select(route.gate, amplified, nullptr);
          target_map[sel + 1].emplace_back(route.target_slot, adapted);
        }
      }
    }
    for (std::size_t ti = 0; ti < model.tasks.size(); ++ti)
      trace.outputs[ti].push_back(forward_branch(model.tasks[ti], y_c, maps[ti]));
  }
  return trace;
}

// Single pass with no feedback at all: what the branches produce from the
// shared features alone.
inline std::vector<Tensor> static_forward(const FeedbackModel& model, const Tensor& x) {
  Tensor y_c = forward_shared(model, x);
  std::vector<Tensor> out;
  out.reserve(model.tasks.size());
  static const InfusionMap kNoInfusions;
  for (const TaskBranch& task : model.tasks)
    out.push_back(forward_branch(task, y_c, kNoInfusions));
  return out;
}

}  // namespace fbmtl
