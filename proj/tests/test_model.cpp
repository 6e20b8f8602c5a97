#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <vector>

#include "fbmtl/model.hpp"

using namespace fbmtl;

namespace {

// Two tasks over a small vocabulary: a sentence-level and a token-level one.
ModelSpec small_spec(bool gated) {
  ModelSpec spec;
  spec.vocab_size = 12;
  spec.embed_dim = 5;
  spec.shared_depth = 1;
  spec.shared_kind = BlockKind::kRecurrent;
  spec.hidden = 7;
  spec.feedback_width = 4;
  spec.tasks = {{"intent", TaskKind::kIntent, 3, 2, BlockKind::kAffineTanh, true},
                {"slots", TaskKind::kSlots, 4, 2, BlockKind::kAffineTanh, true}};
  spec.routes = {{"slots", "intent", gated, 1}, {"intent", "slots", gated, 2}};
  return spec;
}

// The scalar linear two-task loop: y1 = a*yc + b*y2_prev, y2 = c*yc + d*y1_prev.
FeedbackModel linear_two_task(double a, double b, double c, double d) {
  ModelSpec spec;
  spec.input_width = 1;
  spec.shared_depth = 0;
  spec.feedback_width = 1;
  spec.tasks = {{"t1", TaskKind::kLinear, 1, 1, BlockKind::kAffine, false},
                {"t2", TaskKind::kLinear, 1, 1, BlockKind::kAffine, false}};
  spec.routes = {{"t2", "t1", false, 1}, {"t1", "t2", false, 1}};
  Rng rng(1);
  FeedbackModel m = build_model(spec, rng);
  auto set = [](Tensor& t, std::vector<double> v) { t.values_mut() = std::move(v); };
  set(m.tasks[0].blocks[0].w_in, {a});
  set(m.tasks[0].blocks[0].w_fb[0], {b});
  set(m.tasks[1].blocks[0].w_in, {c});
  set(m.tasks[1].blocks[0].w_fb[0], {d});
  for (Route& r : m.routes) {
    set(r.amp.w, {1.0});
    set(r.amp.bias, {0.0});
  }
  return m;
}

std::vector<std::size_t> toks(std::initializer_list<std::size_t> ids) { return ids; }

}  // namespace

TEST_CASE("forward_shared composition", "[model]") {
  SECTION("empty stack is the identity") {
    ModelSpec spec;
    spec.input_width = 3;
    spec.shared_depth = 0;
    spec.tasks = {{"t", TaskKind::kLinear, 2, 1, BlockKind::kAffine, false}};
    Rng rng(3);
    FeedbackModel m = build_model(spec, rng);
    Tensor x = Tensor::leaf({2, 3}, {1, 2, 3, 4, 5, 6});
    Tensor y = forward_shared(m, x);
    REQUIRE(y.values() == x.values());
  }
  SECTION("identity-weight tanh block applies tanh") {
    ModelSpec spec;
    spec.input_width = 2;
    spec.shared_depth = 1;
    spec.shared_kind = BlockKind::kAffineTanh;
    spec.hidden = 2;
    spec.tasks = {{"t", TaskKind::kLinear, 2, 1, BlockKind::kAffine, false}};
    Rng rng(5);
    FeedbackModel m = build_model(spec, rng);
    m.shared[0].w_in.values_mut() = {1, 0, 0, 1};
    m.shared[0].bias.values_mut() = {0, 0};
    Tensor x = Tensor::leaf({1, 2}, {0.3, -0.8});
    Tensor y = forward_shared(m, x);
    REQUIRE(y.values()[0] == Catch::Approx(std::tanh(0.3)).margin(1e-15));
    REQUIRE(y.values()[1] == Catch::Approx(std::tanh(-0.8)).margin(1e-15));
  }
  SECTION("two-block stack equals explicit nested application") {
    ModelSpec spec;
    spec.input_width = 3;
    spec.shared_depth = 2;
    spec.shared_kind = BlockKind::kAffineTanh;
    spec.hidden = 4;
    spec.tasks = {{"t", TaskKind::kLinear, 2, 1, BlockKind::kAffine, false}};
    Rng rng(7);
    FeedbackModel m = build_model(spec, rng);
    Tensor x = Tensor::rand_uniform({2, 3}, rng, -1, 1);
    Tensor composed = forward_shared(m, x);
    static const std::vector<Tensor> none;
    Tensor nested = m.shared[1].apply(m.shared[0].apply(x, none), none);
    for (std::size_t i = 0; i < composed.numel(); ++i)
      REQUIRE(std::abs(composed.values()[i] - nested.values()[i]) < 1e-12);
  }
  SECTION("width mismatch is an error") {
    ModelSpec spec = small_spec(false);
    Rng rng(9);
    FeedbackModel m = build_model(spec, rng);
    REQUIRE_THROWS_AS(forward_shared(m, Tensor::zeros({2, 9})), ShapeError);
  }
}

TEST_CASE("amplify", "[model]") {
  Rng rng(11);
  ModelSpec spec = small_spec(false);
  FeedbackModel m = build_model(spec, rng);
  Route& route = m.routes[0];  // slots -> intent, source labels 4
  SECTION("zero projection gives the zero vector") {
    std::fill(route.amp.w.values_mut().begin(), route.amp.w.values_mut().end(), 0.0);
    std::fill(route.amp.bias.values_mut().begin(), route.amp.bias.values_mut().end(), 0.0);
    Tensor y = Tensor::rand_uniform({3, 4}, rng, -1, 1);
    for (double v : amplify(route, y).values()) REQUIRE(v == 0.0);
  }
  SECTION("identity square projection passes the signal through") {
    ModelSpec sq = small_spec(false);
    sq.feedback_width = 4;  // same as slots label count
    FeedbackModel msq = build_model(sq, rng);
    Route& r = msq.routes[0];
    auto& w = r.amp.w.values_mut();
    std::fill(w.begin(), w.end(), 0.0);
    for (std::size_t i = 0; i < 4; ++i) w[i * 4 + i] = 1.0;
    std::fill(r.amp.bias.values_mut().begin(), r.amp.bias.values_mut().end(), 0.0);
    Tensor y = Tensor::rand_uniform({2, 4}, rng, -1, 1);
    REQUIRE(amplify(r, y).values() == y.values());
  }
  SECTION("random weights match a matmul oracle") {
    Tensor y = Tensor::rand_uniform({2, 4}, rng, -1, 1);
    Tensor expected = add(matmul(y, route.amp.w), route.amp.bias);
    Tensor got = amplify(route, y);
    for (std::size_t i = 0; i < got.numel(); ++i)
      REQUIRE(std::abs(got.values()[i] - expected.values()[i]) < 1e-12);
  }
  SECTION("shape mismatch") {
    REQUIRE_THROWS_AS(amplify(route, Tensor::zeros({1, 7})), ShapeError);
  }
}

TEST_CASE("forward_branch", "[model]") {
  Rng rng(13);
  SECTION("no infusion equals zero-signal infusion at any position") {
    ModelSpec spec = small_spec(false);
    FeedbackModel m = build_model(spec, rng);
    Tensor x = m.encode(toks({1, 4, 7}));
    Tensor y_c = forward_shared(m, x);
    Tensor plain = forward_branch(m.tasks[1], y_c, {});
    for (std::size_t pos = 1; pos <= 2; ++pos) {
      InfusionMap map;
      map[pos].emplace_back(0, Tensor::zeros({3, 4}));
      Tensor with_zero = forward_branch(m.tasks[1], y_c, map);
      for (std::size_t i = 0; i < plain.numel(); ++i)
        REQUIRE(std::abs(plain.values()[i] - with_zero.values()[i]) < 1e-12);
    }
  }
  SECTION("1-D linear hand case: 0.5*yc + 0.25*signal") {
    FeedbackModel m = linear_two_task(0.5, 0.25, 0.0, 0.0);
    Tensor y_c = Tensor::leaf({1, 1}, {1.0});
    InfusionMap map;
    map[1].emplace_back(0, Tensor::leaf({1, 1}, {2.0}));
    Tensor out = forward_branch(m.tasks[0], y_c, map);
    REQUIRE(out.values()[0] == Catch::Approx(1.0).margin(1e-15));
  }
  SECTION("interior vs boundary infusion differ for generic weights") {
    ModelSpec spec = small_spec(false);
    FeedbackModel m = build_model(spec, rng);
    Tensor x = m.encode(toks({2, 5}));
    Tensor y_c = forward_shared(m, x);
    Tensor signal = Tensor::rand_uniform({2, 4}, rng, 0.5, 1.5);
    InfusionMap at_first, at_last;
    at_first[1].emplace_back(0, signal);
    at_last[2].emplace_back(0, signal);
    Tensor y1 = forward_branch(m.tasks[1], y_c, at_first);
    Tensor y2 = forward_branch(m.tasks[1], y_c, at_last);
    double max_diff = 0.0;
    for (std::size_t i = 0; i < y1.numel(); ++i)
      max_diff = std::max(max_diff, std::abs(y1.values()[i] - y2.values()[i]));
    REQUIRE(max_diff > 1e-6);
  }
  SECTION("position out of range") {
    ModelSpec spec = small_spec(false);
    FeedbackModel m = build_model(spec, rng);
    Tensor y_c = forward_shared(m, m.encode(toks({1})));
    InfusionMap map;
    map[3].emplace_back(0, Tensor::zeros({1, 4}));
    REQUIRE_THROWS_AS(forward_branch(m.tasks[1], y_c, map), std::out_of_range);
  }
}

TEST_CASE("iterate", "[model]") {
  SECTION("zero amplifiers collapse the trace to a constant from k >= 1") {
    Rng rng(17);
    FeedbackModel m = build_model(small_spec(false), rng);
    m.zero_feedback();
    Tensor x = m.encode(toks({3, 9, 1, 6}));
    IterateOptions opt;
    opt.steps = 5;
    opt.init = InitMode::kUniform;
    PredictionTrace trace = iterate(m, x, opt);
    for (const auto& task_trace : trace.outputs) {
      REQUIRE(task_trace.size() == 6);
      for (std::size_t k = 2; k < task_trace.size(); ++k)
        for (std::size_t i = 0; i < task_trace[k].numel(); ++i)
          REQUIRE(task_trace[k].values()[i] ==
                  Catch::Approx(task_trace[1].values()[i]).margin(1e-15));
    }
  }
  SECTION("trace length is K+1 for every task") {
    Rng rng(19);
    FeedbackModel m = build_model(small_spec(false), rng);
    Tensor x = m.encode(toks({2, 8}));
    for (std::size_t k : {1, 2, 4, 7}) {
      IterateOptions opt;
      opt.steps = k;
      PredictionTrace trace = iterate(m, x, opt);
      REQUIRE(trace.iteration_count() == k);
      for (const auto& t : trace.outputs) REQUIRE(t.size() == k + 1);
    }
  }
  SECTION("K=4 gives 5 trace entries per task") {
    Rng rng(23);
    FeedbackModel m = build_model(small_spec(false), rng);
    IterateOptions opt;
    opt.steps = 4;
    PredictionTrace trace = iterate(m, m.encode(toks({1, 2, 3})), opt);
    for (const auto& t : trace.outputs) REQUIRE(t.size() == 5);
  }
  SECTION("scalar linear system converges to the closed-form fixed point") {
    // y1* = (a + b*c) * yc / (1 - b*d) = 2.0 for a=c=1, b=d=0.5, yc=1
    FeedbackModel m = linear_two_task(1.0, 0.5, 1.0, 0.5);
    IterateOptions opt;
    opt.steps = 60;
    opt.init = InitMode::kZeros;
    PredictionTrace trace = iterate(m, Tensor::leaf({1, 1}, {1.0}), opt);
    REQUIRE(std::abs(trace.final_output(0).values()[0] - 2.0) < 1e-6);
    REQUIRE(std::abs(trace.final_output(1).values()[0] - 2.0) < 1e-6);
    // Residuals contract by |b*d| = 0.25 per feedback round trip: with the
    // synchronous update a signal needs two steps to travel out and back.
    const auto& y1 = trace.outputs[0];
    for (std::size_t k = 3; k + 2 < 12; ++k) {
      const double r_prev = std::abs(y1[k].values()[0] - y1[k - 1].values()[0]);
      const double r_next = std::abs(y1[k + 2].values()[0] - y1[k + 1].values()[0]);
      if (r_prev > 1e-12) REQUIRE(r_next / r_prev == Catch::Approx(0.25).epsilon(0.10));
    }
  }
  SECTION("rejects K = 0") {
    Rng rng(29);
    FeedbackModel m = build_model(small_spec(false), rng);
    IterateOptions opt;
    opt.steps = 0;
    REQUIRE_THROWS_AS(iterate(m, m.encode(toks({1})), opt), std::invalid_argument);
  }
}

TEST_CASE("static_forward equivalences", "[model]") {
  SECTION("matches iterate(K=1, zeros) once extra-slot weights are zeroed") {
    for (std::uint64_t seed = 1; seed <= 20; ++seed) {
      Rng rng(seed * 7);
      FeedbackModel m = build_model(small_spec(seed % 2 == 0), rng);
      m.zero_feedback_slots();  // amplifiers stay random; their output is inert
      Tensor x = m.encode(toks({seed % 12, (seed * 5) % 12, (seed * 3) % 12}));
      auto statics = static_forward(m, x);
      IterateOptions opt;
      opt.steps = 1;
      opt.init = InitMode::kZeros;
      PredictionTrace trace = iterate(m, x, opt);
      for (std::size_t ti = 0; ti < statics.size(); ++ti)
        for (std::size_t i = 0; i < statics[ti].numel(); ++i)
          REQUIRE(std::abs(statics[ti].values()[i] -
                           trace.final_output(ti).values()[i]) < 1e-12);
    }
  }
  SECTION("route-free twin and zeroed-amplifier model produce identical outputs") {
    Rng rng(31);
    FeedbackModel with_routes = build_model(small_spec(false), rng);
    FeedbackModel bare = with_routes.without_routes();
    with_routes.zero_feedback();
    auto ids = toks({4, 2, 11, 7});
    auto a = static_forward(with_routes, with_routes.encode(ids));
    auto b = static_forward(bare, bare.encode(ids));
    for (std::size_t ti = 0; ti < a.size(); ++ti) REQUIRE(a[ti].values() == b[ti].values());
  }
  SECTION("bitwise deterministic under a fixed seed") {
    auto run = [] {
      Rng rng(404);
      FeedbackModel m = build_model(small_spec(true), rng);
      auto outs = static_forward(m, m.encode(toks({1, 5, 9})));
      std::vector<double> flat;
      for (const auto& o : outs) flat.insert(flat.end(), o.values().begin(), o.values().end());
      return flat;
    };
    REQUIRE(run() == run());
  }
}

TEST_CASE("zero-feedback equivalence across K", "[model]") {
  Rng rng(37);
  FeedbackModel m = build_model(small_spec(false), rng);
  m.zero_feedback();
  Tensor x = m.encode(toks({1, 2, 3, 4}));
  auto statics = static_forward(m, x);
  IterateOptions opt;
  opt.steps = 4;
  opt.init = InitMode::kUniform;
  PredictionTrace trace = iterate(m, x, opt);
  for (std::size_t ti = 0; ti < statics.size(); ++ti)
    for (std::size_t k = 1; k <= 4; ++k)
      for (std::size_t i = 0; i < statics[ti].numel(); ++i)
        REQUIRE(std::abs(trace.outputs[ti][k].values()[i] - statics[ti].values()[i]) < 1e-12);
}

TEST_CASE("gradients flow through feedback only when K >= 2", "[model]") {
  Rng rng(41);
  FeedbackModel m = build_model(small_spec(false), rng);
  Tensor x = m.encode(toks({3, 6, 9}));
  auto grad_norm_for_k = [&](std::size_t k) {
    for (auto& [name, p] : m.parameters()) p.zero_grad();
    IterateOptions opt;
    opt.steps = k;
    opt.init = InitMode::kUniform;
    PredictionTrace trace = iterate(m, x, opt);
    // loss on the slots task only; probe the intent branch parameters
    backward(nll_mean(trace.final_output(1), {0, 1, 2}));
    double norm = 0.0;
    for (auto& [name, p] : m.parameters())
      if (name.rfind("task.intent.", 0) == 0 && p.has_grad())
        for (double g : p.grad()) norm += g * g;
    return std::sqrt(norm);
  };
  REQUIRE(grad_norm_for_k(1) == 0.0);
  REQUIRE(grad_norm_for_k(2) > 1e-8);
}

TEST_CASE("fully connected route construction scales as T(T-1)", "[model]") {
  for (std::size_t t : {2, 3, 5}) {
    std::vector<ModelSpec::TaskDef> tasks;
    for (std::size_t i = 0; i < t; ++i)
      tasks.push_back({"task" + std::to_string(i), TaskKind::kSlots, 3, 2,
                       BlockKind::kAffineTanh, true});
    auto routes = fully_connected_routes(tasks, false, 1);
    REQUIRE(routes.size() == t * (t - 1));
    ModelSpec spec;
    spec.vocab_size = 6;
    spec.embed_dim = 3;
    spec.hidden = 4;
    spec.feedback_width = 2;
    spec.tasks = tasks;
    spec.routes = routes;
    Rng rng(43 + t);
    FeedbackModel m = build_model(spec, rng);
    REQUIRE(m.routes.size() == t * (t - 1));
    // every branch block carries one feedback slot per incoming route
    for (const TaskBranch& branch : m.tasks)
      for (const LayerBlock& b : branch.blocks) REQUIRE(b.w_fb.size() == t - 1);
  }
}

TEST_CASE("gated iterate keeps trace shape and eval selection is deterministic",
          "[model]") {
  Rng rng(47);
  FeedbackModel m = build_model(small_spec(true), rng);
  Tensor x = m.encode(toks({2, 4, 6}));
  Rng draws(1001);
  IterateOptions train_opt;
  train_opt.steps = 3;
  train_opt.training = true;
  train_opt.rng = &draws;
  PredictionTrace t1 = iterate(m, x, train_opt);
  REQUIRE(t1.iteration_count() == 3);

  IterateOptions eval_opt;
  eval_opt.steps = 3;
  PredictionTrace e1 = iterate(m, x, eval_opt);
  PredictionTrace e2 = iterate(m, x, eval_opt);
  for (std::size_t ti = 0; ti < e1.outputs.size(); ++ti)
    REQUIRE(e1.final_output(ti).values() == e2.final_output(ti).values());
}

TEST_CASE("geometric residual decay on contracting linear systems", "[model]") {
  // per-round-trip residual ratio approaches |b*d| when the loop map contracts
  for (auto [b, d] : std::vector<std::pair<double, double>>{{0.4, 0.6}, {0.3, 0.3}}) {
    FeedbackModel m = linear_two_task(1.0, b, 1.0, d);
    IterateOptions opt;
    opt.steps = 30;
    opt.init = InitMode::kZeros;
    PredictionTrace trace = iterate(m, Tensor::leaf({1, 1}, {1.0}), opt);
    const double contraction = std::abs(b * d);
    const auto& y = trace.outputs[0];
    for (std::size_t k = 4; k < 12; ++k) {
      const double r_prev = std::abs(y[k].values()[0] - y[k - 1].values()[0]);
      const double r_next = std::abs(y[k + 2].values()[0] - y[k + 1].values()[0]);
      if (r_prev > 1e-10)
        REQUIRE(r_next / r_prev == Catch::Approx(contraction).epsilon(0.10));
    }
  }
}
