#include <benchmark/benchmark.h>

#include "gcalab/backbone.hpp"
#include "gcalab/data.hpp"
#include "gcalab/gca.hpp"
#include "gcalab/ops.hpp"

using namespace gcalab;

namespace {

Tensor random_tensor(Shape shape, Rng& rng, bool grad = false) {
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = rng.normal();
  return Tensor::from(std::move(shape), std::move(v), grad);
}

void BM_Matmul(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  Rng rng(1);
  Tensor a = random_tensor({64, n, n}, rng);
  Tensor b = random_tensor({n, n}, rng);
  NoGradGuard ng;
  for (auto _ : state) benchmark::DoNotOptimize(matmul(a, b));
  state.SetItemsProcessed(state.iterations() * 64 * n * n * n);
}
BENCHMARK(BM_Matmul)->Arg(16)->Arg(32)->Arg(64);

void BM_SelfAttention(benchmark::State& state) {
  const auto l = static_cast<std::size_t>(state.range(0));
  Rng rng(2);
  ParameterStore store;
  auto w = AttentionWeights::create(store, "attn", 32, rng);
  Tensor x = random_tensor({64, l, 32}, rng);
  const Mask m = Mask::ones({64, l});
  NoGradGuard ng;
  for (auto _ : state) benchmark::DoNotOptimize(multi_head_attention(w, 4, x, x, x, m, {true}));
}
BENCHMARK(BM_SelfAttention)->Arg(15)->Arg(30);

void BM_GcaForwardBackward(benchmark::State& state) {
  Rng rng(3);
  ParameterStore store;
  GcaConfig cfg;
  cfg.zero_init_gate = false;
  GcaBlock block(store, "gca", 32, cfg, rng);
  Tensor xa = random_tensor({64, 15, 32}, rng, true);
  Tensor xb = random_tensor({64, 12, 32}, rng, true);
  const auto qa = SequenceBatch::from_hidden(xa, Domain::kA);
  const auto kb = SequenceBatch::from_hidden(xb, Domain::kB);
  for (auto _ : state) {
    Tensor loss = sum(gca_forward(block, qa, kb));
    loss.backward();
    for (auto& p : store.all()) p.tensor.zero_grad();
  }
}
BENCHMARK(BM_GcaForwardBackward);

void BM_TrainingStep(benchmark::State& state) {
  ModelConfig cfg;
  cfg.max_len = 15;
  if (state.range(0)) cfg.gca.placements = {0};
  SynthSpec synth;
  synth.users = 64;
  const SplitDataset ds = split_leave_one_out(generate_synthetic(synth));
  Model model = Model::build(cfg, 0);
  Rng rng(4);
  const auto examples = build_training_examples(ds, rng);
  std::vector<std::size_t> idx(ds.size());
  std::vector<const UserInput*> inputs;
  for (std::size_t i = 0; i < idx.size(); ++i) {
    idx[i] = i;
    inputs.push_back(&examples[i].input);
  }
  const ModelBatch batch = make_model_batch(inputs, ds.vocab_a, cfg.max_len, cfg.combined_thread);
  const auto ta = make_training_targets(ds, idx, examples, Domain::kA, 4, rng);
  const auto tb = make_training_targets(ds, idx, examples, Domain::kB, 4, rng);
  Rng drop(5);
  const ForwardContext ctx{true, cfg.dropout_p, &drop};
  for (auto _ : state) {
    Tensor loss = model.training_loss(batch, ta, tb, ctx);
    loss.backward();
    for (auto& p : model.params().all()) p.tensor.zero_grad();
  }
}
BENCHMARK(BM_TrainingStep)->Arg(0)->Arg(1)->Unit(benchmark::kMillisecond);

}  // namespace

BENCHMARK_MAIN();
