#include <chrono>
#include <cstdio>
#include <cstdlib>
#include "pluginlm/experiment.hpp"
using namespace pluginlm;

static double now() {
  return std::chrono::duration<double>(
             std::chrono::steady_clock::now().time_since_epoch()).count();
}

int main(int argc, char** argv) {
  uint64_t seed = argc > 1 ? strtoull(argv[1], nullptr, 10) : 1;
  int epochs = argc > 2 ? atoi(argv[2]) : 25;
  double lr = argc > 3 ? atof(argv[3]) : 3e-3;
  int embed = argc > 4 ? atoi(argv[4]) : 32;

  BenchmarkSpec spec;
  spec.world.content_tokens = 47;
  spec.world.favored = 4;
  spec.world.favored_mass = 0.85;
  spec.world.eos_prob = argc > 6 ? atof(argv[6]) : 0.02;
  spec.world.terminal_fraction = argc > 7 ? atof(argv[7]) : 0.15;
  spec.world.terminal_eos = argc > 8 ? atof(argv[8]) : 0.5;
  spec.world.min_len = 2;
  spec.world.max_len = 18;
  spec.world.prompt_tokens = 2;
  spec.world.seed = 20240601;
  spec.adaptation_sequences = 2000;
  spec.test_sequences = 200;
  spec.base_corpus_sequences = argc > 5 ? (size_t)atoi(argv[5]) : 4000;
  spec.corruption = 0.3;
  spec.method.model.num_blocks = 1;
  spec.method.model.embed_dim = embed;
  spec.method.model.num_heads = 2;
  spec.method.model.ff_dim = 2 * embed;
  spec.method.model.context_window = 24;
  spec.method.train.learning_rate = lr;
  spec.method.train.weight_decay = 0.01;
  spec.method.train.batch_size = 16;
  spec.method.train.max_epochs = epochs;
  spec.method.train.patience = 5;
  spec.decode.max_len = 20;

  double t0 = now();
  SyntheticData data = make_noisy_benchmark(spec, seed);
  spec.method.model.vocab_size = data.world->vocab_size();
  printf("data: %.1fs  train=%zu hyperval=%zu test=%zu probes=%zu\n", now() - t0,
         data.train.size(), data.hyperval.size(), data.test.size(), data.probes.size());

  double kl_base = mean_context_kl(*data.world, *data.base, data.probes);
  printf("kl_base=%.4f\n", kl_base);

  for (Method m : {Method::plugin, Method::weightedcomb, Method::tempscale, Method::zeroshot}) {
    double t1 = now();
    MethodOutcome o = evaluate_method(m, data, spec.method, spec.decode, seed);
    double len = 0, rlen = 0;
    for (auto& g : o.generations) len += g.size();
    for (auto& r : data.test) rlen += strip_reserved(r.target).size();
    printf("%-12s %.1fs  nll=%.4f  kl=%.4f  bleu=%.4f  rougeL=%.4f  len=%.1f reflen=%.1f best_ep=%d\n",
           method_name(m), now() - t1, o.test_nll, o.context_kl, o.bleu_mean, o.rouge_l_mean,
           len / o.generations.size(), rlen / data.test.size(), o.history.best_epoch);
    for (int i = 0; i < 3; ++i) {
      printf("  gen[%d]:", i);
      for (int t : o.generations[i]) printf(" %d", t);
      printf("\n  ref[%d]:", i);
      for (int t : strip_reserved(data.test[i].target)) printf(" %d", t);
      printf("\n");
    }
  }
  return 0;
}
// debug helper built as a second binary
