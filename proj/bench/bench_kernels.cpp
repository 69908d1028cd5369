#include <benchmark/benchmark.h>

#include "qkdnet/kernels.hpp"

using namespace qkdnet;

namespace {

Bytes random_bytes(std::size_t n, std::uint64_t seed) {
  DeterministicRng rng(seed);
  Bytes b(n);
  rng.fill(b);
  return b;
}

std::vector<KeyMaterial> random_keys(std::size_t n, std::uint64_t seed) {
  DeterministicRng rng(seed);
  std::vector<KeyMaterial> out;
  for (std::size_t i = 0; i < n; ++i) out.push_back(KeyMaterial::random(rng, 32));
  return out;
}

template <auto Fn>
void BM_XorPairs(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0)) * 32;
  auto a = random_bytes(n, 1), b = random_bytes(n, 2), pad = random_bytes(32, 3);
  Bytes out(n);
  for (auto _ : state) {
    Fn(a, b, pad, out);
    benchmark::DoNotOptimize(out.data());
  }
  state.SetBytesProcessed(static_cast<std::int64_t>(state.iterations() * n));
}

template <auto Fn>
void BM_CombineBlock(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  auto r1 = random_keys(n, 4), r2 = random_keys(n, 5);
  const crypto::HmacKdf kdf;
  const crypto::Psk psk(random_bytes(16, 6));
  for (auto _ : state) benchmark::DoNotOptimize(Fn(kdf, r1, r2, psk));
  state.SetItemsProcessed(static_cast<std::int64_t>(state.iterations() * n));
}

template <auto Fn>
void BM_Histogram(benchmark::State& state) {
  auto data = random_bytes(static_cast<std::size_t>(state.range(0)), 7);
  for (auto _ : state) benchmark::DoNotOptimize(Fn(data));
  state.SetBytesProcessed(static_cast<std::int64_t>(state.iterations() * data.size()));
}

}  // namespace

BENCHMARK(BM_XorPairs<kernels::xor_pairs_serial>)->Arg(50)->Arg(100)->Arg(100'000);
BENCHMARK(BM_XorPairs<kernels::xor_pairs_parallel>)->Arg(50)->Arg(100)->Arg(100'000);
BENCHMARK(BM_CombineBlock<kernels::combine_block_serial>)->Arg(50)->Arg(100)->Arg(10'000);
BENCHMARK(BM_CombineBlock<kernels::combine_block_parallel>)->Arg(50)->Arg(100)->Arg(10'000);
BENCHMARK(BM_Histogram<kernels::byte_histogram_serial>)->Arg(1 << 16)->Arg(1 << 24);
BENCHMARK(BM_Histogram<kernels::byte_histogram_parallel>)->Arg(1 << 16)->Arg(1 << 24);

BENCHMARK_MAIN();
