// Times the parallel matmul kernels against the serial reference path on
// transformer-shaped workloads and checks they agree bit for bit.

#include "hdt/kernels.hpp"
#include "hdt/rng.hpp"

#include <chrono>
#include <cstdio>
#include <cstring>
#include <string>
#include <vector>

using namespace hdt;

namespace {

double now_s() {
  using clock = std::chrono::steady_clock;
  return std::chrono::duration<double>(clock::now().time_since_epoch()).count();
}

struct Case {
  const char* name;
  int64_t m, k, n;
};

// shapes taken from the models this library trains: token embedding and head
// projections (rows = batch*context), attention score/值 products, and one
// square size for scale
const Case kCases[] = {
    {"embed 1280x64 @ 64x128", 1280, 64, 128},
    {"head 1280x128 @ 128x30", 1280, 128, 30},
    {"scores 600x64 @ 64x600", 600, 64, 600},
    {"square 512x512 @ 512x512", 512, 512, 512},
};

double bench(void (*run)(const double*, const double*, double*, int64_t, int64_t, int64_t, bool,
                         bool),
             const double* a, const double* b, double* c, const Case& cs, bool parallel,
             int reps) {
  double best = 1e100;
  for (int r = 0; r < reps; ++r) {
    const double t0 = now_s();
    run(a, b, c, cs.m, cs.k, cs.n, false, parallel);
    best = std::min(best, now_s() - t0);
  }
  return best;
}

}  // namespace

int main(int argc, char** argv) {
  int reps = 5;
  if (argc > 1) reps = std::max(1, std::atoi(argv[1]));

  std::printf("threads: %d (serial reference vs OpenMP), best of %d reps\n", kernels::max_threads(),
              reps);
  std::printf("%-28s %12s %12s %8s %6s\n", "case", "serial ms", "parallel ms", "speedup",
              "equal");

  bool all_equal = true;
  for (const Case& cs : kCases) {
    Prng rng(derive_seed(1234, 'K'));
    std::vector<double> a(cs.m * cs.k), b(cs.k * cs.n);
    for (double& x : a) x = rng.normal();
    for (double& x : b) x = rng.normal();
    std::vector<double> serial(cs.m * cs.n), parallel(cs.m * cs.n);

    const double ts = bench(kernels::mm, a.data(), b.data(), serial.data(), cs, false, reps);
    const double tp = bench(kernels::mm, a.data(), b.data(), parallel.data(), cs, true, reps);
    const bool equal =
        std::memcmp(serial.data(), parallel.data(), sizeof(double) * serial.size()) == 0;
    all_equal = all_equal && equal;

    std::printf("%-28s %12.3f %12.3f %7.2fx %6s\n", cs.name, ts * 1e3, tp * 1e3, ts / tp,
                equal ? "yes" : "NO");
  }

  if (!all_equal) {
    std::fprintf(stderr, "error: parallel kernel output differs from the serial reference\n");
    return 1;
  }
  return 0;
}
