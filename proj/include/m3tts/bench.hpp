#pragma once

#include <span>
#include <string>
#include <vector>

#include "m3tts/config.hpp"

namespace m3tts {

struct BenchVariant {
    AcousticPath path = AcousticPath::vae;
    std::size_t timed_steps = 0;
    double elapsed_s = 0.0;
    double steps_per_sec = 0.0;
    std::vector<double> losses; // every step, warmup included
};

struct BenchReport {
    std::vector<BenchVariant> variants;
    double ratio = 0.0; // steps/sec of the first variant over the second
};

// Trains each variant from the same seed for `steps` steps and times the
// steps after `warmup`. Codec fitting on the vae path is setup, not timed.
BenchReport bench_throughput(const RunConfig& base, std::span<const AcousticPath> variants, std::size_t steps,
                             std::size_t warmup);

// variant,timed_steps,elapsed_s,steps_per_sec rows, then a ratio row.
void write_bench_csv(const std::string& path, const BenchReport& report);

} // namespace m3tts
