#include "m3tts/bench.hpp"

#include <chrono>
#include <cstdio>
#include <fstream>

#include "m3tts/train.hpp"

namespace m3tts {

BenchReport bench_throughput(const RunConfig& base, std::span<const AcousticPath> variants, std::size_t steps,
                             std::size_t warmup) {
    if (steps <= warmup) {
        throw UsageError("bench: steps (" + std::to_string(steps) + ") must exceed warmup (" +
                         std::to_string(warmup) + ")");
    }
    if (variants.empty()) {
        throw UsageError("bench: no variants");
    }
    BenchReport report;
    for (auto path : variants) {
        RunConfig cfg = base;
        cfg.path = path;
        cfg.train.total_steps = steps;
        Trainer trainer(initial_state(cfg));
        BenchVariant v;
        v.path = path;
        v.timed_steps = steps - warmup;
        for (std::size_t i = 0; i < warmup; ++i) {
            v.losses.push_back(trainer.step());
        }
        const auto start = std::chrono::steady_clock::now();
        for (std::size_t i = warmup; i < steps; ++i) {
            v.losses.push_back(trainer.step());
        }
        v.elapsed_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
        v.steps_per_sec = static_cast<double>(v.timed_steps) / v.elapsed_s;
        report.variants.push_back(std::move(v));
    }
    if (report.variants.size() >= 2) {
        report.ratio = report.variants[0].steps_per_sec / report.variants[1].steps_per_sec;
    }
    return report;
}

void write_bench_csv(const std::string& path, const BenchReport& report) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) {
        throw DataError("cannot write '" + path + "'");
    }
    out << "variant,timed_steps,elapsed_s,steps_per_sec\n";
    char line[160];
    for (const auto& v : report.variants) {
        std::snprintf(line, sizeof(line), "%s,%zu,%.6f,%.6f\n", to_string(v.path).c_str(), v.timed_steps, v.elapsed_s,
                      v.steps_per_sec);
        out << line;
    }
    std::snprintf(line, sizeof(line), "ratio,,,%.6f\n", report.ratio);
    out << line;
}

} // namespace m3tts
