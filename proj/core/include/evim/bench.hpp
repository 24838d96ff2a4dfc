#pragma once

// Timing harness: per-phase HSM-SSD breakdown, mixer sweeps and the model
// report, each with a fixed CSV schema.
//
// Timings use the monotonic clock, discard warmup repetitions and report the
// median with its interquartile range. Everything runs on one thread.

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "evim/mixer.hpp"
#include "evim/model.hpp"

namespace evim::bench {

struct Summary {
  double median_ns = 0.0;
  double iqr_ns = 0.0;
};
/// Median and Q3 - Q1 with linear interpolation between order statistics.
Summary summarize(std::vector<double> samples_ns);

/// Smallest positive step of the monotonic clock, measured.
double timer_tick_ns();

/// Throws unless the tensor core is single-threaded.
void require_single_thread();

// Liveness accounting ------------------------------------------------------------

/// A forward schedule of named activation tensors. A tensor lives from the
/// step that writes it to the last step that reads it.
class Liveness {
 public:
  void step(std::string name, std::vector<std::string> reads,
            std::vector<std::pair<std::string, std::uint64_t>> writes);
  /// Bytes live during each step.
  std::vector<std::uint64_t> live_bytes() const;
  /// Bytes read or written by each step.
  std::vector<std::uint64_t> working_bytes() const;
  std::uint64_t peak() const;
  const std::vector<std::string>& step_names() const { return names_; }

 private:
  struct Tensor {
    std::uint64_t bytes;
    std::size_t first, last;
  };
  std::vector<std::string> names_;
  std::vector<std::string> tensor_names_;
  std::vector<Tensor> tensors_;
  std::vector<std::vector<std::size_t>> touched_;
};

inline constexpr std::string_view kMixers[] = {"hsm_ssd", "ncssd", "causal_ssd", "attention_ref"};

/// Activation schedule of one mixer layer (state-wise, LN and DWConv on).
Liveness mixer_schedule(std::string_view mixer, const MixerConfig& cfg, std::size_t elem_bytes);
/// Analytic MACs of one mixer layer under the tensor-core convention.
std::uint64_t mixer_macs(std::string_view mixer, const MixerConfig& cfg);

// Breakdown -------------------------------------------------------------------------

struct PhaseRecord {
  Phase phase;
  Summary time;
  std::uint64_t macs = 0;          // counted while running the phase
  std::uint64_t working_bytes = 0;  // activations the phase reads or writes
};

struct BenchRecord {
  MixerConfig cfg;
  std::string variant = "hsm_ssd";
  std::string dtype;
  std::vector<PhaseRecord> phases;  // in kPhases order
  Summary total;                    // the whole layer call, layer norm included
  Summary matmul;                   // per-repetition sums over matmul phases
  Summary non_matmul;
  std::size_t reps = 0;
  std::size_t warmup = 0;
  std::uint64_t macs = 0;  // Σ phase MACs
  std::uint64_t peak_bytes = 0;
  double tick_ns = 0.0;
  bool unreliable = false;  // some phase median under 10 timer ticks
};

/// Times each phase of hsm_ssd_layer. Requires reps >= 5, warmup >= 2 and
/// the state-wise head mode.
template <class T>
BenchRecord breakdown_run(const MixerConfig& cfg, std::size_t reps, std::size_t warmup = 2, std::uint64_t seed = 0);

/// `phase,median_ns,iqr_ns,macs`: one row per phase, then matmul, non_matmul
/// and total rows.
void write_breakdown_csv(std::ostream& os, const BenchRecord& r);

// Sweeps ----------------------------------------------------------------------------

enum class Axis { L, N, D, resolution };
Axis parse_axis(std::string_view s);
const char* axis_name(Axis a);

struct SweepOptions {
  Axis axis = Axis::L;
  std::vector<std::size_t> values;
  MixerConfig base{256, 16, 128};
  std::vector<std::string> mixers{"hsm_ssd", "attention_ref"};
  std::size_t reps = 5;
  std::size_t warmup = 2;
  std::uint64_t memory_cap_bytes = std::uint64_t(1) << 30;
  std::uint64_t seed = 0;
};

struct SweepRow {
  std::string mixer;
  Axis axis = Axis::L;
  std::size_t value = 0;
  Summary time;
  std::uint64_t macs = 0;
  std::uint64_t peak_bytes = 0;
  std::string status = "ok";  // or "skipped"
};

/// Mixer config at one sweep point. `resolution` maps an image side r to the
/// stage-1 grid (r/16)x(r/16).
MixerConfig sweep_point(const MixerConfig& base, Axis axis, std::size_t value);

/// One row per (mixer, value). Values must be strictly increasing.
template <class T>
std::vector<SweepRow> sweep_run(const SweepOptions& opts);

/// `mixer,axis,value,median_ns,macs,peak_bytes,status`
void write_sweep_csv(std::ostream& os, const std::vector<SweepRow>& rows);

struct Fit {
  double slope = 0.0;
  double intercept = 0.0;
  double r2 = 0.0;
};
/// Ordinary least squares of y on x. Needs at least two points.
Fit least_squares(const std::vector<double>& x, const std::vector<double>& y);
/// Log-log fit of median time against the swept value for one mixer; nullopt
/// with fewer than two timed rows.
std::optional<Fit> loglog_fit(const std::vector<SweepRow>& rows, std::string_view mixer);
/// Linear fit of median time against the swept value.
std::optional<Fit> linear_fit(const std::vector<SweepRow>& rows, std::string_view mixer);

// Model report ----------------------------------------------------------------------

struct ReportRow {
  CostEntry cost;
  std::uint64_t peak_bytes = 0;  // live activations while this entry runs
};

struct ModelReport {
  ModelConfig cfg;
  std::vector<ReportRow> rows;
  std::uint64_t params = 0;
  std::uint64_t macs = 0;
  std::uint64_t peak_bytes = 0;  // max over the schedule
};

/// Analytic counts per sublayer with an activation-liveness estimate, batch 1.
ModelReport report_model(const ModelConfig& cfg, std::size_t elem_bytes = 4);

/// `section,name,params,macs,peak_bytes` with a final `total` row.
void write_report_csv(std::ostream& os, const ModelReport& r);
/// Human-readable summary with per-stage subtotals.
void write_report_table(std::ostream& os, const ModelReport& r);

}  // namespace evim::bench
