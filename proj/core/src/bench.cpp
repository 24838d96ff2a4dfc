#include "evim/bench.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <iomanip>
#include <functional>
#include <map>
#include <memory>
#include <ostream>
#include <sstream>
#include <stdexcept>

#include "evim/ops.hpp"

namespace evim::bench {

namespace {

using Clock = std::chrono::steady_clock;

double elapsed_ns(Clock::time_point a, Clock::time_point b) {
  return std::chrono::duration<double, std::nano>(b - a).count();
}

double quantile(const std::vector<double>& sorted, double q) {
  const double pos = q * static_cast<double>(sorted.size() - 1);
  const std::size_t lo = static_cast<std::size_t>(std::floor(pos));
  const std::size_t hi = std::min(lo + 1, sorted.size() - 1);
  return sorted[lo] + (pos - static_cast<double>(lo)) * (sorted[hi] - sorted[lo]);
}

template <class T>
const char* dtype_label() {
  return dtype_name(dtype_of<T>());
}

// Prevents the optimizer from discarding a result.
template <class T>
void keep(const Tensor<T>& t) {
  if (!t.empty()) {
    volatile T sink = t[0];
    (void)sink;
  }
}

std::string fmt_double(double v) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(1) << v;
  return os.str();
}

}  // namespace

Summary summarize(std::vector<double> samples) {
  if (samples.empty()) throw std::invalid_argument("summarize: no samples");
  std::sort(samples.begin(), samples.end());
  return {quantile(samples, 0.5), quantile(samples, 0.75) - quantile(samples, 0.25)};
}

double timer_tick_ns() {
  double best = 1e18;
  for (int i = 0; i < 200; ++i) {
    const auto a = Clock::now();
    auto b = Clock::now();
    while (b == a) b = Clock::now();
    best = std::min(best, elapsed_ns(a, b));
  }
  return best;
}

void require_single_thread() {
  if (tensor_core_threads() != 1)
    throw std::runtime_error("benchmarks require a single-threaded tensor core, found " +
                             std::to_string(tensor_core_threads()) + " threads");
}

// Liveness -----------------------------------------------------------------------------

void Liveness::step(std::string name, std::vector<std::string> reads,
                    std::vector<std::pair<std::string, std::uint64_t>> writes) {
  const std::size_t s = names_.size();
  names_.push_back(std::move(name));
  touched_.emplace_back();
  for (const auto& r : reads) {
    // The most recent tensor of that name; unknown names are ignored.
    for (std::size_t i = tensor_names_.size(); i-- > 0;) {
      if (tensor_names_[i] == r) {
        tensors_[i].last = s;
        touched_[s].push_back(i);
        break;
      }
    }
  }
  for (auto& [n, bytes] : writes) {
    tensor_names_.push_back(n);
    tensors_.push_back({bytes, s, s});
    touched_[s].push_back(tensors_.size() - 1);
  }
}

std::vector<std::uint64_t> Liveness::live_bytes() const {
  std::vector<std::uint64_t> live(names_.size(), 0);
  for (const auto& t : tensors_)
    for (std::size_t s = t.first; s <= t.last; ++s) live[s] += t.bytes;
  return live;
}

std::vector<std::uint64_t> Liveness::working_bytes() const {
  std::vector<std::uint64_t> out(names_.size(), 0);
  for (std::size_t s = 0; s < names_.size(); ++s)
    for (std::size_t i : touched_[s]) out[s] += tensors_[i].bytes;
  return out;
}

std::uint64_t Liveness::peak() const {
  const auto live = live_bytes();
  return live.empty() ? 0 : *std::max_element(live.begin(), live.end());
}

Liveness mixer_schedule(std::string_view mixer, const MixerConfig& cfg, std::size_t elem) {
  cfg.validate();
  const std::uint64_t l = cfg.tokens, n = cfg.states, d = cfg.channels, g = cfg.decay_groups(), e = elem;
  Liveness s;
  s.step("input", {}, {{"x", l * d * e}});
  s.step("layer_norm", {"x"}, {{"xn", l * d * e}});
  if (mixer == "hsm_ssd") {
    s.step("proj_bcd", {"xn"}, {{"b_hat", l * n * e}, {"c", l * n * e}, {"delta", l * g * e}});
    s.step("dwconv", {"b_hat", "c"}, {{"b_conv", l * n * e}, {"c_conv", l * n * e}});
    s.step("discretize", {"delta", "b_conv"}, {{"a", l * g * e}, {"b", l * n * e}});
    s.step("state_reduce", {"a", "b", "xn"}, {{"ab", l * n * e}, {"h_in", n * d * e}});
    s.step("hsm_linear1", {"h_in"}, {{"h", n * d * e}, {"z", n * d * e}});
    s.step("hsm_gate_linear2", {"h", "z"}, {{"gated", n * d * e}, {"mixed", n * d * e}});
    s.step("out_project", {"c_conv", "mixed"}, {{"x_out", l * d * e}});
    return s;
  }
  if (mixer == "ncssd" || mixer == "causal_ssd") {
    s.step("project", {"xn"},
           {{"xp", l * d * e}, {"z", l * d * e}, {"b_hat", l * n * e}, {"c", l * n * e}, {"delta", l * g * e}});
    s.step("discretize", {"delta", "b_hat"}, {{"a", l * g * e}, {"b", l * n * e}});
    s.step("dwconv", {"b", "c", "xp"}, {{"b_conv", l * n * e}, {"c_conv", l * n * e}, {"xp_conv", l * d * e}});
    if (mixer == "ncssd") {
      s.step("state_reduce", {"a", "b_conv", "xp_conv"}, {{"ab", l * n * e}, {"h", n * d * e}});
      s.step("expand", {"c_conv", "h"}, {{"y", l * d * e}});
    } else {
      s.step("scan", {"a", "b_conv", "c_conv", "xp_conv"}, {{"state", n * d * e}, {"y", l * d * e}});
    }
    s.step("gate", {"y", "z"}, {{"gated", l * d * e}});
    s.step("out_project", {"gated"}, {{"x_out", l * d * e}});
    return s;
  }
  if (mixer == "attention_ref") {
    s.step("qkv", {"xn"}, {{"q", l * d * e}, {"k", l * d * e}, {"v", l * d * e}});
    s.step("scores", {"q", "k"}, {{"scores", l * l * e}});
    s.step("softmax", {"scores"}, {{"weights", l * l * e}});
    s.step("mix", {"weights", "v"}, {{"o", l * d * e}});
    s.step("out_project", {"o"}, {{"x_out", l * d * e}});
    return s;
  }
  throw std::invalid_argument("unknown mixer '" + std::string(mixer) + "'");
}

std::uint64_t mixer_macs(std::string_view mixer, const MixerConfig& cfg) {
  const std::uint64_t lnd = std::uint64_t(cfg.tokens) * cfg.states * cfg.channels;
  if (mixer == "hsm_ssd") return flops_of_mixer(cfg);
  if (mixer == "ncssd") return flops_of_ncssd_layer(cfg);
  // The scan spends 3LND where the non-causal reduce and expand spend 2LND.
  if (mixer == "causal_ssd") return flops_of_ncssd_layer(cfg) + lnd;
  if (mixer == "attention_ref") return flops_of_attention(cfg.tokens, cfg.channels);
  throw std::invalid_argument("unknown mixer '" + std::string(mixer) + "'");
}

// Breakdown ----------------------------------------------------------------------------

template <class T>
BenchRecord breakdown_run(const MixerConfig& cfg, std::size_t reps, std::size_t warmup, std::uint64_t seed) {
  require_single_thread();
  cfg.validate();
  if (reps < 5) throw ContractViolation("breakdown_run: reps must be >= 5");
  if (warmup < 2) throw ContractViolation("breakdown_run: warmup must be >= 2");
  if (cfg.head_mode != HeadMode::single_state_wise)
    throw ContractViolation("breakdown_run: phase timing covers the state-wise head mode only");

  Rng rng(seed);
  const auto p = init_mixer_params<T>(cfg, rng);
  const auto x = rng.normal_tensor<T>({cfg.tokens, cfg.channels});
  const Grid grid = grid_for_tokens(cfg.tokens);

  constexpr std::size_t kP = kPhases.size();
  std::array<std::vector<double>, kP> samples;
  std::array<std::uint64_t, kP> macs{};
  std::vector<double> totals, mm, other;

  for (std::size_t r = 0; r < warmup + reps; ++r) {
    std::array<double, kP> ns{};
    std::array<std::uint64_t, kP> counted{};
    auto timed = [&](std::size_t i, auto&& f) {
      const MacScope scope;
      const auto a = Clock::now();
      auto out = f();
      const auto b = Clock::now();
      ns[i] = elapsed_ns(a, b);
      counted[i] = scope.count();
      return out;
    };
    const Tensor<T> xn = layer_norm(x, p.ln_gamma, p.ln_beta);
    const auto ps = timed(0, [&] { return project_states(xn, p); });
    const auto cs = timed(1, [&] { return conv_states(ps, p, grid); });
    const auto dz = timed(2, [&] { return discretize(cs.delta, p.log_a, cs.b_hat); });
    const auto h_in = timed(3, [&] { return reduce_states(dz, xn); });
    const auto hz = timed(4, [&] { return hidden_linear(h_in, p); });
    const auto mixed = timed(5, [&] { return gate_project(hz[0], hz[1], p); });
    const auto x_out = timed(6, [&] { return expand_tokens(cs.c, mixed); });
    keep(x_out);

    const auto a = Clock::now();
    const auto whole = hsm_ssd_layer(x, p, grid);
    const auto b = Clock::now();
    keep(whole.x_out);

    if (r < warmup) {
      macs = counted;
      continue;
    }
    double sum_mm = 0, sum_other = 0;
    for (std::size_t i = 0; i < kP; ++i) {
      samples[i].push_back(ns[i]);
      (is_matmul_phase(kPhases[i]) ? sum_mm : sum_other) += ns[i];
    }
    mm.push_back(sum_mm);
    other.push_back(sum_other);
    totals.push_back(elapsed_ns(a, b));
  }

  BenchRecord rec;
  rec.cfg = cfg;
  rec.dtype = dtype_label<T>();
  rec.reps = reps;
  rec.warmup = warmup;
  rec.tick_ns = timer_tick_ns();
  const auto sched = mixer_schedule("hsm_ssd", cfg, sizeof(T));
  const auto working = sched.working_bytes();
  rec.peak_bytes = sched.peak();
  for (std::size_t i = 0; i < kP; ++i) {
    PhaseRecord ph{kPhases[i], summarize(samples[i]), macs[i], working[i + 2]};
    rec.macs += ph.macs;
    if (ph.time.median_ns < 10 * rec.tick_ns) rec.unreliable = true;
    rec.phases.push_back(ph);
  }
  rec.total = summarize(totals);
  rec.matmul = summarize(mm);
  rec.non_matmul = summarize(other);
  return rec;
}

void write_breakdown_csv(std::ostream& os, const BenchRecord& r) {
  std::uint64_t mm_macs = 0, other_macs = 0;
  os << "phase,median_ns,iqr_ns,macs\n";
  for (const auto& ph : r.phases) {
    os << phase_name(ph.phase) << ',' << fmt_double(ph.time.median_ns) << ',' << fmt_double(ph.time.iqr_ns) << ','
       << ph.macs << '\n';
    (is_matmul_phase(ph.phase) ? mm_macs : other_macs) += ph.macs;
  }
  os << "matmul," << fmt_double(r.matmul.median_ns) << ',' << fmt_double(r.matmul.iqr_ns) << ',' << mm_macs << '\n';
  os << "non_matmul," << fmt_double(r.non_matmul.median_ns) << ',' << fmt_double(r.non_matmul.iqr_ns) << ','
     << other_macs << '\n';
  os << "total," << fmt_double(r.total.median_ns) << ',' << fmt_double(r.total.iqr_ns) << ',' << r.macs << '\n';
}

// Sweeps -------------------------------------------------------------------------------

Axis parse_axis(std::string_view s) {
  if (s == "L") return Axis::L;
  if (s == "N") return Axis::N;
  if (s == "D") return Axis::D;
  if (s == "resolution") return Axis::resolution;
  throw std::invalid_argument("unknown sweep axis '" + std::string(s) + "' (expected L, N, D or resolution)");
}

const char* axis_name(Axis a) {
  switch (a) {
    case Axis::L: return "L";
    case Axis::N: return "N";
    case Axis::D: return "D";
    case Axis::resolution: return "resolution";
  }
  return "?";
}

MixerConfig sweep_point(const MixerConfig& base, Axis axis, std::size_t value) {
  MixerConfig c = base;
  switch (axis) {
    case Axis::L: c.tokens = value; break;
    case Axis::N: c.states = value; break;
    case Axis::D: c.channels = value; break;
    case Axis::resolution:
      if (value == 0 || value % 16 != 0) throw ContractViolation("sweep: resolution must be a positive multiple of 16");
      c.tokens = (value / 16) * (value / 16);
      break;
  }
  c.validate();
  return c;
}

template <class T>
std::vector<SweepRow> sweep_run(const SweepOptions& opts) {
  require_single_thread();
  if (opts.values.empty()) throw ContractViolation("sweep: no values");
  for (std::size_t i = 1; i < opts.values.size(); ++i)
    if (opts.values[i] <= opts.values[i - 1]) throw ContractViolation("sweep: values must be strictly increasing");
  if (opts.reps < 1) throw ContractViolation("sweep: reps must be >= 1");
  for (const auto& m : opts.mixers)
    if (std::find(std::begin(kMixers), std::end(kMixers), m) == std::end(kMixers))
      throw std::invalid_argument("unknown mixer '" + m + "'");

  std::vector<SweepRow> rows;
  for (const auto& mixer : opts.mixers) {
    for (std::size_t value : opts.values) {
      const MixerConfig cfg = sweep_point(opts.base, opts.axis, value);
      SweepRow row{mixer, opts.axis, value, {}, mixer_macs(mixer, cfg), mixer_schedule(mixer, cfg, sizeof(T)).peak()};
      if (row.peak_bytes > opts.memory_cap_bytes) {
        row.status = "skipped";
        rows.push_back(row);
        continue;
      }
      Rng rng(opts.seed);
      const Grid grid = opts.axis == Axis::resolution ? Grid{value / 16, value / 16} : grid_for_tokens(cfg.tokens);
      const auto x = rng.normal_tensor<T>({cfg.tokens, cfg.channels});
      std::function<Tensor<T>()> run;
      if (mixer == "attention_ref") {
        auto ap = std::make_shared<AttentionParams<T>>(init_attention_params<T>(cfg.channels, rng));
        run = [ap, &x] { return attention_ref(x, *ap); };
      } else {
        auto p = std::make_shared<MixerParams<Tensor<T>>>(init_mixer_params<T>(cfg, rng, mixer != "hsm_ssd"));
        if (mixer == "hsm_ssd") run = [p, &x, grid] { return hsm_ssd_layer(x, *p, grid).x_out; };
        else if (mixer == "ncssd") run = [p, &x, grid] { return ncssd_layer(x, *p, grid); };
        else run = [p, &x, grid] { return causal_ssd_layer(x, *p, grid); };
      }
      std::vector<double> ns;
      for (std::size_t r = 0; r < opts.warmup + opts.reps; ++r) {
        const auto a = Clock::now();
        const auto out = run();
        const auto b = Clock::now();
        keep(out);
        if (r >= opts.warmup) ns.push_back(elapsed_ns(a, b));
      }
      row.time = summarize(ns);
      rows.push_back(row);
    }
  }
  return rows;
}

void write_sweep_csv(std::ostream& os, const std::vector<SweepRow>& rows) {
  os << "mixer,axis,value,median_ns,macs,peak_bytes,status\n";
  for (const auto& r : rows)
    os << r.mixer << ',' << axis_name(r.axis) << ',' << r.value << ',' << fmt_double(r.time.median_ns) << ','
       << r.macs << ',' << r.peak_bytes << ',' << r.status << '\n';
}

Fit least_squares(const std::vector<double>& x, const std::vector<double>& y) {
  if (x.size() != y.size() || x.size() < 2) throw std::invalid_argument("least_squares: need two or more points");
  const double n = static_cast<double>(x.size());
  double mx = 0, my = 0;
  for (std::size_t i = 0; i < x.size(); ++i) mx += x[i], my += y[i];
  mx /= n, my /= n;
  double sxx = 0, sxy = 0, syy = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sxx += (x[i] - mx) * (x[i] - mx);
    sxy += (x[i] - mx) * (y[i] - my);
    syy += (y[i] - my) * (y[i] - my);
  }
  if (sxx == 0) throw std::invalid_argument("least_squares: x has no spread");
  Fit f;
  f.slope = sxy / sxx;
  f.intercept = my - f.slope * mx;
  f.r2 = syy == 0 ? 1.0 : (sxy * sxy) / (sxx * syy);
  return f;
}

namespace {

std::optional<Fit> fit_rows(const std::vector<SweepRow>& rows, std::string_view mixer, bool log) {
  std::vector<double> x, y;
  for (const auto& r : rows) {
    if (r.mixer != mixer || r.status != "ok") continue;
    x.push_back(log ? std::log(static_cast<double>(r.value)) : static_cast<double>(r.value));
    y.push_back(log ? std::log(r.time.median_ns) : r.time.median_ns);
  }
  if (x.size() < 2) return std::nullopt;
  return least_squares(x, y);
}

}  // namespace

std::optional<Fit> loglog_fit(const std::vector<SweepRow>& rows, std::string_view mixer) {
  return fit_rows(rows, mixer, true);
}

std::optional<Fit> linear_fit(const std::vector<SweepRow>& rows, std::string_view mixer) {
  return fit_rows(rows, mixer, false);
}

// Model report -------------------------------------------------------------------------

ModelReport report_model(const ModelConfig& cfg, std::size_t elem) {
  ModelReport rep;
  rep.cfg = cfg;
  const auto costs = cost_breakdown(cfg);
  const auto grids = cfg.stage_grids();
  const auto stem = cfg.stem_channels();
  const std::uint64_t e = elem, classes = cfg.num_classes;

  // One schedule step per cost row, in the same order.
  Liveness s;
  std::uint64_t h = cfg.height, w = cfg.width;
  std::string cur;
  std::size_t tick = 0;
  auto fresh = [&](const std::string& base) { return base + "#" + std::to_string(tick++); };
  // The image is written by the first step so conv1 sees it live.
  std::vector<std::pair<std::string, std::uint64_t>> first_writes{{"image", h * w * 3 * e}};
  std::array<std::string, 3> hidden;
  for (std::size_t i = 0; i < 4; ++i) {
    h = (h + 1) / 2, w = (w + 1) / 2;
    const std::string out = fresh("stem");
    auto writes = i == 0 ? first_writes : std::vector<std::pair<std::string, std::uint64_t>>{};
    writes.push_back({out, h * w * stem[i] * e});
    s.step("stem", i == 0 ? std::vector<std::string>{} : std::vector<std::string>{cur}, writes);
    cur = out;
  }
  for (std::size_t st = 0; st < 3; ++st) {
    const std::uint64_t d = cfg.channels[st], l = grids[st].tokens(), hid = kFfnExpansion * d;
    const MixerConfig mc{grids[st].tokens(), cfg.states[st], cfg.channels[st]};
    const std::uint64_t mixer_work = mixer_schedule("hsm_ssd", mc, elem).peak() - l * d * e;
    for (std::size_t b = 0; b < cfg.blocks[st]; ++b) {
      std::string x1 = fresh("x"), x2 = fresh("x"), x3 = fresh("x"), x4 = fresh("x");
      s.step("dw1", {cur}, {{fresh("tmp"), l * d * e}, {x1, l * d * e}});
      hidden[st] = fresh("hidden");
      s.step("mixer", {x1}, {{fresh("work"), mixer_work}, {x2, l * d * e}, {hidden[st], mc.states * d * e}});
      s.step("dw2", {x2}, {{fresh("tmp"), l * d * e}, {x3, l * d * e}});
      s.step("ffn", {x3}, {{fresh("ffn_hidden"), l * hid * e}, {fresh("tmp"), l * d * e}, {x4, l * d * e}});
      cur = x4;
    }
    if (st < 2) {
      const std::uint64_t out = cfg.channels[st + 1], ex = cfg.downsample_hidden(st), r = ex / kSeReduction;
      const std::uint64_t l_out = grids[st + 1].tokens();
      const std::string e1 = fresh("expand"), e2 = fresh("dw"), e3 = fresh("se"), o = fresh("x");
      s.step("expand", {cur}, {{e1, l * ex * e}});
      s.step("dw", {e1}, {{e2, l_out * ex * e}});
      s.step("se", {e2}, {{fresh("pool"), (ex + r) * e}, {e3, l_out * ex * e}});
      s.step("project", {e3}, {{o, l_out * out * e}});
      cur = o;
    }
  }
  std::vector<std::string> logits{fresh("z")};
  s.step("z0", {cur}, {{fresh("pooled"), cfg.channels[2] * e}, {logits[0], classes * e}});
  if (cfg.msf) {
    for (std::size_t st = 0; st < 3; ++st) {
      logits.push_back(fresh("z"));
      s.step("z", {hidden[st]}, {{fresh("pooled"), cfg.channels[st] * e}, {logits.back(), classes * e}});
    }
    s.step("beta", logits, {{fresh("fused"), classes * e}});
  }

  const auto live = s.live_bytes();
  if (live.size() != costs.size()) throw std::logic_error("report_model: schedule and cost rows disagree");

  for (std::size_t i = 0; i < costs.size(); ++i) {
    rep.rows.push_back({costs[i], live[i]});
    rep.params += costs[i].params;
    rep.macs += costs[i].macs;
    rep.peak_bytes = std::max(rep.peak_bytes, live[i]);
  }
  return rep;
}

void write_report_csv(std::ostream& os, const ModelReport& r) {
  os << "section,name,params,macs,peak_bytes\n";
  for (const auto& row : r.rows)
    os << row.cost.section << ',' << row.cost.name << ',' << row.cost.params << ',' << row.cost.macs << ','
       << row.peak_bytes << '\n';
  os << "total,," << r.params << ',' << r.macs << ',' << r.peak_bytes << '\n';
}

void write_report_table(std::ostream& os, const ModelReport& r) {
  struct Sub {
    std::uint64_t params = 0, macs = 0, peak = 0;
  };
  std::vector<std::string> order;
  std::map<std::string, Sub> subs;
  for (const auto& row : r.rows) {
    if (!subs.count(row.cost.section)) order.push_back(row.cost.section);
    auto& sub = subs[row.cost.section];
    sub.params += row.cost.params;
    sub.macs += row.cost.macs;
    sub.peak = std::max(sub.peak, row.peak_bytes);
  }
  os << r.cfg.variant_name << " @" << r.cfg.height << "x" << r.cfg.width << ", " << r.cfg.num_classes
     << " classes, fusion " << (r.cfg.msf ? "on" : "off") << '\n';
  os << std::left << std::setw(10) << "section" << std::right << std::setw(14) << "params" << std::setw(16)
     << "MACs" << std::setw(16) << "peak_bytes" << '\n';
  for (const auto& name : order) {
    const auto& sub = subs[name];
    os << std::left << std::setw(10) << name << std::right << std::setw(14) << sub.params << std::setw(16)
       << sub.macs << std::setw(16) << sub.peak << '\n';
  }
  os << std::left << std::setw(10) << "total" << std::right << std::setw(14) << r.params << std::setw(16) << r.macs
     << std::setw(16) << r.peak_bytes << '\n';
  os << std::fixed << std::setprecision(1) << "params≈" << static_cast<double>(r.params) / 1e6 << "M, macs≈"
     << std::setprecision(0) << static_cast<double>(r.macs) / 1e6 << "M\n";
}

template BenchRecord breakdown_run<float>(const MixerConfig&, std::size_t, std::size_t, std::uint64_t);
template BenchRecord breakdown_run<double>(const MixerConfig&, std::size_t, std::size_t, std::uint64_t);
template std::vector<SweepRow> sweep_run<float>(const SweepOptions&);
template std::vector<SweepRow> sweep_run<double>(const SweepOptions&);

}  // namespace evim::bench
