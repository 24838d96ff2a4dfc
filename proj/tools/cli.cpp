#include "cli.hpp"

#include <algorithm>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>

#include "CLI11.hpp"
#include "evim/bench.hpp"
#include "evim/io.hpp"
#include "evim/train.hpp"
#include "evim/verify.hpp"

namespace evim::cli {

namespace {

// Usage errors raised while executing a command (after parsing).
struct UsageError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

// CSV cells: plain decimal, never scientific.
std::string csv_decimal(double v) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(9) << v;
  return os.str();
}

std::string format_double(double v, int precision = 9) {
  std::ostringstream os;
  os << std::setprecision(precision) << v;
  return os.str();
}

// Writes through a temporary buffer so a failed command leaves no partial file.
template <class F>
void write_file(const std::string& path, F&& body) {
  std::ostringstream buf;
  body(buf);
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw UsageError("cannot open '" + path + "' for writing");
  os << buf.str();
}

std::vector<std::size_t> parse_values(const std::string& csv) {
  std::vector<std::size_t> out;
  std::stringstream ss(csv);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (item.empty() || item.find_first_not_of("0123456789") != std::string::npos)
      throw UsageError("--values expects comma-separated positive integers, got '" + csv + "'");
    out.push_back(std::stoull(item));
  }
  if (out.empty()) throw UsageError("--values is empty");
  return out;
}

std::vector<std::string> split(const std::string& csv) {
  std::vector<std::string> out;
  std::stringstream ss(csv);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(item);
  return out;
}

bool parse_on_off(const std::string& s) {
  if (s == "on") return true;
  if (s == "off") return false;
  throw UsageError("expected on or off, got '" + s + "'");
}

// verify --------------------------------------------------------------------------------

int cmd_verify(const std::string& suite, std::uint64_t seed, std::ostream& out) {
  if (suite.empty()) throw UsageError("--suite must name a suite (all, prop1, gradcheck, invariants)");
  const auto lines = verify::run_suite(suite, seed);
  bool ok = true;
  for (const auto& l : lines) {
    out << (l.pass ? "PASS " : "FAIL ") << l.name << " max_err=" << format_double(l.measured, 3)
        << " tol=" << format_double(l.tolerance, 3) << '\n';
    ok = ok && l.pass;
  }
  return ok ? kOk : kPropertyFailure;
}

// report / breakdown ----------------------------------------------------------------------

io::RunConfig model_with_res(const std::string& model, std::size_t res) {
  io::RunConfig rc = io::resolve_model(model);
  if (res != 0) {
    rc.model.height = rc.model.width = res;
    try {
      rc.model.validate();
    } catch (const ContractViolation& e) {
      throw UsageError(e.what());
    }
  }
  return rc;
}

int cmd_report(const std::string& model, std::size_t res, const std::string& csv_path, std::ostream& out) {
  const auto rc = model_with_res(model, res);
  const auto rep = bench::report_model(rc.model, rc.dtype == DType::f32 ? 4 : 8);
  bench::write_report_table(out, rep);
  if (!csv_path.empty()) write_file(csv_path, [&](std::ostream& os) { bench::write_report_csv(os, rep); });
  return kOk;
}

int cmd_breakdown(const std::string& model, std::size_t stage, std::size_t reps, std::size_t warmup,
                  const std::string& csv_path, std::ostream& out) {
  const auto rc = io::resolve_model(model);
  if (stage < 1 || stage > 3) throw UsageError("--stage must be 1, 2 or 3");
  const auto grids = rc.model.stage_grids();
  const MixerConfig mc{grids[stage - 1].tokens(), rc.model.states[stage - 1], rc.model.channels[stage - 1]};
  const auto rec = rc.dtype == DType::f32 ? bench::breakdown_run<float>(mc, reps, warmup, rc.seed)
                                          : bench::breakdown_run<double>(mc, reps, warmup, rc.seed);
  out << rc.model.variant_name << " stage " << stage << " mixer: L=" << mc.tokens << " N=" << mc.states
      << " D=" << mc.channels << " (" << rec.dtype << ", " << rec.reps << " reps)"
      << (rec.unreliable ? ", some phases near timer resolution" : "") << '\n';
  bench::write_breakdown_csv(out, rec);
  if (!csv_path.empty()) write_file(csv_path, [&](std::ostream& os) { bench::write_breakdown_csv(os, rec); });
  return kOk;
}

// bench ---------------------------------------------------------------------------------

struct BenchArgs {
  std::string axis = "L";
  std::string values = "256,512,1024,2048,4096";
  std::string mixers = "hsm_ssd,attention_ref";
  std::size_t l = 256, n = 16, d = 128;
  std::size_t reps = 5, warmup = 2;
  std::uint64_t memory_cap = std::uint64_t(1) << 30;
  std::string dtype = "f32";
  std::string out;
};

int cmd_bench(const BenchArgs& a, std::uint64_t seed, std::ostream& out) {
  bench::SweepOptions o;
  o.axis = bench::parse_axis(a.axis);
  o.values = parse_values(a.values);
  o.mixers = split(a.mixers);
  o.base = {a.l, a.n, a.d};
  o.reps = a.reps;
  o.warmup = a.warmup;
  o.memory_cap_bytes = a.memory_cap;
  o.seed = seed;
  const auto rows =
      io::parse_dtype(a.dtype) == DType::f32 ? bench::sweep_run<float>(o) : bench::sweep_run<double>(o);
  bench::write_sweep_csv(out, rows);
  for (const auto& m : o.mixers) {
    if (const auto f = bench::loglog_fit(rows, m))
      out << "# " << m << " log-log slope " << format_double(f->slope, 3) << ", R^2 "
          << format_double(f->r2, 3) << '\n';
  }
  if (!a.out.empty()) write_file(a.out, [&](std::ostream& os) { bench::write_sweep_csv(os, rows); });
  return kOk;
}

// init / infer ----------------------------------------------------------------------------

int cmd_init(const std::string& model, std::uint64_t seed, const std::string& dtype, const std::string& path,
             std::ostream& out) {
  io::RunConfig rc = io::resolve_model(model);
  rc.seed = seed;
  if (!dtype.empty()) rc.dtype = io::parse_dtype(dtype);
  Rng rng(rc.seed);
  const io::WeightFile f = rc.dtype == DType::f32 ? io::to_weight_file(init_model<float>(rc.model, rng))
                                                   : io::to_weight_file(init_model<double>(rc.model, rng));
  io::save(path, f);
  out << "wrote " << f.entries.size() << " tensors (" << count_params(rc.model) << " parameters, "
      << dtype_name(rc.dtype) << ") to " << path << '\n';
  return kOk;
}

template <class T>
int infer_as(const io::RunConfig& rc, const io::WeightFile& wf, const Tensor<T>& input, const std::string& path,
             std::ostream& out) {
  Rng rng(0);
  auto w = init_model<T>(rc.model, rng);
  io::from_weight_file(wf, w);
  if (input.rank() != 3 && input.rank() != 4) throw UsageError("input must be [H,W,3] or [B,H,W,3]");
  const auto logits = model_forward(input, w, rc.model).logits;
  const std::size_t c = logits.dim(-1), rows = logits.size() / c;
  out << std::setprecision(9);
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t k = 0; k < c; ++k) out << (k ? "," : "") << logits[r * c + k];
    out << '\n';
  }
  if (!path.empty()) {
    io::WeightFile res;
    res.add("logits", logits);
    io::save(path, res);
  }
  return kOk;
}

int cmd_infer(const std::string& model, const std::string& weights, const std::string& input,
              const std::string& path, std::ostream& out) {
  const io::RunConfig rc = io::resolve_model(model);
  const io::WeightFile wf = io::load(weights);
  const io::WeightFile in = io::load(input);
  const io::Entry* x = in.find("input");
  if (!x) throw io::FormatError("input file has no tensor named 'input'", 0);
  if (wf.entries.empty()) throw io::FormatError("weight file holds no tensors", 8);
  const DType dt = io::dtype_of(wf.entries.front().value);
  if (io::dtype_of(x->value) != dt) throw UsageError("input dtype does not match the weights");
  return dt == DType::f32 ? infer_as(rc, wf, std::get<Tensor<float>>(x->value), path, out)
                          : infer_as(rc, wf, std::get<Tensor<double>>(x->value), path, out);
}

// train-toy -------------------------------------------------------------------------------

int cmd_train_toy(TrainConfig tc, const std::string& msf, const std::string& dtype, const std::string& path,
                  std::ostream& out) {
  tc.msf = parse_on_off(msf);
  const ModelConfig mc = mini_m1_config();
  const auto r = io::parse_dtype(dtype) == DType::f32 ? train_toy<float>(mc, tc) : train_toy<double>(mc, tc);
  auto write_curve = [&](std::ostream& os) {
    os << "step,loss,accuracy\n";
    for (const auto& s : r.curve) os << s.step << ',' << csv_decimal(s.loss) << ',' << csv_decimal(s.accuracy) << '\n';
  };
  if (!path.empty()) write_file(path, write_curve);
  if (r.diverged) {
    out << "FAIL diverged at step " << r.diverged_step << '\n';
    return kPropertyFailure;
  }
  out << "final_loss=" << format_double(r.curve.back().loss) << " heldout_accuracy=" << format_double(r.final_accuracy)
      << " max_beta_sum_error=" << format_double(r.max_beta_sum_error, 3) << '\n';
  return kOk;
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"EfficientViM / HSM-SSD reference tool", "evim"};
  app.require_subcommand(1);
  std::uint64_t seed = 0;
  app.add_option("--seed", seed, "Random seed (default 0)");

  std::string suite = "all";
  auto* verify = app.add_subcommand("verify", "Run property suites");
  verify->add_option("--suite", suite, "all, prop1, gradcheck or invariants");
  verify->add_option("--seed", seed, "Random seed (default 0)");

  std::string model = "M1", csv;
  std::size_t res = 0;
  auto* report = app.add_subcommand("report", "Parameter / MAC table");
  report->add_option("--model", model, "M1..M4 or a config path");
  report->add_option("--res", res, "Input resolution override");
  report->add_option("--out", csv, "CSV output path");

  BenchArgs ba;
  auto* bench_cmd = app.add_subcommand("bench", "Mixer sweep");
  bench_cmd->add_option("--sweep", ba.axis, "L, N, D or resolution");
  bench_cmd->add_option("--values", ba.values, "Comma-separated increasing values");
  bench_cmd->add_option("--mixers", ba.mixers, "Subset of hsm_ssd,ncssd,causal_ssd,attention_ref");
  bench_cmd->add_option("--L", ba.l, "Base token count");
  bench_cmd->add_option("--N", ba.n, "Base state count");
  bench_cmd->add_option("--D", ba.d, "Base channel count");
  bench_cmd->add_option("--reps", ba.reps, "Timed repetitions");
  bench_cmd->add_option("--warmup", ba.warmup, "Discarded repetitions");
  bench_cmd->add_option("--memory-cap", ba.memory_cap, "Skip points whose activations exceed this many bytes");
  bench_cmd->add_option("--dtype", ba.dtype, "f32 or f64");
  bench_cmd->add_option("--out", ba.out, "CSV output path");
  bench_cmd->add_option("--seed", seed, "Random seed (default 0)");

  std::size_t reps = 7, warmup = 2, stage = 1;
  auto* breakdown = app.add_subcommand("breakdown", "Per-phase HSM-SSD timing");
  breakdown->add_option("--model", model, "M1..M4 or a config path");
  breakdown->add_option("--stage", stage, "Stage whose mixer shape is timed (1-3)");
  breakdown->add_option("--reps", reps, "Timed repetitions (>= 5)");
  breakdown->add_option("--warmup", warmup, "Discarded repetitions (>= 2)");
  breakdown->add_option("--out", csv, "CSV output path");

  std::string weights, input, dtype;
  auto* infer = app.add_subcommand("infer", "Forward pass on a tensor file");
  infer->add_option("--model", model, "M1..M4 or a config path");
  infer->add_option("--weights", weights, "Weight file")->required();
  infer->add_option("--input", input, "Tensor file holding 'input'")->required();
  infer->add_option("--out", csv, "Write logits as a tensor file");

  TrainConfig tc;
  std::string msf = "on", train_dtype = "f32";
  auto* train = app.add_subcommand("train-toy", "Train mini-M1 on the synthetic task");
  train->add_option("--steps", tc.steps, "Optimizer steps");
  train->add_option("--lr", tc.lr, "Learning rate");
  train->add_option("--momentum", tc.momentum, "SGD momentum");
  train->add_option("--train-size", tc.train_size, "Fixed training set size");
  train->add_option("--msf", msf, "Fused head: on or off");
  train->add_option("--dtype", train_dtype, "f32 or f64");
  train->add_option("--out", csv, "Loss curve CSV path");
  train->add_option("--seed", seed, "Random seed (default 0)");

  auto* init = app.add_subcommand("init", "Write freshly initialized weights");
  init->add_option("--model", model, "M1..M4 or a config path");
  init->add_option("--dtype", dtype, "f32 or f64 (default from the config)");
  init->add_option("--out", csv, "Weight file path")->required();
  init->add_option("--seed", seed, "Random seed (default 0)");

  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(reversed);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kOk : kUsage;
  }

  try {
    if (*verify) return cmd_verify(suite, seed, out);
    if (*report) return cmd_report(model, res, csv, out);
    if (*bench_cmd) return cmd_bench(ba, seed, out);
    if (*breakdown) return cmd_breakdown(model, stage, reps, warmup, csv, out);
    if (*infer) return cmd_infer(model, weights, input, csv, out);
    if (*train) {
      tc.seed = seed;
      return cmd_train_toy(tc, msf, train_dtype, csv, out);
    }
    if (*init) return cmd_init(model, seed, dtype, csv, out);
  } catch (const io::FormatError& e) {
    err << "error: corrupt input: " << e.what() << '\n';
    return kCorruptInput;
  } catch (const std::invalid_argument& e) {
    // ContractViolation, ConfigError and UsageError all land here.
    err << "error: " << e.what() << '\n';
    return kUsage;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kUsage;
  }
  return kUsage;
}

}  // namespace evim::cli
