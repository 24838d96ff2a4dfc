#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <unistd.h>

#include "cli.hpp"
#include "doctest.h"
#include "evim/io.hpp"

using namespace evim;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  int code;
  std::string out, err;
};

Outcome run_cli(std::vector<std::string> args) {
  std::ostringstream out, err;
  const int code = cli::run(args, out, err);
  return {code, out.str(), err.str()};
}

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(is), {}};
}

void spit(const fs::path& p, const std::string& bytes) {
  std::ofstream os(p, std::ios::binary | std::ios::trunc);
  os << bytes;
}

fs::path scratch_dir() {
  const fs::path d = fs::temp_directory_path() / ("evim_test_cli_" + std::to_string(::getpid()));
  fs::create_directories(d);
  return d;
}

void put_u32(std::string& s, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) s.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}
void put_u64(std::string& s, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) s.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

// Byte image of a file holding one f32 tensor "x" = [1.0, -2.0], built by hand.
std::string handmade_file() {
  std::string s = "EVIM";
  put_u32(s, 1);  // version
  put_u32(s, 1);  // count
  put_u32(s, 1);
  s += "x";
  put_u32(s, 1);  // rank
  put_u64(s, 2);
  put_u32(s, 0);           // f32
  put_u32(s, 0x3f800000);  // 1.0f
  put_u32(s, 0xc0000000);  // -2.0f
  return s;
}

const char* kTinyConfig = R"({"variant": "M1", "blocks": [1, 1, 1], "channels": [8, 12, 16],
  "states": [4, 4, 2], "height": 32, "width": 32, "num_classes": 3})";

template <class T>
bool bit_equal(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape()) return false;
  return std::memcmp(a.data().data(), b.data().data(), a.size() * sizeof(T)) == 0;
}

}  // namespace

TEST_CASE("weight file encoding matches the documented layout") {
  io::WeightFile f;
  Tensor<float> x = Tensor<float>::zeros(Shape{2});
  x[0] = 1.0f;
  x[1] = -2.0f;
  f.add("x", x);
  const std::string bytes = io::encode(f);
  CHECK(bytes == handmade_file());
  const auto back = io::decode(bytes);
  REQUIRE(back.entries.size() == 1);
  CHECK(back.entries[0].name == "x");
  CHECK(back.entries[0].offset == 12);
  CHECK(bit_equal(std::get<Tensor<float>>(back.entries[0].value), x));
}

TEST_CASE("corrupt weight files report the failing byte") {
  const std::string good = handmade_file();
  auto offset_of = [](const std::string& bytes) -> std::int64_t {
    try {
      (void)io::decode(bytes);
    } catch (const io::FormatError& e) {
      return static_cast<std::int64_t>(e.offset());
    }
    return -1;
  };
  std::string s = good;
  s[0] = 'X';
  CHECK(offset_of(s) == 0);
  s = good;
  s[4] = 2;  // version
  CHECK(offset_of(s) == 4);
  CHECK(offset_of(good.substr(0, 14)) == 12);   // name length cut short
  CHECK(offset_of(good.substr(0, good.size() - 1)) == 33);  // payload
  s = good;
  s[17] = 0;  // rank 0
  CHECK(offset_of(s) == 17);
  s = good;
  s[21] = 0;  // extent 0
  CHECK(offset_of(s) == 21);
  s = good;
  s[29] = 7;  // dtype tag
  CHECK(offset_of(s) == 29);
  CHECK(offset_of(good + "z") == static_cast<std::int64_t>(good.size()));
  s = good;
  s[12] = 0;  // empty name
  CHECK(offset_of(s) == 12);
  CHECK(offset_of(good) == -1);
}

TEST_CASE("duplicate names are rejected") {
  io::WeightFile f;
  f.add("a", Tensor<double>::zeros(Shape{1}));
  f.add("a", Tensor<double>::zeros(Shape{1}));
  CHECK_THROWS_AS(io::encode(f), std::invalid_argument);
  // Two copies of the same record after a count of 2.
  const std::string one = handmade_file();
  std::string two = one.substr(0, 8);
  put_u32(two, 2);
  two += one.substr(12) + one.substr(12);
  CHECK_THROWS_AS(io::decode(two), io::FormatError);
}

TEST_CASE("model weights round-trip bit-exactly") {
  const auto rc = io::parse_config(kTinyConfig);
  Rng rng(3);
  const auto w = init_model<double>(rc.model, rng);
  const io::WeightFile f = io::to_weight_file(w);
  const std::string bytes = io::encode(f);
  CHECK(io::encode(io::decode(bytes)) == bytes);

  Rng other(99);
  auto w2 = init_model<double>(rc.model, other);
  io::from_weight_file(io::decode(bytes), w2);
  std::size_t n = 0;
  for_each_param(w, [&](const std::string& name, const Tensor<double>& t) {
    const auto* e = f.find(name);
    REQUIRE(e != nullptr);
    CHECK(bit_equal(std::get<Tensor<double>>(e->value), t));
    ++n;
  });
  CHECK(io::to_weight_file(w2).entries.size() == f.entries.size());
  CHECK(io::encode(io::to_weight_file(w2)) == bytes);
  CHECK(n > 0);

  SUBCASE("shape, dtype and name mismatches are format errors") {
    auto cfg = rc.model;
    cfg.channels = {8, 12, 20};
    Rng r(0);
    auto wrong_shape = init_model<double>(cfg, r);
    CHECK_THROWS_AS(io::from_weight_file(f, wrong_shape), io::FormatError);
    auto wrong_dtype = init_model<float>(rc.model, r);
    CHECK_THROWS_AS(io::from_weight_file(f, wrong_dtype), io::FormatError);
    io::WeightFile extra = f;
    extra.add("stray", Tensor<double>::zeros(Shape{1}));
    CHECK_THROWS_AS(io::from_weight_file(extra, w2), io::FormatError);
    io::WeightFile missing = f;
    missing.entries.pop_back();
    CHECK_THROWS_AS(io::from_weight_file(missing, w2), io::FormatError);
  }
}

TEST_CASE("configs") {
  const auto rc = io::parse_config(R"({"variant": "M2", "dtype": "f64", "seed": 5})");
  CHECK(rc.model.channels == ModelConfig::preset("M2").channels);
  CHECK(rc.dtype == DType::f64);
  CHECK(rc.seed == 5);
  const auto again = io::parse_config(io::dump_config(rc));
  CHECK(again.model.channels == rc.model.channels);
  CHECK(again.model.states == rc.model.states);
  CHECK(again.seed == 5);
  CHECK_THROWS_AS(io::parse_config(R"({"variant": "M1", "colour": 1})"), io::ConfigError);
  CHECK_THROWS_AS(io::parse_config(R"({"channels": [8, 12]})"), io::ConfigError);
  CHECK_THROWS_AS(io::parse_config(R"({"height": 30})"), io::ConfigError);
  CHECK_THROWS_AS(io::parse_config("{"), io::ConfigError);
  CHECK_THROWS_AS(io::resolve_model("M9"), std::invalid_argument);
}

TEST_CASE("cli exit codes") {
  CHECK(run_cli({}).code == cli::kUsage);
  CHECK(run_cli({"--help"}).code == cli::kOk);
  CHECK(run_cli({"frobnicate"}).code == cli::kUsage);
  CHECK(run_cli({"verify", "--suite", ""}).code == cli::kUsage);
  CHECK(run_cli({"verify", "--suite", "prop2"}).code == cli::kUsage);
  CHECK(run_cli({"verify", "--suite", "prop1", "--seed", "x"}).code == cli::kUsage);
  CHECK(run_cli({"bench", "--sweep", "K"}).code == cli::kUsage);
  CHECK(run_cli({"bench", "--values", "16,8", "--L", "8", "--N", "2", "--D", "4"}).code == cli::kUsage);
  CHECK(run_cli({"train-toy", "--msf", "maybe"}).code == cli::kUsage);
  CHECK(run_cli({"report", "--model", "M7"}).code == cli::kUsage);

  const auto v = run_cli({"verify", "--suite", "prop1", "--seed", "2"});
  CHECK(v.code == cli::kOk);
  CHECK(v.out.rfind("PASS hidden_state_mixing_equals_token_mixing", 0) == 0);
}

TEST_CASE("cli report") {
  const auto r = run_cli({"report", "--model", "M1"});
  REQUIRE(r.code == cli::kOk);
  CHECK(r.out.find("params≈6.7M, macs≈236M") != std::string::npos);
  const auto dir = scratch_dir();
  spit(dir / "tiny.json", kTinyConfig);
  const auto t = run_cli({"report", "--model", (dir / "tiny.json").string(), "--out", (dir / "r.csv").string()});
  CHECK(t.code == cli::kOk);
  CHECK(slurp(dir / "r.csv").rfind("section,name,params,macs,peak_bytes\n", 0) == 0);
  spit(dir / "bad.json", R"({"variant": "M1", "depth": 3})");
  CHECK(run_cli({"report", "--model", (dir / "bad.json").string()}).code == cli::kUsage);
  fs::remove_all(dir);
}

TEST_CASE("cli train-toy") {
  const auto dir = scratch_dir();
  const auto csv = (dir / "curve.csv").string();
  const auto r = run_cli({"train-toy", "--steps", "4", "--lr", "0", "--out", csv});
  REQUIRE(r.code == cli::kOk);
  std::istringstream is(slurp(csv));
  std::string line;
  std::getline(is, line);
  CHECK(line == "step,loss,accuracy");
  std::string first_loss;
  int rows = 0;
  while (std::getline(is, line)) {
    const auto a = line.find(','), b = line.find(',', a + 1);
    const std::string loss = line.substr(a + 1, b - a - 1);
    if (rows == 0) first_loss = loss;
    CHECK(loss == first_loss);
    CHECK(line.rfind(std::to_string(rows) + ",", 0) == 0);
    ++rows;
  }
  CHECK(rows == 4);

  const auto d = run_cli({"train-toy", "--steps", "5", "--lr", "1e12"});
  CHECK(d.code == cli::kPropertyFailure);
  CHECK(d.out.find("diverged at step") != std::string::npos);
  fs::remove_all(dir);
}

TEST_CASE("cli init and infer") {
  const auto dir = scratch_dir();
  const auto cfg = (dir / "tiny.json").string(), w = (dir / "w.evim").string(), x = (dir / "x.evim").string(),
             y = (dir / "y.evim").string();
  spit(cfg, kTinyConfig);
  const auto rc = io::parse_config(kTinyConfig);

  SUBCASE("zero input through bias-only weights yields the fused biases") {
    Rng rng(5);
    auto wt = init_model<float>(rc.model, rng);
    // Every parameter zero except the classifier biases and the fusion logits.
    for_each_param(wt, [&](const std::string& name, Tensor<float>& t) {
      const bool keep = name == "head.beta" || (name.rfind("head.", 0) == 0 && name.size() > 5 &&
                                                name.substr(name.size() - 5) == ".bias");
      if (keep)
        t = rng.normal_tensor<float>(t.shape());
      else
        t = Tensor<float>::zeros(t.shape());
    });
    io::save(w, io::to_weight_file(wt));
    io::WeightFile in;
    in.add("input", Tensor<float>::zeros(Shape{32, 32, 3}));
    io::save(x, in);

    const auto r = run_cli({"infer", "--model", cfg, "--weights", w, "--input", x, "--out", y});
    REQUIRE(r.code == cli::kOk);
    const auto out = io::load(y);
    REQUIRE(out.find("logits") != nullptr);
    const auto& logits = std::get<Tensor<float>>(out.find("logits")->value);
    REQUIRE(logits.size() == 3);

    // softmax(β)-weighted sum of the four classifier biases.
    const auto& beta = wt.head.beta;
    double m = -1e300, z = 0.0;
    for (std::size_t k = 0; k < 4; ++k) m = std::max(m, double(beta[k]));
    for (std::size_t k = 0; k < 4; ++k) z += std::exp(double(beta[k]) - m);
    for (std::size_t c = 0; c < 3; ++c) {
      double expect = 0.0;
      for (std::size_t k = 0; k < 4; ++k)
        expect += std::exp(double(beta[k]) - m) / z * double(wt.head.heads[k].bias[c]);
      CHECK(double(logits[c]) == doctest::Approx(expect).epsilon(1e-6));
    }
  }

  SUBCASE("init output feeds infer; corrupt weights exit 3") {
    REQUIRE(run_cli({"init", "--model", cfg, "--seed", "1", "--out", w}).code == cli::kOk);
    io::WeightFile in;
    Rng rng(2);
    in.add("input", rng.normal_tensor<float>({2, 32, 32, 3}));
    io::save(x, in);
    const auto a = run_cli({"infer", "--model", cfg, "--weights", w, "--input", x});
    REQUIRE(a.code == cli::kOk);
    CHECK(std::count(a.out.begin(), a.out.end(), '\n') == 2);
    CHECK(run_cli({"infer", "--model", cfg, "--weights", w, "--input", x}).out == a.out);

    // Preset M1 expects different shapes.
    CHECK(run_cli({"infer", "--model", "M1", "--weights", w, "--input", x}).code == cli::kCorruptInput);
    const std::string bytes = slurp(w);
    spit(w, bytes.substr(0, bytes.size() / 2));
    const auto c = run_cli({"infer", "--model", cfg, "--weights", w, "--input", x});
    CHECK(c.code == cli::kCorruptInput);
    CHECK(c.err.find("at byte ") != std::string::npos);
    spit(w, "NOPE" + bytes.substr(4));
    CHECK(run_cli({"infer", "--model", cfg, "--weights", w, "--input", x}).err.find("at byte 0") !=
          std::string::npos);
  }
  fs::remove_all(dir);
}

#ifdef EVIM_BINARY
TEST_CASE("repeated binary runs are byte-identical") {
  const auto dir = scratch_dir();
  auto sh = [&](const std::string& args, const std::string& tag) {
    const std::string cmd = std::string(EVIM_BINARY) + " " + args + " > " + (dir / (tag + ".out")).string() + " 2>&1";
    return std::system(cmd.c_str());
  };
  for (const char* run : {"a", "b"}) {
    const std::string r = run;
    CHECK(sh("init --model M1 --seed 7 --out " + (dir / ("w" + r)).string(), "init" + r) == 0);
    CHECK(sh("train-toy --steps 3 --seed 4 --out " + (dir / ("t" + r + ".csv")).string(), "train" + r) == 0);
    CHECK(sh("verify --suite prop1", "verify" + r) == 0);
    CHECK(sh("report --model M2 --out " + (dir / ("r" + r + ".csv")).string(), "report" + r) == 0);
  }
  for (const char* f : {"wa", "ta.csv", "verifya.out", "ra.csv", "reporta.out", "traina.out"}) {
    std::string other = f;
    other[other.rfind('a')] = 'b';
    INFO(f);
    const auto x = slurp(dir / f);
    CHECK(!x.empty());
    CHECK(x == slurp(dir / other));
  }
  CHECK(std::system((std::string(EVIM_BINARY) + " verify --suite nope > /dev/null 2>&1").c_str()) != 0);
  fs::remove_all(dir);
}
#endif
