#include <stdlib.h>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include "doctest.h"
#include "leafgrad/checkpoint.hpp"
#include "leafgrad/cli.hpp"
#include "leafgrad/dataset.hpp"
#include "leafgrad/image_io.hpp"
#include "leafgrad/io_util.hpp"
#include "leafgrad/run_config.hpp"
#include "leafgrad/synthetic.hpp"
#include "test_support.hpp"

using namespace leafgrad;
using leafgrad::testing::random_tensor;
using leafgrad::testing::TempDir;
namespace fs = std::filesystem;

namespace {

const std::vector<std::string> kClasses{"bacterial", "dried", "fungal", "healthy"};

// Independent largest-remainder rounding: floors first, then one extra item
// per split in order of decreasing remainder, earlier split on ties.
std::array<std::size_t, 3> lr_oracle(std::size_t n, const SplitRatios& r) {
  const double share[3] = {r.train * static_cast<double>(n), r.val * static_cast<double>(n),
                           r.test * static_cast<double>(n)};
  std::array<std::size_t, 3> out{};
  std::size_t used = 0;
  for (int i = 0; i < 3; ++i) {
    out[i] = static_cast<std::size_t>(std::floor(share[i] + 1e-9));
    used += out[i];
  }
  std::vector<int> order{0, 1, 2};
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
    return share[a] - static_cast<double>(out[a]) > share[b] - static_cast<double>(out[b]) + 1e-12;
  });
  for (std::size_t k = 0; used < n; ++k, ++used) ++out[order[k % 3]];
  return out;
}

std::string read_text(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

struct CliResult {
  int code;
  std::string out, err;
};

CliResult run_cli(std::vector<std::string> args) {
  std::ostringstream out, err;
  const int code = cli::run(args, out, err);
  return {code, out.str(), err.str()};
}

// Small models and short runs so the CLI tests stay fast.
void write_small_config(const fs::path& path) {
  std::ofstream f(path);
  f << "# tiny run\n"
       "image_height = 16\nimage_width = 16\n"
       "model.stages = 4\nmodel.dense_width = 8\nmodel.se_ratio = 2\n"
       "unet.depth = 1\nunet.base_filters = 4\nunet.se_ratio = 2\n"
       "train.epochs = 3\ntrain.batch_size = 8\n";
}

std::string line_with(const std::string& text, const std::string& prefix) {
  std::istringstream in(text);
  for (std::string line; std::getline(in, line);)
    if (line.rfind(prefix, 0) == 0) return line;
  return {};
}

}  // namespace

TEST_CASE("largest remainder and stratified allocation") {
  const SplitRatios def;
  CHECK(largest_remainder(1000, def) == std::array<std::size_t, 3>{700, 150, 150});
  CHECK(largest_remainder(8, SplitRatios{0.5, 0.25, 0.25}) == std::array<std::size_t, 3>{4, 2, 2});
  Rng rng(1);
  for (int trial = 0; trial < 500; ++trial) {
    const std::size_t n = rng.below(300);
    const double a = rng.uniform(0.1, 0.8), b = rng.uniform(0.05, 1 - a - 0.05);
    const SplitRatios r{a, b, 1 - a - b};
    REQUIRE(largest_remainder(n, r) == lr_oracle(n, r));
  }

  const auto alloc = stratified_allocation({250, 250, 250, 250}, def);
  std::array<std::size_t, 3> totals{};
  for (const auto& c : alloc) {
    CHECK(c[0] == 175);
    CHECK(c[1] >= 37);
    CHECK(c[1] <= 38);
    CHECK(c[2] >= 37);
    CHECK(c[2] <= 38);
    CHECK(c[0] + c[1] + c[2] == 250);
    for (int s = 0; s < 3; ++s) totals[s] += c[s];
  }
  CHECK(totals == std::array<std::size_t, 3>{700, 150, 150});

  for (int trial = 0; trial < 300; ++trial) {
    std::vector<std::size_t> counts(1 + rng.below(6));
    std::size_t total = 0;
    for (auto& c : counts) total += c = rng.below(60);
    const auto al = stratified_allocation(counts, def);
    std::array<std::size_t, 3> sums{};
    for (std::size_t k = 0; k < counts.size(); ++k) {
      REQUIRE(al[k][0] + al[k][1] + al[k][2] == counts[k]);
      const double shares[3] = {def.train, def.val, def.test};
      for (int s = 0; s < 3; ++s) {
        REQUIRE(std::abs(static_cast<double>(al[k][s]) - shares[s] * static_cast<double>(counts[k])) < 2.0);
        sums[s] += al[k][s];
      }
    }
    REQUIRE(sums == largest_remainder(total, def));
  }
  CHECK_THROWS_AS(SplitRatios({0.5, 0.5, 0.5}).validate(), Error);
  CHECK_THROWS_AS(SplitRatios({-0.1, 0.6, 0.5}).validate(), Error);
}

TEST_CASE("dataset loading") {
  TempDir dir("dataset");
  write_synthetic_classification(dir.path(), kClasses, 2, 8, 3);
  const SplitRatios quarter{0.5, 0.25, 0.25};
  const auto m = load_dataset(dir.path(), Task::classify, 11, quarter, kClasses);
  CHECK(m.entries.size() == 8);
  CHECK(m.split(SplitName::train).size() == 4);
  CHECK(m.split(SplitName::val).size() == 2);
  CHECK(m.split(SplitName::test).size() == 2);
  for (const auto& c : m.class_split_counts()) CHECK(c[0] >= 1);
  CHECK(fs::exists(dir / kManifestName));

  std::set<fs::path> seen;
  for (auto which : {SplitName::train, SplitName::val, SplitName::test})
    for (const auto* e : m.split(which)) CHECK(seen.insert(e->image).second);
  CHECK(seen.size() == 8);

  const auto again = load_dataset(dir.path(), Task::classify, 11, quarter, kClasses, false);
  CHECK(again.to_csv() == m.to_csv());
  CHECK(read_text(dir / kManifestName) == m.to_csv());
  bool differs = false;
  for (std::uint64_t seed = 12; seed < 20 && !differs; ++seed)
    differs = load_dataset(dir.path(), Task::classify, seed, quarter, kClasses, false).to_csv() != m.to_csv();
  CHECK(differs);

  const auto data = materialize<float>(m, parse_pipeline("resize,mpn", {8, 8}), 3);
  CHECK(data.train.images.shape() == Shape{4, 3, 8, 8});
  CHECK(data.test.labels.size() == 2);
  for (float v : data.train.images.data()) {
    CHECK(v >= -0.7615942f);
    CHECK(v <= 0.7615942f);
  }

  CHECK_THROWS_AS(load_dataset(dir.path(), Task::classify, 1, quarter, {"bacterial", "missing"}, false), Error);
  CHECK_THROWS_AS(load_dataset(dir / "nowhere", Task::classify, 1, quarter, kClasses, false), Error);
  CHECK_THROWS_AS(load_dataset(dir.path(), Task::classify, 1, SplitRatios{0.9, 0.2, 0.1}, kClasses, false), Error);

  TempDir seg("segdata");
  write_synthetic_segmentation(seg.path(), 6, 8, 4);
  const auto sm = load_dataset(seg.path(), Task::segment, 1, quarter, {}, false);
  CHECK(sm.entries.size() == 6);
  const auto sd = materialize<float>(sm, parse_pipeline("resize", {8, 8}), 3);
  for (float v : sd.train.masks.data()) CHECK((v == 0.0f || v == 1.0f));
  fs::remove(seg / "masks" / "0002.pgm");
  CHECK_THROWS_AS(load_dataset(seg.path(), Task::segment, 1, quarter, {}, false), Error);
}

TEST_CASE("checkpoint roundtrip") {
  Rng rng(2);
  SEConvNetConfig cfg;
  cfg.height = cfg.width = 16;
  cfg.stages = {4, 6};
  cfg.dense_width = 8;
  cfg.se_ratio = 2;
  auto model = build_se_convnet<float>(cfg, rng);
  model->class_names = kClasses;
  for (auto& [name, state] : model->batchnorms()) {
    state->updates = 3;
    for (auto& v : state->running_mean.data()) v = static_cast<float>(rng.uniform(-1, 1));
    for (auto& v : state->running_var.data()) v = static_cast<float>(rng.uniform(0.5, 2));
  }
  const CheckpointMeta meta{{"seed", "42"}, {"pipeline", "resize,mpn"}};
  TempDir dir("ckpt");
  save_checkpoint(*model, dir / "a.lgc1", meta);
  const auto loaded = load_checkpoint<float>(dir / "a.lgc1");
  CHECK(loaded.meta == meta);
  CHECK(loaded.model->config_text() == model->config_text());
  CHECK(loaded.model->class_names == kClasses);

  const auto batch = random_tensor({3, 3, 16, 16}, rng, 0, 1);
  const auto x = testing::cast_tensor<float>(batch);
  Rng r1(0), r2(0);
  const auto y1 = model->forward(x, Mode::eval, r1);
  const auto y2 = loaded.model->forward(x, Mode::eval, r2);
  for (std::size_t i = 0; i < y1.numel(); ++i) CHECK(y1[i] == y2[i]);

  save_checkpoint(*loaded.model, dir / "b.lgc1", meta);
  const auto bytes = read_file_bytes(dir / "a.lgc1");
  CHECK(bytes == read_file_bytes(dir / "b.lgc1"));

  Rng ru(3);
  UNetConfig u;
  u.height = u.width = 16;
  u.depth = 2;
  u.base_filters = 2;
  u.se_ratio = 2;
  auto unet = build_unet<float>(u, ru);
  const auto ub = encode_checkpoint(*unet);
  const auto back = decode_checkpoint<float>(ub);
  CHECK(encode_checkpoint(*back.model) == ub);

  auto corrupt = [&](auto edit) {
    auto b = bytes;
    edit(b);
    return b;
  };
  CHECK_THROWS_AS(decode_checkpoint<float>(corrupt([](auto& b) { b[0] = 'X'; })), Error);
  CHECK_THROWS_AS(decode_checkpoint<float>(corrupt([](auto& b) { b[4] = 9; })), Error);
  CHECK_THROWS_AS(decode_checkpoint<float>(corrupt([](auto& b) { b[15] = 0x7f; })), Error);
  CHECK_THROWS_AS(decode_checkpoint<float>(corrupt([](auto& b) { b.resize(b.size() / 2); })), Error);
  CHECK_THROWS_AS(decode_checkpoint<float>(corrupt([](auto& b) { b.push_back(0); })), Error);
  CHECK_THROWS_AS(decode_checkpoint<float>(corrupt([](auto& b) { b.resize(3); })), Error);
  CHECK_THROWS_AS(decode_checkpoint<float>(std::vector<std::uint8_t>{}), Error);
  // Config text starts at byte 16; breaking a key makes it unparseable.
  CHECK_THROWS_AS(decode_checkpoint<float>(corrupt([](auto& b) { b[16] = '#'; })), Error);
  try {
    decode_checkpoint<float>(corrupt([](auto& b) { b[0] = 'X'; }));
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::format);
  }
  CHECK_THROWS_AS(load_checkpoint<float>(dir / "missing.lgc1"), Error);
  CHECK_THROWS_AS(save_checkpoint(*model, dir / "c.lgc1", {{"bad", "two\nlines"}}), Error);
}

TEST_CASE("run configuration") {
  RunConfig cfg;
  CHECK(cfg.get("seed") == "42");
  CHECK(cfg.get_int("train.plateau_patience") == 15);
  CHECK_THROWS_AS(cfg.set("no.such.key", "1"), Error);
  CHECK_THROWS_AS(cfg.set("seed", "abc"), Error);
  CHECK_THROWS_AS(cfg.set("train.plateau", "maybe"), Error);
  CHECK_THROWS_AS(cfg.set_assignment("seed"), Error);
  CHECK_THROWS_AS(cfg.merge_text("seed = 1\nbogus = 2\n", "inline"), Error);

  RunConfig a, b;
  a.set("seed", "7");
  a.set("train.epochs", "5");
  b.set("train.epochs", "5");
  b.set("seed", "7");
  CHECK(a.hash() == b.hash());
  CHECK(a.canonical_text() == b.canonical_text());
  b.set("seed", "8");
  CHECK(a.hash() != b.hash());
  CHECK(a.provenance() == "leafgrad config_hash=" + a.hash_hex());
  CHECK(a.hash_hex().size() == 16);

  RunConfig c;
  c.merge_text("# comment\n\nimage_height = 32\nimage_width=48\nmodel.stages = 8, 16\n", "text");
  CHECK(c.convnet_config().height == 32);
  CHECK(c.convnet_config().width == 48);
  CHECK(c.convnet_config().stages == std::vector<std::size_t>{8, 16});
  CHECK(c.pipeline().name() == "resize+mpn");
  CHECK(c.train_config(Task::segment).lr == 1e-4);
  CHECK(c.train_config(Task::classify).lr == 1e-3);

  ::setenv("LEAFGRAD_SEED", "99", 1);
  RunConfig env;
  env.merge_env();
  CHECK(env.seed() == 99);
  ::setenv("LEAFGRAD_SEED", "x", 1);
  CHECK_THROWS_AS(env.merge_env(), Error);
  ::unsetenv("LEAFGRAD_SEED");
}

TEST_CASE("cli precedence") {
  TempDir dir("precedence");
  ImageU8 img(4, 4, 3, 127);
  write_pnm(dir / "in.ppm", img);
  {
    std::ofstream f(dir / "cfg.txt");
    f << "seed = 5\nimage_height = 4\nimage_width = 4\n";
  }
  auto seed_after = [&](std::vector<std::string> extra) {
    std::vector<std::string> args{"preprocess", "--input", (dir / "in.ppm").string(), "--output", (dir / "o").string(),
                                  "--config", (dir / "cfg.txt").string()};
    args.insert(args.end(), extra.begin(), extra.end());
    const auto r = run_cli(args);
    REQUIRE(r.code == 0);
    return line_with(read_text(dir / "o" / "run_config.txt"), "seed = ");
  };
  CHECK(seed_after({}) == "seed = 5");
  ::setenv("LEAFGRAD_SEED", "6", 1);
  CHECK(seed_after({}) == "seed = 6");
  CHECK(seed_after({"--seed", "7"}) == "seed = 7");
  CHECK(seed_after({"--seed", "7", "--set", "seed=8"}) == "seed = 8");
  ::unsetenv("LEAFGRAD_SEED");
  // Subcommand flags override --set.
  run_cli({"preprocess", "--input", (dir / "in.ppm").string(), "--output", (dir / "o").string(), "--config",
           (dir / "cfg.txt").string(), "--set", "pipeline=resize,clahe,mpn", "--pipeline", "resize"});
  CHECK(line_with(read_text(dir / "o" / "run_config.txt"), "pipeline = ") == "pipeline = resize");
  CHECK(read_text(dir / "o" / "run_config.txt").rfind("# leafgrad config_hash=", 0) == 0);
}

TEST_CASE("cli preprocess") {
  TempDir dir("pre");
  write_pnm(dir / "gray.ppm", ImageU8(8, 8, 3, 127));
  const auto r = run_cli({"preprocess", "--input", (dir / "gray.ppm").string(), "--output", (dir / "out").string(),
                          "--pipeline", "resize,mpn", "--set", "image_height=4", "--set", "image_width=4"});
  REQUIRE(r.code == 0);
  const ImageF f = read_lgf1(dir / "out" / "gray.lgf1");
  CHECK(f.height == 4);
  CHECK(f.width == 4);
  CHECK(f.channels == 3);
  const double expect = std::tanh(127.0 / 127.5 - 1.0);
  CHECK(std::abs(expect - (-0.0039215485)) < 1e-9);
  for (float v : f.values) CHECK(std::abs(v - expect) < 1e-6);

  const auto p = run_cli({"preprocess", "--input", dir.path().string(), "--output", (dir / "pnm").string(),
                          "--format", "pnm", "--set", "image_height=4", "--set", "image_width=4"});
  REQUIRE(p.code == 0);
  const auto preview = read_pnm(dir / "pnm" / "gray.ppm");
  CHECK(preview.height == 4);
  CHECK(read_text(dir / "pnm" / "gray.ppm").find("config_hash=") != std::string::npos);
}

TEST_CASE("cli exit codes") {
  CHECK(run_cli({}).code == 2);
  const auto bad = run_cli({"frobnicate"});
  CHECK(bad.code == 2);
  CHECK(bad.err.find("usage error") != std::string::npos);
  CHECK(run_cli({"train-classify", "--out", "x"}).code == 2);
  CHECK(run_cli({"--help"}).code == 0);
  const auto missing = run_cli({"info", "--checkpoint", "/nonexistent/model.lgc1"});
  CHECK(missing.code == 1);
  CHECK(missing.err.rfind("leafgrad: error: io: ", 0) == 0);
  CHECK(run_cli({"info", "--set", "nope=1"}).code == 1);
  const auto info = run_cli({"info"});
  CHECK(info.code == 0);
  CHECK(info.out.find("float32_megabytes 26.08") != std::string::npos);
}

TEST_CASE("cli training is reproducible and consistent with ablation") {
  TempDir dir("cli_train");
  write_small_config(dir / "cfg.txt");
  const std::string cfg = (dir / "cfg.txt").string();
  REQUIRE(run_cli({"synth", "--out", (dir / "data").string(), "--count", "6", "--size", "16", "--seed", "3"}).code == 0);

  std::string reports[2];
  for (int i = 0; i < 2; ++i) {
    const fs::path out = dir / ("run" + std::to_string(i));
    const auto r = run_cli({"train-classify", "--config", cfg, "--data", (dir / "data").string(), "--out", out.string(),
                            "--seed", "7", "--quiet"});
    REQUIRE(r.code == 0);
    reports[i] = read_text(out / "report.csv");
    for (const char* f : {"best.lgc1", "final.lgc1", "run_config.txt", "test_metrics.csv", "confusion.csv"})
      CHECK(fs::exists(out / f));
  }
  CHECK(reports[0] == reports[1]);
  const std::string hash_line = line_with(read_text(dir / "run0" / "run_config.txt"), "# leafgrad config_hash=");
  REQUIRE_FALSE(hash_line.empty());
  CHECK(reports[0].rfind(hash_line.substr(2) + "\n", 2) == 2);
  CHECK(read_text(dir / "run0" / "test_metrics.csv").find(hash_line.substr(2)) != std::string::npos);
  const auto ck = load_checkpoint<float>(dir / "run0" / "final.lgc1");
  CHECK(hash_line.find(ck.meta.at("run_config_hash")) != std::string::npos);
  CHECK(ck.meta.at("seed") == "7");

  const auto ev = run_cli({"evaluate", "--checkpoint", (dir / "run0" / "final.lgc1").string(), "--data",
                           (dir / "data").string(), "--out", (dir / "eval").string()});
  REQUIRE(ev.code == 0);
  // Same split, same weights: evaluation reproduces the training run's test confusion.
  auto body = [](const std::string& text) { return text.substr(text.find('\n') + 1); };
  CHECK(body(read_text(dir / "eval" / "confusion.csv")) == body(read_text(dir / "run0" / "confusion.csv")));

  const auto ex = run_cli({"explain", "--checkpoint", (dir / "run0" / "final.lgc1").string(), "--image",
                           (dir / "data" / "dried" / "leaf_0000.ppm").string(), "--out", (dir / "cam").string()});
  CHECK(ex.code == 0);
  for (const char* f : {"leaf_0000_heatmap.pgm", "leaf_0000_overlay.ppm", "leaf_0000_gradcam.csv"})
    CHECK(fs::exists(dir / "cam" / f));

  // Ablation cells use the same seed schedule as single training runs.
  const auto ab = run_cli({"ablate", "--config", cfg, "--data", (dir / "data").string(), "--out",
                           (dir / "ablate").string(), "--seed", "7", "--pipelines", "resized,mpn", "--models",
                           "cnn,se_convnet"});
  REQUIRE(ab.code == 0);
  const std::string table = read_text(dir / "ablate" / "ablation_table.csv");
  CHECK(table.find("model,resized,mpn,size_mb\n") != std::string::npos);
  const std::string cells = read_text(dir / "ablate" / "ablation_cells.csv");
  const auto single = run_cli({"train-classify", "--config", cfg, "--data", (dir / "data").string(), "--out",
                               (dir / "single").string(), "--seed", "7", "--quiet", "--set", "model.se=0"});
  REQUIRE(single.code == 0);
  auto fields_of = [](const std::string& line) {
    std::vector<std::string> out;
    std::istringstream row(line);
    for (std::string f; std::getline(row, f, ',');) out.push_back(f);
    return out;
  };
  const auto acc = fields_of(line_with(read_text(dir / "single" / "test_metrics.csv"), "accuracy,"));
  const auto cell = fields_of(line_with(cells, "mpn,cnn,"));
  REQUIRE(acc.size() >= 4);
  REQUIRE(cell.size() == 14);
  CHECK(cell[10] == acc[3]);
}
