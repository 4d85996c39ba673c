#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>

#include "bml/dataset.hpp"
#include "bml/pipeline.hpp"
#include "bml/tensor_io.hpp"
#include "cli.hpp"
#include "doctest.h"

using namespace bml;
namespace fs = std::filesystem;

namespace {

struct Result {
  int code;
  std::string out;
  std::string err;
};

Result cli(std::vector<std::string> args) {
  args.insert(args.begin(), "bmlgest");
  std::ostringstream out, err;
  const int code = bmlgest::run(args, out, err);
  return {code, out.str(), err.str()};
}

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("bml_test_cli_" + name);
  fs::remove_all(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

std::map<std::string, std::string> tree(const fs::path& dir) {
  std::map<std::string, std::string> files;
  for (const auto& e : fs::recursive_directory_iterator(dir))
    if (e.is_regular_file()) files[fs::relative(e.path(), dir).string()] = slurp(e.path());
  return files;
}

// Settings that keep every command well under a second. They go first so a
// test can override any of them.
const std::vector<std::string> kSmall = {
    "--set", "synth.min_length=20", "--set", "synth.max_length=30", "--set", "rnn.hidden=8",
    "--set", "rnn.epochs=2",        "--set", "image.size=16",       "--set", "image.blob=4",
    "--set", "cnn.epochs=1",        "--set", "source.images=40",    "--set", "finetune.epochs=1"};

Result small(std::vector<std::string> args) {
  args.insert(args.begin(), kSmall.begin(), kSmall.end());
  return cli(std::move(args));
}

std::size_t count_files(const fs::path& dir, const std::string& ext) {
  std::size_t n = 0;
  for (const auto& e : fs::directory_iterator(dir)) n += e.path().extension() == ext;
  return n;
}

}  // namespace

TEST_CASE("usage errors exit with code 2") {
  CHECK(cli({}).code == bmlgest::usage);
  CHECK(cli({"frobnicate"}).code == bmlgest::usage);
  CHECK(cli({"synth", "--no-such-flag"}).code == bmlgest::usage);
  CHECK(cli({"--config", "/nonexistent/run.cfg", "synth"}).code == bmlgest::usage);
  CHECK(cli({"--set", "no.such.key=1", "synth", "--out", scratch("bad_key").string()}).code == bmlgest::usage);
  CHECK(cli({"--set", "seed", "synth"}).code == bmlgest::usage);
  CHECK(cli({"synth", "--kind", "audio"}).code == bmlgest::usage);

  const auto help = cli({"--help"});
  CHECK(help.code == bmlgest::ok);
  CHECK(help.out.find("train-rnn") != std::string::npos);
}

TEST_CASE("synth writes datasets with a config record") {
  const auto dir = scratch("synth");
  const auto r = small({"--out", dir.string(), "--seed", "3", "synth", "--kind", "features", "--count", "3"});
  REQUIRE(r.code == bmlgest::ok);
  CHECK(r.out.find("wrote 3 trials") != std::string::npos);
  CHECK(read_manifest(dir).trials.size() == 3);
  const auto config = slurp(dir / "config.txt");
  CHECK(config.rfind("# bmlgest synth --kind features", 0) == 0);
  CHECK(config.find("seed = 3\n") != std::string::npos);
  CHECK(config.find("rnn.hidden = 8\n") != std::string::npos);

  SUBCASE("same seed, same bytes") {
    const auto again = scratch("synth_again");
    REQUIRE(small({"--out", again.string(), "--seed", "3", "synth", "--kind", "features", "--count", "3"}).code == 0);
    CHECK(tree(dir) == tree(again));
    const auto other = scratch("synth_other");
    REQUIRE(small({"--out", other.string(), "--seed", "4", "synth", "--kind", "features", "--count", "3"}).code == 0);
    CHECK(slurp(dir / "synth_000.features") != slurp(other / "synth_000.features"));
  }
  SUBCASE("a config file is applied and --set wins over it") {
    const auto cfg_dir = scratch("synth_cfg");
    fs::create_directories(cfg_dir);
    std::ofstream(cfg_dir / "run.cfg") << "# test\nsynth.trials = 2\nsynth.feature_dim = 12\n";
    const auto out = cfg_dir / "data";
    REQUIRE(small({"--config", (cfg_dir / "run.cfg").string(), "--set", "synth.feature_dim=13", "--out",
                   out.string(), "synth", "--kind", "features"})
                .code == 0);
    const auto trials = load_feature_dataset(out);
    REQUIRE(trials.size() == 2);
    CHECK(trials[0].features.cols() == 13);
  }
  SUBCASE("zero trials is an empty dataset, and training on it is a data error") {
    const auto empty = scratch("synth_empty");
    REQUIRE(small({"--out", empty.string(), "synth", "--kind", "features", "--count", "0"}).code == 0);
    CHECK(read_manifest(empty).trials.empty());
    const auto t = small({"--out", scratch("train_empty").string(), "train-rnn", "--data", empty.string()});
    CHECK(t.code == bmlgest::data_error);
    CHECK_FALSE(t.err.empty());
  }
}

TEST_CASE("train-rnn, eval and ribbon on a features dataset") {
  const auto data = scratch("features");
  REQUIRE(small({"--out", data.string(), "synth", "--kind", "features", "--count", "3"}).code == 0);

  SUBCASE("zero epochs leaves the initial model") {
    const auto out = scratch("rnn_zero");
    REQUIRE(small({"--out", out.string(), "--set", "rnn.epochs=0", "train-rnn", "--data", data.string()}).code == 0);
    RunConfig cfg;
    cfg.set("rnn.hidden", "8");
    auto rng = stream_rng(cfg, Stream::rnn_init);
    const auto init = BmlIndRnnModel::random(cfg.rnn_config(cfg.task.feature_dim), rng);
    save_checkpoint(out / "expected.ckpt", init.to_checkpoint());
    CHECK(slurp(out / "rnn.ckpt") == slurp(out / "expected.ckpt"));
  }

  const auto model_dir = scratch("rnn");
  REQUIRE(small({"--out", model_dir.string(), "train-rnn", "--data", data.string()}).code == 0);
  CHECK(fs::exists(model_dir / "rnn_log.csv"));
  CHECK(fs::exists(model_dir / "config.txt"));

  const auto eval_dir = scratch("eval");
  const auto ev = small({"--out", eval_dir.string(), "eval", "--data", data.string(), "--model",
                         (model_dir / "rnn.ckpt").string()});
  REQUIRE(ev.code == bmlgest::ok);
  CHECK(count_files(eval_dir / "ribbons", ".svg") == 3);
  CHECK(count_files(eval_dir / "predictions", ".txt") == 3);
  CHECK(fs::exists(eval_dir / "per_trial.csv"));
  CHECK(fs::exists(eval_dir / "confusion.csv"));

  SUBCASE("saved predictions score the same as the model") {
    const auto again = scratch("eval_pred");
    REQUIRE(small({"--out", again.string(), "eval", "--data", data.string(), "--predictions",
                   (eval_dir / "predictions").string()})
                .code == 0);
    CHECK(slurp(again / "report.txt") == slurp(eval_dir / "report.txt"));
  }
  SUBCASE("ground truth scored against itself is perfect") {
    const auto self = scratch("eval_self");
    const auto r = small({"--out", self.string(), "eval", "--data", data.string(), "--predictions", data.string()});
    REQUIRE(r.code == bmlgest::ok);
    CHECK(r.out.find("micro 100.00%") != std::string::npos);
  }
  SUBCASE("eval argument errors") {
    CHECK(small({"--out", scratch("e1").string(), "eval", "--data", data.string()}).code == bmlgest::usage);
    CHECK(small({"--out", scratch("e2").string(), "eval", "--data", data.string(), "--model",
                 (data / "missing.ckpt").string()})
              .code == bmlgest::data_error);
  }
  SUBCASE("ribbon from transcripts") {
    const auto rb = scratch("ribbon");
    const auto r = small({"--out", rb.string(), "ribbon", "--truth", (data / "synth_000.txt").string(), "--pred",
                          (eval_dir / "predictions" / "synth_000.txt").string(), "--stride", "5"});
    REQUIRE(r.code == bmlgest::ok);
    CHECK(slurp(rb / "ribbon.svg").rfind("<?xml", 0) == 0);
    CHECK(small({"--out", rb.string(), "ribbon", "--truth", (data / "nope.txt").string(), "--pred",
                 (data / "synth_000.txt").string()})
              .code == bmlgest::data_error);
  }
  SUBCASE("leave-one-trial-out") {
    const auto loto = scratch("loto");
    const auto r = small({"--out", loto.string(), "train-rnn", "--data", data.string(), "--loto"});
    REQUIRE(r.code == bmlgest::ok);
    CHECK(r.out.find("over 3 trials") != std::string::npos);
    CHECK(fs::exists(loto / "folds.csv"));
  }
}

TEST_CASE("a diverging run exits with code 4") {
  const auto data = scratch("diverge_data");
  REQUIRE(small({"--out", data.string(), "synth", "--kind", "features", "--count", "2"}).code == 0);
  const auto r = small({"--out", scratch("diverge").string(), "--set", "rnn.lr0=1e300", "--set", "rnn.u_max=1",
                        "train-rnn", "--data", data.string()});
  CHECK(r.code == bmlgest::divergence);
  CHECK(r.err.find("diverge") != std::string::npos);
}

TEST_CASE("frame datasets: CNN stages and Grad-CAM") {
  const auto video = scratch("video");
  REQUIRE(small({"--out", video.string(), "synth", "--kind", "video", "--count", "2"}).code == 0);
  const auto source = scratch("source");
  REQUIRE(small({"--out", source.string(), "synth", "--kind", "source"}).code == 0);
  const auto pre = scratch("pretrain");
  REQUIRE(small({"--out", pre.string(), "train-cnn", "--data", source.string()}).code == 0);

  CHECK(small({"--out", scratch("frames_no_loto").string(), "train-rnn", "--data", video.string()}).code ==
        bmlgest::usage);

  const auto tuned = scratch("finetune");
  REQUIRE(small({"--out", tuned.string(), "train-cnn", "--data", video.string(), "--init",
                 (pre / "cnn.ckpt").string(), "--holdout", "synth_001"})
              .code == 0);
  const auto before = ConvNetModel::from_checkpoint(load_checkpoint(pre / "cnn.ckpt"));
  const auto after = ConvNetModel::from_checkpoint(load_checkpoint(tuned / "cnn.ckpt"));
  CHECK(after.block_hash(0) == before.block_hash(0));
  CHECK(after.config().num_classes == 10);

  const auto feats = scratch("extracted");
  REQUIRE(small({"--out", feats.string(), "extract-features", "--model", (tuned / "cnn.ckpt").string(), "--data",
                 video.string()})
              .code == 0);
  const auto samples = load_feature_dataset(feats);
  REQUIRE(samples.size() == 2);
  CHECK(samples[0].features.cols() == after.config().feature_dim);

  SUBCASE("a model with a zero head explains nothing") {
    const auto images = scratch("gc_images");
    REQUIRE(small({"--out", images.string(), "synth", "--kind", "images", "--count", "3"}).code == 0);
    auto flat = after;
    for (auto& v : flat.head_weight().values()) v = 0.0;
    const auto ckpt = scratch("gc_zero_model");
    fs::create_directories(ckpt);
    save_checkpoint(ckpt / "cnn.ckpt", flat.to_checkpoint());
    const auto out = scratch("gc_zero");
    const auto r = small({"--out", out.string(), "gradcam", "--model", (ckpt / "cnn.ckpt").string(), "--data",
                          images.string(), "--save", "1"});
    REQUIRE(r.code == bmlgest::ok);
    bool found = false;
    for (const auto& e : fs::directory_iterator(out)) {
      if (!e.path().string().ends_with("_heatmap.csv")) continue;
      found = true;
      std::istringstream rows(slurp(e.path()));
      std::string line;
      while (std::getline(rows, line))
        if (!line.empty() && std::isdigit(static_cast<unsigned char>(line[0])))
          CHECK(line.substr(line.rfind(',') + 1) == "0");
    }
    CHECK(found);
    CHECK(fs::exists(out / "localization.csv"));
  }
  SUBCASE("gradcam needs exactly one input") {
    CHECK(small({"--out", scratch("gc_bad").string(), "gradcam", "--model", (tuned / "cnn.ckpt").string()}).code ==
          bmlgest::usage);
  }
}
