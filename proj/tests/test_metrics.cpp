#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <sstream>

#include "mvar/error.hpp"
#include "mvar/experiment.hpp"
#include "mvar/metrics.hpp"
#include "mvar/rng.hpp"

using namespace mvar;

namespace {

Image flat(std::size_t w, std::size_t h, double v) {
  Image im(w, h);
  for (auto& x : im.rgb) x = v;
  return im;
}

Image noise(std::size_t res, std::uint64_t seed) {
  Rng rng(seed);
  Image im(res, res);
  for (auto& x : im.rgb) x = rng.uniform();
  return im;
}

std::string tiny_ini(const std::filesystem::path& out) {
  return "[model]\nD=16\nL=1\nH=2\nN=2\ngrid=2\n"
         "[train]\nbatch=2\niterations=4\nramp=2\nseed=3\nlog_every=2\n"
         "[data]\nviews=2\nres=8\npatch=4\npoints=32\ntrain_seeds=1..3\neval_seeds=100..101\n"
         "[experiment]\nruns=1\nout=" +
         out.string() + "\n";
}

}  // namespace

TEST_CASE("psnr examples") {
  const Image a = noise(8, 1);
  CHECK(psnr(a, a) == kPsnrCap);
  CHECK(psnr(flat(4, 4, 0.0), flat(4, 4, 0.1)) == doctest::Approx(20.0).epsilon(1e-12));
  CHECK(psnr(flat(4, 4, 0.0), flat(4, 4, 1.0)) == doctest::Approx(0.0));
  CHECK(psnr(flat(4, 4, 0.0), flat(4, 4, 0.5), 0.5) == doctest::Approx(0.0));
  const Image b = noise(8, 2);
  CHECK(psnr(a, b) == psnr(b, a));
  CHECK_THROWS_AS(psnr(a, noise(4, 1)), DimensionError);
}

TEST_CASE("ssim examples") {
  const Image a = noise(16, 3);
  CHECK(ssim(a, a) == doctest::Approx(1.0).epsilon(1e-12));

  Image bin(16, 16), inv(16, 16);
  for (std::size_t y = 0; y < 16; ++y) {
    for (std::size_t x = 0; x < 16; ++x) {
      const double v = ((x / 3 + y / 2) % 2) ? 1.0 : 0.0;
      for (std::size_t c = 0; c < 3; ++c) {
        bin.at(x, y, c) = v;
        inv.at(x, y, c) = 1.0 - v;
      }
    }
  }
  CHECK(ssim(bin, inv) < 0.0);

  // one window over two constant images leaves only the luminance term
  const double c1 = 0.01 * 0.01, ma = 0.2, mb = 0.7;
  const double expect = (2 * ma * mb + c1) / (ma * ma + mb * mb + c1);
  CHECK(ssim(flat(8, 8, ma), flat(8, 8, mb)) == doctest::Approx(expect).epsilon(1e-12));
  CHECK(ssim(flat(8, 8, ma), flat(8, 8, mb)) == ssim(flat(8, 8, mb), flat(8, 8, ma)));
  CHECK_THROWS_AS(ssim(flat(7, 7, 0), flat(7, 7, 0)), DimensionError);
}

TEST_CASE("exact_match counts equal codes") {
  const TokenGrid a{16, 16, std::vector<std::int64_t>(256, 3)};
  TokenGrid b = a;
  const TokenGrid one[] = {a};
  CHECK(exact_match(one, one) == 1.0);
  b.codes[17] = 4;
  const TokenGrid other[] = {b};
  CHECK(exact_match(other, one) == 255.0 / 256.0);
  const TokenGrid none[] = {TokenGrid{16, 16, std::vector<std::int64_t>(256, 0)}};
  CHECK(exact_match(none, one) == 0.0);
  const TokenGrid two[] = {a, a};
  CHECK_THROWS_AS(exact_match(two, one), DimensionError);
}

TEST_CASE("metric reports round trip exactly") {
  MetricReport r;
  r.experiment = "ablate-iwc";
  r.fingerprint = "abc123";
  r.set("iwc.i2mv.psnr", 1.0 / 3.0);
  r.set("run0.final_loss", 0.1 + 0.2);
  r.set("iwc.i2mv.psnr", 22.5);
  CHECK(r.values.size() == 2);
  CHECK(r.at("iwc.i2mv.psnr") == 22.5);
  CHECK(!r.get("missing"));
  CHECK_THROWS_AS(r.at("missing"), ContractError);
  CHECK_THROWS_AS(r.set("bad key", 1.0), ContractError);
  const MetricReport back = MetricReport::parse(r.serialize());
  CHECK(back == r);
  CHECK_THROWS_AS(MetricReport::parse("x\n"), DataError);
  CHECK_THROWS_AS(MetricReport::parse("x=abc\n"), DataError);
}

TEST_CASE("experiment configs parse, dump and round trip") {
  const ExperimentConfig c = parse_config(tiny_ini("/tmp/x"));
  CHECK(c.model.D == 16);
  CHECK(c.model.h == 2);
  CHECK(c.train.iterations == 4);
  CHECK(c.train_seeds == std::vector<std::uint64_t>{1, 2, 3});
  CHECK(c.eval_seeds.size() == 2);
  const ExperimentConfig again = parse_config(dump_config(c));
  CHECK(dump_config(again) == dump_config(c));
  CHECK(again.fingerprint() == c.fingerprint());

  ExperimentConfig changed = c;
  changed.train.lr *= 2;
  CHECK(changed.fingerprint() != c.fingerprint());

  CHECK_THROWS_AS(parse_config("[model]\nwidth=3\n"), DataError);
  CHECK_THROWS_AS(parse_config("[extras]\nD=3\n"), DataError);
  CHECK_THROWS_AS(parse_config("[model]\nD=abc\n"), DataError);
  CHECK_THROWS_AS(parse_config("[train]\nshuffle=sideways\n"), DataError);
  CHECK_THROWS_AS(parse_config("[model]\ngrid=2\n[data]\nres=64\npatch=4\n"), DataError);
  CHECK(parse_config("[train]\nshuffle=pairwise\nconditions=text,shape\n").train.fixed_conditions ==
        ConditionSet{true, false, true});
}

TEST_CASE("experiment names and task names") {
  for (const char* n : {"t2mv", "i2mv", "shape2mv", "ablate-ssa", "ablate-spe", "ablate-shufv", "ablate-iwc"}) {
    CHECK(std::find(experiment_names().begin(), experiment_names().end(), n) != experiment_names().end());
  }
  CHECK(task_name(Task::kI2mvAnyView) == "i2mv_any");
  CHECK_THROWS(run_experiment("nope", parse_config(tiny_ini("/tmp/x"))));
}

TEST_CASE("a tiny experiment is reproducible") {
  const auto dir = std::filesystem::temp_directory_path() / "mvar_test_metrics";
  std::filesystem::remove_all(dir);
  const ExperimentConfig c = parse_config(tiny_ini(dir / "a"));
  const MetricReport a = run_experiment("ablate-iwc", c);
  const MetricReport b = run_experiment("ablate-iwc", parse_config(tiny_ini(dir / "b")));
  CHECK(a.serialize() == b.serialize());
  CHECK(a.experiment == "ablate-iwc");
  CHECK(a.get("iwc.i2mv.psnr"));
  CHECK(a.get("in_context.i2mv.psnr"));
  CHECK(a.get("direction_majority"));
  CHECK(std::filesystem::exists(dir / "a"));
}
