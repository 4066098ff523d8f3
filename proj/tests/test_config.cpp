#include <doctest.h>

#include <sstream>

#include "retina/config.hpp"

using namespace retina;

TEST_CASE("config round-trips through emit and parse") {
  RunConfig cfg;
  cfg.seed = 7;
  cfg.net.width = 8;
  cfg.train.lr0 = 0.0125;
  cfg.pre.gabor.scales = {1.5, 2.5};
  cfg.multi_input = false;
  cfg.finalize();

  std::string text = emit_config(cfg);
  RunConfig back;
  std::istringstream in(text);
  parse_config_text(back, in, "mem");
  back.finalize();
  CHECK(emit_config(back) == text);
  CHECK(back.net.width == 8);
  CHECK(back.train.lr0 == 0.0125);
  CHECK(back.pre.gabor.scales == std::vector<double>{1.5, 2.5});
  CHECK(back.net.input_channels == 3);
}

TEST_CASE("config parser handles comments, whitespace, and errors") {
  RunConfig cfg;
  std::istringstream in("# comment\n\n  net.width = 4   # trailing\n");
  parse_config_text(cfg, in, "mem");
  CHECK(cfg.net.width == 4);

  std::istringstream bad_key("no.such.key = 1\n");
  CHECK_THROWS_WITH_AS(parse_config_text(cfg, bad_key, "mem"),
                       doctest::Contains("no.such.key"), std::runtime_error);

  std::istringstream bad_line("net.width 4\n");
  CHECK_THROWS_AS(parse_config_text(cfg, bad_line, "mem"), std::runtime_error);

  std::istringstream bad_value("net.width = soon\n");
  CHECK_THROWS_AS(parse_config_text(cfg, bad_value, "mem"), std::runtime_error);
}

TEST_CASE("finalize derives dependent fields and validates") {
  RunConfig cfg;
  cfg.finalize();
  CHECK(cfg.net.input_channels == 8);
  CHECK(cfg.pre.gabor.orientations_deg.size() == 18);
  CHECK(cfg.pre.line.orientations_deg.size() == 12);
  CHECK(cfg.pre.line.lengths == std::vector<int>{1, 3, 5, 7, 9, 11, 13, 15});

  RunConfig bad;
  bad.precision = "f16";
  CHECK_THROWS_AS(bad.finalize(), std::runtime_error);

  RunConfig bad2;
  apply_config_line(bad2, "net.patch", "20");
  CHECK_THROWS_AS(bad2.finalize(), std::runtime_error);  // patch must be a multiple of 8
}

TEST_CASE("config hash tracks architecture-relevant settings only") {
  RunConfig a, b;
  a.finalize();
  b.finalize();
  CHECK(a.config_hash() == b.config_hash());

  RunConfig wider;
  wider.net.width = 32;
  wider.finalize();
  CHECK(wider.config_hash() != a.config_hash());

  RunConfig rgb;
  rgb.multi_input = false;
  rgb.finalize();
  CHECK(rgb.config_hash() != a.config_hash());

  RunConfig more_iters;       // training length does not invalidate checkpoints
  more_iters.train.max_iters = 999;
  more_iters.finalize();
  CHECK(more_iters.config_hash() == a.config_hash());

  CHECK(a.channel_layout() == "R,G,B,Ric,Gic,Bic,gabor,line");
  CHECK(rgb.channel_layout() == "R,G,B");
}

TEST_CASE("every field has a documented default in the emitted config") {
  RunConfig cfg;
  cfg.finalize();
  std::string text = emit_config(cfg);
  for (const char* key : {"seed", "precision", "synth.images", "pre.gabor.scales", "net.width",
                          "train.iters", "loss.lambda", "infer.stride", "ablate.iters"})
    CHECK(text.find(std::string(key) + " = ") != std::string::npos);
}
