#include <doctest.h>

#include <filesystem>
#include <fstream>

#include "retina/synth.hpp"

using namespace retina;
namespace fs = std::filesystem;

namespace {

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return std::string(std::istreambuf_iterator<char>(in), {});
}

}  // namespace

TEST_CASE("synthetic images carry both classes and plausible vessel density") {
  SynthSpec spec;
  spec.images = 60;
  Rng rng(spec.seed);
  for (int i = 0; i < spec.images; ++i) {
    SynthImage img = synth_image(spec, rng);
    long long artery = img.artery.count();
    long long vein = img.vein.count();
    long long vessel = artery + vein + img.uncertain.count();
    CAPTURE(i);
    CHECK(artery > 0);
    CHECK(vein > 0);
    double frac = double(vessel) / (spec.size * spec.size);
    CHECK(frac >= 0.02);
    CHECK(frac <= 0.15);
    CHECK((img.artery && img.vein).count() == 0);
  }
}

TEST_CASE("synth_dataset is byte-identical across runs with one seed") {
  auto root_a = fs::temp_directory_path() / "retina_synth_a";
  auto root_b = fs::temp_directory_path() / "retina_synth_b";
  fs::remove_all(root_a);
  fs::remove_all(root_b);

  SynthSpec spec;
  spec.images = 4;
  spec.train_count = 3;
  spec.size = 64;
  auto ds_a = synth_dataset(spec, root_a.string());
  auto ds_b = synth_dataset(spec, root_b.string());

  REQUIRE(ds_a.entries.size() == 4);
  CHECK(ds_a.split("train").size() == 3);
  CHECK(ds_a.split("test").size() == 1);
  for (const auto& e : ds_a.entries) {
    fs::path rel_img = fs::path("images") / (e.name + ".png");
    fs::path rel_lab = fs::path("labels") / (e.name + ".png");
    CHECK(slurp(root_a / rel_img) == slurp(root_b / rel_img));
    CHECK(slurp(root_a / rel_lab) == slurp(root_b / rel_lab));
  }
  CHECK(slurp(root_a / "manifest.txt") == slurp(root_b / "manifest.txt"));

  // different seed changes the tree
  SynthSpec other = spec;
  other.seed = 43;
  auto root_c = fs::temp_directory_path() / "retina_synth_c";
  fs::remove_all(root_c);
  synth_dataset(other, root_c.string());
  CHECK(slurp(root_a / "images" / "img_000.png") != slurp(root_c / "images" / "img_000.png"));
}

TEST_CASE("written labels decode back to consistent tri-maps") {
  auto root = fs::temp_directory_path() / "retina_synth_labels";
  fs::remove_all(root);
  SynthSpec spec;
  spec.images = 3;
  spec.train_count = 2;
  spec.size = 64;
  auto ds = synth_dataset(spec, root.string());
  for (const auto& e : ds.entries) {
    auto tri = load_av_label(e.label_path);
    for (int y = 0; y < tri.height(); ++y)
      for (int x = 0; x < tri.width(); ++x) {
        if (tri.artery(y, x) || tri.vein(y, x) || tri.uncertain(y, x)) CHECK(tri.vessel(y, x));
        CHECK_FALSE(bool(tri.artery(y, x) && tri.vein(y, x)));
        CHECK_FALSE(bool(tri.uncertain(y, x) && (tri.artery(y, x) || tri.vein(y, x))));
      }
    CHECK(tri.artery.any());
    CHECK(tri.vein.any());
  }
}

TEST_CASE("synth spec validation") {
  SynthSpec bad;
  bad.train_count = 99;
  CHECK_THROWS_AS(bad.validate(), std::runtime_error);
  bad = {};
  bad.width_min = 0.5;
  CHECK_THROWS_AS(bad.validate(), std::runtime_error);
}
