#include <cstdio>
#include <fstream>

#include "doctest.h"
#include "enma/io.hpp"

using namespace enma;

namespace {

std::string slurp(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  REQUIRE(f);
  std::ostringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

}  // namespace

TEST_CASE("config parsing: sections, comments, typed lookups") {
  Config c = Config::parse(
      "enma-config 1\n"
      "name = run1   # experiment tag\n"
      "[data]\n"
      "system = advection\n"
      "n_traj = 500\n"
      "dt = 0.05\n"
      "[train]\n"
      "resume = true\n");
  CHECK(c.str("name") == "run1");
  CHECK(c.str("data.system") == "advection");
  CHECK(c.integer("data.n_traj") == 500);
  CHECK(c.num("data.dt") == doctest::Approx(0.05));
  CHECK(c.flag("train.resume", false) == true);
  CHECK(c.flag("train.verbose", false) == false);
  CHECK(c.integer("data.missing", 7) == 7);
  CHECK_THROWS(c.str("nope"));
  CHECK_THROWS(c.integer("data.system"));
  CHECK_THROWS(c.integer("data.dt"));
  CHECK_THROWS(Config::parse("just a line without equals\n"));
  CHECK_THROWS(Config::parse("[unterminated\n"));
}

TEST_CASE("config serialization round-trips") {
  Config c;
  c.set("name", "x");
  c.set("data.system", "wave");
  c.set("data.seed", "42");
  c.set("train.steps", "100");
  const std::string text = c.serialize();
  Config back = Config::parse(text);
  CHECK(back.str("name") == "x");
  CHECK(back.str("data.system") == "wave");
  CHECK(back.integer("data.seed") == 42);
  CHECK(back.integer("train.steps") == 100);
  CHECK(back.serialize() == text);
}

TEST_CASE("checkpoint save/load round-trips parameters, moments, and step") {
  const std::string path = "ckpt_test.bin";
  ParamStore<double> store;
  RngStream rng(3);
  store.add("layer.w", Tensor<double>::randn({3, 4}, rng));
  store.add("layer.b", Tensor<double>::from({2}, {0.25, -1.5}));
  store.add("frozen", Tensor<double>::from({2}, {3.0, 4.0}), false);
  auto& slot = store.slot("layer.b");
  slot.m = {0.125, -0.5};
  slot.v = {0.0625, 0.25};
  store.step() = 77;

  save_checkpoint(path, "ENMAVAE1", "enma-config 1\nname = t\n", store);
  auto ck = load_checkpoint<double>(path, "ENMAVAE1");
  CHECK(ck.config_text == "enma-config 1\nname = t\n");
  CHECK(ck.store.step() == 77);
  REQUIRE(ck.store.names() == store.names());
  // exact for float32-representable values
  auto& b = ck.store.get("layer.b").values();
  CHECK(b[0] == 0.25);
  CHECK(b[1] == -1.5);
  auto& bs = ck.store.slot("layer.b");
  CHECK(bs.m[0] == 0.125);
  CHECK(bs.v[1] == 0.25);
  CHECK(bs.trainable);
  CHECK_FALSE(ck.store.slot("frozen").trainable);
  CHECK(ck.store.get("frozen").values()[1] == 4.0);
  // random values round-trip within float32 precision
  auto& w0 = store.get("layer.w").values();
  auto& w1 = ck.store.get("layer.w").values();
  CHECK(ck.store.get("layer.w").shape() == Shape{3, 4});
  for (size_t i = 0; i < w0.size(); ++i)
    CHECK(w1[i] == doctest::Approx(w0[i]).epsilon(1e-6));

  CHECK_THROWS(load_checkpoint<double>(path, "ENMAGEN1"));
  CHECK_THROWS(load_checkpoint<double>("does_not_exist.bin", "ENMAVAE1"));

  // identical stores serialize byte-identically
  save_checkpoint("ckpt_test2.bin", "ENMAVAE1", "enma-config 1\nname = t\n", store);
  CHECK(slurp(path) == slurp("ckpt_test2.bin"));
  std::remove(path.c_str());
  std::remove("ckpt_test2.bin");
}

TEST_CASE("PGM heatmap bytes and range sidecar") {
  const std::vector<double> vals{0.0, 1.0, 2.0, 3.0, 4.0, 2.0};
  write_pgm_heatmap("hm_test.pgm", vals, 2, 3, 0.0, 4.0);
  const std::string img = slurp("hm_test.pgm");
  const std::string header = "P5\n3 2\n255\n";
  REQUIRE(img.size() == header.size() + 6);
  CHECK(img.substr(0, header.size()) == header);
  const unsigned char* px = reinterpret_cast<const unsigned char*>(img.data() + header.size());
  CHECK(px[0] == 0);
  CHECK(px[1] == 64);  // 0.25 * 255 rounded
  CHECK(px[4] == 255);
  CHECK(px[5] == 128);  // 0.5 * 255 rounded
  CHECK(slurp("hm_test.csv") == "vmin,vmax\n0,4\n");

  // degenerate range renders uniform mid-gray
  write_pgm_heatmap("hm_flat.pgm", {5.0, 5.0}, 1, 2, 5.0, 5.0);
  const std::string flat = slurp("hm_flat.pgm");
  REQUIRE(flat.size() == 11 + 2);  // "P5\n2 1\n255\n" + 2 pixels
  const unsigned char* fp = reinterpret_cast<const unsigned char*>(flat.data() + 11);
  CHECK(fp[0] == 128);
  CHECK(fp[1] == 128);

  CHECK_THROWS(write_pgm_heatmap("hm_bad.pgm", vals, 2, 2, 0.0, 1.0));
  std::remove("hm_test.pgm");
  std::remove("hm_test.csv");
  std::remove("hm_flat.pgm");
  std::remove("hm_flat.csv");
}
