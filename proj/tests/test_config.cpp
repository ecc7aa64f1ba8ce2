#include <doctest.h>

#include "petsynth/config.hpp"
#include "petsynth/errors.hpp"

using namespace petsynth;

TEST_CASE("config parses sections, comments and overrides") {
  auto cfg = Config::parse_text(
      "# a comment\n"
      "top = 1\n"
      "[phantom]\n"
      "size = 64   # trailing comment\n"
      "noise_sigma = 0.25\n"
      "[train]\n"
      "stage = 3\n");
  CHECK(cfg.get_int("top", 0) == 1);
  CHECK(cfg.get_int("phantom.size", 0) == 64);
  CHECK(cfg.get_double("phantom.noise_sigma", 0) == doctest::Approx(0.25));
  CHECK(cfg.get_int("train.stage", 1) == 3);
  cfg.finish();
}

TEST_CASE("unknown key is reported by name") {
  auto cfg = Config::parse_text("[phantom]\nsize = 64\ntypo_key = 5\n");
  cfg.get_int("phantom.size", 0);
  try {
    cfg.finish();
    FAIL("expected ConfigError");
  } catch (const ConfigError& e) {
    CHECK(std::string(e.what()).find("phantom.typo_key") != std::string::npos);
  }
}

TEST_CASE("defaults apply when keys are absent") {
  auto cfg = Config::parse_text("");
  CHECK(cfg.get_int("a.b", 17) == 17);
  CHECK(cfg.get_bool("a.c", true) == true);
  CHECK(cfg.get_string("a.d", "x") == "x");
  cfg.finish();
}

TEST_CASE("bad values name the key") {
  auto cfg = Config::parse_text("[a]\nn = not_a_number\n");
  CHECK_THROWS_AS(cfg.get_int("a.n", 0), ConfigError);
}

TEST_CASE("manifest round trip preserves order and values") {
  Manifest m;
  m.set("zeta", 1.5);
  m.set("alpha", std::int64_t{42});
  m.set_hex("hash", 0xdeadbeefULL);
  auto text = m.to_text();
  // Insertion order, not sorted.
  CHECK(text.find("zeta") < text.find("alpha"));
  auto m2 = Manifest::parse_text(text);
  CHECK(m2.get_double("zeta") == 1.5);
  CHECK(m2.get_int("alpha") == 42);
  CHECK(m2.get("hash") == "00000000deadbeef");
}
