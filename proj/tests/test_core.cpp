#include "taskdn/core.hpp"

#include <catch_amalgamated.hpp>

#include <cmath>
#include <random>

using namespace taskdn;

namespace {

Image2D random_image(std::size_t w, std::size_t h, std::mt19937_64 &g) {
  std::uniform_real_distribution<double> u(-5.0, 5.0);
  Image2D img(w, h);
  for (double &v : img.values())
    v = u(g);
  return img;
}

double l2(const Image2D &img) {
  double s = 0;
  for (double v : img.values())
    s += v * v;
  return std::sqrt(s);
}

// Direct transcription of out[x, y] = in[x - dx, y - dy] with bounds checks.
Image2D shift_oracle(const Image2D &img, long dx, long dy) {
  Image2D out(img.width(), img.height());
  for (long y = 0; y < static_cast<long>(img.height()); ++y)
    for (long x = 0; x < static_cast<long>(img.width()); ++x) {
      const long sx = x - dx, sy = y - dy;
      if (sx >= 0 && sy >= 0 && sx < static_cast<long>(img.width()) &&
          sy < static_cast<long>(img.height()))
        out(x, y) = img(sx, sy);
    }
  return out;
}

} // namespace

TEST_CASE("containers reject empty or mismatched shapes") {
  CHECK_THROWS_AS(Image2D(0, 4), ValidationError);
  CHECK_THROWS_AS(Image2D(2, 2, std::vector<double>{1, 2, 3}), ValidationError);
  CHECK_THROWS_AS(Image3D(4, 4, 0), ValidationError);
  CHECK_THROWS_AS(Image3D(2, 2, 2, std::vector<double>(7)), ValidationError);
  CHECK_NOTHROW(Image3D(64, 64, 3, std::vector<double>(64 * 64 * 3)));
}

TEST_CASE("image3d indexing is slice-major, row-major") {
  Image3D v(3, 2, 2);
  v(2, 1, 1) = 7.0;
  CHECK(v.values()[(1 * 2 + 1) * 3 + 2] == 7.0);
  const Image2D s = v.slice(1);
  CHECK(s(2, 1) == 7.0);
  Image2D t(3, 2, 1.5);
  v.set_slice(0, t);
  CHECK(v(0, 0, 0) == 1.5);
  CHECK_THROWS_AS(v.set_slice(0, Image2D(2, 2)), ValidationError);
}

TEST_CASE("sinogram values are nonnegative and counts integral") {
  CHECK_THROWS_AS(Sinogram(2, 2, {1, -1, 0, 0}, SinogramKind::expected), ValidationError);
  CHECK_THROWS_AS(Sinogram(2, 2, {1, 0.5, 0, 0}, SinogramKind::counts), ValidationError);
  CHECK_THROWS_AS(Sinogram(2, 2, {1, NAN, 0, 0}, SinogramKind::expected), ValidationError);
  const Sinogram s(2, 2, {1, 2, 3, 4}, SinogramKind::counts);
  CHECK(s(1, 0) == 2);
  CHECK(s(0, 1) == 3);
  CHECK(s.sum() == 10);
}

TEST_CASE("acyclic shift examples") {
  const Image2D img(2, 2, std::vector<double>{1, 2, 3, 4});

  SECTION("zero shift is the identity") {
    const auto r = acyclic_shift(img, 0, 0);
    CHECK(r.image == img);
    CHECK_FALSE(r.out_of_range);
  }
  SECTION("shift right zero-fills the first column") {
    const auto r = acyclic_shift(img, 1, 0);
    CHECK(r.image == Image2D(2, 2, std::vector<double>{0, 1, 0, 3}));
  }
  SECTION("shift and shift back loses the boundary column") {
    const auto r = acyclic_shift(acyclic_shift(img, 1, 0).image, -1, 0);
    CHECK(r.image == Image2D(2, 2, std::vector<double>{1, 0, 3, 0}));
  }
  SECTION("shifting by the full extent yields zeros and a flag") {
    const auto r = acyclic_shift(img, 0, -2);
    CHECK(r.out_of_range);
    CHECK(r.image == Image2D(2, 2));
  }
}

TEST_CASE("acyclic shift matches the index-by-index oracle") {
  std::mt19937_64 g(7);
  std::uniform_int_distribution<long> d(-9, 9);
  for (int trial = 0; trial < 200; ++trial) {
    const auto img = random_image(7, 5, g);
    const long dx = d(g), dy = d(g);
    CHECK(acyclic_shift(img, dx, dy).image == shift_oracle(img, dx, dy));
  }
}

TEST_CASE("acyclic shift is linear and never increases the L2 norm") {
  std::mt19937_64 g(11);
  std::uniform_int_distribution<long> d(-12, 12);
  std::uniform_real_distribution<double> coef(-3, 3);
  for (int trial = 0; trial < 200; ++trial) {
    const auto f = random_image(10, 8, g);
    const auto h = random_image(10, 8, g);
    const double a = coef(g), b = coef(g);
    const long dx = d(g), dy = d(g);
    Image2D combo(10, 8);
    for (std::size_t i = 0; i < combo.size(); ++i)
      combo.values()[i] = a * f.values()[i] + b * h.values()[i];
    const auto lhs = acyclic_shift(combo, dx, dy).image;
    const auto sf = acyclic_shift(f, dx, dy).image;
    const auto sh = acyclic_shift(h, dx, dy).image;
    for (std::size_t i = 0; i < lhs.size(); ++i)
      REQUIRE(lhs.values()[i] == Catch::Approx(a * sf.values()[i] + b * sh.values()[i]).margin(1e-12));
    CHECK(l2(sf) <= l2(f) + 1e-12);
  }
}

TEST_CASE("rng streams are reproducible and distinct") {
  RngStream a(42, 7), b(42, 7), c(42, 8), d(43, 7);
  bool differ_c = false, differ_d = false;
  for (int i = 0; i < 1000; ++i) {
    const auto x = a(), y = b(), z = c(), w = d();
    REQUIRE(x == y);
    differ_c |= x != z;
    differ_d |= x != w;
  }
  CHECK(differ_c);
  CHECK(differ_d);

  const RngStream parent(1, 2);
  auto s1 = parent.split(5), s2 = parent.split(5), s3 = parent.split(6);
  CHECK(s1.stream_id() == s2.stream_id());
  CHECK(s1() == s2());
  CHECK(s1.stream_id() != s3.stream_id());
  CHECK(mix_ids(1, 2) != mix_ids(2, 1));
}

TEST_CASE("rng uniform stays in range") {
  RngStream r(3, 4);
  for (int i = 0; i < 10000; ++i) {
    const double u = r.uniform(-2.0, 5.0);
    REQUIRE(u >= -2.0);
    REQUIRE(u < 5.0);
  }
}
