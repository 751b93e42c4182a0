#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <random>
#include <set>

#include "oracles.hpp"
#include "ssr3d/errors.hpp"
#include "ssr3d/hsi.hpp"

using namespace ssr3d;

namespace {

// Keys kernel with clamp-to-edge at pixel centres, one output value at a time.
double bicubic_at(const HsiCube& c, std::size_t b, double y, double x) {
  auto w = [](double t) {
    t = std::abs(t);
    const double a = -0.5;
    if (t <= 1) return (a + 2) * t * t * t - (a + 3) * t * t + 1;
    if (t < 2) return a * t * t * t - 5 * a * t * t + 8 * a * t - 4 * a;
    return 0.0;
  };
  const long y0 = static_cast<long>(std::floor(y)), x0 = static_cast<long>(std::floor(x));
  double acc = 0.0;
  for (long i = y0 - 1; i <= y0 + 2; ++i)
    for (long j = x0 - 1; j <= x0 + 2; ++j) {
      const long ci = std::clamp<long>(i, 0, static_cast<long>(c.height()) - 1);
      const long cj = std::clamp<long>(j, 0, static_cast<long>(c.width()) - 1);
      acc += w(y - double(i)) * w(x - double(j)) * c.at(b, ci, cj);
    }
  return acc;
}

double band_correlation(const HsiCube& c, std::size_t a, std::size_t b) {
  const auto x = c.band(a), y = c.band(b);
  const double n = double(x.size());
  double mx = 0, my = 0;
  for (std::size_t i = 0; i < x.size(); ++i) mx += x[i], my += y[i];
  mx /= n, my /= n;
  double sxy = 0, sxx = 0, syy = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sxy += (x[i] - mx) * (y[i] - my);
    sxx += (x[i] - mx) * (x[i] - mx);
    syy += (y[i] - my) * (y[i] - my);
  }
  return sxy / std::sqrt(sxx * syy);
}

std::vector<float> sorted_values(const HsiCube& c) {
  std::vector<float> v(c.values().begin(), c.values().end());
  std::sort(v.begin(), v.end());
  return v;
}

void put_u32(std::vector<std::uint8_t>& bytes, std::size_t at, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) bytes[at + i] = static_cast<std::uint8_t>(v >> (8 * i));
}

}  // namespace

TEST_SUITE("hsi") {
  TEST_CASE("hsc round trip") {
    std::mt19937_64 rng(1);
    HsiCube c = oracle::random_cube(rng, 5, 7, 9);
    auto bytes = encode_hsc(c);
    CHECK(bytes.size() == 4 + 12 + 4 * c.size() + 4);
    CHECK(std::memcmp(bytes.data(), "HSC1", 4) == 0);
    CHECK(bytes[4] == 5);
    CHECK(decode_hsc(bytes) == c);

    const auto dir = std::filesystem::temp_directory_path() / "ssr3d_test_hsi";
    std::filesystem::create_directories(dir);
    write_hsc(c, dir / "c.hsc");
    CHECK(read_hsc(dir / "c.hsc") == c);
    std::filesystem::remove_all(dir);
    CHECK_THROWS_AS(read_hsc(dir / "missing.hsc"), Error);
  }

  TEST_CASE("hsc rejects damaged bytes") {
    std::mt19937_64 rng(2);
    const auto good = encode_hsc(oracle::random_cube(rng, 4, 3, 3));

    auto magic = good;
    magic[0] = 'X';
    CHECK_THROWS_AS(decode_hsc(magic), FormatError);

    for (std::size_t cut : {std::size_t{0}, std::size_t{3}, std::size_t{10}, good.size() / 2, good.size() - 1}) {
      std::vector<std::uint8_t> shortened(good.begin(), good.begin() + static_cast<long>(cut));
      CHECK_THROWS_AS(decode_hsc(shortened), FormatError);
    }

    auto flipped = good;
    flipped[20] ^= 0x01;
    CHECK_THROWS_AS(decode_hsc(flipped), FormatError);
    auto crc = good;
    crc.back() ^= 0x80;
    CHECK_THROWS_AS(decode_hsc(crc), FormatError);

    auto huge = good;
    put_u32(huge, 4, 1u << 16);
    put_u32(huge, 8, 1u << 16);
    put_u32(huge, 12, 2);
    CHECK_THROWS_AS(decode_hsc(huge), FormatError);
    auto zero = good;
    put_u32(zero, 8, 0);
    CHECK_THROWS_AS(decode_hsc(zero), FormatError);
    try {
      decode_hsc(magic);
    } catch (const FormatError& e) {
      CHECK(std::string(e.what()).find("0") != std::string::npos);
    }
  }

  TEST_CASE("synthetic scenes") {
    for (auto kind : {SynthKind::GaussianBlobs, SynthKind::SpectralRamps, SynthKind::Checker}) {
      const HsiCube a = synth_cube(kind, 8, 32, 32, 7);
      CHECK(a == synth_cube(kind, 8, 32, 32, 7));
      CHECK_FALSE(a == synth_cube(kind, 8, 32, 32, 8));
      for (float v : a.values()) {
        CHECK(v >= 0.0f);
        CHECK(v <= 1.0f);
      }
      CHECK(parse_synth_kind(to_string(kind)) == kind);
    }
    const HsiCube blobs = synth_cube(SynthKind::GaussianBlobs, 8, 32, 32, 3);
    double corr = 0.0;
    for (std::size_t l = 0; l + 1 < 8; ++l) corr += band_correlation(blobs, l, l + 1);
    CHECK(corr / 7.0 > 0.9);
    CHECK_THROWS_AS(synth_cube(SynthKind::Checker, 3, 32, 32, 0), GeometryError);
    CHECK_THROWS_AS(parse_synth_kind("noise"), ConfigError);
  }

  TEST_CASE("cubic kernel") {
    CHECK(cubic_weight(0.0) == 1.0);
    CHECK(cubic_weight(1.0) == 0.0);
    CHECK(cubic_weight(2.0) == 0.0);
    CHECK(cubic_weight(2.5) == 0.0);
    for (double f : {0.1, 0.25, 0.5, 0.9}) {
      const double s = cubic_weight(1 + f) + cubic_weight(f) + cubic_weight(1 - f) + cubic_weight(2 - f);
      CHECK(s == doctest::Approx(1.0).epsilon(1e-14));
    }
  }

  TEST_CASE("bicubic resize") {
    HsiCube flat(3, 12, 10, 0.375f);
    const HsiCube down = bicubic_resize(flat, 6, 5);
    for (float v : down.values()) CHECK(std::abs(v - 0.375f) <= 1e-7f);

    // Linear ramp survives exactly away from the clamped border.
    HsiCube ramp(1, 16, 16);
    for (std::size_t r = 0; r < 16; ++r)
      for (std::size_t c = 0; c < 16; ++c) ramp.at(0, r, c) = 0.02f * float(r) + 0.03f * float(c);
    const HsiCube half = degrade(ramp, 2);
    for (std::size_t r = 1; r + 1 < 8; ++r)
      for (std::size_t c = 1; c + 1 < 8; ++c)
        CHECK(std::abs(half.at(0, r, c) - (0.02 * (2 * r + 0.5) + 0.03 * (2 * c + 0.5))) <= 1e-6);

    std::mt19937_64 rng(3);
    const HsiCube x = oracle::random_cube(rng, 2, 9, 13);
    for (auto [oh, ow] : {std::pair<std::size_t, std::size_t>{3, 4}, {18, 26}, {9, 5}, {20, 7}}) {
      const HsiCube y = bicubic_resize(x, oh, ow);
      const double sy = double(x.height()) / double(oh), sx = double(x.width()) / double(ow);
      for (std::size_t b = 0; b < 2; ++b)
        for (std::size_t r = 0; r < oh; ++r)
          for (std::size_t c = 0; c < ow; ++c) {
            const double ref = bicubic_at(x, b, (r + 0.5) * sy - 0.5, (c + 0.5) * sx - 0.5);
            CHECK(std::abs(y.at(b, r, c) - ref) <= 1e-6);
          }
    }

    const HsiCube big = synth_cube(SynthKind::SpectralRamps, 31, 512, 512, 1);
    const HsiCube lr = degrade(big, 2);
    CHECK(lr.bands() == 31);
    CHECK(lr.height() == 256);
    CHECK(lr.width() == 256);
    CHECK_THROWS_AS(degrade(HsiCube(1, 10, 10), 3), GeometryError);
  }

  TEST_CASE("bicubic never mixes bands") {
    std::mt19937_64 rng(4);
    const HsiCube x = oracle::random_cube(rng, 5, 12, 12);
    const std::vector<std::size_t> perm{3, 0, 4, 1, 2};
    HsiCube permuted(5, 12, 12);
    for (std::size_t b = 0; b < 5; ++b)
      std::copy(x.band(perm[b]).begin(), x.band(perm[b]).end(), permuted.band(b).begin());
    const HsiCube a = degrade(x, 3), b = degrade(permuted, 3);
    for (std::size_t k = 0; k < 5; ++k)
      CHECK(std::equal(b.band(k).begin(), b.band(k).end(), a.band(perm[k]).begin()));
  }

  TEST_CASE("patch extraction") {
    const HsiCube cube = synth_cube(SynthKind::GaussianBlobs, 31, 64, 64, 5);
    const PatchSet set = extract_patches(cube, 24, 32, 11, 2);
    REQUIRE(set.patches.size() == 24);
    std::set<std::pair<std::size_t, std::size_t>> corners;
    for (const auto& p : set.patches) {
      CHECK(p.cube.bands() == 31);
      CHECK(p.cube.height() == 32);
      CHECK(p.cube.width() == 32);
      CHECK(p.source_id == 2);
      CHECK(p.cube == cube.crop(p.row, p.col, 32, 32));
      corners.emplace(p.row, p.col);
    }
    CHECK(corners.size() > 1);
    const PatchSet again = extract_patches(cube, 24, 32, 11, 2);
    for (std::size_t i = 0; i < 24; ++i) CHECK(again.patches[i].row == set.patches[i].row);
    const PatchSet other = extract_patches(cube, 24, 32, 12, 2);
    bool differs = false;
    for (std::size_t i = 0; i < 24; ++i)
      differs |= other.patches[i].row != set.patches[i].row || other.patches[i].col != set.patches[i].col;
    CHECK(differs);
    CHECK_THROWS_AS(extract_patches(cube, 1, 65, 0), GeometryError);
  }

  TEST_CASE("orientation helpers") {
    std::mt19937_64 rng(6);
    const HsiCube x = oracle::random_cube(rng, 2, 5, 7);
    CHECK(rotate90(rotate90(rotate90(rotate90(x, 1), 1), 1), 1) == x);
    CHECK(flip_horizontal(flip_horizontal(x)) == x);
    CHECK(rotate90(x, 2) == rotate90(rotate90(x, 1), 1));
    CHECK(rotate90(x, -1) == rotate90(x, 3));
    const HsiCube q = rotate90(x, 1);
    CHECK(q.height() == 7);
    CHECK(q.width() == 5);
    // Counter-clockwise: the last column becomes the first row.
    for (std::size_t c = 0; c < 5; ++c) CHECK(q.at(1, 0, c) == x.at(1, c, 6));
    const HsiCube f = flip_horizontal(x);
    CHECK(f.at(0, 2, 0) == x.at(0, 2, 6));
  }

  TEST_CASE("augmentation orbit") {
    std::mt19937_64 rng(7);
    PatchSet one;
    one.patch_hw = 32;
    one.scale = 2;
    one.patches.push_back(Patch{oracle::random_cube(rng, 4, 32, 32), 0, 0, 0, {}});
    std::size_t skipped = 99;
    const PatchSet out = augment(one, AugmentOptions{}, 3, &skipped);
    CHECK(skipped == 0);
    REQUIRE(out.patches.size() == 24);
    std::set<std::string> tags;
    const auto reference = sorted_values(one.patches[0].cube);
    for (const auto& p : out.patches) {
      tags.insert(p.transform.str());
      const std::size_t side = p.transform.scale == 1.0 ? 32 : p.transform.scale == 0.75 ? 24 : 16;
      CHECK(p.cube.height() == side);
      CHECK(p.cube.width() == side);
      if (p.transform.scale == 1.0) CHECK(sorted_values(p.cube) == reference);
    }
    CHECK(tags.size() == 24);

    // Scales that would fall below the minimum size are dropped and counted.
    PatchSet small;
    small.scale = 4;
    small.patches.push_back(Patch{oracle::random_cube(rng, 4, 16, 16), 0, 0, 0, {}});
    const PatchSet trimmed = augment(small, AugmentOptions{}, 3, &skipped);
    CHECK(skipped == 8);  // only the 0.5 variants: 8 px gives a 2 px low-res side
    CHECK(trimmed.patches.size() == 16);
  }

  TEST_CASE("mean handling") {
    std::vector<HsiCube> flat{HsiCube(3, 4, 4, 0.5f), HsiCube(2, 6, 5, 0.5f)};
    CHECK(compute_mean(flat) == 0.5);

    std::mt19937_64 rng(8);
    std::vector<HsiCube> cubes{oracle::random_cube(rng, 3, 5, 5), oracle::random_cube(rng, 4, 6, 2)};
    double total = 0.0;
    std::size_t count = 0;
    for (const auto& c : cubes)
      for (std::size_t b = 0; b < c.bands(); ++b)
        for (std::size_t r = 0; r < c.height(); ++r)
          for (std::size_t k = 0; k < c.width(); ++k, ++count) total += c.at(b, r, k);
    const double mean = compute_mean(cubes);
    CHECK(std::abs(mean - total / double(count)) <= 1e-12);

    const Tensor t = mean_subtract(cubes[0], mean);
    CHECK(t.shape().n == 1);
    CHECK(t.shape().c == 1);
    CHECK(t.shape().l == 3);
    CHECK(t.at(0, 0, 1, 2, 3) == double(cubes[0].at(1, 2, 3)) - mean);
    CHECK(mean_restore(t, mean) == cubes[0]);
  }
}
