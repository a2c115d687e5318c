#include <gtest/gtest.h>

#include "dcedit/checkpoint.hpp"
#include "dcedit/image_io.hpp"
#include "test_support.hpp"

using namespace dcedit;
using testing_support::random_image;

TEST(ImageTypes, InvariantsEnforced) {
  EXPECT_THROW(Image(Tensor({2, 4, 4})), Error);
  EXPECT_THROW(Image(Tensor({3, 4})), Error);
  EXPECT_THROW(Image(3, 2, 2, 1.5), Error);
  EXPECT_THROW(Image(3, 2, 2, -0.5, ValueRange::unsigned_unit), Error);
  try {
    Image(3, 2, 2, std::nan(""));
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::non_finite);
  }
  EXPECT_THROW(ActivationMask(Tensor({1, 2, 2}, 1.1)), Error);
  EXPECT_THROW(ActivationMask(Tensor({2, 2, 2})), Error);
  EXPECT_EQ(ActivationMask(Tensor({3, 5})).height(), 3);
}

TEST(ImageTypes, RangeConversions) {
  const Image u(Tensor({1, 1, 3}, std::vector<double>{0.0, 0.5, 1.0}), ValueRange::unsigned_unit);
  const Image s = u.to_signed();
  EXPECT_EQ(s.tensor().storage(), (std::vector<double>{-1.0, 0.0, 1.0}));
  EXPECT_EQ(s.to_unsigned(), u);
}

TEST(Png, RoundTripIsQuantization) {
  std::mt19937_64 rng(1);
  const Image img = random_image(3, 9, 7, rng);
  const Image back = decode_png(encode_png(img));
  EXPECT_EQ(back, quantize(img));
  EXPECT_LE(max_abs_diff(back.tensor(), img.tensor()), 1.0 / 255.0 + 1e-12);
  EXPECT_EQ(quantize(back), back);
  const Image gray = random_image(1, 4, 4, rng);
  EXPECT_EQ(decode_png(encode_png(gray)).channels(), 1);
  EXPECT_THROW(decode_png({1, 2, 3}), Error);

  const auto dir = testing_support::temp_dir("png");
  write_png(dir / "a.png", img);
  EXPECT_EQ(read_png(dir / "a.png"), back);
  try {
    read_png(dir / "missing.png");
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::not_found);
  }
  std::filesystem::remove_all(dir);
}

TEST(Base64, Rfc4648Vectors) {
  auto enc = [](std::string s) { return base64_encode(std::vector<std::uint8_t>(s.begin(), s.end())); };
  EXPECT_EQ(enc(""), "");
  EXPECT_EQ(enc("f"), "Zg==");
  EXPECT_EQ(enc("fo"), "Zm8=");
  EXPECT_EQ(enc("foo"), "Zm9v");
  EXPECT_EQ(enc("foob"), "Zm9vYg==");
  EXPECT_EQ(enc("fooba"), "Zm9vYmE=");
  EXPECT_EQ(enc("foobar"), "Zm9vYmFy");
  const auto d = base64_decode("Zm9vYmE=");
  EXPECT_EQ(std::string(d.begin(), d.end()), "fooba");
  EXPECT_THROW(base64_decode("Zm9v*"), Error);
  std::mt19937_64 rng(2);
  std::vector<std::uint8_t> bytes(257);
  for (auto& b : bytes) b = static_cast<std::uint8_t>(rng());
  EXPECT_EQ(base64_decode(base64_encode(bytes)), bytes);
}

TEST(Hash, Fnv1aVectorsAndImageHash) {
  EXPECT_EQ(fnv1a_hex({}), "cbf29ce484222325");
  EXPECT_EQ(fnv1a_hex({'a'}), "af63dc4c8601ec8c");
  std::mt19937_64 rng(3);
  const Image img = random_image(3, 5, 5, rng);
  EXPECT_EQ(image_hash(img), image_hash(quantize(img)));
  EXPECT_EQ(image_hash(img), image_hash(decode_png(encode_png(img))));
  EXPECT_NE(image_hash(img), image_hash(random_image(3, 5, 5, rng)));
}

TEST(Npy, HeaderAndPayload) {
  const auto dir = testing_support::temp_dir("npy");
  const Tensor t({1, 2, 3}, std::vector<double>{1, 2, 3, 4, 5, 6});
  write_npy(dir / "m.npy", t);
  const auto bytes = read_file(dir / "m.npy");
  ASSERT_GE(bytes.size(), 10u);
  EXPECT_EQ(std::string(bytes.begin() + 1, bytes.begin() + 6), "NUMPY");
  const std::size_t hlen = bytes[8] | (bytes[9] << 8);
  EXPECT_EQ((10 + hlen) % 64, 0u);
  const std::string header(bytes.begin() + 10, bytes.begin() + 10 + static_cast<long>(hlen));
  EXPECT_NE(header.find("'shape': (1,2,3)"), std::string::npos);
  ASSERT_EQ(bytes.size(), 10 + hlen + 6 * sizeof(double));
  double v[6];
  std::memcpy(v, bytes.data() + 10 + hlen, sizeof v);
  for (int i = 0; i < 6; ++i) EXPECT_EQ(v[i], i + 1.0);
  std::filesystem::remove_all(dir);
}

TEST(Checkpoint, RoundTripAndCorruption) {
  const auto dir = testing_support::temp_dir("ckpt");
  Checkpoint c;
  c.kind = "thing";
  c.meta = {{"a", 1}, {"b", {1, 2}}};
  std::mt19937_64 rng(4);
  c.tensors.emplace("w", testing_support::random_tensor({3, 2}, rng));
  c.tensors.emplace("b", testing_support::random_tensor({2}, rng));
  save_checkpoint(dir / "c.ckpt", c);
  const Checkpoint back = load_checkpoint(dir / "c.ckpt");
  EXPECT_EQ(back.kind, "thing");
  EXPECT_EQ(back.meta, c.meta);
  EXPECT_EQ(back.tensors.at("w"), c.tensors.at("w"));
  EXPECT_EQ(back.tensors.at("b"), c.tensors.at("b"));

  auto bytes = read_file(dir / "c.ckpt");
  bytes.resize(bytes.size() - 5);
  write_file(dir / "trunc.ckpt", bytes);
  EXPECT_THROW(load_checkpoint(dir / "trunc.ckpt"), Error);
  write_file(dir / "junk.ckpt", {'n', 'o', 'p', 'e'});
  EXPECT_THROW(load_checkpoint(dir / "junk.ckpt"), Error);
  try {
    load_checkpoint(dir / "absent.ckpt");
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::not_found);
  }
  std::filesystem::remove_all(dir);
}
