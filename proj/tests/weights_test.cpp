#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>

#include "vajra/weights.hpp"

using namespace vajra;

namespace {

WeightStore sample() {
  WeightStore w;
  w.put("b.weight", StoredTensor::from(Tensor4(Shape4{2, 1, 1, 3}, {1, -2, 3.5f, 0, -0.0f, 1e-30f})));
  w.put("a.bias", StoredTensor::vector({std::nanf(""), INFINITY}));
  return w;
}

FormatError format_error(std::string_view bytes) {
  try {
    deserialize_weights(bytes);
  } catch (const FormatError& e) {
    return e;
  }
  ADD_FAILURE() << "bytes were accepted";
  return FormatError("none");
}

}  // namespace

TEST(Weights, RoundTripIsBitExact) {
  const WeightStore w = sample();
  const std::string bytes = serialize_weights(w);
  EXPECT_EQ(bytes.substr(0, 4), "VJW1");
  const WeightStore back = deserialize_weights(bytes);
  EXPECT_TRUE(back.bit_equal(w));
  EXPECT_EQ(back.begin()->first, "a.bias");  // sorted by name
  EXPECT_EQ(serialize_weights(back), bytes);
}

TEST(Weights, LayoutIsLittleEndian) {
  WeightStore w;
  w.put("x", StoredTensor::vector({1.0f}));
  const std::string bytes = serialize_weights(w);
  const std::string expect("VJW1\x01\x00\x00\x00\x01\x00x\x01\x01\x00\x00\x00\x00\x00\x80\x3f", 20);
  EXPECT_EQ(bytes, expect);
  EXPECT_EQ(serialize_weights(WeightStore{}), std::string("VJW1\0\0\0\0", 8));
}

TEST(Weights, RejectsCorruptFiles) {
  const std::string good = serialize_weights(sample());
  EXPECT_NE(std::string(format_error("VJW2" + good.substr(4)).what()).find("magic"), std::string::npos);
  for (std::size_t cut : {std::size_t{2}, std::size_t{6}, good.size() - 1}) {
    format_error(good.substr(0, cut));
  }
  format_error(good + "x");

  WeightStore one;
  one.put("x", StoredTensor::vector({1.0f}));
  std::string dup = serialize_weights(one);
  dup[4] = 2;
  dup += dup.substr(8);
  EXPECT_NE(std::string(format_error(dup).what()).find("duplicate"), std::string::npos);

  std::string huge = serialize_weights(one);
  huge[12] = '\xff';
  huge[13] = '\xff';
  huge[14] = '\xff';
  huge[15] = '\x7f';
  format_error(huge);
}

TEST(Weights, SaveAndLoad) {
  const auto path = std::filesystem::temp_directory_path() / "vajra_weights_test.vjw";
  save_weights(sample(), path.string());
  EXPECT_TRUE(load_weights(path.string()).bit_equal(sample()));
  std::filesystem::remove(path);
  EXPECT_THROW(load_weights(path.string()), Error);
}

TEST(Weights, StoredTensorViews) {
  const StoredTensor v = StoredTensor::vector({1, 2, 3});
  EXPECT_EQ(v.as_tensor4().shape(), (Shape4{1, 1, 1, 3}));
  EXPECT_THROW(WeightStore{}.put("bad", StoredTensor{{2, 2}, {1.0f}}), ShapeError);
  EXPECT_THROW(WeightStore{}.get("missing"), Error);
}
