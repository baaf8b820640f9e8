#include <gtest/gtest.h>

#include <cmath>
#include <limits>

#include "mbcset/cli.hpp"
#include "mbcset/io.hpp"
#include "oracles.hpp"

namespace mbcset {
namespace {

std::vector<Encoder> sample_encoders(Rng& rng) {
  std::vector<Encoder> out;
  const SseLayerSpec two[] = {{3, 4, 3, 5, AggMode::Max, SlotMode::Random, true},
                              {1, 3, 5, 2, AggMode::Sum, SlotMode::Deterministic}};
  out.emplace_back(random_stack(rng, two));
  const std::size_t phi[] = {3, 6, 5};
  const std::size_t rho[] = {5, 4, 2};
  out.emplace_back(random_deepsets(rng, phi, AggMode::Min, rho));
  out.emplace_back(random_softmax_pool(rng, 2, 3, 4));
  return out;
}

TEST(FormatDouble, RoundTripsExactly) {
  Rng rng(1);
  for (int i = 0; i < 1000; ++i) {
    const double v = rng.next_normal() * std::pow(10.0, static_cast<int>(rng.next_u64() % 40) - 20);
    EXPECT_EQ(*parse_double(format_double(v)), v);
  }
  EXPECT_EQ(format_double(std::numeric_limits<double>::infinity()), "inf");
  EXPECT_EQ(format_double(-std::numeric_limits<double>::infinity()), "-inf");
  EXPECT_THROW(format_double(std::nan("")), NumericError);
  EXPECT_FALSE(parse_double("1e999"));
  EXPECT_FALSE(parse_double("nan"));
  EXPECT_FALSE(parse_double("1.5x"));
  EXPECT_FALSE(parse_double(""));
}

TEST(ModelFile, SerializeParseSerializeIsByteIdentical) {
  Rng rng(2);
  for (const Encoder& e : sample_encoders(rng)) {
    ModelFile m{e, {}, {}};
    m.task.way = 3;
    m.task.target = TargetKind::SetMean;
    m.train.adam.lr = 0.0025;
    m.train.seed = 12345678901234ULL;
    const std::string text = serialize_model(m);
    const ModelFile back = parse_model(text);
    EXPECT_EQ(serialize_model(back), text);
    EXPECT_EQ(flatten_params(back.encoder), flatten_params(e));
    EXPECT_EQ(back.task.way, 3u);
    EXPECT_EQ(back.task.target, TargetKind::SetMean);
    EXPECT_EQ(back.train.adam.lr, 0.0025);
    EXPECT_EQ(back.train.seed, 12345678901234ULL);
  }
}

TEST(ModelFile, TaskBlockIsOptional) {
  Rng rng(3);
  const Encoder e = sample_encoders(rng).front();
  const ModelFile m = parse_model("format_version 1\n" + serialize_encoder(e));
  EXPECT_EQ(m.task.shot, CentroidTask{}.shot);
  EXPECT_EQ(m.train.steps, TrainConfig{}.steps);
}

TEST(ModelFile, ErrorsCarryLineNumbers) {
  Rng rng(4);
  const std::string good = serialize_model({sample_encoders(rng).front(), {}, {}});
  try {
    parse_model("format_version 7\n");
    FAIL();
  } catch (const ParseError& e) {
    EXPECT_EQ(e.line(), 1u);
  }
  // Corrupt one value on line 5 and check the reported line.
  std::vector<std::string> lines;
  std::size_t start = 0;
  while (start < good.size()) {
    const auto end = good.find('\n', start);
    lines.push_back(good.substr(start, end - start));
    start = end + 1;
  }
  std::string broken;
  for (std::size_t i = 0; i < lines.size(); ++i) {
    broken += (i == 4 ? std::string("garbage 1 2") : lines[i]) + '\n';
  }
  try {
    parse_model(broken);
    FAIL();
  } catch (const ParseError& e) {
    EXPECT_EQ(e.line(), 5u);
    EXPECT_NE(std::string(e.what()).find("line 5"), std::string::npos);
  }
  EXPECT_THROW(parse_model(good + "extra 1\n"), ParseError);
  EXPECT_THROW(parse_model(good.substr(0, good.size() / 2)), ParseError);
}

TEST(ModelFile, FingerprintTracksParameters) {
  Rng rng(5);
  Encoder e = sample_encoders(rng).front();
  const std::string fp = model_fingerprint(e);
  EXPECT_EQ(fp.size(), 16u);
  EXPECT_EQ(model_fingerprint(parse_model("format_version 1\n" + serialize_encoder(e)).encoder), fp);
  auto theta = flatten_params(e);
  theta[3] = std::nextafter(theta[3], 1e9);
  assign_params(e, theta);
  EXPECT_NE(model_fingerprint(e), fp);
}

TEST(ModelFile, TrainingBlockDoesNotChangeFingerprint) {
  Rng rng(6);
  const Encoder e = sample_encoders(rng).front();
  ModelFile a{e, {}, {}};
  ModelFile b{e, {}, {}};
  b.train.steps = 7;
  EXPECT_EQ(model_fingerprint(parse_model(serialize_model(a)).encoder),
            model_fingerprint(parse_model(serialize_model(b)).encoder));
}

TEST(SessionFile, RoundTripWithInfinities) {
  Rng rng(7);
  const Encoder e = sample_encoders(rng).front();
  for (AggMode mode : kAllAggModes) {
    const SessionFile s = cli::new_session(e, 11, mode);
    const std::string text = serialize_session(s);
    if (mode == AggMode::Max) EXPECT_NE(text.find("-inf"), std::string::npos);
    if (mode == AggMode::Min) EXPECT_NE(text.find(" inf"), std::string::npos);
    const SessionFile back = parse_session(text);
    EXPECT_EQ(serialize_session(back), text);
    EXPECT_EQ(back.state.mode, mode);
    EXPECT_EQ(back.state.count, 0u);
  }
}

TEST(SessionFile, RejectsCorruption) {
  Rng rng(8);
  const Encoder e = sample_encoders(rng).front();
  const std::string text = serialize_session(cli::new_session(e, 1, std::nullopt));
  EXPECT_THROW(parse_session(text.substr(0, text.size() - 10)), ParseError);
  EXPECT_THROW(parse_session("format_version 1\nmodel_fingerprint x\nencoder_kind nope\n"), ParseError);
  std::string bad_count = text;
  bad_count.replace(bad_count.find("count 0"), 7, "count -1");
  EXPECT_THROW(parse_session(bad_count), ParseError);
}

TEST(BatchCsv, ParsesRowsAndSkipsBlankLines) {
  const Matrix X = parse_batch_csv("1,2,3\n\n 4 , 5.5 ,-6e-1\r\n");
  ASSERT_EQ(X.rows(), 2u);
  ASSERT_EQ(X.cols(), 3u);
  EXPECT_EQ(X(1, 1), 5.5);
  EXPECT_EQ(X(1, 2), -0.6);
  EXPECT_EQ(parse_batch_csv("").rows(), 0u);
}

TEST(BatchCsv, DiagnosticsNameLineAndField) {
  try {
    parse_batch_csv("1,2\n3,x\n");
    FAIL();
  } catch (const DataError& e) {
    EXPECT_NE(std::string(e.what()).find("line 2, field 2"), std::string::npos) << e.what();
  }
  try {
    parse_batch_csv("1,2\n\n3,4,5\n");
    FAIL();
  } catch (const DataError& e) {
    EXPECT_NE(std::string(e.what()).find("line 3"), std::string::npos) << e.what();
  }
  EXPECT_THROW(parse_batch_csv("1,2\n", 3), DataError);
  EXPECT_THROW(parse_batch_csv("1,inf\n"), DataError);
  EXPECT_THROW(parse_batch_csv("1,,2\n"), DataError);
}

TEST(BatchCsv, FormatRoundTrip) {
  Rng rng(9);
  const Matrix X = oracle::random_matrix(rng, 7, 3);
  const Matrix back = parse_batch_csv(format_batch_csv(X), 3);
  EXPECT_EQ(back.data().size(), X.data().size());
  EXPECT_TRUE(std::equal(back.data().begin(), back.data().end(), X.data().begin()));
}

}  // namespace
}  // namespace mbcset
