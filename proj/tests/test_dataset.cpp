#include <gtest/gtest.h>

#include <random>
#include <sstream>
#include <string>

#include "oracles.hpp"
#include "rcal/dataset.hpp"

using namespace rcal;

namespace {

SampleSet jsonl(const std::string& text) {
  std::istringstream in(text);
  return parse_samples_jsonl(in);
}

std::string error_of(auto&& fn) {
  try {
    fn();
  } catch (const DataError& e) {
    return e.what();
  }
  return {};
}

}  // namespace

TEST(ParseSamples, SingleRecord) {
  auto set = jsonl(R"({"id":"a","reward":1.5,"text":"hi"})");
  ASSERT_EQ(set.size(), 1U);
  EXPECT_EQ(set[0].id, "a");
  EXPECT_EQ(set[0].reward, 1.5);
  EXPECT_EQ(set[0].text, "hi");
}

TEST(ParseSamples, MissingRewardNamesLine) {
  auto msg = error_of([] { jsonl(R"({"id":"a"})"); });
  EXPECT_NE(msg.find("missing reward at line 1"), std::string::npos) << msg;
}

TEST(ParseSamples, DuplicateId) {
  auto msg = error_of([] { jsonl("{\"id\":\"a\",\"reward\":1}\n{\"id\":\"a\",\"reward\":2}\n"); });
  EXPECT_NE(msg.find("duplicate"), std::string::npos) << msg;
  EXPECT_NE(msg.find("line 2"), std::string::npos) << msg;
}

TEST(ParseSamples, MalformedLineCarriesLineNumber) {
  auto msg = error_of([] { jsonl("{\"id\":\"a\",\"reward\":1}\n{oops\n"); });
  EXPECT_NE(msg.find("line 2"), std::string::npos) << msg;
}

TEST(ParseSamples, NonFiniteRewardRejected) {
  EXPECT_THROW(jsonl(R"({"id":"a","reward":1e400})"), DataError);
  EXPECT_THROW(jsonl(R"({"id":"a","reward":"nan"})"), DataError);
}

TEST(ParseSamples, UnknownFieldsIgnoredAndOrderKept) {
  auto set = jsonl(
      "{\"id\":\"z\",\"reward\":1,\"extra\":[1,2]}\n\n"
      "{\"id\":\"b\",\"reward\":2,\"group\":\"m\",\"prompt_id\":7,\"characteristics\":{\"length\":3}}\n");
  ASSERT_EQ(set.size(), 2U);
  EXPECT_EQ(set[0].id, "z");
  EXPECT_EQ(set[1].group, "m");
  EXPECT_EQ(set[1].prompt_id, "7");
  EXPECT_EQ(set[1].characteristics.at("length"), 3.0);
}

TEST(ParseSamples, CsvWithQuotingAndCharacteristics) {
  std::istringstream in(
      "id,reward,group,text,c_length,ignored\r\n"
      "a,1.5,m1,\"hello, \"\"world\"\"\",12,x\r\n"
      "b,-2,,\"two\nlines\",,y\r\n");
  auto set = parse_samples(in, SampleFormat::csv);
  ASSERT_EQ(set.size(), 2U);
  EXPECT_EQ(set[0].text, "hello, \"world\"");
  EXPECT_EQ(set[0].characteristics.at("length"), 12.0);
  EXPECT_EQ(set[0].group, "m1");
  EXPECT_FALSE(set[1].group.has_value());
  EXPECT_EQ(set[1].text, "two\nlines");
  EXPECT_TRUE(set[1].characteristics.empty());
  EXPECT_EQ(set[1].reward, -2.0);
}

TEST(ParseSamples, CsvErrors) {
  std::istringstream no_reward("id,text\na,x\n");
  EXPECT_THROW(parse_samples(no_reward, SampleFormat::csv), DataError);
  std::istringstream bad_number("id,reward\na,1.5x\n");
  auto msg = error_of([&] { parse_samples(bad_number, SampleFormat::csv); });
  EXPECT_NE(msg.find("line 2"), std::string::npos) << msg;
  std::istringstream ragged("id,reward\na,1,2\n");
  EXPECT_THROW(parse_samples(ragged, SampleFormat::csv), DataError);
}

TEST(ParseSamples, RoundTripProperty) {
  std::mt19937_64 rng(11);
  std::uniform_real_distribution<double> u(-1e6, 1e6);
  for (int trial = 0; trial < 20; ++trial) {
    SampleSet set;
    for (int i = 0; i < 15; ++i) {
      ScoredSample s;
      s.id = "id-" + std::to_string(trial) + "-" + std::to_string(i);
      s.reward = u(rng);
      if (i % 2) s.group = "g" + std::to_string(i % 3);
      if (i % 3) s.prompt_id = "p" + std::to_string(i / 2);
      if (i % 4) s.text = "line \"quoted\"\n\té ü **b**";
      if (i % 5) s.characteristics["length"] = u(rng);
      if (i % 7) s.characteristics["markdown"] = static_cast<double>(i);
      set.add(std::move(s));
    }
    std::ostringstream out;
    write_samples_jsonl(out, set);
    EXPECT_EQ(jsonl(out.str()), set);
  }
}

TEST(ParsePairs, AutoNumberingAndOrder) {
  std::istringstream in(
      "{\"better_id\":\"a\",\"worse_id\":\"b\"}\n"
      "{\"pair_id\":\"x\",\"better_id\":\"c\",\"worse_id\":\"d\"}\n"
      "{\"better_id\":\"e\",\"worse_id\":\"f\"}\n");
  auto pairs = parse_pairs(in);
  ASSERT_EQ(pairs.size(), 3U);
  EXPECT_EQ(pairs[0], (PreferencePair{"0", "a", "b"}));
  EXPECT_EQ(pairs[1].pair_id, "x");
  EXPECT_EQ(pairs[2].pair_id, "2");
  EXPECT_EQ(pairs[2].better_id, "e");
}

TEST(ParsePairs, SameIdRejected) {
  std::istringstream in(R"({"better_id":"a","worse_id":"a"})");
  EXPECT_THROW(parse_pairs(in), DataError);
}

TEST(ParsePairs, UnresolvableIdNamed) {
  auto set = jsonl("{\"id\":\"a\",\"reward\":1}\n");
  std::vector<PreferencePair> pairs{{"0", "a", "ghost"}};
  auto msg = error_of([&] { validate_pairs(pairs, set); });
  EXPECT_NE(msg.find("ghost"), std::string::npos) << msg;
}

TEST(CharLength, CountsCodePoints) {
  EXPECT_EQ(char_length(""), 0.0);
  EXPECT_EQ(char_length("abc"), 3.0);
  const std::string hello = "h\xC3\xA9llo";  // héllo
  EXPECT_EQ(char_length(hello), static_cast<double>(oracle::code_points(hello)));
  EXPECT_EQ(char_length(hello), 5.0);
  EXPECT_EQ(char_length("\xF0\x9F\x98\x80x"), 2.0);  // emoji + x
}

TEST(MarkdownFeatures, Examples) {
  EXPECT_EQ(markdown_features("plain prose only"), 0.0);
  EXPECT_EQ(markdown_features("## T\n- a\n- b\n**x**"), 4.0);
  EXPECT_EQ(oracle::markdown_count("## T\n- a\n- b\n**x**"), 4.0);
  EXPECT_EQ(markdown_features("1. a\n2. b"), 2.0);
  EXPECT_EQ(oracle::markdown_count("1. a\n2. b"), 2.0);
}

TEST(MarkdownFeatures, EdgePatterns) {
  EXPECT_EQ(markdown_features("####### seven"), 0.0);
  EXPECT_EQ(markdown_features("#nospace"), 0.0);
  EXPECT_EQ(markdown_features("   ### indented"), 1.0);
  EXPECT_EQ(markdown_features("****"), 0.0);
  EXPECT_EQ(markdown_features("**a** and **b**"), 2.0);
  EXPECT_EQ(markdown_features("- **a**"), 2.0);
  EXPECT_EQ(markdown_features("3) x\n-no"), 1.0);
}

TEST(MarkdownFeatures, MatchesRegexOracleOnRandomCorpus) {
  const std::vector<std::string> pieces{
      "# ", "## ", "####### ", "#", "- ", "* ", "+ ", "-", "1. ", "12) ", "3.", "  ", "\t",
      "**", "*", "word", " ", "x", "***", "**b**", "é", "1", ".", ")"};
  std::mt19937 rng(2024);
  std::uniform_int_distribution<std::size_t> pick(0, pieces.size() - 1);
  std::uniform_int_distribution<int> line_count(1, 12), piece_count(0, 8);
  for (int doc = 0; doc < 50; ++doc) {
    std::string text;
    const int lines = line_count(rng);
    for (int l = 0; l < lines; ++l) {
      const int k = piece_count(rng);
      for (int p = 0; p < k; ++p) text += pieces[pick(rng)];
      if (l + 1 < lines) text += '\n';
    }
    EXPECT_EQ(markdown_features(text), oracle::markdown_count(text)) << "document:\n" << text;
  }
}

TEST(ExtractCharacteristic, ExplicitWinsOverText) {
  auto set = jsonl(
      "{\"id\":\"a\",\"reward\":1,\"text\":\"ab\",\"characteristics\":{\"length\":42}}\n"
      "{\"id\":\"b\",\"reward\":1,\"text\":\"abc\"}\n");
  EXPECT_EQ(extract_characteristic(set, "length"), (std::vector<double>{42.0, 3.0}));
  EXPECT_EQ(extract_characteristic(set, "length"), extract_characteristic(set, "length"));
}

TEST(ExtractCharacteristic, MissingSourceNamesSample) {
  auto set = jsonl("{\"id\":\"a\",\"reward\":1,\"text\":\"x\"}\n{\"id\":\"lonely\",\"reward\":1}\n");
  auto msg = error_of([&] { extract_characteristic(set, "length"); });
  EXPECT_NE(msg.find("lonely"), std::string::npos) << msg;
  // only length and markdown can be derived from text
  EXPECT_THROW(extract_characteristic(set, "politeness"), DataError);
}

TEST(ZScore, Examples) {
  auto z = zscore_normalize(Matrix::from_columns({{5, 5, 5}, {0, 2, 1}}));
  EXPECT_EQ(z.column(0), (std::vector<double>{0, 0, 0}));
  auto two = zscore_normalize(Matrix::from_columns({{0, 2}}));
  EXPECT_DOUBLE_EQ(two(0, 0), -1.0);
  EXPECT_DOUBLE_EQ(two(1, 0), 1.0);
}

TEST(ZScore, MomentsProperty) {
  std::mt19937_64 rng(5);
  std::lognormal_distribution<double> len(6.0, 1.0);
  std::normal_distribution<double> g(1e4, 3.0);
  for (int trial = 0; trial < 25; ++trial) {
    const std::size_t n = 2 + trial * 37;
    std::vector<double> a(n), b(n);
    for (std::size_t i = 0; i < n; ++i) {
      a[i] = len(rng);
      b[i] = g(rng);
    }
    auto z = zscore_normalize(Matrix::from_columns({a, b}));
    for (std::size_t c = 0; c < 2; ++c) {
      const auto col = z.column(c);
      double mean = 0, ss = 0;
      for (double v : col) mean += v;
      mean /= static_cast<double>(n);
      for (double v : col) ss += (v - mean) * (v - mean);
      EXPECT_LE(std::abs(mean), 1e-12);
      EXPECT_LE(std::abs(std::sqrt(ss / static_cast<double>(n)) - 1.0), 1e-12);
    }
  }
}
