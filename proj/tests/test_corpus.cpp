#include <fstream>
#include <set>

#include "doctest.h"
#include "helpers.hpp"
#include "qlab/corpus.hpp"

using namespace qlab;

namespace {

// character-by-character reading of the cleaning rules
std::string clean_oracle(const std::string& s) {
  std::string kept;
  for (char ch : s) {
    const char c = static_cast<char>(std::tolower(static_cast<unsigned char>(ch)));
    if ((c >= 'a' && c <= 'z') || (c >= '0' && c <= '9')) kept += c;
    else if (std::isspace(static_cast<unsigned char>(ch))) kept += ' ';
  }
  std::string out;
  for (char c : kept) {
    if (c == ' ' && (out.empty() || out.back() == ' ')) continue;
    out += c;
  }
  while (!out.empty() && out.back() == ' ') out.pop_back();
  return out;
}

Dataset labeled(std::vector<int> labels, int C) {
  Dataset d;
  d.num_classes = C;
  for (std::size_t i = 0; i < labels.size(); ++i) d.samples.push_back({"s" + std::to_string(i), {}, labels[i]});
  return d;
}

void write_file(const std::filesystem::path& p, const std::string& s) { std::ofstream(p, std::ios::binary) << s; }

}  // namespace

TEST_SUITE("corpus") {

TEST_CASE("clean_text rules") {
  CHECK(clean_text("Hello,  World!!") == "hello world");
  CHECK(clean_text("") == "");
  CHECK(clean_text("A1  b\tc.") == "a1 b c");
  CHECK(clean_text("  ...  ") == "");
}

TEST_CASE("clean_text matches oracle and is idempotent on random strings") {
  std::mt19937_64 rng(3);
  const std::string pool = "aZ9 \t\n.,!?-_'\"xyQ0";
  std::uniform_int_distribution<std::size_t> pick(0, pool.size() - 1), len(0, 40);
  for (int i = 0; i < 500; ++i) {
    std::string s;
    const auto n = len(rng);
    for (std::size_t k = 0; k < n; ++k) s += pool[pick(rng)];
    const auto c = clean_text(s);
    CHECK(c == clean_oracle(s));
    CHECK(clean_text(c) == c);
  }
}

TEST_CASE("build_vocab ranks by frequency then token") {
  const auto v = build_vocab({"a b a"}, 4);
  REQUIRE(v.size() == 4);
  CHECK(v.token(0) == "<pad>");
  CHECK(v.token(1) == "<unk>");
  CHECK(v.id("<pad>") == Vocab::kUnk);  // reserved names are not words
  CHECK(v.id("a") == 2);
  CHECK(v.id("b") == 3);

  const auto e = build_vocab({}, 10);
  CHECK(e.size() == 2);

  const auto y = build_vocab({"x y", "y"}, 3);
  CHECK(y.size() == 3);
  CHECK(y.contains("y"));
  CHECK_FALSE(y.contains("x"));

  // ties broken lexicographically
  const auto t = build_vocab({"c b a"}, 4);
  CHECK(t.token(2) == "a");
  CHECK(t.token(3) == "b");

  const auto f = build_vocab({"a a b"}, 10, 2);
  CHECK(f.size() == 3);

  CHECK_THROWS_AS(build_vocab({"a"}, 1), ConfigError);
}

TEST_CASE("Vocab rejects bad token lists") {
  CHECK_THROWS_AS(Vocab({"a", "b"}), DataError);
  CHECK_THROWS_AS(Vocab({"<pad>", "<unk>", "a", "a"}), DataError);
  CHECK_THROWS_AS(Vocab().token(7), DataError);
}

TEST_CASE("tokenize") {
  const Vocab v({"<pad>", "<unk>", "a", "b"});
  CHECK(tokenize("a b", v).ids == std::vector<int32_t>{2, 3});
  CHECK(tokenize("a z", v).ids == std::vector<int32_t>{2, Vocab::kUnk});
  CHECK(tokenize("", v).ids == std::vector<int32_t>{Vocab::kPad});
}

TEST_CASE("tokenize never emits an id outside the vocabulary") {
  const std::vector<std::string> docs{"the cat sat", "a dog ran far", "the end"};
  for (int size : {2, 3, 5, 50}) {
    const auto v = build_vocab(docs, size);
    for (const auto& d : docs)
      for (auto id : tokenize(d + " unseen", v).ids) {
        CHECK(id >= 0);
        CHECK(id < v.size());
      }
  }
}

TEST_CASE("inject_noise") {
  Rng rng(1);
  NoiseSpec none;
  CHECK(inject_noise("hello there", none, rng) == "hello there");

  NoiseSpec all{1.0, "a", 0};
  CHECK(inject_noise("xyz", all, rng) == "aaa");

  NoiseSpec bad{0.5, "", 0};
  CHECK_THROWS_AS(inject_noise("x", bad, rng), ConfigError);
  NoiseSpec neg{-0.1, "a", 0};
  CHECK_THROWS_AS(inject_noise("x", neg, rng), ConfigError);
}

TEST_CASE("inject_noise substitution rate concentrates") {
  // changed fraction = eps * (1 - 1/|alphabet|) in expectation; the source
  // text uses a character outside the alphabet so every draw counts
  const std::string text(10000, '#');
  NoiseSpec spec{0.1, "abcdefghijklmnopqrstuvwxyz0123456789 ", 0};
  int inside = 0;
  for (uint64_t s = 0; s < 200; ++s) {
    Rng rng(s);
    const auto out = inject_noise(text, spec, rng);
    REQUIRE(out.size() == text.size());
    std::size_t changed = 0;
    for (std::size_t i = 0; i < out.size(); ++i) changed += out[i] != text[i];
    const double f = static_cast<double>(changed) / 10000.0;
    inside += (f >= 0.08 && f <= 0.12);
  }
  CHECK(inside == 200);
}

TEST_CASE("load_dataset csv") {
  const auto dir = qtest::temp_dir("corpus_csv");
  write_file(dir / "a.csv", "3,\"Stocks up\",\"Markets rallied\"\n1,\"Hi, there\",\"x\"\n");
  const auto d = load_dataset(dir / "a.csv", DatasetFormat::csv, 4);
  REQUIRE(d.size() == 2);
  CHECK(d.samples[0].label == 2);
  CHECK(d.samples[0].text == "stocks up markets rallied");
  CHECK(d.samples[1].text == "hi there x");
  CHECK(d.num_classes == 4);

  write_file(dir / "empty.csv", "");
  CHECK_THROWS_WITH_AS(load_dataset(dir / "empty.csv", DatasetFormat::csv), "empty dataset", DataError);

  write_file(dir / "zero.csv", "1,\"a\",\"b\"\n0,\"a\",\"b\"\n");
  CHECK_THROWS_AS(load_dataset(dir / "zero.csv", DatasetFormat::csv), DataError);

  write_file(dir / "range.csv", "5,\"a\",\"b\"\n");
  CHECK_THROWS_AS(load_dataset(dir / "range.csv", DatasetFormat::csv, 4), DataError);

  // label,text rows are accepted; a bare label is not
  write_file(dir / "two.csv", "1,\"a b\"\n");
  CHECK(load_dataset(dir / "two.csv", DatasetFormat::csv).samples[0].text == "a b");
  write_file(dir / "short.csv", "1\n");
  CHECK_THROWS_AS(load_dataset(dir / "short.csv", DatasetFormat::csv), DataError);

  CHECK_THROWS_AS(load_dataset(dir / "missing.csv", DatasetFormat::csv), DataError);
}

TEST_CASE("load_dataset names the malformed line") {
  const auto dir = qtest::temp_dir("corpus_line");
  write_file(dir / "a.csv", "1,\"a\",\"b\"\n2,\"c\",\"d\"\nx,\"e\",\"f\"\n");
  try {
    load_dataset(dir / "a.csv", DatasetFormat::csv);
    FAIL("expected an error");
  } catch (const DataError& e) {
    CHECK(std::string(e.what()).find("line 3") != std::string::npos);
  }
}

TEST_CASE("load_dataset jsonl and csv round trip") {
  const auto dir = qtest::temp_dir("corpus_jsonl");
  write_file(dir / "a.jsonl", "{\"label\": 1, \"text\": \"Good Game!\"}\n\n{\"label\": 0, \"text\": \"rates\"}\n");
  const auto d = load_dataset(dir / "a.jsonl", DatasetFormat::jsonl);
  REQUIRE(d.size() == 2);
  CHECK(d.num_classes == 2);
  CHECK(d.samples[0].text == "good game");
  CHECK(d.samples[1].label == 0);

  write_csv(d, dir / "b.csv");
  const auto back = load_dataset(dir / "b.csv", DatasetFormat::csv, 2);
  REQUIRE(back.size() == 2);
  for (std::size_t i = 0; i < 2; ++i) {
    CHECK(back.samples[i].text == d.samples[i].text);
    CHECK(back.samples[i].label == d.samples[i].label);
  }
  CHECK_THROWS_AS(parse_dataset_format("xml"), ConfigError);
}

TEST_CASE("attach_tokens and truncate") {
  auto d = labeled({0, 1}, 2);
  d.samples[0].text = "a b a";
  d.samples[1].text = "";
  const Vocab v({"<pad>", "<unk>", "a"});
  attach_tokens(d, v);
  CHECK(d.samples[0].tokens.ids == std::vector<int32_t>{2, 1, 2});
  CHECK(d.samples[1].tokens.ids == std::vector<int32_t>{0});
  truncate_tokens(d, 2);
  CHECK(d.samples[0].tokens.ids == std::vector<int32_t>{2, 1});
}

TEST_CASE("split_dataset") {
  const auto d = labeled({0, 1, 0, 1, 0, 1, 0, 1, 0, 1}, 2);
  const auto s = split_dataset(d, 0.8, 5);
  CHECK(s.train.size() == 8);
  CHECK(s.val.size() == 2);
  CHECK(s.train.num_classes == 2);
  CHECK(s.val.num_classes == 2);
  const auto t = split_dataset(d, 0.8, 5);
  for (std::size_t i = 0; i < 8; ++i) CHECK(t.train.samples[i].text == s.train.samples[i].text);

  CHECK(split_dataset(labeled(std::vector<int>(7, 0), 1), 0.8, 1).train.size() == 6);  // ceil(5.6)
  CHECK_THROWS_AS(split_dataset(labeled({0}, 1), 0.8, 1), DataError);
}

TEST_CASE("split_dataset puts every sample in validation under some seed") {
  const auto d = labeled(std::vector<int>(100, 0), 1);
  std::set<std::string> seen;
  for (uint64_t s = 0; s < 10; ++s)
    for (const auto& x : split_dataset(d, 0.8, s).val.samples) seen.insert(x.text);
  // 100 * 0.8^10 ~ 10.7 expected misses for a uniform shuffle; use 30 seeds for the strict check
  for (uint64_t s = 10; s < 40; ++s)
    for (const auto& x : split_dataset(d, 0.8, s).val.samples) seen.insert(x.text);
  CHECK(seen.size() == 100);
}

TEST_CASE("sample_calibration schemes") {
  std::vector<int> labels;
  for (int i = 0; i < 400; ++i) labels.push_back(i % 4);
  const auto d = labeled(labels, 4);

  CalibrationPlan cc{CalibrationScheme::conditional, 0, 0.25, 1};
  const auto c = sample_calibration(d, cc);
  CHECK(c.size() == 100);
  CHECK(c.class_counts() == std::vector<std::size_t>{25, 25, 25, 25});
  CHECK(c.split == Split::calib);

  CalibrationPlan cov{CalibrationScheme::coverage, 1, 0.125, 1};
  const auto k1 = sample_calibration(d, cov);
  CHECK(k1.size() == 50);
  CHECK(k1.class_counts() == std::vector<std::size_t>{50, 0, 0, 0});

  CalibrationPlan all{CalibrationScheme::unconditional, 0, 1.0, 1};
  const auto u = sample_calibration(d, all);
  CHECK(u.size() == 400);
  std::set<std::string> texts;
  for (const auto& s : u.samples) texts.insert(s.text);
  CHECK(texts.size() == 400);

  // conditional remainder goes to the lowest classes
  CalibrationPlan odd{CalibrationScheme::conditional, 0, 0.0175, 2};  // m = 7
  CHECK(sample_calibration(d, odd).class_counts() == std::vector<std::size_t>{2, 2, 2, 1});
}

TEST_CASE("sample_calibration conditional counts differ by at most one") {
  std::mt19937_64 rng(9);
  std::uniform_int_distribution<int> lab(0, 4);
  std::vector<int> labels;
  for (int i = 0; i < 1000; ++i) labels.push_back(lab(rng));
  const auto d = labeled(labels, 5);
  for (double f : {0.01, 0.05, 0.13, 0.2, 0.3}) {
    const auto counts = sample_calibration(d, {CalibrationScheme::conditional, 0, f, 4}).class_counts();
    const auto [lo, hi] = std::minmax_element(counts.begin(), counts.end());
    CHECK(*hi - *lo <= 1);
  }
}

TEST_CASE("sample_calibration errors and determinism") {
  const auto d = labeled({0, 0, 0, 0, 0, 0, 1, 2}, 3);
  try {
    sample_calibration(d, {CalibrationScheme::conditional, 0, 1.0, 1});
    FAIL("expected an error");
  } catch (const DataError& e) {
    CHECK(std::string(e.what()).find("class 1") != std::string::npos);
  }
  CHECK_THROWS_AS(sample_calibration(d, {CalibrationScheme::coverage, 4, 0.5, 1}), ConfigError);
  CHECK_THROWS_AS(sample_calibration(d, {CalibrationScheme::coverage, 0, 0.5, 1}), ConfigError);
  CHECK_THROWS_AS(sample_calibration(d, {CalibrationScheme::unconditional, 0, 0.0, 1}), ConfigError);

  CalibrationPlan p{CalibrationScheme::unconditional, 0, 0.5, 77};
  const auto a = sample_calibration(d, p), b = sample_calibration(d, p);
  REQUIRE(a.size() == b.size());
  for (std::size_t i = 0; i < a.size(); ++i) CHECK(a.samples[i].text == b.samples[i].text);
}

TEST_CASE("strip_labels keeps token order") {
  auto d = labeled({2, 0}, 3);
  d.samples[0].tokens.ids = {4, 5};
  d.samples[1].tokens.ids = {6};
  const auto s = strip_labels(d);
  REQUIRE(s.size() == 2);
  CHECK(s[0].ids == std::vector<int32_t>{4, 5});
  CHECK(s[1].ids == std::vector<int32_t>{6});
}

TEST_CASE("Dataset validate") {
  CHECK_THROWS_AS(Dataset{}.validate(), DataError);
  CHECK_THROWS_AS(labeled({0, 3}, 3).validate(), DataError);
  CHECK_NOTHROW(labeled({0, 2}, 3).validate());
  CHECK(parse_calibration_scheme("coverage") == CalibrationScheme::coverage);
  CHECK_THROWS_AS(parse_calibration_scheme("random"), ConfigError);
}

}  // TEST_SUITE
