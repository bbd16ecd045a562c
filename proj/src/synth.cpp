#include "qlab/synth.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <set>

namespace qlab {

namespace {

constexpr const char* kFunctionWords[] = {
    "the", "of", "to", "and", "a", "in", "for", "on", "that", "with", "said", "as",
    "its", "at", "by", "is", "from", "after", "new", "has", "was", "will", "over", "up",
    "more", "than", "an", "his", "their", "two", "first", "be", "but", "it", "have", "this",
};

std::vector<std::string> make_pseudo_words(std::size_t count, Rng& rng, std::set<std::string>& used) {
  static const std::string onsets[] = {"b", "c", "d", "f", "g", "h", "k", "l", "m", "n", "p",
                                       "r", "s", "t", "v", "w", "z", "br", "st", "tr", "gr",
                                       "pl", "ch", "sh", "kr", "dr"};
  static const std::string vowels[] = {"a", "e", "i", "o", "u", "ai", "ea", "io", "ou"};
  static const std::string codas[] = {"", "", "", "n", "r", "s", "l", "x", "m", "t"};
  std::uniform_int_distribution<std::size_t> on(0, std::size(onsets) - 1);
  std::uniform_int_distribution<std::size_t> vo(0, std::size(vowels) - 1);
  std::uniform_int_distribution<std::size_t> co(0, std::size(codas) - 1);
  std::uniform_int_distribution<int> syl(2, 3);
  std::vector<std::string> out;
  while (out.size() < count) {
    std::string w;
    const int n = syl(rng);
    for (int i = 0; i < n; ++i) w += onsets[on(rng)] + vowels[vo(rng)];
    w += codas[co(rng)];
    if (used.insert(w).second) out.push_back(std::move(w));
  }
  return out;
}

// Inverse-CDF sampler over ranks with weight 1/(rank+1).
class ZipfSampler {
 public:
  explicit ZipfSampler(std::size_t n) : cdf_(n) {
    double total = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      total += 1.0 / static_cast<double>(i + 1);
      cdf_[i] = total;
    }
    for (auto& v : cdf_) v /= total;
  }
  std::size_t operator()(Rng& rng) const {
    const double u = std::uniform_real_distribution<double>(0.0, 1.0)(rng);
    auto it = std::lower_bound(cdf_.begin(), cdf_.end(), u);
    return std::min<std::size_t>(static_cast<std::size_t>(it - cdf_.begin()), cdf_.size() - 1);
  }

 private:
  std::vector<double> cdf_;
};

struct Lexicon {
  std::vector<std::string> general;
  std::vector<std::vector<std::string>> topic;      // [class][rank]
  std::vector<std::vector<std::string>> companion;  // [class][rank]
};

Lexicon make_lexicon(const SynthCorpusSpec& spec, Rng& rng) {
  Lexicon lex;
  std::set<std::string> used(std::begin(kFunctionWords), std::end(kFunctionWords));
  lex.general.assign(std::begin(kFunctionWords), std::end(kFunctionWords));
  const auto extra = static_cast<std::size_t>(std::max(0, spec.general_words - static_cast<int>(lex.general.size())));
  for (auto& w : make_pseudo_words(extra, rng, used)) lex.general.push_back(std::move(w));

  const auto per_class = static_cast<std::size_t>(spec.topic_words_per_class);
  std::uniform_int_distribution<std::size_t> any_general(std::size(kFunctionWords), lex.general.size() - 1);
  for (int c = 0; c < spec.num_classes; ++c) {
    lex.topic.push_back(make_pseudo_words(per_class, rng, used));
    std::vector<std::string> comp(per_class);
    for (auto& w : comp) w = lex.general[any_general(rng)];
    lex.companion.push_back(std::move(comp));
  }
  return lex;
}

ClassProfile profile_of(const SynthCorpusSpec& spec, int label) {
  if (spec.profiles.empty()) return {spec.topic_rate, spec.companion_rate, 0.0};
  return spec.profiles[static_cast<std::size_t>(label) % spec.profiles.size()];
}

std::vector<std::string> make_words(const SynthCorpusSpec& spec, const Lexicon& lex, int label,
                                    int length, const ZipfSampler& general,
                                    const ZipfSampler& topical, Rng& rng) {
  const ClassProfile prof = profile_of(spec, label);
  std::bernoulli_distribution is_number(prof.number_rate);
  std::bernoulli_distribution is_topic(prof.topic_rate);
  std::bernoulli_distribution leak(spec.neighbor_leak);
  std::bernoulli_distribution follow(prof.companion_rate);
  std::uniform_int_distribution<int> number(0, 99);
  std::vector<std::string> words;
  while (static_cast<int>(words.size()) < length) {
    if (is_number(rng)) {
      words.push_back(std::to_string(number(rng)));
    } else if (is_topic(rng)) {
      const int c = leak(rng) ? (label + 1) % spec.num_classes : label;
      const std::size_t r = topical(rng);
      words.push_back(lex.topic[static_cast<std::size_t>(c)][r]);
      // The follow-up word is keyed by the article's own class, so the same
      // leaked topical word is continued differently in different classes.
      if (follow(rng)) words.push_back(lex.companion[static_cast<std::size_t>(label)][r]);
    } else {
      words.push_back(lex.general[general(rng)]);
    }
  }
  words.resize(static_cast<std::size_t>(length));
  return words;
}

std::string render(std::vector<std::string> words, Rng& rng, bool title) {
  std::bernoulli_distribution comma(0.08);
  std::string out;
  for (std::size_t i = 0; i < words.size(); ++i) {
    std::string w = words[i];
    if ((i == 0 || title) && !w.empty() && std::bernoulli_distribution(title ? 0.6 : 1.0)(rng))
      w[0] = static_cast<char>(std::toupper(static_cast<unsigned char>(w[0])));
    if (i) out += (std::bernoulli_distribution(0.03)(rng) ? "  " : " ");
    out += w;
    if (!title && i + 1 < words.size() && comma(rng)) out += ",";
  }
  if (!title) out += ".";
  return out;
}

RawArticle make_article(const SynthCorpusSpec& spec, const Lexicon& lex, int label,
                        const ZipfSampler& general, const ZipfSampler& topical, Rng& rng) {
  std::uniform_int_distribution<int> tlen(spec.title_min, spec.title_max);
  std::uniform_int_distribution<int> blen(spec.body_min, spec.body_max);
  RawArticle a;
  a.label = label;
  a.title = render(make_words(spec, lex, label, tlen(rng), general, topical, rng), rng, true);
  a.description = render(make_words(spec, lex, label, blen(rng), general, topical, rng), rng, false);
  if (std::bernoulli_distribution(0.2)(rng)) a.description = "AP - " + a.description;
  if (std::bernoulli_distribution(spec.label_noise)(rng))
    a.label = std::uniform_int_distribution<int>(0, spec.num_classes - 1)(rng);
  return a;
}

}  // namespace

SynthCorpus generate_news_corpus(const SynthCorpusSpec& spec) {
  if (spec.num_classes < 2) throw ConfigError("synthetic corpus needs >= 2 classes");
  if (spec.topic_words_per_class < 1 || spec.general_words < 1)
    throw ConfigError("synthetic corpus vocabulary sizes must be positive");
  Rng rng(spec.seed);
  const Lexicon lex = make_lexicon(spec, rng);
  const ZipfSampler general(lex.general.size());
  const ZipfSampler topical(static_cast<std::size_t>(spec.topic_words_per_class));

  SynthCorpus corpus;
  auto fill = [&](std::vector<RawArticle>& out, std::size_t n) {
    out.reserve(n);
    for (std::size_t i = 0; i < n; ++i) {
      const int label = static_cast<int>(i % static_cast<std::size_t>(spec.num_classes));
      out.push_back(make_article(spec, lex, label, general, topical, rng));
    }
    std::shuffle(out.begin(), out.end(), rng);
  };
  fill(corpus.train, spec.num_train);
  fill(corpus.test, spec.num_test);
  return corpus;
}

void write_articles_csv(const std::vector<RawArticle>& articles, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write '" + path.string() + "'");
  auto quote = [](const std::string& s) {
    std::string q = "\"";
    for (char c : s) {
      if (c == '"') q.push_back('"');
      q.push_back(c);
    }
    return q + "\"";
  };
  for (const auto& a : articles)
    out << (a.label + 1) << "," << quote(a.title) << "," << quote(a.description) << "\n";
}

Dataset to_dataset(const std::vector<RawArticle>& articles, int num_classes, Split split) {
  Dataset ds;
  ds.num_classes = num_classes;
  ds.split = split;
  ds.samples.reserve(articles.size());
  for (const auto& a : articles) {
    LabeledSample s;
    s.text = clean_text(a.title + " " + a.description);
    s.label = a.label;
    ds.samples.push_back(std::move(s));
  }
  return ds;
}

}  // namespace qlab
