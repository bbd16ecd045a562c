#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "qlab/corpus.hpp"

namespace qlab {

// Per-class style. Real news categories are not exchangeable: some are far
// more formulaic (sports results, market reports) and use more numerals.
struct ClassProfile {
  double topic_rate = 0.12;
  double companion_rate = 0.5;
  double number_rate = 0.0;  // per-token probability of a numeral
};

// Seeded generator for a topic-classification corpus shaped like AG News:
// a Zipfian shared vocabulary plus one topical vocabulary per class, where
// each class leaks some topical words to its neighbour and topical words
// carry class-specific follow-up words.
struct SynthCorpusSpec {
  int num_classes = 4;
  std::size_t num_train = 2000;
  std::size_t num_test = 500;
  int general_words = 1500;
  int topic_words_per_class = 150;
  double topic_rate = 0.12;      // per-token probability of a topical word
  double neighbor_leak = 0.25;   // topical word drawn from the next class instead
  double companion_rate = 0.5;   // topical word followed by its class companion
  double label_noise = 0.02;
  // Indexed by label, cycled if shorter than num_classes. Empty means every
  // class uses topic_rate / companion_rate and no numerals. Defaults loosely
  // follow world / sports / business / sci-tech news.
  std::vector<ClassProfile> profiles{{0.10, 0.30, 0.01}, {0.20, 0.85, 0.08}, {0.16, 0.60, 0.05}, {0.16, 0.60, 0.01}};
  int title_min = 4, title_max = 9;
  int body_min = 10, body_max = 30;
  uint64_t seed = 2024;
};

struct RawArticle {
  int label = 0;  // 0-based
  std::string title;
  std::string description;
};

struct SynthCorpus {
  std::vector<RawArticle> train;
  std::vector<RawArticle> test;
};

SynthCorpus generate_news_corpus(const SynthCorpusSpec& spec);

// Writes (class_index_1based, title, description) rows.
void write_articles_csv(const std::vector<RawArticle>& articles, const std::filesystem::path& path);

Dataset to_dataset(const std::vector<RawArticle>& articles, int num_classes, Split split);

}  // namespace qlab
