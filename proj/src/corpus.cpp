#include "nmm/corpus.hpp"

#include <algorithm>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace nmm {

uint64_t fnv1a64(const std::string& bytes) {
  uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

int Vocabulary::add(const std::string& word, long long count) {
  const int id = static_cast<int>(id_to_word_.size());
  id_to_word_.push_back(word);
  word_to_id_.emplace(word, id);
  counts_.push_back(count);
  return id;
}

Vocabulary Vocabulary::build(std::istream& text, int cap) {
  if (cap < 1) throw std::invalid_argument("build_vocab: cap must be >= 1");

  struct WordStat {
    long long count = 0;
    long long first_seen = 0;
  };
  std::unordered_map<std::string, WordStat> stats;
  long long unk_raw = 0;
  long long lines = 0;
  long long order = 0;

  std::string line, word;
  while (std::getline(text, line)) {
    ++lines;
    std::istringstream ls(line);
    while (ls >> word) {
      // Reserved tokens in the raw text do not compete for the cap.
      if (word == kUnkToken) {
        ++unk_raw;
        continue;
      }
      if (word == kEosToken) continue;
      auto [it, inserted] = stats.try_emplace(word);
      if (inserted) it->second.first_seen = order++;
      ++it->second.count;
    }
  }
  if (lines == 0) throw std::invalid_argument("build_vocab: empty token stream");

  std::vector<std::pair<std::string, WordStat>> ranked(stats.begin(), stats.end());
  std::sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) {
    if (a.second.count != b.second.count) return a.second.count > b.second.count;
    return a.second.first_seen < b.second.first_seen;
  });
  if (static_cast<long long>(ranked.size()) > cap) ranked.resize(cap);

  Vocabulary v;
  v.add(kUnkToken, unk_raw);
  v.add(kEosToken, lines);
  for (const auto& [w, stat] : ranked) v.add(w, stat.count);
  return v;
}

Vocabulary Vocabulary::build_from_string(const std::string& text, int cap) {
  std::istringstream in(text);
  return build(in, cap);
}

int Vocabulary::id(const std::string& w) const {
  auto it = word_to_id_.find(w);
  return it == word_to_id_.end() ? unk_id() : it->second;
}

bool Vocabulary::contains(const std::string& w) const {
  return word_to_id_.find(w) != word_to_id_.end();
}

const std::string& Vocabulary::word(int id) const {
  if (id < 0 || id >= size())
    throw std::invalid_argument("Vocabulary: id " + std::to_string(id) + " out of range");
  return id_to_word_[id];
}

std::string Vocabulary::serialize() const {
  std::string out;
  for (int i = 0; i < size(); ++i) {
    out += id_to_word_[i];
    out += '\t';
    out += std::to_string(i);
    out += '\t';
    out += std::to_string(counts_[i]);
    out += '\n';
  }
  return out;
}

Vocabulary Vocabulary::deserialize(std::istream& in) {
  Vocabulary v;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const size_t t1 = line.find('\t');
    const size_t t2 = line.find('\t', t1 + 1);
    if (t1 == std::string::npos || t2 == std::string::npos)
      throw std::runtime_error("vocabulary file: malformed line '" + line + "'");
    const std::string word = line.substr(0, t1);
    const int id = std::stoi(line.substr(t1 + 1, t2 - t1 - 1));
    const long long count = std::stoll(line.substr(t2 + 1));
    if (id != v.size())
      throw std::runtime_error("vocabulary file: non-contiguous id " + std::to_string(id));
    v.add(word, count);
  }
  if (v.size() < 2 || v.id_to_word_[0] != kUnkToken || v.id_to_word_[1] != kEosToken)
    throw std::runtime_error("vocabulary file: missing reserved <unk>/<eos> entries");
  return v;
}

void Vocabulary::save(const std::string& path) const {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write vocabulary file: " + path);
  const std::string bytes = serialize();
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw std::runtime_error("failed writing vocabulary file: " + path);
}

Vocabulary Vocabulary::load(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read vocabulary file: " + path);
  return deserialize(in);
}

EncodedCorpus encode(std::istream& text, const Vocabulary& vocab) {
  EncodedCorpus c;
  std::string line, word;
  while (std::getline(text, line)) {
    std::istringstream ls(line);
    while (ls >> word) {
      const int id = vocab.id(word);
      c.ids.push_back(id);
      if (id == vocab.unk_id()) ++c.unk_count;
    }
    c.ids.push_back(vocab.eos_id());
  }
  c.token_count = static_cast<long long>(c.ids.size());
  return c;
}

EncodedCorpus encode_string(const std::string& text, const Vocabulary& vocab) {
  std::istringstream in(text);
  return encode(in, vocab);
}

EncodedCorpus encode_file(const std::string& path, const Vocabulary& vocab) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read corpus file: " + path);
  return encode(in, vocab);
}

BatchCursor::BatchCursor(const EncodedCorpus& corpus, int batch_size, int bptt_len)
    : ids_(&corpus.ids), batch_(batch_size), bptt_(bptt_len) {
  if (batch_size < 1 || bptt_len < 1)
    throw std::invalid_argument("batches: batch_size and bptt_len must be >= 1");
  if (static_cast<long long>(corpus.ids.size()) < 2LL * batch_size)
    throw std::invalid_argument("batches: corpus of " + std::to_string(corpus.ids.size()) +
                                " tokens is too small for batch size " +
                                std::to_string(batch_size));
  stream_len_ = static_cast<long long>(corpus.ids.size()) / batch_size;
  blocks_ = static_cast<int>((stream_len_ - 1) / bptt_);
}

bool BatchCursor::next(Batch& out) {
  if (block_ >= blocks_) return false;
  out.inputs.assign(bptt_, std::vector<int>(batch_));
  out.targets.assign(bptt_, std::vector<int>(batch_));
  const long long offset = static_cast<long long>(block_) * bptt_;
  for (int b = 0; b < batch_; ++b) {
    const long long base = b * stream_len_ + offset;
    for (int t = 0; t < bptt_; ++t) {
      out.inputs[t][b] = (*ids_)[base + t];
      out.targets[t][b] = (*ids_)[base + t + 1];
    }
  }
  ++block_;
  return true;
}

}  // namespace nmm
