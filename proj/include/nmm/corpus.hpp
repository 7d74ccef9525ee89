#pragma once

// Text ingestion: frequency-capped vocabulary with reserved <unk>/<eos>
// tokens, id encoding, and contiguous-stream batch iteration for
// truncated-BPTT training.

#include <cstdint>
#include <iosfwd>
#include <string>
#include <unordered_map>
#include <vector>

namespace nmm {

uint64_t fnv1a64(const std::string& bytes);

class Vocabulary {
 public:
  static constexpr const char* kUnkToken = "<unk>";
  static constexpr const char* kEosToken = "<eos>";

  // Retains the `cap` most frequent words of the stream; ties break by
  // first occurrence. <unk> and <eos> are always present (ids 0 and 1)
  // and do not compete for the cap.
  static Vocabulary build(std::istream& text, int cap);
  static Vocabulary build_from_string(const std::string& text, int cap);

  int size() const { return static_cast<int>(id_to_word_.size()); }
  int unk_id() const { return 0; }
  int eos_id() const { return 1; }

  // Unknown words map to unk_id.
  int id(const std::string& word) const;
  bool contains(const std::string& word) const;
  const std::string& word(int id) const;
  long long count(int id) const { return counts_[id]; }

  // One "word<TAB>id<TAB>count" line per entry, id-ordered; the on-disk
  // format round-trips bit-identically.
  std::string serialize() const;
  static Vocabulary deserialize(std::istream& in);
  void save(const std::string& path) const;
  static Vocabulary load(const std::string& path);

  uint64_t hash() const { return fnv1a64(serialize()); }

 private:
  std::vector<std::string> id_to_word_;
  std::unordered_map<std::string, int> word_to_id_;
  std::vector<long long> counts_;

  int add(const std::string& word, long long count);
};

struct EncodedCorpus {
  std::vector<int> ids;       // one <eos> appended per input line
  long long token_count = 0;  // == ids.size()
  long long unk_count = 0;

  double unk_rate() const {
    return token_count ? static_cast<double>(unk_count) / static_cast<double>(token_count) : 0.0;
  }
};

EncodedCorpus encode(std::istream& text, const Vocabulary& vocab);
EncodedCorpus encode_string(const std::string& text, const Vocabulary& vocab);
EncodedCorpus encode_file(const std::string& path, const Vocabulary& vocab);

// One BPTT block: step-major id blocks, inputs[t][b] / targets[t][b] with
// targets shifted one position inside each stream.
struct Batch {
  std::vector<std::vector<int>> inputs;
  std::vector<std::vector<int>> targets;
  int batch_size() const { return inputs.empty() ? 0 : static_cast<int>(inputs[0].size()); }
  int steps() const { return static_cast<int>(inputs.size()); }
};

// Splits the corpus into batch_size equal contiguous streams (tail
// truncated) and walks them in lockstep; consecutive blocks of one stream
// are contiguous so recurrent state can carry across blocks.
class BatchCursor {
 public:
  BatchCursor(const EncodedCorpus& corpus, int batch_size, int bptt_len);

  bool next(Batch& out);
  void rewind() { block_ = 0; }

  int blocks() const { return blocks_; }
  int batch_size() const { return batch_; }
  long long total_targets() const {
    return static_cast<long long>(batch_) * blocks_ * bptt_;
  }

 private:
  const std::vector<int>* ids_;
  int batch_;
  int bptt_;
  long long stream_len_;
  int blocks_;
  int block_ = 0;
};

}  // namespace nmm
