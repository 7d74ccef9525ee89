#pragma once

// Versioned binary checkpoint: header (format version, mixture spec,
// vocabulary hash, precision), named parameter blocks in declaration
// order, and an optional training-state section so interrupted runs
// resume deterministically. Write -> read is bit-exact.

#include <cstdint>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include "nmm/mixture.hpp"
#include "nmm/training.hpp"

namespace nmm {

namespace ckpt_detail {

constexpr char kMagic[8] = {'N', 'M', 'M', 'C', 'K', 'P', 'T', '\0'};
constexpr uint32_t kVersion = 1;

inline void write_bytes(std::ostream& out, const void* p, size_t n) {
  out.write(static_cast<const char*>(p), static_cast<std::streamsize>(n));
  if (!out) throw std::runtime_error("checkpoint: write failed");
}

inline void read_bytes(std::istream& in, void* p, size_t n) {
  in.read(static_cast<char*>(p), static_cast<std::streamsize>(n));
  if (static_cast<size_t>(in.gcount()) != n)
    throw std::runtime_error("checkpoint: truncated file");
}

inline void write_u32(std::ostream& out, uint32_t v) { write_bytes(out, &v, sizeof v); }
inline void write_u64(std::ostream& out, uint64_t v) { write_bytes(out, &v, sizeof v); }
inline void write_f64(std::ostream& out, double v) { write_bytes(out, &v, sizeof v); }

inline uint32_t read_u32(std::istream& in) {
  uint32_t v;
  read_bytes(in, &v, sizeof v);
  return v;
}
inline uint64_t read_u64(std::istream& in) {
  uint64_t v;
  read_bytes(in, &v, sizeof v);
  return v;
}
inline double read_f64(std::istream& in) {
  double v;
  read_bytes(in, &v, sizeof v);
  return v;
}

inline void write_string(std::ostream& out, const std::string& s) {
  write_u32(out, static_cast<uint32_t>(s.size()));
  write_bytes(out, s.data(), s.size());
}

inline std::string read_string(std::istream& in) {
  const uint32_t n = read_u32(in);
  if (n > (1u << 20)) throw std::runtime_error("checkpoint: implausible string length");
  std::string s(n, '\0');
  read_bytes(in, s.data(), n);
  return s;
}

template <typename T>
void write_matrix(std::ostream& out, const std::string& name, const Matrix<T>& m) {
  write_string(out, name);
  write_u32(out, static_cast<uint32_t>(m.rows()));
  write_u32(out, static_cast<uint32_t>(m.cols()));
  write_bytes(out, m.data(), m.size() * sizeof(T));
}

template <typename T>
void read_matrix_into(std::istream& in, const std::string& expected_name, Matrix<T>& m) {
  const std::string name = read_string(in);
  if (name != expected_name)
    throw std::runtime_error("checkpoint: expected block '" + expected_name + "', found '" +
                             name + "'");
  const uint32_t rows = read_u32(in);
  const uint32_t cols = read_u32(in);
  if (rows != static_cast<uint32_t>(m.rows()) || cols != static_cast<uint32_t>(m.cols()))
    throw std::runtime_error("checkpoint: block '" + name + "' has shape " +
                             Matrix<T>::shape_str(rows, cols) + ", expected " + m.shape());
  read_bytes(in, m.data(), m.size() * sizeof(T));
}

}  // namespace ckpt_detail

template <typename T>
void save_checkpoint(const std::string& path, NmmModel<T>& model, uint64_t vocab_hash,
                     const TrainState<T>* train_state = nullptr) {
  using namespace ckpt_detail;
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("checkpoint: cannot write " + path);

  write_bytes(out, kMagic, sizeof kMagic);
  write_u32(out, kVersion);
  write_u32(out, static_cast<uint32_t>(sizeof(T)));
  const MixtureSpec& spec = model.spec();
  write_string(out, render_spec(spec.components));
  write_u32(out, static_cast<uint32_t>(spec.embedding_size));
  write_u32(out, static_cast<uint32_t>(spec.mixture_size));
  write_u32(out, static_cast<uint32_t>(spec.vocab_size));
  write_u64(out, vocab_hash);

  auto blocks = model.param_blocks();
  write_u32(out, static_cast<uint32_t>(blocks.size()));
  for (const ParamBlock<T>& b : blocks) write_matrix(out, b.name, *b.value);

  write_u32(out, train_state ? 1u : 0u);
  if (train_state) {
    write_u32(out, static_cast<uint32_t>(train_state->epoch));
    write_f64(out, train_state->lr);
    write_f64(out, train_state->last_valid_ll);
    write_f64(out, train_state->best_valid_ll);
    write_u32(out, train_state->halving ? 1u : 0u);
    write_u64(out, static_cast<uint64_t>(train_state->step_index));
    write_u64(out, train_state->rng.seed());
    for (uint64_t w : train_state->rng.state()) write_u64(out, w);
    write_u32(out, static_cast<uint32_t>(train_state->momentum.size()));
    for (size_t i = 0; i < train_state->momentum.size(); ++i)
      write_matrix(out, blocks[i].name, train_state->momentum[i]);
  }
  out.flush();
  if (!out) throw std::runtime_error("checkpoint: write failed for " + path);
}

template <typename T>
struct Checkpoint {
  MixtureSpec spec;
  uint64_t vocab_hash = 0;
  NmmModel<T> model;
  std::optional<TrainState<T>> train_state;
};

// Refuses on bad magic/version, precision mismatch, or truncation; a
// failed load never yields a partially filled model.
template <typename T>
Checkpoint<T> load_checkpoint(const std::string& path) {
  using namespace ckpt_detail;
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("checkpoint: cannot read " + path);

  char magic[8];
  read_bytes(in, magic, sizeof magic);
  if (!std::equal(magic, magic + 8, kMagic))
    throw std::runtime_error("checkpoint: " + path + " is not a checkpoint file");
  const uint32_t version = read_u32(in);
  if (version != kVersion)
    throw std::runtime_error("checkpoint: unsupported format version " +
                             std::to_string(version));
  const uint32_t precision = read_u32(in);
  if (precision != sizeof(T))
    throw std::runtime_error("checkpoint: stores " + std::to_string(precision * 8) +
                             "-bit parameters, loader expects " +
                             std::to_string(sizeof(T) * 8) + "-bit");

  MixtureSpec spec;
  spec.components = parse_spec(read_string(in));
  spec.embedding_size = static_cast<int>(read_u32(in));
  spec.mixture_size = static_cast<int>(read_u32(in));
  spec.vocab_size = static_cast<int>(read_u32(in));
  const uint64_t vocab_hash = read_u64(in);

  Checkpoint<T> ck{spec, vocab_hash, NmmModel<T>(spec), std::nullopt};
  auto blocks = ck.model.param_blocks();
  const uint32_t n_blocks = read_u32(in);
  if (n_blocks != blocks.size())
    throw std::runtime_error("checkpoint: has " + std::to_string(n_blocks) +
                             " parameter blocks, model needs " +
                             std::to_string(blocks.size()));
  for (ParamBlock<T>& b : blocks) read_matrix_into(in, b.name, *b.value);

  if (read_u32(in)) {
    TrainState<T> st;
    st.epoch = static_cast<int>(read_u32(in));
    st.lr = read_f64(in);
    st.last_valid_ll = read_f64(in);
    st.best_valid_ll = read_f64(in);
    st.halving = read_u32(in) != 0;
    st.step_index = static_cast<long long>(read_u64(in));
    st.rng = Rng(read_u64(in));
    std::array<uint64_t, 4> rng_state;
    for (auto& w : rng_state) w = read_u64(in);
    st.rng.set_state(rng_state);
    const uint32_t n_mom = read_u32(in);
    if (n_mom != blocks.size())
      throw std::runtime_error("checkpoint: momentum buffers do not match parameter blocks");
    for (ParamBlock<T>& b : blocks) {
      Matrix<T> m(b.value->rows(), b.value->cols());
      read_matrix_into(in, b.name, m);
      st.momentum.push_back(std::move(m));
    }
    ck.train_state = std::move(st);
  }
  return ck;
}

}  // namespace nmm
