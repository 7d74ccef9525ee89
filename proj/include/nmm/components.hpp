#pragma once

// The component model kinds behind one interface. Each component embeds
// its own inputs from the shared embedding table, produces a feature
// vector per step, and backpropagates feature gradients through an
// unrolled window into its parameters and the embedding table. Gradient
// flow is truncated at the window start.

#include <array>
#include <memory>
#include <string>
#include <vector>

#include "nmm/linalg.hpp"
#include "nmm/mixture_spec.hpp"

namespace nmm {

template <typename T>
struct ParamBlock {
  std::string name;
  Matrix<T>* value;
  Matrix<T>* grad;
  bool decay;  // weight matrices decay, biases do not
};

// ---------------------------------------------------------------------------
// Step-level math, stateless. These are the single-equation building blocks;
// the stateful window components below wrap them.

template <typename T>
struct FnnParams {
  std::vector<Matrix<T>> context_w;  // V^i, i = 1..N-1, each emb x hidden
  std::vector<Matrix<T>> hidden_w;   // extra hidden layers, each hidden x hidden
  std::vector<Matrix<T>> bias;       // one 1 x hidden per layer
};

// H = relu(sum_i E^{t-i} V^i + b), then optional deeper relu layers.
// context_embs[i-1] is E^{t-i}. Caches the preactivation of every layer
// when `preacts` is given.
template <typename T>
Matrix<T> fnn_forward(const std::vector<Matrix<T>>& context_embs, const FnnParams<T>& p,
                      std::vector<Matrix<T>>* preacts = nullptr) {
  if (context_embs.size() != p.context_w.size())
    throw std::invalid_argument("fnn_forward: got " + std::to_string(context_embs.size()) +
                                " context vectors, expected " +
                                std::to_string(p.context_w.size()));
  Matrix<T> pre(context_embs[0].rows(), p.context_w[0].cols());
  for (size_t i = 0; i < context_embs.size(); ++i)
    matmul_acc(context_embs[i], p.context_w[i], pre);
  add_row_inplace(pre, p.bias[0]);
  if (preacts) preacts->push_back(pre);
  Matrix<T> h = relu(pre);
  for (size_t l = 0; l < p.hidden_w.size(); ++l) {
    Matrix<T> lp = matmul(h, p.hidden_w[l]);
    add_row_inplace(lp, p.bias[l + 1]);
    if (preacts) preacts->push_back(lp);
    h = relu(lp);
  }
  return h;
}

template <typename T>
struct RnnParams {
  Matrix<T> w_in;   // emb x hidden; empty means identity (requires emb == hidden)
  Matrix<T> w_rec;  // hidden x hidden
  Matrix<T> bias;   // 1 x hidden
};

// H^t = sigmoid(E^{t-1} W_in + H^{t-1} V + b)
template <typename T>
Matrix<T> rnn_forward(const Matrix<T>& emb, const Matrix<T>& h_prev, const RnnParams<T>& p) {
  Matrix<T> pre = p.w_in.empty() ? emb : matmul(emb, p.w_in);
  matmul_acc(h_prev, p.w_rec, pre);
  add_row_inplace(pre, p.bias);
  return sigmoid(pre);
}

enum LstmGate { kGateIn = 0, kGateForget = 1, kGateOut = 2, kGateCell = 3 };

template <typename T>
struct LstmParams {
  std::array<Matrix<T>, 4> w_in;   // emb x hidden per gate/candidate
  std::array<Matrix<T>, 4> w_rec;  // hidden x hidden per gate/candidate
  std::array<Matrix<T>, 4> bias;   // 1 x hidden per gate/candidate
};

template <typename T>
struct LstmStep {
  Matrix<T> gate_in, gate_forget, gate_out;  // sigmoid outputs
  Matrix<T> cand;                            // tanh candidate
  Matrix<T> cell;                            // C^t
  Matrix<T> cell_tanh;                       // tanh(C^t)
};

// Gates i,f,o = sigmoid(.), candidate = tanh(.), C^t = f.C^{t-1} + i.cand,
// H^t = o.tanh(C^t).
template <typename T>
Matrix<T> lstm_forward(const Matrix<T>& emb, const Matrix<T>& h_prev, const Matrix<T>& c_prev,
                       const LstmParams<T>& p, LstmStep<T>& step) {
  auto affine = [&](int g) {
    Matrix<T> pre = matmul(emb, p.w_in[g]);
    matmul_acc(h_prev, p.w_rec[g], pre);
    add_row_inplace(pre, p.bias[g]);
    return pre;
  };
  step.gate_in = sigmoid(affine(kGateIn));
  step.gate_forget = sigmoid(affine(kGateForget));
  step.gate_out = sigmoid(affine(kGateOut));
  step.cand = tanh_act(affine(kGateCell));

  step.cell = Matrix<T>(c_prev.rows(), c_prev.cols());
  const T* f = step.gate_forget.data();
  const T* i = step.gate_in.data();
  const T* cd = step.cand.data();
  const T* cp = c_prev.data();
  T* c = step.cell.data();
  for (size_t k = 0; k < step.cell.size(); ++k) c[k] = f[k] * cp[k] + i[k] * cd[k];

  step.cell_tanh = tanh_act(step.cell);
  Matrix<T> h = step.cell_tanh;
  const T* o = step.gate_out.data();
  T* hd = h.data();
  for (size_t k = 0; k < h.size(); ++k) hd[k] *= o[k];
  return h;
}

// ---------------------------------------------------------------------------
// Stateful window components.

template <typename T>
class Component {
 public:
  explicit Component(const ComponentDesc& desc) : desc_(desc) {}
  virtual ~Component() = default;

  const ComponentDesc& desc() const { return desc_; }
  bool recurrent() const { return desc_.recurrent(); }
  int hidden_size() const { return desc_.hidden; }

  virtual void init_params(Rng& rng) = 0;
  virtual void reset_state(int batch_size, int pad_token) = 0;

  // One step for the whole batch; inputs are the ids of w_{t-1}. Caches the
  // step when keep_cache is set so a later backward() can consume it.
  virtual Matrix<T> forward(const Matrix<T>& embedding, const std::vector<int>& inputs,
                            bool keep_cache) = 0;

  // Consumes the cached window (grad_h[t] pairs with cached step t),
  // accumulating parameter gradients and scatter-adding embedding
  // gradients. Clears the cache.
  virtual void backward(const Matrix<T>& embedding, const std::vector<Matrix<T>>& grad_h,
                        Matrix<T>& embedding_grad) = 0;

  virtual void collect_params(const std::string& prefix, std::vector<ParamBlock<T>>& out) = 0;

  virtual size_t cached_steps() const = 0;
  virtual void drop_cache() = 0;

 protected:
  void check_cache(size_t upstream_steps, size_t cached) const {
    if (upstream_steps != cached)
      throw std::logic_error("component backward: " + std::to_string(upstream_steps) +
                             " upstream gradients for " + std::to_string(cached) +
                             " cached steps");
  }

  ComponentDesc desc_;
};

template <typename T>
class FnnComponent : public Component<T> {
 public:
  FnnComponent(const ComponentDesc& desc, int embedding_size)
      : Component<T>(desc), emb_(embedding_size) {
    const int slots = desc.history - 1;
    p_.context_w.assign(slots, Matrix<T>(emb_, desc.hidden));
    p_.hidden_w.assign(desc.depth - 1, Matrix<T>(desc.hidden, desc.hidden));
    p_.bias.assign(desc.depth, Matrix<T>(1, desc.hidden));
    g_ = p_;
  }

  void init_params(Rng& rng) override {
    for (auto& w : p_.context_w) w = glorot_init<T>(emb_, this->desc_.hidden, rng);
    for (auto& w : p_.hidden_w) w = glorot_init<T>(this->desc_.hidden, this->desc_.hidden, rng);
  }

  void reset_state(int batch_size, int pad_token) override {
    context_.assign(p_.context_w.size(), std::vector<int>(batch_size, pad_token));
    cache_.clear();
  }

  Matrix<T> forward(const Matrix<T>& embedding, const std::vector<int>& inputs,
                    bool keep_cache) override {
    if (context_.empty() || context_[0].size() != inputs.size())
      throw std::logic_error("FNN component: state not initialized for this batch size");
    // Slide the window: slot 0 holds w_{t-1}.
    for (size_t i = context_.size(); i-- > 1;) context_[i] = context_[i - 1];
    context_[0] = inputs;

    std::vector<Matrix<T>> embs;
    embs.reserve(context_.size());
    for (const auto& ids : context_) embs.push_back(gather_rows(embedding, ids));

    std::vector<Matrix<T>> preacts;
    Matrix<T> h = fnn_forward(embs, p_, keep_cache ? &preacts : nullptr);
    if (keep_cache) cache_.push_back(Cache{context_, std::move(preacts)});
    return h;
  }

  void backward(const Matrix<T>& embedding, const std::vector<Matrix<T>>& grad_h,
                Matrix<T>& embedding_grad) override {
    this->check_cache(grad_h.size(), cache_.size());
    for (size_t t = cache_.size(); t-- > 0;) {
      const Cache& c = cache_[t];
      Matrix<T> d = grad_h[t];
      // Deeper layers first; layer inputs are recomputed from cached preacts.
      for (size_t l = p_.hidden_w.size(); l-- > 0;) {
        Matrix<T> dpre = relu_grad(c.preacts[l + 1], d);
        Matrix<T> input = relu(c.preacts[l]);
        matmul_tn_acc(input, dpre, g_.hidden_w[l]);
        colsum_acc(dpre, g_.bias[l + 1]);
        d = matmul_nt(dpre, p_.hidden_w[l]);
      }
      Matrix<T> dpre = relu_grad(c.preacts[0], d);
      colsum_acc(dpre, g_.bias[0]);
      for (size_t i = 0; i < p_.context_w.size(); ++i) {
        Matrix<T> emb = gather_rows(embedding, c.context[i]);
        matmul_tn_acc(emb, dpre, g_.context_w[i]);
        scatter_add_rows(embedding_grad, c.context[i], matmul_nt(dpre, p_.context_w[i]));
      }
    }
    cache_.clear();
  }

  void collect_params(const std::string& prefix, std::vector<ParamBlock<T>>& out) override {
    for (size_t i = 0; i < p_.context_w.size(); ++i)
      out.push_back({prefix + ".V" + std::to_string(i + 1), &p_.context_w[i],
                     &g_.context_w[i], true});
    for (size_t l = 0; l < p_.hidden_w.size(); ++l)
      out.push_back({prefix + ".W" + std::to_string(l + 1), &p_.hidden_w[l],
                     &g_.hidden_w[l], true});
    for (size_t l = 0; l < p_.bias.size(); ++l)
      out.push_back({prefix + ".b" + std::to_string(l), &p_.bias[l], &g_.bias[l], false});
  }

  size_t cached_steps() const override { return cache_.size(); }
  void drop_cache() override { cache_.clear(); }

  FnnParams<T>& params() { return p_; }

 private:
  struct Cache {
    std::vector<std::vector<int>> context;
    std::vector<Matrix<T>> preacts;
  };

  int emb_;
  FnnParams<T> p_, g_;
  std::vector<std::vector<int>> context_;  // context_[i][b] = id of w_{t-1-i}
  std::vector<Cache> cache_;
};

template <typename T>
class RnnComponent : public Component<T> {
 public:
  RnnComponent(const ComponentDesc& desc, int embedding_size)
      : Component<T>(desc), emb_(embedding_size) {
    p_.w_in = Matrix<T>(emb_, desc.hidden);
    p_.w_rec = Matrix<T>(desc.hidden, desc.hidden);
    p_.bias = Matrix<T>(1, desc.hidden);
    g_ = p_;
  }

  void init_params(Rng& rng) override {
    p_.w_in = glorot_init<T>(emb_, this->desc_.hidden, rng);
    p_.w_rec = glorot_init<T>(this->desc_.hidden, this->desc_.hidden, rng);
  }

  void reset_state(int batch_size, int /*pad_token*/) override {
    h_ = Matrix<T>(batch_size, this->desc_.hidden);
    cache_.clear();
  }

  Matrix<T> forward(const Matrix<T>& embedding, const std::vector<int>& inputs,
                    bool keep_cache) override {
    if (h_.rows() != static_cast<int>(inputs.size()))
      throw std::logic_error("RNN component: state not initialized for this batch size");
    Matrix<T> h_new = rnn_forward(gather_rows(embedding, inputs), h_, p_);
    if (keep_cache) cache_.push_back(Cache{inputs, h_, h_new});
    h_ = h_new;
    return h_new;
  }

  void backward(const Matrix<T>& embedding, const std::vector<Matrix<T>>& grad_h,
                Matrix<T>& embedding_grad) override {
    this->check_cache(grad_h.size(), cache_.size());
    Matrix<T> carry(h_.rows(), h_.cols());
    for (size_t t = cache_.size(); t-- > 0;) {
      const Cache& c = cache_[t];
      Matrix<T> dh = grad_h[t];
      const T* cd = carry.data();
      T* dhd = dh.data();
      for (size_t k = 0; k < dh.size(); ++k) dhd[k] += cd[k];
      Matrix<T> dpre = sigmoid_grad(c.h, dh);

      matmul_tn_acc(gather_rows(embedding, c.ids), dpre, g_.w_in);
      matmul_tn_acc(c.h_prev, dpre, g_.w_rec);
      colsum_acc(dpre, g_.bias);
      scatter_add_rows(embedding_grad, c.ids, matmul_nt(dpre, p_.w_in));
      carry = matmul_nt(dpre, p_.w_rec);  // into H^{t-1}; dropped at window start
    }
    cache_.clear();
  }

  void collect_params(const std::string& prefix, std::vector<ParamBlock<T>>& out) override {
    out.push_back({prefix + ".Win", &p_.w_in, &g_.w_in, true});
    out.push_back({prefix + ".V", &p_.w_rec, &g_.w_rec, true});
    out.push_back({prefix + ".b", &p_.bias, &g_.bias, false});
  }

  size_t cached_steps() const override { return cache_.size(); }
  void drop_cache() override { cache_.clear(); }

  RnnParams<T>& params() { return p_; }
  const Matrix<T>& state() const { return h_; }

 private:
  struct Cache {
    std::vector<int> ids;
    Matrix<T> h_prev, h;
  };

  int emb_;
  RnnParams<T> p_, g_;
  Matrix<T> h_;
  std::vector<Cache> cache_;
};

template <typename T>
class LstmComponent : public Component<T> {
 public:
  LstmComponent(const ComponentDesc& desc, int embedding_size)
      : Component<T>(desc), emb_(embedding_size) {
    for (int g = 0; g < 4; ++g) {
      p_.w_in[g] = Matrix<T>(emb_, desc.hidden);
      p_.w_rec[g] = Matrix<T>(desc.hidden, desc.hidden);
      p_.bias[g] = Matrix<T>(1, desc.hidden);
    }
    g_ = p_;
  }

  void init_params(Rng& rng) override {
    for (int g = 0; g < 4; ++g) {
      p_.w_in[g] = glorot_init<T>(emb_, this->desc_.hidden, rng);
      p_.w_rec[g] = glorot_init<T>(this->desc_.hidden, this->desc_.hidden, rng);
    }
  }

  void reset_state(int batch_size, int /*pad_token*/) override {
    h_ = Matrix<T>(batch_size, this->desc_.hidden);
    c_ = Matrix<T>(batch_size, this->desc_.hidden);
    cache_.clear();
  }

  Matrix<T> forward(const Matrix<T>& embedding, const std::vector<int>& inputs,
                    bool keep_cache) override {
    if (h_.rows() != static_cast<int>(inputs.size()))
      throw std::logic_error("LSTM component: state not initialized for this batch size");
    Cache c;
    c.ids = inputs;
    c.h_prev = h_;
    c.c_prev = c_;
    Matrix<T> h_new = lstm_forward(gather_rows(embedding, inputs), h_, c_, p_, c.step);
    c_ = c.step.cell;
    h_ = h_new;
    if (keep_cache) cache_.push_back(std::move(c));
    return h_new;
  }

  void backward(const Matrix<T>& embedding, const std::vector<Matrix<T>>& grad_h,
                Matrix<T>& embedding_grad) override {
    this->check_cache(grad_h.size(), cache_.size());
    const int rows = h_.rows(), cols = h_.cols();
    Matrix<T> dh_carry(rows, cols), dc_carry(rows, cols);
    std::array<Matrix<T>, 4> dgate;
    for (size_t t = cache_.size(); t-- > 0;) {
      const Cache& c = cache_[t];
      const size_t n = c.step.cell.size();
      for (auto& m : dgate) m = Matrix<T>(rows, cols);

      const T* up = grad_h[t].data();
      const T* dhc = dh_carry.data();
      const T* dcc = dc_carry.data();
      const T* gi = c.step.gate_in.data();
      const T* gf = c.step.gate_forget.data();
      const T* go = c.step.gate_out.data();
      const T* cd = c.step.cand.data();
      const T* ct = c.step.cell_tanh.data();
      const T* cp = c.c_prev.data();
      Matrix<T> dc_next(rows, cols);
      T* dcn = dc_next.data();
      T* dgi = dgate[kGateIn].data();
      T* dgf = dgate[kGateForget].data();
      T* dgo = dgate[kGateOut].data();
      T* dgc = dgate[kGateCell].data();
      for (size_t k = 0; k < n; ++k) {
        const T dh = up[k] + dhc[k];
        const T dc = dh * go[k] * (T(1) - ct[k] * ct[k]) + dcc[k];
        dgo[k] = dh * ct[k] * go[k] * (T(1) - go[k]);
        dgf[k] = dc * cp[k] * gf[k] * (T(1) - gf[k]);
        dgi[k] = dc * cd[k] * gi[k] * (T(1) - gi[k]);
        dgc[k] = dc * gi[k] * (T(1) - cd[k] * cd[k]);
        dcn[k] = dc * gf[k];  // into C^{t-1}
      }
      dc_carry = std::move(dc_next);

      Matrix<T> emb = gather_rows(embedding, c.ids);
      Matrix<T> demb(rows, emb_);
      dh_carry = Matrix<T>(rows, cols);
      for (int g = 0; g < 4; ++g) {
        matmul_tn_acc(emb, dgate[g], g_.w_in[g]);
        matmul_tn_acc(c.h_prev, dgate[g], g_.w_rec[g]);
        colsum_acc(dgate[g], g_.bias[g]);
        matmul_nt_acc(dgate[g], p_.w_in[g], demb);
        matmul_nt_acc(dgate[g], p_.w_rec[g], dh_carry);
      }
      scatter_add_rows(embedding_grad, c.ids, demb);
    }
    cache_.clear();
  }

  void collect_params(const std::string& prefix, std::vector<ParamBlock<T>>& out) override {
    static const char* kGateNames[4] = {"i", "f", "o", "c"};
    for (int g = 0; g < 4; ++g)
      out.push_back({prefix + ".Vw_" + kGateNames[g], &p_.w_in[g], &g_.w_in[g], true});
    for (int g = 0; g < 4; ++g)
      out.push_back({prefix + ".Vh_" + kGateNames[g], &p_.w_rec[g], &g_.w_rec[g], true});
    for (int g = 0; g < 4; ++g)
      out.push_back({prefix + ".b_" + kGateNames[g], &p_.bias[g], &g_.bias[g], false});
  }

  size_t cached_steps() const override { return cache_.size(); }
  void drop_cache() override { cache_.clear(); }

  LstmParams<T>& params() { return p_; }
  const Matrix<T>& hidden_state() const { return h_; }
  const Matrix<T>& cell_state() const { return c_; }

 private:
  struct Cache {
    std::vector<int> ids;
    Matrix<T> h_prev, c_prev;
    LstmStep<T> step;
  };

  int emb_;
  LstmParams<T> p_, g_;
  Matrix<T> h_, c_;
  std::vector<Cache> cache_;
};

template <typename T>
std::unique_ptr<Component<T>> make_component(const ComponentDesc& desc, int embedding_size) {
  switch (desc.kind) {
    case ComponentKind::kFnn:
      return std::make_unique<FnnComponent<T>>(desc, embedding_size);
    case ComponentKind::kRnn:
      return std::make_unique<RnnComponent<T>>(desc, embedding_size);
    case ComponentKind::kLstm:
      return std::make_unique<LstmComponent<T>>(desc, embedding_size);
  }
  throw std::logic_error("make_component: unknown kind");
}

}  // namespace nmm
