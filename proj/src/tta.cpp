#include "ttabench/tta.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <map>
#include <set>

#include "ttabench/rng.hpp"

namespace ttb {

namespace {

// ---------------------------------------------------------------------------
// optimizer

class ParamOptimizer {
 public:
  ParamOptimizer(Optimizer kind, float lr, float momentum)
      : kind_(kind), lr_(lr), momentum_(momentum) {}

  void step(Model& m, const std::vector<std::string>& names) {
    ++t_;
    for (const auto& name : names) {
      Tensor& p = m.param(name);
      const float* g = p.grad();
      float* pv = p.data();
      switch (kind_) {
        case Optimizer::kSgd: {
          for (std::int64_t i = 0; i < p.numel(); ++i) pv[i] -= lr_ * g[i];
          break;
        }
        case Optimizer::kSgdMomentum: {
          float* vv = slot(name, p).data();
          for (std::int64_t i = 0; i < p.numel(); ++i) {
            vv[i] = momentum_ * vv[i] + g[i];
            pv[i] -= lr_ * vv[i];
          }
          break;
        }
        case Optimizer::kAdam: {
          float* mv = slot(name + "/m", p).data();
          float* vv = slot(name + "/v", p).data();
          const float b1 = 0.9f, b2 = 0.999f, eps = 1e-8f;
          const float bc1 = 1.0f - std::pow(b1, static_cast<float>(t_));
          const float bc2 = 1.0f - std::pow(b2, static_cast<float>(t_));
          for (std::int64_t i = 0; i < p.numel(); ++i) {
            mv[i] = b1 * mv[i] + (1 - b1) * g[i];
            vv[i] = b2 * vv[i] + (1 - b2) * g[i] * g[i];
            pv[i] -= lr_ * (mv[i] / bc1) / (std::sqrt(vv[i] / bc2) + eps);
          }
          break;
        }
      }
    }
  }

  void reset_state() {
    slots_.clear();
    t_ = 0;
  }

 private:
  Tensor& slot(const std::string& key, const Tensor& like) {
    auto it = slots_.find(key);
    if (it == slots_.end()) {
      it = slots_.emplace(key, Tensor::zeros(like.shape())).first;
    }
    return it->second;
  }

  Optimizer kind_;
  float lr_;
  float momentum_;
  int t_ = 0;
  std::map<std::string, Tensor> slots_;
};

void set_trainable(Model& m, const std::vector<std::string>& names, bool on) {
  for (const auto& n : names) {
    m.param(n).set_requires_grad(on);
    if (!on) m.param(n).drop_grad();
  }
}

void zero_grads(Model& m, const std::vector<std::string>& names) {
  for (const auto& n : names) m.param(n).zero_grad();
}

float checked_loss(const Tensor& loss, const char* method) {
  const float v = loss.item();
  if (!std::isfinite(v)) {
    throw method_failure(std::string(method) + ": non-finite loss");
  }
  return v;
}

// ---------------------------------------------------------------------------
// method interface and driver

class AdaptMethodImpl {
 public:
  virtual ~AdaptMethodImpl() = default;
  virtual void begin(Model& m, const AdaptationSet& d,
                     const AdaptConfig& cfg) = 0;
  virtual void epoch_begin(Model& /*m*/, const AdaptationSet& /*d*/,
                           int /*epoch*/) {}
  virtual void step(Model& m, const AdaptationSet& d,
                    const std::vector<int>& positions) = 0;
  virtual void finish(Model& /*m*/, const AdaptationSet& /*d*/) {}
  virtual void export_state(MethodState& /*out*/) const {}
};

int drive(AdaptMethodImpl& method, Model& m, const AdaptationSet& d,
          const AdaptConfig& cfg, const BatchHook& hook) {
  if (cfg.batch_size < 1) throw config_error("batch_size must be >= 1");
  method.begin(m, d, cfg);
  int batch_index = 0;
  const int n = d.size();
  std::vector<int> order(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) order[static_cast<std::size_t>(i)] = i;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    method.epoch_begin(m, d, epoch);
    Rng rng(seed_split(cfg.seed, "batch-order",
                       static_cast<std::uint64_t>(epoch)));
    rng.shuffle(order);
    for (int start = 0; start < n; start += cfg.batch_size) {
      const int bsz = std::min(cfg.batch_size, n - start);
      std::vector<int> positions(order.begin() + start,
                                 order.begin() + start + bsz);
      method.step(m, d, positions);
      if (hook) hook(batch_index, positions, m);
      ++batch_index;
    }
  }
  method.finish(m, d);
  return batch_index;
}

// Frozen-eval forward over a whole adaptation set, batched.
void eval_pass(const Model& m, const AdaptationSet& d, int batch_size,
               std::vector<float>* embeddings, std::vector<float>* probs) {
  const int n = d.size();
  const int c = m.class_count;
  const int f = m.feature_dim;
  if (embeddings) embeddings->resize(static_cast<std::size_t>(n) * f);
  if (probs) probs->resize(static_cast<std::size_t>(n) * c);
  for (int start = 0; start < n; start += batch_size) {
    const int bsz = std::min(batch_size, n - start);
    std::vector<int> pos(static_cast<std::size_t>(bsz));
    for (int i = 0; i < bsz; ++i) pos[static_cast<std::size_t>(i)] = start + i;
    ForwardOutput out = forward_eval(m, d.gather_images(pos));
    if (embeddings) {
      std::memcpy(embeddings->data() + static_cast<std::ptrdiff_t>(start) * f,
                  out.embeddings.data(),
                  static_cast<std::size_t>(bsz) * f * 4);
    }
    if (probs) {
      Tensor p = softmax(out.logits);
      std::memcpy(probs->data() + static_cast<std::ptrdiff_t>(start) * c,
                  p.data(), static_cast<std::size_t>(bsz) * c * 4);
    }
  }
}

// ---------------------------------------------------------------------------
// TENT: entropy minimization on normalization affine parameters.

class TentMethod : public AdaptMethodImpl {
 public:
  void begin(Model& m, const AdaptationSet&, const AdaptConfig& cfg) override {
    if (m.group_params(kGroupNormAffine).empty()) {
      throw config_error("tent requires a model with normalization layers");
    }
    cfg_ = cfg;
    trainable_ = m.group_params(kGroupNormAffine);
    set_trainable(m, trainable_, true);
    opt_ =
        std::make_unique<ParamOptimizer>(cfg.optimizer, cfg.lr, cfg.momentum);
  }

  void step(Model& m, const AdaptationSet& d,
            const std::vector<int>& positions) override {
    Tensor images = d.gather_images(positions);
    ForwardOpts fwd;
    fwd.mode = ForwardMode::kAdapt;
    fwd.bn_momentum = cfg_.bn_momentum;
    Tape tape;
    Tensor loss;
    {
      TapeScope scope(tape);
      ForwardOutput out = forward(m, images, fwd);
      loss = mean_entropy(out.logits);
    }
    checked_loss(loss, "tent");
    zero_grads(m, trainable_);
    backward(loss, tape);
    opt_->step(m, trainable_);
  }

  void finish(Model& m, const AdaptationSet&) override {
    set_trainable(m, trainable_, false);
  }

 private:
  AdaptConfig cfg_;
  std::vector<std::string> trainable_;
  std::unique_ptr<ParamOptimizer> opt_;
};

// ---------------------------------------------------------------------------
// SHOT: information maximization + clustered pseudo-labels; head frozen.

class ShotMethod : public AdaptMethodImpl {
 public:
  void begin(Model& m, const AdaptationSet&, const AdaptConfig& cfg) override {
    cfg_ = cfg;
    feature_dim_ = m.feature_dim;
    trainable_ = m.group_params(kGroupFeatureWeights);
    for (const auto& n : m.group_params(kGroupNormAffine)) {
      trainable_.push_back(n);
    }
    set_trainable(m, trainable_, true);
    opt_ =
        std::make_unique<ParamOptimizer>(cfg.optimizer, cfg.lr, cfg.momentum);
  }

  void epoch_begin(Model& m, const AdaptationSet& d, int) override {
    if (d.size() == 0) return;
    const int n = d.size();
    const int c = m.class_count;
    const int f = m.feature_dim;
    std::vector<float> emb, probs;
    eval_pass(m, d, cfg_.batch_size, &emb, &probs);

    // Soft centroids c_k = sum_i p_ik f_i / sum_i p_ik.
    centroids_.assign(static_cast<std::size_t>(c) * f, 0.0f);
    std::vector<double> mass(static_cast<std::size_t>(c), 0.0);
    std::vector<double> acc(static_cast<std::size_t>(c) * f, 0.0);
    for (int i = 0; i < n; ++i) {
      for (int k = 0; k < c; ++k) {
        const double p = probs[static_cast<std::size_t>(i) * c + k];
        mass[static_cast<std::size_t>(k)] += p;
        for (int j = 0; j < f; ++j) {
          acc[static_cast<std::size_t>(k) * f + j] +=
              p * emb[static_cast<std::size_t>(i) * f + j];
        }
      }
    }
    for (int k = 0; k < c; ++k) {
      if (mass[static_cast<std::size_t>(k)] <= 0.0) continue;
      for (int j = 0; j < f; ++j) {
        centroids_[static_cast<std::size_t>(k) * f + j] = static_cast<float>(
            acc[static_cast<std::size_t>(k) * f + j] /
            mass[static_cast<std::size_t>(k)]);
      }
    }

    pseudo_.assign(static_cast<std::size_t>(n), 0);
    for (int round = 0; round < cfg_.shot.pl_rounds; ++round) {
      for (int i = 0; i < n; ++i) {
        pseudo_[static_cast<std::size_t>(i)] = nearest_centroid(
            emb.data() + static_cast<std::ptrdiff_t>(i) * f, c, f);
      }
      // Hard means; an empty pseudo-class keeps its previous centroid.
      std::vector<double> hard(static_cast<std::size_t>(c) * f, 0.0);
      std::vector<int> counts(static_cast<std::size_t>(c), 0);
      for (int i = 0; i < n; ++i) {
        const int k = pseudo_[static_cast<std::size_t>(i)];
        counts[static_cast<std::size_t>(k)] += 1;
        for (int j = 0; j < f; ++j) {
          hard[static_cast<std::size_t>(k) * f + j] +=
              emb[static_cast<std::size_t>(i) * f + j];
        }
      }
      for (int k = 0; k < c; ++k) {
        if (counts[static_cast<std::size_t>(k)] == 0) continue;
        for (int j = 0; j < f; ++j) {
          centroids_[static_cast<std::size_t>(k) * f + j] = static_cast<float>(
              hard[static_cast<std::size_t>(k) * f + j] /
              counts[static_cast<std::size_t>(k)]);
        }
      }
    }
    for (int i = 0; i < n; ++i) {
      pseudo_[static_cast<std::size_t>(i)] = nearest_centroid(
          emb.data() + static_cast<std::ptrdiff_t>(i) * f, c, f);
    }
  }

  void step(Model& m, const AdaptationSet& d,
            const std::vector<int>& positions) override {
    Tensor images = d.gather_images(positions);
    std::vector<int> labels;
    labels.reserve(positions.size());
    for (int p : positions) {
      labels.push_back(pseudo_[static_cast<std::size_t>(p)]);
    }
    ForwardOpts fwd;
    fwd.mode = ForwardMode::kAdapt;
    fwd.bn_momentum = cfg_.bn_momentum;
    Tape tape;
    Tensor loss;
    {
      TapeScope scope(tape);
      ForwardOutput out = forward(m, images, fwd);
      Tensor ent = mean_entropy(out.logits);
      Tensor div = mean_softmax_entropy(out.logits);
      Tensor pl = cross_entropy_mean(out.logits, labels);
      // L = L_ent - L_div + beta * L_pseudo
      loss = elementwise_add(elementwise_add(ent, scalar_scale(div, -1.0f)),
                             scalar_scale(pl, cfg_.shot.beta));
    }
    checked_loss(loss, "shot");
    zero_grads(m, trainable_);
    backward(loss, tape);
    opt_->step(m, trainable_);
  }

  void finish(Model& m, const AdaptationSet&) override {
    set_trainable(m, trainable_, false);
  }

  void export_state(MethodState& out) const override {
    if (centroids_.empty() || feature_dim_ == 0) return;
    const int c = static_cast<int>(centroids_.size()) / feature_dim_;
    out.shot_centroids = Tensor::from_data({c, feature_dim_}, centroids_);
  }

 private:
  int nearest_centroid(const float* e, int c, int f) const {
    double e_norm = 0.0;
    for (int j = 0; j < f; ++j) e_norm += static_cast<double>(e[j]) * e[j];
    e_norm = std::sqrt(e_norm) + 1e-12;
    int best = 0;
    double best_dist = 1e300;
    for (int k = 0; k < c; ++k) {
      const float* ck = centroids_.data() + static_cast<std::ptrdiff_t>(k) * f;
      double dot = 0.0, c_norm = 0.0;
      for (int j = 0; j < f; ++j) {
        dot += static_cast<double>(e[j]) * ck[j];
        c_norm += static_cast<double>(ck[j]) * ck[j];
      }
      c_norm = std::sqrt(c_norm) + 1e-12;
      const double dist = 1.0 - dot / (e_norm * c_norm);
      if (dist < best_dist) {
        best_dist = dist;
        best = k;
      }
    }
    return best;
  }

  AdaptConfig cfg_;
  int feature_dim_ = 0;
  std::vector<std::string> trainable_;
  std::unique_ptr<ParamOptimizer> opt_;
  std::vector<float> centroids_;  // [C * F]
  std::vector<int> pseudo_;       // per delta position
};

// ---------------------------------------------------------------------------
// SAR: entropy filtering + sharpness-aware step on norm_affine, with a
// running-loss reset rule.

class SarMethod : public AdaptMethodImpl {
 public:
  void begin(Model& m, const AdaptationSet&, const AdaptConfig& cfg) override {
    cfg_ = cfg;
    trainable_ = m.group_params(kGroupNormAffine);
    set_trainable(m, trainable_, true);
    opt_ =
        std::make_unique<ParamOptimizer>(cfg.optimizer, cfg.lr, cfg.momentum);
    e0_ = cfg.sar.e0_factor * std::log(static_cast<float>(m.class_count));
    reset_threshold_ =
        cfg_.sar.reset_factor * std::log(static_cast<float>(m.class_count));
    snapshot_.clear();
    for (const auto& group : {kGroupNormAffine, kGroupNormStats}) {
      for (const auto& name : m.group_params(group)) {
        snapshot_.emplace(name, m.param(name).clone());
      }
    }
    loss_avg_ = -1.0f;
    loss_min_ = std::numeric_limits<float>::infinity();
    resets_ = 0;
  }

  void step(Model& m, const AdaptationSet& d,
            const std::vector<int>& positions) override {
    Tensor images = d.gather_images(positions);
    ForwardOpts fwd;
    fwd.mode = ForwardMode::kAdapt;
    fwd.bn_momentum = cfg_.bn_momentum;

    // First pass: filtered entropy and its gradient.
    Tape tape1;
    Tensor loss1;
    std::vector<float> weights;
    {
      TapeScope scope(tape1);
      ForwardOutput out = forward(m, images, fwd);
      const std::vector<float> ents = row_entropies(out.logits);
      weights.resize(ents.size());
      float survivors = 0.0f;
      for (std::size_t i = 0; i < ents.size(); ++i) {
        weights[i] = ents[i] < e0_ ? 1.0f : 0.0f;
        survivors += weights[i];
      }
      if (survivors == 0.0f) return;  // filter emptied the batch
      loss1 = mean_entropy_weighted(out.logits, weights);
    }
    checked_loss(loss1, "sar");
    zero_grads(m, trainable_);
    backward(loss1, tape1);

    // Ascent perturbation eps = rho * g / ||g|| on the adapted parameters.
    double norm_sq = 0.0;
    for (const auto& name : trainable_) {
      const Tensor& p = m.param(name);
      const float* g = p.grad();
      for (std::int64_t i = 0; i < p.numel(); ++i) {
        norm_sq += static_cast<double>(g[i]) * g[i];
      }
    }
    const float scale =
        cfg_.sar.rho / (static_cast<float>(std::sqrt(norm_sq)) + 1e-12f);
    std::map<std::string, Tensor> saved;
    for (const auto& name : trainable_) {
      Tensor& p = m.param(name);
      saved.emplace(name, p.clone());
      const float* g = p.grad();
      float* pv = p.data();
      for (std::int64_t i = 0; i < p.numel(); ++i) pv[i] += scale * g[i];
    }
    auto restore = [&] {
      for (const auto& name : trainable_) {
        std::memcpy(m.param(name).data(), saved.at(name).data(),
                    static_cast<std::size_t>(saved.at(name).numel()) * 4);
      }
    };

    // Second pass from the perturbed point, same entropy filter. The
    // perturbed forward probes the loss surface; it must not adapt the
    // running statistics a second time.
    ForwardOpts probe = fwd;
    probe.update_running = false;
    Tape tape2;
    Tensor loss2;
    {
      TapeScope scope(tape2);
      ForwardOutput out = forward(m, images, probe);
      loss2 = mean_entropy_weighted(out.logits, weights);
    }
    if (!std::isfinite(loss2.item())) {  // skip batch on non-finite loss
      restore();
      return;
    }
    zero_grads(m, trainable_);
    backward(loss2, tape2);
    // Descend from the original point using the perturbed gradient.
    restore();
    opt_->step(m, trainable_);

    // Model recovery on running-loss blow-up.
    const float lv = loss2.item();
    loss_avg_ = loss_avg_ < 0.0f ? lv : 0.9f * loss_avg_ + 0.1f * lv;
    loss_min_ = std::min(loss_min_, loss_avg_);
    if (loss_avg_ > loss_min_ + reset_threshold_) {
      for (const auto& [name, value] : snapshot_) {
        std::memcpy(m.param(name).data(), value.data(),
                    static_cast<std::size_t>(value.numel()) * 4);
      }
      opt_->reset_state();
      loss_avg_ = -1.0f;
      loss_min_ = std::numeric_limits<float>::infinity();
      ++resets_;
    }
  }

  void finish(Model& m, const AdaptationSet&) override {
    set_trainable(m, trainable_, false);
  }

  void export_state(MethodState& out) const override {
    out.sar_loss_avg = loss_avg_;
    out.sar_resets = resets_;
  }

 private:
  AdaptConfig cfg_;
  std::vector<std::string> trainable_;
  std::unique_ptr<ParamOptimizer> opt_;
  std::map<std::string, Tensor> snapshot_;
  float e0_ = 0.0f;
  float reset_threshold_ = 0.0f;
  float loss_avg_ = -1.0f;
  float loss_min_ = 0.0f;
  int resets_ = 0;
};

// ---------------------------------------------------------------------------
// NOTE: instance-aware normalization + prediction-balanced reservoir feeding
// running-statistics updates.

class NoteMethod : public AdaptMethodImpl {
 public:
  void begin(Model& m, const AdaptationSet&, const AdaptConfig& cfg) override {
    cfg_ = cfg;
    reservoir_ = std::make_unique<BalancedReservoir>(
        cfg.note.reservoir, seed_split(cfg.seed, "note-reservoir"));
    if (cfg.note.affine_tune) {
      trainable_ = m.group_params(kGroupNormAffine);
      set_trainable(m, trainable_, true);
      opt_ = std::make_unique<ParamOptimizer>(cfg.optimizer, cfg.lr,
                                              cfg.momentum);
    }
  }

  void step(Model& m, const AdaptationSet& d,
            const std::vector<int>& positions) override {
    Tensor images = d.gather_images(positions);
    ForwardOpts iabn;
    iabn.mode = ForwardMode::kInstanceAware;
    iabn.iabn_alpha = cfg_.note.alpha;
    ForwardOutput out = forward(m, images, iabn);
    const std::vector<int> preds = argmax_rows(out.logits);
    for (std::size_t i = 0; i < positions.size(); ++i) {
      reservoir_->insert(positions[i], preds[i]);
    }
    if (reservoir_->size() == 0) return;  // stats update skipped

    std::vector<int> pos;
    pos.reserve(static_cast<std::size_t>(reservoir_->size()));
    for (const auto& [p, cls] : reservoir_->items()) pos.push_back(p);
    Tensor res_images = d.gather_images(pos);
    ForwardOpts fwd;
    fwd.mode = ForwardMode::kAdapt;
    fwd.bn_momentum = cfg_.note.stats_momentum;
    if (cfg_.note.affine_tune) {
      Tape tape;
      Tensor loss;
      {
        TapeScope scope(tape);
        ForwardOutput r = forward(m, res_images, fwd);
        loss = mean_entropy(r.logits);
      }
      checked_loss(loss, "note");
      zero_grads(m, trainable_);
      backward(loss, tape);
      opt_->step(m, trainable_);
    } else {
      forward(m, res_images, fwd);  // running-stats refresh only
    }
  }

  void finish(Model& m, const AdaptationSet&) override {
    if (cfg_.note.affine_tune) set_trainable(m, trainable_, false);
  }

  void export_state(MethodState& out) const override {
    if (reservoir_) out.note_reservoir = reservoir_->items();
  }

 private:
  AdaptConfig cfg_;
  std::unique_ptr<BalancedReservoir> reservoir_;
  std::vector<std::string> trainable_;
  std::unique_ptr<ParamOptimizer> opt_;
};

// ---------------------------------------------------------------------------
// T3A: optimization-free prototype adjustment of the classifier head.

class T3aMethod : public AdaptMethodImpl {
 public:
  void begin(Model& m, const AdaptationSet&, const AdaptConfig& cfg) override {
    if (cfg.t3a.support_m < 1) throw config_error("t3a support_m must be >= 1");
    cfg_ = cfg;
    c_ = m.class_count;
    f_ = m.feature_dim;
    supports_.assign(static_cast<std::size_t>(c_), {});
    prototypes_.assign(static_cast<std::size_t>(c_) * f_, 0.0f);
    // Seed each class's support with the unit-normalized classifier row.
    const Tensor& w = m.param("head.w");
    for (int k = 0; k < c_; ++k) {
      T3aSupportEntry seed;
      seed.embedding.assign(w.data() + static_cast<std::ptrdiff_t>(k) * f_,
                            w.data() + static_cast<std::ptrdiff_t>(k + 1) * f_);
      normalize(seed.embedding);
      supports_[static_cast<std::size_t>(k)].push_back(std::move(seed));
      refresh_prototype(k);
    }
    for (int k = 0; k < c_; ++k) {
      auto& entry = supports_[static_cast<std::size_t>(k)][0];
      entry.entropy = score_entropy(entry.embedding.data());
    }
  }

  void step(Model& m, const AdaptationSet& d,
            const std::vector<int>& positions) override {
    Tensor images = d.gather_images(positions);
    ForwardOutput out = forward_eval(m, images);
    const float* emb = out.embeddings.data();
    for (std::size_t i = 0; i < positions.size(); ++i) {
      const float* e = emb + static_cast<std::ptrdiff_t>(i) * f_;
      std::vector<float> scores = prototype_scores(e);
      int label = 0;
      for (int k = 1; k < c_; ++k) {
        if (scores[static_cast<std::size_t>(k)] >
            scores[static_cast<std::size_t>(label)]) {
          label = k;
        }
      }
      Tensor row = Tensor::from_data({1, c_}, scores);
      const float entropy = row_entropies(row)[0];
      auto& list = supports_[static_cast<std::size_t>(label)];
      T3aSupportEntry entry;
      entry.embedding.assign(e, e + f_);
      entry.entropy = entropy;
      // keep the list entropy-ascending, truncated to support_m entries
      auto it = std::upper_bound(
          list.begin(), list.end(), entry,
          [](const T3aSupportEntry& a, const T3aSupportEntry& b) {
            return a.entropy < b.entropy;
          });
      list.insert(it, std::move(entry));
      if (static_cast<int>(list.size()) > cfg_.t3a.support_m) {
        list.resize(static_cast<std::size_t>(cfg_.t3a.support_m));
      }
      refresh_prototype(label);
    }
  }

  void finish(Model& m, const AdaptationSet&) override {
    // Replace the classifier with prototype dot-product scoring.
    Tensor& w = m.param("head.w");
    Tensor& b = m.param("head.b");
    std::memcpy(w.data(), prototypes_.data(),
                static_cast<std::size_t>(c_) * f_ * 4);
    std::fill_n(b.data(), b.numel(), 0.0f);
  }

  void export_state(MethodState& out) const override {
    out.t3a_supports = supports_;
  }

 private:
  static void normalize(std::vector<float>& v) {
    double norm = 0.0;
    for (float x : v) norm += static_cast<double>(x) * x;
    const float inv = static_cast<float>(1.0 / (std::sqrt(norm) + 1e-12));
    for (auto& x : v) x *= inv;
  }

  void refresh_prototype(int k) {
    std::vector<float> mean(static_cast<std::size_t>(f_), 0.0f);
    const auto& list = supports_[static_cast<std::size_t>(k)];
    for (const auto& entry : list) {
      for (int j = 0; j < f_; ++j) {
        mean[static_cast<std::size_t>(j)] +=
            entry.embedding[static_cast<std::size_t>(j)];
      }
    }
    if (!list.empty()) {
      for (auto& v : mean) v /= static_cast<float>(list.size());
    }
    normalize(mean);
    std::memcpy(prototypes_.data() + static_cast<std::ptrdiff_t>(k) * f_,
                mean.data(), static_cast<std::size_t>(f_) * 4);
  }

  std::vector<float> prototype_scores(const float* e) const {
    std::vector<float> scores(static_cast<std::size_t>(c_));
    for (int k = 0; k < c_; ++k) {
      double dot = 0.0;
      const float* p = prototypes_.data() + static_cast<std::ptrdiff_t>(k) * f_;
      for (int j = 0; j < f_; ++j) dot += static_cast<double>(e[j]) * p[j];
      scores[static_cast<std::size_t>(k)] = static_cast<float>(dot);
    }
    return scores;
  }

  float score_entropy(const float* e) const {
    Tensor row = Tensor::from_data({1, c_}, prototype_scores(e));
    return row_entropies(row)[0];
  }

  AdaptConfig cfg_;
  int c_ = 0;
  int f_ = 0;
  std::vector<std::vector<T3aSupportEntry>> supports_;
  std::vector<float> prototypes_;  // [C * F]
};

// "none": forward-only baseline under the identical batching protocol.
class NoneMethod : public AdaptMethodImpl {
 public:
  void begin(Model&, const AdaptationSet&, const AdaptConfig&) override {}
  void step(Model& m, const AdaptationSet& d,
            const std::vector<int>& positions) override {
    forward_eval(m, d.gather_images(positions));
  }
};

std::unique_ptr<AdaptMethodImpl> make_method_impl(const std::string& id) {
  if (id == "none") return std::make_unique<NoneMethod>();
  if (id == "tent") return std::make_unique<TentMethod>();
  if (id == "shot") return std::make_unique<ShotMethod>();
  if (id == "sar") return std::make_unique<SarMethod>();
  if (id == "note") return std::make_unique<NoteMethod>();
  if (id == "t3a") return std::make_unique<T3aMethod>();
  throw config_error("unknown method id: " + id);
}

}  // namespace

// ---------------------------------------------------------------------------

BalancedReservoir::BalancedReservoir(int capacity, std::uint64_t seed)
    : capacity_(capacity), rng_(seed) {
  if (capacity < 1) throw config_error("reservoir capacity must be >= 1");
}

void BalancedReservoir::insert(int item, int predicted_class) {
  items_.emplace_back(item, predicted_class);
  if (static_cast<int>(items_.size()) <= capacity_) return;
  // Evict a random member of the majority predicted class.
  std::map<int, int> counts;
  for (const auto& [p, cls] : items_) counts[cls]++;
  int best = -1;
  std::vector<int> tied;
  for (const auto& [cls, count] : counts) {
    if (count > best) {
      best = count;
      tied.clear();
    }
    if (count == best) tied.push_back(cls);
  }
  const int majority =
      tied[static_cast<std::size_t>(rng_.next_below(tied.size()))];
  std::vector<std::size_t> members;
  for (std::size_t i = 0; i < items_.size(); ++i) {
    if (items_[i].second == majority) members.push_back(i);
  }
  const std::size_t victim =
      members[static_cast<std::size_t>(rng_.next_below(members.size()))];
  items_.erase(items_.begin() + static_cast<std::ptrdiff_t>(victim));
}

int BalancedReservoir::count_spread() const {
  std::map<int, int> counts;
  for (const auto& [p, cls] : items_) counts[cls]++;
  if (counts.empty()) return 0;
  int lo = items_.size() ? static_cast<int>(items_.size()) : 0, hi = 0;
  for (const auto& [cls, count] : counts) {
    lo = std::min(lo, count);
    hi = std::max(hi, count);
  }
  return hi - lo;
}

const std::vector<std::string>& method_registry() {
  static const std::vector<std::string> ids = {"none", "tent", "sar",
                                               "shot", "note", "t3a"};
  return ids;
}

bool is_known_method(const std::string& id) {
  const auto& reg = method_registry();
  return std::find(reg.begin(), reg.end(), id) != reg.end();
}

Model adapt_method(const std::string& method, const Model& model,
                   const AdaptationSet& delta_t, const AdaptConfig& cfg,
                   const BatchHook& hook, MethodState* state) {
  auto impl = make_method_impl(method);
  Model m = model.clone();
  drive(*impl, m, delta_t, cfg, hook);
  if (state) impl->export_state(*state);
  return m;
}

Model adapt_tent(const Model& model, const AdaptationSet& delta_t,
                 const AdaptConfig& cfg) {
  return adapt_method("tent", model, delta_t, cfg);
}

Model adapt_shot(const Model& model, const AdaptationSet& delta_t,
                 const AdaptConfig& cfg) {
  return adapt_method("shot", model, delta_t, cfg);
}

Model adapt_sar(const Model& model, const AdaptationSet& delta_t,
                const AdaptConfig& cfg, MethodState* state) {
  return adapt_method("sar", model, delta_t, cfg, nullptr, state);
}

Model adapt_note(const Model& model, const AdaptationSet& delta_t,
                 const AdaptConfig& cfg, MethodState* state) {
  return adapt_method("note", model, delta_t, cfg, nullptr, state);
}

Model adapt_t3a(const Model& model, const AdaptationSet& delta_t,
                const AdaptConfig& cfg, MethodState* state) {
  return adapt_method("t3a", model, delta_t, cfg, nullptr, state);
}

AdaptOutcome run_periodic_adaptation(const std::string& method,
                                     const Model& model,
                                     const ScenarioSplit& split,
                                     const AdaptConfig& cfg,
                                     const BatchHook& hook) {
  if (!is_known_method(method)) {
    throw config_error("unknown method id: " + method);
  }
  AdaptOutcome outcome;
  Model end_model = model.clone();
  try {
    auto impl = make_method_impl(method);
    outcome.batches = drive(*impl, end_model, split.delta_t, cfg, hook);
    impl->export_state(outcome.state);
  } catch (const method_failure& e) {
    outcome.failed = true;
    outcome.failure_message = e.what();
    end_model = model.clone();  // evaluation proceeds with theta_S
  } catch (const numeric_error& e) {
    outcome.failed = true;
    outcome.failure_message = e.what();
    end_model = model.clone();
  }

  std::filesystem::path dir = cfg.storage_dir;
  if (dir.empty()) {
    dir = std::filesystem::temp_directory_path() / "ttabench-models";
  }
  std::filesystem::create_directories(dir);
  outcome.model_path =
      dir / ("adapted_" + method + "_" + to_hex(seed_split(cfg.seed, method)) +
             ".ttbm");
  save_model(end_model, outcome.model_path);
  outcome.model = load_model(outcome.model_path);
  return outcome;
}

}  // namespace ttb
