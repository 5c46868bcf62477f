#pragma once

// Embedding function, decoder-only transformer and masked next-token loss.
//
// Pre-norm blocks (causal multi-head attention, GEGLU feedforward), a final
// LayerNorm, and logits computed against the token embedding table, which is
// shared between input lookup and output projection. Image patches go through
// a pre-activation residual block (GroupNorm -> GELU -> 3x3 conv, twice) and a
// dense projection to the model width.
//
// Everything is templated on the scalar type: float for training, double for
// finite-difference gradient checks.

#include <atomic>
#include <map>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "seqpolicy/codec.hpp"
#include "seqpolicy/error.hpp"
#include "seqpolicy/layers.hpp"
#include "seqpolicy/positions.hpp"
#include "seqpolicy/random.hpp"
#include "seqpolicy/sequencer.hpp"

namespace seqpolicy {

struct ModelConfig {
  int blocks = 4;
  int heads = 4;
  int width = 128;
  int ff_hidden = 512;
  int kv_size = 32;
  int vocab = kVocabSize;
  int context = 256;
  int local_pos_table = kLocalPositionTable;
  int patch_pos_vocab = kPatchPositionVocab;
  int image_channels = 3;
  int patch_channels = 0;  // 0 -> width / 4
  double stochastic_depth = 0.1;
  double dropout = 0.1;
  double init_std = 0.02;
  bool zero_action_inputs = false;  // train for single-pass action decoding

  int conv_channels() const { return patch_channels > 0 ? patch_channels : std::max(1, width / 4); }
  int group_count() const { return std::gcd(32, conv_channels()); }
  int attention_width() const { return heads * kv_size; }

  // Desk-scale default.
  static ModelConfig tiny() { return {}; }

  // The three published shapes; expressible, not meant for CPU training.
  static ModelConfig large_1_18b() { return preset(24, 16, 2048, 8192, 128); }
  static ModelConfig medium_364m() { return preset(12, 12, 1536, 6144, 128); }
  static ModelConfig small_79m() { return preset(8, 24, 768, 3072, 32); }

  void validate() const {
    require(blocks >= 0 && heads > 0 && width > 0 && ff_hidden > 0 && kv_size > 0, ErrorCode::kConfig,
            "model dimensions must be positive");
    require(vocab >= kVocabSize, ErrorCode::kConfig, "vocab must cover the 33025 token ids");
    require(context > 0, ErrorCode::kConfig, "context must be positive");
    require(local_pos_table > 2 && patch_pos_vocab > 0 && image_channels > 0, ErrorCode::kConfig,
            "position tables must be non-trivial");
    require(stochastic_depth >= 0 && stochastic_depth < 1 && dropout >= 0 && dropout < 1, ErrorCode::kConfig,
            "regularization rates must lie in [0, 1)");
  }

  std::string to_text() const {
    std::ostringstream out;
    out.precision(17);
    out << "blocks = " << blocks << "\nheads = " << heads << "\nwidth = " << width
        << "\nff_hidden = " << ff_hidden << "\nkv_size = " << kv_size << "\nvocab = " << vocab
        << "\ncontext = " << context << "\nlocal_pos_table = " << local_pos_table
        << "\npatch_pos_vocab = " << patch_pos_vocab << "\nimage_channels = " << image_channels
        << "\npatch_channels = " << patch_channels << "\nstochastic_depth = " << stochastic_depth
        << "\ndropout = " << dropout << "\ninit_std = " << init_std
        << "\nzero_action_inputs = " << (zero_action_inputs ? 1 : 0) << "\n";
    return out.str();
  }

  static ModelConfig from_text(const std::string& text) {
    ModelConfig c;
    std::istringstream in(text);
    std::string line;
    while (std::getline(in, line)) {
      const auto eq = line.find('=');
      if (eq == std::string::npos) continue;
      std::string key = line.substr(0, eq);
      key.erase(key.find_last_not_of(' ') + 1);
      const double v = std::stod(line.substr(eq + 1));
      if (key == "blocks")
        c.blocks = static_cast<int>(v);
      else if (key == "heads")
        c.heads = static_cast<int>(v);
      else if (key == "width")
        c.width = static_cast<int>(v);
      else if (key == "ff_hidden")
        c.ff_hidden = static_cast<int>(v);
      else if (key == "kv_size")
        c.kv_size = static_cast<int>(v);
      else if (key == "vocab")
        c.vocab = static_cast<int>(v);
      else if (key == "context")
        c.context = static_cast<int>(v);
      else if (key == "local_pos_table")
        c.local_pos_table = static_cast<int>(v);
      else if (key == "patch_pos_vocab")
        c.patch_pos_vocab = static_cast<int>(v);
      else if (key == "image_channels")
        c.image_channels = static_cast<int>(v);
      else if (key == "patch_channels")
        c.patch_channels = static_cast<int>(v);
      else if (key == "stochastic_depth")
        c.stochastic_depth = v;
      else if (key == "dropout")
        c.dropout = v;
      else if (key == "init_std")
        c.init_std = v;
      else if (key == "zero_action_inputs")
        c.zero_action_inputs = v != 0;
      else
        fail(ErrorCode::kConfig, "unknown model config key '" + key + "'");
    }
    c.validate();
    return c;
  }

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;

 private:
  static ModelConfig preset(int blocks, int heads, int width, int ff, int kv) {
    ModelConfig c;
    c.blocks = blocks;
    c.heads = heads;
    c.width = width;
    c.ff_hidden = ff;
    c.kv_size = kv;
    c.context = 1024;
    return c;
  }
};

// Number of trainable scalars a config instantiates.
inline int64_t parameter_count(const ModelConfig& c) {
  const int64_t d = c.width, a = c.attention_width(), f = c.ff_hidden, cw = c.conv_channels();
  const int64_t block = 2 * d + 3 * (d * a + a) + (a * d + d) + 2 * d + (d * 2 * f + 2 * f) + (f * d + d);
  const int64_t patch = (c.image_channels * cw + cw) + 2 * cw + (9 * cw * cw + cw) + 2 * cw +
                        (9 * cw * cw + cw) + (int64_t{kPatchSize} * kPatchSize * cw * d + d);
  return int64_t{c.vocab} * d + int64_t{c.local_pos_table} * d + 2 * int64_t{c.patch_pos_vocab} * d +
         c.blocks * block + 2 * d + patch;
}

template <typename S>
struct Parameter {
  std::string name;
  std::vector<int64_t> shape;
  AlignedVector<S> value;
  AlignedVector<S> grad;
  bool touched = false;  // reached by the last backward pass

  Eigen::Index rows() const { return shape.size() == 1 ? 1 : shape[0]; }
  Eigen::Index cols() const { return shape.size() == 1 ? shape[0] : shape[1]; }
  size_t size() const { return value.size(); }
  MatMap<S> mat() { return {value.data(), rows(), cols()}; }
  MatMap<S> grad_mat() { return {grad.data(), rows(), cols()}; }
  Eigen::Map<const Mat<S>> mat() const { return {value.data(), rows(), cols()}; }
  RowVecMap<S> vec() { return {value.data(), static_cast<Eigen::Index>(value.size())}; }
  RowVecMap<S> grad_vec() { return {grad.data(), static_cast<Eigen::Index>(grad.size())}; }
};

template <typename S>
class ParameterSet {
 public:
  int add(std::string name, std::vector<int64_t> shape) {
    Parameter<S> p;
    p.name = std::move(name);
    p.shape = std::move(shape);
    size_t n = 1;
    for (auto d : p.shape) n *= static_cast<size_t>(d);
    p.value.assign(n, S(0));
    p.grad.assign(n, S(0));
    index_[p.name] = static_cast<int>(params_.size());
    params_.push_back(std::move(p));
    return static_cast<int>(params_.size()) - 1;
  }

  Parameter<S>& operator[](int i) { return params_[static_cast<size_t>(i)]; }
  const Parameter<S>& operator[](int i) const { return params_[static_cast<size_t>(i)]; }

  Parameter<S>& get(const std::string& name) {
    auto it = index_.find(name);
    if (it == index_.end()) fail(ErrorCode::kMissingGradient, "no parameter named '" + name + "'");
    return params_[static_cast<size_t>(it->second)];
  }
  const Parameter<S>& get(const std::string& name) const {
    return const_cast<ParameterSet*>(this)->get(name);
  }
  bool contains(const std::string& name) const { return index_.contains(name); }

  std::vector<Parameter<S>>& all() { return params_; }
  const std::vector<Parameter<S>>& all() const { return params_; }

  void zero_grad() {
    for (auto& p : params_) {
      std::fill(p.grad.begin(), p.grad.end(), S(0));
      p.touched = false;
    }
  }

  int64_t count() const {
    int64_t n = 0;
    for (const auto& p : params_) n += static_cast<int64_t>(p.size());
    return n;
  }

  // Throws if a listed parameter received no gradient in the last backward.
  void require_gradients(std::span<const std::string> names) const {
    for (const auto& name : names)
      if (!(get(name).touched))
        fail(ErrorCode::kMissingGradient, "parameter '" + name + "' is detached from the loss");
  }

 private:
  std::vector<Parameter<S>> params_;
  std::map<std::string, int> index_;
};

template <typename S>
struct PatchCache {
  Mat<S> x, z0, t1, cdf1, t2, col1, t3, t4, cdf2, t5, col2, z1;
  NormCache<S> gn1, gn2;
};

template <typename S>
struct BlockCache {
  bool keep_attention = true;
  bool keep_feedforward = true;
  Mat<S> x_in, h1, q, k, v, o, x_mid, h2, u, u_gate, gate_cdf, gate, g, ff_drop;
  NormCache<S> ln1, ln2;
  std::vector<Mat<S>> probs;      // per head, post-softmax
  std::vector<Mat<S>> prob_drop;  // per head dropout scale, empty when off
};

// Everything one forward pass saves for its backward pass.
template <typename S>
struct ForwardPass {
  size_t length = 0;
  Mode mode = Mode::kEval;
  std::vector<ElementRole> roles;
  std::vector<int32_t> tokens;
  std::vector<int32_t> local_positions;
  std::vector<int32_t> patch_rows, patch_cols, patch_slot;
  std::vector<PatchCache<S>> patches;
  Mat<S> x0;
  std::vector<BlockCache<S>> blocks;
  Mat<S> x_final, hidden;
  NormCache<S> lnf;
  std::vector<size_t> outputs;
  Mat<S> logits;  // one row per output position
};

struct LossValue {
  double sum = 0.0;  // -sum_l m(l) log p(target_l)
  size_t count = 0;  // masked positions
  size_t empty_mask_warnings = 0;
  double mean() const { return count == 0 ? 0.0 : sum / static_cast<double>(count); }
};

namespace detail {

// -log softmax(row)[target]; optionally writes scale * d/d(row) into `drow`.
template <typename S, typename Row, typename DRow>
double nll_row(const Row& row, int32_t target, S scale, DRow* drow) {
  const S mx = row.maxCoeff();
  const S lse = mx + std::log((row.array() - mx).exp().sum());
  if (drow) {
    *drow = (row.array() - lse).exp() * scale;
    (*drow)(target) -= scale;
  }
  return static_cast<double>(lse - row(target));
}

}  // namespace detail

// -sum_l mask[l] * log softmax(logits[l])[targets[l]]. When `dlogits` is
// given it receives scale * d(loss)/d(logits); unmasked rows get zeros.
template <typename S>
LossValue masked_nll_loss(const Mat<S>& logits, std::span<const int32_t> targets,
                          std::span<const uint8_t> mask, Mat<S>* dlogits = nullptr, S scale = S(1)) {
  require(static_cast<size_t>(logits.rows()) == targets.size() && targets.size() == mask.size(),
          ErrorCode::kShape, "logits, targets and mask disagree in length");
  LossValue loss;
  if (dlogits) dlogits->setZero(logits.rows(), logits.cols());
  for (Eigen::Index l = 0; l < logits.rows(); ++l) {
    if (!mask[static_cast<size_t>(l)]) continue;
    const int32_t t = targets[static_cast<size_t>(l)];
    if (!(t >= 0 && t < logits.cols()))
      fail(ErrorCode::kRange, "masked position " + std::to_string(l) + " has no valid target");
    if (dlogits) {
      auto drow = dlogits->row(l);
      loss.sum += detail::nll_row(logits.row(l), t, scale, &drow);
    } else {
      loss.sum += detail::nll_row(logits.row(l), t, scale, static_cast<RowVec<S>*>(nullptr));
    }
    ++loss.count;
  }
  if (loss.count == 0) ++loss.empty_mask_warnings;
  return loss;
}

struct BatchLoss {
  LossValue total;
  std::map<std::string, LossValue> per_dataset;
  std::vector<LossValue> per_item;
};

template <typename S>
class Model {
 public:
  explicit Model(ModelConfig cfg, uint64_t seed = 0) : cfg_(cfg) {
    cfg_.validate();
    build();
    initialize(seed);
  }

  Model(const Model& o)
      : cfg_(o.cfg_), params_(o.params_), ids_(o.ids_), forward_passes_(o.forward_passes_.load()) {}
  Model& operator=(const Model& o) {
    cfg_ = o.cfg_;
    params_ = o.params_;
    ids_ = o.ids_;
    forward_passes_ = o.forward_passes_.load();
    return *this;
  }

  const ModelConfig& config() const { return cfg_; }
  ParameterSet<S>& params() { return params_; }
  const ParameterSet<S>& params() const { return params_; }
  uint64_t forward_passes() const { return forward_passes_.load(); }

  // Truncated normal (2 sigma) for weights and tables, zero biases, unit
  // normalization gains.
  void initialize(uint64_t seed) {
    Rng rng(seed);
    for (auto& p : params_.all()) {
      const bool is_gain = p.name.ends_with("_g");
      const bool is_bias = p.name.ends_with("_b");
      for (auto& v : p.value) {
        if (is_gain) {
          v = S(1);
        } else if (is_bias) {
          v = S(0);
        } else {
          double z;
          do {
            z = rng.normal();
          } while (std::abs(z) > 2.0);
          v = static_cast<S>(z * cfg_.init_std);
        }
      }
    }
  }

  // Input embedding: token lookup or patch encoding, plus position tables.
  // Padding rows are zero.
  Mat<S> embed(std::span<const Element> elements, std::span<const int32_t> local_positions, Mode mode,
               Rng* rng) const {
    ForwardPass<S> fw;
    embed_into(fw, elements, local_positions, mode, rng);
    return fw.x0;
  }

  // Forward pass over one sequence; logits are produced only for `outputs`.
  ForwardPass<S> forward(std::span<const Element> elements, std::span<const int32_t> local_positions,
                         Mode mode, Rng* rng, std::vector<size_t> outputs) const {
    ForwardPass<S> fw = forward_hidden(elements, local_positions, mode, rng, std::move(outputs));
    fw.logits.noalias() = selected_hidden(fw) * P(ids_.token).mat().transpose();
    return fw;
  }

  ForwardPass<S> forward(const ElementSequence& seq, Mode mode, Rng* rng, std::vector<size_t> outputs) const {
    return forward(seq.elements, seq.local_positions, mode, rng, std::move(outputs));
  }

  // Forward pass up to the final LayerNorm; leaves `logits` empty.
  ForwardPass<S> forward_hidden(std::span<const Element> elements, std::span<const int32_t> local_positions,
                                Mode mode, Rng* rng, std::vector<size_t> outputs) const {
    require(!elements.empty(), ErrorCode::kEmptyInput, "forward on an empty sequence");
    if (elements.size() > static_cast<size_t>(cfg_.context))
      fail(ErrorCode::kShape, "sequence of " + std::to_string(elements.size()) + " exceeds context " +
                                  std::to_string(cfg_.context));
    require(mode != Mode::kPretrain || cfg_.stochastic_depth == 0 || rng, ErrorCode::kContract,
            "pretraining mode needs a regularization stream");
    require(mode != Mode::kFinetune || cfg_.dropout == 0 || rng, ErrorCode::kContract,
            "fine-tuning mode needs a regularization stream");
    for (size_t o : outputs) require(o < elements.size(), ErrorCode::kShape, "output position out of range");
    ++forward_passes_;
    ForwardPass<S> fw;
    embed_into(fw, elements, local_positions, mode, rng);
    fw.mode = mode;

    const double skip = mode == Mode::kPretrain ? cfg_.stochastic_depth : 0.0;
    const double drop = mode == Mode::kFinetune ? cfg_.dropout : 0.0;
    Mat<S> x = fw.x0;
    fw.blocks.resize(static_cast<size_t>(cfg_.blocks));
    for (int b = 0; b < cfg_.blocks; ++b)
      x = block_forward(b, x, fw.blocks[static_cast<size_t>(b)], skip, drop, rng);

    fw.x_final = std::move(x);
    fw.hidden = layer_norm<S>(fw.x_final, cvec(ids_.lnf_g), cvec(ids_.lnf_b), fw.lnf);
    fw.outputs = std::move(outputs);
    return fw;
  }

  // Accumulates parameter gradients given d(loss)/d(logits) for the output
  // rows of `fw`.
  void backward(const ForwardPass<S>& fw, const Mat<S>& dlogits) {
    require(dlogits.rows() == fw.logits.rows() && dlogits.cols() == fw.logits.cols(), ErrorCode::kShape,
            "dlogits shape does not match the forward pass");
    auto& tok = P(ids_.token);
    tok.touched = true;
    tok.grad_mat().noalias() += dlogits.transpose() * selected_hidden(fw);
    backward_hidden(fw, dlogits * tok.mat());
  }

  // Backward from d(loss)/d(hidden) at the output rows of `fw`.
  void backward_hidden(const ForwardPass<S>& fw, const Mat<S>& dselected) {
    Mat<S> dhidden = Mat<S>::Zero(static_cast<Eigen::Index>(fw.length), cfg_.width);
    for (size_t i = 0; i < fw.outputs.size(); ++i)
      dhidden.row(static_cast<Eigen::Index>(fw.outputs[i])) += dselected.row(static_cast<Eigen::Index>(i));
    touch(ids_.lnf_g, ids_.lnf_b);
    Mat<S> dx = layer_norm_backward<S>(dhidden, fw.lnf, P(ids_.lnf_g).vec(), P(ids_.lnf_g).grad_vec(),
                                       P(ids_.lnf_b).grad_vec());
    for (int b = cfg_.blocks - 1; b >= 0; --b) dx = block_backward(b, dx, fw.blocks[static_cast<size_t>(b)]);
    embed_backward(fw, dx);
  }

  // Masked loss over a batch; with `grad` set, accumulates gradients of the
  // per-masked-token mean loss. Each item runs over its unpadded prefix; the
  // output projection runs once for the whole batch.
  BatchLoss loss(const MaskedBatch& batch, Mode mode, Rng* rng, bool grad) {
    BatchLoss out;
    out.per_item.resize(batch.batch_size());
    std::vector<ForwardPass<S>> passes;
    std::vector<size_t> pass_item;
    std::vector<int32_t> targets;
    for (size_t b = 0; b < batch.batch_size(); ++b) {
      const ElementSequence& item = batch.items[b];
      const auto tgt = batch.targets(b);
      const auto mask = batch.mask(b);
      std::vector<size_t> outputs;
      for (size_t l = 0; l < batch.length; ++l) {
        if (mask[l] && tgt[l] >= 0) {
          outputs.push_back(l);
          targets.push_back(tgt[l]);
        }
      }
      if (outputs.empty()) {
        ++out.per_item[b].empty_mask_warnings;
        continue;
      }
      const size_t n = std::min(item.unpadded_size(), static_cast<size_t>(cfg_.context));
      passes.push_back(forward_hidden(std::span(item.elements).first(n), std::span(item.local_positions).first(n),
                                      mode, rng, std::move(outputs)));
      pass_item.push_back(b);
    }

    const auto rows = static_cast<Eigen::Index>(targets.size());
    const S scale = rows ? S(1) / static_cast<S>(rows) : S(0);
    Mat<S> selected(rows, cfg_.width);
    Eigen::Index r = 0;
    for (const auto& fw : passes) {
      selected.middleRows(r, static_cast<Eigen::Index>(fw.outputs.size())) = selected_hidden(fw);
      r += static_cast<Eigen::Index>(fw.outputs.size());
    }
    auto& tok = P(ids_.token);
    Mat<S> logits(rows, cfg_.vocab);
    if (rows) logits.noalias() = selected * tok.mat().transpose();
    r = 0;
    for (size_t k = 0; k < passes.size(); ++k) {
      LossValue& item_loss = out.per_item[pass_item[k]];
      for (size_t i = 0; i < passes[k].outputs.size(); ++i, ++r) {
        const int32_t t = targets[static_cast<size_t>(r)];
        if (!(t < cfg_.vocab)) fail(ErrorCode::kRange, "target id " + std::to_string(t) + " outside the vocabulary");
        auto row = logits.row(r);
        // Gradients overwrite the logits row in place once the loss is read.
        item_loss.sum += grad ? detail::nll_row(RowVec<S>(row), t, scale, &row)
                              : detail::nll_row(row, t, scale, static_cast<RowVec<S>*>(nullptr));
        ++item_loss.count;
      }
    }
    if (grad && rows) {
      tok.touched = true;
      tok.grad_mat().noalias() += logits.transpose() * selected;
      const Mat<S> dselected = logits * tok.mat();
      r = 0;
      for (const auto& fw : passes) {
        const auto count = static_cast<Eigen::Index>(fw.outputs.size());
        backward_hidden(fw, dselected.middleRows(r, count));
        r += count;
      }
    }

    for (size_t b = 0; b < batch.batch_size(); ++b) {
      const LossValue& item_loss = out.per_item[b];
      auto& ds = out.per_dataset[batch.items[b].dataset];
      ds.sum += item_loss.sum;
      ds.count += item_loss.count;
      out.total.sum += item_loss.sum;
      out.total.count += item_loss.count;
      out.total.empty_mask_warnings += item_loss.empty_mask_warnings;
    }
    return out;
  }

  std::vector<std::string> parameter_names() const {
    std::vector<std::string> names;
    for (const auto& p : params_.all()) names.push_back(p.name);
    return names;
  }

 private:
  struct BlockIds {
    int ln1_g, ln1_b, wq, bq, wk, bk, wv, bv, wo, bo, ln2_g, ln2_b, w1, b1, w2, b2;
  };
  struct Ids {
    int token, local_pos, patch_row, patch_col, lnf_g, lnf_b;
    int stem_w, stem_b, gn1_g, gn1_b, conv1_w, conv1_b, gn2_g, gn2_b, conv2_w, conv2_b, proj_w, proj_b;
    std::vector<BlockIds> blocks;
  };

  Parameter<S>& P(int id) { return params_[id]; }
  const Parameter<S>& P(int id) const { return params_[id]; }
  // Const access to a parameter's value as a mutable-typed map; forward
  // passes never write through it.
  RowVecMap<S> cvec(int id) const { return const_cast<Model*>(this)->P(id).vec(); }

  Mat<S> selected_hidden(const ForwardPass<S>& fw) const {
    Mat<S> selected(static_cast<Eigen::Index>(fw.outputs.size()), cfg_.width);
    for (size_t i = 0; i < fw.outputs.size(); ++i)
      selected.row(static_cast<Eigen::Index>(i)) = fw.hidden.row(static_cast<Eigen::Index>(fw.outputs[i]));
    return selected;
  }

  template <typename... Ids>
  void touch(Ids... ids) {
    ((P(ids).touched = true), ...);
  }

  void build() {
    const int64_t d = cfg_.width, a = cfg_.attention_width(), f = cfg_.ff_hidden;
    const int64_t cw = cfg_.conv_channels();
    ids_.token = params_.add("embed.token", {cfg_.vocab, d});
    ids_.local_pos = params_.add("embed.local_position", {cfg_.local_pos_table, d});
    ids_.patch_row = params_.add("embed.patch_row", {cfg_.patch_pos_vocab, d});
    ids_.patch_col = params_.add("embed.patch_col", {cfg_.patch_pos_vocab, d});
    ids_.stem_w = params_.add("patch.stem_w", {cfg_.image_channels, cw});
    ids_.stem_b = params_.add("patch.stem_b", {cw});
    ids_.gn1_g = params_.add("patch.norm1_g", {cw});
    ids_.gn1_b = params_.add("patch.norm1_b", {cw});
    ids_.conv1_w = params_.add("patch.conv1_w", {9 * cw, cw});
    ids_.conv1_b = params_.add("patch.conv1_b", {cw});
    ids_.gn2_g = params_.add("patch.norm2_g", {cw});
    ids_.gn2_b = params_.add("patch.norm2_b", {cw});
    ids_.conv2_w = params_.add("patch.conv2_w", {9 * cw, cw});
    ids_.conv2_b = params_.add("patch.conv2_b", {cw});
    ids_.proj_w = params_.add("patch.proj_w", {int64_t{kPatchSize} * kPatchSize * cw, d});
    ids_.proj_b = params_.add("patch.proj_b", {d});
    for (int b = 0; b < cfg_.blocks; ++b) {
      const std::string p = "block" + std::to_string(b) + ".";
      BlockIds ids{};
      ids.ln1_g = params_.add(p + "attn_norm_g", {d});
      ids.ln1_b = params_.add(p + "attn_norm_b", {d});
      ids.wq = params_.add(p + "query_w", {d, a});
      ids.bq = params_.add(p + "query_b", {a});
      ids.wk = params_.add(p + "key_w", {d, a});
      ids.bk = params_.add(p + "key_b", {a});
      ids.wv = params_.add(p + "value_w", {d, a});
      ids.bv = params_.add(p + "value_b", {a});
      ids.wo = params_.add(p + "attn_out_w", {a, d});
      ids.bo = params_.add(p + "attn_out_b", {d});
      ids.ln2_g = params_.add(p + "ff_norm_g", {d});
      ids.ln2_b = params_.add(p + "ff_norm_b", {d});
      ids.w1 = params_.add(p + "ff_in_w", {d, 2 * f});
      ids.b1 = params_.add(p + "ff_in_b", {2 * f});
      ids.w2 = params_.add(p + "ff_out_w", {f, d});
      ids.b2 = params_.add(p + "ff_out_b", {d});
      ids_.blocks.push_back(ids);
    }
    ids_.lnf_g = params_.add("final_norm_g", {d});
    ids_.lnf_b = params_.add("final_norm_b", {d});
  }

  // ---- embedding ---------------------------------------------------------

  void embed_into(ForwardPass<S>& fw, std::span<const Element> elements,
                  std::span<const int32_t> local_positions, Mode mode, Rng* rng) const {
    require(elements.size() == local_positions.size(), ErrorCode::kShape,
            "elements and local positions differ in length");
    const size_t n = elements.size();
    fw.length = n;
    fw.roles.resize(n);
    fw.tokens.assign(n, -1);
    fw.local_positions.assign(local_positions.begin(), local_positions.end());
    fw.patch_rows.assign(n, -1);
    fw.patch_cols.assign(n, -1);
    fw.patch_slot.assign(n, -1);
    fw.x0 = Mat<S>::Zero(static_cast<Eigen::Index>(n), cfg_.width);
    const auto tok = P(ids_.token).mat();
    const auto lpos = P(ids_.local_pos).mat();
    for (size_t i = 0; i < n; ++i) {
      const Element& e = elements[i];
      const auto row = static_cast<Eigen::Index>(i);
      fw.roles[i] = e.role;
      if (e.is_padding()) continue;
      if (e.is_patch()) {
        require(e.patch != nullptr, ErrorCode::kContract, "patch element without payload");
        fw.patch_slot[i] = static_cast<int32_t>(fw.patches.size());
        fw.patches.emplace_back();
        fw.x0.row(row) += patch_forward(*e.patch, fw.patches.back());
        fw.patch_rows[i] = patch_position_index(e.patch->rows, mode, rng, cfg_.patch_pos_vocab);
        fw.patch_cols[i] = patch_position_index(e.patch->cols, mode, rng, cfg_.patch_pos_vocab);
        fw.x0.row(row) += P(ids_.patch_row).mat().row(fw.patch_rows[i]);
        fw.x0.row(row) += P(ids_.patch_col).mat().row(fw.patch_cols[i]);
      } else {
        const int32_t t = e.token.value();
        if (!(t >= 0 && t < cfg_.vocab))
          fail(ErrorCode::kRange, "token id " + std::to_string(t) + " outside the vocabulary");
        fw.tokens[i] = t;
        if (!(cfg_.zero_action_inputs && e.role == ElementRole::kAction)) fw.x0.row(row) += tok.row(t);
      }
      const int32_t lp = local_positions[i];
      if (lp >= 0) {
        require(lp < cfg_.local_pos_table, ErrorCode::kCapacity, "local position beyond the table");
        fw.x0.row(row) += lpos.row(lp);
      }
    }
  }

  void embed_backward(const ForwardPass<S>& fw, const Mat<S>& dx0) {
    auto tok_grad = P(ids_.token).grad_mat();
    auto lpos_grad = P(ids_.local_pos).grad_mat();
    for (size_t i = 0; i < fw.length; ++i) {
      const auto row = static_cast<Eigen::Index>(i);
      if (fw.roles[i] == ElementRole::kPadding) continue;
      if (fw.roles[i] == ElementRole::kImagePatch) {
        touch(ids_.patch_row, ids_.patch_col);
        P(ids_.patch_row).grad_mat().row(fw.patch_rows[i]) += dx0.row(row);
        P(ids_.patch_col).grad_mat().row(fw.patch_cols[i]) += dx0.row(row);
        patch_backward(fw.patches[static_cast<size_t>(fw.patch_slot[i])], dx0.row(row));
      } else if (!(cfg_.zero_action_inputs && fw.roles[i] == ElementRole::kAction)) {
        tok_grad.row(fw.tokens[i]) += dx0.row(row);
      }
      if (fw.local_positions[i] >= 0) {
        P(ids_.local_pos).touched = true;
        lpos_grad.row(fw.local_positions[i]) += dx0.row(row);
      }
    }
  }

  // ---- patch encoder -----------------------------------------------------

  RowVec<S> patch_forward(const ImagePatch& patch, PatchCache<S>& c) const {
    if (!(patch.channels == cfg_.image_channels))
      fail(ErrorCode::kShape, "patch has " + std::to_string(patch.channels) + " channels, model expects " +
                                  std::to_string(cfg_.image_channels));
    constexpr int kPixels = kPatchSize * kPatchSize;
    const int groups = cfg_.group_count();
    c.x.resize(kPixels, patch.channels);
    for (int p = 0; p < kPixels; ++p)
      for (int ch = 0; ch < patch.channels; ++ch)
        c.x(p, ch) = static_cast<S>(patch.pixels[static_cast<size_t>(p * patch.channels + ch)]);

    c.z0 = c.x * P(ids_.stem_w).mat();
    c.z0.rowwise() += cvec(ids_.stem_b);
    c.t1 = group_norm<S>(c.z0, groups, cvec(ids_.gn1_g), cvec(ids_.gn1_b), c.gn1);
    c.t2 = gelu_forward<S>(c.t1, c.cdf1);
    c.col1 = im2col3x3<S>(c.t2, kPatchSize);
    c.t3 = c.col1 * P(ids_.conv1_w).mat();
    c.t3.rowwise() += cvec(ids_.conv1_b);
    c.t4 = group_norm<S>(c.t3, groups, cvec(ids_.gn2_g), cvec(ids_.gn2_b), c.gn2);
    c.t5 = gelu_forward<S>(c.t4, c.cdf2);
    c.col2 = im2col3x3<S>(c.t5, kPatchSize);
    c.z1 = c.col2 * P(ids_.conv2_w).mat();
    c.z1.rowwise() += cvec(ids_.conv2_b);
    c.z1 += c.z0;
    Eigen::Map<const RowVec<S>> flat(c.z1.data(), c.z1.size());
    RowVec<S> out = flat * P(ids_.proj_w).mat();
    out += cvec(ids_.proj_b);
    return out;
  }

  void patch_backward(const PatchCache<S>& c, const RowVec<S>& dout) {
    constexpr int kPixels = kPatchSize * kPatchSize;
    const int groups = cfg_.group_count();
    const Eigen::Index cw = cfg_.conv_channels();
    touch(ids_.stem_w, ids_.stem_b, ids_.gn1_g, ids_.gn1_b, ids_.conv1_w, ids_.conv1_b, ids_.gn2_g,
          ids_.gn2_b, ids_.conv2_w, ids_.conv2_b, ids_.proj_w, ids_.proj_b);
    Eigen::Map<const RowVec<S>> flat(c.z1.data(), c.z1.size());
    P(ids_.proj_w).grad_mat().noalias() += flat.transpose() * dout;
    P(ids_.proj_b).grad_vec() += dout;
    RowVec<S> dflat = dout * P(ids_.proj_w).mat().transpose();
    Mat<S> dz1 = Eigen::Map<Mat<S>>(dflat.data(), kPixels, cw);

    P(ids_.conv2_w).grad_mat().noalias() += c.col2.transpose() * dz1;
    P(ids_.conv2_b).grad_vec() += dz1.colwise().sum();
    Mat<S> dt5 = col2im3x3<S>(dz1 * P(ids_.conv2_w).mat().transpose(), kPatchSize, cw);
    Mat<S> dt4 = dt5.cwiseProduct(gelu_derivative<S>(c.t4, c.cdf2));
    Mat<S> dt3 = group_norm_backward<S>(dt4, groups, c.gn2, P(ids_.gn2_g).vec(), P(ids_.gn2_g).grad_vec(),
                                        P(ids_.gn2_b).grad_vec());
    P(ids_.conv1_w).grad_mat().noalias() += c.col1.transpose() * dt3;
    P(ids_.conv1_b).grad_vec() += dt3.colwise().sum();
    Mat<S> dt2 = col2im3x3<S>(dt3 * P(ids_.conv1_w).mat().transpose(), kPatchSize, cw);
    Mat<S> dt1 = dt2.cwiseProduct(gelu_derivative<S>(c.t1, c.cdf1));
    Mat<S> dz0 = dz1 + group_norm_backward<S>(dt1, groups, c.gn1, P(ids_.gn1_g).vec(),
                                              P(ids_.gn1_g).grad_vec(), P(ids_.gn1_b).grad_vec());
    P(ids_.stem_w).grad_mat().noalias() += c.x.transpose() * dz0;
    P(ids_.stem_b).grad_vec() += dz0.colwise().sum();
  }

  // ---- transformer blocks ------------------------------------------------

  static Mat<S> dropout_scale(Eigen::Index rows, Eigen::Index cols, double rate, Rng& rng) {
    Mat<S> m(rows, cols);
    const S keep = static_cast<S>(1.0 / (1.0 - rate));
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = rng.bernoulli(rate) ? S(0) : keep;
    return m;
  }

  Mat<S> block_forward(int b, Mat<S> x, BlockCache<S>& c, double skip, double drop, Rng* rng) const {
    const BlockIds& id = ids_.blocks[static_cast<size_t>(b)];
    const Eigen::Index n = x.rows();
    const int kv = cfg_.kv_size;
    const S scale = S(1) / std::sqrt(static_cast<S>(kv));

    c.x_in = x;
    c.keep_attention = !(skip > 0 && rng->bernoulli(skip));
    if (c.keep_attention) {
      c.h1 = layer_norm<S>(x, cvec(id.ln1_g), cvec(id.ln1_b), c.ln1);
      c.q = c.h1 * P(id.wq).mat();
      c.q.rowwise() += cvec(id.bq);
      c.k = c.h1 * P(id.wk).mat();
      c.k.rowwise() += cvec(id.bk);
      c.v = c.h1 * P(id.wv).mat();
      c.v.rowwise() += cvec(id.bv);
      c.o.resize(n, cfg_.attention_width());
      c.probs.resize(static_cast<size_t>(cfg_.heads));
      c.prob_drop.clear();
      for (int h = 0; h < cfg_.heads; ++h) {
        Mat<S> s = (c.q.middleCols(h * kv, kv) * c.k.middleCols(h * kv, kv).transpose()) * scale;
        for (Eigen::Index i = 0; i < n; ++i) {
          const S mx = s.row(i).head(i + 1).maxCoeff();
          s.row(i).head(i + 1) = (s.row(i).head(i + 1).array() - mx).exp();
          s.row(i).head(i + 1) /= s.row(i).head(i + 1).sum();
          s.row(i).tail(n - i - 1).setZero();
        }
        c.probs[static_cast<size_t>(h)] = s;
        if (drop > 0) {
          c.prob_drop.push_back(dropout_scale(n, n, drop, *rng));
          s = s.cwiseProduct(c.prob_drop.back());
        }
        c.o.middleCols(h * kv, kv).noalias() = s * c.v.middleCols(h * kv, kv);
      }
      Mat<S> attn = c.o * P(id.wo).mat();
      attn.rowwise() += cvec(id.bo);
      x += attn;
    }
    c.x_mid = x;

    c.keep_feedforward = !(skip > 0 && rng->bernoulli(skip));
    if (c.keep_feedforward) {
      const int f = cfg_.ff_hidden;
      c.h2 = layer_norm<S>(x, cvec(id.ln2_g), cvec(id.ln2_b), c.ln2);
      c.u = c.h2 * P(id.w1).mat();
      c.u.rowwise() += cvec(id.b1);
      c.u_gate = c.u.leftCols(f);
      c.gate = gelu_forward<S>(c.u_gate, c.gate_cdf);
      c.g = c.gate.cwiseProduct(c.u.rightCols(f));
      Mat<S> ff = c.g * P(id.w2).mat();
      ff.rowwise() += cvec(id.b2);
      if (drop > 0) {
        c.ff_drop = dropout_scale(n, cfg_.width, drop, *rng);
        ff = ff.cwiseProduct(c.ff_drop);
      } else {
        c.ff_drop.resize(0, 0);
      }
      x += ff;
    }
    return x;
  }

  Mat<S> block_backward(int b, const Mat<S>& dout, const BlockCache<S>& c) {
    const BlockIds& id = ids_.blocks[static_cast<size_t>(b)];
    const int kv = cfg_.kv_size;
    const S scale = S(1) / std::sqrt(static_cast<S>(kv));
    Mat<S> dx = dout;

    if (c.keep_feedforward) {
      const int f = cfg_.ff_hidden;
      touch(id.ln2_g, id.ln2_b, id.w1, id.b1, id.w2, id.b2);
      Mat<S> dff = c.ff_drop.size() ? Mat<S>(dout.cwiseProduct(c.ff_drop)) : dout;
      P(id.w2).grad_mat().noalias() += c.g.transpose() * dff;
      P(id.b2).grad_vec() += dff.colwise().sum();
      const Mat<S> dg = dff * P(id.w2).mat().transpose();
      Mat<S> du(c.u.rows(), 2 * f);
      du.leftCols(f) = dg.cwiseProduct(c.u.rightCols(f)).cwiseProduct(gelu_derivative<S>(c.u_gate, c.gate_cdf));
      du.rightCols(f) = dg.cwiseProduct(c.gate);
      P(id.w1).grad_mat().noalias() += c.h2.transpose() * du;
      P(id.b1).grad_vec() += du.colwise().sum();
      dx += layer_norm_backward<S>(du * P(id.w1).mat().transpose(), c.ln2, P(id.ln2_g).vec(),
                                   P(id.ln2_g).grad_vec(), P(id.ln2_b).grad_vec());
    }

    if (c.keep_attention) {
      touch(id.ln1_g, id.ln1_b, id.wq, id.bq, id.wk, id.bk, id.wv, id.bv, id.wo, id.bo);
      P(id.wo).grad_mat().noalias() += c.o.transpose() * dx;
      P(id.bo).grad_vec() += dx.colwise().sum();
      const Mat<S> d_o = dx * P(id.wo).mat().transpose();
      Mat<S> dq(c.q.rows(), c.q.cols()), dk(c.k.rows(), c.k.cols()), dv(c.v.rows(), c.v.cols());
      for (int h = 0; h < cfg_.heads; ++h) {
        const Mat<S>& probs = c.probs[static_cast<size_t>(h)];
        const bool dropped = !c.prob_drop.empty();
        const Mat<S> used = dropped ? Mat<S>(probs.cwiseProduct(c.prob_drop[static_cast<size_t>(h)])) : probs;
        const auto doh = d_o.middleCols(h * kv, kv);
        dv.middleCols(h * kv, kv).noalias() = used.transpose() * doh;
        Mat<S> dp = doh * c.v.middleCols(h * kv, kv).transpose();
        if (dropped) dp = dp.cwiseProduct(c.prob_drop[static_cast<size_t>(h)]);
        for (Eigen::Index i = 0; i < dp.rows(); ++i) {
          const S dot = dp.row(i).dot(probs.row(i));
          dp.row(i) = probs.row(i).cwiseProduct((dp.row(i).array() - dot).matrix());
        }
        dq.middleCols(h * kv, kv).noalias() = (dp * c.k.middleCols(h * kv, kv)) * scale;
        dk.middleCols(h * kv, kv).noalias() = (dp.transpose() * c.q.middleCols(h * kv, kv)) * scale;
      }
      P(id.wq).grad_mat().noalias() += c.h1.transpose() * dq;
      P(id.bq).grad_vec() += dq.colwise().sum();
      P(id.wk).grad_mat().noalias() += c.h1.transpose() * dk;
      P(id.bk).grad_vec() += dk.colwise().sum();
      P(id.wv).grad_mat().noalias() += c.h1.transpose() * dv;
      P(id.bv).grad_vec() += dv.colwise().sum();
      Mat<S> dh1 = dq * P(id.wq).mat().transpose();
      dh1.noalias() += dk * P(id.wk).mat().transpose();
      dh1.noalias() += dv * P(id.wv).mat().transpose();
      dx += layer_norm_backward<S>(dh1, c.ln1, P(id.ln1_g).vec(), P(id.ln1_g).grad_vec(),
                                   P(id.ln1_b).grad_vec());
    }
    return dx;
  }

  ModelConfig cfg_;
  ParameterSet<S> params_;
  Ids ids_;
  mutable std::atomic<uint64_t> forward_passes_{0};
};

}  // namespace seqpolicy
