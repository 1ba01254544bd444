#include "dso/policy.hpp"

#include <cmath>
#include <cstring>
#include <numeric>
#include <optional>
#include <algorithm>

#include "dso/binary_io.hpp"
#include "dso/errors.hpp"
#include "dso/optimizer.hpp"
#include "dso/rng.hpp"

namespace dso::policy {

void PolicyConfig::validate() const {
  if (vocab_size < 1 || d_model < 1 || num_blocks < 1 || mlp_hidden < 1 || num_actions < 1 ||
      seq_len < 1) {
    throw PreconditionError("policy config: all sizes must be >= 1");
  }
}

namespace {

ad::Tensor gaussian(Rng& rng, std::vector<std::size_t> shape, double stddev) {
  ad::Tensor t(std::move(shape));
  for (double& x : t.data()) x = stddev * rng.normal();
  return t;
}

constexpr std::size_t kPerBlock = 10;

}  // namespace

PolicyModel::PolicyModel(const PolicyConfig& config) : config_(config) {
  config_.validate();
  Rng rng = Rng(config.seed).split("policy-init");
  const std::size_t d = config.d_model, h = config.mlp_hidden;
  const double sd = 1.0 / std::sqrt(static_cast<double>(d));
  token_embedding_ = gaussian(rng, {config.vocab_size, d}, 1.0);
  position_embedding_ = gaussian(rng, {config.seq_len, d}, 1.0);
  for (std::size_t l = 0; l < config.num_blocks; ++l) {
    BlockWeights b;
    b.wq = gaussian(rng, {d, d}, sd);
    b.wk = gaussian(rng, {d, d}, sd);
    b.wv = gaussian(rng, {d, d}, sd);
    b.wo = gaussian(rng, {d, d}, sd);
    b.ln_gain = ad::Tensor({d}, 1.0);
    b.ln_shift = ad::Tensor({d}, 0.0);
    b.w1 = gaussian(rng, {d, h}, sd);
    b.c1 = ad::Tensor({h}, 0.0);
    b.w2 = gaussian(rng, {h, d}, 1.0 / std::sqrt(static_cast<double>(h)));
    b.c2 = ad::Tensor({d}, 0.0);
    blocks_.push_back(std::move(b));
  }
  head_w_ = gaussian(rng, {d, config.num_actions}, sd);
  head_b_ = ad::Tensor({config.num_actions}, 0.0);
}

std::vector<HookSite> PolicyModel::hook_sites() const {
  std::vector<HookSite> sites;
  for (std::size_t l = 0; l < config_.num_blocks; ++l) sites.push_back({l, "ln", config_.d_model});
  return sites;
}

std::vector<std::size_t> PolicyModel::hook_widths() const {
  return std::vector<std::size_t>(config_.num_blocks, config_.d_model);
}

std::vector<ad::Tensor*> PolicyModel::parameters() {
  std::vector<ad::Tensor*> p = {&token_embedding_, &position_embedding_};
  for (auto& b : blocks_) {
    for (ad::Tensor* t : {&b.wq, &b.wk, &b.wv, &b.wo, &b.ln_gain, &b.ln_shift, &b.w1, &b.c1,
                          &b.w2, &b.c2}) {
      p.push_back(t);
    }
  }
  p.push_back(&head_w_);
  p.push_back(&head_b_);
  return p;
}

std::vector<const ad::Tensor*> PolicyModel::parameters() const {
  auto mut = const_cast<PolicyModel*>(this)->parameters();
  return {mut.begin(), mut.end()};
}

std::vector<std::string> PolicyModel::parameter_names() const {
  std::vector<std::string> n = {"token_embedding", "position_embedding"};
  for (std::size_t l = 0; l < blocks_.size(); ++l) {
    for (const char* s : {"wq", "wk", "wv", "wo", "ln_gain", "ln_shift", "w1", "c1", "w2", "c2"}) {
      n.push_back("block" + std::to_string(l) + "." + s);
    }
  }
  n.push_back("head_w");
  n.push_back("head_b");
  return n;
}

std::size_t PolicyModel::parameter_count() const {
  std::size_t n = 0;
  for (const ad::Tensor* t : parameters()) n += t->size();
  return n;
}

std::uint64_t PolicyModel::checksum() const {
  std::vector<std::uint8_t> bytes;
  for (const ad::Tensor* t : parameters()) {
    const auto* raw = reinterpret_cast<const std::uint8_t*>(t->data().data());
    bytes.insert(bytes.end(), raw, raw + t->size() * sizeof(double));
  }
  return io::fnv1a64(bytes);
}

bool operator==(const PolicyModel& x, const PolicyModel& y) {
  if (!(x.config_ == y.config_)) return false;
  const auto px = x.parameters(), py = y.parameters();
  for (std::size_t i = 0; i < px.size(); ++i) {
    if (!(*px[i] == *py[i])) return false;
  }
  return true;
}

// ---- graph construction ---------------------------------------------------

BoundModel bind(ad::Graph& g, const PolicyModel& model, bool trainable) {
  BoundModel bm;
  bm.model = &model;
  for (const ad::Tensor* t : model.parameters()) {
    bm.vars.push_back(trainable ? g.parameter(*t) : g.constant(*t));
  }
  return bm;
}

BoundIntervention bind(ad::Graph& g, const steer::InterventionParams& params, bool trainable) {
  if (params.a.size() != params.b.size()) throw ShapeError("intervention: a/b block counts differ");
  BoundIntervention bi;
  for (std::size_t l = 0; l < params.blocks(); ++l) {
    ad::Tensor a = ad::Tensor::vector(params.a[l]);
    ad::Tensor b = ad::Tensor::vector(params.b[l]);
    bi.a.push_back(trainable ? g.parameter(std::move(a)) : g.constant(std::move(a)));
    bi.b.push_back(trainable ? g.parameter(std::move(b)) : g.constant(std::move(b)));
  }
  bi.lambda = g.constant(ad::Tensor::scalar(params.lambda));
  return bi;
}

ad::Var logits(const BoundModel& bm, std::span<const std::size_t> tokens,
               const BoundIntervention* iv, ActivationTrace* trace) {
  const PolicyConfig& cfg = bm.model->config();
  if (tokens.size() != cfg.seq_len) {
    throw ShapeError("forward: expected " + std::to_string(cfg.seq_len) + " tokens, got " +
                     std::to_string(tokens.size()));
  }
  if (iv && iv->a.size() != cfg.num_blocks) {
    throw ShapeError("forward: intervention has " + std::to_string(iv->a.size()) +
                     " blocks, model has " + std::to_string(cfg.num_blocks));
  }
  const auto& v = bm.vars;
  std::vector<std::size_t> positions(cfg.seq_len);
  std::iota(positions.begin(), positions.end(), std::size_t{0});
  ad::Var x = ad::add(ad::gather_rows(v[0], tokens), ad::gather_rows(v[1], positions));
  for (std::size_t l = 0; l < cfg.num_blocks; ++l) {
    const ad::Var* w = &v[2 + l * kPerBlock];
    ad::Var q = ad::matmul(x, w[0]);
    ad::Var k = ad::matmul(x, w[1]);
    ad::Var val = ad::matmul(x, w[2]);
    ad::Var u = ad::add(x, ad::matmul(ad::attention(q, k, val), w[3]));
    ad::Var n = ad::layer_norm(u, w[4], w[5]);
    if (trace) trace->ln_output.push_back(n.value());
    if (iv) n = ad::steer(n, iv->a[l], iv->b[l], iv->lambda);
    if (trace) trace->steered.push_back(n.value());
    ad::Var hidden = ad::gelu(ad::add_row(ad::matmul(n, w[6]), w[7]));
    x = ad::add(n, ad::add_row(ad::matmul(hidden, w[8]), w[9]));
  }
  const std::size_t head = 2 + cfg.num_blocks * kPerBlock;
  return ad::add_row(ad::matmul(ad::mean_rows(x), v[head]), v[head + 1]);
}


std::vector<double> forward(const PolicyModel& model, std::span<const std::size_t> tokens,
                            const steer::InterventionParams* intervention) {
  ad::Graph g;
  BoundModel bm = bind(g, model, false);
  std::optional<BoundIntervention> bi;
  if (intervention) bi = bind(g, *intervention, false);
  ad::Var out = ad::softmax_rows(logits(bm, tokens, bi ? &*bi : nullptr));
  return {out.value().data().begin(), out.value().data().end()};
}

std::vector<std::vector<double>> forward_batch(const PolicyModel& model,
                                               std::span<const std::vector<std::size_t>> sequences,
                                               const steer::InterventionParams* intervention) {
  constexpr std::size_t kChunk = 32;
  std::vector<std::vector<double>> out;
  out.reserve(sequences.size());
  for (std::size_t start = 0; start < sequences.size(); start += kChunk) {
    ad::Graph g;
    BoundModel bm = bind(g, model, false);
    std::optional<BoundIntervention> bi;
    if (intervention) bi = bind(g, *intervention, false);
    const std::size_t end = std::min(sequences.size(), start + kChunk);
    for (std::size_t i = start; i < end; ++i) {
      ad::Var p = ad::softmax_rows(logits(bm, sequences[i], bi ? &*bi : nullptr));
      out.emplace_back(p.value().data().begin(), p.value().data().end());
    }
  }
  return out;
}

ActivationTrace trace_activations(const PolicyModel& model, std::span<const std::size_t> tokens,
                                  const steer::InterventionParams* intervention) {
  ad::Graph g;
  BoundModel bm = bind(g, model, false);
  std::optional<BoundIntervention> bi;
  if (intervention) bi = bind(g, *intervention, false);
  ActivationTrace trace;
  logits(bm, tokens, bi ? &*bi : nullptr, &trace);
  return trace;
}

LogProb log_prob(const PolicyModel& model, std::span<const std::size_t> tokens, std::size_t action,
                 const steer::InterventionParams& intervention) {
  if (action >= model.config().num_actions) {
    throw IndexError("log_prob: action " + std::to_string(action) + " out of range");
  }
  ad::Graph g;
  BoundModel bm = bind(g, model, false);
  BoundIntervention bi = bind(g, intervention, true);
  // lambda is differentiable here too.
  bi.lambda = g.parameter(ad::Tensor::scalar(intervention.lambda));
  ad::Var lp = ad::pick(ad::log_softmax_rows(logits(bm, tokens, &bi)), action);

  LogProb out;
  for (std::size_t l = 0; l < bi.a.size(); ++l) {
    out.grad_a.emplace_back(intervention.a[l].size(), 0.0);
    out.grad_b.emplace_back(intervention.b[l].size(), 0.0);
  }
  if (lp.item() < kLogProbFloor) {
    out.value = kLogProbFloor;
    out.clamped = true;
    return out;
  }
  out.value = lp.item();
  g.backward(lp);
  for (std::size_t l = 0; l < bi.a.size(); ++l) {
    const auto ga = bi.a[l].grad().data();
    const auto gb = bi.b[l].grad().data();
    out.grad_a[l].assign(ga.begin(), ga.end());
    out.grad_b[l].assign(gb.begin(), gb.end());
  }
  out.grad_lambda = bi.lambda.grad()[0];
  return out;
}

PretrainLog pretrain_biased(PolicyModel& model, std::span<const data::LabeledSample> samples,
                            const PretrainConfig& config) {
  PretrainLog log;
  if (config.epochs == 0 || samples.empty()) return log;
  if (config.batch_size == 0) throw PreconditionError("pretrain: batch_size must be >= 1");
  std::vector<std::vector<std::size_t>> encoded;
  encoded.reserve(samples.size());
  for (const auto& s : samples) encoded.push_back(data::encode(s.sample));

  optim::AdamW opt({.lr = config.lr, .weight_decay = config.weight_decay});
  std::vector<ad::Tensor*> params = model.parameters();
  Rng rng = Rng(config.seed).split("pretrain-order");
  std::vector<std::size_t> order(samples.size());
  std::iota(order.begin(), order.end(), std::size_t{0});

  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    Rng epoch_rng = rng.split(epoch);
    epoch_rng.shuffle(order);
    double total = 0.0;
    for (std::size_t start = 0; start < order.size(); start += config.batch_size) {
      const std::size_t end = std::min(order.size(), start + config.batch_size);
      ad::Graph g;
      BoundModel bm = bind(g, model, true);
      std::vector<ad::Var> losses;
      for (std::size_t i = start; i < end; ++i) {
        const std::size_t idx = order[i];
        const std::size_t label = samples[idx].label;
        losses.push_back(ad::softmax_cross_entropy(logits(bm, encoded[idx]), {&label, 1}));
      }
      ad::Var loss = ad::mean(ad::stack(losses));
      if (!std::isfinite(loss.item())) {
        throw DivergenceError("pretrain: non-finite loss in epoch " + std::to_string(epoch));
      }
      total += loss.item() * static_cast<double>(end - start);
      g.backward(loss);
      std::vector<ad::Tensor> grads;
      for (const ad::Var& v : bm.vars) grads.push_back(v.grad());
      opt.step(params, grads);
    }
    log.epoch_loss.push_back(total / static_cast<double>(order.size()));
  }
  return log;
}

// ---- checkpoint -----------------------------------------------------------

namespace {
constexpr std::uint8_t kModelMagic[4] = {'D', 'S', 'O', 'M'};
}

void save_model(const PolicyModel& model, const std::filesystem::path& path) {
  const PolicyConfig& c = model.config();
  io::ByteWriter w;
  w.bytes(kModelMagic);
  w.u32(kModelCheckpointVersion);
  for (std::uint64_t v : {std::uint64_t{c.vocab_size}, std::uint64_t{c.d_model},
                          std::uint64_t{c.num_blocks}, std::uint64_t{c.mlp_hidden},
                          std::uint64_t{c.num_actions}, std::uint64_t{c.seq_len}, c.seed}) {
    w.u64(v);
  }
  const auto params = model.parameters();
  w.u64(params.size());
  for (const ad::Tensor* t : params) {
    w.u32(static_cast<std::uint32_t>(t->rank()));
    for (std::size_t dim : t->shape()) w.u64(dim);
    for (double x : t->data()) w.f64(x);
  }
  w.finish(path);
}

PolicyModel load_model(const std::filesystem::path& path) {
  io::ByteReader r = io::ByteReader::open(path);
  const auto magic = r.bytes(4);
  if (!std::equal(magic.begin(), magic.end(), std::begin(kModelMagic))) {
    throw FormatError(path.string() + ": not a model checkpoint");
  }
  const std::uint32_t version = r.u32();
  if (version != kModelCheckpointVersion) {
    throw VersionError(path.string() + ": unsupported model checkpoint version " +
                       std::to_string(version));
  }
  PolicyConfig c;
  c.vocab_size = r.u64();
  c.d_model = r.u64();
  c.num_blocks = r.u64();
  c.mlp_hidden = r.u64();
  c.num_actions = r.u64();
  c.seq_len = r.u64();
  c.seed = r.u64();
  PolicyModel model(c);
  auto params = model.parameters();
  if (r.u64() != params.size()) throw FormatError(path.string() + ": tensor count mismatch");
  for (ad::Tensor* t : params) {
    const std::uint32_t rank = r.u32();
    std::vector<std::size_t> shape(rank);
    for (auto& s : shape) s = r.u64();
    if (shape != t->shape()) throw FormatError(path.string() + ": tensor shape mismatch");
    for (double& x : t->data()) x = r.f64();
  }
  if (!r.at_end()) throw FormatError(path.string() + ": trailing bytes in checkpoint");
  return model;
}

}  // namespace dso::policy
