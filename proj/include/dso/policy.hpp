#pragma once

// Small decision transformer. Each block runs attention -> LayerNorm -> MLP:
//
//   u = x + Attn(x) Wo
//   n = LN(u)                 <- hook site, steered when an intervention is set
//   x = n + MLP(n)
//
// followed by mean pooling over positions and a linear head over the two
// candidate slots.

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "dso/autodiff.hpp"
#include "dso/data.hpp"
#include "dso/steering.hpp"

namespace dso::policy {

struct PolicyConfig {
  std::size_t vocab_size = 64;
  std::size_t d_model = 32;
  std::size_t num_blocks = 4;
  std::size_t mlp_hidden = 64;
  std::size_t num_actions = kNumActions;
  std::size_t seq_len = kSequenceLength;
  std::uint64_t seed = 0;

  void validate() const;
  friend bool operator==(const PolicyConfig&, const PolicyConfig&) = default;
};

struct HookSite {
  std::size_t block;
  std::string module = "ln";
  std::size_t width;
};

struct BlockWeights {
  ad::Tensor wq, wk, wv, wo;
  ad::Tensor ln_gain, ln_shift;
  ad::Tensor w1, c1, w2, c2;
};

class PolicyModel {
 public:
  /// Randomly initialised from `config.seed`.
  explicit PolicyModel(const PolicyConfig& config);

  const PolicyConfig& config() const noexcept { return config_; }
  std::vector<HookSite> hook_sites() const;
  std::vector<std::size_t> hook_widths() const;

  /// Every weight tensor in a fixed order (checkpoint and optimizer order).
  std::vector<ad::Tensor*> parameters();
  std::vector<const ad::Tensor*> parameters() const;
  std::vector<std::string> parameter_names() const;
  std::size_t parameter_count() const;
  /// FNV-1a over the raw bytes of every weight.
  std::uint64_t checksum() const;

  const std::vector<BlockWeights>& blocks() const noexcept { return blocks_; }

  friend bool operator==(const PolicyModel&, const PolicyModel&);

 private:
  PolicyConfig config_;
  ad::Tensor token_embedding_, position_embedding_;
  std::vector<BlockWeights> blocks_;
  ad::Tensor head_w_, head_b_;
};

/// Model weights placed in a graph, either frozen (constants) or trainable.
struct BoundModel {
  const PolicyModel* model = nullptr;
  std::vector<ad::Var> vars;  ///< parameters() order
};
BoundModel bind(ad::Graph& g, const PolicyModel& model, bool trainable);

/// Intervention vectors placed in a graph.
struct BoundIntervention {
  std::vector<ad::Var> a, b;
  ad::Var lambda;
};
BoundIntervention bind(ad::Graph& g, const steer::InterventionParams& params, bool trainable);

/// Per-block LayerNorm outputs captured during a forward pass, before and
/// after steering. Each entry is [seq_len x d_model].
struct ActivationTrace {
  std::vector<ad::Tensor> ln_output;
  std::vector<ad::Tensor> steered;
};

/// Logits [1 x num_actions] for one token sequence. Throws IndexError for
/// out-of-vocabulary tokens and ShapeError for mismatched intervention widths.
ad::Var logits(const BoundModel& model, std::span<const std::size_t> tokens,
               const BoundIntervention* intervention = nullptr, ActivationTrace* trace = nullptr);

/// pi(. | tokens), optionally steered.
std::vector<double> forward(const PolicyModel& model, std::span<const std::size_t> tokens,
                            const steer::InterventionParams* intervention = nullptr);

/// Action distributions for many sequences; row i belongs to sequences[i].
std::vector<std::vector<double>> forward_batch(
    const PolicyModel& model, std::span<const std::vector<std::size_t>> sequences,
    const steer::InterventionParams* intervention = nullptr);

/// Pre-steer LayerNorm outputs of one sequence.
ActivationTrace trace_activations(const PolicyModel& model, std::span<const std::size_t> tokens,
                                  const steer::InterventionParams* intervention = nullptr);

inline constexpr double kLogProbFloor = -30.0;

struct LogProb {
  double value = 0.0;
  std::vector<std::vector<double>> grad_a;  ///< d value / d a, per block
  std::vector<std::vector<double>> grad_b;
  double grad_lambda = 0.0;
  bool clamped = false;  ///< value hit the floor; gradient is zero there
};

/// log pi_{a,b,lambda}(action | tokens) with its gradient w.r.t. the
/// intervention. Model weights are constants in the graph.
LogProb log_prob(const PolicyModel& model, std::span<const std::size_t> tokens, std::size_t action,
                 const steer::InterventionParams& intervention);

struct PretrainConfig {
  std::size_t epochs = 20;
  double lr = 3e-4;
  double weight_decay = 0.0;
  std::size_t batch_size = 32;
  std::uint64_t seed = 0;
};

struct PretrainLog {
  std::vector<double> epoch_loss;
};

/// Cross-entropy training of every weight on labelled samples (AdamW). Throws DivergenceError on a non-finite loss.
PretrainLog pretrain_biased(PolicyModel& model, std::span<const data::LabeledSample> samples,
                            const PretrainConfig& config);

inline constexpr std::uint32_t kModelCheckpointVersion = 1;

/// Binary layout (little-endian):
///   "DSOM" | u32 version | u64 vocab, d_model, blocks, mlp_hidden, actions,
///   seq_len, seed | u64 tensor count | per tensor: u32 rank, u64 dims[rank],
///   f64 values | u64 FNV-1a checksum of all preceding bytes
void save_model(const PolicyModel& model, const std::filesystem::path& path);
PolicyModel load_model(const std::filesystem::path& path);

}  // namespace dso::policy
