#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "wavedepth/autodiff.hpp"
#include "wavedepth/gwt.hpp"
#include "wavedepth/losses.hpp"
#include "wavedepth/metrics.hpp"
#include "wavedepth/synthdata.hpp"

namespace wavedepth {

struct EncoderConfig {
  std::size_t blocks = 4;  // L
  std::size_t frozen = 2;  // m, first blocks frozen under the hybrid strategy
  std::size_t dim = 32;
  std::size_t heads = 2;
  std::size_t patch = 8;
  std::size_t side = 64;

  std::size_t grid() const { return side / patch; }
  std::size_t tokens() const { return grid() * grid(); }
};
void validate(const EncoderConfig& c);

enum class Strategy { kFull, kLora, kHybrid };
const char* strategy_name(Strategy s);
Strategy parse_strategy(const std::string& name);

struct AdapterConfig {
  Strategy strategy = Strategy::kHybrid;
  std::size_t rank = 4;
  double scale = 0.25;  // multiplies the low-rank update
};
void validate(const AdapterConfig& c);

struct TrainConfig {
  std::size_t epochs = 1;
  std::size_t steps = 200;  // when non-zero, overrides epochs
  std::size_t batch = 8;
  double lr = 1e-3;
  std::size_t warmup = 50;
  double weight_decay = 1e-2;
  std::uint64_t seed = 0;
  LossWeights loss;
  bool gwt = true;
  bool mc = true;
  SmoothnessMode smoothness = SmoothnessMode::kImageWeights;
  ScaleLossForm scale_form = ScaleLossForm::kLiteral;

  // Optimizer steps for a training split of `n_train` samples.
  std::size_t total_steps(std::size_t n_train) const;
};
void validate(const TrainConfig& c, std::size_t n_train);

// Strict JSON forms; unknown keys throw ContractError naming the key.
nlohmann::json encoder_to_json(const EncoderConfig& c);
EncoderConfig encoder_from_json(const nlohmann::json& j,
                                const std::string& path = "encoder");
nlohmann::json adapter_to_json(const AdapterConfig& c);
AdapterConfig adapter_from_json(const nlohmann::json& j,
                                const std::string& path = "adapter");
nlohmann::json loss_to_json(const LossWeights& w);
LossWeights loss_from_json(const nlohmann::json& j,
                           const std::string& path = "loss");
// Loss weights are serialized separately under "loss".
nlohmann::json train_to_json(const TrainConfig& c);
TrainConfig train_from_json(const nlohmann::json& j,
                            const std::string& path = "train");

constexpr std::size_t kDecoderChannels = 8;
constexpr double kDepthEpsilon = 1e-3;

// All weights of the depth network. Encoder and decoder weights live in
// `weights`; the wavelet module keeps its own parameters and batchnorm state.
struct Model {
  EncoderConfig encoder;
  AdapterConfig adapter;
  bool gwt_enabled = true;
  std::uint64_t seed = 0;
  std::map<std::string, Parameter> weights;
  GwtParams gwt;

  // Sorted by name; includes the wavelet module only when enabled.
  std::vector<Parameter*> parameters();
  std::vector<const Parameter*> parameters() const;
  Parameter& param(const std::string& name);
  const Parameter& param(const std::string& name) const;
  bool has_param(const std::string& name) const;
  std::vector<std::pair<std::string, ops::BatchNormState*>> bn_states();

  std::size_t trainable_count() const;
};

// Random initialization followed by apply_strategy(adapter, encoder.frozen).
Model init_model(const EncoderConfig& encoder, const AdapterConfig& adapter,
                 bool gwt_enabled, std::uint64_t seed);

// Sets trainable flags: full trains the whole encoder; hybrid freezes the
// patch embedding, positional encodings and blocks 1..m (embedding stays
// trainable when m = 0); lora freezes every encoder weight and injects
// rank-r factors on q/k/v/out and both MLP maps, which are the only
// trainable encoder values. Decoder and wavelet weights stay trainable.
void apply_strategy(Model& model, const AdapterConfig& adapter, std::size_t m);

// Names of the encoder linear maps that LoRA wraps, e.g.
// "encoder.block1.attn.q".
std::vector<std::string> lora_targets(const EncoderConfig& c);

// (B, 3, side, side) -> tokens (B, 1, K, D).
Var encoder_forward(Tape& tape, Model& model, Var image);
// Tokens (B, 1, K, D) -> depth (B, 1, side, side), strictly positive.
Var decoder_forward(Tape& tape, Model& model, Var tokens, bool gwt_enabled,
                    Mode mode);
Var model_forward(Tape& tape, Model& model, Var image, Mode mode);

// Eval-mode prediction without recording.
Tensor predict(Model& model, const Tensor& images);

struct Batch {
  Tensor rgb;    // (B, 3, H, W)
  Tensor depth;  // (B, 1, H, W)
};
Batch make_batch(const std::vector<Sample>& samples,
                 std::span<const std::size_t> indices);

struct AdamState {
  std::size_t step = 0;
  std::map<std::string, Tensor> m;
  std::map<std::string, Tensor> v;
};

struct AdamConfig {
  double lr = 1e-3;
  std::size_t warmup = 0;
  double weight_decay = 0.0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// lr * min(1, step / warmup); warmup 0 means no ramp.
double scheduled_lr(const AdamConfig& c, std::size_t step);

// Decoupled weight decay applies to weight matrices and kernels only
// (names ending in "weight" and LoRA factors).
bool decays(const std::string& name);

// One bias-corrected AdamW update. Frozen parameters and parameters without
// a gradient entry are untouched. Any non-finite gradient throws DomainError
// before anything is modified.
void adamw_step(std::span<Parameter* const> params, const GradientMap& grads,
                AdamState& state, const AdamConfig& config);

struct StepLosses {
  double scale = 0.0;
  double grad = 0.0;
  double smooth = 0.0;
  double total = 0.0;
};

// Loss of the model on one batch, recorded on `tape`.
LossBreakdown batch_loss(Tape& tape, Model& model, const Batch& batch,
                         const TrainConfig& cfg, double d_min, double d_max,
                         Mode mode);

struct HistoryRow {
  std::size_t step = 0;
  double lr = 0.0;
  StepLosses losses;
  std::array<double, 4> gates{};  // after the update; zeros without GWT
};

struct TrainResult {
  Model model;      // the last model whose loss was finite
  AdamState optimizer;
  std::vector<HistoryRow> history;
  bool aborted = false;
  std::string message;
};

// Deterministic loop over shuffled mini-batches of the training split.
// Callback, when set, runs after every step (progress reporting).
TrainResult train(const Dataset& data, const EncoderConfig& encoder,
                  const AdapterConfig& adapter, const TrainConfig& cfg,
                  const std::function<void(const HistoryRow&)>& on_step = {});

// Replaces the batch-norm running statistics with averages over `samples`
// (train-mode passes in chunks of 8). Training calls this after the last
// step; the moving averages from batches of a few frames are too noisy for
// eval mode.
void recalibrate_batch_norm(Model& model, const std::vector<Sample>& samples);

std::vector<std::string> history_header();
std::vector<std::string> history_row(const HistoryRow& row);

struct EvalResult {
  std::vector<std::string> ids;
  std::vector<MetricsReport> frames;
  MetricsReport aggregate;
};

// Eval-mode metrics over a split with the dataset's depth range mask. With
// `gt_as_pred` the ground truth replaces the prediction.
EvalResult evaluate(Model& model, const Dataset& data, const std::string& split,
                    bool gt_as_pred = false);

struct Checkpoint {
  nlohmann::json config;  // run configuration the model was built from
  Model model;
  AdamState optimizer;
};

// "SPDK", u32 version, u64 length + JSON block, u64 record count, then
// records: u32 name length, name, 4 x u64 extents, little-endian f64 data.
std::string encode_checkpoint(const Checkpoint& ckpt);
Checkpoint decode_checkpoint(std::string_view bytes);
void save_checkpoint(const std::filesystem::path& path, const Checkpoint& c);
Checkpoint load_checkpoint(const std::filesystem::path& path);

// Central-difference check of d(total loss)/d(parameter) on up to
// `max_entries` entries of one named parameter, train-mode forward.
CheckReport parameter_grad_check(Model& model, const Batch& batch,
                                 const TrainConfig& cfg, double d_min,
                                 double d_max, const std::string& name,
                                 double tol, std::size_t max_entries = 6);

}  // namespace wavedepth
