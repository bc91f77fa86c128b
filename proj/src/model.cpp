#include "wavedepth/model.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <numeric>

#include "wavedepth/error.hpp"
#include "wavedepth/format.hpp"
#include "wavedepth/io.hpp"
#include "wavedepth/json_fields.hpp"
#include "wavedepth/ops.hpp"
#include "wavedepth/random.hpp"

namespace wavedepth {
namespace {

bool ends_with(const std::string& s, const std::string& suffix) {
  return s.size() >= suffix.size() &&
         s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
}

bool starts_with(const std::string& s, const std::string& prefix) {
  return s.compare(0, prefix.size(), prefix) == 0;
}

std::string block_prefix(std::size_t b) {
  return "encoder.block" + std::to_string(b) + ".";
}

void add_weight(Model& m, const std::string& name, Tensor value) {
  m.weights[name] = Parameter{name, std::move(value), true};
}

void add_linear(Model& m, Rng& rng, const std::string& base, std::size_t in,
                std::size_t out) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(in));
  add_weight(m, base + ".weight",
             rng.uniform_tensor(Shape(1, 1, in, out), -bound, bound));
  add_weight(m, base + ".bias", Tensor(Shape(1, 1, 1, out)));
}

void add_conv(Model& m, Rng& rng, const std::string& base, std::size_t in,
              std::size_t out) {
  const double bound = 1.0 / std::sqrt(9.0 * static_cast<double>(in));
  add_weight(m, base + ".weight",
             rng.uniform_tensor(Shape(out, in, 3, 3), -bound, bound));
  add_weight(m, base + ".bias", Tensor(Shape(1, out, 1, 1)));
}

Var bind_param(Tape& tape, Model& m, const std::string& name) {
  return tape.parameter(m.param(name));
}

// x W + b, plus scale (x A) B when the map carries LoRA factors.
Var linear(Tape& tape, Model& m, const std::string& base, Var x) {
  Var y = ops::add(ops::matmul(x, bind_param(tape, m, base + ".weight")),
                   bind_param(tape, m, base + ".bias"));
  const std::string a = base + ".lora_a";
  if (m.weights.count(a)) {
    Var low = ops::matmul(ops::matmul(x, bind_param(tape, m, a)),
                          bind_param(tape, m, base + ".lora_b"));
    y = ops::add(y, ops::scale(low, m.adapter.scale));
  }
  return y;
}

Var layer_norm(Tape& tape, Model& m, const std::string& base, Var x) {
  return ops::layer_norm(x, bind_param(tape, m, base + ".gamma"),
                         bind_param(tape, m, base + ".beta"));
}

Var attention(Tape& tape, Model& m, const std::string& base, Var x) {
  const Shape& s = x.shape();
  const std::size_t B = s.n(), K = s.h(), D = s.w();
  const std::size_t H = m.encoder.heads, dh = D / H;
  auto heads = [&](Var t, std::array<std::size_t, 4> perm) {
    return ops::permute(ops::reshape(t, Shape(B, K, H, dh)), perm);
  };
  Var q = heads(linear(tape, m, base + ".q", x), {0, 2, 1, 3});   // B,H,K,dh
  Var kt = heads(linear(tape, m, base + ".k", x), {0, 2, 3, 1});  // B,H,dh,K
  Var v = heads(linear(tape, m, base + ".v", x), {0, 2, 1, 3});
  Var scores =
      ops::scale(ops::matmul(q, kt), 1.0 / std::sqrt(static_cast<double>(dh)));
  Var ctx = ops::matmul(ops::softmax(scores), v);  // B,H,K,dh
  Var merged = ops::reshape(ops::permute(ctx, {0, 2, 1, 3}), Shape(B, 1, K, D));
  return linear(tape, m, base + ".out", merged);
}

Tensor take_sample(const Tensor& t, std::size_t i) {
  const Shape& s = t.shape();
  const std::size_t per = s.c() * s.h() * s.w();
  Tensor out(Shape(1, s.c(), s.h(), s.w()));
  std::copy_n(t.data() + i * per, per, out.data());
  return out;
}

double softplus_inverse(double y) { return y + std::log(-std::expm1(-y)); }

void require_finite(double v, const char* what) {
  if (!std::isfinite(v)) {
    throw DomainError(std::string("non-finite ") + what);
  }
}

}  // namespace

// ---------------------------------------------------------------------------
// Configuration

void validate(const EncoderConfig& c) {
  if (c.blocks == 0) throw ContractError("encoder.blocks must be >= 1");
  if (c.frozen > c.blocks) {
    throw ContractError("encoder.frozen (" + std::to_string(c.frozen) +
                        ") exceeds encoder.blocks (" +
                        std::to_string(c.blocks) + ")");
  }
  if (c.dim == 0 || c.heads == 0 || c.dim % c.heads != 0) {
    throw ContractError("encoder.dim must be a positive multiple of "
                        "encoder.heads");
  }
  if (c.patch == 0 || c.side == 0 || c.side % c.patch != 0) {
    throw ContractError("encoder.side must be a positive multiple of "
                        "encoder.patch");
  }
  // Two x2 decoder stages reach side/2, one more reaches the image.
  if (c.patch != 8) {
    throw ContractError("encoder.patch must be 8: the decoder upsamples the "
                        "token grid by 8");
  }
}

const char* strategy_name(Strategy s) {
  switch (s) {
    case Strategy::kFull: return "full";
    case Strategy::kLora: return "lora";
    case Strategy::kHybrid: return "hybrid";
  }
  return "?";
}

Strategy parse_strategy(const std::string& name) {
  if (name == "full") return Strategy::kFull;
  if (name == "lora") return Strategy::kLora;
  if (name == "hybrid") return Strategy::kHybrid;
  throw ContractError("unknown adapter strategy '" + name +
                      "' (expected full, lora or hybrid)");
}

void validate(const AdapterConfig& c) {
  if (c.strategy == Strategy::kLora && c.rank < 1) {
    throw ContractError("adapter.rank must be >= 1 for the lora strategy");
  }
  if (!std::isfinite(c.scale)) throw ContractError("adapter.scale must be finite");
}

std::size_t TrainConfig::total_steps(std::size_t n_train) const {
  if (steps > 0) return steps;
  const std::size_t b = std::max<std::size_t>(1, std::min(batch, n_train));
  return epochs * ((n_train + b - 1) / b);
}

void validate(const TrainConfig& c, std::size_t n_train) {
  if (c.batch < 2) {
    throw ContractError("train.batch must be >= 2 (batchnorm training mode)");
  }
  if (n_train < 2) {
    throw ContractError("training needs at least 2 training samples");
  }
  const std::size_t total = c.total_steps(n_train);
  if (total == 0) throw ContractError("train.steps/epochs give zero steps");
  if (c.warmup > total) {
    throw ContractError("train.warmup (" + std::to_string(c.warmup) +
                        ") exceeds the total step count (" +
                        std::to_string(total) + ")");
  }
  if (!(c.lr > 0.0) || !std::isfinite(c.lr)) {
    throw ContractError("train.lr must be positive");
  }
  if (!(c.weight_decay >= 0.0)) {
    throw ContractError("train.weight_decay must be non-negative");
  }
  for (double w : {c.loss.scale, c.loss.grad, c.loss.smooth}) {
    if (!std::isfinite(w) || w < 0.0) {
      throw ContractError("loss weights must be finite and non-negative");
    }
  }
}

nlohmann::json encoder_to_json(const EncoderConfig& c) {
  return {{"blocks", c.blocks}, {"frozen", c.frozen}, {"dim", c.dim},
          {"heads", c.heads},   {"patch", c.patch},   {"side", c.side}};
}

EncoderConfig encoder_from_json(const nlohmann::json& j,
                                const std::string& path) {
  EncoderConfig c;
  FieldReader r(j, path);
  r.read("blocks", c.blocks);
  r.read("frozen", c.frozen);
  r.read("dim", c.dim);
  r.read("heads", c.heads);
  r.read("patch", c.patch);
  r.read("side", c.side);
  r.finish();
  return c;
}

nlohmann::json adapter_to_json(const AdapterConfig& c) {
  return {{"strategy", strategy_name(c.strategy)},
          {"rank", c.rank},
          {"scale", c.scale}};
}

AdapterConfig adapter_from_json(const nlohmann::json& j,
                                const std::string& path) {
  AdapterConfig c;
  FieldReader r(j, path);
  std::string strategy = strategy_name(c.strategy);
  r.read("strategy", strategy);
  r.read("rank", c.rank);
  r.read("scale", c.scale);
  r.finish();
  try {
    c.strategy = parse_strategy(strategy);
  } catch (const ContractError& e) {
    r.fail("strategy", e.what());
  }
  return c;
}

nlohmann::json loss_to_json(const LossWeights& w) {
  return {{"scale", w.scale}, {"grad", w.grad}, {"smooth", w.smooth}};
}

LossWeights loss_from_json(const nlohmann::json& j, const std::string& path) {
  LossWeights w;
  FieldReader r(j, path);
  r.read("scale", w.scale);
  r.read("grad", w.grad);
  r.read("smooth", w.smooth);
  r.finish();
  return w;
}

nlohmann::json train_to_json(const TrainConfig& c) {
  return {{"epochs", c.epochs},
          {"steps", c.steps},
          {"batch", c.batch},
          {"lr", c.lr},
          {"warmup", c.warmup},
          {"weight_decay", c.weight_decay},
          {"seed", c.seed},
          {"gwt", c.gwt},
          {"mc", c.mc},
          {"smoothness", smoothness_mode_name(c.smoothness)},
          {"scale_form", scale_loss_form_name(c.scale_form)}};
}

TrainConfig train_from_json(const nlohmann::json& j, const std::string& path) {
  TrainConfig c;
  FieldReader r(j, path);
  r.read("epochs", c.epochs);
  r.read("steps", c.steps);
  r.read("batch", c.batch);
  r.read("lr", c.lr);
  r.read("warmup", c.warmup);
  r.read("weight_decay", c.weight_decay);
  r.read("seed", c.seed);
  r.read("gwt", c.gwt);
  r.read("mc", c.mc);
  std::string smoothness = smoothness_mode_name(c.smoothness);
  std::string form = scale_loss_form_name(c.scale_form);
  r.read("smoothness", smoothness);
  r.read("scale_form", form);
  r.finish();
  try {
    c.smoothness = parse_smoothness_mode(smoothness);
  } catch (const ContractError& e) {
    r.fail("smoothness", e.what());
  }
  try {
    c.scale_form = parse_scale_loss_form(form);
  } catch (const ContractError& e) {
    r.fail("scale_form", e.what());
  }
  return c;
}

// ---------------------------------------------------------------------------
// Model container

std::vector<Parameter*> Model::parameters() {
  std::vector<Parameter*> out;
  for (auto& [name, p] : weights) out.push_back(&p);
  if (gwt_enabled) {
    for (Parameter* p : gwt.parameters()) out.push_back(p);
  }
  std::sort(out.begin(), out.end(),
            [](const Parameter* a, const Parameter* b) { return a->name < b->name; });
  return out;
}

std::vector<const Parameter*> Model::parameters() const {
  std::vector<const Parameter*> out;
  for (Parameter* p : const_cast<Model*>(this)->parameters()) out.push_back(p);
  return out;
}

Parameter& Model::param(const std::string& name) {
  auto it = weights.find(name);
  if (it != weights.end()) return it->second;
  for (Parameter* p : gwt.parameters()) {
    if (p->name == name) return *p;
  }
  throw ContractError("model has no parameter '" + name + "'");
}

const Parameter& Model::param(const std::string& name) const {
  return const_cast<Model*>(this)->param(name);
}

bool Model::has_param(const std::string& name) const {
  for (const Parameter* p : parameters()) {
    if (p->name == name) return true;
  }
  return false;
}

std::vector<std::pair<std::string, ops::BatchNormState*>> Model::bn_states() {
  if (!gwt_enabled) return {};
  return gwt.bn_states();
}

std::size_t Model::trainable_count() const {
  std::size_t n = 0;
  for (const Parameter* p : parameters()) {
    if (p->trainable) n += p->value.numel();
  }
  return n;
}

std::vector<std::string> lora_targets(const EncoderConfig& c) {
  std::vector<std::string> out;
  for (std::size_t b = 1; b <= c.blocks; ++b) {
    const std::string pre = block_prefix(b);
    for (const char* t : {"attn.q", "attn.k", "attn.v", "attn.out", "mlp.fc1",
                          "mlp.fc2"}) {
      out.push_back(pre + t);
    }
  }
  return out;
}

Model init_model(const EncoderConfig& encoder, const AdapterConfig& adapter,
                 bool gwt_enabled, std::uint64_t seed) {
  validate(encoder);
  validate(adapter);
  Model m;
  m.encoder = encoder;
  m.adapter = adapter;
  m.gwt_enabled = gwt_enabled;
  m.seed = seed;
  Rng rng(mix_seed(seed));
  const std::size_t D = encoder.dim, K = encoder.tokens();
  const std::size_t patch_features = 3 * encoder.patch * encoder.patch;

  add_linear(m, rng, "encoder.patch_embed", patch_features, D);
  Tensor pos(Shape(1, 1, K, D));
  for (double& v : pos.values()) v = 0.02 * rng.normal();
  add_weight(m, "encoder.pos", std::move(pos));
  for (std::size_t b = 1; b <= encoder.blocks; ++b) {
    const std::string pre = block_prefix(b);
    for (const char* ln : {"ln1", "ln2"}) {
      add_weight(m, pre + ln + ".gamma", Tensor(Shape(1, 1, 1, D), 1.0));
      add_weight(m, pre + ln + ".beta", Tensor(Shape(1, 1, 1, D)));
    }
    for (const char* t : {"attn.q", "attn.k", "attn.v", "attn.out"}) {
      add_linear(m, rng, pre + t, D, D);
    }
    add_linear(m, rng, pre + "mlp.fc1", D, 4 * D);
    add_linear(m, rng, pre + "mlp.fc2", 4 * D, D);
  }
  const std::size_t C = kDecoderChannels;
  add_conv(m, rng, "decoder.conv1", D, C);
  add_conv(m, rng, "decoder.conv2", C, C);
  add_conv(m, rng, "decoder.head", C, 1);
  m.gwt = gwt_init(C, mix_seed(seed ^ 0x9a7e5ULL), "decoder.gwt");

  apply_strategy(m, adapter, encoder.frozen);
  return m;
}

void apply_strategy(Model& model, const AdapterConfig& adapter, std::size_t m) {
  validate(adapter);
  if (m > model.encoder.blocks) {
    throw ContractError("apply_strategy: m = " + std::to_string(m) +
                        " exceeds the block count " +
                        std::to_string(model.encoder.blocks));
  }
  model.adapter = adapter;
  // Start from a clean slate: drop factors from an earlier assignment.
  for (auto it = model.weights.begin(); it != model.weights.end();) {
    if (ends_with(it->first, ".lora_a") || ends_with(it->first, ".lora_b")) {
      it = model.weights.erase(it);
    } else {
      ++it;
    }
  }
  for (auto& [name, p] : model.weights) {
    bool trainable = true;
    if (starts_with(name, "encoder.")) {
      switch (adapter.strategy) {
        case Strategy::kFull:
          break;
        case Strategy::kLora:
          trainable = false;
          break;
        case Strategy::kHybrid: {
          const bool embedding = starts_with(name, "encoder.patch_embed.") ||
                                 name == "encoder.pos";
          if (embedding) trainable = m == 0;
          for (std::size_t b = 1; b <= m; ++b) {
            if (starts_with(name, block_prefix(b))) trainable = false;
          }
          break;
        }
      }
    }
    p.trainable = trainable;
  }
  for (Parameter* p : model.gwt.parameters()) p->trainable = true;

  if (adapter.strategy == Strategy::kLora) {
    Rng rng(mix_seed(model.seed ^ 0x10ba11ULL));
    for (const std::string& base : lora_targets(model.encoder)) {
      const Shape& w = model.weights.at(base + ".weight").value.shape();
      const std::size_t in = w.h(), out = w.w();
      const double bound = 1.0 / std::sqrt(static_cast<double>(in));
      add_weight(model, base + ".lora_a",
                 rng.uniform_tensor(Shape(1, 1, in, adapter.rank), -bound,
                                    bound));
      add_weight(model, base + ".lora_b", Tensor(Shape(1, 1, adapter.rank, out)));
    }
  }
}

// ---------------------------------------------------------------------------
// Forward passes

Var encoder_forward(Tape& tape, Model& model, Var image) {
  const EncoderConfig& c = model.encoder;
  const Shape& s = image.shape();
  if (s.c() != 3 || s.h() != c.side || s.w() != c.side) {
    throw ContractError("encoder_forward: expected (B, 3, " +
                        std::to_string(c.side) + ", " +
                        std::to_string(c.side) + ") image, got " + s.str());
  }
  Var x = linear(tape, model, "encoder.patch_embed",
                 ops::patchify(image, c.patch));
  x = ops::add(x, bind_param(tape, model, "encoder.pos"));
  for (std::size_t b = 1; b <= c.blocks; ++b) {
    const std::string pre = block_prefix(b);
    Var h = layer_norm(tape, model, pre + "ln1", x);
    x = ops::add(x, attention(tape, model, pre + "attn", h));
    h = layer_norm(tape, model, pre + "ln2", x);
    h = ops::relu(linear(tape, model, pre + "mlp.fc1", h));
    x = ops::add(x, linear(tape, model, pre + "mlp.fc2", h));
  }
  return x;
}

Var decoder_forward(Tape& tape, Model& model, Var tokens, bool gwt_enabled,
                    Mode mode) {
  const EncoderConfig& c = model.encoder;
  const Shape& s = tokens.shape();
  if (s.c() != 1 || s.h() != c.tokens() || s.w() != c.dim) {
    throw ContractError("decoder_forward: expected (B, 1, " +
                        std::to_string(c.tokens()) + ", " +
                        std::to_string(c.dim) + ") tokens, got " + s.str());
  }
  const std::size_t B = s.n(), g = c.grid();
  Var x = ops::reshape(ops::permute(tokens, {0, 1, 3, 2}),
                       Shape(B, c.dim, g, g));
  auto conv = [&](const std::string& base, Var in) {
    return ops::conv3x3(in, bind_param(tape, model, base + ".weight"),
                        bind_param(tape, model, base + ".bias"));
  };
  x = ops::relu(conv("decoder.conv1", ops::upsample2x(x)));
  x = ops::relu(conv("decoder.conv2", ops::upsample2x(x)));
  if (gwt_enabled) x = gwt_forward(tape, x, model.gwt, mode);
  x = ops::softplus(conv("decoder.head", x));
  x = ops::add(x, tape.constant(Tensor::scalar(kDepthEpsilon)));
  return ops::upsample2x(x);
}

Var model_forward(Tape& tape, Model& model, Var image, Mode mode) {
  return decoder_forward(tape, model, encoder_forward(tape, model, image),
                         model.gwt_enabled, mode);
}

Tensor predict(Model& model, const Tensor& images) {
  Tape tape(false);
  return model_forward(tape, model, tape.constant(images), Mode::kEval).value();
}

Batch make_batch(const std::vector<Sample>& samples,
                 std::span<const std::size_t> indices) {
  if (indices.empty()) throw ContractError("make_batch: empty batch");
  const Shape& rs = samples.at(indices[0]).rgb.shape();
  const Shape& ds = samples.at(indices[0]).depth.shape();
  const std::size_t B = indices.size();
  Batch b{Tensor(Shape(B, rs.c(), rs.h(), rs.w())),
          Tensor(Shape(B, ds.c(), ds.h(), ds.w()))};
  for (std::size_t i = 0; i < B; ++i) {
    const Sample& smp = samples.at(indices[i]);
    if (!(smp.rgb.shape() == rs) || !(smp.depth.shape() == ds)) {
      throw ShapeError("make_batch: sample " + smp.id + " has mismatched "
                       "extents");
    }
    std::copy_n(smp.rgb.data(), rs.numel(), b.rgb.data() + i * rs.numel());
    std::copy_n(smp.depth.data(), ds.numel(), b.depth.data() + i * ds.numel());
  }
  return b;
}

// ---------------------------------------------------------------------------
// Optimizer

double scheduled_lr(const AdamConfig& c, std::size_t step) {
  if (c.warmup == 0) return c.lr;
  return c.lr * std::min(1.0, static_cast<double>(step) /
                                  static_cast<double>(c.warmup));
}

bool decays(const std::string& name) {
  return ends_with(name, "weight") || ends_with(name, ".lora_a") ||
         ends_with(name, ".lora_b");
}

void adamw_step(std::span<Parameter* const> params, const GradientMap& grads,
                AdamState& state, const AdamConfig& config) {
  for (const Parameter* p : params) {
    if (!p->trainable) continue;
    auto it = grads.find(p->name);
    if (it == grads.end()) continue;
    if (!(it->second.shape() == p->value.shape())) {
      throw ShapeError("adamw_step: gradient of " + p->name + " has shape " +
                       it->second.shape().str() + ", parameter has " +
                       p->value.shape().str());
    }
    if (!it->second.all_finite()) {
      throw DomainError("adamw_step: non-finite gradient for " + p->name +
                        "; step aborted");
    }
  }
  const std::size_t t = state.step + 1;
  const double lr = scheduled_lr(config, t);
  const double c1 = 1.0 - std::pow(config.beta1, static_cast<double>(t));
  const double c2 = 1.0 - std::pow(config.beta2, static_cast<double>(t));
  for (Parameter* p : params) {
    if (!p->trainable) continue;
    auto it = grads.find(p->name);
    if (it == grads.end()) continue;
    const Tensor& g = it->second;
    Tensor& m = state.m.try_emplace(p->name, p->value.shape()).first->second;
    Tensor& v = state.v.try_emplace(p->name, p->value.shape()).first->second;
    const bool decay = config.weight_decay > 0.0 && decays(p->name);
    double* w = p->value.data();
    for (std::size_t i = 0; i < g.numel(); ++i) {
      m[i] = config.beta1 * m[i] + (1.0 - config.beta1) * g[i];
      v[i] = config.beta2 * v[i] + (1.0 - config.beta2) * g[i] * g[i];
      if (decay) w[i] -= lr * config.weight_decay * w[i];
      w[i] -= lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + config.eps);
    }
  }
  state.step = t;
}

// ---------------------------------------------------------------------------
// Training

LossBreakdown batch_loss(Tape& tape, Model& model, const Batch& batch,
                         const TrainConfig& cfg, double d_min, double d_max,
                         Mode mode) {
  Var pred = model_forward(tape, model, tape.constant(batch.rgb), mode);
  const ValidMask mask = valid_mask(batch.depth, d_min, d_max);
  return total_loss(pred, batch.depth, batch.rgb, mask, cfg.loss,
                    cfg.smoothness, cfg.mc, cfg.scale_form);
}

TrainResult train(const Dataset& data, const EncoderConfig& encoder,
                  const AdapterConfig& adapter, const TrainConfig& cfg,
                  const std::function<void(const HistoryRow&)>& on_step) {
  const std::size_t n = data.train.size();
  validate(cfg, n);
  if (data.scene.side != encoder.side) {
    throw ContractError("dataset side " + std::to_string(data.scene.side) +
                        " does not match encoder.side " +
                        std::to_string(encoder.side));
  }
  const double d_min = data.scene.d_min, d_max = data.scene.d_max;
  TrainResult result;
  result.model = init_model(encoder, adapter, cfg.gwt, cfg.seed);
  Model& model = result.model;

  // Start the depth head at the geometric mean of the training depths so
  // the first predictions are on the right scale.
  double log_sum = 0.0;
  std::size_t count = 0;
  for (const Sample& s : data.train) {
    for (double d : s.depth.values()) {
      if (d > 0.0 && d >= d_min && d <= d_max) {
        log_sum += std::log(d);
        ++count;
      }
    }
  }
  if (count == 0) throw UnusableFrameError("training split has no valid depth");
  const double start = std::exp(log_sum / static_cast<double>(count));
  model.param("decoder.head.bias").value.fill(
      softplus_inverse(std::max(start - kDepthEpsilon, 1e-6)));

  const std::size_t B = std::min(cfg.batch, n);
  const std::size_t total = cfg.total_steps(n);
  const AdamConfig adam{cfg.lr, cfg.warmup, cfg.weight_decay};
  Rng rng(mix_seed(cfg.seed ^ 0x5f0ff1eULL));
  std::vector<std::size_t> order(n);
  std::size_t cursor = n;  // forces a shuffle before the first batch

  for (std::size_t step = 1; step <= total; ++step) {
    if (cursor + B > n) {
      std::iota(order.begin(), order.end(), std::size_t{0});
      for (std::size_t i = n - 1; i > 0; --i) {
        std::swap(order[i], order[rng.index(i + 1)]);
      }
      cursor = 0;
    }
    const Batch batch = make_batch(
        data.train, std::span<const std::size_t>(order.data() + cursor, B));
    cursor += B;

    Model snapshot = model;
    AdamState opt_snapshot = result.optimizer;
    HistoryRow row;
    row.step = step;
    row.lr = scheduled_lr(adam, step);
    try {
      Tape tape;
      LossBreakdown lb =
          batch_loss(tape, model, batch, cfg, d_min, d_max, Mode::kTrain);
      require_finite(lb.total_value, "training loss");
      tape.backward(lb.total);
      adamw_step(model.parameters(), tape.parameter_gradients(),
                 result.optimizer, adam);
      row.losses = {lb.scale, lb.grad, lb.smooth, lb.total_value};
    } catch (const DomainError& e) {
      model = std::move(snapshot);
      result.optimizer = std::move(opt_snapshot);
      result.aborted = true;
      result.message = "step " + std::to_string(step) + ": " + e.what();
      break;
    }
    if (cfg.gwt) {
      for (Band b : kAllBands) {
        row.gates[static_cast<int>(b)] = model.gwt.gate_value(b);
      }
    }
    result.history.push_back(row);
    if (on_step) on_step(row);
  }
  if (!result.aborted) recalibrate_batch_norm(model, data.train);
  return result;
}

void recalibrate_batch_norm(Model& model, const std::vector<Sample>& samples) {
  const auto states = model.bn_states();
  if (states.empty() || samples.size() < 2) return;
  constexpr std::size_t kChunk = 8;
  std::vector<std::pair<std::size_t, std::size_t>> chunks;
  for (std::size_t start = 0; start < samples.size(); start += kChunk) {
    chunks.emplace_back(start, std::min(samples.size(), start + kChunk));
  }
  // Batch norm needs two samples per chunk; a single leftover joins the
  // previous chunk.
  if (chunks.size() > 1 && chunks.back().second - chunks.back().first < 2) {
    chunks[chunks.size() - 2].second = chunks.back().second;
    chunks.pop_back();
  }
  std::vector<double> momentum;
  for (const auto& [name, st] : states) momentum.push_back(st->momentum);
  std::size_t seen = 0;
  for (const auto& [start, end] : chunks) {
    seen += end - start;
    // Sample-weighted cumulative average of the chunk statistics.
    for (const auto& [name, st] : states) {
      st->momentum = static_cast<double>(end - start) / static_cast<double>(seen);
    }
    std::vector<std::size_t> idx(end - start);
    std::iota(idx.begin(), idx.end(), start);
    const Batch batch = make_batch(samples, idx);
    Tape tape(false);
    model_forward(tape, model, tape.constant(batch.rgb), Mode::kTrain);
  }
  for (std::size_t i = 0; i < states.size(); ++i) {
    states[i].second->momentum = momentum[i];
  }
}

std::vector<std::string> history_header() {
  return {"step",    "lr",      "l_scale", "l_grad",  "l_smooth",
          "total",   "gate_ll", "gate_lh", "gate_hl", "gate_hh"};
}

std::vector<std::string> history_row(const HistoryRow& r) {
  std::vector<std::string> out = {
      std::to_string(r.step),       format_double(r.lr),
      format_double(r.losses.scale), format_double(r.losses.grad),
      format_double(r.losses.smooth), format_double(r.losses.total)};
  for (double g : r.gates) out.push_back(format_double(g));
  return out;
}

// ---------------------------------------------------------------------------
// Evaluation

EvalResult evaluate(Model& model, const Dataset& data, const std::string& split,
                    bool gt_as_pred) {
  const std::vector<Sample>& samples = data.split(split);
  if (samples.empty()) {
    throw UnusableFrameError("split '" + split + "' has no samples");
  }
  if (data.scene.side != model.encoder.side) {
    throw ContractError("checkpoint side " +
                        std::to_string(model.encoder.side) +
                        " does not match the dataset side " +
                        std::to_string(data.scene.side));
  }
  EvalResult out;
  constexpr std::size_t kChunk = 8;
  for (std::size_t start = 0; start < samples.size(); start += kChunk) {
    const std::size_t end = std::min(samples.size(), start + kChunk);
    std::vector<std::size_t> idx(end - start);
    std::iota(idx.begin(), idx.end(), start);
    const Batch batch = make_batch(samples, idx);
    const Tensor pred = gt_as_pred ? batch.depth : predict(model, batch.rgb);
    for (std::size_t i = 0; i < idx.size(); ++i) {
      const Tensor gt = take_sample(batch.depth, i);
      const ValidMask mask = valid_mask(gt, data.scene.d_min, data.scene.d_max);
      out.ids.push_back(samples[idx[i]].id);
      out.frames.push_back(compute_metrics(take_sample(pred, i), gt, mask));
    }
  }
  out.aggregate = aggregate(out.frames);
  return out;
}

// ---------------------------------------------------------------------------
// Checkpoints

namespace {

constexpr char kMagic[4] = {'S', 'P', 'D', 'K'};
constexpr std::uint32_t kVersion = 1;

template <typename T>
void put(std::string& out, T v) {
  char buf[sizeof(T)];
  std::memcpy(buf, &v, sizeof(T));
  out.append(buf, sizeof(T));
}

class Reader {
 public:
  explicit Reader(std::string_view bytes) : bytes_(bytes) {}

  template <typename T>
  T get(const char* what) {
    need(sizeof(T), what);
    T v;
    std::memcpy(&v, bytes_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return v;
  }

  std::string_view take(std::size_t n, const char* what) {
    need(n, what);
    std::string_view s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }

  std::size_t offset() const { return pos_; }
  bool done() const { return pos_ == bytes_.size(); }

 private:
  void need(std::size_t n, const char* what) {
    if (bytes_.size() - pos_ < n) {
      throw ParseError(std::string("checkpoint truncated while reading ") + what,
                       pos_);
    }
  }

  std::string_view bytes_;
  std::size_t pos_ = 0;
};

void put_record(std::string& out, const std::string& name, const Tensor& t) {
  put<std::uint32_t>(out, static_cast<std::uint32_t>(name.size()));
  out += name;
  for (std::size_t d : t.shape().dims) put<std::uint64_t>(out, d);
  for (double v : t.values()) put<double>(out, v);
}

}  // namespace

std::string encode_checkpoint(const Checkpoint& ckpt) {
  Model& model = const_cast<Model&>(ckpt.model);
  nlohmann::json header = {
      {"config", ckpt.config},
      {"model",
       {{"encoder", encoder_to_json(model.encoder)},
        {"adapter", adapter_to_json(model.adapter)},
        {"gwt", model.gwt_enabled},
        {"seed", model.seed}}},
      {"optimizer", {{"step", ckpt.optimizer.step}}}};
  const std::string json = header.dump();

  std::vector<std::pair<std::string, const Tensor*>> records;
  for (const Parameter* p : model.parameters()) {
    records.emplace_back(p->name, &p->value);
  }
  for (auto& [base, st] : model.bn_states()) {
    records.emplace_back(base + ".running_mean", &st->running_mean);
    records.emplace_back(base + ".running_var", &st->running_var);
  }
  for (const auto& [name, t] : ckpt.optimizer.m) {
    records.emplace_back("adam.m." + name, &t);
  }
  for (const auto& [name, t] : ckpt.optimizer.v) {
    records.emplace_back("adam.v." + name, &t);
  }

  std::string out(kMagic, 4);
  put<std::uint32_t>(out, kVersion);
  put<std::uint64_t>(out, json.size());
  out += json;
  put<std::uint64_t>(out, records.size());
  for (const auto& [name, t] : records) put_record(out, name, *t);
  return out;
}

Checkpoint decode_checkpoint(std::string_view bytes) {
  Reader r(bytes);
  if (r.take(4, "magic") != std::string_view(kMagic, 4)) {
    throw ParseError("not a checkpoint (bad magic)", 0);
  }
  const std::size_t version_at = r.offset();
  const auto version = r.get<std::uint32_t>("version");
  if (version != kVersion) {
    throw ParseError("unsupported checkpoint version " + std::to_string(version),
                     version_at);
  }
  const auto json_len = r.get<std::uint64_t>("config length");
  const std::size_t json_at = r.offset();
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(r.take(json_len, "config block"));
  } catch (const nlohmann::json::parse_error& e) {
    throw ParseError(std::string("malformed checkpoint config: ") + e.what(),
                     json_at + e.byte);
  }

  Checkpoint c;
  try {
    const nlohmann::json& m = header.at("model");
    c.config = header.at("config");
    c.model = init_model(encoder_from_json(m.at("encoder")),
                         adapter_from_json(m.at("adapter")),
                         m.at("gwt").get<bool>(),
                         m.at("seed").get<std::uint64_t>());
    c.optimizer.step = header.at("optimizer").at("step").get<std::size_t>();
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("checkpoint config: ") + e.what(), json_at);
  }

  std::map<std::string, Tensor*> targets;
  for (Parameter* p : c.model.parameters()) targets[p->name] = &p->value;
  for (auto& [base, st] : c.model.bn_states()) {
    targets[base + ".running_mean"] = &st->running_mean;
    targets[base + ".running_var"] = &st->running_var;
  }
  const std::size_t expected = targets.size();
  std::size_t filled = 0;

  const auto count = r.get<std::uint64_t>("record count");
  for (std::uint64_t i = 0; i < count; ++i) {
    const std::size_t at = r.offset();
    const auto name_len = r.get<std::uint32_t>("record name length");
    const std::string name(r.take(name_len, "record name"));
    std::array<std::size_t, 4> dims{};
    for (std::size_t& d : dims) d = r.get<std::uint64_t>("record shape");
    const Shape shape(dims[0], dims[1], dims[2], dims[3]);
    std::string_view raw = r.take(shape.numel() * sizeof(double), "record data");
    Tensor t(shape);
    std::memcpy(t.data(), raw.data(), raw.size());

    if (starts_with(name, "adam.m.") || starts_with(name, "adam.v.")) {
      auto& dst = name[5] == 'm' ? c.optimizer.m : c.optimizer.v;
      dst[name.substr(7)] = std::move(t);
      continue;
    }
    auto it = targets.find(name);
    if (it == targets.end()) {
      throw ParseError("checkpoint record '" + name +
                           "' does not belong to the configured model",
                       at);
    }
    if (!(it->second->shape() == shape)) {
      throw ParseError("checkpoint record '" + name + "' has shape " +
                           shape.str() + ", model expects " +
                           it->second->shape().str(),
                       at);
    }
    *it->second = std::move(t);
    targets.erase(it);
    ++filled;
  }
  if (filled != expected) {
    throw ParseError("checkpoint is missing " +
                         std::to_string(expected - filled) +
                         " model records (first: '" + targets.begin()->first +
                         "')",
                     r.offset());
  }
  if (!r.done()) {
    throw ParseError("trailing bytes after the last checkpoint record",
                     r.offset());
  }
  return c;
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& c) {
  io::write_file_atomic(path, encode_checkpoint(c));
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  try {
    return decode_checkpoint(io::read_file(path));
  } catch (const ParseError& e) {
    throw ParseError(path.string() + ": " + e.what(), e.offset());
  }
}

// ---------------------------------------------------------------------------
// Gradient check against the full loss

CheckReport parameter_grad_check(Model& model, const Batch& batch,
                                 const TrainConfig& cfg, double d_min,
                                 double d_max, const std::string& name,
                                 double tol, std::size_t max_entries) {
  Parameter& p = model.param(name);
  if (!p.trainable) {
    throw ContractError("parameter_grad_check: '" + name + "' is frozen");
  }
  CheckReport report;
  Tensor analytic(p.value.shape());
  {
    Tape tape;
    LossBreakdown lb =
        batch_loss(tape, model, batch, cfg, d_min, d_max, Mode::kTrain);
    if (!std::isfinite(lb.total_value)) {
      report.failure = "non-finite loss at the base point";
      return report;
    }
    tape.backward(lb.total);
    const GradientMap grads = tape.parameter_gradients();
    auto it = grads.find(name);
    if (it != grads.end()) analytic = it->second;
  }
  auto loss_at = [&]() {
    Tape tape(false);
    return batch_loss(tape, model, batch, cfg, d_min, d_max, Mode::kTrain)
        .total_value;
  };
  const GradCheckOptions opt;
  const std::size_t n = p.value.numel();
  const std::size_t k = std::min(n, max_entries);
  bool seen = false;
  for (std::size_t j = 0; j < k; ++j) {
    const std::size_t i = j * n / k;
    const double orig = p.value[i];
    p.value[i] = orig + opt.step;
    const double up = loss_at();
    p.value[i] = orig - opt.step;
    const double down = loss_at();
    p.value[i] = orig;
    if (!std::isfinite(up) || !std::isfinite(down)) {
      report.failure = "non-finite loss perturbing " + name + "[" +
                       std::to_string(i) + "]";
      return report;
    }
    const double numeric = (up - down) / (2.0 * opt.step);
    const double a = analytic[i];
    const double rel = std::abs(a - numeric) /
                       std::max({std::abs(a), std::abs(numeric), opt.floor});
    if (!seen || rel > report.max_rel_error) {
      seen = true;
      report.max_rel_error = rel;
      report.worst_index = i;
      report.analytic = a;
      report.numeric = numeric;
    }
  }
  report.passed = report.max_rel_error <= tol;
  return report;
}

}  // namespace wavedepth
