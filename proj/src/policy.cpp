#include "blockprop/policy.hpp"

#include <algorithm>
#include <cmath>

#include "blockprop/rng.hpp"

namespace blockprop {

Tensor assemble_state(const Tensor& frame, const Tensor& prev_state, const Tensor& prev_output,
                      const ActionGrid& prev_actions, const BlockGrid& grid) {
  for (const Tensor* t : {&frame, &prev_state, &prev_output}) {
    require_rank4(*t, "assemble_state");
    if (t->n() != 1 || t->h() != grid.height || t->w() != grid.width) {
      throw Error("assemble_state: input " + shape_str(t->shape()) + " does not match frame extents " +
                  std::to_string(grid.height) + "x" + std::to_string(grid.width));
    }
  }
  if (frame.c() != 3 || prev_state.c() != 3) throw Error("assemble_state: frame and frame state must be RGB");
  const Tensor mask = action_mask(prev_actions, grid);
  return concat_channels({&frame, &prev_state, &prev_output, &mask});
}

namespace {

constexpr std::size_t kStem = 0, kHead = 7;
constexpr std::size_t kBlockStride[3] = {2, 2, 1};

// Activation indices in Cache::acts.
constexpr std::size_t kState = 0, kStemPre = 1, kStemOut = 2, kPool = 3;
constexpr std::size_t block_base(std::size_t k) { return 4 + 5 * k; }  // c1, r1, c2, sum, out
constexpr std::size_t kHeadOut = block_base(3);

void init_conv(ConvSpec& s, Rng& rng, double std) {
  for (auto& v : s.weights.storage()) v = static_cast<float>(rng.normal() * std);
  s.bias.fill(0.0f);
}

}  // namespace

PolicyNet::PolicyNet(std::size_t in_channels, std::size_t width, std::uint64_t seed)
    : in_channels_(in_channels), width_(width) {
  if (in_channels == 0 || width == 0) throw Error("policy net: channel counts must be positive");
  Rng rng(seed);
  auto trunk = [&](std::size_t cin, std::size_t cout, std::size_t stride) {
    ConvSpec s = ConvSpec::make(cin, cout, 3, stride, 1);
    init_conv(s, rng, std::sqrt(2.0 / static_cast<double>(cin * 9)));
    return s;
  };
  convs_.push_back(trunk(in_channels, width, 2));
  for (std::size_t k = 0; k < 3; ++k) {
    convs_.push_back(trunk(width, width, kBlockStride[k]));
    convs_.push_back(trunk(width, width, 1));
  }
  ConvSpec head = ConvSpec::make(width, 1, 1, 1, 0);
  init_conv(head, rng, 0.1 / std::sqrt(static_cast<double>(width)));
  convs_.push_back(std::move(head));
}

PolicyNet::Cache PolicyNet::forward(const Tensor& state, const BlockGrid& grid) const {
  require_rank4(state, "policy_forward");
  if (state.c() != in_channels_) {
    throw Error("policy_forward: state has " + std::to_string(state.c()) + " channels, network expects " +
                std::to_string(in_channels_));
  }
  if (state.h() % 16 || state.w() % 16) throw Error("policy_forward: state extents must be divisible by 16");
  Cache c;
  c.acts.resize(kHeadOut + 1);
  // Inputs live in [0,1]; centring them makes the stem's zero padding look
  // like mid-grey content instead of a border marker.
  c.acts[kState] = state;
  for (float& v : c.acts[kState].storage()) v -= 0.5f;
  c.acts[kStemPre] = conv2d(c.acts[kState], convs_[kStem]);
  c.acts[kStemOut] = relu(c.acts[kStemPre]);
  c.acts[kPool] = maxpool2(c.acts[kStemOut]);
  std::size_t x = kPool;
  for (std::size_t k = 0; k < 3; ++k) {
    const std::size_t b = block_base(k);
    c.acts[b] = conv2d(c.acts[x], convs_[1 + 2 * k]);
    c.acts[b + 1] = relu(c.acts[b]);
    c.acts[b + 2] = conv2d(c.acts[b + 1], convs_[2 + 2 * k]);
    const Tensor skip = kBlockStride[k] == 2 ? avgpool2(c.acts[x]) : c.acts[x];
    c.acts[b + 3] = add(c.acts[b + 2], skip);
    c.acts[b + 4] = relu(c.acts[b + 3]);
    x = b + 4;
  }
  c.acts[kHeadOut] = conv2d(c.acts[x], convs_[kHead]);
  const Tensor& h = c.acts[kHeadOut];
  if (h.h() < grid.rows || h.w() < grid.cols) {
    throw Error("policy_forward: feature map " + shape_str(h.shape()) + " coarser than block grid " +
                std::to_string(grid.rows) + "x" + std::to_string(grid.cols) + " (block size must be >= 16)");
  }
  c.logits = adaptive_avgpool(h, grid.rows, grid.cols);
  require_finite(c.logits, "policy_forward: logits");
  c.probs = sigmoid(c.logits);
  for (auto& p : c.probs.storage()) p = std::clamp(p, kProbClamp, 1.0f - kProbClamp);
  return c;
}

std::vector<Tensor> PolicyNet::backward(const Cache& c, const Tensor& grad_logits) const {
  if (grad_logits.shape() != c.logits.shape()) throw Error("policy backward: gradient shape mismatch");
  std::vector<Tensor> grads(2 * convs_.size());
  auto store = [&](std::size_t conv, ConvGrads& g) {
    grads[2 * conv] = std::move(g.weights);
    grads[2 * conv + 1] = std::move(g.bias);
    return std::move(g.input);
  };

  const std::size_t last = block_base(2) + 4;
  Tensor g_head = adaptive_avgpool_backward(c.acts[kHeadOut], grad_logits);
  ConvGrads hg = conv2d_grad(c.acts[last], convs_[kHead], g_head);
  Tensor g = store(kHead, hg);

  for (std::size_t kk = 3; kk-- > 0;) {
    const std::size_t b = block_base(kk);
    const std::size_t x = kk == 0 ? kPool : block_base(kk - 1) + 4;
    Tensor g_sum = relu_backward(c.acts[b + 3], g);
    ConvGrads g2 = conv2d_grad(c.acts[b + 1], convs_[2 + 2 * kk], g_sum);
    Tensor g_r1 = store(2 + 2 * kk, g2);
    Tensor g_c1 = relu_backward(c.acts[b], g_r1);
    ConvGrads g1 = conv2d_grad(c.acts[x], convs_[1 + 2 * kk], g_c1);
    Tensor g_x = store(1 + 2 * kk, g1);
    const Tensor g_skip = kBlockStride[kk] == 2 ? avgpool2_backward(c.acts[x], g_sum) : g_sum;
    g = add(g_x, g_skip);
  }
  Tensor g_stem = maxpool2_backward(c.acts[kStemOut], g);
  g_stem = relu_backward(c.acts[kStemPre], g_stem);
  ConvGrads sg = conv2d_grad(c.acts[kState], convs_[kStem], g_stem, false);
  store(kStem, sg);
  return grads;
}

std::vector<Tensor*> PolicyNet::params() {
  std::vector<Tensor*> p;
  for (auto& s : convs_) {
    p.push_back(&s.weights);
    p.push_back(&s.bias);
  }
  return p;
}

std::vector<const Tensor*> PolicyNet::params() const {
  std::vector<const Tensor*> p;
  for (const auto& s : convs_) {
    p.push_back(&s.weights);
    p.push_back(&s.bias);
  }
  return p;
}

std::vector<std::string> PolicyNet::param_names() const {
  static const char* conv_names[] = {"stem", "block1.conv1", "block1.conv2", "block2.conv1",
                                     "block2.conv2", "block3.conv1", "block3.conv2", "head"};
  std::vector<std::string> names;
  for (std::size_t i = 0; i < convs_.size(); ++i) {
    names.push_back(std::string(conv_names[i]) + ".weight");
    names.push_back(std::string(conv_names[i]) + ".bias");
  }
  return names;
}

std::uint64_t PolicyNet::forward_macs(std::size_t height, std::size_t width) const {
  std::uint64_t macs = 0;
  std::size_t h = height, w = width;
  auto conv = [&](const ConvSpec& s) {
    h = s.out_h(h);
    w = s.out_w(w);
    macs += static_cast<std::uint64_t>(s.macs_per_pixel()) * h * w;
  };
  conv(convs_[kStem]);
  h /= 2;
  w /= 2;
  for (std::size_t i = 1; i < convs_.size(); ++i) conv(convs_[i]);
  return macs;
}

NamedTensors PolicyNet::to_tensors() const {
  NamedTensors out;
  const auto names = param_names();
  const auto ps = params();
  for (std::size_t i = 0; i < ps.size(); ++i) out.emplace_back(names[i], *ps[i]);
  return out;
}

void PolicyNet::from_tensors(const NamedTensors& tensors) {
  const auto names = param_names();
  auto ps = params();
  if (tensors.size() != ps.size()) throw Error("policy net: parameter count mismatch in manifest");
  for (std::size_t i = 0; i < ps.size(); ++i) {
    if (tensors[i].first != names[i] || tensors[i].second.shape() != ps[i]->shape()) {
      throw Error("policy net: manifest entry '" + tensors[i].first + "' " + shape_str(tensors[i].second.shape()) +
                  " does not match expected '" + names[i] + "' " + shape_str(ps[i]->shape()));
    }
    *ps[i] = tensors[i].second;
  }
}

ActionGrid sample_actions(const Tensor& probs, std::uint64_t seed, long frame) {
  require_rank4(probs, "sample_actions");
  ActionGrid a{probs.h(), probs.w(), std::vector<std::uint8_t>(probs.numel()), frame};
  for (std::size_t b = 0; b < probs.numel(); ++b) {
    const double u = counter_uniform(seed, static_cast<std::uint64_t>(frame), b);
    a.values[b] = u < static_cast<double>(probs[b]) ? 1 : 0;
  }
  return a;
}

double compute_cost(const ActionGrid& actions) { return actions.fraction(); }

double update_moving_average(double cost, double prev, double momentum) {
  return (1.0 - momentum) * cost + momentum * prev;
}

RewardGrid compute_rewards(const Tensor& block_ig, const ActionGrid& actions, double moving_avg, double target,
                           double gamma) {
  require_rank4(block_ig, "compute_rewards");
  if (block_ig.h() != actions.rows || block_ig.w() != actions.cols || block_ig.numel() != actions.count()) {
    throw Error("compute_rewards: IG grid " + shape_str(block_ig.shape()) + " does not match action grid");
  }
  RewardGrid r{Tensor(block_ig.shape()), Tensor(block_ig.shape()), Tensor(block_ig.shape())};
  const double cost_term = target - moving_avg;
  for (std::size_t b = 0; b < actions.count(); ++b) {
    if (block_ig[b] < 0.0f) throw Error("compute_rewards: negative information gain");
    const double sign = actions.values[b] ? 1.0 : -1.0;
    const double ig = sign * block_ig[b];
    const double cost = gamma * sign * cost_term;
    r.ig_part[b] = static_cast<float>(ig);
    r.cost_part[b] = static_cast<float>(cost);
    r.total[b] = static_cast<float>(ig + cost);
  }
  return r;
}

ReinforceLoss reinforce_loss(const Tensor& probs, const ActionGrid& actions, const Tensor& rewards) {
  if (probs.shape() != rewards.shape() || probs.numel() != actions.count()) {
    throw Error("reinforce_loss: probabilities, actions and rewards must share the block grid");
  }
  ReinforceLoss out{0.0, Tensor(probs.shape()), Tensor(probs.shape())};
  for (std::size_t b = 0; b < probs.numel(); ++b) {
    const double p = probs[b];
    if (!(p > 0.0 && p < 1.0)) throw Error("reinforce_loss: probability outside (0,1)");
    const double r = rewards[b];
    const bool a = actions.values[b] != 0;
    out.loss -= r * (a ? std::log(p) : std::log(1.0 - p));
    const double dp = -r * (a ? 1.0 / p : -1.0 / (1.0 - p));
    out.grad_probs[b] = static_cast<float>(dp);
    // The clamp passes gradients through unchanged.
    out.grad_logits[b] = static_cast<float>(dp * p * (1.0 - p));
  }
  if (!std::isfinite(out.loss)) throw Error("reinforce_loss: non-finite loss");
  return out;
}

void PolicyConfig::validate() const {
  if (target < 0.0 || target > 1.0) throw Error("policy config: tau must lie in [0,1]");
  if (momentum < 0.0 || momentum > 1.0) throw Error("policy config: mu must lie in [0,1]");
  if (update_period == 0) throw Error("policy config: update period must be positive");
  if (width == 0) throw Error("policy config: width must be positive");
  if (gamma < 0.0) throw Error("policy config: gamma must be non-negative");
}

OnlinePolicy::OnlinePolicy(std::size_t state_channels, PolicyConfig config, std::uint64_t seed)
    : net_(state_channels, config.width, seed), config_(config) {
  config_.validate();
  optim_.config = config_.optimizer;
  begin_clip();
}

void OnlinePolicy::begin_clip() {
  moving_avg_ = config_.target;
  prev_cost_ = config_.target;
}

bool OnlinePolicy::accumulate(const PolicyNet::Cache& cache, const Tensor& grad_logits) {
  if (!config_.online) return false;
  auto grads = net_.backward(cache, grad_logits);
  if (grad_sum_.empty()) {
    grad_sum_ = std::move(grads);
  } else {
    for (std::size_t i = 0; i < grads.size(); ++i) grad_sum_[i] = add(grad_sum_[i], grads[i]);
  }
  if (++pending_ < config_.update_period) return false;
  const float inv = 1.0f / static_cast<float>(pending_);
  for (auto& g : grad_sum_)
    for (auto& v : g.storage()) v *= inv;
  auto ps = net_.params();
  rmsprop_step(ps, grad_sum_, optim_);
  grad_sum_.clear();
  pending_ = 0;
  return true;
}

PolicyStep OnlinePolicy::learn(const PolicyNet::Cache& cache, const ActionGrid& actions, const Tensor& block_ig) {
  PolicyStep s;
  s.cost = compute_cost(actions);
  if (config_.average_mode == MovingAverageMode::Recursive) {
    moving_avg_ = update_moving_average(s.cost, moving_avg_, config_.momentum);
  } else {
    moving_avg_ = update_moving_average(s.cost, prev_cost_, config_.momentum);
  }
  prev_cost_ = s.cost;
  s.moving_avg = moving_avg_;
  const RewardGrid rewards = compute_rewards(block_ig, actions, moving_avg_, config_.target, config_.gamma);
  double rsum = 0.0;
  for (float v : rewards.total.values()) rsum += v;
  s.reward_mean = rsum / static_cast<double>(rewards.total.numel());
  const ReinforceLoss loss = reinforce_loss(cache.probs, actions, rewards.total);
  s.loss = loss.loss;
  s.updated = accumulate(cache, loss.grad_logits);
  return s;
}

void OnlinePolicy::save(const std::filesystem::path& dir) const { save_tensor_set(dir, net_.to_tensors()); }

void OnlinePolicy::load(const std::filesystem::path& dir) { net_.from_tensors(load_tensor_set(dir)); }

}  // namespace blockprop
