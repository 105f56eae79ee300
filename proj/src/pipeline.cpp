#include "pmerge/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <random>

#include "pmerge/error.hpp"
#include "pmerge/prefix_store.hpp"

namespace pmerge {

std::vector<Example> denoising_dataset(const Vocabulary& vocab, const GeneratorParams& params,
                                       std::uint64_t seed, std::size_t size, double mask_prob,
                                       double cue_prob, std::size_t cue_span, bool cue_any_token) {
  if (mask_prob < 0.0 || mask_prob >= 1.0) fail(ErrorKind::Config, "mask_prob must be in [0, 1)");
  if (cue_prob < 0.0 || cue_prob > 1.0) fail(ErrorKind::Config, "cue_prob must be in [0, 1]");
  if (cue_prob > 0.0 && cue_span == 0) fail(ErrorKind::Config, "cue_span must be positive");
  Rng rng(seed);
  std::bernoulli_distribution marked(0.5), mask(mask_prob), cued(cue_prob);
  std::vector<Example> out;
  out.reserve(size);
  while (out.size() < size) {
    // Half plain pooled sequences, half marker-segmented ones.
    const Example src = marked(rng) ? gen_qa(params, vocab, rng) : gen_sum(params, vocab, rng);
    const auto s = src.source();
    Example ex;
    if (cued(rng)) {
      // Continuation: a cue token up front, the target is what follows its
      // first occurrence.
      const std::size_t pos = std::uniform_int_distribution<std::size_t>(0, s.size() - 1)(rng);
      if (!cue_any_token && !vocab.is_content(s[pos])) continue;
      const auto first = static_cast<std::size_t>(std::find(s.begin(), s.end(), s[pos]) - s.begin());
      const std::size_t room = s.size() - first - 1;
      if (room == 0) continue;
      const std::size_t w = std::uniform_int_distribution<std::size_t>(1, std::min(cue_span, room))(rng);
      ex.input.push_back(s[pos]);
      ex.input.insert(ex.input.end(), s.begin(), s.end());
      ex.query_len = 1;
      ex.target.assign(s.begin() + static_cast<std::ptrdiff_t>(first + 1),
                       s.begin() + static_cast<std::ptrdiff_t>(first + 1 + w));
    } else {
      ex.target.assign(s.begin(), s.end());
      ex.input = ex.target;
      for (auto& t : ex.input)
        if (mask(rng)) t = Vocabulary::kOov;
    }
    out.push_back(std::move(ex));
  }
  return out;
}

Transformer pretrain_backbone(const ModelConfig& model_cfg, const Vocabulary& vocab,
                              const GeneratorParams& params, const PretrainConfig& cfg,
                              TrainLog* log) {
  if (vocab.size() != model_cfg.vocab_size) {
    fail(ErrorKind::Config, "vocabulary has " + std::to_string(vocab.size()) +
                                " words but the model expects " + std::to_string(model_cfg.vocab_size));
  }
  Transformer model(model_cfg, cfg.model_seed);
  TaskData data;
  data.spec.name = "denoise";
  data.train = denoising_dataset(vocab, params, cfg.data_seed, cfg.data_size, cfg.mask_prob, cfg.cue_prob,
                                 cfg.cue_span, cfg.cue_any_token);
  TrainConfig tc = TrainConfig::defaults_for(Stage::FineTune);
  tc.learning_rate = cfg.learning_rate;
  tc.batch_size = cfg.batch_size;
  tc.steps = cfg.steps;
  tc.weight_decay = 0.0;
  tc.seed = cfg.data_seed;
  TrainLog l = fine_tune(model, nullptr, std::span<const TaskData>(&data, 1), tc);
  if (log) *log = std::move(l);
  model.set_trainable(false);
  return model;
}

TaskData make_task_data(const TaskSpec& spec, const Vocabulary& vocab, std::uint64_t train_seed,
                        std::size_t train_size, std::uint64_t test_seed, std::size_t test_size) {
  TaskData d;
  d.spec = spec;
  d.train = generate_dataset(spec, vocab, train_seed, train_size);
  d.test = generate_dataset(spec, vocab, test_seed, test_size);
  return d;
}

// --- gradient check ---------------------------------------------------------

nlohmann::json GradCheckResult::to_json() const {
  return {{"configs", configs}, {"params_checked", params_checked}, {"max_rel_error", max_rel_error},
          {"max_abs_error", max_abs_error}, {"worst", worst}, {"passed", passed}};
}

GradCheckResult grad_check(std::size_t n_configs, std::uint64_t seed, double tolerance,
                           double abs_floor, double eps) {
  if (n_configs == 0) fail(ErrorKind::Config, "grad_check needs at least one config");
  Rng rng(seed);
  auto pick = [&](std::size_t lo, std::size_t hi) {
    return std::uniform_int_distribution<std::size_t>(lo, hi)(rng);
  };
  GradCheckResult res;
  res.passed = true;
  for (std::size_t c = 0; c < n_configs; ++c) {
    ModelConfig mc;
    mc.n_layers = pick(1, 2);
    mc.n_heads = std::size_t{1} << pick(0, 2);
    mc.d_model = mc.n_heads * (std::size_t{2} << pick(1, 2));  // 4..32, divisible by heads
    mc.d_ff = 2 * mc.d_model;
    mc.vocab_size = pick(6, 12);
    mc.max_src_len = 8;
    mc.max_tgt_len = 6;
    Transformer model(mc, rng());
    model.set_trainable(true);
    const std::size_t lp = pick(1, 3);
    PrefixMatrix prefix(ManualDesign{lp, 0, 1}, mc, rng(), 0.5);

    std::vector<TokenId> src(pick(2, 5)), tgt(pick(2, 4));
    for (auto& t : src) t = pick(0, mc.vocab_size - 1);
    for (auto& t : tgt) t = pick(0, mc.vocab_size - 1);
    const auto& indices = prefix.task_map(0);

    auto loss_fn = [&](const Tensor&) {
      const auto acts = gather(prefix, indices);
      return cross_entropy(model.forward(src, tgt, &acts).logits, tgt);
    };

    std::vector<std::pair<std::string, Tensor>> checked;
    for (auto& p : model.params()) checked.emplace_back(p.name, p.tensor);
    checked.emplace_back("prefix", prefix.tensor());
    std::vector<Tensor> leaves;
    for (auto& [name, t] : checked) leaves.push_back(t);
    const GradientMap grads = backward(loss_fn(Tensor{}), leaves);

    NoGradGuard no_grad;
    for (auto& [name, t] : checked) {
      const auto numeric = finite_diff_grad(loss_fn, t, eps);
      const auto analytic = grads.get(t);
      const double err = max_relative_error(analytic, numeric, abs_floor);
      res.params_checked += t.numel();
      for (std::size_t i = 0; i < analytic.size(); ++i)
        res.max_abs_error = std::max(res.max_abs_error, std::abs(analytic[i] - numeric[i]));
      if (err > res.max_rel_error) {
        res.max_rel_error = err;
        res.worst = "config " + std::to_string(c) + ": " + name;
      }
    }
    ++res.configs;
  }
  res.passed = res.max_rel_error <= tolerance;
  return res;
}

}  // namespace pmerge
