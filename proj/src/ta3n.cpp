#include "handda/ta3n.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

#include "handda/text.hpp"

namespace handda::ta3n {
namespace {

constexpr std::uint64_t kMaxEnumeratedTuples = 4096;

void require(bool ok, const std::string& what) {
  if (!ok) throw std::invalid_argument("ta3n: " + what);
}

std::uint64_t binomial(int n, int k) {
  if (k < 0 || k > n) return 0;
  k = std::min(k, n - k);
  std::uint64_t r = 1;
  for (int i = 1; i <= k; ++i) r = r * static_cast<std::uint64_t>(n - k + i) / static_cast<std::uint64_t>(i);
  return r;
}

std::vector<std::vector<int>> enumerate_tuples(int num_frames, int n) {
  std::vector<std::vector<int>> out;
  std::vector<int> cur(static_cast<std::size_t>(n));
  std::iota(cur.begin(), cur.end(), 0);
  while (true) {
    out.push_back(cur);
    int i = n - 1;
    while (i >= 0 && cur[static_cast<std::size_t>(i)] == num_frames - n + i) --i;
    if (i < 0) break;
    ++cur[static_cast<std::size_t>(i)];
    for (int j = i + 1; j < n; ++j) cur[static_cast<std::size_t>(j)] = cur[static_cast<std::size_t>(j - 1)] + 1;
  }
  return out;
}

std::vector<DomainLabel> repeat_label(DomainLabel d, std::size_t n) { return std::vector<DomainLabel>(n, d); }

nn::Var stack_frames(nn::Tape& tape, ClipBatch clips, int input_dim) {
  nn::Index rows = 0;
  for (const ClipFeatures* c : clips) rows += c->frames.rows();
  nn::Matrix x(rows, input_dim);
  nn::Index off = 0;
  for (const ClipFeatures* c : clips) {
    x.middleRows(off, c->frames.rows()) = c->frames;
    off += c->frames.rows();
  }
  return tape.constant(std::move(x));
}

void check_clip(const ClipFeatures& clip, const TA3NConfig& cfg) {
  require(clip.frames.cols() == cfg.input_dim, "clip " + clip.id + " width " + std::to_string(clip.frames.cols()) +
                                                   " does not match input_dim " + std::to_string(cfg.input_dim));
  require(clip.frames.rows() == cfg.num_seg, "clip " + clip.id + " does not have num_seg frames");
  require(clip.frames.allFinite(), "clip " + clip.id + " contains non-finite values");
}

Distribution row_distribution(const nn::Matrix& probs, nn::Index r) {
  std::vector<double> p(static_cast<std::size_t>(probs.cols()));
  for (nn::Index c = 0; c < probs.cols(); ++c) p[static_cast<std::size_t>(c)] = probs(r, c);
  return Distribution(std::move(p));
}

}  // namespace

void TA3NConfig::validate() const {
  require(num_seg >= 1 && feat_dim >= 1 && input_dim >= 1, "dimensions must be positive");
  require(num_verbs >= 1 && num_nouns >= 1, "class counts must be positive");
  require(!relation_scales.empty(), "at least one relation scale is required");
  require(std::is_sorted(relation_scales.begin(), relation_scales.end()) &&
              std::adjacent_find(relation_scales.begin(), relation_scales.end()) == relation_scales.end(),
          "relation scales must be strictly increasing");
  require(relation_scales.front() >= 2, "relation scales start at 2");
  require(relation_scales.back() <= num_seg, "relation scale exceeds num_seg");
  require(!tuples_per_scale || *tuples_per_scale >= 1, "tuples_per_scale must be positive");
  for (double w : {lambda_spatial, lambda_relation, lambda_temporal, gamma}) {
    require(std::isfinite(w) && w >= 0.0, "loss weights must be non-negative");
  }
  require(disc_hidden >= 1, "disc_hidden must be positive");
  grl.validate();
}

io::KeyValues TA3NConfig::to_key_values() const {
  using text::format_double;
  return {
      {"num_seg", std::to_string(num_seg)},
      {"feat_dim", std::to_string(feat_dim)},
      {"input_dim", std::to_string(input_dim)},
      {"num_verbs", std::to_string(num_verbs)},
      {"num_nouns", std::to_string(num_nouns)},
      {"relation_scales", text::join_ints(relation_scales)},
      {"tuples_per_scale", tuples_per_scale ? std::to_string(*tuples_per_scale) : "exhaustive"},
      {"lambda_spatial", format_double(lambda_spatial)},
      {"lambda_relation", format_double(lambda_relation)},
      {"lambda_temporal", format_double(lambda_temporal)},
      {"gamma", format_double(gamma)},
      {"disc_hidden", std::to_string(disc_hidden)},
      {"grl_lambda", format_double(grl.lambda_value)},
      {"grl_schedule", adversarial::to_string(grl.schedule)},
      {"grl_steepness", format_double(grl.ramp_steepness)},
  };
}

TA3NConfig TA3NConfig::from_key_values(const io::KeyValues& kv) {
  TA3NConfig c;
  text::get(kv, "num_seg", c.num_seg);
  text::get(kv, "feat_dim", c.feat_dim);
  text::get(kv, "input_dim", c.input_dim);
  text::get(kv, "num_verbs", c.num_verbs);
  text::get(kv, "num_nouns", c.num_nouns);
  text::get(kv, "relation_scales", c.relation_scales);
  std::string tuples;
  if (text::get(kv, "tuples_per_scale", tuples)) {
    if (tuples == "exhaustive") {
      c.tuples_per_scale.reset();
    } else {
      c.tuples_per_scale = static_cast<int>(text::parse_int("tuples_per_scale", tuples));
    }
  }
  text::get(kv, "lambda_spatial", c.lambda_spatial);
  text::get(kv, "lambda_relation", c.lambda_relation);
  text::get(kv, "lambda_temporal", c.lambda_temporal);
  text::get(kv, "gamma", c.gamma);
  text::get(kv, "disc_hidden", c.disc_hidden);
  text::get(kv, "grl_lambda", c.grl.lambda_value);
  std::string schedule;
  if (text::get(kv, "grl_schedule", schedule)) c.grl.schedule = adversarial::parse_grl_schedule(schedule);
  text::get(kv, "grl_steepness", c.grl.ramp_steepness);
  return c;
}

double total_objective(const LossBundle& b, const TA3NConfig& cfg) {
  double rel = 0.0;
  for (const auto& [scale, v] : b.relation) rel += v;
  if (!b.relation.empty()) rel /= static_cast<double>(b.relation.size());
  return b.verb + b.noun + cfg.gamma * (b.ae_verb + b.ae_noun) + cfg.lambda_spatial * b.spatial +
         cfg.lambda_relation * rel + cfg.lambda_temporal * b.temporal;
}

Model::Model(const TA3NConfig& cfg, std::uint64_t init_seed) : cfg_(cfg) {
  cfg_.validate();
  const nn::Index f = cfg_.feat_dim;
  encoder = nn::Linear("encoder", cfg_.input_dim, f);
  for (int n : cfg_.relation_scales) {
    relation.emplace_back("relation." + std::to_string(n), n * f, f, f);
    relation_disc.emplace_back("disc.relation." + std::to_string(n), f, cfg_.disc_hidden, 2);
  }
  verb_head = nn::Linear("verb_head", f, cfg_.num_verbs);
  noun_head = nn::Linear("noun_head", f, cfg_.num_nouns);
  spatial_disc = nn::Mlp2("disc.spatial", f, cfg_.disc_hidden, 2);
  temporal_disc = nn::Mlp2("disc.temporal", f, cfg_.disc_hidden, 2);

  Rng rng(init_seed);
  encoder.init(rng);
  for (auto& r : relation) r.init(rng);
  verb_head.init(rng);
  noun_head.init(rng);
  spatial_disc.init(rng);
  for (auto& d : relation_disc) d.init(rng);
  temporal_disc.init(rng);
}

nn::ParameterList Model::feature_parameters() {
  nn::ParameterList out;
  encoder.collect(out);
  for (auto& r : relation) r.collect(out);
  return out;
}

nn::ParameterList Model::discriminator_parameters() {
  nn::ParameterList out;
  spatial_disc.collect(out);
  for (auto& d : relation_disc) d.collect(out);
  temporal_disc.collect(out);
  return out;
}

nn::ParameterList Model::parameters() {
  nn::ParameterList out = feature_parameters();
  verb_head.collect(out);
  noun_head.collect(out);
  for (nn::Parameter* p : discriminator_parameters()) out.push_back(p);
  return out;
}

std::size_t Model::scale_slot(int scale) const {
  const auto& s = cfg_.relation_scales;
  const auto it = std::find(s.begin(), s.end(), scale);
  require(it != s.end(), "scale " + std::to_string(scale) + " is not configured");
  return static_cast<std::size_t>(it - s.begin());
}

std::vector<std::vector<int>> draw_tuples(int num_frames, int n, std::optional<int> count, Rng& rng) {
  require(n >= 1, "tuple size must be positive");
  require(n <= num_frames, "relation scale " + std::to_string(n) + " exceeds frame count " +
                               std::to_string(num_frames));
  const std::uint64_t total = binomial(num_frames, n);
  if (!count) {
    require(total <= (1u << 22), "exhaustive enumeration too large; configure tuples_per_scale");
    return enumerate_tuples(num_frames, n);
  }
  require(*count >= 1, "tuple count must be positive");
  std::vector<std::vector<int>> out;
  out.reserve(static_cast<std::size_t>(*count));
  if (total <= kMaxEnumeratedTuples) {
    const auto all = enumerate_tuples(num_frames, n);
    std::vector<std::size_t> order;
    while (static_cast<int>(out.size()) < *count) {
      if (order.empty()) {
        order.resize(all.size());
        std::iota(order.begin(), order.end(), std::size_t{0});
        rng.shuffle(order);
        std::reverse(order.begin(), order.end());
      }
      out.push_back(all[order.back()]);
      order.pop_back();
    }
    return out;
  }
  std::vector<int> frames(static_cast<std::size_t>(num_frames));
  while (static_cast<int>(out.size()) < *count) {
    std::iota(frames.begin(), frames.end(), 0);
    // partial Fisher-Yates: first n entries form a uniform n-subset
    for (int i = 0; i < n; ++i) {
      const std::size_t j = static_cast<std::size_t>(i) + rng.index(static_cast<std::size_t>(num_frames - i));
      std::swap(frames[static_cast<std::size_t>(i)], frames[j]);
    }
    std::vector<int> t(frames.begin(), frames.begin() + n);
    std::sort(t.begin(), t.end());
    out.push_back(std::move(t));
  }
  return out;
}

std::vector<int> segment_indices(int clip_len, int num_seg, bool training, Rng* rng) {
  require(clip_len >= 1 && num_seg >= 1, "segment sampling needs positive lengths");
  require(!training || rng != nullptr, "training-mode segment sampling needs an rng");
  std::vector<int> out(static_cast<std::size_t>(num_seg));
  const double seg = static_cast<double>(clip_len) / num_seg;
  for (int s = 0; s < num_seg; ++s) {
    const double lo = s * seg;
    const double pos = training ? lo + rng->uniform() * seg : lo + 0.5 * seg;
    out[static_cast<std::size_t>(s)] = std::clamp(static_cast<int>(std::floor(pos)), 0, clip_len - 1);
  }
  return out;
}

nn::Var encode_frames(nn::Tape& tape, Model& model, nn::Var frames) {
  require(frames.cols() == model.config().input_dim, "frame width does not match input_dim");
  return nn::relu(model.encoder(tape, frames));
}

nn::Matrix encode_frames(Model& model, const ClipFeatures& clip) {
  require(clip.frames.cols() == model.config().input_dim, "frame width does not match input_dim");
  nn::Tape tape;
  return encode_frames(tape, model, tape.constant(clip.frames)).value();
}

nn::Var relation_features(nn::Tape& tape, Model& model, nn::Var encoded, int clips, int scale, Rng& sampler) {
  require(clips >= 1 && encoded.rows() % clips == 0, "encoded rows must split evenly into clips");
  const int t = static_cast<int>(encoded.rows() / clips);
  require(scale <= t, "relation scale " + std::to_string(scale) + " exceeds frame count " + std::to_string(t));
  const std::size_t slot = model.scale_slot(scale);
  std::vector<nn::Index> idx;
  nn::Index per_clip = 0;
  for (int c = 0; c < clips; ++c) {
    const auto tuples = draw_tuples(t, scale, model.config().tuples_per_scale, sampler);
    per_clip = static_cast<nn::Index>(tuples.size());
    for (const auto& tuple : tuples) {
      for (int f : tuple) idx.push_back(static_cast<nn::Index>(c) * t + f);
    }
  }
  const nn::Var stacked = nn::gather_concat(encoded, idx, scale);
  return nn::block_mean(model.relation[slot](tape, stacked), per_clip);
}

nn::Var aggregate_video(std::span<const nn::Var> per_scale) {
  require(!per_scale.empty(), "aggregation needs at least one scale");
  nn::Var acc = per_scale.front();
  for (std::size_t i = 1; i < per_scale.size(); ++i) acc = nn::add(acc, per_scale[i]);
  return acc;
}

nn::Matrix aggregate_video(std::span<const nn::Matrix> per_scale) {
  require(!per_scale.empty(), "aggregation needs at least one scale");
  nn::Matrix acc = per_scale.front();
  for (std::size_t i = 1; i < per_scale.size(); ++i) {
    require(per_scale[i].rows() == acc.rows() && per_scale[i].cols() == acc.cols(), "scale feature shapes differ");
    acc += per_scale[i];
  }
  return acc;
}

HeadLogits classify_logits(nn::Tape& tape, Model& model, nn::Var video) {
  return {model.verb_head(tape, video), model.noun_head(tape, video)};
}

std::pair<Distribution, Distribution> classify(Model& model, std::span<const double> video_feature) {
  require(static_cast<int>(video_feature.size()) == model.config().feat_dim, "video feature width mismatch");
  nn::Tape tape;
  nn::Matrix v(1, static_cast<nn::Index>(video_feature.size()));
  for (std::size_t i = 0; i < video_feature.size(); ++i) v(0, static_cast<nn::Index>(i)) = video_feature[i];
  const HeadLogits logits = classify_logits(tape, model, tape.constant(v));
  return {row_distribution(nn::softmax(logits.verb).value(), 0),
          row_distribution(nn::softmax(logits.noun).value(), 0)};
}

LossGraph forward_losses(nn::Tape& tape, Model& model, ClipBatch source, ClipBatch target, double progress,
                         Rng& sampler) {
  const TA3NConfig& cfg = model.config();
  require(!source.empty(), "empty source batch");
  require(!target.empty(), "empty target batch");
  std::vector<int> verbs, nouns;
  for (const ClipFeatures* c : source) {
    check_clip(*c, cfg);
    require(c->label.has_value(), "source clip " + c->id + " is missing its label");
    verbs.push_back(c->label->verb);
    nouns.push_back(c->label->noun);
  }
  for (const ClipFeatures* c : target) check_clip(*c, cfg);

  const auto ns = static_cast<nn::Index>(source.size());
  const auto nt = static_cast<nn::Index>(target.size());
  const int clips = static_cast<int>(ns + nt);
  const double lambda = cfg.grl.lambda_at(progress);

  std::vector<const ClipFeatures*> all(source.begin(), source.end());
  all.insert(all.end(), target.begin(), target.end());
  const nn::Var frames = stack_frames(tape, all, cfg.input_dim);
  const nn::Var encoded = encode_frames(tape, model, frames);

  std::vector<DomainLabel> frame_domains = repeat_label(DomainLabel::source, static_cast<std::size_t>(ns * cfg.num_seg));
  frame_domains.resize(static_cast<std::size_t>(clips * cfg.num_seg), DomainLabel::target);
  std::vector<DomainLabel> clip_domains = repeat_label(DomainLabel::source, static_cast<std::size_t>(ns));
  clip_domains.resize(static_cast<std::size_t>(clips), DomainLabel::target);

  LossGraph g;
  g.spatial = adversarial::domain_loss(
      model.spatial_disc(tape, nn::gradient_reversal(encoded, lambda)), frame_domains);

  std::vector<nn::Var> per_scale;
  for (std::size_t s = 0; s < cfg.relation_scales.size(); ++s) {
    const int n = cfg.relation_scales[s];
    const nn::Var rel = relation_features(tape, model, encoded, clips, n, sampler);
    per_scale.push_back(rel);
    g.relation[n] = adversarial::domain_loss(
        model.relation_disc[s](tape, nn::gradient_reversal(rel, lambda)), clip_domains);
  }
  const nn::Var video = aggregate_video(per_scale);
  const nn::Var td_logits = model.temporal_disc(tape, nn::gradient_reversal(video, lambda));
  g.temporal = adversarial::domain_loss(td_logits, clip_domains);
  const nn::Matrix td_probs = nn::softmax(nn::detach(td_logits)).value();

  const HeadLogits logits = classify_logits(tape, model, video);
  g.verb = nn::nll_mean(nn::log_softmax(nn::slice_rows(logits.verb, 0, ns)), verbs);
  g.noun = nn::nll_mean(nn::log_softmax(nn::slice_rows(logits.noun, 0, ns)), nouns);
  const nn::Matrix target_td = td_probs.middleRows(ns, nt);
  g.ae_verb = adversarial::attentive_entropy_loss(nn::slice_rows(logits.verb, ns, nt), target_td);
  g.ae_noun = adversarial::attentive_entropy_loss(nn::slice_rows(logits.noun, ns, nt), target_td);

  std::vector<nn::Var> rel_losses;
  for (const auto& [n, v] : g.relation) rel_losses.push_back(v);
  const nn::Var rel_mean = nn::mean_all(nn::concat_rows(rel_losses));

  nn::Var total = nn::add(g.verb, g.noun);
  total = nn::add(total, nn::scale(nn::add(g.ae_verb, g.ae_noun), cfg.gamma));
  total = nn::add(total, nn::scale(g.spatial, cfg.lambda_spatial));
  total = nn::add(total, nn::scale(rel_mean, cfg.lambda_relation));
  total = nn::add(total, nn::scale(g.temporal, cfg.lambda_temporal));
  g.total = total;

  g.bundle.verb = g.verb.scalar();
  g.bundle.noun = g.noun.scalar();
  g.bundle.spatial = g.spatial.scalar();
  g.bundle.temporal = g.temporal.scalar();
  g.bundle.ae_verb = g.ae_verb.scalar();
  g.bundle.ae_noun = g.ae_noun.scalar();
  for (const auto& [n, v] : g.relation) g.bundle.relation[n] = v.scalar();
  return g;
}

std::uint64_t stable_hash(const std::string& text) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : text) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::pair<Distribution, Distribution> predict(Model& model, const ClipFeatures& clip, std::uint64_t eval_seed) {
  const TA3NConfig& cfg = model.config();
  check_clip(clip, cfg);
  nn::Tape tape;
  Rng sampler(derive_seed(eval_seed, {stable_hash(clip.id)}));
  const nn::Var encoded = encode_frames(tape, model, tape.constant(clip.frames));
  std::vector<nn::Var> per_scale;
  for (int n : cfg.relation_scales) per_scale.push_back(relation_features(tape, model, encoded, 1, n, sampler));
  const HeadLogits logits = classify_logits(tape, model, aggregate_video(per_scale));
  return {row_distribution(nn::softmax(logits.verb).value(), 0),
          row_distribution(nn::softmax(logits.noun).value(), 0)};
}

void save_model(const std::filesystem::path& path, Model& model, std::uint64_t step) {
  io::Checkpoint ckpt;
  ckpt.kind = "ta3n";
  ckpt.config = model.config().to_key_values();
  ckpt.step = step;
  io::store_parameters(ckpt, model.parameters());
  io::save_checkpoint(path, ckpt);
}

LoadedModel load_model(const std::filesystem::path& path) {
  const io::Checkpoint ckpt = io::load_checkpoint(path);
  if (ckpt.kind != "ta3n") throw std::runtime_error("checkpoint " + path.string() + " is not a ta3n model");
  LoadedModel out{Model(TA3NConfig::from_key_values(ckpt.config), 0), ckpt.step};
  io::restore_parameters(ckpt, out.model.parameters());
  return out;
}

}  // namespace handda::ta3n
