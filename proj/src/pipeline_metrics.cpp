#include <cstdio>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include "handda/pipeline.hpp"
#include "handda/text.hpp"

namespace handda::pipeline {
namespace {

std::string join_probs(const Distribution& d) {
  std::string out;
  for (std::size_t i = 0; i < d.size(); ++i) {
    if (i > 0) out += ",";
    out += text::format_double(d[i]);
  }
  return out;
}

Distribution parse_probs(const std::string& field) {
  std::vector<double> v;
  for (const auto& part : text::split(field, ',')) v.push_back(text::parse_double("probability", part));
  return Distribution(std::move(v));
}

double percent(std::size_t hits, std::size_t total) {
  return 100.0 * static_cast<double>(hits) / static_cast<double>(total);
}

std::string fixed2(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.2f", v);
  return buf;
}

}  // namespace

std::vector<PredictionRecord> predict_all(ta3n::Model& model, std::span<const ClipFeatures> clips,
                                          std::uint64_t eval_seed) {
  const int num_seg = model.config().num_seg;
  std::vector<PredictionRecord> out;
  out.reserve(clips.size());
  for (const auto& c : clips) {
    const auto idx = ta3n::segment_indices(static_cast<int>(c.frames.rows()), num_seg, false, nullptr);
    ClipFeatures sampled{c.id, nn::Matrix(num_seg, c.frames.cols()), c.domain, c.label};
    for (int i = 0; i < num_seg; ++i) sampled.frames.row(i) = c.frames.row(idx[static_cast<std::size_t>(i)]);
    auto [verb, noun] = ta3n::predict(model, sampled, eval_seed);
    out.push_back({c.id, std::move(verb), std::move(noun)});
  }
  return out;
}

std::vector<PredictionRecord> ensemble_mean(std::span<const std::vector<PredictionRecord>> per_model) {
  if (per_model.empty()) throw std::invalid_argument("ensemble: at least one model is required");
  const auto& first = per_model.front();
  const double m = static_cast<double>(per_model.size());
  std::vector<PredictionRecord> out;
  for (std::size_t i = 0; i < first.size(); ++i) {
    std::vector<double> verb = first[i].verb.probs(), noun = first[i].noun.probs();
    for (std::size_t k = 1; k < per_model.size(); ++k) {
      const auto& rec = per_model[k].at(i);
      if (rec.id != first[i].id) throw std::invalid_argument("ensemble: clip order differs between models");
      if (rec.verb.size() != verb.size() || rec.noun.size() != noun.size()) {
        throw std::invalid_argument("ensemble: models disagree on class counts");
      }
      for (std::size_t c = 0; c < verb.size(); ++c) verb[c] += (rec.verb[c] - first[i].verb[c]) / m;
      for (std::size_t c = 0; c < noun.size(); ++c) noun[c] += (rec.noun[c] - first[i].noun[c]) / m;
    }
    out.push_back({first[i].id, Distribution(std::move(verb)), Distribution(std::move(noun))});
  }
  return out;
}

std::vector<PredictionRecord> ensemble_predict(std::span<const std::filesystem::path> checkpoints,
                                               std::span<const ClipFeatures> clips, std::uint64_t eval_seed) {
  if (checkpoints.empty()) throw std::invalid_argument("ensemble: at least one checkpoint is required");
  std::vector<std::vector<PredictionRecord>> per_model;
  std::optional<std::pair<int, int>> classes;
  for (const auto& path : checkpoints) {
    auto loaded = ta3n::load_model(path);
    const std::pair<int, int> k{loaded.model.config().num_verbs, loaded.model.config().num_nouns};
    if (classes && *classes != k) throw std::invalid_argument("ensemble: incompatible checkpoint " + path.string());
    classes = k;
    per_model.push_back(predict_all(loaded.model, clips, eval_seed));
  }
  return ensemble_mean(per_model);
}

void write_predictions(const std::filesystem::path& path, std::span<const PredictionRecord> records) {
  io::atomic_write(path, [&](std::ostream& out) {
    out << "# id\tverb probabilities\tnoun probabilities\n";
    for (const auto& r : records) out << r.id << '\t' << join_probs(r.verb) << '\t' << join_probs(r.noun) << '\n';
  });
}

std::vector<PredictionRecord> read_predictions(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open predictions " + path.string());
  std::vector<PredictionRecord> out;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty() || line.front() == '#') continue;
    const auto f = text::split(line, '\t');
    if (f.size() != 3) throw std::runtime_error(path.string() + ":" + std::to_string(lineno) + ": expected 3 fields");
    out.push_back({f[0], parse_probs(f[1]), parse_probs(f[2])});
  }
  return out;
}

bool in_top_k(std::span<const double> probs, int truth, int k) {
  const auto t = static_cast<std::size_t>(truth);
  if (t >= probs.size()) throw std::invalid_argument("top-k: class index out of range");
  int rank = 0;
  for (std::size_t j = 0; j < probs.size(); ++j) {
    if (probs[j] > probs[t] || (probs[j] == probs[t] && j < t)) ++rank;
  }
  return rank < k;
}

bool action_in_top_k(const Distribution& verb, const Distribution& noun, ActionLabel truth, int k) {
  const auto tv = static_cast<std::size_t>(truth.verb), tn = static_cast<std::size_t>(truth.noun);
  if (tv >= verb.size() || tn >= noun.size()) throw std::invalid_argument("top-k: action label out of range");
  const double score = verb[tv] * noun[tn];
  const std::size_t truth_index = tv * noun.size() + tn;
  int rank = 0;
  for (std::size_t v = 0; v < verb.size(); ++v) {
    for (std::size_t n = 0; n < noun.size(); ++n) {
      const double s = verb[v] * noun[n];
      if (s > score || (s == score && v * noun.size() + n < truth_index)) ++rank;
    }
  }
  return rank < k;
}

MetricsReport evaluate(std::span<const PredictionRecord> predictions, const std::map<std::string, ActionLabel>& truth) {
  if (predictions.empty()) throw std::invalid_argument("evaluate: no predictions");
  std::size_t v1 = 0, v5 = 0, n1 = 0, n5 = 0, a1 = 0, a5 = 0;
  for (const auto& p : predictions) {
    const auto it = truth.find(p.id);
    if (it == truth.end()) throw std::invalid_argument("evaluate: no ground truth for clip " + p.id);
    const ActionLabel t = it->second;
    const bool verb1 = in_top_k(p.verb.probs(), t.verb, 1);
    const bool noun1 = in_top_k(p.noun.probs(), t.noun, 1);
    v1 += verb1;
    n1 += noun1;
    v5 += in_top_k(p.verb.probs(), t.verb, 5);
    n5 += in_top_k(p.noun.probs(), t.noun, 5);
    a1 += verb1 && noun1;
    a5 += action_in_top_k(p.verb, p.noun, t, 5);
  }
  const std::size_t n = predictions.size();
  return {percent(v1, n), percent(v5, n), percent(n1, n), percent(n5, n), percent(a1, n), percent(a5, n), n};
}

void write_metrics(const std::filesystem::path& path, const MetricsReport& r) {
  io::KeyValues kv{
      {"verb_top1", text::format_double(r.verb_top1)},     {"verb_top5", text::format_double(r.verb_top5)},
      {"noun_top1", text::format_double(r.noun_top1)},     {"noun_top5", text::format_double(r.noun_top5)},
      {"action_top1", text::format_double(r.action_top1)}, {"action_top5", text::format_double(r.action_top5)},
      {"clips", std::to_string(r.clips)},
  };
  io::atomic_write(path, [&](std::ostream& out) { out << io::format_key_values(kv); });
}

MetricsReport read_metrics(const std::filesystem::path& path) {
  const auto kv = io::read_key_values(path);
  MetricsReport r;
  text::get(kv, "verb_top1", r.verb_top1);
  text::get(kv, "verb_top5", r.verb_top5);
  text::get(kv, "noun_top1", r.noun_top1);
  text::get(kv, "noun_top5", r.noun_top5);
  text::get(kv, "action_top1", r.action_top1);
  text::get(kv, "action_top5", r.action_top5);
  std::uint64_t clips = 0;
  text::get(kv, "clips", clips);
  r.clips = clips;
  return r;
}

std::string render_metrics_table(const std::vector<std::pair<std::string, MetricsReport>>& rows) {
  std::ostringstream out;
  char line[160];
  std::snprintf(line, sizeof(line), "%-24s %8s %8s %8s | %8s %8s %8s\n", "", "verb@1", "noun@1", "action@1",
                "verb@5", "noun@5", "action@5");
  out << line;
  for (const auto& [name, r] : rows) {
    std::snprintf(line, sizeof(line), "%-24s %8s %8s %8s | %8s %8s %8s\n", name.c_str(), fixed2(r.verb_top1).c_str(),
                  fixed2(r.noun_top1).c_str(), fixed2(r.action_top1).c_str(), fixed2(r.verb_top5).c_str(),
                  fixed2(r.noun_top5).c_str(), fixed2(r.action_top5).c_str());
    out << line;
  }
  return out.str();
}

}  // namespace handda::pipeline
