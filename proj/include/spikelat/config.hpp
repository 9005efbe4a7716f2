#pragma once

// Flat "dotted.key = value" run configuration. Every key has a default; unknown
// keys are rejected. Lines starting with '#' are comments.

#include <algorithm>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "spikelat/analysis.hpp"

namespace spikelat {

struct ConfigError : SpecError {
  ConfigError(const std::string& what, std::size_t line_no)
      : SpecError(line_no ? "line " + std::to_string(line_no) + ": " + what : what), line(line_no) {}
  std::size_t line;  // 0 when the error does not come from a file line
};

enum class KeyType { Int, Real, Bool, Text, RealList };

struct KeyDef {
  const char* key;
  KeyType type;
  const char* default_value;
  const char* doc;
};

// clang-format off
inline const std::vector<KeyDef>& config_keys() {
  static const std::vector<KeyDef> keys = {
    {"model.preset", KeyType::Text, "mlp-mini", "mlp-mini | vgg-mini | sew-mini"},
    {"model.layers", KeyType::Text, "", "explicit layer list, overrides the preset when set"},
    {"model.hidden", KeyType::Int, "256", "mlp-mini hidden width"},
    {"model.width1", KeyType::Int, "16", "first conv block channels"},
    {"model.width2", KeyType::Int, "32", "second conv block channels"},
    {"model.classes", KeyType::Int, "0", "number of classes; 0 takes it from the training data"},
    {"model.input", KeyType::Text, "", "CxHxW input shape; empty takes it from the training data"},
    {"encoder.T", KeyType::Int, "4", "simulation timesteps"},
    {"encoder.mode", KeyType::Text, "le", "le (conv+bn+sigmoid features) | raw (pixels)"},
    {"encoder.channels", KeyType::Int, "16", "feature channels of the encoder conv"},
    {"encoder.kernel", KeyType::Int, "3", ""},
    {"encoder.stride", KeyType::Int, "1", ""},
    {"encoder.pad", KeyType::Int, "1", ""},
    {"lif.tau_leak", KeyType::Real, "0.5", "membrane leak factor in (0,1]"},
    {"lif.v_th", KeyType::Real, "1.0", "firing threshold"},
    {"lif.surrogate_width", KeyType::Real, "1.0", "rectangular surrogate width"},
    {"lif.detach_reset", KeyType::Bool, "false", "drop the reset path from the backward pass"},
    {"output_lif.tau_leak", KeyType::Real, "", "output layer; empty inherits lif.*"},
    {"output_lif.v_th", KeyType::Real, "", ""},
    {"output_lif.surrogate_width", KeyType::Real, "", ""},
    {"output_lif.detach_reset", KeyType::Bool, "", ""},
    {"loss.kind", KeyType::Text, "tad", "tad | vanilla"},
    {"loss.temperature", KeyType::Real, "2.0", "softmax temperature over per-step confidence"},
    {"loss.detach_weights", KeyType::Bool, "true", "treat temporal weights as constants"},
    {"train.lr", KeyType::Real, "0.001", "AdamW base learning rate (cosine decayed)"},
    {"train.weight_decay", KeyType::Real, "0.01", ""},
    {"train.epochs", KeyType::Int, "10", ""},
    {"train.batch_size", KeyType::Int, "64", ""},
    {"train.eval_batch_size", KeyType::Int, "256", ""},
    {"train.seed", KeyType::Int, "1", "initialisation and shuffling seed"},
    {"train.clip_norm", KeyType::Real, "0", "global gradient norm cap; 0 disables"},
    {"data.source", KeyType::Text, "blobs", "blobs | idx"},
    {"data.train_images", KeyType::Text, "", "IDX image file (optionally gzipped)"},
    {"data.train_labels", KeyType::Text, "", ""},
    {"data.test_images", KeyType::Text, "", ""},
    {"data.test_labels", KeyType::Text, "", ""},
    {"data.train_limit", KeyType::Int, "0", "use only the first n training samples; 0 = all"},
    {"data.test_limit", KeyType::Int, "0", ""},
    {"data.label_noise", KeyType::Real, "0", "fraction of training labels replaced at random"},
    {"data.label_noise_seed", KeyType::Int, "7", ""},
    {"data.blobs.train_per_class", KeyType::Int, "100", ""},
    {"data.blobs.test_per_class", KeyType::Int, "50", ""},
    {"data.blobs.classes", KeyType::Int, "3", ""},
    {"data.blobs.height", KeyType::Int, "8", ""},
    {"data.blobs.width", KeyType::Int, "8", ""},
    {"data.blobs.seed", KeyType::Int, "1", ""},
    {"data.blobs.spread", KeyType::Real, "0.1", "per-pixel standard deviation around the class mean"},
    {"decode.mode", KeyType::Text, "latency", "latency | rate"},
    {"decode.tiebreak", KeyType::Text, "spikers", "spikers | all"},
    {"corrupt.seed", KeyType::Int, "1", ""},
    {"corrupt.gaussian_sigma", KeyType::RealList, "0.08,0.12,0.18,0.26,0.38", "severities 1..5"},
    {"corrupt.shot_photons", KeyType::RealList, "60,25,12,5,3", ""},
    {"corrupt.brightness_shift", KeyType::RealList, "0.1,0.2,0.3,0.4,0.5", ""},
    {"corrupt.contrast_factor", KeyType::RealList, "0.4,0.3,0.2,0.1,0.05", ""},
    {"corrupt.pixelate_block", KeyType::RealList, "2,3,4,5,6", ""},
    {"analysis.e_mac", KeyType::Real, "4.6", "pJ per multiply-accumulate"},
    {"analysis.e_ac", KeyType::Real, "0.9", "pJ per accumulate"},
    {"analysis.baseline_timesteps", KeyType::Real, "0", "reference run for normalised energy; 0 skips it"},
    {"analysis.baseline_spikes", KeyType::Real, "0", "reference spikes per sample"},
    {"run.root", KeyType::Text, "runs", "parent directory of timestamped run directories"},
    {"run.dir", KeyType::Text, "", "fixed run directory; overrides run.root naming"},
  };
  return keys;
}
// clang-format on

namespace detail {

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  return s.substr(b, s.find_last_not_of(" \t\r") - b + 1);
}

inline std::vector<double> parse_real_list(const std::string& v) {
  std::vector<double> out;
  std::stringstream ss(v);
  std::string tok;
  while (std::getline(ss, tok, ',')) {
    std::size_t used = 0;
    const std::string t = trim(tok);
    const double d = std::stod(t, &used);
    if (used != t.size()) throw std::invalid_argument(t);
    out.push_back(d);
  }
  return out;
}

inline void check_value(const KeyDef& def, const std::string& v) {
  if (v.empty()) {
    if (*def.default_value) throw std::invalid_argument("empty");
    return;
  }
  std::size_t used = 0;
  switch (def.type) {
    case KeyType::Int: {
      if (v[0] == '-') throw std::invalid_argument(v);
      std::stoull(v, &used);
      break;
    }
    case KeyType::Real: std::stod(v, &used); break;
    case KeyType::Bool:
      if (v != "true" && v != "false") throw std::invalid_argument(v);
      used = v.size();
      break;
    case KeyType::Text: used = v.size(); break;
    case KeyType::RealList:
      if (parse_real_list(v).size() != 5) throw std::invalid_argument(v);
      used = v.size();
      break;
  }
  if (used != v.size()) throw std::invalid_argument(v);
}

}  // namespace detail

inline Shape parse_shape(const std::string& v) {
  Shape s;
  std::stringstream ss(v);
  std::string tok;
  while (std::getline(ss, tok, 'x')) {
    std::size_t used = 0;
    unsigned long long d = 0;
    try {
      d = std::stoull(tok, &used);
    } catch (const std::exception&) {
    }
    if (used == 0 || used != tok.size() || d == 0) throw ConfigError("bad shape '" + v + "'", 0);
    s.push_back(static_cast<std::size_t>(d));
  }
  return s;
}

inline std::string format_shape(const Shape& s) {
  std::string out;
  for (std::size_t i = 0; i < s.size(); ++i) out += (i ? "x" : "") + std::to_string(s[i]);
  return out;
}

class RunConfig {
 public:
  RunConfig() {
    for (const auto& k : config_keys()) values_[k.key] = k.default_value;
  }

  static RunConfig parse(std::istream& in) {
    RunConfig c;
    std::string line;
    std::size_t no = 0;
    while (std::getline(in, line)) {
      ++no;
      const std::string t = detail::trim(line);
      if (t.empty() || t[0] == '#') continue;
      const auto eq = t.find('=');
      if (eq == std::string::npos) throw ConfigError("expected key = value, got '" + t + "'", no);
      c.set(detail::trim(t.substr(0, eq)), detail::trim(t.substr(eq + 1)), no);
    }
    return c;
  }

  static RunConfig load(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config file '" + path + "'", 0);
    return parse(in);
  }

  // "key=value" from the command line.
  void apply_override(const std::string& kv) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) throw ConfigError("override '" + kv + "' is not key=value", 0);
    set(detail::trim(kv.substr(0, eq)), detail::trim(kv.substr(eq + 1)), 0);
  }

  void set(const std::string& key, const std::string& value, std::size_t line = 0) {
    const KeyDef* def = find(key);
    if (!def) throw ConfigError("unknown key '" + key + "'", line);
    try {
      detail::check_value(*def, value);
    } catch (const std::exception&) {
      throw ConfigError("invalid value '" + value + "' for key '" + key + "'", line);
    }
    values_[key] = value;
  }

  const std::string& text(const std::string& key) const {
    const auto it = values_.find(key);
    if (it == values_.end()) throw ConfigError("unknown key '" + key + "'", 0);
    return it->second;
  }
  std::size_t integer(const std::string& key) const { return std::stoull(text(key)); }
  double real(const std::string& key) const { return std::stod(text(key)); }
  bool flag(const std::string& key) const { return text(key) == "true"; }
  std::vector<double> reals(const std::string& key) const { return detail::parse_real_list(text(key)); }

  // Sorted, complete key = value listing that parses back to the same config.
  void write_resolved(std::ostream& os) const {
    for (const auto& [k, v] : values_) os << k << " = " << v << '\n';
  }

  ModelSpec model_spec(std::size_t num_classes = 0, const Shape& input = {}) const {
    ModelSpec s;
    s.input = input;
    if (!text("model.input").empty()) s.input = parse_shape(text("model.input"));
    if (s.input.size() != 3) throw ConfigError("model.input must be set (CxHxW) or come from data", 0);
    s.num_classes = integer("model.classes") ? integer("model.classes") : num_classes;
    if (s.num_classes < 2) throw ConfigError("model.classes must be at least 2", 0);
    s.encoder.T = integer("encoder.T");
    s.encoder.mode = parse_encode_mode(text("encoder.mode"));
    s.encoder.channels = integer("encoder.channels");
    s.encoder.kernel = integer("encoder.kernel");
    s.encoder.stride = integer("encoder.stride");
    s.encoder.pad = integer("encoder.pad");
    s.lif = lif_config("lif", nullptr);
    s.output_lif = lif_config("output_lif", &s.lif);
    if (!text("model.layers").empty()) {
      s.layers = parse_layers(text("model.layers"));
    } else {
      PresetOptions po;
      po.hidden = integer("model.hidden");
      po.width1 = integer("model.width1");
      po.width2 = integer("model.width2");
      s.layers = preset_layers(text("model.preset"), s.num_classes, po);
    }
    return s;
  }

  TrainConfig train_config() const {
    TrainConfig t;
    t.lr0 = real("train.lr");
    t.weight_decay = real("train.weight_decay");
    t.epochs = integer("train.epochs");
    t.batch_size = integer("train.batch_size");
    t.eval_batch_size = integer("train.eval_batch_size");
    t.seed = integer("train.seed");
    t.clip_norm = real("train.clip_norm");
    t.loss = parse_loss_kind(text("loss.kind"));
    t.tad.temperature = real("loss.temperature");
    t.tad.detach_weights = flag("loss.detach_weights");
    t.decode = parse_decode_mode(text("decode.mode"));
    t.tiebreak = parse_tiebreak(text("decode.tiebreak"));
    return t;
  }

  EvalOptions eval_options() const {
    EvalOptions o;
    o.batch_size = integer("train.eval_batch_size");
    o.decode = parse_decode_mode(text("decode.mode"));
    o.tiebreak = parse_tiebreak(text("decode.tiebreak"));
    return o;
  }

  CorruptionParams corruption_params() const {
    CorruptionParams p;
    auto fill = [this](std::array<double, 5>& a, const std::string& key) {
      const auto v = reals(key);
      std::copy(v.begin(), v.end(), a.begin());
    };
    fill(p.gaussian_sigma, "corrupt.gaussian_sigma");
    fill(p.shot_photons, "corrupt.shot_photons");
    fill(p.brightness_shift, "corrupt.brightness_shift");
    fill(p.contrast_factor, "corrupt.contrast_factor");
    fill(p.pixelate_block, "corrupt.pixelate_block");
    return p;
  }

  EnergyModel energy_model() const { return {real("analysis.e_mac"), real("analysis.e_ac")}; }

  std::optional<Baseline> baseline() const {
    const double t = real("analysis.baseline_timesteps"), s = real("analysis.baseline_spikes");
    if (t > 0.0 && s > 0.0) return Baseline{t, s};
    return std::nullopt;
  }

  // Train and test splits as configured.
  std::pair<Dataset, Dataset> datasets() const {
    Dataset train, test;
    const std::string src = text("data.source");
    if (src == "blobs") {
      BlobsConfig b;
      const std::size_t ntr = integer("data.blobs.train_per_class");
      b.n_per_class = ntr + integer("data.blobs.test_per_class");
      b.classes = integer("data.blobs.classes");
      b.height = integer("data.blobs.height");
      b.width = integer("data.blobs.width");
      b.seed = integer("data.blobs.seed");
      b.spread = real("data.blobs.spread");
      // Class-interleaved, so the first ntr*C samples hold ntr of each class.
      std::tie(train, test) = split_at(synth_blobs(b), ntr * b.classes);
    } else if (src == "idx") {
      for (const char* k : {"data.train_images", "data.train_labels", "data.test_images", "data.test_labels"})
        if (text(k).empty()) throw ConfigError(std::string(k) + " must be set when data.source = idx", 0);
      train = load_idx(text("data.train_images"), text("data.train_labels"));
      test = load_idx(text("data.test_images"), text("data.test_labels"));
    } else {
      throw ConfigError("unknown data.source '" + src + "' (expected blobs|idx)", 0);
    }
    train.split = "train";
    test.split = "test";
    if (const std::size_t n = integer("data.train_limit"); n && n < train.size())
      train = split_at(train, n).first;
    if (const std::size_t n = integer("data.test_limit"); n && n < test.size()) test = split_at(test, n).first;
    test.num_classes = train.num_classes = std::max(train.num_classes, test.num_classes);
    if (const double f = real("data.label_noise"); f > 0.0)
      train = with_label_noise(std::move(train), f, integer("data.label_noise_seed"));
    return {std::move(train), std::move(test)};
  }

 private:
  static const KeyDef* find(const std::string& key) {
    for (const auto& k : config_keys())
      if (key == k.key) return &k;
    return nullptr;
  }

  LifConfig lif_config(const std::string& prefix, const LifConfig* inherit) const {
    LifConfig c = inherit ? *inherit : LifConfig{};
    auto get = [&](const char* field) { return text(prefix + "." + field); };
    if (!get("tau_leak").empty()) c.tau_leak = std::stod(get("tau_leak"));
    if (!get("v_th").empty()) c.v_th = std::stod(get("v_th"));
    if (!get("surrogate_width").empty()) c.surrogate_width = std::stod(get("surrogate_width"));
    if (!get("detach_reset").empty()) c.detach_reset = get("detach_reset") == "true";
    c.validate();
    return c;
  }

  std::map<std::string, std::string> values_;
};

}  // namespace spikelat
