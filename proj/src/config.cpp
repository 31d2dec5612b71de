#include "capi/config.hpp"

#include <charconv>
#include <fstream>
#include <functional>
#include <map>
#include <set>
#include <sstream>

#include "capi/error.hpp"

namespace capi {

namespace {

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

std::string format_double(double v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

double parse_double(const std::string& key, const std::string& v) {
  try {
    std::size_t used = 0;
    const double d = std::stod(v, &used);
    if (used != v.size()) throw std::invalid_argument(v);
    return d;
  } catch (const std::exception&) {
    throw SpecError("config key '" + key + "': expected a number, got '" + v + "'");
  }
}

std::int64_t parse_int(const std::string& key, const std::string& v) {
  std::int64_t out = 0;
  const auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || ptr != v.data() + v.size()) {
    throw SpecError("config key '" + key + "': expected an integer, got '" + v + "'");
  }
  return out;
}

bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw SpecError("config key '" + key + "': expected true/false, got '" + v + "'");
}

template <typename T, typename F>
std::vector<T> parse_list(const std::string& v, F&& parse_one) {
  std::vector<T> out;
  std::string item;
  std::istringstream is(v);
  while (std::getline(is, item, ',')) {
    const std::string t = trim(item);
    if (!t.empty()) out.push_back(parse_one(t));
  }
  return out;
}

template <typename T>
std::string join(const std::vector<T>& values) {
  std::string out;
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (i > 0) out += ",";
    if constexpr (std::is_floating_point_v<T>) {
      out += format_double(values[i]);
    } else {
      out += std::to_string(values[i]);
    }
  }
  return out;
}

std::string_view sk_mode_name(SinkhornMode m) {
  return m == SinkhornMode::positionwise ? "positionwise" : "standard";
}

SinkhornMode parse_sk_mode(const std::string& v) {
  if (v == "positionwise") return SinkhornMode::positionwise;
  if (v == "standard") return SinkhornMode::standard;
  throw SpecError("config key 'sk_mode': expected positionwise or standard, got '" + v + "'");
}

// One accessor pair per key; the table order is the serialization order.
struct Field {
  std::string key;
  bool pretrain;
  std::function<std::string(const RunConfig&)> get;
  std::function<void(RunConfig&, const std::string&)> set;
};

#define CAPI_DOUBLE(KEY, PRE, MEMBER)                                                   \
  Field{KEY, PRE, [](const RunConfig& c) { return format_double(c.MEMBER); },           \
        [](RunConfig& c, const std::string& v) { c.MEMBER = parse_double(KEY, v); }}
#define CAPI_INT(KEY, PRE, MEMBER)                                                      \
  Field{KEY, PRE, [](const RunConfig& c) { return std::to_string(c.MEMBER); },          \
        [](RunConfig& c, const std::string& v) {                                        \
          c.MEMBER = static_cast<decltype(c.MEMBER)>(parse_int(KEY, v));                 \
        }}

const std::vector<Field>& fields() {
  static const std::vector<Field> table = {
      // network
      CAPI_INT("patch_size", true, pretrain.network.patch_size),
      CAPI_INT("enc_depth", true, pretrain.network.enc_depth),
      CAPI_INT("enc_dim", true, pretrain.network.enc_dim),
      CAPI_INT("enc_heads", true, pretrain.network.enc_heads),
      CAPI_INT("pred_depth", true, pretrain.network.pred_depth),
      CAPI_INT("pred_dim", true, pretrain.network.pred_dim),
      CAPI_INT("pred_heads", true, pretrain.network.pred_heads),
      CAPI_INT("n_registers", true, pretrain.network.n_reg),
      CAPI_DOUBLE("mlp_ratio", true, pretrain.network.mlp_ratio),
      CAPI_DOUBLE("stochastic_depth", true, pretrain.network.stochastic_depth),
      CAPI_DOUBLE("rope_freq_min", true, pretrain.network.rope_freq_min),
      CAPI_DOUBLE("rope_freq_max", true, pretrain.network.rope_freq_max),
      CAPI_DOUBLE("norm_eps", true, pretrain.network.norm_eps),
      // objective
      CAPI_INT("num_prototypes", true, pretrain.objective.prototypes),
      CAPI_DOUBLE("student_temperature", true, pretrain.objective.tau_student),
      CAPI_DOUBLE("teacher_temperature", true, pretrain.objective.tau_teacher),
      CAPI_INT("num_sk_iter", true, pretrain.objective.sk_iters),
      Field{"sk_mode", true,
            [](const RunConfig& c) { return std::string(sk_mode_name(c.pretrain.objective.sk_mode)); },
            [](RunConfig& c, const std::string& v) { c.pretrain.objective.sk_mode = parse_sk_mode(v); }},
      // optimization
      CAPI_INT("batch_size", true, pretrain.train.batch_size),
      CAPI_INT("image_size", true, pretrain.train.image_size),
      CAPI_DOUBLE("learning_rate", true, pretrain.schedule.peak_lr),
      CAPI_DOUBLE("final_lr", true, pretrain.schedule.final_lr_floor),
      CAPI_INT("total_steps", true, pretrain.schedule.total_steps),
      CAPI_DOUBLE("warmup_length", true, pretrain.schedule.warmup_fraction),
      CAPI_DOUBLE("cosine_truncation", true, pretrain.schedule.cosine_truncation),
      CAPI_DOUBLE("weight_decay", true, pretrain.train.adamw.weight_decay),
      CAPI_DOUBLE("adamw_beta1", true, pretrain.train.adamw.beta1),
      CAPI_DOUBLE("adamw_beta2", true, pretrain.train.adamw.beta2),
      CAPI_DOUBLE("adamw_eps", true, pretrain.train.adamw.eps),
      CAPI_DOUBLE("clustering_lr_ratio", true, pretrain.train.clustering_lr_ratio),
      CAPI_DOUBLE("clustering_weight_decay", true, pretrain.train.clustering_weight_decay),
      CAPI_DOUBLE("patch_embed_lr_ratio", true, pretrain.train.patch_embed_lr_ratio),
      CAPI_DOUBLE("norm_layer_wd_ratio", true, pretrain.train.norm_wd_ratio),
      // masking and augmentation
      Field{"masking_type", true,
            [](const RunConfig& c) { return std::string(to_string(c.pretrain.train.mask.strategy)); },
            [](RunConfig& c, const std::string& v) { c.pretrain.train.mask.strategy = parse_mask_strategy(v); }},
      CAPI_DOUBLE("masking_ratio", true, pretrain.train.mask.ratio),
      CAPI_INT("pred_per_image", true, pretrain.train.n_pred),
      CAPI_DOUBLE("crop_scale_min", true, pretrain.train.crop_scale_min),
      CAPI_DOUBLE("crop_scale_max", true, pretrain.train.crop_scale_max),
      Field{"hflip", true, [](const RunConfig& c) { return std::string(c.pretrain.train.hflip ? "true" : "false"); },
            [](RunConfig& c, const std::string& v) { c.pretrain.train.hflip = parse_bool("hflip", v); }},
      CAPI_INT("checkpoint_every", true, pretrain.train.checkpoint_every),
      CAPI_INT("position_mi_window", true, pretrain.train.mi_window),
      Field{"seed", true, [](const RunConfig& c) { return std::to_string(c.pretrain.seed); },
            [](RunConfig& c, const std::string& v) {
              c.pretrain.seed = static_cast<std::uint64_t>(parse_int("seed", v));
            }},
      // probes
      CAPI_DOUBLE("probe_val_fraction", false, probe.val_fraction),
      Field{"probe_knn_k", false, [](const RunConfig& c) { return join(c.probe.knn_k); },
            [](RunConfig& c, const std::string& v) {
              c.probe.knn_k = parse_list<int>(v, [](const std::string& s) {
                return static_cast<int>(parse_int("probe_knn_k", s));
              });
            }},
      CAPI_DOUBLE("probe_logreg_c_min", false, probe.logreg_c_min),
      CAPI_DOUBLE("probe_logreg_c_max", false, probe.logreg_c_max),
      CAPI_INT("probe_logreg_c_count", false, probe.logreg_c_count),
      CAPI_INT("probe_logreg_max_iter", false, probe.logreg_max_iter),
      Field{"probe_attn_lrs", false, [](const RunConfig& c) { return join(c.probe.attn_lrs); },
            [](RunConfig& c, const std::string& v) {
              c.probe.attn_lrs = parse_list<double>(v, [](const std::string& s) { return parse_double("probe_attn_lrs", s); });
            }},
      Field{"probe_attn_wds", false, [](const RunConfig& c) { return join(c.probe.attn_wds); },
            [](RunConfig& c, const std::string& v) {
              c.probe.attn_wds = parse_list<double>(v, [](const std::string& s) { return parse_double("probe_attn_wds", s); });
            }},
      CAPI_INT("probe_attn_epochs", false, probe.attn_epochs),
      CAPI_INT("probe_attn_batch_size", false, probe.attn_batch_size),
      CAPI_INT("probe_attn_head_width", false, probe.attn_head_width),
  };
  return table;
}

#undef CAPI_DOUBLE
#undef CAPI_INT

std::string serialize_fields(const RunConfig& c, bool pretrain_only) {
  std::string out;
  for (const Field& f : fields()) {
    if (pretrain_only && !f.pretrain) continue;
    out += f.key + " = " + f.get(c) + "\n";
  }
  return out;
}

}  // namespace

const std::vector<std::string>& config_keys() {
  static const std::vector<std::string> keys = [] {
    std::vector<std::string> k;
    for (const Field& f : fields()) k.push_back(f.key);
    return k;
  }();
  return keys;
}

RunConfig parse_run_config(std::string_view text) {
  std::map<std::string, const Field*> by_key;
  for (const Field& f : fields()) by_key[f.key] = &f;

  RunConfig c;
  std::set<std::string> seen;
  std::istringstream is{std::string(text)};
  std::string line;
  int line_no = 0;
  while (std::getline(is, line)) {
    ++line_no;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
    const std::string t = trim(line);
    if (t.empty()) continue;
    const auto eq = t.find('=');
    if (eq == std::string::npos) throw SpecError("config line " + std::to_string(line_no) + ": expected key = value");
    const std::string key = trim(std::string_view(t).substr(0, eq));
    const std::string value = trim(std::string_view(t).substr(eq + 1));
    const auto it = by_key.find(key);
    if (it == by_key.end()) throw SpecError("config line " + std::to_string(line_no) + ": unknown key '" + key + "'");
    if (!seen.insert(key).second) throw SpecError("config line " + std::to_string(line_no) + ": duplicate key '" + key + "'");
    it->second->set(c, value);
  }
  if (seen.contains("masking_type") && !seen.contains("masking_ratio")) {
    c.pretrain.train.mask.ratio = default_mask_ratio(c.pretrain.train.mask.strategy);
  }
  c.pretrain.validate();
  return c;
}

RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot open config '" + path.string() + "'");
  std::ostringstream ss;
  ss << is.rdbuf();
  return parse_run_config(ss.str());
}

std::string serialize_run_config(const RunConfig& config) { return serialize_fields(config, false); }

std::string serialize_pretrain_config(const PretrainConfig& config) {
  RunConfig c;
  c.pretrain = config;
  return serialize_fields(c, true);
}

RunConfig recipe_run_config() {
  RunConfig c;
  NetworkConfig& n = c.pretrain.network;
  n.patch_size = 14;
  n.enc_depth = 24;
  n.enc_dim = 1024;
  n.enc_heads = 16;
  n.n_reg = 16;
  n = NetworkConfig::with_aligned_predictor(n);
  n.pred_depth = 12;
  c.pretrain.objective = ObjectiveConfig{};
  c.pretrain.train.batch_size = 16384;
  c.pretrain.train.image_size = 224;
  c.pretrain.schedule.total_steps = 500000;
  return c;
}

RunConfig toy_run_config() {
  RunConfig c;
  NetworkConfig& n = c.pretrain.network;
  n.patch_size = 8;
  n.enc_depth = 4;
  n.enc_dim = 64;
  n.enc_heads = 4;
  n.n_reg = 4;
  n = NetworkConfig::with_aligned_predictor(n);
  c.pretrain.objective.prototypes = 64;
  c.pretrain.train.batch_size = 64;
  c.pretrain.train.image_size = 32;
  c.pretrain.train.n_pred = 7;
  c.pretrain.train.checkpoint_every = 1000;
  c.pretrain.schedule.total_steps = 2000;
  c.pretrain.seed = 0;
  c.probe.attn_lrs = {1e-3, 3e-3};
  c.probe.attn_wds = {5e-4, 5e-2};
  c.probe.attn_head_width = 64;
  return c;
}

}  // namespace capi
