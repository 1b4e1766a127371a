#include "magic/config.hpp"

#include <openssl/evp.h>

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <functional>
#include <sstream>

namespace magic {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::string item;
  std::istringstream in(s);
  while (std::getline(in, item, ',')) {
    item = trim(item);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

template <typename T>
T parse_number(const std::string& key, const std::string& text) {
  std::istringstream in(text);
  T v{};
  in >> v;
  if (in.fail() || !in.eof()) throw ConfigError("'" + key + "': cannot parse '" + text + "' as a number");
  return v;
}

bool parse_bool(const std::string& key, const std::string& text) {
  if (text == "true" || text == "1" || text == "yes") return true;
  if (text == "false" || text == "0" || text == "no") return false;
  throw ConfigError("'" + key + "': expected true or false, got '" + text + "'");
}

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

template <typename T>
std::string join(const std::vector<T>& v) {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (i) out += ",";
    if constexpr (std::is_same_v<T, std::string>) {
      out += v[i];
    } else if constexpr (std::is_floating_point_v<T>) {
      out += fmt(v[i]);
    } else {
      out += std::to_string(v[i]);
    }
  }
  return out;
}

struct Field {
  std::function<void(RunConfig&, const std::string& key, const std::string& value)> set;
  std::function<std::string(const RunConfig&)> get;
};

template <typename T>
Field number(T RunConfig::*member) {
  return {[member](RunConfig& c, const std::string& k, const std::string& v) { c.*member = parse_number<T>(k, v); },
          [member](const RunConfig& c) {
            if constexpr (std::is_floating_point_v<T>) {
              return fmt(c.*member);
            } else {
              return std::to_string(c.*member);
            }
          }};
}

Field text(std::string RunConfig::*member) {
  return {[member](RunConfig& c, const std::string&, const std::string& v) { c.*member = v; },
          [member](const RunConfig& c) { return c.*member; }};
}

template <typename T>
Field list(std::vector<T> RunConfig::*member) {
  return {[member](RunConfig& c, const std::string& k, const std::string& v) {
            std::vector<T> out;
            for (const auto& item : split_list(v)) {
              if constexpr (std::is_same_v<T, std::string>) {
                out.push_back(item);
              } else {
                out.push_back(parse_number<T>(k, item));
              }
            }
            c.*member = std::move(out);
          },
          [member](const RunConfig& c) { return join(c.*member); }};
}

const std::map<std::string, Field>& fields() {
  static const std::map<std::string, Field> table = [] {
    std::map<std::string, Field> f;
    f["method"] = {[](RunConfig& c, const std::string&, const std::string& v) {
                     try {
                       c.decode.method = parse_method(v);
                     } catch (const ContractViolation& e) {
                       throw ConfigError(e.what());
                     }
                   },
                   [](const RunConfig& c) { return std::string(to_string(c.decode.method)); }};
    f["k"] = {[](RunConfig& c, const std::string& k, const std::string& v) { c.decode.params.k = parse_number<int>(k, v); },
              [](const RunConfig& c) { return std::to_string(c.decode.params.k); }};
    f["alpha"] = {[](RunConfig& c, const std::string& k, const std::string& v) {
                    c.decode.params.alpha = parse_number<double>(k, v);
                  },
                  [](const RunConfig& c) { return fmt(c.decode.params.alpha); }};
    f["beta"] = {[](RunConfig& c, const std::string& k, const std::string& v) {
                   c.decode.params.beta = parse_number<double>(k, v);
                 },
                 [](const RunConfig& c) { return fmt(c.decode.params.beta); }};
    f["max_len"] = {[](RunConfig& c, const std::string& k, const std::string& v) {
                      c.decode.params.max_len = parse_number<int>(k, v);
                    },
                    [](const RunConfig& c) { return std::to_string(c.decode.params.max_len); }};
    f["beam_width"] = {[](RunConfig& c, const std::string& k, const std::string& v) {
                         c.decode.beam_width = parse_number<int>(k, v);
                       },
                       [](const RunConfig& c) { return std::to_string(c.decode.beam_width); }};
    f["top_k"] = {[](RunConfig& c, const std::string& k, const std::string& v) { c.decode.top_k = parse_number<int>(k, v); },
                  [](const RunConfig& c) { return std::to_string(c.decode.top_k); }};
    f["top_p"] = {[](RunConfig& c, const std::string& k, const std::string& v) {
                    c.decode.top_p = parse_number<double>(k, v);
                  },
                  [](const RunConfig& c) { return fmt(c.decode.top_p); }};
    f["typical_tau"] = {[](RunConfig& c, const std::string& k, const std::string& v) {
                          c.decode.typical_tau = parse_number<double>(k, v);
                        },
                        [](const RunConfig& c) { return fmt(c.decode.typical_tau); }};
    f["seed"] = {[](RunConfig& c, const std::string& k, const std::string& v) {
                   c.decode.seed = parse_number<std::uint64_t>(k, v);
                 },
                 [](const RunConfig& c) { return std::to_string(c.decode.seed); }};
    f["dump_candidates"] = {[](RunConfig& c, const std::string& k, const std::string& v) {
                              c.decode.dump_candidates = parse_bool(k, v);
                            },
                            [](const RunConfig& c) { return std::string(c.decode.dump_candidates ? "true" : "false"); }};

    f["world_seed"] = number(&RunConfig::world_seed);
    f["n_concepts"] = number(&RunConfig::n_concepts);
    f["n_images"] = number(&RunConfig::n_images);
    f["captions_per_image"] = number(&RunConfig::captions_per_image);
    f["min_caption_concepts"] = number(&RunConfig::min_caption_concepts);
    f["max_caption_concepts"] = number(&RunConfig::max_caption_concepts);
    f["min_bag_size"] = number(&RunConfig::min_bag_size);
    f["max_bag_size"] = number(&RunConfig::max_bag_size);
    f["held_out_every"] = number(&RunConfig::held_out_every);
    f["scorer_temperature"] = number(&RunConfig::scorer_temperature);

    f["hidden_dim"] = number(&RunConfig::hidden_dim);
    f["n_layers"] = number(&RunConfig::n_layers);
    f["n_heads"] = number(&RunConfig::n_heads);
    f["context_len"] = number(&RunConfig::context_len);
    f["rho"] = number(&RunConfig::rho);
    f["learning_rate"] = number(&RunConfig::learning_rate);
    f["epochs"] = number(&RunConfig::epochs);
    f["batch_size"] = number(&RunConfig::batch_size);
    f["train_seed"] = number(&RunConfig::train_seed);

    f["world"] = text(&RunConfig::world_path);
    f["checkpoint"] = text(&RunConfig::checkpoint_path);
    f["index"] = text(&RunConfig::index_path);
    f["results"] = text(&RunConfig::results_path);
    f["titles"] = text(&RunConfig::titles_path);
    f["out"] = text(&RunConfig::out);
    f["image_paths"] = list(&RunConfig::image_paths);

    f["max_images"] = number(&RunConfig::max_images);
    f["prompt_tokens"] = number(&RunConfig::prompt_tokens);
    f["retrieval"] = {[](RunConfig& c, const std::string& k, const std::string& v) { c.retrieval = parse_bool(k, v); },
                      [](const RunConfig& c) { return std::string(c.retrieval ? "true" : "false"); }};
    f["title_words"] = number(&RunConfig::title_words);
    f["k_grid"] = list(&RunConfig::k_grid);
    f["alpha_grid"] = list(&RunConfig::alpha_grid);
    f["beta_grid"] = list(&RunConfig::beta_grid);
    f["bench_methods"] = list(&RunConfig::bench_methods);
    f["bench_baseline"] = text(&RunConfig::bench_baseline);
    f["bench_warmup"] = number(&RunConfig::bench_warmup);
    f["bench_images"] = number(&RunConfig::bench_images);
    return f;
  }();
  return table;
}

}  // namespace

std::map<std::string, std::string> parse_key_values(const std::string& text) {
  std::map<std::string, std::string> out;
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ConfigError("line " + std::to_string(lineno) + ": expected 'key = value'");
    }
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    if (key.empty()) throw ConfigError("line " + std::to_string(lineno) + ": empty key");
    if (!out.emplace(key, value).second) {
      throw ConfigError("line " + std::to_string(lineno) + ": duplicate key '" + key + "'");
    }
  }
  return out;
}

const std::vector<Preset>& presets() {
  static const std::vector<Preset> all = {
      {"coco-like", 45, 0.1, 2.0},
      {"flickr-like", 25, 0.1, 2.0},
      {"story", 5, 0.6, 0.15},
  };
  return all;
}

const Preset& find_preset(const std::string& name) {
  for (const auto& p : presets()) {
    if (p.name == name) return p;
  }
  throw ConfigError("unknown preset '" + name + "' (expected coco-like, flickr-like or story)");
}

std::string RunConfig::canonical_text() const {
  std::string out = "task = " + task + "\npreset = " + preset + "\n";
  for (const auto& [key, field] : fields()) {
    if (key == "out") continue;  // where results go does not change them
    out += key + " = " + field.get(*this) + "\n";
  }
  return out;
}

std::string RunConfig::hash() const { return sha256_hex(canonical_text()); }

void RunConfig::validate() const {
  try {
    decode.params.validate();
  } catch (const ContractViolation& e) {
    throw ConfigError(e.what());
  }
  if (decode.beam_width < 1) throw ConfigError("beam_width must be >= 1");
  if (decode.top_k < 1) throw ConfigError("top_k must be >= 1");
  if (!(decode.top_p > 0.0 && decode.top_p <= 1.0)) throw ConfigError("top_p must lie in (0, 1]");
  if (!(decode.typical_tau > 0.0 && decode.typical_tau <= 1.0)) throw ConfigError("typical_tau must lie in (0, 1]");
  if (held_out_every < 2) throw ConfigError("held_out_every must be >= 2");
  if (!(scorer_temperature > 0.0)) throw ConfigError("scorer_temperature must be positive");
  if (title_words < 1) throw ConfigError("title_words must be >= 1");
  if (max_images < 0 || prompt_tokens < 0) throw ConfigError("max_images and prompt_tokens must be >= 0");
  if (bench_warmup < 0 || bench_images < 1) throw ConfigError("bench_warmup >= 0 and bench_images >= 1 required");
  for (int k : k_grid) {
    if (k < 1) throw ConfigError("k_grid entries must be >= 1");
  }
  for (double a : alpha_grid) {
    if (!(a >= 0.0 && a <= 1.0)) throw ConfigError("alpha_grid entries must lie in [0, 1]");
  }
  for (double b : beta_grid) {
    if (!(b >= 0.0)) throw ConfigError("beta_grid entries must be >= 0");
  }
  for (const auto& m : bench_methods) {
    try {
      parse_method(m);
    } catch (const ContractViolation& e) {
      throw ConfigError(e.what());
    }
  }
  if (std::find(bench_methods.begin(), bench_methods.end(), bench_baseline) == bench_methods.end()) {
    throw ConfigError("bench_baseline '" + bench_baseline + "' is not among bench_methods");
  }
}

RunConfig resolve_config(const std::string& task, const std::map<std::string, std::string>& values,
                         const Overrides& overrides) {
  RunConfig c;
  c.task = task;
  if (auto it = values.find("preset"); it != values.end()) {
    const auto& p = find_preset(it->second);
    c.preset = p.name;
    c.decode.params.k = p.k;
    c.decode.params.alpha = p.alpha;
    c.decode.params.beta = p.beta;
  }
  for (const auto& [key, value] : values) {
    if (key == "preset") continue;
    auto it = fields().find(key);
    if (it == fields().end()) throw ConfigError("unknown config key '" + key + "'");
    it->second.set(c, key, value);
  }
  if (overrides.seed) c.decode.seed = *overrides.seed;
  if (overrides.method) fields().at("method").set(c, "method", *overrides.method);
  if (overrides.k) c.decode.params.k = *overrides.k;
  if (overrides.alpha) c.decode.params.alpha = *overrides.alpha;
  if (overrides.beta) c.decode.params.beta = *overrides.beta;
  if (overrides.out) c.out = *overrides.out;
  c.validate();
  return c;
}

RunConfig load_config(const std::string& task, const std::string& path, const Overrides& overrides) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw NotFoundError("cannot open config file: " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return resolve_config(task, parse_key_values(ss.str()), overrides);
}

std::string sha256_hex(const std::string& bytes) {
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(bytes.data(), bytes.size(), digest, &len, EVP_sha256(), nullptr) != 1) {
    throw Error("SHA-256 computation failed");
  }
  static const char* hex = "0123456789abcdef";
  std::string out;
  for (unsigned int i = 0; i < len; ++i) {
    out.push_back(hex[digest[i] >> 4]);
    out.push_back(hex[digest[i] & 0xF]);
  }
  return out;
}

}  // namespace magic
