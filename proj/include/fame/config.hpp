#pragma once

// Run configuration: flat "key = value" text with '#' comments.

#include <charconv>
#include <cstdio>
#include <cstdint>
#include <functional>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "fame/errors.hpp"
#include "fame/losses.hpp"
#include "fame/model.hpp"

namespace fame {

struct TrainConfig {
  std::size_t epochs = 1000;
  double lr = 5e-4;
  std::size_t batch_size = 4;
  std::uint64_t seed = 0;
  LossWeights loss;
  std::size_t checkpoint_every = 0;  // epochs; 0 = only the final checkpoint
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  double grad_clip = 0.0;  // global L2 norm; 0 = off

  void validate() const {
    if (epochs == 0) throw ConfigError("epochs must be positive");
    if (!(lr > 0.0)) throw ConfigError("lr must be positive");
    if (batch_size == 0) throw ConfigError("batch_size must be >= 1");
    if (!(adam_beta1 >= 0.0 && adam_beta1 < 1.0) || !(adam_beta2 >= 0.0 && adam_beta2 < 1.0)) {
      throw ConfigError("adam betas must be in [0, 1)");
    }
    if (!(adam_eps > 0.0)) throw ConfigError("adam_eps must be positive");
    if (!(grad_clip >= 0.0)) throw ConfigError("grad_clip must be >= 0");
    loss.validate();
  }
};

struct RunConfig {
  NetworkConfig network;
  TrainConfig train;

  void validate() const {
    network.validate();
    train.validate();
    if (train.loss.total_epochs != train.epochs) {
      throw ConfigError("loss total_epochs must equal epochs");
    }
  }
};

/// Shortest round-trip decimal form.
inline std::string format_number(double v) {
  char buf[32];
  auto [end, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, end);
}

namespace detail {

struct ConfigKey {
  std::string name;
  std::function<std::string(const RunConfig&)> get;
  std::function<void(RunConfig&, const std::string&)> set;
};

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  return s.substr(b, s.find_last_not_of(" \t\r") - b + 1);
}

template <class V>
V parse_number(const std::string& key, const std::string& text) {
  V v{};
  auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), v);
  if (ec != std::errc{} || ptr != text.data() + text.size()) {
    throw ConfigError("invalid value '" + text + "' for key '" + key + "'");
  }
  return v;
}

inline bool parse_bool(const std::string& key, const std::string& text) {
  if (text == "true" || text == "1") return true;
  if (text == "false" || text == "0") return false;
  throw ConfigError("invalid value '" + text + "' for key '" + key + "' (expected true or false)");
}

template <class M>
ConfigKey size_key(std::string name, M member) {
  return {name, [member](const RunConfig& c) { return std::to_string(member(const_cast<RunConfig&>(c))); },
          [member, name](RunConfig& c, const std::string& v) { member(c) = parse_number<std::size_t>(name, v); }};
}
template <class M>
ConfigKey u64_key(std::string name, M member) {
  return {name, [member](const RunConfig& c) { return std::to_string(member(const_cast<RunConfig&>(c))); },
          [member, name](RunConfig& c, const std::string& v) { member(c) = parse_number<std::uint64_t>(name, v); }};
}
template <class M>
ConfigKey real_key(std::string name, M member) {
  return {name, [member](const RunConfig& c) { return format_number(member(const_cast<RunConfig&>(c))); },
          [member, name](RunConfig& c, const std::string& v) { member(c) = parse_number<double>(name, v); }};
}
template <class M>
ConfigKey bool_key(std::string name, M member) {
  return {name, [member](const RunConfig& c) { return member(const_cast<RunConfig&>(c)) ? "true" : "false"; },
          [member, name](RunConfig& c, const std::string& v) { member(c) = parse_bool(name, v); }};
}

inline const std::vector<ConfigKey>& config_keys() {
  static const std::vector<ConfigKey> keys = {
      size_key("num_experts", [](RunConfig& c) -> auto& { return c.network.num_experts; }),
      size_key("top_k", [](RunConfig& c) -> auto& { return c.network.top_k; }),
      size_key("base_channels", [](RunConfig& c) -> auto& { return c.network.base_channels; }),
      size_key("num_resblocks", [](RunConfig& c) -> auto& { return c.network.num_resblocks; }),
      real_key("gumbel_tau", [](RunConfig& c) -> auto& { return c.network.gumbel_tau; }),
      size_key("ms_bands", [](RunConfig& c) -> auto& { return c.network.ms_bands; }),
      size_key("upsample_factor", [](RunConfig& c) -> auto& { return c.network.upsample_factor; }),
      bool_key("ablation_disable_mask", [](RunConfig& c) -> auto& { return c.network.ablation_disable_mask; }),
      bool_key("ablation_replace_mixture", [](RunConfig& c) -> auto& { return c.network.ablation_replace_mixture; }),
      bool_key("eval_mode_noise_off", [](RunConfig& c) -> auto& { return c.network.eval_mode_noise_off; }),
      bool_key("zero_init_output", [](RunConfig& c) -> auto& { return c.network.zero_init_output; }),
      bool_key("detach_gate_input", [](RunConfig& c) -> auto& { return c.network.detach_gate_input; }),
      size_key("epochs", [](RunConfig& c) -> auto& { return c.train.epochs; }),
      real_key("lr", [](RunConfig& c) -> auto& { return c.train.lr; }),
      size_key("batch_size", [](RunConfig& c) -> auto& { return c.train.batch_size; }),
      u64_key("seed", [](RunConfig& c) -> auto& { return c.train.seed; }),
      real_key("alpha_initial", [](RunConfig& c) -> auto& { return c.train.loss.alpha_initial; }),
      real_key("beta", [](RunConfig& c) -> auto& { return c.train.loss.beta; }),
      real_key("anneal_cutoff_fraction", [](RunConfig& c) -> auto& { return c.train.loss.anneal_cutoff_fraction; }),
      size_key("checkpoint_every", [](RunConfig& c) -> auto& { return c.train.checkpoint_every; }),
      real_key("adam_beta1", [](RunConfig& c) -> auto& { return c.train.adam_beta1; }),
      real_key("adam_beta2", [](RunConfig& c) -> auto& { return c.train.adam_beta2; }),
      real_key("adam_eps", [](RunConfig& c) -> auto& { return c.train.adam_eps; }),
      real_key("grad_clip", [](RunConfig& c) -> auto& { return c.train.grad_clip; }),
  };
  return keys;
}

}  // namespace detail

inline std::string accepted_config_keys() {
  std::string out;
  for (const auto& k : detail::config_keys()) out += (out.empty() ? "" : ", ") + k.name;
  return out;
}

/// Applies one key; unknown keys throw ConfigError listing the accepted keys.
inline void set_config_value(RunConfig& cfg, const std::string& key, const std::string& value) {
  for (const auto& k : detail::config_keys())
    if (k.name == key) {
      k.set(cfg, value);
      if (key == "epochs") cfg.train.loss.total_epochs = cfg.train.epochs;
      return;
    }
  throw ConfigError("unknown config key '" + key + "'; accepted keys: " + accepted_config_keys());
}

inline RunConfig parse_config(const std::string& text, RunConfig base = {}) {
  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    line = detail::trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ConfigError("line " + std::to_string(lineno) + ": expected 'key = value', got '" + line + "'");
    }
    set_config_value(base, detail::trim(line.substr(0, eq)), detail::trim(line.substr(eq + 1)));
  }
  base.train.loss.total_epochs = base.train.epochs;
  base.validate();
  return base;
}

/// Every key with its resolved value, one per line, in a fixed order.
inline std::string to_string(const RunConfig& cfg) {
  std::string out;
  for (const auto& k : detail::config_keys()) out += k.name + " = " + k.get(cfg) + "\n";
  return out;
}

inline constexpr const char* kInitScheme = "fan_in_uniform";

/// FNV-1a over the network keys and the initialization scheme; checkpoints are only loadable into
/// networks with the same fingerprint.
inline std::string fingerprint(const NetworkConfig& net) {
  RunConfig probe;
  probe.network = net;
  std::string text = std::string("init = ") + kInitScheme + "\n";
  for (const auto& k : detail::config_keys()) {
    if (k.name == "epochs") break;  // network keys come first
    if (k.name == "eval_mode_noise_off" || k.name == "detach_gate_input") continue;
    text += k.name + " = " + k.get(probe) + "\n";
  }
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char c : text) {
    h ^= c;
    h *= 1099511628211ull;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

}  // namespace fame
