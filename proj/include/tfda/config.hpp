#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "tfda/data.hpp"
#include "tfda/model.hpp"
#include "tfda/trainer.hpp"

namespace tfda {

// Everything the CLI subcommands can be configured with, one flat namespace.
struct RunConfig {
  // synthetic data
  int classes = 3;
  int channels = 2;
  int length = 128;
  int per_class = 200;
  int test_per_class = 100;
  double shift_freq = 0.0;
  double shift_amp_scale = 2.0;
  double shift_noise_sigma = 2.0;
  double shift_warp = 0.05;
  // architecture
  int filters1 = 64, filters2 = 128, filters3 = 128;
  int kernel = 8;
  int proj_dim = 128;
  double dropout = 0.5;
  // pretraining
  int pretrain_epochs = 30;
  double pretrain_lr = 1e-3;
  // adaptation
  int epochs = 40;
  int batch_size = 32;
  int bank_capacity = 0;
  int queue_capacity = 512;
  int history_epochs = 5;
  int neighbors = 10;
  int views = 4;
  double temperature = 0.07;
  double lr = 1e-6;
  double ema_alpha = 0.999;
  double alpha1 = 0.5;
  double alpha2 = 0.5;
  double weak_jitter_sigma = 0.05;
  double weak_scale_low = 0.9;
  double weak_scale_high = 1.1;
  double strong_jitter_sigma = 0.1;
  int strong_max_segments = 5;
  int freq_aug_count = 5;
  double freq_aug_scale = 0.1;
  double alpha_r = 0.005;
  double beta_decay = 1e-4;
  double mu_r_init = 1.0;
  double mu_c_init = 0.5;
  double mu_cons_init = 0.5;
  double mu_u_init = 0.5;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  int freq_branch = 1;
  // complexity benchmark
  std::string bench_grid = "256,1024";

  ShiftSpec shift() const { return {shift_freq, shift_amp_scale, shift_noise_sigma, shift_warp}; }

  Arch arch() const {
    Arch a;
    a.channels = channels;
    a.length = length;
    a.classes = classes;
    a.filters = {filters1, filters2, filters3};
    a.kernel = kernel;
    a.proj_dim = proj_dim;
    a.dropout_rate = dropout;
    return a;
  }

  PretrainConfig pretrain(std::uint64_t seed) const {
    PretrainConfig p;
    p.epochs = pretrain_epochs;
    p.batch_size = batch_size;
    p.lr = pretrain_lr;
    p.seed = seed;
    p.adam = {pretrain_lr, adam_beta1, adam_beta2, adam_eps};
    return p;
  }

  AdaptConfig adapt(std::uint64_t seed) const {
    AdaptConfig a;
    a.epochs = epochs;
    a.batch_size = batch_size;
    a.bank_capacity = bank_capacity;
    a.queue_capacity = queue_capacity;
    a.history_epochs = history_epochs;
    a.neighbors = neighbors;
    a.views = views;
    a.temperature = temperature;
    a.lr = lr;
    a.ema_alpha = ema_alpha;
    a.alpha1 = alpha1;
    a.alpha2 = alpha2;
    a.seed = seed;
    a.weak = {weak_jitter_sigma, weak_scale_low, weak_scale_high};
    a.strong = {strong_jitter_sigma, strong_max_segments};
    a.freq_aug_count = freq_aug_count;
    a.freq_aug_scale = freq_aug_scale;
    a.curriculum = {alpha_r, beta_decay};
    a.curriculum_init = {mu_r_init, mu_c_init, mu_cons_init, mu_u_init};
    a.adam = {lr, adam_beta1, adam_beta2, adam_eps};
    a.freq_branch_enabled = freq_branch != 0;
    return a;
  }
};

namespace configdetail {

inline int parse_int(const std::string& key, const std::string& val) {
  std::size_t pos = 0;
  int v;
  try {
    v = std::stoi(val, &pos);
  } catch (const std::exception&) {
    throw Error("config: key '" + key + "' needs an integer, got '" + val + "'");
  }
  if (pos != val.size()) throw Error("config: key '" + key + "' needs an integer, got '" + val + "'");
  return v;
}

inline double parse_double(const std::string& key, const std::string& val) {
  std::size_t pos = 0;
  double v;
  try {
    v = std::stod(val, &pos);
  } catch (const std::exception&) {
    throw Error("config: key '" + key + "' needs a number, got '" + val + "'");
  }
  if (pos != val.size()) throw Error("config: key '" + key + "' needs a number, got '" + val + "'");
  return v;
}

}  // namespace configdetail

inline void apply_config_entry(RunConfig& c, const std::string& key, const std::string& val) {
  using configdetail::parse_double;
  using configdetail::parse_int;
  if (key == "classes") c.classes = parse_int(key, val);
  else if (key == "channels") c.channels = parse_int(key, val);
  else if (key == "length") c.length = parse_int(key, val);
  else if (key == "per_class") c.per_class = parse_int(key, val);
  else if (key == "test_per_class") c.test_per_class = parse_int(key, val);
  else if (key == "shift_freq") c.shift_freq = parse_double(key, val);
  else if (key == "shift_amp_scale") c.shift_amp_scale = parse_double(key, val);
  else if (key == "shift_noise_sigma") c.shift_noise_sigma = parse_double(key, val);
  else if (key == "shift_warp") c.shift_warp = parse_double(key, val);
  else if (key == "filters1") c.filters1 = parse_int(key, val);
  else if (key == "filters2") c.filters2 = parse_int(key, val);
  else if (key == "filters3") c.filters3 = parse_int(key, val);
  else if (key == "kernel") c.kernel = parse_int(key, val);
  else if (key == "proj_dim") c.proj_dim = parse_int(key, val);
  else if (key == "dropout") c.dropout = parse_double(key, val);
  else if (key == "pretrain_epochs") c.pretrain_epochs = parse_int(key, val);
  else if (key == "pretrain_lr") c.pretrain_lr = parse_double(key, val);
  else if (key == "epochs") c.epochs = parse_int(key, val);
  else if (key == "batch_size") c.batch_size = parse_int(key, val);
  else if (key == "bank_capacity") c.bank_capacity = parse_int(key, val);
  else if (key == "queue_capacity") c.queue_capacity = parse_int(key, val);
  else if (key == "history_epochs") c.history_epochs = parse_int(key, val);
  else if (key == "neighbors") c.neighbors = parse_int(key, val);
  else if (key == "views") c.views = parse_int(key, val);
  else if (key == "temperature") c.temperature = parse_double(key, val);
  else if (key == "lr") c.lr = parse_double(key, val);
  else if (key == "ema_alpha") c.ema_alpha = parse_double(key, val);
  else if (key == "alpha1") c.alpha1 = parse_double(key, val);
  else if (key == "alpha2") c.alpha2 = parse_double(key, val);
  else if (key == "weak_jitter_sigma") c.weak_jitter_sigma = parse_double(key, val);
  else if (key == "weak_scale_low") c.weak_scale_low = parse_double(key, val);
  else if (key == "weak_scale_high") c.weak_scale_high = parse_double(key, val);
  else if (key == "strong_jitter_sigma") c.strong_jitter_sigma = parse_double(key, val);
  else if (key == "strong_max_segments") c.strong_max_segments = parse_int(key, val);
  else if (key == "freq_aug_count") c.freq_aug_count = parse_int(key, val);
  else if (key == "freq_aug_scale") c.freq_aug_scale = parse_double(key, val);
  else if (key == "alpha_r") c.alpha_r = parse_double(key, val);
  else if (key == "beta_decay") c.beta_decay = parse_double(key, val);
  else if (key == "mu_r_init") c.mu_r_init = parse_double(key, val);
  else if (key == "mu_c_init") c.mu_c_init = parse_double(key, val);
  else if (key == "mu_cons_init") c.mu_cons_init = parse_double(key, val);
  else if (key == "mu_u_init") c.mu_u_init = parse_double(key, val);
  else if (key == "adam_beta1") c.adam_beta1 = parse_double(key, val);
  else if (key == "adam_beta2") c.adam_beta2 = parse_double(key, val);
  else if (key == "adam_eps") c.adam_eps = parse_double(key, val);
  else if (key == "freq_branch") c.freq_branch = parse_int(key, val);
  else if (key == "bench_grid") c.bench_grid = val;
  else throw Error("config: unknown key '" + key + "'");
}

// Flat key=value file; whitespace around key and value is ignored, blank
// lines and lines starting with '#' are skipped.
inline RunConfig load_config(const std::filesystem::path& path, RunConfig base = RunConfig{}) {
  std::ifstream in(path);
  if (!in) throw Error("config: cannot open " + path.string());
  auto trim = [](std::string s) {
    auto a = s.find_first_not_of(" \t\r");
    auto b = s.find_last_not_of(" \t\r");
    return a == std::string::npos ? std::string{} : s.substr(a, b - a + 1);
  };
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    std::string t = trim(line);
    if (t.empty() || t[0] == '#') continue;
    auto eq = t.find('=');
    if (eq == std::string::npos) {
      throw Error("config: " + path.string() + ":" + std::to_string(lineno) + ": expected key=value, got '" + line + "'");
    }
    apply_config_entry(base, trim(t.substr(0, eq)), trim(t.substr(eq + 1)));
  }
  return base;
}

inline std::vector<int> parse_grid(const std::string& s) {
  std::vector<int> out;
  std::string cur;
  auto flush = [&]() {
    if (cur.empty()) throw Error("config: empty entry in grid '" + s + "'");
    out.push_back(configdetail::parse_int("bench_grid", cur));
    cur.clear();
  };
  for (char ch : s) {
    if (ch == ',') flush();
    else if (!std::isspace(static_cast<unsigned char>(ch))) cur += ch;
  }
  flush();
  return out;
}

}  // namespace tfda
