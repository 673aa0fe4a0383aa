#include "slm/config.hpp"

#include <charconv>
#include <cstdlib>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>

#include "slm/error.hpp"

namespace slm {

namespace {

std::string_view trim(std::string_view s) {
  const auto first = s.find_first_not_of(" \t\r");
  if (first == std::string_view::npos) return {};
  const auto last = s.find_last_not_of(" \t\r");
  return s.substr(first, last - first + 1);
}

[[noreturn]] void bad_value(std::string_view key, std::string_view value, const char* what) {
  throw ConfigError("config key '" + std::string(key) + "': '" + std::string(value) + "' is not " +
                    what);
}

std::uint64_t to_u64(std::string_view key, std::string_view v) {
  std::uint64_t out = 0;
  auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || ptr != v.data() + v.size() || v.empty()) {
    bad_value(key, v, "a non-negative integer");
  }
  return out;
}

int to_int(std::string_view key, std::string_view v) {
  int out = 0;
  auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || ptr != v.data() + v.size() || v.empty()) {
    bad_value(key, v, "an integer");
  }
  return out;
}

double to_double(std::string_view key, std::string_view v) {
  const std::string s(v);
  char* end = nullptr;
  const double out = std::strtod(s.c_str(), &end);
  if (s.empty() || end != s.c_str() + s.size()) bad_value(key, v, "a number");
  return out;
}

bool to_bool(std::string_view key, std::string_view v) {
  if (v == "true" || v == "1" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "no") return false;
  bad_value(key, v, "a boolean");
}

using Setter = std::function<void(RunConfig&, std::string_view, std::string_view)>;

const std::map<std::string, Setter, std::less<>>& setters() {
  static const std::map<std::string, Setter, std::less<>> table = [] {
    std::map<std::string, Setter, std::less<>> t;
    auto sz = [](std::size_t RunConfig::*field) {
      return [field](RunConfig& c, std::string_view k, std::string_view v) {
        c.*field = static_cast<std::size_t>(to_u64(k, v));
      };
    };
    t["seed"] = [](RunConfig& c, auto k, auto v) { c.seed = to_u64(k, v); };
    t["threads"] = sz(&RunConfig::threads);
    t["train_data"] = [](RunConfig& c, auto, auto v) { c.train_data = v; };
    t["dev_data"] = [](RunConfig& c, auto, auto v) { c.dev_data = v; };
    t["checkpoint"] = [](RunConfig& c, auto, auto v) { c.checkpoint = v; };
    t["metrics_out"] = [](RunConfig& c, auto, auto v) { c.metrics_out = v; };
    t["stopwords"] = [](RunConfig& c, auto, auto v) { c.stopwords = v; };

    t["task"] = [](RunConfig& c, auto, auto v) { c.task.kind = parse_task_kind(v); };
    t["vocab_size"] = [](RunConfig& c, auto k, auto v) { c.task.vocab_size = to_int(k, v); };
    t["min_length"] = [](RunConfig& c, auto k, auto v) { c.task.min_length = to_int(k, v); };
    t["max_length"] = [](RunConfig& c, auto k, auto v) { c.task.max_length = to_int(k, v); };
    t["train_count"] = [](RunConfig& c, auto k, auto v) { c.task.train_count = to_u64(k, v); };
    t["dev_count"] = [](RunConfig& c, auto k, auto v) { c.task.dev_count = to_u64(k, v); };
    t["test_count"] = [](RunConfig& c, auto k, auto v) { c.task.test_count = to_u64(k, v); };
    t["stop_word_count"] = [](RunConfig& c, auto k, auto v) {
      c.task.stop_word_count = to_int(k, v);
    };

    t["d_model"] = [](RunConfig& c, auto k, auto v) { c.model.d_model = to_int(k, v); };
    t["n_heads"] = [](RunConfig& c, auto k, auto v) { c.model.n_heads = to_int(k, v); };
    t["n_layers"] = [](RunConfig& c, auto k, auto v) { c.model.n_layers = to_int(k, v); };
    t["d_ff"] = [](RunConfig& c, auto k, auto v) { c.model.d_ff = to_int(k, v); };
    t["max_steps"] = [](RunConfig& c, auto k, auto v) { c.model.max_steps = to_int(k, v); };
    t["dropout"] = [](RunConfig& c, auto k, auto v) { c.model.dropout = to_double(k, v); };
    t["tie_embeddings"] = [](RunConfig& c, auto k, auto v) {
      c.model.tie_embeddings = to_bool(k, v);
    };

    t["steps"] = [](RunConfig& c, auto k, auto v) { c.train.total_steps = to_u64(k, v); };
    t["batch_size"] = [](RunConfig& c, auto k, auto v) { c.train.batch_size = to_u64(k, v); };
    t["lr"] = [](RunConfig& c, auto k, auto v) { c.train.adam.learning_rate = to_double(k, v); };
    t["warmup"] = [](RunConfig& c, auto k, auto v) {
      c.train.adam.warmup_steps = static_cast<std::int64_t>(to_u64(k, v));
    };
    t["lr_schedule"] = [](RunConfig& c, auto k, auto v) {
      if (v == "inverse-sqrt") {
        c.train.adam.schedule = LrSchedule::InverseSqrt;
      } else if (v == "constant") {
        c.train.adam.schedule = LrSchedule::Constant;
      } else {
        bad_value(k, v, "inverse-sqrt or constant");
      }
    };
    t["clip_norm"] = [](RunConfig& c, auto k, auto v) { c.train.adam.clip_norm = to_double(k, v); };
    t["stage_boundary"] = [](RunConfig& c, auto k, auto v) {
      c.train.stage_boundary = to_double(k, v);
    };
    t["top_k"] = [](RunConfig& c, auto k, auto v) { c.train.top_k = to_u64(k, v); };
    t["strategy"] = [](RunConfig& c, auto, auto v) { c.train.strategy = parse_strategy(v); };
    t["data_fraction"] = [](RunConfig& c, auto k, auto v) {
      c.train.data_fraction = to_double(k, v);
    };
    t["eval_interval"] = [](RunConfig& c, auto k, auto v) { c.train.eval_interval = to_u64(k, v); };
    t["eval_sentences"] = [](RunConfig& c, auto k, auto v) {
      c.train.eval_sentences = to_u64(k, v);
    };
    t["eval_beam"] = [](RunConfig& c, auto k, auto v) { c.train.eval_beam.beam = to_u64(k, v); };

    t["beam"] = [](RunConfig& c, auto k, auto v) { c.beam.beam = to_u64(k, v); };
    t["alpha"] = [](RunConfig& c, auto k, auto v) { c.beam.alpha = to_double(k, v); };
    t["decode_max_steps"] = [](RunConfig& c, auto k, auto v) { c.beam.max_steps = to_u64(k, v); };
    return t;
  }();
  return table;
}

}  // namespace

RunConfig::RunConfig() { train.eval_beam.beam = 1; }

std::vector<Setting> parse_config_text(std::string_view text) {
  std::vector<Setting> out;
  std::size_t line_no = 0;
  std::size_t pos = 0;
  while (pos <= text.size()) {
    const auto nl = text.find('\n', pos);
    std::string_view line = text.substr(pos, nl == std::string_view::npos ? text.npos : nl - pos);
    pos = nl == std::string_view::npos ? text.size() + 1 : nl + 1;
    ++line_no;
    if (auto hash = line.find('#'); hash != std::string_view::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string_view::npos) {
      throw ConfigError("config line " + std::to_string(line_no) + ": expected 'key = value'");
    }
    const auto key = trim(line.substr(0, eq));
    const auto value = trim(line.substr(eq + 1));
    if (key.empty()) throw ConfigError("config line " + std::to_string(line_no) + ": empty key");
    out.emplace_back(std::string(key), std::string(value));
  }
  return out;
}

std::vector<Setting> read_config_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config file " + path.string());
  std::ostringstream buf;
  buf << in.rdbuf();
  return parse_config_text(buf.str());
}

void apply_setting(RunConfig& cfg, std::string_view key, std::string_view value) {
  const auto& table = setters();
  auto it = table.find(key);
  if (it == table.end()) throw ConfigError("unknown config key '" + std::string(key) + "'");
  it->second(cfg, key, value);
}

void apply_settings(RunConfig& cfg, const std::vector<Setting>& settings) {
  for (const auto& [k, v] : settings) apply_setting(cfg, k, v);
}

void apply_environment(RunConfig& cfg) {
  if (const char* env = std::getenv("SLM_SEED"); env != nullptr && *env != '\0') {
    apply_setting(cfg, "seed", env);
  }
}

std::vector<std::string> config_keys() {
  std::vector<std::string> out;
  for (const auto& [k, _] : setters()) out.push_back(k);
  return out;
}

void finalize(RunConfig& cfg) {
  cfg.train.seed = cfg.seed;
  cfg.task.seed = cfg.seed;
  cfg.train.threads = cfg.threads;
}

}  // namespace slm
