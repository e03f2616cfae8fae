#include "fdrop/config.hpp"

#include <fstream>
#include <sstream>
#include <stdexcept>

namespace fdrop {

namespace {

std::string trim(const std::string& s) {
  const auto a = s.find_first_not_of(" \t\r");
  if (a == std::string::npos) return "";
  const auto b = s.find_last_not_of(" \t\r");
  return s.substr(a, b - a + 1);
}

bool parse_bool(const std::string& v, const std::string& key) {
  if (v == "true" || v == "1" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "no") return false;
  throw std::invalid_argument("config: boolean expected for '" + key + "', got '" + v + "'");
}

std::vector<int> parse_int_list(const std::string& v) {
  std::vector<int> out;
  std::size_t pos = 0;
  while (pos < v.size()) {
    auto comma = v.find(',', pos);
    if (comma == std::string::npos) comma = v.size();
    const std::string item = trim(v.substr(pos, comma - pos));
    if (!item.empty()) out.push_back(std::stoi(item));
    pos = comma + 1;
  }
  return out;
}

std::vector<std::string> parse_string_list(const std::string& v) {
  std::vector<std::string> out;
  std::size_t pos = 0;
  while (pos < v.size()) {
    auto comma = v.find(',', pos);
    if (comma == std::string::npos) comma = v.size();
    const std::string item = trim(v.substr(pos, comma - pos));
    if (!item.empty()) out.push_back(item);
    pos = comma + 1;
  }
  return out;
}

}  // namespace

ExperimentConfig parse_config_text(const std::string& text) {
  ExperimentConfig cfg;
  std::istringstream is(text);
  std::string line, section;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    const auto hash = line.find_first_of("#;");
    if (hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    if (line.front() == '[') {
      if (line.back() != ']') {
        throw std::invalid_argument("config line " + std::to_string(lineno) +
                                    ": malformed section header");
      }
      section = trim(line.substr(1, line.size() - 2));
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw std::invalid_argument("config line " + std::to_string(lineno) +
                                  ": expected key = value");
    }
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    const std::string where = section + "." + key;

    if (section == "model") {
      if (key == "architecture") cfg.model.architecture = value;
      else if (key == "depth") cfg.model.depth = std::stoi(value);
      else if (key == "base_width") cfg.model.base_width = std::stoi(value);
      else if (key == "num_classes") cfg.model.num_classes = std::stoi(value);
      else if (key == "input_channels") cfg.model.input_channels = std::stoi(value);
      else throw std::invalid_argument("config: unknown key '" + where + "'");
    } else if (section == "data") {
      if (key == "source") cfg.data_source = value;
      else if (key == "path") cfg.data_path = value;
      else if (key == "classes") cfg.synthetic_classes = std::stoi(value);
      else if (key == "n_per_class") cfg.synthetic_n = std::stoi(value);
      else if (key == "n_test_per_class") cfg.synthetic_n_test = std::stoi(value);
      else if (key == "size") cfg.synthetic_size = std::stoi(value);
      else if (key == "augment") cfg.augment_enabled = parse_bool(value, where);
      else if (key == "flip_prob") cfg.augment.flip_prob = std::stod(value);
      else if (key == "crop_pad") cfg.augment.crop_pad = std::stoi(value);
      else throw std::invalid_argument("config: unknown key '" + where + "'");
    } else if (section == "train") {
      if (key == "epochs") cfg.epochs = std::stoi(value);
      else if (key == "batch_size") cfg.batch_size = std::stoi(value);
      else if (key == "base_lr") cfg.base_lr = std::stod(value);
      else if (key == "momentum") cfg.momentum = std::stod(value);
      else if (key == "base_weight_decay") cfg.base_weight_decay = std::stod(value);
      else if (key == "mwd_weight_decay") cfg.mwd_weight_decay = std::stod(value);
      else if (key == "lr_milestones") cfg.lr_milestones = parse_int_list(value);
      else if (key == "lr_factor") cfg.lr_factor = std::stod(value);
      else if (key == "participation_rate") cfg.participation_rate = std::stod(value);
      else if (key == "exact_fraction_plan") cfg.exact_fraction_plan = parse_bool(value, where);
      else if (key == "mwd_only") cfg.mwd_only = parse_bool(value, where);
      else if (key == "log_steps") cfg.log_steps = parse_bool(value, where);
      else throw std::invalid_argument("config: unknown key '" + where + "'");
    } else if (section == "regularizer") {
      if (key == "kind") cfg.regularizer.kind = reg_kind_from_name(value);
      else if (key == "drop_prob") cfg.regularizer.drop_prob = std::stod(value);
      else if (key == "block_size") cfg.regularizer.block_size = std::stoi(value);
      else if (key == "keep_prob") cfg.regularizer.keep_prob = std::stod(value);
      else if (key == "gamma_lo") cfg.regularizer.gamma.lo = std::stod(value);
      else if (key == "gamma_hi") cfg.regularizer.gamma.hi = std::stod(value);
      else if (key == "insertion_points") cfg.regularizer.insertion_points = parse_string_list(value);
      else throw std::invalid_argument("config: unknown key '" + where + "'");
    } else if (section == "seeds") {
      if (key == "data") cfg.seed_data = std::stoull(value);
      else if (key == "init") cfg.seed_init = std::stoull(value);
      else if (key == "reg") cfg.seed_reg = std::stoull(value);
      else throw std::invalid_argument("config: unknown key '" + where + "'");
    } else if (section == "output") {
      if (key == "dir") cfg.output_dir = value;
      else throw std::invalid_argument("config: unknown key '" + where + "'");
    } else {
      throw std::invalid_argument("config: unknown section '" + section + "'");
    }
  }
  cfg.validate();
  return cfg;
}

ExperimentConfig parse_config_file(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("config: cannot open " + path);
  std::ostringstream ss;
  ss << is.rdbuf();
  return parse_config_text(ss.str());
}

void ExperimentConfig::validate() const {
  if (epochs < 1) throw std::invalid_argument("config: epochs must be >= 1");
  if (batch_size < 1) throw std::invalid_argument("config: batch_size must be >= 1");
  if (participation_rate < 0.0 || participation_rate > 1.0) {
    throw std::invalid_argument("config: participation_rate must be in [0,1], got " +
                                std::to_string(participation_rate));
  }
  if (mwd_weight_decay < base_weight_decay) {
    throw std::invalid_argument("config: mwd_weight_decay (" +
                                std::to_string(mwd_weight_decay) +
                                ") must be >= base_weight_decay (" +
                                std::to_string(base_weight_decay) + ")");
  }
  for (std::size_t i = 1; i < lr_milestones.size(); ++i) {
    if (lr_milestones[i] <= lr_milestones[i - 1]) {
      throw std::invalid_argument("config: lr_milestones must be strictly increasing");
    }
  }
  if (data_source != "synthetic" && data_source != "cifar10" && data_source != "cifar100") {
    throw std::invalid_argument("config: unknown data source '" + data_source + "'");
  }
  regularizer.validate();
}

ExperimentConfig randomly_mwd_variant(ExperimentConfig cfg) {
  cfg.mwd_only = true;
  return cfg;
}

}  // namespace fdrop
