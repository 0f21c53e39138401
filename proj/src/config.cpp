#include "s3vos/config.hpp"

#include <fstream>
#include <functional>
#include <sstream>
#include <stdexcept>

namespace s3vos {

std::vector<int> ModelConfig::tapped_layers() const {
  std::vector<int> taps;
  for (int i = 1; i <= num_blocks; ++i) taps.push_back(i * vit_depth / num_blocks);
  return taps;
}

void ModelConfig::validate() const {
  auto need = [](bool ok, const char* what) {
    if (!ok) throw std::invalid_argument(std::string("model config: ") + what);
  };
  need(vit_depth >= 1, "vit_depth must be >= 1");
  need(vit_width >= 1 && vit_heads >= 1 && vit_width % vit_heads == 0,
       "vit_width must be a positive multiple of vit_heads");
  need(patch == 16 || patch == 32 || patch == 8, "patch must be 8, 16 or 32");
  need(channels >= 2 && channels % 2 == 0, "channels must be even and >= 2");
  need(num_blocks >= 0 && num_blocks <= vit_depth, "num_blocks must be in [0, vit_depth]");
  need(deform_heads >= 1 && deform_points >= 1, "deform heads/points must be >= 1");
  need(ffn_hidden >= 1, "ffn_hidden must be >= 1");
  need(num_queries >= 1, "num_queries must be >= 1");
  need(query_depth >= 0, "query_depth must be >= 0");
  need(key_dim >= 1 && value_dim >= 1, "key_dim/value_dim must be >= 1");
  need(top_k >= 1, "top_k must be >= 1");
  need(memory_capacity >= 1, "memory_capacity must be >= 1");
  need(update_interval >= 1, "update_interval must be >= 1");
}

void TrainConfig::validate() const {
  auto need = [](bool ok, const char* what) {
    if (!ok) throw std::invalid_argument(std::string("train config: ") + what);
  };
  need(lr > 0.0, "lr must be positive");
  need(weight_decay >= 0.0, "weight_decay must be >= 0");
  need(iterations >= 1, "iterations must be >= 1");
  need(batch_size >= 1, "batch_size must be >= 1");
  need(num_frames >= 2, "num_frames must be >= 2");
  need(num_ref_frames >= 1, "num_ref_frames must be >= 1");
  need(max_objects >= 1 && max_objects <= 3, "max_objects must be in [1,3]");
  need(!max_skip.empty() && max_skip.size() == max_skip_milestones.size(),
       "max_skip and max_skip_milestones must have equal, nonzero length");
  for (std::size_t i = 0; i < max_skip_milestones.size(); ++i) {
    need(max_skip[i] >= 1, "max_skip entries must be >= 1");
    if (i > 0) need(max_skip_milestones[i] > max_skip_milestones[i - 1],
                    "max_skip_milestones must be strictly increasing");
  }
  need(max_skip_milestones.back() == 1.0, "max_skip_milestones must end at 1.0");
  need(point_fraction > 0.0 && point_fraction <= 1.0, "point_fraction must be in (0,1]");
  need(crop == 0 || crop % 32 == 0, "crop must be 0 or a multiple of 32");
}

int TrainConfig::max_skip_at(int iteration) const {
  // Entry i is active from milestone i-1 (0 for the first) until milestone i.
  const double frac = static_cast<double>(iteration) / iterations;
  for (std::size_t i = 0; i < max_skip_milestones.size(); ++i) {
    if (frac < max_skip_milestones[i]) return max_skip[i];
  }
  return max_skip.back();
}

double TrainConfig::lr_at(int iteration) const {
  const double frac = static_cast<double>(iteration) / iterations;
  double rate = lr;
  for (double s : lr_steps)
    if (frac >= s) rate *= lr_gamma;
  return rate;
}

void SyntheticSpec::validate() const {
  auto need = [](bool ok, const std::string& what) {
    if (!ok) throw std::invalid_argument("synthetic spec: " + what);
  };
  need(num_sequences >= 1, "num_sequences must be >= 1");
  need(frames_per_seq >= 2, "frames_per_seq must be >= 2");
  need(height >= 16 && width >= 16, "image must be at least 16x16");
  need(num_objects >= 1 && num_objects <= 3, "num_objects must be in [1,3] (at most 3 targets)");
  need(!shapes.empty(), "shapes must be nonempty");
  for (const auto& s : shapes)
    need(s == "disk" || s == "rectangle" || s == "triangle", "unknown shape '" + s + "'");
  need(min_speed >= 0.0 && max_speed >= min_speed, "invalid speed range");
  need(scenario == "random" || scenario == "crossing" || scenario == "occlusion" ||
           scenario == "part-split" || scenario == "mixed",
       "unknown scenario '" + scenario + "'");
}

namespace {

std::string join(const std::vector<int>& v) {
  std::ostringstream os;
  for (std::size_t i = 0; i < v.size(); ++i) os << (i ? "," : "") << v[i];
  return os.str();
}
std::string join(const std::vector<double>& v) {
  std::ostringstream os;
  os.precision(17);
  for (std::size_t i = 0; i < v.size(); ++i) os << (i ? "," : "") << v[i];
  return os.str();
}
std::string join(const std::vector<std::string>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + v[i];
  return s;
}
std::vector<std::string> split(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (!item.empty()) out.push_back(item);
  }
  return out;
}
std::string fmt(double v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}
bool parse_bool(const std::string& v) {
  if (v == "1" || v == "true" || v == "yes" || v == "on") return true;
  if (v == "0" || v == "false" || v == "no" || v == "off") return false;
  throw std::invalid_argument("expected a boolean, got '" + v + "'");
}

struct Field {
  std::function<void(RunConfig&, const std::string&)> set;
  std::function<std::string(const RunConfig&)> get;
};

template <typename T>
Field int_field(T RunConfig::*section, int T::*member) {
  return {[=](RunConfig& c, const std::string& v) { (c.*section).*member = std::stoi(v); },
          [=](const RunConfig& c) { return std::to_string((c.*section).*member); }};
}
template <typename T>
Field u64_field(T RunConfig::*section, std::uint64_t T::*member) {
  return {[=](RunConfig& c, const std::string& v) { (c.*section).*member = std::stoull(v); },
          [=](const RunConfig& c) { return std::to_string((c.*section).*member); }};
}
template <typename T>
Field dbl_field(T RunConfig::*section, double T::*member) {
  return {[=](RunConfig& c, const std::string& v) { (c.*section).*member = std::stod(v); },
          [=](const RunConfig& c) { return fmt((c.*section).*member); }};
}
template <typename T>
Field bool_field(T RunConfig::*section, bool T::*member) {
  return {[=](RunConfig& c, const std::string& v) { (c.*section).*member = parse_bool(v); },
          [=](const RunConfig& c) { return std::string((c.*section).*member ? "true" : "false"); }};
}
template <typename T>
Field str_field(T RunConfig::*section, std::string T::*member) {
  return {[=](RunConfig& c, const std::string& v) { (c.*section).*member = v; },
          [=](const RunConfig& c) { return (c.*section).*member; }};
}
Field ablation_field(bool AblationFlags::*member) {
  return {[=](RunConfig& c, const std::string& v) { c.model.ablation.*member = parse_bool(v); },
          [=](const RunConfig& c) {
            return std::string(c.model.ablation.*member ? "true" : "false");
          }};
}

const std::map<std::string, Field>& fields() {
  using M = ModelConfig;
  using T = TrainConfig;
  using D = SyntheticSpec;
  static const std::map<std::string, Field> table = {
      {"model.vit_depth", int_field(&RunConfig::model, &M::vit_depth)},
      {"model.vit_width", int_field(&RunConfig::model, &M::vit_width)},
      {"model.vit_heads", int_field(&RunConfig::model, &M::vit_heads)},
      {"model.patch", int_field(&RunConfig::model, &M::patch)},
      {"model.vit_seed", u64_field(&RunConfig::model, &M::vit_seed)},
      {"model.channels", int_field(&RunConfig::model, &M::channels)},
      {"model.num_blocks", int_field(&RunConfig::model, &M::num_blocks)},
      {"model.deform_heads", int_field(&RunConfig::model, &M::deform_heads)},
      {"model.deform_points", int_field(&RunConfig::model, &M::deform_points)},
      {"model.ffn_hidden", int_field(&RunConfig::model, &M::ffn_hidden)},
      {"model.num_queries", int_field(&RunConfig::model, &M::num_queries)},
      {"model.query_depth", int_field(&RunConfig::model, &M::query_depth)},
      {"model.key_dim", int_field(&RunConfig::model, &M::key_dim)},
      {"model.value_dim", int_field(&RunConfig::model, &M::value_dim)},
      {"model.top_k", int_field(&RunConfig::model, &M::top_k)},
      {"model.memory_capacity", int_field(&RunConfig::model, &M::memory_capacity)},
      {"model.update_interval", int_field(&RunConfig::model, &M::update_interval)},
      {"ablation.disable_semantic_embed", ablation_field(&AblationFlags::disable_semantic_embed)},
      {"ablation.disable_spatial_modeling",
       ablation_field(&AblationFlags::disable_spatial_modeling)},
      {"ablation.disable_discriminative_query",
       ablation_field(&AblationFlags::disable_discriminative_query)},
      {"train.lr", dbl_field(&RunConfig::train, &T::lr)},
      {"train.weight_decay", dbl_field(&RunConfig::train, &T::weight_decay)},
      {"train.beta1", dbl_field(&RunConfig::train, &T::beta1)},
      {"train.beta2", dbl_field(&RunConfig::train, &T::beta2)},
      {"train.adam_eps", dbl_field(&RunConfig::train, &T::adam_eps)},
      {"train.iterations", int_field(&RunConfig::train, &T::iterations)},
      {"train.batch_size", int_field(&RunConfig::train, &T::batch_size)},
      {"train.num_frames", int_field(&RunConfig::train, &T::num_frames)},
      {"train.num_ref_frames", int_field(&RunConfig::train, &T::num_ref_frames)},
      {"train.max_objects", int_field(&RunConfig::train, &T::max_objects)},
      {"train.max_skip",
       {[](RunConfig& c, const std::string& v) {
          c.train.max_skip.clear();
          for (const auto& s : split(v)) c.train.max_skip.push_back(std::stoi(s));
        },
        [](const RunConfig& c) { return join(c.train.max_skip); }}},
      {"train.max_skip_milestones",
       {[](RunConfig& c, const std::string& v) {
          c.train.max_skip_milestones.clear();
          for (const auto& s : split(v)) c.train.max_skip_milestones.push_back(std::stod(s));
        },
        [](const RunConfig& c) { return join(c.train.max_skip_milestones); }}},
      {"train.lr_steps",
       {[](RunConfig& c, const std::string& v) {
          c.train.lr_steps.clear();
          for (const auto& s : split(v)) c.train.lr_steps.push_back(std::stod(s));
        },
        [](const RunConfig& c) { return join(c.train.lr_steps); }}},
      {"train.lr_gamma", dbl_field(&RunConfig::train, &T::lr_gamma)},
      {"train.point_fraction", dbl_field(&RunConfig::train, &T::point_fraction)},
      {"train.grad_clip", dbl_field(&RunConfig::train, &T::grad_clip)},
      {"train.augment", bool_field(&RunConfig::train, &T::augment)},
      {"train.crop", int_field(&RunConfig::train, &T::crop)},
      {"train.log_every", int_field(&RunConfig::train, &T::log_every)},
      {"train.seed", u64_field(&RunConfig::train, &T::seed)},
      {"data.num_sequences", int_field(&RunConfig::data, &D::num_sequences)},
      {"data.frames_per_seq", int_field(&RunConfig::data, &D::frames_per_seq)},
      {"data.height", int_field(&RunConfig::data, &D::height)},
      {"data.width", int_field(&RunConfig::data, &D::width)},
      {"data.num_objects", int_field(&RunConfig::data, &D::num_objects)},
      {"data.shapes",
       {[](RunConfig& c, const std::string& v) { c.data.shapes = split(v); },
        [](const RunConfig& c) { return join(c.data.shapes); }}},
      {"data.min_speed", dbl_field(&RunConfig::data, &D::min_speed)},
      {"data.max_speed", dbl_field(&RunConfig::data, &D::max_speed)},
      {"data.allow_overlap", bool_field(&RunConfig::data, &D::allow_overlap)},
      {"data.scenario", str_field(&RunConfig::data, &D::scenario)},
      {"data.seed", u64_field(&RunConfig::data, &D::seed)},
  };
  return table;
}

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

}  // namespace

void RunConfig::set(const std::string& key, const std::string& value) {
  const auto& table = fields();
  auto it = table.find(key);
  if (it == table.end()) throw std::invalid_argument("unknown config key '" + key + "'");
  try {
    it->second.set(*this, trim(value));
  } catch (const std::invalid_argument& e) {
    throw std::invalid_argument("config key '" + key + "': " + e.what());
  } catch (const std::out_of_range&) {
    throw std::invalid_argument("config key '" + key + "': value out of range");
  }
}

std::map<std::string, std::string> RunConfig::to_map() const {
  std::map<std::string, std::string> out;
  for (const auto& [k, f] : fields()) out[k] = f.get(*this);
  return out;
}

void RunConfig::load_text(const std::string& text) {
  std::istringstream is(text);
  std::string line;
  std::string section;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    line = trim(line);
    if (line.empty()) continue;
    if (line.front() == '[' && line.back() == ']') {
      section = trim(line.substr(1, line.size() - 2));
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw std::invalid_argument("config line " + std::to_string(lineno) + ": expected key=value");
    }
    std::string key = trim(line.substr(0, eq));
    if (!section.empty() && key.find('.') == std::string::npos) key = section + "." + key;
    set(key, line.substr(eq + 1));
  }
}

void RunConfig::load_file(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("cannot open config file " + path);
  std::stringstream ss;
  ss << f.rdbuf();
  load_text(ss.str());
}

std::string RunConfig::to_text() const {
  std::string out;
  for (const auto& [k, v] : to_map()) out += k + "=" + v + "\n";
  return out;
}

}  // namespace s3vos
