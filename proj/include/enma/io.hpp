#pragma once

#include <cstdint>
#include <fstream>
#include <map>
#include <sstream>

#include "enma/nn.hpp"

namespace enma {

/// Flat ASCII configuration: `key = value` lines grouped under `[section]`
/// headers; lookups use "section.key". '#' starts a comment. The format is
/// versioned by its first line.
class Config {
 public:
  static constexpr const char* kVersionLine = "enma-config 1";

  static Config parse(const std::string& text) {
    Config c;
    std::istringstream in(text);
    std::string line, section;
    bool first = true;
    while (std::getline(in, line)) {
      const auto hash = line.find('#');
      if (hash != std::string::npos) line = line.substr(0, hash);
      line = trim(line);
      if (line.empty()) continue;
      if (first && line == kVersionLine) {
        first = false;
        continue;
      }
      first = false;
      if (line.front() == '[') {
        if (line.back() != ']') throw std::runtime_error("config: malformed section " + line);
        section = trim(line.substr(1, line.size() - 2));
        continue;
      }
      const auto eq = line.find('=');
      if (eq == std::string::npos) throw std::runtime_error("config: expected key = value: " + line);
      const std::string key = trim(line.substr(0, eq));
      const std::string val = trim(line.substr(eq + 1));
      if (key.empty()) throw std::runtime_error("config: empty key in line: " + line);
      c.set(section.empty() ? key : section + "." + key, val);
    }
    return c;
  }

  static Config parse_file(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw std::runtime_error("config: cannot open " + path);
    std::ostringstream ss;
    ss << f.rdbuf();
    return parse(ss.str());
  }

  void set(const std::string& key, const std::string& value) {
    if (!kv_.count(key)) order_.push_back(key);
    kv_[key] = value;
  }

  bool has(const std::string& key) const { return kv_.count(key) != 0; }

  std::string str(const std::string& key) const {
    auto it = kv_.find(key);
    if (it == kv_.end()) throw std::runtime_error("config: missing key " + key);
    return it->second;
  }
  std::string str(const std::string& key, const std::string& dflt) const {
    auto it = kv_.find(key);
    return it == kv_.end() ? dflt : it->second;
  }
  double num(const std::string& key) const { return to_num(key, str(key)); }
  double num(const std::string& key, double dflt) const {
    return has(key) ? num(key) : dflt;
  }
  std::int64_t integer(const std::string& key) const {
    const double v = num(key);
    if (v != std::floor(v)) throw std::runtime_error("config: expected integer for " + key);
    return static_cast<std::int64_t>(v);
  }
  std::int64_t integer(const std::string& key, std::int64_t dflt) const {
    return has(key) ? integer(key) : dflt;
  }
  bool flag(const std::string& key, bool dflt) const {
    if (!has(key)) return dflt;
    const std::string v = str(key);
    if (v == "true" || v == "1" || v == "yes") return true;
    if (v == "false" || v == "0" || v == "no") return false;
    throw std::runtime_error("config: expected boolean for " + key);
  }

  /// Canonical text form: version line, then sections in first-use order.
  std::string serialize() const {
    std::ostringstream out;
    out << kVersionLine << "\n";
    std::string cur_section;
    bool any_section = false;
    for (const auto& key : order_) {
      const auto dot = key.find('.');
      const std::string sec = dot == std::string::npos ? "" : key.substr(0, dot);
      const std::string name = dot == std::string::npos ? key : key.substr(dot + 1);
      if (sec != cur_section || (!any_section && !sec.empty())) {
        if (!sec.empty()) out << "[" << sec << "]\n";
        cur_section = sec;
        any_section = true;
      }
      out << name << " = " << kv_.at(key) << "\n";
    }
    return out.str();
  }

  const std::vector<std::string>& keys() const { return order_; }

 private:
  static std::string trim(const std::string& s) {
    size_t a = s.find_first_not_of(" \t\r");
    if (a == std::string::npos) return "";
    size_t b = s.find_last_not_of(" \t\r");
    return s.substr(a, b - a + 1);
  }
  static double to_num(const std::string& key, const std::string& v) {
    size_t pos = 0;
    double out;
    try {
      out = std::stod(v, &pos);
    } catch (const std::exception&) {
      throw std::runtime_error("config: expected number for " + key);
    }
    if (pos != v.size()) throw std::runtime_error("config: trailing junk in value for " + key);
    return out;
  }

  std::vector<std::string> order_;
  std::map<std::string, std::string> kv_;
};

namespace iodet {

inline void write_f32(std::ostream& out, const std::vector<double>& v) {
  std::vector<float> buf(v.begin(), v.end());
  out.write(reinterpret_cast<const char*>(buf.data()),
            static_cast<std::streamsize>(buf.size() * sizeof(float)));
}

inline void read_f32(std::istream& in, std::vector<double>& v, size_t n) {
  std::vector<float> buf(n);
  in.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(n * sizeof(float)));
  if (!in) throw std::runtime_error("checkpoint: truncated blob");
  v.assign(buf.begin(), buf.end());
}

}  // namespace iodet

/// Checkpoint layout: magic line, config echo terminated by "end-config",
/// "step N", then one "param <name> shape d... trainable t" line plus raw
/// little-endian float32 blobs (values, and optimizer moments if trainable)
/// per parameter, terminated by "end-params".
template <typename S>
void save_checkpoint(const std::string& path, const std::string& magic,
                     const std::string& config_text, const ParamStore<S>& store_const) {
  auto& store = const_cast<ParamStore<S>&>(store_const);
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("checkpoint: cannot open " + path + " for writing");
  f << magic << "\n" << config_text;
  if (config_text.empty() || config_text.back() != '\n') f << "\n";
  f << "end-config\n";
  f << "step " << store.step() << "\n";
  for (const auto& name : store.names()) {
    auto& slot = store.slot(name);
    f << "param " << name << " shape";
    for (Index d : slot.param.shape()) f << " " << d;
    f << " trainable " << (slot.trainable ? 1 : 0) << "\n";
    std::vector<double> vals(slot.param.values().begin(), slot.param.values().end());
    iodet::write_f32(f, vals);
    if (slot.trainable) {
      iodet::write_f32(f, std::vector<double>(slot.m.begin(), slot.m.end()));
      iodet::write_f32(f, std::vector<double>(slot.v.begin(), slot.v.end()));
    }
    f << "\n";
  }
  f << "end-params\n";
  if (!f) throw std::runtime_error("checkpoint: write failed for " + path);
}

template <typename S>
struct Checkpoint {
  std::string config_text;
  ParamStore<S> store;
};

template <typename S>
Checkpoint<S> load_checkpoint(const std::string& path, const std::string& magic) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("checkpoint: cannot open " + path);
  std::string line;
  if (!std::getline(f, line) || line != magic)
    throw std::runtime_error("checkpoint: bad magic in " + path + " (want " + magic + ")");
  Checkpoint<S> out;
  std::ostringstream cfg;
  while (std::getline(f, line) && line != "end-config") cfg << line << "\n";
  if (line != "end-config") throw std::runtime_error("checkpoint: truncated config in " + path);
  out.config_text = cfg.str();
  if (!std::getline(f, line) || line.rfind("step ", 0) != 0)
    throw std::runtime_error("checkpoint: missing step counter in " + path);
  out.store.step() = std::stoll(line.substr(5));
  while (std::getline(f, line) && line != "end-params") {
    std::istringstream ls(line);
    std::string tok, name;
    ls >> tok >> name;
    if (tok != "param") throw std::runtime_error("checkpoint: malformed entry: " + line);
    ls >> tok;
    if (tok != "shape") throw std::runtime_error("checkpoint: malformed entry: " + line);
    Shape shape;
    std::string word;
    bool trainable = true;
    while (ls >> word) {
      if (word == "trainable") {
        int t;
        ls >> t;
        trainable = t != 0;
        break;
      }
      shape.push_back(std::stoll(word));
    }
    std::vector<double> vals;
    iodet::read_f32(f, vals, static_cast<size_t>(numel(shape)));
    Tensor<S> t = Tensor<S>::from(shape, std::vector<S>(vals.begin(), vals.end()));
    out.store.add(name, std::move(t), trainable);
    auto& slot = out.store.slot(name);
    if (trainable) {
      std::vector<double> m, v;
      iodet::read_f32(f, m, static_cast<size_t>(numel(shape)));
      iodet::read_f32(f, v, static_cast<size_t>(numel(shape)));
      slot.m.assign(m.begin(), m.end());
      slot.v.assign(v.begin(), v.end());
    }
    std::getline(f, line);  // trailing newline after the blobs
    if (!line.empty()) throw std::runtime_error("checkpoint: misaligned blob for " + name);
  }
  if (line != "end-params") throw std::runtime_error("checkpoint: truncated params in " + path);
  return out;
}

/// Binary 8-bit PGM (P5) heatmap plus a CSV sidecar recording the value range
/// used for normalization. values are row-major [height, width]; vmin == vmax
/// renders a uniform mid-gray image.
inline void write_pgm_heatmap(const std::string& path, const std::vector<double>& values,
                              Index height, Index width, double vmin, double vmax) {
  if (static_cast<Index>(values.size()) != height * width)
    throw std::invalid_argument("pgm: size mismatch");
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("pgm: cannot open " + path);
  f << "P5\n" << width << " " << height << "\n255\n";
  std::vector<unsigned char> px(values.size());
  const double span = vmax - vmin;
  for (size_t i = 0; i < values.size(); ++i) {
    double t = span > 0 ? (values[i] - vmin) / span : 0.5;
    t = std::min(1.0, std::max(0.0, t));
    px[i] = static_cast<unsigned char>(std::lround(t * 255.0));
  }
  f.write(reinterpret_cast<const char*>(px.data()), static_cast<std::streamsize>(px.size()));
  if (!f) throw std::runtime_error("pgm: write failed for " + path);
  const auto dot = path.find_last_of('.');
  const std::string stem = dot == std::string::npos ? path : path.substr(0, dot);
  std::ofstream side(stem + ".csv");
  if (!side) throw std::runtime_error("pgm: cannot write sidecar for " + path);
  char buf[128];
  std::snprintf(buf, sizeof(buf), "vmin,vmax\n%.9g,%.9g\n", vmin, vmax);
  side << buf;
}

}  // namespace enma
