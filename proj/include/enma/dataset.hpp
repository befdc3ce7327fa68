#pragma once

#include <cstdint>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace enma {

/// On-disk trajectory container. Layout:
///   magic "ENMA1\n", then newline-terminated ASCII header fields, then raw
///   little-endian float32 grid coordinates (one d-vector per site, row-major),
///   then fields as [trajectory, time, (y,) x, channel] float32, then one
///   ASCII name=value parameter record per batch. A sidecar .txt with the same
///   stem repeats the header for human inspection.
struct Dataset {
  std::string system;
  std::string regime;
  std::int64_t n_traj = 0;
  std::int64_t batch_size = 0;
  std::int64_t nt = 0;
  std::vector<std::int64_t> spatial;  // [nx] or [ny, nx]
  std::int64_t channels = 1;
  double dt = 0;
  std::uint64_t seed = 0;
  std::vector<float> grid;    // [sites, dims]
  std::vector<float> fields;  // [n_traj, nt, sites, channels]
  std::vector<std::vector<std::pair<std::string, double>>> batch_params;

  std::int64_t sites() const {
    std::int64_t p = 1;
    for (auto s : spatial) p *= s;
    return p;
  }
  std::int64_t frame_size() const { return sites() * channels; }
  std::int64_t n_batches() const { return batch_size > 0 ? n_traj / batch_size : 0; }

  const float* traj(std::int64_t i) const { return fields.data() + i * nt * frame_size(); }

  const std::vector<std::pair<std::string, double>>& params_of_traj(std::int64_t i) const {
    return batch_params.at(static_cast<size_t>(i / batch_size));
  }

  void validate() const {
    if (n_traj <= 0 || nt <= 0 || channels <= 0 || spatial.empty())
      throw std::runtime_error("dataset: empty dimensions");
    if (batch_size <= 0 || n_traj % batch_size != 0)
      throw std::runtime_error("dataset: n_traj must be a multiple of batch_size");
    if (static_cast<std::int64_t>(grid.size()) !=
        sites() * static_cast<std::int64_t>(spatial.size()))
      throw std::runtime_error("dataset: grid size mismatch");
    if (static_cast<std::int64_t>(fields.size()) != n_traj * nt * frame_size())
      throw std::runtime_error("dataset: field size mismatch");
    if (static_cast<std::int64_t>(batch_params.size()) != n_batches())
      throw std::runtime_error("dataset: one parameter record per batch required");
    for (float v : fields)
      if (!std::isfinite(v)) throw std::runtime_error("dataset: non-finite field value");
  }

  std::string header_text() const {
    std::ostringstream h;
    h.precision(17);
    h << "system " << system << "\n";
    h << "regime " << regime << "\n";
    h << "n_traj " << n_traj << "\n";
    h << "batch_size " << batch_size << "\n";
    h << "nt " << nt << "\n";
    h << "spatial";
    for (auto s : spatial) h << " " << s;
    h << "\n";
    h << "channels " << channels << "\n";
    h << "dt " << dt << "\n";
    h << "seed " << seed << "\n";
    h << "end\n";
    return h.str();
  }

  void save(const std::string& path) const {
    validate();
    std::ofstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("dataset: cannot open " + path + " for writing");
    f << "ENMA1\n" << header_text();
    f.write(reinterpret_cast<const char*>(grid.data()),
            static_cast<std::streamsize>(grid.size() * sizeof(float)));
    f.write(reinterpret_cast<const char*>(fields.data()),
            static_cast<std::streamsize>(fields.size() * sizeof(float)));
    std::ostringstream pp;
    pp.precision(17);
    for (size_t b = 0; b < batch_params.size(); ++b) {
      pp << "params " << b << "\n";
      for (const auto& [k, v] : batch_params[b]) pp << k << "=" << v << "\n";
      pp << "end\n";
    }
    f << pp.str();
    if (!f) throw std::runtime_error("dataset: write failed for " + path);
    f.close();
    const auto dot = path.find_last_of('.');
    const std::string stem = (dot == std::string::npos) ? path : path.substr(0, dot);
    std::ofstream side(stem + ".txt");
    if (!side) throw std::runtime_error("dataset: cannot write sidecar for " + path);
    side << header_text();
  }

  static Dataset load(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("dataset: cannot open " + path);
    std::string line;
    if (!std::getline(f, line) || line != "ENMA1")
      throw std::runtime_error("dataset: bad magic in " + path);
    Dataset d;
    while (std::getline(f, line) && line != "end") {
      std::istringstream ls(line);
      std::string key;
      ls >> key;
      if (key == "system")
        ls >> d.system;
      else if (key == "regime")
        ls >> d.regime;
      else if (key == "n_traj")
        ls >> d.n_traj;
      else if (key == "batch_size")
        ls >> d.batch_size;
      else if (key == "nt")
        ls >> d.nt;
      else if (key == "spatial") {
        std::int64_t s;
        while (ls >> s) d.spatial.push_back(s);
      } else if (key == "channels")
        ls >> d.channels;
      else if (key == "dt")
        ls >> d.dt;
      else if (key == "seed")
        ls >> d.seed;
      else
        throw std::runtime_error("dataset: unknown header field " + key);
    }
    if (line != "end") throw std::runtime_error("dataset: truncated header in " + path);
    d.grid.resize(static_cast<size_t>(d.sites() * static_cast<std::int64_t>(d.spatial.size())));
    d.fields.resize(static_cast<size_t>(d.n_traj * d.nt * d.frame_size()));
    f.read(reinterpret_cast<char*>(d.grid.data()),
           static_cast<std::streamsize>(d.grid.size() * sizeof(float)));
    f.read(reinterpret_cast<char*>(d.fields.data()),
           static_cast<std::streamsize>(d.fields.size() * sizeof(float)));
    if (!f) throw std::runtime_error("dataset: truncated payload in " + path);
    for (std::int64_t b = 0; b < d.n_batches(); ++b) {
      if (!std::getline(f, line) || line != "params " + std::to_string(b))
        throw std::runtime_error("dataset: missing parameter record in " + path);
      std::vector<std::pair<std::string, double>> rec;
      while (std::getline(f, line) && line != "end") {
        const auto eq = line.find('=');
        if (eq == std::string::npos)
          throw std::runtime_error("dataset: malformed parameter line in " + path);
        rec.emplace_back(line.substr(0, eq), std::stod(line.substr(eq + 1)));
      }
      d.batch_params.push_back(std::move(rec));
    }
    d.validate();
    return d;
  }
};

}  // namespace enma
