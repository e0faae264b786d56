#pragma once

// Checkpoint text format, version 1:
//
//   coordrl-checkpoint 1
//   meta <key> <value>                  (zero or more; value runs to end of line)
//   param <name> <rank> <dim>...        (one block per parameter, sorted by name)
//   <value> <value> ...                 (row-major, C99 hex-float literals)
//   end
//
// Hex floats make the round trip bit-exact.

#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <istream>
#include <map>
#include <ostream>
#include <sstream>
#include <stdexcept>
#include <string>

#include "coordrl/diffcore/params.hpp"

namespace coordrl {

struct CheckpointError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct Checkpoint {
  ParamSet params;
  std::map<std::string, std::string> meta;

  friend bool operator==(const Checkpoint&, const Checkpoint&) = default;
};

inline constexpr int kCheckpointVersion = 1;

inline std::string hexfloat(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%a", v);
  return buf;
}

inline void write_checkpoint(std::ostream& os, const Checkpoint& ckpt) {
  os << "coordrl-checkpoint " << kCheckpointVersion << '\n';
  for (const auto& [k, v] : ckpt.meta) {
    if (k.find_first_of(" \t\n") != std::string::npos || v.find('\n') != std::string::npos)
      throw CheckpointError("checkpoint meta key/value contains whitespace or newline: " + k);
    os << "meta " << k << ' ' << v << '\n';
  }
  for (const auto& [name, t] : ckpt.params) {
    os << "param " << name << ' ' << t.rank();
    for (auto d : t.shape()) os << ' ' << d;
    os << '\n';
    for (std::size_t i = 0; i < t.size(); ++i) os << (i ? " " : "") << hexfloat(t[i]);
    os << '\n';
  }
  os << "end\n";
}

inline Checkpoint read_checkpoint(std::istream& is) {
  std::string line;
  if (!std::getline(is, line)) throw CheckpointError("empty checkpoint");
  {
    std::istringstream hs(line);
    std::string magic;
    int version = 0;
    if (!(hs >> magic >> version) || magic != "coordrl-checkpoint")
      throw CheckpointError("not a coordrl checkpoint");
    if (version != kCheckpointVersion)
      throw CheckpointError("unsupported checkpoint version " + std::to_string(version));
  }
  Checkpoint ckpt;
  bool ended = false;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    std::istringstream ls(line);
    std::string tag;
    ls >> tag;
    if (tag == "end") {
      ended = true;
      break;
    }
    if (tag == "meta") {
      std::string key;
      ls >> key;
      std::string value;
      std::getline(ls >> std::ws, value);
      ckpt.meta[key] = value;
    } else if (tag == "param") {
      std::string name;
      std::size_t rank = 0;
      if (!(ls >> name >> rank) || rank > 8) throw CheckpointError("bad param header: " + line);
      Shape shape(rank);
      for (auto& d : shape)
        if (!(ls >> d)) throw CheckpointError("bad param header: " + line);
      std::string values;
      if (!std::getline(is, values)) throw CheckpointError("missing values for " + name);
      std::vector<double> data;
      data.reserve(num_elements(shape));
      const char* p = values.c_str();
      char* endp = nullptr;
      for (std::size_t i = 0; i < num_elements(shape); ++i) {
        const double v = std::strtod(p, &endp);
        if (endp == p) throw CheckpointError("truncated values for " + name);
        data.push_back(v);
        p = endp;
      }
      while (*p == ' ') ++p;
      if (*p != '\0') throw CheckpointError("extra values for " + name);
      try {
        ckpt.params.add(name, Tensor(shape, std::move(data)));
      } catch (const std::invalid_argument& e) {
        throw CheckpointError(e.what());
      }
    } else {
      throw CheckpointError("unexpected line in checkpoint: " + line);
    }
  }
  if (!ended) throw CheckpointError("checkpoint missing end marker");
  return ckpt;
}

inline void save_checkpoint(const std::string& path, const Checkpoint& ckpt) {
  std::ofstream os(path);
  if (!os) throw CheckpointError("cannot write checkpoint: " + path);
  write_checkpoint(os, ckpt);
  if (!os) throw CheckpointError("failed writing checkpoint: " + path);
}

inline Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw CheckpointError("cannot open checkpoint: " + path);
  return read_checkpoint(is);
}

}  // namespace coordrl
