#pragma once

#include <Eigen/Dense>

#include <cstdio>
#include <fstream>
#include <memory>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "grumpc/gru.hpp"
#include "grumpc/observer.hpp"
#include "grumpc/tightening.hpp"
#include "grumpc/training.hpp"
#include "grumpc/util.hpp"

namespace grumpc {

/// File access and schema problems (weights, configs, CSVs). The CLI maps
/// this family to its I/O exit code.
struct IoError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

namespace detail {

inline std::string format_g17(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

inline double parse_double(const std::string& token, const std::string& where) {
  try {
    size_t used = 0;
    double v = std::stod(token, &used);
    if (used != token.size()) throw std::invalid_argument("trailing characters");
    return v;
  } catch (const std::exception&) {
    throw IoError(where + ": not a number: '" + token + "'");
  }
}

inline long parse_long(const std::string& token, const std::string& where) {
  try {
    size_t used = 0;
    long v = std::stol(token, &used);
    if (used != token.size()) throw std::invalid_argument("trailing characters");
    return v;
  } catch (const std::exception&) {
    throw IoError(where + ": not an integer: '" + token + "'");
  }
}

inline std::vector<std::string> split_tokens(const std::string& line) {
  std::vector<std::string> tokens;
  std::istringstream in(line);
  std::string tok;
  while (in >> tok) tokens.push_back(tok);
  return tokens;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Weights file: versioned, line-oriented, 17-significant-digit round trip.
// ---------------------------------------------------------------------------

inline constexpr const char* kWeightsSchema = "grumpc.weights.v1";

namespace detail {

inline void write_block(std::ostream& out, const std::string& name, const MatrixXd& M) {
  out << name << ' ' << M.rows() << ' ' << M.cols() << '\n';
  for (Eigen::Index i = 0; i < M.rows(); ++i) {
    for (Eigen::Index j = 0; j < M.cols(); ++j) {
      if (j > 0) out << ' ';
      out << format_g17(M(i, j));
    }
    out << '\n';
  }
}

inline void write_block(std::ostream& out, const std::string& name, const VectorXd& v) {
  write_block(out, name, MatrixXd(v.transpose()));
}

class BlockReader {
 public:
  BlockReader(std::istream& in, std::string path) : in_(in), path_(std::move(path)) {}

  std::string location() const { return path_ + ":" + std::to_string(line_); }

  bool next_line(std::string& line) {
    while (std::getline(in_, line)) {
      ++line_;
      if (!split_tokens(line).empty()) return true;
    }
    return false;
  }

  MatrixXd read_block(const std::string& expected, Eigen::Index rows, Eigen::Index cols) {
    std::string line;
    if (!next_line(line)) throw IoError(path_ + ": unexpected end of file, wanted '" + expected + "'");
    std::vector<std::string> head = split_tokens(line);
    if (head.size() != 3 || head[0] != expected)
      throw IoError(location() + ": expected block '" + expected + "', got '" + line + "'");
    if (parse_long(head[1], location()) != rows || parse_long(head[2], location()) != cols)
      throw IoError(location() + ": block '" + expected + "' has wrong shape");
    MatrixXd M(rows, cols);
    for (Eigen::Index i = 0; i < rows; ++i) {
      if (!next_line(line)) throw IoError(path_ + ": unexpected end of file inside '" + expected + "'");
      std::vector<std::string> tokens = split_tokens(line);
      if (static_cast<Eigen::Index>(tokens.size()) != cols)
        throw IoError(location() + ": expected " + std::to_string(cols) + " values");
      for (Eigen::Index j = 0; j < cols; ++j) M(i, j) = parse_double(tokens[j], location());
    }
    return M;
  }

  bool peek_block(std::string& name) {
    std::string line;
    std::streampos pos = in_.tellg();
    int saved_line = line_;
    if (!next_line(line)) return false;
    std::vector<std::string> head = split_tokens(line);
    in_.seekg(pos);
    line_ = saved_line;
    name = head.empty() ? std::string() : head[0];
    return !head.empty();
  }

 private:
  std::istream& in_;
  std::string path_;
  int line_ = 0;
};

}  // namespace detail

inline void save_weights(const std::string& path, const GruParams& g,
                         const ObserverGains* gains = nullptr) {
  g.validate();
  std::ofstream out(path);
  if (!out) throw IoError("cannot open for writing: " + path);
  out << kWeightsSchema << '\n';
  out << "dims " << g.n << ' ' << g.m << ' ' << g.p << '\n';
  detail::write_block(out, "W_z", g.W_z);
  detail::write_block(out, "W_r", g.W_r);
  detail::write_block(out, "W_h", g.W_h);
  detail::write_block(out, "U_z", g.U_z);
  detail::write_block(out, "U_r", g.U_r);
  detail::write_block(out, "U_h", g.U_h);
  detail::write_block(out, "U_o", g.U_o);
  detail::write_block(out, "b_z", g.b_z);
  detail::write_block(out, "b_r", g.b_r);
  detail::write_block(out, "b_h", g.b_h);
  detail::write_block(out, "b_o", g.b_o);
  detail::write_block(out, "input_offset", g.input_scaler.offset);
  detail::write_block(out, "input_half_range", g.input_scaler.half_range);
  detail::write_block(out, "output_offset", g.output_scaler.offset);
  detail::write_block(out, "output_half_range", g.output_scaler.half_range);
  if (gains != nullptr) {
    gains->validate(g.n, g.p);
    detail::write_block(out, "L_z", gains->L_z);
    detail::write_block(out, "L_r", gains->L_r);
  }
  if (!out) throw IoError("write failed: " + path);
}

inline GruParams load_weights(const std::string& path, ObserverGains* gains = nullptr,
                              bool* have_gains = nullptr) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open: " + path);
  detail::BlockReader reader(in, path);
  std::string line;
  if (!reader.next_line(line) || detail::split_tokens(line) != std::vector<std::string>{kWeightsSchema})
    throw IoError(path + ": missing schema header '" + std::string(kWeightsSchema) + "'");
  if (!reader.next_line(line)) throw IoError(path + ": missing dims line");
  std::vector<std::string> dims = detail::split_tokens(line);
  if (dims.size() != 4 || dims[0] != "dims")
    throw IoError(reader.location() + ": expected 'dims n m p'");
  const int n = static_cast<int>(detail::parse_long(dims[1], reader.location()));
  const int m = static_cast<int>(detail::parse_long(dims[2], reader.location()));
  const int p = static_cast<int>(detail::parse_long(dims[3], reader.location()));
  if (n < 1 || m < 1 || p < 1) throw IoError(reader.location() + ": dims must be >= 1");

  GruParams g = GruParams::zeros(n, m, p);
  g.W_z = reader.read_block("W_z", n, m);
  g.W_r = reader.read_block("W_r", n, m);
  g.W_h = reader.read_block("W_h", n, m);
  g.U_z = reader.read_block("U_z", n, n);
  g.U_r = reader.read_block("U_r", n, n);
  g.U_h = reader.read_block("U_h", n, n);
  g.U_o = reader.read_block("U_o", p, n);
  g.b_z = reader.read_block("b_z", 1, n).transpose();
  g.b_r = reader.read_block("b_r", 1, n).transpose();
  g.b_h = reader.read_block("b_h", 1, n).transpose();
  g.b_o = reader.read_block("b_o", 1, p).transpose();
  g.input_scaler.offset = reader.read_block("input_offset", 1, m).transpose();
  g.input_scaler.half_range = reader.read_block("input_half_range", 1, m).transpose();
  g.output_scaler.offset = reader.read_block("output_offset", 1, p).transpose();
  g.output_scaler.half_range = reader.read_block("output_half_range", 1, p).transpose();

  bool observer_present = false;
  std::string name;
  if (reader.peek_block(name)) {
    if (name != "L_z") throw IoError(path + ": unexpected trailing block '" + name + "'");
    ObserverGains loaded;
    loaded.L_z = reader.read_block("L_z", n, p);
    loaded.L_r = reader.read_block("L_r", n, p);
    observer_present = true;
    if (gains != nullptr) *gains = loaded;
    if (reader.peek_block(name)) throw IoError(path + ": unexpected trailing block '" + name + "'");
  }
  if (have_gains != nullptr) *have_gains = observer_present;

  try {
    g.validate();
  } catch (const std::invalid_argument& e) {
    throw IoError(path + ": invalid weights: " + e.what());
  }
  return g;
}

// ---------------------------------------------------------------------------
// Config: brace-tree structured text with strict unknown-key rejection.
// ---------------------------------------------------------------------------

struct ConfigNode {
  struct Entry {
    std::string key;
    int line = 0;
    std::vector<std::string> tokens;      // leaf values (empty for subtrees)
    std::unique_ptr<ConfigNode> child;    // subtree (null for leaves)
    mutable bool consumed = false;
  };
  std::vector<Entry> entries;

  const Entry* find(const std::string& key) const {
    for (const Entry& e : entries)
      if (e.key == key) return &e;
    return nullptr;
  }

  std::vector<const Entry*> all(const std::string& key) const {
    std::vector<const Entry*> out;
    for (const Entry& e : entries)
      if (e.key == key) {
        e.consumed = true;
        out.push_back(&e);
      }
    return out;
  }
};

inline ConfigNode parse_config_text(std::istream& in, const std::string& path) {
  ConfigNode root;
  std::vector<ConfigNode*> stack{&root};
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const std::string where = path + ":" + std::to_string(line_no);
    size_t hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    std::vector<std::string> tokens = detail::split_tokens(line);
    if (tokens.empty()) continue;
    if (tokens.size() == 1 && tokens[0] == "}") {
      if (stack.size() == 1) throw IoError(where + ": unmatched '}'");
      stack.pop_back();
      continue;
    }
    if (tokens.back() == "{") {
      if (tokens.size() != 2) throw IoError(where + ": expected 'key {'");
      ConfigNode::Entry entry;
      entry.key = tokens[0];
      entry.line = line_no;
      entry.child = std::make_unique<ConfigNode>();
      stack.back()->entries.push_back(std::move(entry));
      stack.push_back(stack.back()->entries.back().child.get());
      continue;
    }
    if (tokens.size() < 2) throw IoError(where + ": key '" + tokens[0] + "' has no value");
    ConfigNode::Entry entry;
    entry.key = tokens[0];
    entry.line = line_no;
    entry.tokens.assign(tokens.begin() + 1, tokens.end());
    stack.back()->entries.push_back(std::move(entry));
  }
  if (stack.size() != 1) throw IoError(path + ": unclosed '{' at end of file");
  return root;
}

inline ConfigNode load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open: " + path);
  return parse_config_text(in, path);
}

/// Typed accessor over one subtree. Every successful access marks the entry
/// consumed; finish() rejects anything left over, so misspellled or
/// unsupported keys fail loudly with their line number.
class ConfigSection {
 public:
  ConfigSection(const ConfigNode* node, std::string path, std::string name)
      : node_(node), path_(std::move(path)), name_(std::move(name)) {}

  bool has(const std::string& key) const { return node_->find(key) != nullptr; }

  std::string word(const std::string& key) const {
    const ConfigNode::Entry* e = leaf(key);
    if (e->tokens.size() != 1) throw IoError(where(e) + ": expected a single value for '" + key + "'");
    return e->tokens[0];
  }

  std::string word_or(const std::string& key, const std::string& fallback) const {
    return has(key) ? word(key) : fallback;
  }

  double number(const std::string& key) const {
    const ConfigNode::Entry* e = leaf(key);
    if (e->tokens.size() != 1) throw IoError(where(e) + ": expected a single number for '" + key + "'");
    return detail::parse_double(e->tokens[0], where(e));
  }

  double number_or(const std::string& key, double fallback) const {
    return has(key) ? number(key) : fallback;
  }

  long integer(const std::string& key) const {
    const ConfigNode::Entry* e = leaf(key);
    if (e->tokens.size() != 1) throw IoError(where(e) + ": expected a single integer for '" + key + "'");
    return detail::parse_long(e->tokens[0], where(e));
  }

  long integer_or(const std::string& key, long fallback) const {
    return has(key) ? integer(key) : fallback;
  }

  VectorXd vector(const std::string& key) const {
    const ConfigNode::Entry* e = leaf(key);
    VectorXd v(e->tokens.size());
    for (size_t i = 0; i < e->tokens.size(); ++i)
      v(static_cast<Eigen::Index>(i)) = detail::parse_double(e->tokens[i], where(e));
    return v;
  }

  VectorXd vector_or(const std::string& key, const VectorXd& fallback) const {
    return has(key) ? vector(key) : fallback;
  }

  std::vector<std::vector<std::string>> rows(const std::string& key) const {
    std::vector<std::vector<std::string>> out;
    for (const ConfigNode::Entry* e : node_->all(key)) {
      if (e->child) throw IoError(where(e) + ": '" + key + "' must be a value line, not a block");
      out.push_back(e->tokens);
    }
    return out;
  }

  ConfigSection section(const std::string& key) const {
    const ConfigNode::Entry* e = node_->find(key);
    if (e == nullptr) throw IoError(path_ + ": missing required section '" + scoped(key) + "'");
    if (!e->child) throw IoError(where(e) + ": '" + key + "' must be a block");
    e->consumed = true;
    return ConfigSection(e->child.get(), path_, scoped(key));
  }

  std::optional<ConfigSection> maybe_section(const std::string& key) const {
    if (!has(key)) return std::nullopt;
    return section(key);
  }

  /// Rejects unconsumed keys in this subtree (not recursing into consumed
  /// subtrees, which enforce their own keys when read).
  void finish() const {
    for (const ConfigNode::Entry& e : node_->entries) {
      if (!e.consumed)
        throw IoError(path_ + ":" + std::to_string(e.line) + ": unknown key '" + scoped(e.key) + "'");
    }
  }

 private:
  std::string scoped(const std::string& key) const {
    return name_.empty() ? key : name_ + "." + key;
  }

  std::string where(const ConfigNode::Entry* e) const {
    return path_ + ":" + std::to_string(e->line);
  }

  const ConfigNode::Entry* leaf(const std::string& key) const {
    const ConfigNode::Entry* e = node_->find(key);
    if (e == nullptr) throw IoError(path_ + ": missing required key '" + scoped(key) + "'");
    if (e->child) throw IoError(where(e) + ": '" + key + "' must be a value, not a block");
    e->consumed = true;
    return e;
  }

  const ConfigNode* node_;
  std::string path_;
  std::string name_;
};

// ---------------------------------------------------------------------------
// CSV series and schedule dumps.
// ---------------------------------------------------------------------------

inline void write_series_csv(const std::string& path, const std::vector<std::string>& header,
                             const std::vector<VectorXd>& rows) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot open for writing: " + path);
  for (size_t i = 0; i < header.size(); ++i) {
    if (i > 0) out << ',';
    out << header[i];
  }
  out << '\n';
  for (const VectorXd& row : rows) {
    if (static_cast<size_t>(row.size()) != header.size())
      throw IoError(path + ": row width does not match header");
    for (Eigen::Index j = 0; j < row.size(); ++j) {
      if (j > 0) out << ',';
      out << detail::format_g17(row(j));
    }
    out << '\n';
  }
  if (!out) throw IoError("write failed: " + path);
}

/// Reads a CSV with a header row: first column time, then m input columns,
/// then p output columns. Header names are not interpreted.
inline RawSeries read_series_csv(const std::string& path, int m, int p,
                                 std::vector<double>* times = nullptr) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open: " + path);
  std::string line;
  int line_no = 0;
  if (!std::getline(in, line)) throw IoError(path + ": empty file");
  ++line_no;
  RawSeries series;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    std::vector<std::string> cells;
    std::stringstream row(line);
    std::string cell;
    while (std::getline(row, cell, ',')) cells.push_back(cell);
    const std::string where = path + ":" + std::to_string(line_no);
    if (static_cast<int>(cells.size()) != 1 + m + p)
      throw IoError(where + ": expected " + std::to_string(1 + m + p) + " columns, got " +
                    std::to_string(cells.size()));
    if (times != nullptr) times->push_back(detail::parse_double(cells[0], where));
    VectorXd u(m), y(p);
    for (int j = 0; j < m; ++j) u(j) = detail::parse_double(cells[1 + j], where);
    for (int j = 0; j < p; ++j) y(j) = detail::parse_double(cells[1 + m + j], where);
    series.inputs.push_back(std::move(u));
    series.outputs.push_back(std::move(y));
  }
  if (series.inputs.empty()) throw IoError(path + ": no data rows");
  return series;
}

inline void write_schedule_csv(const std::string& path, const TighteningSchedule& s) {
  const int q = static_cast<int>(s.c_row.size());
  std::vector<std::string> header{"i"};
  for (int j = 0; j < q; ++j) header.push_back("a_" + std::to_string(j + 1));
  for (int j = 0; j < q; ++j) header.push_back("b_" + std::to_string(j + 1));
  std::vector<VectorXd> rows;
  for (int i = 0; i <= s.N; ++i) {
    VectorXd row(1 + 2 * q);
    row(0) = i;
    row.segment(1, q) = s.a[i];
    row.segment(1 + q, q) = s.b[i];
    rows.push_back(row);
  }
  write_series_csv(path, header, rows);
}

}  // namespace grumpc
