#pragma once

#include <charconv>
#include <cmath>
#include <cstddef>
#include <istream>
#include <map>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include <json.hpp>

#include "rcal/error.hpp"
#include "rcal/matrix.hpp"

namespace rcal {

using json = nlohmann::json;
using ordered_json = nlohmann::ordered_json;

// One scored response: the unit of calibration.
struct ScoredSample {
  std::string id;
  std::optional<std::string> group;
  std::optional<std::string> prompt_id;
  std::optional<std::string> text;
  std::map<std::string, double> characteristics;
  double reward = 0.0;

  bool operator==(const ScoredSample&) const = default;
};

struct PreferencePair {
  std::string pair_id;
  std::string better_id;
  std::string worse_id;

  bool operator==(const PreferencePair&) const = default;
};

// Ordered, id-indexed collection of samples. Iteration order is insertion
// (file) order.
class SampleSet {
 public:
  SampleSet() = default;

  void add(ScoredSample sample) {
    if (sample.id.empty()) throw DataError("sample id must be non-empty");
    if (!std::isfinite(sample.reward)) {
      throw DataError("non-finite reward for sample '" + sample.id + "'");
    }
    if (index_.contains(sample.id)) {
      throw DataError("duplicate sample id '" + sample.id + "'");
    }
    index_.emplace(sample.id, samples_.size());
    samples_.push_back(std::move(sample));
  }

  std::size_t size() const { return samples_.size(); }
  bool empty() const { return samples_.empty(); }
  const ScoredSample& operator[](std::size_t i) const { return samples_[i]; }
  auto begin() const { return samples_.begin(); }
  auto end() const { return samples_.end(); }
  const std::vector<ScoredSample>& samples() const { return samples_; }

  std::optional<std::size_t> index_of(std::string_view id) const {
    auto it = index_.find(std::string(id));
    if (it == index_.end()) return std::nullopt;
    return it->second;
  }

  const ScoredSample& at(std::string_view id) const {
    auto pos = index_of(id);
    if (!pos) throw DataError("unknown sample id '" + std::string(id) + "'");
    return samples_[*pos];
  }

  std::vector<double> rewards() const {
    std::vector<double> out;
    out.reserve(samples_.size());
    for (const auto& s : samples_) out.push_back(s.reward);
    return out;
  }

  bool operator==(const SampleSet& other) const { return samples_ == other.samples_; }

 private:
  std::vector<ScoredSample> samples_;
  std::unordered_map<std::string, std::size_t> index_;
};

enum class SampleFormat { jsonl, csv };

inline SampleFormat parse_sample_format(std::string_view name) {
  if (name == "jsonl") return SampleFormat::jsonl;
  if (name == "csv") return SampleFormat::csv;
  throw ConfigError("unknown sample format '" + std::string(name) + "'");
}

namespace detail {

inline std::string at_line(std::size_t line) { return " at line " + std::to_string(line); }

// Accepts strings and integers for identifier-like fields.
inline std::optional<std::string> optional_id_field(const json& obj, const char* key,
                                                    std::size_t line) {
  auto it = obj.find(key);
  if (it == obj.end() || it->is_null()) return std::nullopt;
  if (it->is_string()) return it->get<std::string>();
  if (it->is_number_integer()) return it->dump();
  throw DataError(std::string("field '") + key + "' must be a string" + at_line(line));
}

inline double finite_number(const json& value, const std::string& what, std::size_t line) {
  if (!value.is_number()) throw DataError(what + " must be a number" + at_line(line));
  const double v = value.get<double>();
  if (!std::isfinite(v)) throw DataError("non-finite " + what + at_line(line));
  return v;
}

inline bool blank(std::string_view s) {
  return s.find_first_not_of(" \t\r\n") == std::string_view::npos;
}

inline json parse_json_line(const std::string& line, std::size_t line_no) {
  try {
    return json::parse(line);
  } catch (const json::exception& e) {
    throw DataError("malformed JSON" + at_line(line_no) + ": " + e.what());
  }
}

inline ScoredSample sample_from_json(const json& obj, std::size_t line) {
  if (!obj.is_object()) throw DataError("record is not an object" + at_line(line));
  ScoredSample s;
  auto id = optional_id_field(obj, "id", line);
  if (!id) throw DataError("missing id" + at_line(line));
  if (id->empty()) throw DataError("empty id" + at_line(line));
  s.id = std::move(*id);
  auto reward = obj.find("reward");
  if (reward == obj.end() || reward->is_null()) throw DataError("missing reward" + at_line(line));
  s.reward = finite_number(*reward, "reward", line);
  s.group = optional_id_field(obj, "group", line);
  s.prompt_id = optional_id_field(obj, "prompt_id", line);
  if (auto text = obj.find("text"); text != obj.end() && !text->is_null()) {
    if (!text->is_string()) throw DataError("field 'text' must be a string" + at_line(line));
    s.text = text->get<std::string>();
  }
  if (auto chars = obj.find("characteristics"); chars != obj.end() && !chars->is_null()) {
    if (!chars->is_object()) {
      throw DataError("field 'characteristics' must be an object" + at_line(line));
    }
    for (const auto& [name, value] : chars->items()) {
      s.characteristics[name] = finite_number(value, "characteristic '" + name + "'", line);
    }
  }
  return s;
}

// RFC-4180 record reader. Returns false at end of input. `line` is advanced
// past every physical line consumed; `start_line` receives the first one.
inline bool read_csv_record(std::istream& in, std::vector<std::string>& fields,
                            std::size_t& line, std::size_t& start_line) {
  fields.clear();
  if (in.peek() == std::char_traits<char>::eof()) return false;
  start_line = line + 1;
  std::string field;
  bool quoted = false;
  bool was_quoted = false;
  char ch;
  while (in.get(ch)) {
    if (quoted) {
      if (ch == '"') {
        if (in.peek() == '"') {
          in.get(ch);
          field.push_back('"');
        } else {
          quoted = false;
        }
      } else {
        if (ch == '\n') ++line;
        field.push_back(ch);
      }
      continue;
    }
    if (ch == '"' && field.empty() && !was_quoted) {
      quoted = true;
      was_quoted = true;
    } else if (ch == ',') {
      fields.push_back(std::move(field));
      field.clear();
      was_quoted = false;
    } else if (ch == '\n') {
      ++line;
      if (!field.empty() && field.back() == '\r') field.pop_back();
      fields.push_back(std::move(field));
      return true;
    } else {
      field.push_back(ch);
    }
  }
  if (quoted) throw DataError("unterminated quoted field" + at_line(start_line));
  ++line;
  if (!field.empty() && field.back() == '\r') field.pop_back();
  fields.push_back(std::move(field));
  return true;
}

inline double parse_csv_number(const std::string& cell, const std::string& what,
                               std::size_t line) {
  double v = 0.0;
  const char* first = cell.data();
  const char* last = cell.data() + cell.size();
  while (first < last && *first == ' ') ++first;
  while (last > first && *(last - 1) == ' ') --last;
  if (first < last && *first == '+') ++first;
  auto [ptr, ec] = std::from_chars(first, last, v);
  if (ec != std::errc() || ptr != last) {
    throw DataError("invalid number for " + what + at_line(line));
  }
  if (!std::isfinite(v)) throw DataError("non-finite " + what + at_line(line));
  return v;
}

inline SampleSet parse_samples_csv(std::istream& in) {
  std::size_t line = 0;
  std::size_t start = 0;
  std::vector<std::string> header;
  if (!read_csv_record(in, header, line, start)) throw DataError("missing CSV header row");
  std::optional<std::size_t> col_id, col_reward, col_group, col_prompt, col_text;
  std::vector<std::pair<std::size_t, std::string>> char_cols;
  for (std::size_t c = 0; c < header.size(); ++c) {
    const auto& h = header[c];
    if (h == "id") col_id = c;
    else if (h == "reward") col_reward = c;
    else if (h == "group") col_group = c;
    else if (h == "prompt_id") col_prompt = c;
    else if (h == "text") col_text = c;
    else if (h.starts_with("c_") && h.size() > 2) char_cols.emplace_back(c, h.substr(2));
  }
  if (!col_id) throw DataError("CSV header lacks 'id' column");
  if (!col_reward) throw DataError("CSV header lacks 'reward' column");

  SampleSet set;
  std::vector<std::string> fields;
  while (read_csv_record(in, fields, line, start)) {
    if (fields.size() == 1 && blank(fields[0])) continue;
    if (fields.size() != header.size()) {
      throw DataError("expected " + std::to_string(header.size()) + " fields, got " +
                      std::to_string(fields.size()) + at_line(start));
    }
    ScoredSample s;
    s.id = fields[*col_id];
    if (s.id.empty()) throw DataError("missing id" + at_line(start));
    if (blank(fields[*col_reward])) throw DataError("missing reward" + at_line(start));
    s.reward = parse_csv_number(fields[*col_reward], "reward", start);
    if (col_group && !fields[*col_group].empty()) s.group = fields[*col_group];
    if (col_prompt && !fields[*col_prompt].empty()) s.prompt_id = fields[*col_prompt];
    if (col_text && !fields[*col_text].empty()) s.text = fields[*col_text];
    for (const auto& [c, name] : char_cols) {
      if (blank(fields[c])) continue;
      s.characteristics[name] = parse_csv_number(fields[c], "characteristic '" + name + "'", start);
    }
    try {
      set.add(std::move(s));
    } catch (const DataError& e) {
      throw DataError(e.what() + at_line(start));
    }
  }
  return set;
}

}  // namespace detail

inline SampleSet parse_samples_jsonl(std::istream& in) {
  SampleSet set;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (detail::blank(line)) continue;
    auto sample = detail::sample_from_json(detail::parse_json_line(line, line_no), line_no);
    try {
      set.add(std::move(sample));
    } catch (const DataError& e) {
      throw DataError(e.what() + detail::at_line(line_no));
    }
  }
  return set;
}

inline SampleSet parse_samples(std::istream& in, SampleFormat format) {
  return format == SampleFormat::csv ? detail::parse_samples_csv(in) : parse_samples_jsonl(in);
}

inline std::vector<PreferencePair> parse_pairs(std::istream& in) {
  std::vector<PreferencePair> pairs;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (detail::blank(line)) continue;
    const json obj = detail::parse_json_line(line, line_no);
    if (!obj.is_object()) throw DataError("record is not an object" + detail::at_line(line_no));
    PreferencePair p;
    auto better = detail::optional_id_field(obj, "better_id", line_no);
    auto worse = detail::optional_id_field(obj, "worse_id", line_no);
    if (!better) throw DataError("missing better_id" + detail::at_line(line_no));
    if (!worse) throw DataError("missing worse_id" + detail::at_line(line_no));
    if (*better == *worse) {
      throw DataError("better_id equals worse_id ('" + *better + "')" + detail::at_line(line_no));
    }
    p.better_id = std::move(*better);
    p.worse_id = std::move(*worse);
    p.pair_id = detail::optional_id_field(obj, "pair_id", line_no)
                    .value_or(std::to_string(pairs.size()));
    pairs.push_back(std::move(p));
  }
  return pairs;
}

// Throws naming the first pair id reference that does not resolve.
inline void validate_pairs(std::span<const PreferencePair> pairs, const SampleSet& set) {
  for (const auto& p : pairs) {
    for (const auto* id : {&p.better_id, &p.worse_id}) {
      if (!set.index_of(*id)) {
        throw DataError("pair '" + p.pair_id + "' references unknown sample id '" + *id + "'");
      }
    }
  }
}

inline ordered_json sample_to_json(const ScoredSample& s) {
  ordered_json obj;
  obj["id"] = s.id;
  if (s.group) obj["group"] = *s.group;
  if (s.prompt_id) obj["prompt_id"] = *s.prompt_id;
  if (s.text) obj["text"] = *s.text;
  if (!s.characteristics.empty()) {
    ordered_json chars = ordered_json::object();
    for (const auto& [name, value] : s.characteristics) chars[name] = value;
    obj["characteristics"] = std::move(chars);
  }
  obj["reward"] = s.reward;
  return obj;
}

inline void write_samples_jsonl(std::ostream& out, const SampleSet& set) {
  for (const auto& s : set) out << sample_to_json(s).dump() << '\n';
}

inline ordered_json pair_to_json(const PreferencePair& p) {
  return ordered_json{{"pair_id", p.pair_id}, {"better_id", p.better_id}, {"worse_id", p.worse_id}};
}

inline void write_pairs_jsonl(std::ostream& out, std::span<const PreferencePair> pairs) {
  for (const auto& p : pairs) out << pair_to_json(p).dump() << '\n';
}

// Number of Unicode scalar values in UTF-8 text (non-continuation bytes).
inline double char_length(std::string_view text) {
  std::size_t count = 0;
  for (unsigned char c : text) {
    if ((c & 0xC0U) != 0x80U) ++count;
  }
  return static_cast<double>(count);
}

namespace detail {

inline std::string_view skip_indent(std::string_view line) {
  std::size_t i = 0;
  while (i < line.size() && (line[i] == ' ' || line[i] == '\t')) ++i;
  return line.substr(i);
}

inline bool is_header_line(std::string_view line) {
  auto rest = skip_indent(line);
  std::size_t hashes = 0;
  while (hashes < rest.size() && rest[hashes] == '#') ++hashes;
  return hashes >= 1 && hashes <= 6 && hashes < rest.size() && rest[hashes] == ' ';
}

inline bool is_list_line(std::string_view line) {
  auto rest = skip_indent(line);
  if (rest.size() >= 2 && (rest[0] == '-' || rest[0] == '*' || rest[0] == '+') && rest[1] == ' ') {
    return true;
  }
  std::size_t digits = 0;
  while (digits < rest.size() && rest[digits] >= '0' && rest[digits] <= '9') ++digits;
  return digits > 0 && digits + 1 < rest.size() && (rest[digits] == '.' || rest[digits] == ')') &&
         rest[digits + 1] == ' ';
}

// Leftmost non-overlapping `**x**` spans with a non-empty interior.
inline std::size_t count_bold_spans(std::string_view line) {
  std::size_t count = 0;
  std::size_t i = 0;
  while (i + 1 < line.size()) {
    if (line[i] == '*' && line[i + 1] == '*') {
      auto close = line.find("**", i + 3);
      if (close != std::string_view::npos) {
        ++count;
        i = close + 2;
        continue;
      }
    }
    ++i;
  }
  return count;
}

}  // namespace detail

// Header lines + list-item lines + bold spans. Lines split on '\n'; a
// trailing '\r' is dropped. Bold spans do not cross line breaks.
inline double markdown_features(std::string_view text) {
  std::size_t total = 0;
  std::size_t pos = 0;
  while (pos <= text.size()) {
    auto nl = text.find('\n', pos);
    auto line = text.substr(pos, nl == std::string_view::npos ? std::string_view::npos : nl - pos);
    if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
    if (detail::is_header_line(line)) ++total;
    if (detail::is_list_line(line)) ++total;
    total += detail::count_bold_spans(line);
    if (nl == std::string_view::npos) break;
    pos = nl + 1;
  }
  return static_cast<double>(total);
}

// Characteristics that can be derived from raw text.
inline std::optional<double> text_characteristic(std::string_view name, std::string_view text) {
  if (name == "length") return char_length(text);
  if (name == "markdown") return markdown_features(text);
  return std::nullopt;
}

inline double characteristic_of(const ScoredSample& s, const std::string& name) {
  if (auto it = s.characteristics.find(name); it != s.characteristics.end()) return it->second;
  if (s.text) {
    if (auto v = text_characteristic(name, *s.text)) return *v;
  }
  throw DataError("sample '" + s.id + "' has no value for characteristic '" + name + "'");
}

// Explicit values take precedence over text extraction.
inline std::vector<double> extract_characteristic(const SampleSet& set, const std::string& name) {
  std::vector<double> out;
  out.reserve(set.size());
  for (const auto& s : set) {
    const double v = characteristic_of(s, name);
    if (!std::isfinite(v)) {
      throw DataError("non-finite characteristic '" + name + "' for sample '" + s.id + "'");
    }
    out.push_back(v);
  }
  return out;
}

inline Matrix extract_characteristics(const SampleSet& set, std::span<const std::string> names) {
  Matrix m(set.size(), names.size());
  for (std::size_t c = 0; c < names.size(); ++c) m.set_column(c, extract_characteristic(set, names[c]));
  return m;
}

// Column-wise z-score with population standard deviation. Constant columns
// become zeros.
inline Matrix zscore_normalize(const Matrix& in) {
  Matrix out(in.rows(), in.cols());
  const auto n = static_cast<double>(in.rows());
  for (std::size_t c = 0; c < in.cols(); ++c) {
    const auto col = in.column(c);
    if (col.empty()) continue;
    bool constant = true;
    for (double v : col) constant = constant && v == col.front();
    if (constant) continue;
    double mean = 0.0;
    for (double v : col) mean += v;
    mean /= n;
    double ss = 0.0;
    for (double v : col) ss += (v - mean) * (v - mean);
    const double sd = std::sqrt(ss / n);
    std::vector<double> z(col.size());
    double zmean = 0.0;
    for (std::size_t r = 0; r < col.size(); ++r) {
      z[r] = (col[r] - mean) / sd;
      zmean += z[r];
    }
    // recentre: removes rounding left over from the first mean
    zmean /= n;
    for (double& v : z) v -= zmean;
    out.set_column(c, z);
  }
  return out;
}

}  // namespace rcal
