#pragma once

// Dataset schema, JSONL ingestion/validation, face-name co-occurrence
// statistics and subset partitioning.

#include <Eigen/Core>
#include <json.hpp>

#include <cstdio>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "facecap/tokenizer.hpp"

namespace facecap {

class ValidationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class EntityType { PERSON, GPE, ORG, OTHER };

inline std::string to_string(EntityType t) {
  switch (t) {
    case EntityType::PERSON: return "PERSON";
    case EntityType::GPE: return "GPE";
    case EntityType::ORG: return "ORG";
    default: return "OTHER";
  }
}

inline EntityType entity_type_from(const std::string& s) {
  if (s == "PERSON") return EntityType::PERSON;
  if (s == "GPE") return EntityType::GPE;
  if (s == "ORG") return EntityType::ORG;
  if (s == "OTHER") return EntityType::OTHER;
  throw ValidationError("unknown entity type: " + s);
}

// Token-offset span into the whitespace-tokenized caption.
struct EntitySpan {
  std::string surface;
  EntityType type = EntityType::OTHER;
  int start = 0;
  int end = 0;
};

struct Sample {
  std::string id;
  std::vector<std::string> sentences;
  std::string caption;
  std::vector<EntitySpan> entities;
  std::vector<std::string> names;  // person-name chain, article order
  std::vector<Eigen::VectorXd> faces;
  Eigen::VectorXd image_emb;  // size 0 = absent
  std::string image_path;     // empty = absent
  int anchor = 0;             // image-anchor sentence index

  bool has_faces() const { return !faces.empty(); }
  bool has_person_name() const {
    for (const auto& e : entities)
      if (e.type == EntityType::PERSON) return true;
    return false;
  }
};

inline void validate_sample(const Sample& s, const std::string& where) {
  auto fail = [&](const std::string& field, const std::string& msg) {
    throw ValidationError(where + ": field '" + field + "': " + msg);
  };
  if (s.sentences.empty()) fail("sentences", "must be non-empty");
  for (const auto& sent : s.sentences)
    if (sent.empty()) fail("sentences", "contains an empty sentence");
  if (s.caption.empty()) fail("caption", "must be non-empty");
  Eigen::Index d = -1;
  for (const auto& f : s.faces) {
    if (f.size() == 0) fail("faces", "zero-dimensional face vector");
    if (d < 0) d = f.size();
    if (f.size() != d)
      fail("faces", "face vector dimension mismatch within sample: " +
                        std::to_string(f.size()) + " vs " + std::to_string(d));
  }
  auto tokens = split_words(s.caption);
  for (const auto& e : s.entities) {
    if (e.start >= e.end) fail("entities", "span start must be < end");
    if (e.start < 0 || e.end > static_cast<int>(tokens.size()))
      fail("entities", "span [" + std::to_string(e.start) + "," + std::to_string(e.end) +
                           ") outside caption bounds");
    std::string joined;
    for (int i = e.start; i < e.end; ++i) {
      if (i > e.start) joined += ' ';
      joined += tokens[static_cast<size_t>(i)];
    }
    if (joined != e.surface)
      fail("entities", "surface '" + e.surface + "' != caption tokens '" + joined + "'");
  }
  if (s.anchor < 0 || s.anchor >= static_cast<int>(s.sentences.size()))
    fail("anchor", "anchor sentence index out of range");
}

namespace detail {

inline std::string fmt6(double x) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.6f", x);
  return buf;
}

inline std::string jstr(const std::string& s) { return nlohmann::json(s).dump(); }

}  // namespace detail

// Canonical single-line JSON: keys sorted, floats at 6 decimal digits.
inline std::string serialize_sample(const Sample& s) {
  std::ostringstream o;
  o << '{';
  if (s.anchor != 0) o << "\"anchor\":" << s.anchor << ',';
  o << "\"caption\":" << detail::jstr(s.caption) << ',';
  o << "\"entities\":[";
  for (size_t i = 0; i < s.entities.size(); ++i) {
    const auto& e = s.entities[i];
    if (i) o << ',';
    o << "{\"end\":" << e.end << ",\"start\":" << e.start
      << ",\"surface\":" << detail::jstr(e.surface)
      << ",\"type\":" << detail::jstr(to_string(e.type)) << '}';
  }
  o << "],\"faces\":[";
  for (size_t i = 0; i < s.faces.size(); ++i) {
    if (i) o << ',';
    o << '[';
    for (Eigen::Index j = 0; j < s.faces[i].size(); ++j) {
      if (j) o << ',';
      o << detail::fmt6(s.faces[i](j));
    }
    o << ']';
  }
  o << "],\"id\":" << detail::jstr(s.id) << ",\"image_emb\":[";
  for (Eigen::Index j = 0; j < s.image_emb.size(); ++j) {
    if (j) o << ',';
    o << detail::fmt6(s.image_emb(j));
  }
  o << ']';
  if (!s.image_path.empty()) o << ",\"image_path\":" << detail::jstr(s.image_path);
  o << ",\"names\":[";
  for (size_t i = 0; i < s.names.size(); ++i) {
    if (i) o << ',';
    o << detail::jstr(s.names[i]);
  }
  o << "],\"sentences\":[";
  for (size_t i = 0; i < s.sentences.size(); ++i) {
    if (i) o << ',';
    o << detail::jstr(s.sentences[i]);
  }
  o << "]}";
  return o.str();
}

inline Sample parse_sample(const std::string& line, const std::string& where) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(line);
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(where + ": malformed JSON: " + e.what());
  }
  auto need = [&](const char* field) -> const nlohmann::json& {
    if (!j.contains(field))
      throw ValidationError(where + ": field '" + std::string(field) + "': missing");
    return j.at(field);
  };
  Sample s;
  try {
    s.id = need("id").get<std::string>();
    for (const auto& x : need("sentences")) s.sentences.push_back(x.get<std::string>());
    s.caption = need("caption").get<std::string>();
    for (const auto& x : need("entities")) {
      EntitySpan e;
      e.surface = x.at("surface").get<std::string>();
      e.type = entity_type_from(x.at("type").get<std::string>());
      e.start = x.at("start").get<int>();
      e.end = x.at("end").get<int>();
      s.entities.push_back(e);
    }
    for (const auto& x : need("names")) s.names.push_back(x.get<std::string>());
    for (const auto& fx : need("faces")) {
      Eigen::VectorXd v(fx.size());
      Eigen::Index i = 0;
      for (const auto& x : fx) v(i++) = x.get<double>();
      s.faces.push_back(std::move(v));
    }
    const auto& emb = need("image_emb");
    s.image_emb.resize(emb.size());
    {
      Eigen::Index i = 0;
      for (const auto& x : emb) s.image_emb(i++) = x.get<double>();
    }
    if (j.contains("image_path")) s.image_path = j.at("image_path").get<std::string>();
    if (j.contains("anchor")) s.anchor = j.at("anchor").get<int>();
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(where + ": schema error: " + e.what());
  }
  validate_sample(s, where);
  return s;
}

inline std::vector<Sample> load_dataset(const std::string& path,
                                        const std::string& schema_version = "1") {
  if (schema_version != "1")
    throw ValidationError("unsupported schema version: " + schema_version);
  std::ifstream f(path);
  if (!f) throw ValidationError("cannot open dataset: " + path);
  std::vector<Sample> out;
  std::string line;
  int lineno = 0;
  Eigen::Index d_face = -1;
  while (std::getline(f, line)) {
    ++lineno;
    if (line.empty()) continue;
    Sample s = parse_sample(line, path + ":" + std::to_string(lineno));
    if (!s.faces.empty()) {
      if (d_face < 0) d_face = s.faces[0].size();
      if (s.faces[0].size() != d_face)
        throw ValidationError(path + ":" + std::to_string(lineno) +
                              ": field 'faces': dimension mismatch across dataset: " +
                              std::to_string(s.faces[0].size()) + " vs " +
                              std::to_string(d_face));
    }
    out.push_back(std::move(s));
  }
  return out;
}

inline void save_dataset(const std::vector<Sample>& samples, const std::string& path) {
  std::ofstream f(path);
  if (!f) throw std::runtime_error("cannot open for writing: " + path);
  for (const auto& s : samples) f << serialize_sample(s) << '\n';
}

// Face-presence x person-name-presence cells.
enum class Cell { FyNy, FnNn, FyNn, FnNy };

inline Cell cell_of(const Sample& s) {
  bool face = s.has_faces();
  bool name = s.has_person_name();
  if (face && name) return Cell::FyNy;
  if (!face && !name) return Cell::FnNn;
  if (face) return Cell::FyNn;
  return Cell::FnNy;
}

inline std::string to_string(Cell c) {
  switch (c) {
    case Cell::FyNy: return "F+N+";
    case Cell::FnNn: return "F-N-";
    case Cell::FyNn: return "F+N-";
    default: return "F-N+";
  }
}

struct CooccurrenceStats {
  std::map<Cell, std::size_t> counts;
  std::map<Cell, double> fractions;
  std::size_t total = 0;
};

inline CooccurrenceStats compute_cooccurrence(const std::vector<Sample>& samples) {
  if (samples.empty()) throw ValidationError("compute_cooccurrence: empty dataset");
  CooccurrenceStats st;
  for (Cell c : {Cell::FyNy, Cell::FnNn, Cell::FyNn, Cell::FnNy}) st.counts[c] = 0;
  for (const auto& s : samples) st.counts[cell_of(s)]++;
  st.total = samples.size();
  for (auto& [c, n] : st.counts)
    st.fractions[c] = static_cast<double>(n) / static_cast<double>(st.total);
  return st;
}

inline std::map<Cell, std::vector<Sample>> split_subsets(const std::vector<Sample>& samples) {
  std::map<Cell, std::vector<Sample>> out;
  for (Cell c : {Cell::FyNy, Cell::FnNn, Cell::FyNn, Cell::FnNy}) out[c] = {};
  for (const auto& s : samples) out[cell_of(s)].push_back(s);
  return out;
}

}  // namespace facecap
