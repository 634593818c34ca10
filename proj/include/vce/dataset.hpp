#pragma once

#include <gdcmImageReader.h>
#include <gdcmReader.h>
#include <gdcmStringFilter.h>
#include <gdcmTrace.h>

#include <algorithm>
#include <cctype>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <tuple>
#include <vector>

#include <nlohmann/json.hpp>

#include "vce/image.hpp"
#include "vce/io.hpp"
#include "vce/random.hpp"

namespace vce::dataset {

namespace fs = std::filesystem;

enum class View { craniocaudal, mediolateral_oblique };
enum class Laterality { left, right };
enum class ImageType { le, des };
enum class Acr { a, b, c, d, unreported };
enum class Biopsy { malignant, benign, borderline, none };

inline std::string to_string(View v) { return v == View::craniocaudal ? "CC" : "MLO"; }
inline std::string to_string(Laterality l) { return l == Laterality::left ? "L" : "R"; }
inline std::string to_string(ImageType t) { return t == ImageType::le ? "LE" : "DES"; }
inline std::string to_string(Acr a) {
  switch (a) {
    case Acr::a:
      return "a";
    case Acr::b:
      return "b";
    case Acr::c:
      return "c";
    case Acr::d:
      return "d";
    case Acr::unreported:
      break;
  }
  return "unreported";
}
inline std::string to_string(Biopsy b) {
  switch (b) {
    case Biopsy::malignant:
      return "malignant";
    case Biopsy::benign:
      return "benign";
    case Biopsy::borderline:
      return "borderline";
    case Biopsy::none:
      break;
  }
  return "none";
}

namespace detail {
inline std::string upper(std::string s) {
  for (auto& ch : s) ch = static_cast<char>(std::toupper(static_cast<unsigned char>(ch)));
  return s;
}
inline std::string lower(std::string s) {
  for (auto& ch : s) ch = static_cast<char>(std::tolower(static_cast<unsigned char>(ch)));
  return s;
}
inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}
/// Upper-cased alphanumeric tokens.
inline std::vector<std::string> tokens(const std::string& s) {
  std::vector<std::string> out;
  std::string cur;
  for (char ch : s) {
    if (std::isalnum(static_cast<unsigned char>(ch))) {
      cur.push_back(static_cast<char>(std::toupper(static_cast<unsigned char>(ch))));
    } else if (!cur.empty()) {
      out.push_back(std::move(cur));
      cur.clear();
    }
  }
  if (!cur.empty()) out.push_back(std::move(cur));
  return out;
}
}  // namespace detail

inline View view_from_string(const std::string& s) {
  const auto u = detail::upper(detail::trim(s));
  if (u == "CC" || u == "CRANIOCAUDAL") return View::craniocaudal;
  if (u == "MLO" || u == "MEDIOLATERAL-OBLIQUE" || u == "MEDIOLATERAL_OBLIQUE") {
    return View::mediolateral_oblique;
  }
  throw std::invalid_argument("unknown view '" + s + "'");
}
inline Laterality laterality_from_string(const std::string& s) {
  const auto u = detail::upper(detail::trim(s));
  if (u == "L" || u == "LEFT") return Laterality::left;
  if (u == "R" || u == "RIGHT") return Laterality::right;
  throw std::invalid_argument("unknown laterality '" + s + "'");
}
inline ImageType image_type_from_string(const std::string& s) {
  const auto u = detail::upper(detail::trim(s));
  if (u == "LE") return ImageType::le;
  if (u == "DES") return ImageType::des;
  throw std::invalid_argument("unknown image type '" + s + "'");
}
inline Acr acr_from_string(const std::string& s) {
  const auto l = detail::lower(detail::trim(s));
  if (l == "a") return Acr::a;
  if (l == "b") return Acr::b;
  if (l == "c") return Acr::c;
  if (l == "d") return Acr::d;
  if (l.empty() || l == "unreported" || l == "na" || l == "n/a") return Acr::unreported;
  throw std::invalid_argument("unknown ACR category '" + s + "'");
}
inline std::optional<Biopsy> biopsy_from_string(const std::string& s) {
  const auto l = detail::lower(detail::trim(s));
  if (l.empty()) return std::nullopt;
  if (l == "malignant") return Biopsy::malignant;
  if (l == "benign") return Biopsy::benign;
  if (l == "borderline") return Biopsy::borderline;
  if (l == "none") return Biopsy::none;
  throw std::invalid_argument("unknown biopsy outcome '" + s + "'");
}

// ---------------------------------------------------------------------------

struct StudyRecord {
  std::string patient_id;
  int age = 0;
  View view = View::craniocaudal;
  Laterality laterality = Laterality::left;
  ImageType image_type = ImageType::le;
  int acquisition_index = 0;
  int rows = 0;
  int cols = 0;
  Acr acr_category = Acr::unreported;
  std::optional<int> birads;
  std::optional<Biopsy> biopsy;
  std::string file_uri;
  // DICOM AcquisitionTime, used to number repeated acquisitions
  std::string acquisition_time;

  friend bool operator==(const StudyRecord&, const StudyRecord&) = default;
};

inline void validate(const StudyRecord& r) {
  if (r.patient_id.empty()) throw std::invalid_argument("record without patient_id: " + r.file_uri);
  if (r.age < 0) throw std::invalid_argument("negative age: " + r.file_uri);
  if (r.rows <= 0 || r.cols <= 0) throw std::invalid_argument("non-positive extent: " + r.file_uri);
  if (r.birads && (*r.birads < 1 || *r.birads > 6)) {
    throw std::invalid_argument("BI-RADS outside [1,6]: " + r.file_uri);
  }
  if (r.acquisition_index < 0) throw std::invalid_argument("negative acquisition_index: " + r.file_uri);
}

/// Fixed field order so manifests diff cleanly.
inline nlohmann::ordered_json to_json(const StudyRecord& r) {
  nlohmann::ordered_json j;
  j["patient_id"] = r.patient_id;
  j["age"] = r.age;
  j["view"] = to_string(r.view);
  j["laterality"] = to_string(r.laterality);
  j["image_type"] = to_string(r.image_type);
  j["acquisition_index"] = r.acquisition_index;
  j["rows"] = r.rows;
  j["cols"] = r.cols;
  j["acr_category"] = to_string(r.acr_category);
  j["birads"] = r.birads ? nlohmann::ordered_json(*r.birads) : nlohmann::ordered_json(nullptr);
  j["biopsy"] = r.biopsy ? nlohmann::ordered_json(to_string(*r.biopsy)) : nlohmann::ordered_json(nullptr);
  j["file_uri"] = r.file_uri;
  j["acquisition_time"] = r.acquisition_time;
  return j;
}

inline StudyRecord record_from_json(const nlohmann::json& j) {
  StudyRecord r;
  r.patient_id = j.at("patient_id").get<std::string>();
  r.age = j.at("age").get<int>();
  r.view = view_from_string(j.at("view").get<std::string>());
  r.laterality = laterality_from_string(j.at("laterality").get<std::string>());
  r.image_type = image_type_from_string(j.at("image_type").get<std::string>());
  r.acquisition_index = j.at("acquisition_index").get<int>();
  r.rows = j.at("rows").get<int>();
  r.cols = j.at("cols").get<int>();
  r.acr_category = acr_from_string(j.at("acr_category").get<std::string>());
  if (!j.at("birads").is_null()) r.birads = j.at("birads").get<int>();
  if (!j.at("biopsy").is_null()) r.biopsy = biopsy_from_string(j.at("biopsy").get<std::string>());
  r.file_uri = j.at("file_uri").get<std::string>();
  r.acquisition_time = j.value("acquisition_time", "");
  validate(r);
  return r;
}

inline void write_manifest(const fs::path& p, const std::vector<StudyRecord>& records) {
  std::string out;
  for (const auto& r : records) out += to_json(r).dump() + "\n";
  io::write_file_atomic(p, out);
}

inline std::vector<StudyRecord> read_manifest(const fs::path& p) {
  std::ifstream in(p);
  if (!in) throw io::IoError("cannot open manifest " + p.string());
  std::vector<StudyRecord> out;
  std::string line;
  int n = 0;
  while (std::getline(in, line)) {
    ++n;
    if (detail::trim(line).empty()) continue;
    try {
      out.push_back(record_from_json(nlohmann::json::parse(line)));
    } catch (const std::exception& e) {
      throw std::invalid_argument(p.string() + ":" + std::to_string(n) + ": " + e.what());
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Sidecar metadata: CSV with header patient_id,age,acr,birads,biopsy

struct SidecarRow {
  std::optional<int> age;
  Acr acr = Acr::unreported;
  std::optional<int> birads;
  std::optional<Biopsy> biopsy;
};

namespace detail {
/// Splits one CSV line; handles double-quoted fields with "" escapes.
inline std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  bool quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    const char ch = line[i];
    if (quoted) {
      if (ch == '"' && i + 1 < line.size() && line[i + 1] == '"') {
        cur.push_back('"');
        ++i;
      } else if (ch == '"') {
        quoted = false;
      } else {
        cur.push_back(ch);
      }
    } else if (ch == '"') {
      quoted = true;
    } else if (ch == ',') {
      out.push_back(trim(cur));
      cur.clear();
    } else {
      cur.push_back(ch);
    }
  }
  out.push_back(trim(cur));
  return out;
}
}  // namespace detail

inline std::map<std::string, SidecarRow> read_sidecar(const fs::path& p) {
  std::ifstream in(p);
  if (!in) throw io::IoError("cannot open sidecar " + p.string());
  std::string line;
  if (!std::getline(in, line)) throw std::invalid_argument(p.string() + ": empty sidecar");
  if (line.rfind("\xEF\xBB\xBF", 0) == 0) line.erase(0, 3);
  const auto header = detail::split_csv(line);
  const std::vector<std::string> want{"patient_id", "age", "acr", "birads", "biopsy"};
  if (header != want) {
    throw std::invalid_argument(p.string() + ": header must be patient_id,age,acr,birads,biopsy");
  }
  std::map<std::string, SidecarRow> out;
  int n = 1;
  while (std::getline(in, line)) {
    ++n;
    if (detail::trim(line).empty()) continue;
    const auto f = detail::split_csv(line);
    const std::string where = p.string() + ":" + std::to_string(n);
    if (f.size() != 5) throw std::invalid_argument(where + ": expected 5 fields");
    SidecarRow row;
    try {
      if (!f[1].empty()) row.age = std::stoi(f[1]);
      row.acr = acr_from_string(f[2]);
      if (!f[3].empty()) row.birads = std::stoi(f[3]);
      row.biopsy = biopsy_from_string(f[4]);
    } catch (const std::exception& e) {
      throw std::invalid_argument(where + ": " + e.what());
    }
    if (row.birads && (*row.birads < 1 || *row.birads > 6)) {
      throw std::invalid_argument(where + ": birads outside [1,6]");
    }
    if (!out.emplace(f[0], row).second) throw std::invalid_argument(where + ": duplicate patient " + f[0]);
  }
  return out;
}

// ---------------------------------------------------------------------------
// DICOM ingest

/// Token markers deciding LE vs DES. Tags are searched first, then the file
/// name. DES markers win when both match.
struct TypeRule {
  std::vector<std::string> des_markers{"DES", "RECOMBINED", "SUBTRACTED", "SUBTRACTION", "SUB", "CM"};
  std::vector<std::string> le_markers{"LE", "LOW", "LOWENERGY"};
};

struct LoadWarning {
  std::string file;
  std::string message;
};

struct ManifestResult {
  std::vector<StudyRecord> records;
  std::vector<LoadWarning> warnings;
};

namespace detail {

inline std::optional<ImageType> classify(const std::vector<std::string>& toks, const TypeRule& rule) {
  auto has = [&](const std::vector<std::string>& markers) {
    return std::any_of(toks.begin(), toks.end(), [&](const std::string& t) {
      return std::find(markers.begin(), markers.end(), t) != markers.end();
    });
  };
  if (has(rule.des_markers)) return ImageType::des;
  if (has(rule.le_markers)) return ImageType::le;
  return std::nullopt;
}

inline bool skipped_extension(const fs::path& p) {
  static const std::set<std::string> skip{".csv", ".json", ".jsonl", ".txt", ".md", ".png", ".f32"};
  return skip.count(lower(p.extension().string())) > 0;
}

inline int parse_age(const std::string& s) {
  // DICOM AS: nnnY / nnnM / nnnW / nnnD
  const auto t = trim(s);
  if (t.size() < 2) return 0;
  const int v = std::atoi(t.substr(0, t.size() - 1).c_str());
  switch (std::toupper(static_cast<unsigned char>(t.back()))) {
    case 'Y':
      return v;
    default:
      return 0;
  }
}

/// Structural screen of a Part-10 file: preamble, file meta group and the
/// lengths of top-level data elements. GDCM aborts on some truncated inputs
/// instead of reporting them, so they are caught here first. Walking stops at
/// the first undefined-length element or for transfer syntaxes other than
/// (explicit|implicit) VR little endian.
inline void check_part10(const fs::path& file) {
  const std::string b = io::read_file(file);
  const auto* u = reinterpret_cast<const unsigned char*>(b.data());
  const std::size_t size = b.size();
  if (size < 132 || std::memcmp(u + 128, "DICM", 4) != 0) throw io::IoError("missing DICM prefix");
  auto u16 = [&](std::size_t at) { return io::detail::get_le<std::uint16_t>(u + at); };
  auto u32 = [&](std::size_t at) { return io::detail::get_le<std::uint32_t>(u + at); };
  auto long_form = [](const char* vr) {
    static const std::set<std::string> l{"OB", "OD", "OF", "OL", "OV", "OW", "SQ", "SV", "UC", "UN", "UR", "UT", "UV"};
    return l.count(std::string(vr, 2)) > 0;
  };
  std::size_t pos = 132;
  std::string syntax;
  bool implicit = false;
  bool in_meta = true;
  while (pos < size) {
    if (pos + 8 > size) throw io::IoError("truncated data element header");
    const std::uint16_t group = u16(pos);
    if (in_meta && group != 0x0002) {
      in_meta = false;
      while (!syntax.empty() && (syntax.back() == '\0' || syntax.back() == ' ')) syntax.pop_back();
      if (syntax == "1.2.840.10008.1.2") {
        implicit = true;
      } else if (syntax != "1.2.840.10008.1.2.1" && syntax.rfind("1.2.840.10008.1.2.4", 0) != 0 &&
                 syntax.rfind("1.2.840.10008.1.2.5", 0) != 0) {
        return;  // deflated or big endian: leave to GDCM
      }
    }
    std::uint32_t len = 0;
    std::size_t header = 8;
    if (!in_meta && implicit) {
      len = u32(pos + 4);
    } else {
      const char* vr = reinterpret_cast<const char*>(u + pos + 4);
      if (!std::isupper(static_cast<unsigned char>(vr[0])) || !std::isupper(static_cast<unsigned char>(vr[1]))) {
        throw io::IoError("malformed value representation");
      }
      if (long_form(vr)) {
        if (pos + 12 > size) throw io::IoError("truncated data element header");
        len = u32(pos + 8);
        header = 12;
      } else {
        len = u16(pos + 6);
      }
    }
    if (len == 0xFFFFFFFFu) return;  // undefined length: sequence or encapsulated pixels
    if (pos + header + len > size) throw io::IoError("truncated data element");
    if (in_meta && u16(pos + 2) == 0x0010) syntax.assign(b, pos + header, len);
    pos += header + len;
  }
  if (in_meta) throw io::IoError("no data set after file meta information");
}

/// Reads header tags of one file. Throws on unreadable or incomplete input.
inline StudyRecord read_dicom_header(const fs::path& file, const TypeRule& rule) {
  check_part10(file);
  gdcm::Reader reader;
  reader.SetFileName(file.string().c_str());
  if (!reader.ReadUpToTag(gdcm::Tag(0x7fe0, 0x0010))) throw io::IoError("not a readable DICOM file");
  gdcm::StringFilter sf;
  sf.SetFile(reader.GetFile());
  const gdcm::DataSet& ds = reader.GetFile().GetDataSet();
  auto tag = [&](std::uint16_t g, std::uint16_t e) -> std::string {
    const gdcm::Tag t(g, e);
    return ds.FindDataElement(t) ? trim(sf.ToString(t)) : std::string();
  };
  StudyRecord r;
  r.file_uri = fs::absolute(file).lexically_normal().string();
  r.patient_id = tag(0x0010, 0x0020);
  if (r.patient_id.empty()) throw io::IoError("missing PatientID (0010,0020)");
  r.age = parse_age(tag(0x0010, 0x1010));
  const std::string rows = tag(0x0028, 0x0010), cols = tag(0x0028, 0x0011);
  if (rows.empty() || cols.empty()) throw io::IoError("missing Rows/Columns");
  r.rows = std::stoi(rows);
  r.cols = std::stoi(cols);
  r.acquisition_time = tag(0x0008, 0x0032);

  const std::string stem_tokens_src = file.stem().string();
  const auto name_toks = tokens(stem_tokens_src);

  std::string view = tag(0x0018, 0x5101);
  if (view.empty()) {
    for (auto& t : name_toks)
      if (t == "CC" || t == "MLO") view = t;
  }
  if (view.empty()) throw io::IoError("cannot determine view (0018,5101)");
  r.view = view_from_string(view);

  std::string lat = tag(0x0020, 0x0062);
  if (lat.empty()) lat = tag(0x0020, 0x0060);
  if (lat.empty()) {
    for (auto& t : name_toks)
      if (t == "L" || t == "R") lat = t;
  }
  if (lat.empty()) throw io::IoError("cannot determine laterality (0020,0062)");
  r.laterality = laterality_from_string(lat);

  std::vector<std::string> toks;
  for (auto [g, e] : {std::pair{0x0008, 0x0008}, {0x0008, 0x103E}, {0x0018, 0x1400}, {0x0008, 0x0068}}) {
    auto t = tokens(tag(static_cast<std::uint16_t>(g), static_cast<std::uint16_t>(e)));
    toks.insert(toks.end(), t.begin(), t.end());
  }
  auto type = classify(toks, rule);
  if (!type) type = classify(name_toks, rule);
  if (!type) throw io::IoError("cannot tell LE from DES (ImageType/SeriesDescription/file name)");
  r.image_type = *type;
  return r;
}

}  // namespace detail

/// Assigns acquisition_index by AcquisitionTime order (ties by file name)
/// within each (patient, view, laterality, type) group.
inline void number_acquisitions(std::vector<StudyRecord>& records) {
  std::map<std::tuple<std::string, View, Laterality, ImageType>, std::vector<StudyRecord*>> groups;
  for (auto& r : records) groups[{r.patient_id, r.view, r.laterality, r.image_type}].push_back(&r);
  for (auto& [key, members] : groups) {
    std::sort(members.begin(), members.end(), [](const StudyRecord* a, const StudyRecord* b) {
      return std::tie(a->acquisition_time, a->file_uri) < std::tie(b->acquisition_time, b->file_uri);
    });
    for (std::size_t i = 0; i < members.size(); ++i) members[i]->acquisition_index = static_cast<int>(i);
  }
}

/// One record per readable DICOM under root (recursive). Unreadable files are
/// reported as warnings. Metadata from `sidecar` (or root/metadata.csv when
/// present) fills ACR, BI-RADS, biopsy and age.
inline ManifestResult load_manifest(const fs::path& root, const TypeRule& rule = {},
                                    std::optional<fs::path> sidecar = std::nullopt) {
  if (!fs::is_directory(root)) throw io::IoError(root.string() + " is not a directory");
  if (!sidecar && fs::exists(root / "metadata.csv")) sidecar = root / "metadata.csv";
  std::map<std::string, SidecarRow> meta;
  if (sidecar) meta = read_sidecar(*sidecar);

  gdcm::Trace::WarningOff();
  std::vector<fs::path> files;
  for (const auto& e : fs::recursive_directory_iterator(root)) {
    if (e.is_regular_file() && !detail::skipped_extension(e.path())) files.push_back(e.path());
  }
  std::sort(files.begin(), files.end());
  ManifestResult out;
  for (const auto& f : files) {
    try {
      out.records.push_back(detail::read_dicom_header(f, rule));
    } catch (const std::exception& e) {
      out.warnings.push_back({f.string(), e.what()});
    }
  }
  if (out.records.empty()) throw io::IoError("no images found in " + root.string());
  for (auto& r : out.records) {
    auto it = meta.find(r.patient_id);
    if (it == meta.end()) continue;
    if (it->second.age) r.age = *it->second.age;
    r.acr_category = it->second.acr;
    r.birads = it->second.birads;
    r.biopsy = it->second.biopsy;
  }
  number_acquisitions(out.records);
  for (auto& r : out.records) validate(r);
  return out;
}

// ---------------------------------------------------------------------------
// Pairing

struct ImagePair {
  std::string pair_id;  // patient_view_laterality_index
  std::string patient_id;
  View view = View::craniocaudal;
  Laterality laterality = Laterality::left;
  int acquisition_index = 0;
  Acr acr_category = Acr::unreported;
  std::optional<int> birads;
  StudyRecord le;
  StudyRecord des;
};

struct PairingResult {
  std::vector<ImagePair> pairs;
  std::vector<StudyRecord> unmatched;
};

struct AmbiguousPairing : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

inline std::string pair_key_string(const StudyRecord& r) {
  return r.patient_id + "_" + to_string(r.view) + "_" + to_string(r.laterality) + "_" +
         std::to_string(r.acquisition_index);
}

/// Joins LE and DES records on (patient, view, laterality, acquisition_index).
inline PairingResult build_pairs(const std::vector<StudyRecord>& records) {
  using Key = std::tuple<std::string, View, Laterality, int>;
  std::map<Key, std::vector<const StudyRecord*>> le, des;
  for (const auto& r : records) {
    Key k{r.patient_id, r.view, r.laterality, r.acquisition_index};
    (r.image_type == ImageType::le ? le : des)[k].push_back(&r);
  }
  std::vector<std::string> ambiguous;
  for (auto* side : {&le, &des}) {
    for (auto& [k, v] : *side) {
      if (v.size() > 1) ambiguous.push_back(pair_key_string(*v.front()) + "/" + to_string(v.front()->image_type));
    }
  }
  if (!ambiguous.empty()) {
    std::string msg = "ambiguous pairing keys:";
    for (auto& a : ambiguous) msg += " " + a;
    throw AmbiguousPairing(msg);
  }
  PairingResult out;
  for (auto& [k, v] : le) {
    auto it = des.find(k);
    if (it == des.end()) {
      out.unmatched.push_back(*v.front());
      continue;
    }
    const StudyRecord& x = *v.front();
    const StudyRecord& y = *it->second.front();
    ImagePair p;
    p.pair_id = pair_key_string(x);
    p.patient_id = x.patient_id;
    p.view = x.view;
    p.laterality = x.laterality;
    p.acquisition_index = x.acquisition_index;
    p.acr_category = x.acr_category;
    p.birads = x.birads;
    p.le = x;
    p.des = y;
    out.pairs.push_back(std::move(p));
  }
  for (auto& [k, v] : des) {
    if (!le.count(k)) out.unmatched.push_back(*v.front());
  }
  return out;
}

inline std::vector<std::string> patients_of(const std::vector<ImagePair>& pairs) {
  std::set<std::string> s;
  for (auto& p : pairs) s.insert(p.patient_id);
  return {s.begin(), s.end()};
}

// ---------------------------------------------------------------------------
// Folds

struct FoldPlan {
  int fold_index = 0;
  std::vector<std::string> train_patients;
  std::vector<std::string> val_patients;
  std::vector<std::string> test_patients;

  friend bool operator==(const FoldPlan&, const FoldPlan&) = default;
};

/// Patient-level k-fold plan. Patients are shuffled and cut into k chunks whose
/// sizes differ by at most one, with the larger chunks spread evenly around the
/// cycle. Fold i tests on chunk i, validates on chunk i+1 (mod k) and trains on
/// the rest, so every patient is tested exactly once and test+val never strays
/// more than one patient from 2N/k.
inline std::vector<FoldPlan> make_folds(std::vector<std::string> patient_ids, int n_folds,
                                        std::uint64_t seed) {
  if (n_folds < 3) throw std::invalid_argument("make_folds: need at least 3 folds");
  std::sort(patient_ids.begin(), patient_ids.end());
  patient_ids.erase(std::unique(patient_ids.begin(), patient_ids.end()), patient_ids.end());
  const int n = static_cast<int>(patient_ids.size());
  if (n < n_folds) {
    throw std::invalid_argument("make_folds: " + std::to_string(n) + " patients for " +
                                std::to_string(n_folds) + " folds");
  }
  Rng rng(seed);
  rng.shuffle(patient_ids);
  const int q = n / n_folds, r = n % n_folds;
  // spread the minority size evenly so no two minority chunks are cyclic neighbours
  const bool large_minority = 2 * r <= n_folds;
  const int m = large_minority ? r : n_folds - r;
  std::vector<int> sizes(n_folds);
  for (int i = 0; i < n_folds; ++i) {
    const bool minority =
        m > 0 && static_cast<long>(i + 1) * m / n_folds > static_cast<long>(i) * m / n_folds;
    sizes[i] = q + ((minority == large_minority) ? 1 : 0);
  }
  std::vector<std::vector<std::string>> chunks(n_folds);
  int pos = 0;
  for (int i = 0; i < n_folds; ++i) {
    chunks[i].assign(patient_ids.begin() + pos, patient_ids.begin() + pos + sizes[i]);
    pos += sizes[i];
  }
  std::vector<FoldPlan> plans;
  for (int i = 0; i < n_folds; ++i) {
    FoldPlan f;
    f.fold_index = i;
    f.test_patients = chunks[i];
    f.val_patients = chunks[(i + 1) % n_folds];
    for (int j = 0; j < n_folds; ++j) {
      if (j != i && j != (i + 1) % n_folds) {
        f.train_patients.insert(f.train_patients.end(), chunks[j].begin(), chunks[j].end());
      }
    }
    std::sort(f.train_patients.begin(), f.train_patients.end());
    std::sort(f.val_patients.begin(), f.val_patients.end());
    std::sort(f.test_patients.begin(), f.test_patients.end());
    plans.push_back(std::move(f));
  }
  return plans;
}

inline nlohmann::json to_json(const FoldPlan& f) {
  return {{"fold_index", f.fold_index},
          {"train_patients", f.train_patients},
          {"val_patients", f.val_patients},
          {"test_patients", f.test_patients}};
}

inline FoldPlan fold_from_json(const nlohmann::json& j) {
  FoldPlan f;
  f.fold_index = j.at("fold_index").get<int>();
  f.train_patients = j.at("train_patients").get<std::vector<std::string>>();
  f.val_patients = j.at("val_patients").get<std::vector<std::string>>();
  f.test_patients = j.at("test_patients").get<std::vector<std::string>>();
  return f;
}

// ---------------------------------------------------------------------------
// Pixels

/// Native-resolution pixel values, brighter = higher. DICOM (MONOCHROME1 is
/// inverted against the stored bit range), 16-bit PNG and float caches are
/// accepted; PNG and float values are returned as stored.
inline ImageD load_pixels(const StudyRecord& record) {
  const fs::path p(record.file_uri);
  if (!fs::exists(p)) throw io::IoError(record.file_uri + ": file not found");
  const auto ext = detail::lower(p.extension().string());
  if (ext == ".png") return io::read_png(p);
  if (ext == ".f32") return io::read_float_image(p).cast<double>();

  try {
    detail::check_part10(p);
  } catch (const io::IoError& e) {
    throw io::IoError(record.file_uri + ": " + e.what());
  }
  gdcm::ImageReader reader;
  reader.SetFileName(p.string().c_str());
  if (!reader.Read()) throw io::IoError(record.file_uri + ": unreadable DICOM");
  const gdcm::Image& img = reader.GetImage();
  const unsigned int* dims = img.GetDimensions();
  const int cols = static_cast<int>(dims[0]), rows = static_cast<int>(dims[1]);
  const gdcm::PixelFormat pf = img.GetPixelFormat();
  if (pf.GetSamplesPerPixel() != 1) throw io::IoError(record.file_uri + ": not monochrome");
  std::vector<char> buf(img.GetBufferLength());
  if (!img.GetBuffer(buf.data())) throw io::IoError(record.file_uri + ": cannot decode pixel data");
  ImageD out(rows, cols);
  const std::size_t n = static_cast<std::size_t>(rows) * cols;
  auto fill = [&](auto tag) {
    using V = decltype(tag);
    if (buf.size() < n * sizeof(V)) throw io::IoError(record.file_uri + ": short pixel buffer");
    for (std::size_t i = 0; i < n; ++i) {
      V v;
      std::memcpy(&v, buf.data() + i * sizeof(V), sizeof(V));
      out[i] = static_cast<double>(v);
    }
  };
  switch (pf.GetScalarType()) {
    case gdcm::PixelFormat::UINT8:
      fill(std::uint8_t{});
      break;
    case gdcm::PixelFormat::INT8:
      fill(std::int8_t{});
      break;
    case gdcm::PixelFormat::UINT16:
      fill(std::uint16_t{});
      break;
    case gdcm::PixelFormat::INT16:
      fill(std::int16_t{});
      break;
    case gdcm::PixelFormat::UINT32:
      fill(std::uint32_t{});
      break;
    case gdcm::PixelFormat::INT32:
      fill(std::int32_t{});
      break;
    default:
      throw io::IoError(record.file_uri + ": unsupported pixel type");
  }
  if (img.GetPhotometricInterpretation() == gdcm::PhotometricInterpretation::MONOCHROME1) {
    const double top = std::ldexp(1.0, pf.GetBitsStored()) - 1;
    for (auto& v : out.pixels()) v = top - v;
  }
  return out;
}

}  // namespace vce::dataset
