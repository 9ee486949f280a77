#pragma once

// CSV and file helpers. Numbers are written in shortest round-trip form, so
// parse(emit(x)) == x bit for bit.

#include <charconv>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <system_error>
#include <vector>

#include <Eigen/Dense>
#include <openssl/evp.h>

#include "vaelasso/pksim.hpp"

namespace vaelasso::io {

class ParseError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline std::string format_double(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof buf, v);
  if (res.ec != std::errc()) throw std::runtime_error("format_double failed");
  return {buf, res.ptr};
}

inline double parse_double(std::string_view s, std::string_view what) {
  double v = 0;
  auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (res.ec != std::errc() || res.ptr != s.data() + s.size())
    throw ParseError("cannot parse number '" + std::string(s) + "' in column '" + std::string(what) + "'");
  return v;
}

inline long long parse_int(std::string_view s, std::string_view what) {
  long long v = 0;
  auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (res.ec != std::errc() || res.ptr != s.data() + s.size())
    throw ParseError("cannot parse integer '" + std::string(s) + "' in column '" + std::string(what) + "'");
  return v;
}

inline std::vector<std::string_view> split(std::string_view line, char sep = ',') {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  while (true) {
    auto pos = line.find(sep, start);
    out.push_back(line.substr(start, pos == std::string_view::npos ? std::string_view::npos : pos - start));
    if (pos == std::string_view::npos) break;
    start = pos + 1;
  }
  return out;
}

inline std::string join(const std::vector<std::string>& parts, char sep = ',') {
  std::string out;
  for (std::size_t i = 0; i < parts.size(); ++i) {
    if (i) out += sep;
    out += parts[i];
  }
  return out;
}

struct CsvTable {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;
};

inline CsvTable parse_csv(std::istream& in, std::string_view source) {
  CsvTable t;
  std::string line;
  if (!std::getline(in, line)) throw ParseError(std::string(source) + ": empty file");
  if (!line.empty() && line.back() == '\r') line.pop_back();
  for (auto f : split(line)) t.header.emplace_back(f);
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    auto fields = split(line);
    if (fields.size() != t.header.size())
      throw ParseError(std::string(source) + ": line " + std::to_string(line_no) + " has " +
                       std::to_string(fields.size()) + " fields, header has " + std::to_string(t.header.size()));
    t.rows.emplace_back(fields.begin(), fields.end());
  }
  return t;
}

inline CsvTable read_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  return parse_csv(in, path.string());
}

inline std::string read_text(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

/// Writes through a temporary file in the same directory, then renames.
inline void write_text(const std::filesystem::path& path, std::string_view content) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write " + tmp.string());
    out.write(content.data(), static_cast<std::streamsize>(content.size()));
    if (!out) throw std::runtime_error("write failed for " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

inline std::string sha256_hex(std::string_view data) {
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(data.data(), data.size(), digest, &len, EVP_sha256(), nullptr) != 1)
    throw std::runtime_error("sha256 failed");
  std::ostringstream ss;
  for (unsigned int i = 0; i < len; ++i) ss << std::hex << std::setw(2) << std::setfill('0') << int{digest[i]};
  return ss.str();
}

inline std::string sha256_file(const std::filesystem::path& path) { return sha256_hex(read_text(path)); }

// ---- dataset CSV ---------------------------------------------------------

inline std::string concentration_column(std::size_t i) {
  std::ostringstream ss;
  ss << "c_" << std::setw(4) << std::setfill('0') << i;
  return ss.str();
}

inline std::vector<std::string> dataset_header(std::size_t grid_points) {
  std::vector<std::string> h{"subject_id"};
  for (auto c : pksim::kCovariateNames) h.emplace_back(c);
  for (std::size_t i = 0; i < grid_points; ++i) h.push_back(concentration_column(i));
  return h;
}

inline std::string dataset_to_csv(std::span<const pksim::Subject> subjects) {
  const std::size_t g = subjects.empty() ? 0 : subjects.front().curve.concentrations.size();
  std::string out = join(dataset_header(g)) + "\n";
  for (const auto& s : subjects) {
    if (s.curve.concentrations.size() != g) throw std::invalid_argument("dataset_to_csv: ragged grid");
    const auto& r = s.covariates;
    std::vector<std::string> f{std::to_string(s.curve.subject_id),
                               std::to_string(r.snp),
                               format_double(r.age),
                               std::string(pksim::to_string(r.sex)),
                               format_double(r.weight),
                               format_double(r.hgb),
                               format_double(r.alb),
                               std::string(pksim::to_string(r.race)),
                               format_double(r.extra_1),
                               format_double(r.extra_2)};
    for (double c : s.curve.concentrations) f.push_back(format_double(c));
    out += join(f) + "\n";
  }
  return out;
}

/// Parses a dataset table. The time grid is rebuilt uniformly over [0, horizon_h];
/// realized PK parameters are not part of the file and stay zero.
inline std::vector<pksim::Subject> dataset_from_table(const CsvTable& t, double horizon_h, std::string_view source) {
  const std::size_t fixed = 1 + pksim::kCovariateNames.size();
  if (t.header.size() <= fixed + 1)
    throw ParseError(std::string(source) + ": too few columns for a dataset file");
  if (t.header[0] != "subject_id") throw ParseError(std::string(source) + ": expected column 'subject_id', found '" + t.header[0] + "'");
  for (std::size_t i = 0; i < pksim::kCovariateNames.size(); ++i)
    if (t.header[1 + i] != pksim::kCovariateNames[i])
      throw ParseError(std::string(source) + ": expected column '" + std::string(pksim::kCovariateNames[i]) +
                       "' at position " + std::to_string(1 + i) + ", found '" + t.header[1 + i] + "'");
  const std::size_t g = t.header.size() - fixed;
  for (std::size_t i = 0; i < g; ++i)
    if (t.header[fixed + i] != concentration_column(i))
      throw ParseError(std::string(source) + ": expected column '" + concentration_column(i) + "', found '" +
                       t.header[fixed + i] + "'");

  const auto grid = pksim::make_time_grid(g, horizon_h);
  std::vector<pksim::Subject> out;
  out.reserve(t.rows.size());
  for (const auto& row : t.rows) {
    pksim::Subject s;
    s.curve.subject_id = parse_int(row[0], "subject_id");
    auto& r = s.covariates;
    r.snp = static_cast<int>(parse_int(row[1], "snp"));
    r.age = parse_double(row[2], "age");
    auto sex = pksim::parse_sex(row[3]);
    if (!sex) throw ParseError(std::string(source) + ": unknown sex category '" + row[3] + "'");
    r.sex = *sex;
    r.weight = parse_double(row[4], "weight");
    r.hgb = parse_double(row[5], "hgb");
    r.alb = parse_double(row[6], "alb");
    auto race = pksim::parse_race(row[7]);
    if (!race) throw ParseError(std::string(source) + ": unknown race category '" + row[7] + "'");
    r.race = *race;
    r.extra_1 = parse_double(row[8], "extra_1");
    r.extra_2 = parse_double(row[9], "extra_2");
    if (!r.valid())
      throw ParseError(std::string(source) + ": subject " + row[0] + " has covariates outside their valid range");
    s.curve.time_grid = grid;
    s.curve.concentrations.reserve(g);
    for (std::size_t i = 0; i < g; ++i) {
      const double c = parse_double(row[fixed + i], t.header[fixed + i]);
      if (!(c >= 0) || !std::isfinite(c))
        throw ParseError(std::string(source) + ": negative or non-finite concentration for subject " + row[0]);
      s.curve.concentrations.push_back(c);
    }
    out.push_back(std::move(s));
  }
  if (out.empty()) throw ParseError(std::string(source) + ": no data rows");
  return out;
}

inline std::vector<pksim::Subject> read_dataset(const std::filesystem::path& path, double horizon_h) {
  return dataset_from_table(read_csv(path), horizon_h, path.string());
}

// ---- latent CSV ----------------------------------------------------------

struct LatentTable {
  std::vector<std::int64_t> subject_ids;
  Eigen::MatrixXd mu;
  Eigen::MatrixXd logvar;

  bool operator==(const LatentTable& o) const {
    return subject_ids == o.subject_ids && mu.rows() == o.mu.rows() && mu.cols() == o.mu.cols() && mu == o.mu &&
           logvar == o.logvar;
  }
};

inline std::string latents_to_csv(const LatentTable& t) {
  const auto d = t.mu.cols();
  std::vector<std::string> h{"subject_id"};
  for (Eigen::Index k = 0; k < d; ++k) h.push_back("mu_" + std::to_string(k + 1));
  for (Eigen::Index k = 0; k < d; ++k) h.push_back("logvar_" + std::to_string(k + 1));
  std::string out = join(h) + "\n";
  for (std::size_t i = 0; i < t.subject_ids.size(); ++i) {
    std::vector<std::string> f{std::to_string(t.subject_ids[i])};
    const auto r = static_cast<Eigen::Index>(i);
    for (Eigen::Index k = 0; k < d; ++k) f.push_back(format_double(t.mu(r, k)));
    for (Eigen::Index k = 0; k < d; ++k) f.push_back(format_double(t.logvar(r, k)));
    out += join(f) + "\n";
  }
  return out;
}

inline LatentTable latents_from_table(const CsvTable& t, std::string_view source) {
  if (t.header.size() < 3 || (t.header.size() - 1) % 2 != 0 || t.header[0] != "subject_id")
    throw ParseError(std::string(source) + ": latent file must have subject_id then mu_k and logvar_k columns");
  const std::size_t d = (t.header.size() - 1) / 2;
  for (std::size_t k = 0; k < d; ++k) {
    if (t.header[1 + k] != "mu_" + std::to_string(k + 1))
      throw ParseError(std::string(source) + ": expected column 'mu_" + std::to_string(k + 1) + "', found '" +
                       t.header[1 + k] + "'");
    if (t.header[1 + d + k] != "logvar_" + std::to_string(k + 1))
      throw ParseError(std::string(source) + ": expected column 'logvar_" + std::to_string(k + 1) + "', found '" +
                       t.header[1 + d + k] + "'");
  }
  LatentTable out;
  const auto n = static_cast<Eigen::Index>(t.rows.size());
  out.mu.resize(n, static_cast<Eigen::Index>(d));
  out.logvar.resize(n, static_cast<Eigen::Index>(d));
  for (Eigen::Index i = 0; i < n; ++i) {
    const auto& row = t.rows[static_cast<std::size_t>(i)];
    out.subject_ids.push_back(parse_int(row[0], "subject_id"));
    for (std::size_t k = 0; k < d; ++k) {
      out.mu(i, static_cast<Eigen::Index>(k)) = parse_double(row[1 + k], t.header[1 + k]);
      out.logvar(i, static_cast<Eigen::Index>(k)) = parse_double(row[1 + d + k], t.header[1 + d + k]);
    }
  }
  if (out.subject_ids.empty()) throw ParseError(std::string(source) + ": no data rows");
  return out;
}

}  // namespace vaelasso::io
