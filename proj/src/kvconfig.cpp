#include "masv/kvconfig.hpp"

#include <fstream>
#include <sstream>

#include "masv/error.hpp"

namespace masv {
namespace io {

namespace {
std::string strip(const std::string& s) {
  size_t a = s.find_first_not_of(" \t\r\n");
  if (a == std::string::npos) return "";
  size_t b = s.find_last_not_of(" \t\r\n");
  return s.substr(a, b - a + 1);
}
}  // namespace

std::map<std::string, std::string> parse_kv_text(const std::string& text) {
  std::map<std::string, std::string> kv;
  std::istringstream ss(text);
  std::string line;
  int64_t lineno = 0;
  while (std::getline(ss, line)) {
    ++lineno;
    const size_t hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = strip(line);
    if (line.empty()) continue;
    const size_t eq = line.find('=');
    MASV_CHECK(eq != std::string::npos, ParseError, "config line ", lineno,
               ": expected key=value, got `", line, "`");
    const std::string key = strip(line.substr(0, eq));
    MASV_CHECK(!key.empty(), ParseError, "config line ", lineno, ": empty key");
    kv[key] = strip(line.substr(eq + 1));
  }
  return kv;
}

std::string kv_to_text(const std::map<std::string, std::string>& kv) {
  std::string out;
  for (const auto& [k, v] : kv) out += k + "=" + v + "\n";
  return out;
}

std::map<std::string, std::string> read_kv_file(const std::string& path) {
  std::ifstream fs(path);
  MASV_CHECK(fs.good(), IoError, "cannot open config file: ", path);
  std::stringstream buf;
  buf << fs.rdbuf();
  return parse_kv_text(buf.str());
}

void write_kv_file(const std::string& path, const std::map<std::string, std::string>& kv) {
  std::ofstream fs(path);
  MASV_CHECK(fs.good(), IoError, "cannot write config file: ", path);
  fs << kv_to_text(kv);
  MASV_CHECK(fs.good(), IoError, "short write to ", path);
}

}  // namespace io
}  // namespace masv
