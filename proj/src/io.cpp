#include "fms/io.hpp"

#include <algorithm>
#include <cmath>
#include <istream>
#include <ostream>
#include <sstream>

#include "fms/harness.hpp"

namespace fms {

namespace {

// Parses a comma-separated row of `n` numbers; false if any field is not one.
bool parse_row(const std::string& line, std::size_t n, std::vector<double>& out) {
  out.clear();
  std::stringstream ss(line);
  std::string field;
  while (std::getline(ss, field, ',')) {
    const auto b = field.find_first_not_of(" \t\r");
    const auto e = field.find_last_not_of(" \t\r");
    if (b == std::string::npos) return false;
    field = field.substr(b, e - b + 1);
    std::size_t used = 0;
    double v = 0;
    try {
      v = std::stod(field, &used);
    } catch (const std::exception&) {
      return false;
    }
    if (used != field.size() || !std::isfinite(v)) return false;
    out.push_back(v);
  }
  return out.size() == n;
}

template <class Fn>
void read_rows(std::istream& is, const std::string& source, std::size_t n,
               const std::string& layout, Fn&& fn) {
  std::string line;
  std::vector<double> row;
  int no = 0;
  bool first = true;
  while (std::getline(is, line)) {
    ++no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    if (!parse_row(line, n, row)) {
      if (first && line.find_first_of("abcdefghijklmnopqrstuvwxyz") != std::string::npos) {
        first = false;
        continue;  // header
      }
      throw CsvError(source + ":" + std::to_string(no) + ": expected " + layout + ", got '" +
                     line + "'");
    }
    first = false;
    try {
      fn(row);
    } catch (const std::exception& e) {
      throw CsvError(source + ":" + std::to_string(no) + ": " + e.what());
    }
  }
}

}  // namespace

std::vector<Point> read_points_csv(std::istream& is, const std::string& source,
                                   const Grid& grid) {
  std::vector<Point> out;
  read_rows(is, source, 4, "x,y,z,intensity", [&](const std::vector<double>& r) {
    out.push_back(make_point({r[0], r[1], r[2]}, r[3], grid));
  });
  return out;
}

std::vector<Box3D> read_boxes_csv(std::istream& is, const std::string& source) {
  std::vector<Box3D> out;
  read_rows(is, source, 8, "class,cx,cy,cz,l,w,h,yaw", [&](const std::vector<double>& r) {
    Box3D b;
    if (r[0] != std::floor(r[0]) || r[0] < 1 || r[0] > 3)
      throw std::invalid_argument("class must be 1, 2 or 3");
    if (!(r[4] > 0 && r[5] > 0 && r[6] > 0))
      throw std::invalid_argument("box sizes must be positive");
    b.class_id = static_cast<int>(r[0]);
    b.center = {r[1], r[2], r[3]};
    b.size = {r[4], r[5], r[6]};
    b.yaw = r[7];
    out.push_back(b);
  });
  return out;
}

void write_pgm(std::ostream& os, std::size_t width, std::size_t height,
               const std::vector<double>& values) {
  if (values.size() != width * height)
    throw ContractError("pgm: " + std::to_string(values.size()) + " values for " +
                        std::to_string(width) + " x " + std::to_string(height));
  double peak = 0;
  for (double v : values)
    if (std::isfinite(v)) peak = std::max(peak, v);
  os << "P5\n" << width << " " << height << "\n255\n";
  for (double v : values) {
    const double scaled = peak > 0 && std::isfinite(v) ? std::clamp(v / peak, 0.0, 1.0) : 0.0;
    os.put(static_cast<char>(static_cast<unsigned char>(std::lround(255.0 * scaled))));
  }
}

}  // namespace fms
