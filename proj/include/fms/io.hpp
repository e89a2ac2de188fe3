#pragma once

#include <iosfwd>
#include <stdexcept>
#include <string>
#include <vector>

#include "fms/voxel.hpp"

namespace fms {

/// Malformed input file. The message carries the source name and line.
struct CsvError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Rows `x,y,z,intensity`. A first line that does not parse as numbers is
/// taken as a header. Features follow `make_point`.
std::vector<Point> read_points_csv(std::istream& is, const std::string& source,
                                   const Grid& grid);

/// Rows `class,cx,cy,cz,l,w,h,yaw` with class 1..3 and yaw in radians.
std::vector<Box3D> read_boxes_csv(std::istream& is, const std::string& source);

/// 8-bit binary PGM (P5) of a row-major width x height map, scaled so that
/// the largest value is 255. A map without positive values is all black.
void write_pgm(std::ostream& os, std::size_t width, std::size_t height,
               const std::vector<double>& values);

}  // namespace fms
