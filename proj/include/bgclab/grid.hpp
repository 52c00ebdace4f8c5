#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

namespace bgclab {

// Uniform Cartesian grid over [0,lx] x [0,lz]; z grows upward, z = lz is the
// free surface. Cell (i,k) spans [i*dx,(i+1)*dx] x [k*dz,(k+1)*dz]; fields are
// stored column-major with index i + k*nx.
struct GridSpec {
  int nx = 300;
  int nz = 30;
  double lx = 400.0;
  double lz = 2.0;

  double dx() const { return lx / nx; }
  double dz() const { return lz / nz; }
  int ncells() const { return nx * nz; }
  int idx(int i, int k) const { return i + k * nx; }
  double xc(int i) const { return (i + 0.5) * dx(); }
  double zc(int k) const { return (k + 0.5) * dz(); }

  // Uniform refinement/coarsening used by the --scale flag.
  GridSpec scaled(double s) const {
    GridSpec g = *this;
    g.nx = std::max(4, (int)std::lround(nx * s));
    g.nz = std::max(4, (int)std::lround(nz * s));
    return g;
  }
};

// Gaussian seamount on the bottom boundary: h(x) = height*exp(-((x-center)/width)^2).
struct RidgeSpec {
  double height = 1.0;
  double width = 20.0;
  double center = 150.0;

  double profile(double x) const {
    double r = (x - center) / width;
    return height * std::exp(-r * r);
  }
};

enum class Cell : std::uint8_t { fluid = 0, solid = 1, ghost = 2 };

// Velocity-face classification on the staggered layout. u lives on vertical
// faces, (nx+1) x nz; w on horizontal faces, nx x (nz+1).
enum class Face : std::uint8_t {
  interior = 0,  // both neighbour cells fluid
  inlet = 1,     // x = 0 (u only): Dirichlet u = u_inlet
  outlet = 2,    // x = lx (u only): zero gradient
  lid = 3,       // z = 0 or z = lz (w only): impermeable free-slip
  wall = 4,      // touches a solid cell: no-slip, velocity pinned to zero
};

struct Domain {
  GridSpec grid;
  RidgeSpec ridge;
  std::vector<Cell> cell;    // ncells
  std::vector<Face> uface;   // (nx+1)*nz, index i + k*(nx+1)
  std::vector<Face> wface;   // nx*(nz+1), index i + k*nx
  int n_fluid = 0;

  bool is_fluid(int i, int k) const { return cell[grid.idx(i, k)] == Cell::fluid; }
  int uidx(int i, int k) const { return i + k * (grid.nx + 1); }
  int widx(int i, int k) const { return i + k * grid.nx; }
  double cell_volume() const { return grid.dx() * grid.dz(); }
  double fluid_volume() const { return n_fluid * cell_volume(); }
};

// Classifies cells against the ridge profile (a cell is solid iff its centre
// lies below h(x_centre)) and tags every velocity face.
Domain build_domain(const GridSpec& grid, const RidgeSpec& ridge);

}  // namespace bgclab
