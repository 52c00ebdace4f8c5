#include "bgclab/grid.hpp"

namespace bgclab {

Domain build_domain(const GridSpec& grid, const RidgeSpec& ridge) {
  Domain d;
  d.grid = grid;
  d.ridge = ridge;
  d.cell.assign(grid.ncells(), Cell::fluid);

  for (int k = 0; k < grid.nz; ++k)
    for (int i = 0; i < grid.nx; ++i)
      if (grid.zc(k) < ridge.profile(grid.xc(i))) d.cell[grid.idx(i, k)] = Cell::solid;

  // Ghost layer: solid cells that share a face with a fluid cell. They carry
  // mirrored/extrapolated values for stencils that poke into the ridge.
  auto solid = [&](int i, int k) { return d.cell[grid.idx(i, k)] != Cell::fluid; };
  for (int k = 0; k < grid.nz; ++k)
    for (int i = 0; i < grid.nx; ++i) {
      if (!solid(i, k)) continue;
      bool near_fluid = (i > 0 && !solid(i - 1, k)) || (i + 1 < grid.nx && !solid(i + 1, k)) ||
                        (k > 0 && !solid(i, k - 1)) || (k + 1 < grid.nz && !solid(i, k + 1));
      if (near_fluid) d.cell[grid.idx(i, k)] = Cell::ghost;
    }

  d.n_fluid = 0;
  for (Cell c : d.cell)
    if (c == Cell::fluid) ++d.n_fluid;

  d.uface.assign((grid.nx + 1) * grid.nz, Face::interior);
  for (int k = 0; k < grid.nz; ++k)
    for (int i = 0; i <= grid.nx; ++i) {
      Face f = Face::interior;
      bool left_solid = i > 0 && solid(i - 1, k);
      bool right_solid = i < grid.nx && solid(i, k);
      if (left_solid || right_solid)
        f = Face::wall;
      else if (i == 0)
        f = Face::inlet;
      else if (i == grid.nx)
        f = Face::outlet;
      d.uface[d.uidx(i, k)] = f;
    }

  d.wface.assign(grid.nx * (grid.nz + 1), Face::interior);
  for (int k = 0; k <= grid.nz; ++k)
    for (int i = 0; i < grid.nx; ++i) {
      Face f = Face::interior;
      bool below_solid = k > 0 && solid(i, k - 1);
      bool above_solid = k < grid.nz && solid(i, k);
      if (below_solid || above_solid)
        f = Face::wall;
      else if (k == 0 || k == grid.nz)
        f = Face::lid;
      d.wface[d.widx(i, k)] = f;
    }

  return d;
}

}  // namespace bgclab
