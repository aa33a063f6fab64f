#pragma once

// Convenience header pulling in the whole library.

#include "shapefit/energy_photometric.hpp"
#include "shapefit/energy_priors.hpp"
#include "shapefit/energy_silhouette.hpp"
#include "shapefit/geometry.hpp"
#include "shapefit/image.hpp"
#include "shapefit/io.hpp"
#include "shapefit/jacobian_check.hpp"
#include "shapefit/metrics.hpp"
#include "shapefit/sampling.hpp"
#include "shapefit/sdf_grid.hpp"
#include "shapefit/shape_model.hpp"
#include "shapefit/solver.hpp"
#include "shapefit/synthetic.hpp"
#include "shapefit/types.hpp"
