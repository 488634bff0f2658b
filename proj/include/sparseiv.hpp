#pragma once

#include "sparseiv/csv.hpp"
#include "sparseiv/data.hpp"
#include "sparseiv/diagnostics.hpp"
#include "sparseiv/errors.hpp"
#include "sparseiv/first_stage.hpp"
#include "sparseiv/iv.hpp"
#include "sparseiv/lasso.hpp"
#include "sparseiv/math.hpp"
#include "sparseiv/montecarlo.hpp"
#include "sparseiv/random.hpp"
#include "sparseiv/weak_id.hpp"
