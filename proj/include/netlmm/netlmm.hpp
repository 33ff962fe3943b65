#pragma once

#include "netlmm/covstruct.hpp"
#include "netlmm/error.hpp"
#include "netlmm/estim.hpp"
#include "netlmm/fit_io.hpp"
#include "netlmm/infer.hpp"
#include "netlmm/io.hpp"
#include "netlmm/netdata.hpp"
#include "netlmm/parallel.hpp"
#include "netlmm/refine.hpp"
#include "netlmm/simlab.hpp"
#include "netlmm/version.hpp"
