#pragma once

#include "mebal/error.hpp"
#include "mebal/dataset.hpp"
#include "mebal/error_model.hpp"
#include "mebal/solver.hpp"
#include "mebal/balancing.hpp"
#include "mebal/correction.hpp"
#include "mebal/diagnostics.hpp"
#include "mebal/simulation.hpp"
#include "mebal/io.hpp"
