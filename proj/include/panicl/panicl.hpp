#pragma once

#include "panicl/divergence.hpp"
#include "panicl/errors.hpp"
#include "panicl/metrics.hpp"
#include "panicl/pipeline.hpp"
#include "panicl/pool.hpp"
#include "panicl/retriever.hpp"
#include "panicl/rng.hpp"
#include "panicl/smoothing.hpp"
#include "panicl/synthbench.hpp"
#include "panicl/tensor_io.hpp"
