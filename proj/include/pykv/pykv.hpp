#pragma once

#include "pykv/analysis.hpp"
#include "pykv/bench.hpp"
#include "pykv/config.hpp"
#include "pykv/core_math.hpp"
#include "pykv/error.hpp"
#include "pykv/kv_store.hpp"
#include "pykv/model.hpp"
#include "pykv/policies.hpp"
#include "pykv/rng.hpp"
#include "pykv/trace.hpp"
