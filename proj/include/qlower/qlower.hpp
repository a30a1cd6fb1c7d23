#pragma once

#include "qlower/errors.hpp"
#include "qlower/fixture.hpp"
#include "qlower/graph.hpp"
#include "qlower/interpreter.hpp"
#include "qlower/lowering.hpp"
#include "qlower/manifest.hpp"
#include "qlower/pact.hpp"
#include "qlower/requant.hpp"
#include "qlower/rng.hpp"
#include "qlower/tensor.hpp"
#include "qlower/train.hpp"
#include "qlower/verify.hpp"
