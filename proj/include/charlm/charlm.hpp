#pragma once

#include "charlm/checkpoint.hpp"
#include "charlm/config.hpp"
#include "charlm/corpus.hpp"
#include "charlm/corpus_io.hpp"
#include "charlm/error.hpp"
#include "charlm/generation.hpp"
#include "charlm/grad_check.hpp"
#include "charlm/layers.hpp"
#include "charlm/models.hpp"
#include "charlm/ops.hpp"
#include "charlm/optim.hpp"
#include "charlm/rng.hpp"
#include "charlm/tensor.hpp"
#include "charlm/training.hpp"
#include "charlm/utf8.hpp"
#include "charlm/validator.hpp"

namespace charlm {
inline constexpr const char* kVersion = "0.1.0";
}
