#ifndef EMERFLOW_EMERFLOW_HPP
#define EMERFLOW_EMERFLOW_HPP

#include "emerflow/augment.hpp"
#include "emerflow/backbone.hpp"
#include "emerflow/checkpoint.hpp"
#include "emerflow/common.hpp"
#include "emerflow/config.hpp"
#include "emerflow/corpus.hpp"
#include "emerflow/encoder.hpp"
#include "emerflow/eval.hpp"
#include "emerflow/meta.hpp"
#include "emerflow/pipeline.hpp"
#include "emerflow/serialize.hpp"

#endif  // EMERFLOW_EMERFLOW_HPP
