#pragma once

#include "vajra/error.hpp"
#include "vajra/tensor.hpp"
#include "vajra/ops.hpp"
#include "vajra/random.hpp"
#include "vajra/units.hpp"
#include "vajra/blocks.hpp"
#include "vajra/reparam.hpp"
#include "vajra/graph.hpp"
#include "vajra/weights.hpp"
#include "vajra/model.hpp"
#include "vajra/cost.hpp"
#include "vajra/report.hpp"
#include "vajra/selftest.hpp"
