#pragma once

#include "fedconv/tensor.hpp"
#include "fedconv/autodiff.hpp"
#include "fedconv/ops.hpp"
#include "fedconv/gradcheck.hpp"
#include "fedconv/arch.hpp"
#include "fedconv/model.hpp"
#include "fedconv/optim.hpp"
#include "fedconv/data.hpp"
#include "fedconv/partition.hpp"
#include "fedconv/metrics.hpp"
#include "fedconv/checkpoint.hpp"
#include "fedconv/fl.hpp"
#include "fedconv/config.hpp"
#include "fedconv/experiment.hpp"
