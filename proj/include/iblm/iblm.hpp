#pragma once

#include "iblm/checkpoint.hpp"
#include "iblm/config.hpp"
#include "iblm/diagnostics.hpp"
#include "iblm/eigen_sym.hpp"
#include "iblm/entropy.hpp"
#include "iblm/error.hpp"
#include "iblm/gapt.hpp"
#include "iblm/grad_check.hpp"
#include "iblm/harness.hpp"
#include "iblm/nets.hpp"
#include "iblm/ops.hpp"
#include "iblm/optim.hpp"
#include "iblm/runlog.hpp"
#include "iblm/tape.hpp"
#include "iblm/tasks.hpp"
#include "iblm/tensor.hpp"
