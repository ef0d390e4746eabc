#pragma once

#include "moerepl/annealing.hpp"
#include "moerepl/autodiff.hpp"
#include "moerepl/calibration.hpp"
#include "moerepl/checkpoint.hpp"
#include "moerepl/config.hpp"
#include "moerepl/construction.hpp"
#include "moerepl/errors.hpp"
#include "moerepl/evaluation.hpp"
#include "moerepl/grad_check.hpp"
#include "moerepl/grouping.hpp"
#include "moerepl/matrix.hpp"
#include "moerepl/model.hpp"
#include "moerepl/optimizer.hpp"
#include "moerepl/parameters.hpp"
#include "moerepl/pipeline.hpp"
#include "moerepl/random.hpp"
#include "moerepl/schedule.hpp"
#include "moerepl/selection.hpp"
#include "moerepl/tasks.hpp"
