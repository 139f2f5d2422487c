#pragma once

#include "focusbench/af_engine.hpp"
#include "focusbench/calibration.hpp"
#include "focusbench/config.hpp"
#include "focusbench/eval.hpp"
#include "focusbench/external_scorer.hpp"
#include "focusbench/focus_metrics.hpp"
#include "focusbench/image.hpp"
#include "focusbench/optics_sim.hpp"
#include "focusbench/png_io.hpp"
#include "focusbench/scorer.hpp"
#include "focusbench/svg.hpp"
