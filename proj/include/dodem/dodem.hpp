#pragma once

#include "dodem/attack.hpp"
#include "dodem/chaos.hpp"
#include "dodem/cmapss.hpp"
#include "dodem/core.hpp"
#include "dodem/dataset_io.hpp"
#include "dodem/defense.hpp"
#include "dodem/detect.hpp"
#include "dodem/experiment.hpp"
#include "dodem/features.hpp"
#include "dodem/lof.hpp"
#include "dodem/metrics.hpp"
#include "dodem/models.hpp"
#include "dodem/network.hpp"
#include "dodem/ocsvm.hpp"
#include "dodem/report.hpp"
#include "dodem/sdae.hpp"
#include "dodem/synthetic.hpp"
#include "dodem/train.hpp"
