#pragma once

#include "fsp/error.hpp"
#include "fsp/random.hpp"
#include "fsp/kdtree.hpp"
#include "fsp/geom.hpp"
#include "fsp/metrics.hpp"
#include "fsp/image.hpp"
#include "fsp/rgbd.hpp"
#include "fsp/attention.hpp"
#include "fsp/matching.hpp"
#include "fsp/synth.hpp"
#include "fsp/io.hpp"
#include "fsp/pipeline.hpp"
