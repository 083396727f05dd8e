#pragma once

#include "artivote/evalmanip.hpp"
#include "artivote/features.hpp"
#include "artivote/geometry.hpp"
#include "artivote/io.hpp"
#include "artivote/kdtree.hpp"
#include "artivote/model.hpp"
#include "artivote/parallel.hpp"
#include "artivote/pipeline.hpp"
#include "artivote/rng.hpp"
#include "artivote/synth.hpp"
#include "artivote/voting.hpp"
