#pragma once

#include "emgait/autograd.hpp"
#include "emgait/backbones.hpp"
#include "emgait/config.hpp"
#include "emgait/data.hpp"
#include "emgait/error.hpp"
#include "emgait/evaluation.hpp"
#include "emgait/fusion.hpp"
#include "emgait/io.hpp"
#include "emgait/losses.hpp"
#include "emgait/model.hpp"
#include "emgait/nn.hpp"
#include "emgait/semi.hpp"
#include "emgait/st_head.hpp"
#include "emgait/synth.hpp"
#include "emgait/training.hpp"
