#pragma once

#include "longidiff/common.hpp"
#include "longidiff/schedule.hpp"
#include "longidiff/conditioning.hpp"
#include "longidiff/unet.hpp"
#include "longidiff/encoder.hpp"
#include "longidiff/checkpoint.hpp"
#include "longidiff/data.hpp"
#include "longidiff/synth.hpp"
#include "longidiff/metrics.hpp"
#include "longidiff/trainer.hpp"
