#pragma once

#include "crossvlt/ablation.hpp"
#include "crossvlt/alignment.hpp"
#include "crossvlt/attention.hpp"
#include "crossvlt/checkpoint.hpp"
#include "crossvlt/core.hpp"
#include "crossvlt/dataset_io.hpp"
#include "crossvlt/decoder.hpp"
#include "crossvlt/language_encoder.hpp"
#include "crossvlt/metrics.hpp"
#include "crossvlt/model.hpp"
#include "crossvlt/optim.hpp"
#include "crossvlt/params.hpp"
#include "crossvlt/png_io.hpp"
#include "crossvlt/synthdata.hpp"
#include "crossvlt/train.hpp"
#include "crossvlt/vision_encoder.hpp"
