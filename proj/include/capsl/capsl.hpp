#pragma once

#include "capsl/augment.hpp"
#include "capsl/caption_filter.hpp"
#include "capsl/checkpoint.hpp"
#include "capsl/datamodel.hpp"
#include "capsl/encoder.hpp"
#include "capsl/error.hpp"
#include "capsl/evaluation.hpp"
#include "capsl/gradcam.hpp"
#include "capsl/io.hpp"
#include "capsl/layers.hpp"
#include "capsl/objectives.hpp"
#include "capsl/optim.hpp"
#include "capsl/pair_sampler.hpp"
#include "capsl/parallel.hpp"
#include "capsl/pipeline.hpp"
#include "capsl/report.hpp"
#include "capsl/rng.hpp"
#include "capsl/synthetic.hpp"
#include "capsl/tensor.hpp"
#include "capsl/toy_embed.hpp"
#include "capsl/trainer.hpp"
