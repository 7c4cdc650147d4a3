#pragma once

#include "htr/attention.hpp"
#include "htr/bundle.hpp"
#include "htr/charset.hpp"
#include "htr/checkpoint.hpp"
#include "htr/config.hpp"
#include "htr/ctc.hpp"
#include "htr/errors.hpp"
#include "htr/image.hpp"
#include "htr/layers.hpp"
#include "htr/metrics.hpp"
#include "htr/model.hpp"
#include "htr/optim.hpp"
#include "htr/parallel.hpp"
#include "htr/preprocess.hpp"
#include "htr/recurrent.hpp"
#include "htr/rng.hpp"
#include "htr/synth.hpp"
#include "htr/tensor.hpp"
#include "htr/train.hpp"
#include "htr/unicode.hpp"
