#pragma once

// Umbrella header: the full multi-dimensional FPCA toolkit.

#include "dfpca/errors.hpp"
#include "dfpca/rng.hpp"
#include "dfpca/kernel.hpp"
#include "dfpca/grid.hpp"
#include "dfpca/dataset.hpp"
#include "dfpca/surface.hpp"
#include "dfpca/binning.hpp"
#include "dfpca/local_fit.hpp"
#include "dfpca/smoother.hpp"
#include "dfpca/conv.hpp"
#include "dfpca/fft_smoother.hpp"
#include "dfpca/eigensolve.hpp"
#include "dfpca/scores.hpp"
#include "dfpca/bandwidth.hpp"
#include "dfpca/simulate.hpp"
#include "dfpca/io.hpp"
#include "dfpca/pipeline.hpp"
#include "dfpca/parallel.hpp"
