#pragma once

#include "gpldan/errors.hpp"
#include "gpldan/numgrad.hpp"
#include "gpldan/optim.hpp"
#include "gpldan/projector.hpp"
#include "gpldan/graph_loss.hpp"
#include "gpldan/adversary.hpp"
#include "gpldan/data_io.hpp"
#include "gpldan/retrieval_eval.hpp"
#include "gpldan/trainer.hpp"
