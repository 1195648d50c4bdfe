#pragma once

#include "gear/bench.hpp"
#include "gear/corpus.hpp"
#include "gear/embed.hpp"
#include "gear/error.hpp"
#include "gear/eval.hpp"
#include "gear/hash.hpp"
#include "gear/http.hpp"
#include "gear/index.hpp"
#include "gear/llmgen.hpp"
#include "gear/matrix.hpp"
#include "gear/pipeline.hpp"
#include "gear/prompt.hpp"
#include "gear/text.hpp"
