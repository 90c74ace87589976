#pragma once

// Umbrella header for the library (the harness headers are separate).

#include "crpg/dynrisk.hpp"
#include "crpg/envelope.hpp"
#include "crpg/mdp.hpp"
#include "crpg/optimizer.hpp"
#include "crpg/probspace.hpp"
#include "crpg/risk.hpp"
#include "crpg/rng.hpp"
#include "crpg/saddle.hpp"
#include "crpg/staticgrad.hpp"
#include "crpg/types.hpp"
