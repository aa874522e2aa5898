#pragma once

#include <omp.h>

namespace hsi {

/// Selects between the OpenMP kernel and its serial form. Both produce
/// bit-identical results; the serial form is kept as the test reference.
enum class Exec { serial, parallel };

inline int worker_count(Exec exec) { return exec == Exec::parallel ? omp_get_max_threads() : 1; }

}  // namespace hsi
