#ifndef MAT_REAL_DOUBLE
#error "compile this file with MAT_REAL_DOUBLE"
#endif
#include "grad_probe.inc"

acceptance::GradProbe acceptance::grad_probe_f64(const GradProbeSetup& setup) { return probe(setup); }
