/* Lets gcc vectorise loops over exp() with glibc's libmvec (LLSA_VEC_EXP). */
#ifndef LLSA_SIMD_H
#define LLSA_SIMD_H
#include <math.h>
#ifdef LLSA_VEC_EXP
#pragma omp declare simd notinbranch
extern double exp(double);
#endif
#endif
