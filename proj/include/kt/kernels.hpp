#pragma once

#include <cstddef>

#include "kt/common.hpp"

// Dense kernels behind the tensor ops. Every kernel has a serial reference
// implementation and an OpenMP-parallel one; the parallel versions assign
// whole output rows to threads and keep each row's reduction sequential, so
// results are bit-identical to the serial path for any thread count.
namespace kt::kernels {

// Runtime switch between the parallel and serial paths (default: parallel
// when compiled with OpenMP).
bool parallel_enabled();
void set_parallel(bool on);
int max_threads();

// c (+)= a · b          a[m×k], b[k×n], c[m×n]
void matmul(const real* a, const real* b, real* c, std::size_t m, std::size_t k,
            std::size_t n, bool accumulate);
// c (+)= a · bᵀ         a[m×k], b[n×k], c[m×n]
void matmul_nt(const real* a, const real* b, real* c, std::size_t m,
               std::size_t k, std::size_t n, bool accumulate);
// c (+)= aᵀ · b         a[k×m], b[k×n], c[m×n]
void matmul_tn(const real* a, const real* b, real* c, std::size_t m,
               std::size_t k, std::size_t n, bool accumulate);

void matmul_serial(const real* a, const real* b, real* c, std::size_t m,
                   std::size_t k, std::size_t n, bool accumulate);
void matmul_nt_serial(const real* a, const real* b, real* c, std::size_t m,
                      std::size_t k, std::size_t n, bool accumulate);
void matmul_tn_serial(const real* a, const real* b, real* c, std::size_t m,
                      std::size_t k, std::size_t n, bool accumulate);

}  // namespace kt::kernels
