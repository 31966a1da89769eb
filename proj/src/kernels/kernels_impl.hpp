#pragma once

#include "msdm/kernels.hpp"

namespace msdm::kernels::detail {

extern const KernelTable kScalarTable;
#if defined(MSDM_HAVE_AVX2_TU)
extern const KernelTable kAvx2Table;
#endif

}  // namespace msdm::kernels::detail
