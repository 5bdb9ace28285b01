"""Hot numeric kernels, in two interchangeable builds (numba / pure numpy)."""
