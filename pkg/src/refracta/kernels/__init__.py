"""Hot numeric kernels in two interchangeable flavors.

``numba_backend`` carries ``@njit`` loops, ``numpy_backend`` the pure-numpy
equivalents. Both expose the same function names and array signatures; pick
one via :func:`refracta.backend.get_kernels`.
"""
