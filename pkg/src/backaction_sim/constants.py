"""Physical constants, pinned in one place.

All values SI. Everything downstream imports from here so that derived
quantities are reproducible to the last digit.
"""

import math

TWO_PI = 2.0 * math.pi

# SI defining constants (exact since the 2019 redefinition)
K_B = 1.380649e-23          # J/K
C_LIGHT = 299792458.0       # m/s
HBAR = 1.054571817e-34      # J s, CODATA 2018 (h/2pi, rounded)

# CODATA 2018 atomic mass constant and the Rb-87 mass (AME2020)
ATOMIC_MASS_KG = 1.66053906660e-27
RB87_MASS_KG = 86.909180531 * ATOMIC_MASS_KG
