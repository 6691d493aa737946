"""Exact fast simulation of abelian-stack growth models on Z^2."""

__version__ = "0.1.0"

from .lattice import Field, neighbor, norm2, opposite
from .stacks import (CounterPrf, IdlaStack, LowDiscrepancyStack,
                     PeriodicStack, make_model, prf_uniform)
from .engine import (SmallGraph, check_cycle_removal, check_exchangeability,
                     fire, oracle_simulate, stack_laplacian, unfire,
                     verify_odometer)
from .potential import (KernelTable, PiRational, approx_odometer,
                        kernel_asymptotic, kernel_exact, kernel_table)
from .solver import solve
from .analysis import (FitResult, complex_moments, fit_log, radius_stats,
                       recentered_stats, windowed_average)
