"""Monte Carlo toolkit for diffusions in random environments: environments,
SDE integration, regeneration times, slab-exit (T) checks and condition (K)."""

__version__ = "0.1.0"

from .env import AmplitudeLaw, Environment, EnvironmentSpec, SpecError  # noqa: E402
from .sde import IntegratorConfig, Region  # noqa: E402
from .regen import CouplingConfig  # noqa: E402

__all__ = ["AmplitudeLaw", "Environment", "EnvironmentSpec", "SpecError", "IntegratorConfig", "Region",
           "CouplingConfig", "__version__"]
