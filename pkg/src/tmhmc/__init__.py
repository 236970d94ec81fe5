"""HMC on state-space models with the latent path reparameterized by a transport map."""

import os

# The scan-heavy kernels here run many tiny ops per loop step; XLA's legacy
# CPU runtime executes those roughly ten times faster than the thunk runtime.
if "xla_cpu_use_thunk_runtime" not in os.environ.get("XLA_FLAGS", ""):
    os.environ["XLA_FLAGS"] = (
        os.environ.get("XLA_FLAGS", "") + " --xla_cpu_use_thunk_runtime=false"
    ).strip()

import jax  # noqa: E402

jax.config.update("jax_enable_x64", True)

from tmhmc import linalg, diff, models, transport, eis, hmc, diagnostics  # noqa: E402
from tmhmc.models import get_model  # noqa: E402
from tmhmc.transport import Prior, Laplace, Fisher, Eis, ModifiedTarget  # noqa: E402

__all__ = [
    "linalg",
    "diff",
    "models",
    "transport",
    "eis",
    "hmc",
    "diagnostics",
    "get_model",
    "Prior",
    "Laplace",
    "Fisher",
    "Eis",
    "ModifiedTarget",
]

__version__ = "0.1.0"
