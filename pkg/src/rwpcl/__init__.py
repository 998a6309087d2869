"""Joint training of small text classifiers: random weighted parameter
perturbation plus a redundancy-reduction contrastive objective, with a
probability-averaging ensemble and an evaluation harness."""

__version__ = "0.1.0"

from .errors import ConfigError, ContractError, InputError, ShapeError  # noqa: F401
from .numcore import Tape, Tensor, backward  # noqa: F401
