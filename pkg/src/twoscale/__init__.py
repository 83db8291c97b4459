"""Large deviations of mean-field particle systems in a fast random environment."""
from .core import ToleranceConfig, tau, tau_star
from .model import AffineModel, DirectedGraph, ModelSpec, load_model, retrial_model, toy_model, validate, wlan_model
from .averaging import invariant_measure, mckean_vlasov_flow
from .simulator import simulate, path_functionals_UV, ensemble
from .ratefn import local_rate, path_rate, marginal_local_rate

__version__ = "0.1.0"
