from .grid import GridSpec, Boundary
from .operator import Hyperparams, SparseOperator, build_precision
from .graph import FactorGraph, ObservationSet, apply_observations, from_precision
from .mp import MessageStore, Status
from .multigrid import build_hierarchy, prior_graph_builder, run_multigrid
from .oracle import Field, dense_posterior_mean, make_synthetic, rmse, sample_gmrf
from .utils import MPDAError
