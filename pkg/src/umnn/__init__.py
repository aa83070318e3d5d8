"""Unconstrained monotonic neural networks and the UMNN-MAF normalizing flow."""
from ._backend import allocation_audit, use_backend
from .errors import (ConfigurationError, DegenerateDataError, DimensionError, InversionRangeError,
                     ModelFormatError, NumericError, UMNNError)
from .flow import (FlowModel, FlowStep, MadeNet, build_flow, build_made_masks, data_log_density,
                   flow_forward, flow_inverse, identity_flow, log_density, model_sample,
                   nll_loss_and_grads)
from .monotonic import MonotonicBlock, umnn_derivative, umnn_forward, umnn_invert
from .nn import AdamState, Hidden, Output, ParamStore, adam_step, init_mlp, mlp_backward, mlp_forward
from .quadrature import (FunctionIntegrand, Integrand, NetIntegrand, QuadRule, compute_cc_weights,
                         integrate_backward, integrate_forward)
from .serialize import load_model, model_from_bytes, model_to_bytes, save_model
from .toy import Dataset, Stats, destandardize, read_csv, sample_toy, standardize, write_csv
from .train import RunConfig, TrainingAborted, train

__version__ = "0.1.0"
