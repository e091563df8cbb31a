"""Physics-guided flow-matching generative design for 2-D airfoils.

Submodules
----------
nncore       dense tanh networks with exact backward passes and Adam
geometry     CST parameterization, validity checks, synthetic corpus
physics      thin-airfoil oracle, dropout surrogate, physical loss
flowmatch    flow-matching training and Euler sampling
guidance     energy-guided sampling
dflow        optimization of the initial noise through the unrolled solve
diagnostics  alignment, UQ profiles and asynchronous-gap metrics
harness      configuration, checkpoints, experiments, CLI
"""

from .dflow import DflowConfig, DflowResult, dflow_batch, dflow_sur
from .flowmatch import FlowMatcher, TrainConfig, train_conditional_flow, train_flow
from .geometry import DesignDataset, synthesize_dataset, validate_airfoil
from .guidance import GuidanceConfig, sample_energy_guided
from .physics import DropoutSurrogate, OracleEvaluator, PhysicalLoss, oracle_cl, train_surrogate

__version__ = "0.1.0"

__all__ = [
    "DesignDataset",
    "DflowConfig",
    "DflowResult",
    "DropoutSurrogate",
    "FlowMatcher",
    "GuidanceConfig",
    "OracleEvaluator",
    "PhysicalLoss",
    "TrainConfig",
    "dflow_batch",
    "dflow_sur",
    "oracle_cl",
    "sample_energy_guided",
    "synthesize_dataset",
    "train_conditional_flow",
    "train_flow",
    "train_surrogate",
    "validate_airfoil",
]
