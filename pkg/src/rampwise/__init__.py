"""Event-first wind-power ramp forecasting.

Wavelet band decomposition, deterministic ramp extraction, bandit feature
selection, two-stage forest and multi-task predictors, event-guided
trajectory reconstruction and a contextual-bandit workflow orchestrator.
"""
from .data import DatasetBundle, load_csv, normalize
from .pipeline import WorkflowConfig, WorkflowId, run_workflow
from .rba import Event, EventKind, EventSet, RBAConfig, extract_events
from .synth import SynthConfig, synth_generate

__version__ = "0.1.0"
