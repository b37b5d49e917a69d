"""Recurrent world model trained by predictive coding under a two-part
code-length objective, with controllers that learn to exploit it."""

from .curiosity import CuriosityConfig, intrinsic_reward
from .environments import EnvSpec, make_env, make_env_spec, optimal_return
from .history import HistoryStore, StepRecord, TrialSpan
from .nn_core import NetParams, NetSpec, bptt_gradient, forward_step, make_lstm_spec, sgd_step
from .orchestrator import Orchestrator, PhaseReport, RunConfig, run
from .world_model import (
    CodeLengthReport,
    CodingScheme,
    WorldModel,
    accept_if_shorter,
    code_length,
    make_world_model,
    predict_step,
    prediction_error,
    propose_structural_change,
    sleep_train,
)

__all__ = [
    "CodeLengthReport",
    "CodingScheme",
    "CuriosityConfig",
    "EnvSpec",
    "HistoryStore",
    "NetParams",
    "NetSpec",
    "Orchestrator",
    "PhaseReport",
    "RunConfig",
    "StepRecord",
    "TrialSpan",
    "WorldModel",
    "accept_if_shorter",
    "bptt_gradient",
    "code_length",
    "forward_step",
    "intrinsic_reward",
    "make_env",
    "make_env_spec",
    "make_lstm_spec",
    "make_world_model",
    "optimal_return",
    "predict_step",
    "prediction_error",
    "propose_structural_change",
    "run",
    "sgd_step",
    "sleep_train",
]
