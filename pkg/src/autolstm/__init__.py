"""Automatic per-detector LSTM customisation for traffic speed forecasting."""
from .alc import AlcParams, AlcTrace, CustomizedModel, Termination, compute_aare, run_alc
from .data import (Dpc, DpcDataset, Period, SpeedRecord, extract_all, extract_dpc,
                   generate_synthetic, parse_csv, write_csv)
from .estimators import AlcForecaster, LstmForecaster
from .lstm import LstmConfig, TrainedModel, TrainingOutcome, calibrate_epoch_times, train
from .mdp import MdpModel, PolicyTable, SearchAction, SearchState, value_iteration
from .report import aggregate, persistence_baseline

__version__ = "0.1.0"

__all__ = [
    "AlcForecaster", "AlcParams", "AlcTrace", "CustomizedModel", "Dpc", "DpcDataset",
    "LstmConfig", "LstmForecaster", "MdpModel", "Period", "PolicyTable", "SearchAction",
    "SearchState", "SpeedRecord", "Termination", "TrainedModel", "TrainingOutcome",
    "aggregate", "calibrate_epoch_times", "compute_aare", "extract_all", "extract_dpc", "generate_synthetic",
    "parse_csv", "persistence_baseline", "run_alc", "train", "value_iteration", "write_csv",
]
