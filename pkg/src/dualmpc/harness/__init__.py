"""Command line, instance generators and experiment drivers."""

from .generators import (
    MpcFixture,
    TrafficInstance,
    TrafficParams,
    fixture_mpc1,
    fixture_p1,
    gen_random_qp,
    gen_ring_traffic,
)
from .studies import EXPERIMENTS, ExperimentConfig, run_experiment

__all__ = [
    "MpcFixture", "TrafficInstance", "TrafficParams", "fixture_mpc1", "fixture_p1", "gen_random_qp",
    "gen_ring_traffic", "EXPERIMENTS", "ExperimentConfig", "run_experiment",
]
