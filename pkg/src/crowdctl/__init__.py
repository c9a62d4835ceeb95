"""Pricing and quality control for crowdsourced binary-labeling batches."""
from .belief import Action, BeliefState, QualityConfig, decide, init_belief, task_quality, update_belief
from .config import SimConfig
from .costsetter import CostPolicy, PayAction, Plan, build_plan
from .frontier import ThetaTable, batch_theta, build_theta_table, expected_ballots
from .reconstruct import BetaFit, BatchHistogram, fit_lambda, reconstruct_histogram
from .selector import Routing, priority, select_next
from .sim import Controller, GaoFixed, Octopus, RunResult, StaticPay, replay_episode, run_episode
from .trace import BallotEvent, BallotTrace
from .workers import DifficultyPrior, WorkerPool, accuracy, em_estimate

__version__ = "0.1.0"
