"""Generation-phase planning and simulation for synchronous RLHF.

Plans each step's rollout (shared-prefix prefill, length-ranked prompt
assignment, actor-count selection, locality-aware placement) and replays the
plan against actual response lengths in a discrete-event simulator.
"""

from .dedup import PrefillCapacity, PrefixIndex, build_index, dedup_savings, select_prefix_length
from .errors import ConfigError, PlacementError, TraceFormatError, TraceValidationError
from .pipeline import STRATEGIES, PlannerConfig, TrainingResult, plan_step, run_training
from .placement import ClusterTopology, PlacementPlan, TransferSizes, check_overlap, place
from .planner import ActorGroup, GenerationPlan, assign, estimate_actor_time, estimate_cost, scale
from .predictor import LengthHistory, NoiseModel, predict_lengths
from .profile import LatencyProfile
from .simulator import SimConfig, SimResult, baseline_global_cut, run_step
from .workload import Prompt, StepRecord, SynthConfig, WorkloadTrace, generate_synthetic, load_trace, save_trace

__version__ = "0.1.0"
