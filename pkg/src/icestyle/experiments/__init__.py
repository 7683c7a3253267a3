from .runner import (ARMS, ExperimentSpec, ZeroShotViolation, emit_overlay, render_table, run_experiment,
                     run_matrix, verify_zero_shot)
from .synth import SyntheticDomainParams, Texture, gen_synthetic_domains
