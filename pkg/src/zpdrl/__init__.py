"""Difficulty-curated SFT + GRPO training on a toy autoregressive policy."""

from .backend import BackendUnavailable, ChatCompletionBackend, GenRequest, GenResponse, ToyPolicyBackend
from .config import TrainConfig
from .curator import (
    AttemptRecord,
    Bin,
    DifficultyLabel,
    Problem,
    curate,
    load_curated,
    load_problems,
    sample_bin,
    score_problem,
    stratify,
    zone_filter,
)
from .estimators import GRPOPolicy, SFTPolicy, ZPDCurator
from .evaluation import EvalReport, evaluate
from .grpo import GrpoConfig, compute_advantages, grpo_step, grpo_train, surrogate_loss
from .policy import PolicyParams, ToyTask, load_checkpoint, save_checkpoint, sequence_logprob
from .prompts import SYSTEM_PROMPT, build_prompt
from .sft import SftConfig, sft_loss, sft_train
from .verifier import AnswerValue, VerifierOutcome, equivalent, extract_boxed, parse_answer, reward

__version__ = "0.1.0"
