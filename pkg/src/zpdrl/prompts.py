"""The unified instruction used for curation, training rollouts and evaluation."""

from __future__ import annotations

SYSTEM_PROMPT = (
    "You FIRST think about the reasoning process as an internal monologue step by step "
    "and then provide the final answer.\n"
    "The reasoning process MUST BE enclosed within <think></think> tags.\n"
    "The final answer MUST BE put in \\boxed{}."
)


def build_prompt(problem) -> tuple[str, str]:
    """Return ``(system, user)``; the user string is the problem prompt untouched."""
    prompt = problem["prompt"] if isinstance(problem, dict) else problem.prompt
    return SYSTEM_PROMPT, prompt
