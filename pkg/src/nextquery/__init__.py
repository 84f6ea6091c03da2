"""Next-query prediction: bounded recursive memory over multi-turn chats,
judge-scored rewards, group-relative policy training, and dataset curation."""

from .conversation import Conversation, Turn, split_context_target
from .history import InterfaceSpec, MemoryState, PredictionSet, run_episode, step_memory
from .judging import Reward, judge_reward_best_of_n, map_score, total_reward

__all__ = [
    "Conversation",
    "Turn",
    "split_context_target",
    "InterfaceSpec",
    "MemoryState",
    "PredictionSet",
    "run_episode",
    "step_memory",
    "Reward",
    "judge_reward_best_of_n",
    "map_score",
    "total_reward",
]

__version__ = "0.1.0"
