"""Bandit planner over (metric, direction) actions.

Actions alternate in blocks of ``block_len`` steps between uniform exploration
and exploitation of the action with the highest mean reward. The reward for a
child scoring ``y_c`` against best-so-far ``v_t`` is ``max(0, y_c - tau * v_t)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .archive import Archive, PlannerAction
from .metrics import metric_names

__all__ = [
    "ActionStats",
    "PlannerAction",
    "PlannerState",
    "actions_for_task",
    "select_inspirations",
    "threshold_reward",
]


class PlannerError(RuntimeError):
    pass


@dataclass
class ActionStats:
    pulls: int = 0
    total_reward: float = 0.0

    @property
    def mean(self) -> float | None:
        return self.total_reward / self.pulls if self.pulls else None


def actions_for_task(task: str) -> list[PlannerAction]:
    return [PlannerAction(m, d) for m in metric_names(task) for d in (1, -1)]


def threshold_reward(y_child: float, best_so_far: float, tau: float) -> float:
    return max(0.0, y_child - tau * best_so_far)


@dataclass
class PlannerState:
    actions: list[PlannerAction]
    tau: float = 0.95
    block_len: int = 10
    step: int = 0
    stats: dict[PlannerAction, ActionStats] = field(default_factory=dict)

    def __post_init__(self):
        if not 0.0 < self.tau < 1.0:
            raise ValueError(f"tau must lie in (0, 1), got {self.tau}")
        if self.block_len < 1:
            raise ValueError("block_len must be >= 1")
        for a in self.actions:
            self.stats.setdefault(a, ActionStats())

    @classmethod
    def for_task(cls, task: str, tau: float = 0.95, block_len: int = 10) -> "PlannerState":
        return cls(actions_for_task(task), tau=tau, block_len=block_len)

    def is_explore_step(self, step: int | None = None) -> bool:
        step = self.step if step is None else step
        return (step // self.block_len) % 2 == 0

    def best_action(self) -> PlannerAction | None:
        """Highest mean reward among pulled actions; ties go to the smallest (metric, direction)."""
        pulled = [(a, s.mean) for a, s in self.stats.items() if s.pulls > 0]
        if not pulled:
            return None
        return min(pulled, key=lambda item: (-item[1], item[0].metric, item[0].direction))[0]

    def select_action(self, rng: np.random.Generator) -> PlannerAction:
        if not self.actions:
            raise PlannerError("no actions registered")
        choice = None
        if not self.is_explore_step():
            choice = self.best_action()
        if choice is None:
            choice = self.actions[int(rng.integers(len(self.actions)))]
        self.step += 1
        return choice

    def update_reward(self, action: PlannerAction, y_child: float, best_so_far: float) -> float:
        if action not in self.stats:
            raise PlannerError(f"unknown action {action}")
        reward = threshold_reward(y_child, best_so_far, self.tau)
        s = self.stats[action]
        s.pulls += 1
        s.total_reward += reward
        return reward

    def total_pulls(self) -> int:
        return sum(s.pulls for s in self.stats.values())

    def to_json(self) -> dict:
        return {
            "tau": self.tau,
            "block_len": self.block_len,
            "step": self.step,
            "stats": [
                {
                    "metric": a.metric,
                    "direction": a.direction,
                    "pulls": self.stats[a].pulls,
                    "total_reward": self.stats[a].total_reward,
                }
                for a in self.actions
            ],
        }

    @classmethod
    def from_json(cls, obj: dict) -> "PlannerState":
        actions, stats = [], {}
        for row in obj["stats"]:
            a = PlannerAction(row["metric"], int(row["direction"]))
            actions.append(a)
            stats[a] = ActionStats(int(row["pulls"]), float(row["total_reward"]))
        return cls(
            actions,
            tau=float(obj["tau"]),
            block_len=int(obj["block_len"]),
            step=int(obj.get("step", 0)),
            stats=stats,
        )


def select_inspirations(
    archive: Archive, action: PlannerAction, k: int, parent_id: str | None = None
) -> list[str]:
    """Top ``k`` record ids by metric*direction, skipping the parent."""
    if k < 1:
        raise ValueError("k must be >= 1")
    ranked = archive.rank_by_metric(action.metric, action.direction)
    return [rid for rid in ranked if rid != parent_id][:k]
