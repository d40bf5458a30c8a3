"""Synthetic workload: task nodes with sparse dependencies, no coordination structure."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from ..errors import ConfigError


@dataclass(frozen=True)
class WorkloadConfig:
    seeds_K: int = 5
    target_agents_per_task_A: int = 5
    dependency_density: float = 0.1

    def validate(self) -> None:
        if self.seeds_K < 1 or self.target_agents_per_task_A < 1:
            raise ConfigError("seeds_K and target_agents_per_task_A must be positive")
        if not 0.0 <= self.dependency_density <= 1.0:
            raise ConfigError("dependency_density must lie in [0, 1]")

    def tasks_per_seed(self, N: int) -> int:
        return max(1, math.ceil(N / (self.seeds_K * self.target_agents_per_task_A)))


@dataclass
class Workload:
    tasks: list[str]
    edges: list[tuple[str, str]] = field(default_factory=list)
    M: int = 1

    def __len__(self) -> int:
        return len(self.tasks)


def generate_workload(config: WorkloadConfig, N: int, seed: int = 0) -> Workload:
    """K seeds each expanded into M tasks; dependencies only run forward within a seed."""
    config.validate()
    M = config.tasks_per_seed(N)
    rng = np.random.default_rng([seed, N, 104729])
    tasks, edges = [], []
    for k in range(config.seeds_K):
        ids = [f"task-{k}-{m}" for m in range(M)]
        tasks.extend(ids)
        for i in range(M):
            for j in range(i + 1, M):
                if config.dependency_density > 0 and rng.random() < config.dependency_density:
                    edges.append((ids[i], ids[j]))
    return Workload(tasks, edges, M)
