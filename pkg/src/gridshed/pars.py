"""Derivative-free policy search (ARS lineage) with a latent-context extension.

The policy is a single linear map from the normalized observation, optionally
concatenated with a small latent context vector z, to the raw action; the
environment's mask turns raw actions into feasible ones.  Training perturbs
the weights with antithetic Gaussian directions, ranks directions by the
better of their two returns, and steps along the top-ranked differences
scaled by the spread of the retained returns.  The latent context gives the
same machinery a second life at deployment time: a few probe episodes are
enough to re-fit z to a new operating context without touching the weights.
"""
from __future__ import annotations

import json
import time
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from .env import Scenario
from .rollout import EPS_NORM, EpisodeOut, RolloutJob, RolloutPool, TaskResult

__all__ = [
    "RunningStat",
    "Policy",
    "ParsConfig",
    "IterationStats",
    "policy_act",
    "pars_iteration",
    "evaluate",
    "meta_adapt",
    "save_policy",
    "load_policy",
]


@dataclass
class RunningStat:
    """Streaming mean/variance (population) with exact pairwise merging.

    Until the first sample arrives the statistics act as the identity
    (mean 0, variance 1) so an untrained policy sees raw observations.
    """

    count: int
    mean: np.ndarray
    m2: np.ndarray

    @classmethod
    def zeros(cls, dim: int) -> "RunningStat":
        return cls(0, np.zeros(dim), np.zeros(dim))

    @property
    def var(self) -> np.ndarray:
        if self.count < 1:
            return np.ones_like(self.mean)
        return self.m2 / self.count

    def push(self, x: np.ndarray) -> None:
        self.count += 1
        d = x - self.mean
        self.mean = self.mean + d / self.count
        self.m2 = self.m2 + d * (x - self.mean)

    def merge_raw(self, count: int, mean: np.ndarray, m2: np.ndarray) -> None:
        if count == 0:
            return
        if self.count == 0:
            self.count, self.mean, self.m2 = count, mean.copy(), m2.copy()
            return
        n = self.count + count
        d = mean - self.mean
        self.mean = self.mean + d * (count / n)
        self.m2 = self.m2 + m2 + d * d * (self.count * count / n)
        self.count = n

    def merge(self, other: "RunningStat") -> None:
        self.merge_raw(other.count, other.mean, other.m2)

    def copy(self) -> "RunningStat":
        return RunningStat(self.count, self.mean.copy(), self.m2.copy())


@dataclass
class Policy:
    """Linear policy: action = w · [(obs − mean)/sqrt(var + ε) ⊕ z]."""

    w: np.ndarray  # act_dim × (obs_dim + z_dim)
    stats: RunningStat  # over obs_dim
    z: np.ndarray  # z_dim (may be empty)
    version: int = 0

    @classmethod
    def zeros(cls, act_dim: int, obs_dim: int, z_dim: int = 0) -> "Policy":
        return cls(np.zeros((act_dim, obs_dim + z_dim)),
                   RunningStat.zeros(obs_dim), np.zeros(z_dim))

    @property
    def obs_dim(self) -> int:
        return self.stats.mean.shape[0]

    @property
    def z_dim(self) -> int:
        return self.z.shape[0]

    @property
    def act_dim(self) -> int:
        return self.w.shape[0]

    def __post_init__(self):
        if self.w.shape[1] != self.obs_dim + self.z_dim:
            raise ValueError(
                f"w has {self.w.shape[1]} columns, expected obs_dim {self.obs_dim} "
                f"+ z_dim {self.z_dim}")
        if not (np.isfinite(self.w).all() and np.isfinite(self.z).all()):
            raise ValueError("policy contains non-finite entries")

    def act(self, obs: np.ndarray) -> np.ndarray:
        return policy_act(self, obs)

    def copy(self) -> "Policy":
        return Policy(self.w.copy(), self.stats.copy(), self.z.copy(), self.version)


def policy_act(policy: Policy, obs: np.ndarray) -> np.ndarray:
    """Raw (unmasked) action for one observation."""
    obs = np.asarray(obs, dtype=float)
    if obs.shape != (policy.obs_dim,):
        raise ValueError(f"observation has shape {obs.shape}, expected ({policy.obs_dim},)")
    feat = np.concatenate([(obs - policy.stats.mean) / np.sqrt(policy.stats.var + EPS_NORM),
                           policy.z])
    return policy.w @ feat


@dataclass(frozen=True)
class ParsConfig:
    n_directions: int = 32
    top_b: int = 16
    step_size: float = 0.02
    perturb_std: float = 0.02
    rollouts_per_direction: int = 20  # task-minibatch size per iteration
    eval_every: int = 10
    seed: int = 0
    perturb_z: bool = False  # joint (w, z) perturbation (latent-context training)

    def __post_init__(self):
        if self.n_directions < 1:
            raise ValueError("n_directions must be >= 1")
        if not (1 <= self.top_b <= self.n_directions):
            raise ValueError("top_b must be in [1, n_directions]")
        if self.step_size <= 0 or self.perturb_std <= 0:
            raise ValueError("step_size and perturb_std must be positive")
        if self.rollouts_per_direction < 1:
            raise ValueError("rollouts_per_direction must be >= 1")


@dataclass(frozen=True)
class IterationStats:
    iteration: int
    mean_return: float  # mean over all 2N direction-averaged returns
    std_return: float
    best_return: float
    sigma_r: float  # spread of the retained returns (update denominator)
    skipped: bool
    n_tasks: int
    wall_s: float


def _direction_returns(policy: Policy, config: ParsConfig, tasks: Sequence[Scenario],
                       deltas_w: np.ndarray, deltas_z: np.ndarray,
                       pool: RolloutPool, stats_out: RunningStat | None,
                       ) -> tuple[np.ndarray, np.ndarray]:
    """Evaluate all antithetic perturbations over the task minibatch.

    Returns (r_plus, r_minus), each length N; optionally merges every
    episode's observation statistics into ``stats_out``.  Jobs are laid out
    (direction, sign, task) and consumed in that fixed order.
    """
    nu = config.perturb_std
    mean, var = policy.stats.mean, policy.stats.var
    jobs: list[RolloutJob] = []
    for k in range(config.n_directions):
        for sign in (1.0, -1.0):
            w = policy.w + sign * nu * deltas_w[k]
            z = policy.z + sign * nu * deltas_z[k]
            for sc in tasks:
                jobs.append(RolloutJob(w, z, mean, var, sc))
    outs = pool.run(jobs)
    if stats_out is not None:
        for out in outs:
            stats_out.merge_raw(out.obs_count, out.obs_mean, out.obs_m2)
    rets = np.array([o.task.total_reward for o in outs]).reshape(
        config.n_directions, 2, len(tasks)).mean(axis=2)
    return rets[:, 0], rets[:, 1]


def pars_iteration(policy: Policy, config: ParsConfig,
                   task_sampler: Callable[[np.random.Generator, int], Sequence[Scenario]],
                   pool: RolloutPool, rng: np.random.Generator,
                   ) -> tuple[Policy, IterationStats]:
    """One training iteration; returns the updated policy and its statistics.

    The update direction is Σ_topb (r+ − r−)·δ scaled by α/(top_b·σ_R) with
    σ_R the population standard deviation of the 2·top_b retained returns;
    directions are ranked by max(r+, r−), ties broken by direction index.
    A zero σ_R skips the weight update (observation statistics still absorb
    the rollouts).
    """
    t0 = time.perf_counter()
    tasks = list(task_sampler(rng, config.rollouts_per_direction))
    if not tasks:
        raise ValueError("task_sampler returned no tasks")
    n, shape = config.n_directions, policy.w.shape
    deltas_w = rng.standard_normal((n, *shape))
    if config.perturb_z and policy.z_dim > 0:
        deltas_z = rng.standard_normal((n, policy.z_dim))
    else:
        deltas_z = np.zeros((n, policy.z_dim))

    new_stats = policy.stats.copy()
    r_plus, r_minus = _direction_returns(policy, config, tasks, deltas_w,
                                         deltas_z, pool, new_stats)

    order = sorted(range(n), key=lambda k: (-max(r_plus[k], r_minus[k]), k))
    keep = order[:config.top_b]
    retained = np.concatenate([r_plus[keep], r_minus[keep]])
    sigma_r = float(retained.std())

    all_rets = np.concatenate([r_plus, r_minus])
    skipped = sigma_r == 0.0
    if skipped:
        new_w, new_z = policy.w.copy(), policy.z.copy()
    else:
        scale = config.step_size / (config.top_b * sigma_r)
        diff = (r_plus[keep] - r_minus[keep])
        new_w = policy.w + scale * np.tensordot(diff, deltas_w[keep], axes=1)
        new_z = policy.z + scale * (diff @ deltas_z[keep])
    new_policy = Policy(new_w, new_stats, new_z, policy.version + 1)
    stats = IterationStats(new_policy.version, float(all_rets.mean()),
                           float(all_rets.std()), float(all_rets.max()),
                           sigma_r, skipped, len(tasks),
                           time.perf_counter() - t0)
    return new_policy, stats


def evaluate(policy: Policy, scenarios: Sequence[Scenario],
             pool: RolloutPool) -> list[TaskResult]:
    """Deterministic greedy rollout per scenario, ordered by scenario_id.

    Individual scenario failures come back as failed TaskResults; the batch
    never aborts.
    """
    ordered = sorted(scenarios, key=lambda s: s.scenario_id)
    jobs = [RolloutJob(policy.w, policy.z, policy.stats.mean, policy.stats.var, sc)
            for sc in ordered]
    return [out.task for out in pool.run(jobs)]


def meta_adapt(policy: Policy, probe_scenarios: Sequence[Scenario],
               pool: RolloutPool, budget: int,
               rng: np.random.Generator | None = None,
               spread: float = 0.1) -> Policy:
    """Greedy z-only adaptation: evaluate the current z plus Gaussian
    perturbations on the probe scenarios (``budget`` candidate evaluations
    total) and keep the best scorer.  Weights and statistics are untouched;
    ties favor the incumbent."""
    if policy.z_dim == 0:
        raise ValueError("meta_adapt requires z_dim > 0")
    if budget <= 0:
        return policy
    rng = rng if rng is not None else np.random.default_rng(0)
    candidates = [policy.z]
    candidates += [policy.z + spread * rng.standard_normal(policy.z_dim)
                   for _ in range(budget - 1)]
    best_z, best_score = policy.z, -np.inf
    for z in candidates:
        trial = Policy(policy.w, policy.stats, z, policy.version)
        results = evaluate(trial, probe_scenarios, pool)
        score = float(np.mean([r.total_reward for r in results]))
        if score > best_score:
            best_z, best_score = z, score
    return Policy(policy.w.copy(), policy.stats.copy(), best_z.copy(),
                  policy.version + 1)


# -- checkpoints --------------------------------------------------------------

def save_policy(policy: Policy, path, *, config_hash: str = "",
                env_spec_hash: str = "") -> None:
    """Write a JSON checkpoint (weights row-major, stats, z, version, hashes)."""
    payload = {
        "act_dim": policy.act_dim,
        "obs_dim": policy.obs_dim,
        "z_dim": policy.z_dim,
        "w": policy.w.reshape(-1).tolist(),
        "obs_count": policy.stats.count,
        "obs_mean": policy.stats.mean.tolist(),
        "obs_m2": policy.stats.m2.tolist(),
        "z": policy.z.tolist(),
        "version": policy.version,
        "config_hash": config_hash,
        "env_spec_hash": env_spec_hash,
    }
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=1)
        fh.write("\n")


def load_policy(path) -> tuple[Policy, dict]:
    """Read a checkpoint; returns (policy, metadata with the stored hashes)."""
    with open(path) as fh:
        payload = json.load(fh)
    act, obs, zd = payload["act_dim"], payload["obs_dim"], payload["z_dim"]
    policy = Policy(
        np.array(payload["w"], dtype=float).reshape(act, obs + zd),
        RunningStat(int(payload["obs_count"]),
                    np.array(payload["obs_mean"], dtype=float),
                    np.array(payload["obs_m2"], dtype=float)),
        np.array(payload["z"], dtype=float),
        int(payload["version"]),
    )
    meta = {"config_hash": payload.get("config_hash", ""),
            "env_spec_hash": payload.get("env_spec_hash", "")}
    return policy, meta
