"""Episode rollouts and the shared worker pool.

A rollout is a pure function of (policy arrays, scenario): the environment is
deterministic, actions are linear in the normalized observation, and the mask
is applied inside the environment.  That purity is what makes training
bit-reproducible regardless of worker count — the pool just maps jobs and the
caller consumes results in submission order.

Workers are plain ``multiprocessing`` fork workers, each holding one
:class:`~gridshed.env.GridEnv` built once from the pickled case table.
``workers <= 1`` bypasses multiprocessing entirely (identical results, easier
debugging).
"""
from __future__ import annotations

import multiprocessing as mp
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .dynamics import SimParams
from .env import GridEnv, EnvSpec, RewardBreakdown, Scenario
from .network import PowerFlowCase
from .uvls import UvlsSettings

__all__ = ["TaskResult", "RolloutJob", "EpisodeOut", "RolloutPool", "rollout_episode"]

EPS_NORM = 1e-8  # variance floor inside observation normalization


@dataclass(frozen=True)
class TaskResult:
    """Outcome of one scenario episode under one controller."""

    scenario_id: str
    total_reward: float
    voltage_penalty: float
    shed_penalty: float
    invalid_penalty: float
    terminal_penalty: float
    mw_shed_policy: float
    mw_shed_uvls: float
    min_terminal_voltage: float
    steps: int
    failed: bool = False

    @property
    def breakdown(self) -> RewardBreakdown:
        return RewardBreakdown(self.voltage_penalty, self.shed_penalty,
                               self.invalid_penalty, self.terminal_penalty)

    @property
    def mw_shed_total(self) -> float:
        return self.mw_shed_policy + self.mw_shed_uvls


@dataclass(frozen=True)
class RolloutJob:
    """One episode request: frozen policy arrays plus the scenario."""

    w: np.ndarray
    z: np.ndarray
    obs_mean: np.ndarray
    obs_var: np.ndarray
    scenario: Scenario


@dataclass(frozen=True)
class EpisodeOut:
    """Episode result plus the observation statistics gathered along the way."""

    task: TaskResult
    obs_count: int
    obs_mean: np.ndarray
    obs_m2: np.ndarray


def _normalize(obs: np.ndarray, mean: np.ndarray, var: np.ndarray) -> np.ndarray:
    return (obs - mean) / np.sqrt(var + EPS_NORM)


def rollout_episode(env: GridEnv, job: RolloutJob) -> EpisodeOut:
    """Run one full episode; never raises for in-episode failures.

    Observation statistics cover every observation the policy acted on
    (including the reset observation, excluding the unused final one).
    """
    dim = env.spec.obs_dim
    count = 0
    mean = np.zeros(dim)
    m2 = np.zeros(dim)
    sums = dict(voltage_penalty=0.0, shed_penalty=0.0,
                invalid_penalty=0.0, terminal_penalty=0.0)
    mw_pol = mw_uvls = 0.0
    steps = 0
    min_term_v = 0.0
    try:
        obs = env.reset(job.scenario)
        done = False
        while not done:
            count += 1
            d = obs - mean
            mean = mean + d / count
            m2 = m2 + d * (obs - mean)
            action = job.w @ np.concatenate([_normalize(obs, job.obs_mean, job.obs_var), job.z])
            obs, rb, done, info = env.step(action)
            sums["voltage_penalty"] += rb.voltage_penalty
            sums["shed_penalty"] += rb.shed_penalty
            sums["invalid_penalty"] += rb.invalid_penalty
            sums["terminal_penalty"] += rb.terminal_penalty
            mw_pol += info["mw_shed_policy"]
            mw_uvls += info["mw_shed_uvls"]
            min_term_v = info["min_monitored_v"]
            steps += 1
        total = sum(sums.values())
        task = TaskResult(job.scenario.scenario_id, float(total),
                          float(sums["voltage_penalty"]), float(sums["shed_penalty"]),
                          float(sums["invalid_penalty"]), float(sums["terminal_penalty"]),
                          float(mw_pol), float(mw_uvls),
                          float(min_term_v), steps)
    except Exception:
        # a scenario that cannot even run scores like a terminal failure and
        # is flagged so reports can call it out
        task = TaskResult(job.scenario.scenario_id, -env.spec.r_fail,
                          0.0, 0.0, 0.0, -env.spec.r_fail,
                          0.0, 0.0, 0.0, 0, failed=True)
        count = 0
        mean = np.zeros(dim)
        m2 = np.zeros(dim)
    return EpisodeOut(task, count, mean, m2)


# -- worker-process plumbing -------------------------------------------------

_WORKER_ENV: GridEnv | None = None


def _init_worker(cases, spec, relays, params) -> None:
    global _WORKER_ENV
    _WORKER_ENV = GridEnv(cases, spec, relays=relays, params=params)


def _run_job(job: RolloutJob) -> EpisodeOut:
    assert _WORKER_ENV is not None, "worker not initialized"
    return rollout_episode(_WORKER_ENV, job)


class RolloutPool:
    """Maps rollout jobs over a fixed case table, serially or across processes.

    Results always come back in submission order, so any aggregation done on
    them is independent of worker count — the reproducibility contract the
    trainer relies on.
    """

    def __init__(self, cases: PowerFlowCase | Mapping[str, PowerFlowCase] | Sequence[PowerFlowCase],
                 spec: EnvSpec | None = None, *,
                 relays: UvlsSettings | None = None,
                 params: SimParams | None = None,
                 workers: int = 1):
        self.workers = max(1, int(workers))
        self._env = GridEnv(cases, spec, relays=relays, params=params)
        self.spec = self._env.spec
        self._pool = None
        if self.workers > 1:
            ctx = mp.get_context("fork")
            self._pool = ctx.Pool(self.workers, initializer=_init_worker,
                                  initargs=(cases, self.spec, relays, params))

    def run(self, jobs: Sequence[RolloutJob]) -> list[EpisodeOut]:
        jobs = list(jobs)
        if self._pool is None or len(jobs) < 2:
            return [rollout_episode(self._env, j) for j in jobs]
        chunk = max(1, len(jobs) // (4 * self.workers))
        return self._pool.map(_run_job, jobs, chunksize=chunk)

    def close(self) -> None:
        if self._pool is not None:
            self._pool.close()
            self._pool.join()
            self._pool = None

    def __enter__(self) -> "RolloutPool":
        return self

    def __exit__(self, *exc) -> None:
        self.close()
