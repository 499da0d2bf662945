"""Three-stage training: per-zone policies, hard-case mining, coordination.

Stage 1 trains each zone's policy on uniformly sampled tasks restricted to
that zone.  Stage 2 re-trains with minibatches that always carry a quota of
the tasks the stage-1 policy handled worst.  Stage 3 assembles the zone
policies into one block-structured full-system policy (zone weights on zone
rows/columns, zeros across zones) and fine-tunes it jointly — the only stage
where cross-zone couplings and the latent context can become nonzero.

Zone training never builds a reduced simulator: zone policies are embedded
into full-system weight matrices on their way to the rollout pool and the
observation statistics are projected back, so a zone policy's view of the
world is exactly the slice it will own inside the assembled policy.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from .env import EnvSpec, Scenario, _nearest_monitored
from .network import PowerFlowCase
from .pars import (IterationStats, ParsConfig, Policy, RunningStat, evaluate,
                   pars_iteration)
from .rollout import EpisodeOut, RolloutJob, RolloutPool, TaskResult
from .screening import Screener

__all__ = [
    "ZoneTask",
    "CurriculumConfig",
    "ZonePool",
    "build_zone_tasks",
    "train_zone",
    "mine_difficult",
    "assemble_policy",
    "coordinated_train",
]


@dataclass(frozen=True)
class ZoneTask:
    """One zone's restricted control subproblem."""

    zone_id: str
    spec: EnvSpec  # restricted monitored/controllable lists
    obs_idx: tuple[int, ...]  # full-observation feature columns owned by the zone
    act_idx: tuple[int, ...]  # full-action rows owned by the zone
    scenarios: tuple[Scenario, ...]

    @property
    def n_scenarios(self) -> int:
        return len(self.scenarios)


@dataclass(frozen=True)
class CurriculumConfig:
    stage1_iters: int = 30
    stage2_iters: int = 20
    stage3_iters: int = 20
    difficulty_threshold: float = -1000.0  # a failed episode is a difficult task
    n_difficult_per_batch: int = 4
    z_dim: int = 4
    seed: int = 0

    def __post_init__(self):
        for name in ("stage1_iters", "stage2_iters", "stage3_iters"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.n_difficult_per_batch < 0:
            raise ValueError("n_difficult_per_batch must be >= 0")
        if self.z_dim < 0:
            raise ValueError("z_dim must be >= 0")


def build_zone_tasks(case: PowerFlowCase, spec: EnvSpec,
                     scenarios: Sequence[Scenario],
                     screener: Screener | None = None) -> list[ZoneTask]:
    """Split the control problem and the dataset by zone.

    A fault bus belongs to a zone when any of its no-control rollouts drives
    that zone's monitored buses below the envelope; buses violating several
    zones land in each of them (boundary faults), so zone datasets may
    overlap.  A bus that joins a zone brings every one of its scenarios along,
    mild durations included — staying quiet on those is part of the zone's
    task.  Buses that violate nothing anywhere stay out of all zone datasets
    (the coordinated stage still trains on them via the full dataset).
    """
    scr = screener if screener is not None else Screener(case, spec=spec)
    owner = {b: z.name for z in case.zones for b in z.buses}
    zone_names = sorted({z.name for z in case.zones})

    bus_zones: dict[int, frozenset[str]] = {}
    for sc in scenarios:
        out = scr.outcome(sc.case_id, sc.fault_bus, sc.fault_duration,
                          early_abort=False)
        bus_zones[sc.fault_bus] = bus_zones.get(sc.fault_bus, frozenset()) | out.violated_zones

    tasks = []
    for zone in zone_names:
        mon = tuple(b for b in spec.monitored_buses if owner.get(b) == zone)
        ctl = tuple(b for b in spec.controllable_buses if owner.get(b) == zone)
        if not mon or not ctl:
            raise ValueError(f"zone {zone!r} owns no monitored or no controllable buses")
        assoc = tuple(mon.index(_nearest_monitored(case, cb, mon)) for cb in ctl)
        zspec = EnvSpec(mon, ctl, assoc, spec.act_low, spec.act_high,
                        spec.control_dt, spec.episode_len, spec.fault_start,
                        spec.v_mask, spec.c1, spec.c2, spec.c3, spec.r_fail)
        n_mon_full = len(spec.monitored_buses)
        obs_idx = tuple(spec.monitored_buses.index(b) for b in mon) + tuple(
            n_mon_full + spec.controllable_buses.index(b) for b in ctl)
        act_idx = tuple(spec.controllable_buses.index(b) for b in ctl)
        zone_scen = tuple(sc for sc in scenarios if zone in bus_zones[sc.fault_bus])
        tasks.append(ZoneTask(zone, zspec, obs_idx, act_idx, zone_scen))
    return tasks


class ZonePool:
    """Adapter that runs zone-dimensional jobs on the full-system pool.

    Zone weights are embedded into a zeros full-size matrix (their block
    rows/columns), zone statistics are padded with identity statistics, and
    the returned full-observation statistics are sliced back down — per
    feature, so the projection is exact.
    """

    def __init__(self, pool: RolloutPool, task: ZoneTask, full_spec: EnvSpec):
        self._pool = pool
        self._task = task
        self._full_obs = full_spec.obs_dim
        self._full_act = full_spec.act_dim
        self._rows = np.asarray(task.act_idx)
        self._cols = np.asarray(task.obs_idx)

    def run(self, jobs: Sequence[RolloutJob]) -> list[EpisodeOut]:
        full_jobs = []
        for job in jobs:
            if job.z.size:
                raise ValueError("zone policies train with z_dim = 0")
            w = np.zeros((self._full_act, self._full_obs))
            w[np.ix_(self._rows, self._cols)] = job.w
            mean = np.zeros(self._full_obs)
            var = np.ones(self._full_obs)
            mean[self._cols] = job.obs_mean
            var[self._cols] = job.obs_var
            full_jobs.append(RolloutJob(w, job.z, mean, var, job.scenario))
        outs = self._pool.run(full_jobs)
        return [EpisodeOut(o.task, o.obs_count, o.obs_mean[self._cols],
                           o.obs_m2[self._cols]) for o in outs]


def mine_difficult(results: Sequence[TaskResult], threshold: float) -> set[str]:
    """Scenario ids whose total reward fell strictly below the threshold."""
    return {r.scenario_id for r in results if r.total_reward < threshold}


def _uniform_sampler(scenarios: Sequence[Scenario]) -> Callable:
    pool = list(scenarios)

    def sample(rng: np.random.Generator, n: int) -> list[Scenario]:
        idx = rng.choice(len(pool), size=min(n, len(pool)), replace=n > len(pool))
        return [pool[i] for i in np.sort(idx)]

    return sample


def _mixed_sampler(scenarios: Sequence[Scenario], difficult_ids: set[str],
                   n_difficult: int) -> Callable:
    """Minibatches carrying exactly ``n_difficult`` mined tasks when available."""
    pool = list(scenarios)
    hard = [s for s in pool if s.scenario_id in difficult_ids]

    def sample(rng: np.random.Generator, n: int) -> list[Scenario]:
        k = min(n_difficult, len(hard), n)
        picked = []
        if k:
            idx = rng.choice(len(hard), size=k, replace=False)
            picked = [hard[i] for i in np.sort(idx)]
        rest = n - len(picked)
        if rest:
            idx = rng.choice(len(pool), size=min(rest, len(pool)),
                             replace=rest > len(pool))
            picked += [pool[i] for i in np.sort(idx)]
        return picked

    return sample


def train_zone(task: ZoneTask, config: CurriculumConfig, pars_config: ParsConfig,
               pool: RolloutPool, full_spec: EnvSpec,
               rng: np.random.Generator | None = None,
               on_iteration: Callable[[str, IterationStats], None] | None = None,
               ) -> tuple[Policy, set[str]]:
    """Stages 1 and 2 for one zone; returns (policy, mined difficult ids).

    Stage 1 samples the zone dataset uniformly; a full-dataset evaluation then
    mines the tasks still scoring under the difficulty threshold, and stage 2
    pins that many of them into every minibatch.
    """
    if not task.scenarios:
        raise ValueError(f"zone {task.zone_id!r} has an empty dataset")
    rng = rng if rng is not None else np.random.default_rng(pars_config.seed)
    zpool = ZonePool(pool, task, full_spec)
    policy = Policy.zeros(task.spec.act_dim, len(task.obs_idx), z_dim=0)

    sampler = _uniform_sampler(task.scenarios)
    for _ in range(config.stage1_iters):
        policy, stats = pars_iteration(policy, pars_config, sampler, zpool, rng)
        if on_iteration:
            on_iteration(f"{task.zone_id}-stage1", stats)

    results = evaluate(policy, task.scenarios, zpool)
    mined = mine_difficult(results, config.difficulty_threshold)

    sampler2 = _mixed_sampler(task.scenarios, mined, config.n_difficult_per_batch)
    for _ in range(config.stage2_iters):
        policy, stats = pars_iteration(policy, pars_config, sampler2, zpool, rng)
        if on_iteration:
            on_iteration(f"{task.zone_id}-stage2", stats)
    return policy, mined


def assemble_policy(zone_policies: Sequence[Policy], zone_tasks: Sequence[ZoneTask],
                    full_spec: EnvSpec, z_dim: int = 0) -> Policy:
    """Block-assemble zone policies into one full-system policy.

    Zone weights land on their zone's action rows and observation columns;
    every cross-zone coupling and every latent-context column starts at zero,
    and z itself starts at zero — so the assembly reproduces each zone
    policy's actions exactly (the latent term contributes w_z · 0).
    Observation statistics transfer per feature with each zone's variance
    preserved under a shared merged count.
    """
    if len(zone_policies) != len(zone_tasks):
        raise ValueError("one policy per zone task required")
    rows_seen: set[int] = set()
    for t in zone_tasks:
        overlap = rows_seen & set(t.act_idx)
        if overlap:
            raise ValueError(f"zones overlap on action rows {sorted(overlap)}")
        rows_seen |= set(t.act_idx)
    if rows_seen != set(range(full_spec.act_dim)):
        raise ValueError("zones do not partition the controllable buses")

    obs_dim, act_dim = full_spec.obs_dim, full_spec.act_dim
    w = np.zeros((act_dim, obs_dim + z_dim))
    mean = np.zeros(obs_dim)
    var = np.ones(obs_dim)
    count = 0
    for pol, t in zip(zone_policies, zone_tasks):
        if pol.z_dim != 0:
            raise ValueError("zone policies must have z_dim 0")
        if pol.w.shape != (len(t.act_idx), len(t.obs_idx)):
            raise ValueError(
                f"zone {t.zone_id!r}: policy shape {pol.w.shape} does not match "
                f"({len(t.act_idx)}, {len(t.obs_idx)})")
        w[np.ix_(t.act_idx, t.obs_idx)] = pol.w
        mean[list(t.obs_idx)] = pol.stats.mean
        var[list(t.obs_idx)] = pol.stats.var
        count = max(count, pol.stats.count)
    stats = RunningStat(count, mean, var * count if count else var * 0.0)
    return Policy(w, stats, np.zeros(z_dim), version=0)


def coordinated_train(zone_policies: Sequence[Policy], zone_tasks: Sequence[ZoneTask],
                      full_spec: EnvSpec, full_dataset: Sequence[Scenario],
                      config: CurriculumConfig, pars_config: ParsConfig,
                      pool: RolloutPool, rng: np.random.Generator | None = None,
                      on_iteration: Callable[[str, IterationStats], None] | None = None,
                      ) -> Policy:
    """Stage 3: joint fine-tuning of the assembled policy over the full system.

    Checkpoints (including the iteration-0 assembly itself) are scored by
    mean reward on the boundary-fault scenarios — the cross-zone cases this
    stage exists to improve; the best scorer is returned, so coordination can
    only match or improve on the plain assembly there.  Falls back to the
    full dataset when no fault bus touches more than one zone.
    """
    rng = rng if rng is not None else np.random.default_rng(pars_config.seed)
    policy = assemble_policy(zone_policies, zone_tasks, full_spec, config.z_dim)
    if config.stage3_iters == 0:
        return policy

    bus_count: dict[int, int] = {}
    for t in zone_tasks:
        for b in {s.fault_bus for s in t.scenarios}:
            bus_count[b] = bus_count.get(b, 0) + 1
    boundary_buses = {b for b, n in bus_count.items() if n > 1}
    selection = [s for s in full_dataset if s.fault_bus in boundary_buses]
    if not selection:
        selection = list(full_dataset)

    def mean_reward(p: Policy) -> float:
        return float(np.mean([r.total_reward for r in evaluate(p, selection, pool)]))

    cfg3 = ParsConfig(pars_config.n_directions, pars_config.top_b,
                      pars_config.step_size, pars_config.perturb_std,
                      pars_config.rollouts_per_direction, pars_config.eval_every,
                      pars_config.seed, perturb_z=config.z_dim > 0)
    sampler = _uniform_sampler(full_dataset)
    best_policy, best_score = policy.copy(), mean_reward(policy)
    for it in range(1, config.stage3_iters + 1):
        policy, stats = pars_iteration(policy, cfg3, sampler, pool, rng)
        if on_iteration:
            on_iteration("stage3", stats)
        if it % cfg3.eval_every == 0 or it == config.stage3_iters:
            score = mean_reward(policy)
            if score > best_score:
                best_policy, best_score = policy.copy(), score
    return best_policy
