"""Ray sampling, the volumetric consistency energy and coarse-to-fine depth ascent.

The energy of a camera group is the sum, over samples placed along every
foreground ray of every camera in the group, of ``c_srdf * c_phi``. Sample
positions are frozen when a batch is built, so the energy of a batch is a
smooth function of the depth maps alone: a sample's own camera enters
through ``depth[pixel] - t`` and every other camera through a bilinear
depth lookup at the sample's projection.
"""

from __future__ import annotations

import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from ._kernels import fused_energy
from .consistency import (
    ConfigError,
    ConsistencyParams,
    NoVisibility,
    PerSampleEvaluation,
    c_phi_median_batch,
    c_srdf_batch,
    get_prior,
)
from .geometry import MultiViewRig, RaySample, bilinear_footprint, lookup_validity, sample_grid

logger = logging.getLogger(__name__)


class OptimizationError(RuntimeError):
    pass


@dataclass
class SamplingSchedule:
    offset_init: float
    offset_decay: float = 0.5
    stages: int = 4
    epochs_per_stage: int = 40
    samples_per_ray: int = 9
    sigma_d_rule: str | float = "offset/3"

    def __post_init__(self):
        if not self.offset_init > 0:
            raise ConfigError("offset_init must be > 0")
        if not 0 < self.offset_decay < 1:
            raise ConfigError("offset_decay must lie in (0, 1)")
        if self.samples_per_ray < 3 or self.samples_per_ray % 2 == 0:
            raise ConfigError("samples_per_ray must be odd and >= 3")
        if self.stages < 1 or self.epochs_per_stage < 0:
            raise ConfigError("need stages >= 1 and epochs_per_stage >= 0")
        self.sigma_d(0)  # validates the rule

    def offset(self, stage: int) -> float:
        return self.offset_init * self.offset_decay**stage

    def sigma_d(self, stage: int) -> float:
        """Squared SRDF kernel width; ``"offset/k"`` means ``(offset / k) ** 2``."""
        rule = self.sigma_d_rule
        if isinstance(rule, (int, float)):
            if rule <= 0:
                raise ConfigError("constant sigma_d must be > 0")
            return float(rule)
        if isinstance(rule, str) and rule.startswith("offset/"):
            try:
                k = float(rule.split("/", 1)[1])
            except ValueError:
                raise ConfigError(f"bad sigma_d_rule {rule!r}") from None
            if not k > 0:
                raise ConfigError("sigma_d_rule divisor must be > 0")
            return (self.offset(stage) / k) ** 2
        raise ConfigError(f"unknown sigma_d_rule {rule!r}")


@dataclass(frozen=True)
class CameraGroup:
    cameras: tuple
    gid: int = 0


@dataclass
class OptimizerConfig:
    step_size: float = 0.05
    relative_step: bool = True  # step = step_size * current offset
    beta1: float = 0.9
    beta2: float = 0.999
    # tiny on purpose: energies of large groups scale like gamma**n
    eps: float = 1e-30
    prior: str = "median-baseline"
    compiled: bool = True  # use the fused kernel when the prior allows
    threads: int = 1
    seed: int = 0

    def __post_init__(self):
        if not self.step_size > 0:
            raise ConfigError("step_size must be > 0")
        get_prior(self.prior)


@dataclass
class OptimizerState:
    """Adaptive-moment accumulators, one entry per foreground pixel of each camera."""

    first: dict
    second: dict
    step_size: float
    epoch: int = 0
    stage: int = 0
    seed: int = 0
    t: int = 0

    @classmethod
    def zeros(cls, rig: MultiViewRig, cameras, step_size: float, seed: int = 0) -> OptimizerState:
        first = {j: np.zeros(int(rig.cameras[j].mask.sum())) for j in cameras}
        second = {j: np.zeros_like(v) for j, v in first.items()}
        return cls(first, second, step_size, seed=seed)


def make_groups(rig: MultiViewRig, group_size: int) -> list[CameraGroup]:
    """Greedy partition of the cameras into groups of nearby viewpoints.

    Each group is seeded with the unassigned camera farthest from every
    already-assigned camera (camera 0 first) and filled with its nearest
    unassigned neighbours. The last group may be smaller.
    """
    n = len(rig)
    if group_size < 2:
        raise ConfigError("group_size must be >= 2 for cross-view consistency")
    if group_size > n:
        raise ConfigError(f"group_size {group_size} exceeds camera count {n}")
    centers = np.array([c.center for c in rig.cameras])
    dist = np.linalg.norm(centers[:, None] - centers[None], axis=-1)
    unassigned = list(range(n))
    assigned: list[int] = []
    groups = []
    while unassigned:
        if assigned:
            score = dist[np.ix_(unassigned, assigned)].min(axis=1)
            seed = unassigned[int(np.argmax(score))]
        else:
            seed = unassigned[0]
        rest = [j for j in unassigned if j != seed]
        rest.sort(key=lambda j: (dist[seed, j], j))
        members = [seed] + rest[: group_size - 1]
        groups.append(CameraGroup(tuple(sorted(members)), len(groups)))
        assigned += members
        unassigned = [j for j in unassigned if j not in members]
    if len(groups[-1].cameras) < group_size:
        logger.info("last camera group has %d cameras", len(groups[-1].cameras))
    return groups


@dataclass
class SampleBatch:
    """Samples of one group with their frozen per-camera lookups.

    ``owner`` is the slot (position in ``group.cameras``) of the camera whose
    ray produced the sample. Lookup arrays are ``(N, n)`` / ``(N, n, 4)``.
    """

    group: CameraGroup
    owner: np.ndarray
    pixel: np.ndarray
    t: np.ndarray
    offset: np.ndarray
    points: np.ndarray
    Z: np.ndarray
    valid: np.ndarray
    idx: np.ndarray
    w: np.ndarray
    colors: np.ndarray
    clamped: int = 0
    _photo: dict = field(default_factory=dict, repr=False)

    def __len__(self):
        return len(self.t)

    def subset(self, keep) -> SampleBatch:
        keep = np.asarray(keep)
        return SampleBatch(
            self.group, self.owner[keep], self.pixel[keep], self.t[keep], self.offset[keep], self.points[keep],
            self.Z[keep], self.valid[keep], self.idx[keep], self.w[keep], self.colors[keep],
        )

    def photo_scores(self, params: ConsistencyParams, prior: str = "median-baseline") -> np.ndarray:
        key = (prior, params.sigma_c, params.gamma_phi, params.even_median)
        if key not in self._photo:
            self._photo[key] = get_prior(prior)(self.colors, self.valid, params)
        return self._photo[key]


def _lookups(rig: MultiViewRig, group: CameraGroup, points, owner, pixel, t):
    """Project samples into every camera of the group and freeze the lookups."""
    n = len(group.cameras)
    N = len(points)
    Z = np.empty((N, n))
    valid = np.empty((N, n), dtype=bool)
    idx = np.empty((N, n, 4), dtype=np.int64)
    w = np.empty((N, n, 4))
    colors = np.empty((N, n, 3))
    for k, j in enumerate(group.cameras):
        cam = rig.cameras[j]
        uv, z, in_front = cam.project_points(points)
        ik, wk = bilinear_footprint(uv, cam.width, cam.height)
        vk = in_front & lookup_validity(cam, uv, ik, wk)
        ck = sample_grid(cam.image, ik, wk)
        own = owner == k
        # own camera: the sample lies exactly on the pixel ray, so the lookup is the pixel itself
        ik[own] = pixel[own, None]
        wk[own] = (1.0, 0.0, 0.0, 0.0)
        vk[own] = True
        z[own] = t[own]
        ck[own] = cam.image.reshape(-1, 3)[pixel[own]]
        Z[:, k], valid[:, k], idx[:, k], w[:, k], colors[:, k] = z, vk, ik, wk, ck
    return Z, valid, idx, w, colors


def sample_rays(group: CameraGroup, rig: MultiViewRig, schedule: SamplingSchedule, stage: int) -> SampleBatch:
    """``S`` uniformly spaced samples on ``[d - o, d + o]`` for every foreground ray of the group."""
    o = schedule.offset(stage)
    S = schedule.samples_per_ray
    eps = 1e-4 * rig.diameter
    owners, pixels, ts, offs, pts = [], [], [], [], []
    clamped = 0
    unit = np.linspace(-1.0, 1.0, S)
    for k, j in enumerate(group.cameras):
        cam = rig.cameras[j]
        if cam.depth is None:
            raise ValueError(f"camera {j} has no depth map")
        fg = np.flatnonzero(cam.mask)
        d = cam.depth.reshape(-1)[fg]
        lo = d - o
        hi = d + o
        low = lo <= 0
        clamped += int(low.sum())
        lo = np.where(low, eps, lo)
        t = lo[:, None] + (hi - lo)[:, None] * (unit[None] + 1.0) / 2.0
        rows, cols = np.divmod(fg, cam.width)
        dirs = cam.ray_directions(rows, cols)
        owners.append(np.full(t.size, k))
        pixels.append(np.repeat(fg, S))
        ts.append(t.reshape(-1))
        offs.append((t - d[:, None]).reshape(-1))
        pts.append((cam.center + t[..., None] * dirs[:, None, :]).reshape(-1, 3))
    if clamped:
        logger.debug("group %d: %d rays clamped near the camera", group.gid, clamped)
    owner = np.concatenate(owners)
    pixel = np.concatenate(pixels)
    t = np.concatenate(ts)
    points = np.concatenate(pts)
    Z, valid, idx, w, colors = _lookups(rig, group, points, owner, pixel, t)
    return SampleBatch(group, owner, pixel, t, np.concatenate(offs), points, Z, valid, idx, w, colors, clamped)


def _lookup_depths(batch: SampleBatch, cams) -> np.ndarray:
    """Interpolated depth ``D`` of every sample in each camera of the group."""
    D = np.empty(batch.Z.shape)
    for k, cam in enumerate(cams):
        depth = np.nan_to_num(cam.depth.reshape(-1), nan=0.0)
        D[:, k] = np.einsum("nk,nk->n", batch.w[:, k], depth[batch.idx[:, k]])
    return D


def energy(batch: SampleBatch, rig: MultiViewRig, params: ConsistencyParams, prior: str = "median-baseline"):
    """Energy of a batch and its gradient w.r.t. every depth pixel of the group.

    Returns ``(E, grads)`` where ``grads[k]`` is an ``(H, W)`` array for the
    k-th camera of the group (zero on background).
    """
    cams = [rig.cameras[j] for j in batch.group.cameras]
    grads = [np.zeros(c.shape) for c in cams]
    if len(batch) == 0:
        return 0.0, grads
    s = _lookup_depths(batch, cams) - batch.Z
    value, partials = c_srdf_batch(s, batch.valid, params.sigma_d, params.gamma_srdf)
    photo = batch.photo_scores(params, prior)
    E = float(np.sum(value * photo))
    g_s = partials * photo[:, None]
    for k, cam in enumerate(cams):
        contrib = batch.w[:, k] * g_s[:, k, None]
        flat = np.bincount(batch.idx[:, k].reshape(-1), weights=contrib.reshape(-1), minlength=cam.width * cam.height)
        grads[k] = np.where(cam.mask, flat.reshape(cam.shape), 0.0)
    return E, grads


def evaluate_sample(
    sample: RaySample, rig: MultiViewRig, group: CameraGroup, params: ConsistencyParams, prior: str = "median-baseline"
) -> PerSampleEvaluation:
    """Both consistency signals for a single sample, with per-camera detail."""
    prior_fn = get_prior(prior)
    cams = list(group.cameras)
    owner = np.array([cams.index(sample.camera) if sample.camera in cams else -1])
    point = np.asarray(sample.point, dtype=np.float64)[None]
    t = np.array([np.linalg.norm(point[0] - rig.cameras[sample.camera].center)])
    Z, valid, idx, w, colors = _lookups(rig, group, point, owner, np.array([sample.pixel]), t)
    if not valid.any():
        raise NoVisibility("no camera of the group observes the sample")
    D = np.array([[np.dot(w[0, k], np.nan_to_num(rig.cameras[j].depth.reshape(-1))[idx[0, k]]) for k, j in enumerate(cams)]])
    s = D - Z
    value, partials = c_srdf_batch(s, valid, params.sigma_d, params.gamma_srdf)
    photo = prior_fn(colors, valid, params)
    return PerSampleEvaluation(float(value[0]), float(photo[0]), np.where(valid, s, np.nan)[0], valid[0], partials[0])


def photo_prior_interface(
    sample: RaySample, rig: MultiViewRig, group: CameraGroup, params: ConsistencyParams, prior: str = "median-baseline"
):
    """Photo-consistency score of a sample under the named prior, with per-camera validity."""
    ev = evaluate_sample(sample, rig, group, params, prior)
    return ev.c_phi, ev.valid


def ascent_step(rig: MultiViewRig, group: CameraGroup, state: OptimizerState, grads, lr: float, config: OptimizerConfig):
    """One adaptive-moment ascent update of the group's foreground depths (in place)."""
    state.t += 1
    b1, b2 = config.beta1, config.beta2
    c1 = 1 - b1**state.t
    c2 = 1 - b2**state.t
    floor = 1e-4 * rig.diameter
    eps = config.eps
    for k, j in enumerate(group.cameras):
        cam = rig.cameras[j]
        g = grads[k][cam.mask]
        m = state.first[j]
        v = state.second[j]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        step = lr * (m / c1) / (np.sqrt(v / c2) + eps)
        d = cam.depth[cam.mask] + step
        cam.depth[cam.mask] = np.maximum(d, floor)


def _check_finite(E, grads, group, rig, stage, epoch):
    if not np.isfinite(E):
        raise OptimizationError(f"non-finite energy at stage {stage} epoch {epoch} group {group.gid}")
    for k, j in enumerate(group.cameras):
        bad = ~np.isfinite(grads[k])
        if bad.any():
            r, c = np.argwhere(bad)[0]
            raise OptimizationError(
                f"non-finite gradient at stage {stage} epoch {epoch} group {group.gid} camera {j} pixel ({r}, {c})"
            )


def _run_group(rig, group, schedule, params, config, stage, state, lr, log, epochs):
    sp = params.with_sigma_d(schedule.sigma_d(stage))
    shapes = {rig.cameras[j].shape for j in group.cameras}
    fast = config.compiled and get_prior(config.prior) is c_phi_median_batch and len(shapes) == 1
    for epoch in range(epochs):
        t0 = time.perf_counter()
        if fast:
            E, grads, _ = fused_energy(rig, group, schedule.offset(stage), schedule.samples_per_ray, sp)
        else:
            batch = sample_rays(group, rig, schedule, stage)
            E, grads = energy(batch, rig, sp, config.prior)
        _check_finite(E, grads, group, rig, stage, epoch)
        ascent_step(rig, group, state, grads, lr, config)
        state.epoch = epoch
        gnorm = float(np.sqrt(sum(float(np.sum(g * g)) for g in grads)))
        log.append(
            dict(stage=stage, epoch=epoch, group=group.gid, E=E, grad_norm=gnorm, wall_ms=(time.perf_counter() - t0) * 1e3)
        )


def optimize(
    rig: MultiViewRig,
    groups: list[CameraGroup],
    schedule: SamplingSchedule,
    params: ConsistencyParams,
    config: OptimizerConfig | None = None,
    progress=None,
):
    """Coarse-to-fine ascent of the consistency energy over all groups.

    Returns a new rig with optimized depths and the energy log (one dict per
    stage, epoch and group). Groups only read and write their own cameras,
    so running them on several threads gives bitwise-identical results.
    """
    config = config or OptimizerConfig()
    seen = sorted(j for g in groups for j in g.cameras)
    if seen != list(range(len(rig))):
        raise ConfigError("camera groups must partition the rig")
    out = rig.copy()
    for cam in out.cameras:
        cam.check_depth()
    log: list[dict] = []
    for stage in range(schedule.stages):
        lr = config.step_size * (schedule.offset(stage) if config.relative_step else 1.0)
        states = [OptimizerState.zeros(out, g.cameras, lr, config.seed) for g in groups]
        for s in states:
            s.stage = stage
        logs = [[] for _ in groups]
        args = [
            (out, g, schedule, params, config, stage, st, lr, lg, schedule.epochs_per_stage)
            for g, st, lg in zip(groups, states, logs)
        ]
        if config.threads > 1 and len(groups) > 1:
            with ThreadPoolExecutor(max_workers=config.threads) as pool:
                list(pool.map(lambda a: _run_group(*a), args))
        else:
            for a in args:
                _run_group(*a)
        for epoch in range(schedule.epochs_per_stage):
            log += [lg[epoch] for lg in logs]
        if progress is not None:
            progress(stage, log)
    return out, log


def depth_sweep(
    rig: MultiViewRig,
    group: CameraGroup,
    camera: int,
    pixel: int,
    candidates,
    offset: float,
    samples_per_ray: int,
    params: ConsistencyParams,
    prior: str = "median-baseline",
    batch: SampleBatch | None = None,
) -> np.ndarray:
    """Energy of the group (up to a constant) as one pixel's depth takes each candidate value.

    All other depths stay fixed. Only the terms that depend on the swept
    pixel are evaluated: its own ray samples, which move with its depth, and
    other rays' samples whose lookup in this camera touches the pixel.
    ``batch`` may carry the group's samples at the current depths, so that
    sweeping many pixels does not resample the group each time.
    """
    slot = list(group.cameras).index(camera)
    full = batch if batch is not None else sample_rays(group, rig, SamplingSchedule(offset, 0.5, 1, 1, samples_per_ray), 0)
    cands = np.asarray(candidates, dtype=np.float64).reshape(-1)
    cams = [rig.cameras[j] for j in group.cameras]
    cam = cams[slot]
    d0 = float(cam.depth.reshape(-1)[pixel])

    # samples of other rays that read this pixel: only their lookup in this camera moves, linearly in d
    hit = (full.idx[:, slot] == pixel) & (full.w[:, slot] > 0)
    keep = (full.owner != slot) & full.valid[:, slot] & hit.any(axis=1)
    others = full.subset(keep)
    w_p = np.where(hit, full.w[:, slot], 0.0).sum(axis=1)[keep]
    D = _lookup_depths(others, cams)
    base = D[:, slot].copy()
    photo = others.photo_scores(params, prior)
    E_oth = np.empty(len(cands))
    for i, d in enumerate(cands):
        D[:, slot] = base + w_p * (d - d0)
        value, _ = c_srdf_batch(D - others.Z, others.valid, params.sigma_d, params.gamma_srdf)
        E_oth[i] = np.sum(value * photo)

    # the swept ray's own samples, for every candidate at once
    r, c = divmod(pixel, cam.width)
    direction = cam.ray_directions(np.array([r]), np.array([c]))[0]
    unit = np.linspace(-1.0, 1.0, samples_per_ray)
    t = np.maximum(cands[:, None] + offset * unit[None], 1e-4 * rig.diameter).reshape(-1)
    pts = cam.center + t[:, None] * direction
    owner = np.full(len(t), slot)
    pix = np.full(len(t), pixel)
    Z, valid, idx, w, colors = _lookups(rig, group, pts, owner, pix, t)
    own = SampleBatch(group, owner, pix, t, t - np.repeat(cands, samples_per_ray), pts, Z, valid, idx, w, colors)
    D = _lookup_depths(own, cams)
    D[:, slot] = np.repeat(cands, samples_per_ray)
    value, _ = c_srdf_batch(D - Z, valid, params.sigma_d, params.gamma_srdf)
    E_own = (value * own.photo_scores(params, prior)).reshape(len(cands), samples_per_ray).sum(axis=1)
    return E_own + E_oth
