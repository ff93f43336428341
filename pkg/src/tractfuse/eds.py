"""Episodic data selection: harvest trajectories from the trained policies,
apply length / within-policy (MDF) / across-policy (normalized-Q) selection,
and assemble pretraining and finetuning datasets.

Selection follows a two-path scheme: the pretraining path ranks policies on
unfiltered (length-screened only) trajectories; the finetuning path ranks on
MDF-filtered, tract-specific trajectories.
"""

from __future__ import annotations

import struct
import warnings
from dataclasses import dataclass, field

import numpy as np

from .env import BatchTracker, STATE_DIM
from .geometry import MDF_POINTS, build_reference_set, min_mdf_to_refs
from .phantom import sample_field

EDS_MAGIC = b"EDS1"
MIN_TRANSITIONS = 47
MDF_THRESHOLD_MM = 5.0
POLICY_ORDER = ("td3", "sac", "ddpg")  # fixed tie-break order
POLICY_IDS = {name: i for i, name in enumerate(POLICY_ORDER)}


class EdsError(RuntimeError):
    pass


@dataclass
class TrajectoryRecord:
    states: np.ndarray      # (T, 334) float32
    actions: np.ndarray     # (T, 3) float32, unit vectors
    rewards: np.ndarray     # (T,) float32
    rtg: np.ndarray         # (T,) float32
    policy_id: str
    streamline: np.ndarray  # (T+1, 3) float32
    bundle_name: str

    def __post_init__(self):
        t = len(self.rewards)
        if t < 1 or len(self.states) != t or len(self.actions) != t or len(self.rtg) != t:
            raise EdsError("trajectory sequences must share length T >= 1")
        if len(self.streamline) != t + 1:
            raise EdsError("streamline must have T+1 points")

    @property
    def length(self):
        return len(self.rewards)


@dataclass
class EdsDatasets:
    pretrain: list = field(default_factory=list)
    finetune: dict = field(default_factory=dict)  # bundle_name -> records


@dataclass(frozen=True)
class HarvestSpec:
    window: int = 4          # cubic sub-window edge, in voxels
    seeds_per_voxel: int = 4
    min_transitions: int = MIN_TRANSITIONS
    mdf_threshold_mm: float = MDF_THRESHOLD_MM
    reference_count: int = 15


def compute_rtg(rewards):
    """Undiscounted return-to-go: suffix sums of the reward sequence."""
    r = np.asarray(rewards, dtype=np.float64)
    return np.cumsum(r[::-1])[::-1].astype(np.float32)


def _window_seeds(mask, origin, window, seeds_per_voxel, rng):
    """Seeds from in-mask voxels inside one contiguous sub-window."""
    o = np.asarray(origin)
    sub = mask[o[0]:o[0] + window, o[1]:o[1] + window, o[2]:o[2] + window]
    voxels = np.argwhere(sub > 0) + o
    if len(voxels) == 0:
        raise EdsError(f"mask window at {tuple(origin)} contains no voxels")
    seeds = []
    for v in voxels:
        for _ in range(seeds_per_voxel):
            cand = v + rng.uniform(-0.5, 0.5, size=3)
            if sample_field(mask, cand) >= 0.5:
                seeds.append(cand)
    if not seeds:
        raise EdsError(f"no valid seeds in window at {tuple(origin)}")
    return np.asarray(seeds)


def _track_records(policy, policy_name, phantom, bundle_name, env_cfg, seeds, hints):
    """Deterministic rollout of one policy from a seed batch, fully recorded."""
    tracker = BatchTracker(phantom, bundle_name, env_cfg)
    states = tracker.reset(seeds, hints)
    n = tracker.n
    max_t = env_cfg.max_steps
    s_buf = np.zeros((n, max_t, STATE_DIM), dtype=np.float32)
    a_buf = np.zeros((n, max_t, 3), dtype=np.float32)
    r_buf = np.zeros((n, max_t), dtype=np.float32)
    while tracker.active.any():
        act_mask = tracker.active.copy()
        t_now = tracker.steps.copy()
        actions = policy.act(states, mode="deterministic")
        rewards, _, _ = tracker.step(actions)
        norm = np.linalg.norm(actions, axis=1, keepdims=True)
        unit = np.divide(actions, norm, out=np.zeros_like(actions), where=norm > 0)
        idx = np.nonzero(act_mask)[0]
        s_buf[idx, t_now[idx]] = states[idx]
        a_buf[idx, t_now[idx]] = unit[idx]
        r_buf[idx, t_now[idx]] = rewards[idx]
        states = tracker.states()
    streamlines = tracker.streamlines()
    records = []
    for i in range(n):
        t = int(tracker.steps[i])
        if t < 1:
            continue
        rew = r_buf[i, :t].copy()
        records.append(TrajectoryRecord(
            states=s_buf[i, :t].copy(), actions=a_buf[i, :t].copy(), rewards=rew,
            rtg=compute_rtg(rew), policy_id=policy_name,
            streamline=streamlines[i], bundle_name=bundle_name))
    return records


def harvest(policies, phantom, bundle_name, origin, spec, env_cfg, rng):
    """Track every policy deterministically from one shared seed batch.

    policies: mapping name -> PolicyBundle. Returns records grouped by policy.
    """
    mask = phantom.mask_for(bundle_name).values
    seeds = _window_seeds(mask, origin, spec.window, spec.seeds_per_voxel, rng)
    hints = np.zeros_like(seeds)
    signs = np.where(rng.random(len(seeds)) < 0.5, 1.0, -1.0)
    for i, s in enumerate(seeds):
        pk = phantom.peaks_at(s)
        if len(pk):
            hints[i] = pk[0] * signs[i]
    return {name: _track_records(p, name, phantom, bundle_name, env_cfg, seeds, hints)
            for name, p in policies.items()}


def length_filter(records, min_transitions=MIN_TRANSITIONS):
    """Drop trajectories with fewer transitions than the floor."""
    return [r for r in records if r.length >= min_transitions]


def within_policy_filter(records, refs, threshold_mm=MDF_THRESHOLD_MM, voxel_size=1.0):
    """Keep records whose streamline is within threshold MDF of any reference."""
    if not refs:
        raise EdsError("within-policy filter needs a nonempty reference set")
    return [r for r in records
            if min_mdf_to_refs(r.streamline, refs, voxel_size) <= threshold_mm]


def trajectory_q_score(policy, record):
    """Mean critic value over a trajectory's (state, action) pairs."""
    return float(policy.q_value(record.states, record.actions).mean())


def across_policy_select(records_by_policy, policies):
    """Pick one policy per harvest batch by max mean min-max-normalized Q.

    Returns (selected records, winning policy name or None). Policies with no
    surviving records are excluded; all-excluded yields an empty selection.
    """
    mean_scores = {}
    for name in POLICY_ORDER:
        recs = records_by_policy.get(name, [])
        if not recs:
            continue
        raw = np.array([trajectory_q_score(policies[name], r) for r in recs])
        lo, hi = raw.min(), raw.max()
        if hi - lo < 1e-12:
            normed = np.full_like(raw, 0.5)  # degenerate constant-Q batch
        else:
            normed = (raw - lo) / (hi - lo)
        mean_scores[name] = normed.mean()
    if not mean_scores:
        warnings.warn("across-policy selection: no policy has surviving records")
        return [], None
    winner = max(POLICY_ORDER, key=lambda n: (mean_scores.get(n, -np.inf), -POLICY_IDS[n]))
    return list(records_by_policy[winner]), winner


def _sweep_origins(mask, window):
    dims = mask.shape
    origins = []
    for ox in range(0, dims[0], window):
        for oy in range(0, dims[1], window):
            for oz in range(0, dims[2], window):
                if mask[ox:ox + window, oy:oy + window, oz:oz + window].any():
                    origins.append((ox, oy, oz))
    return origins


def build_datasets(phantom, policies, env_cfg, spec=None, pretrain_target=1500,
                   finetune_target=500, seed=0):
    """Sweep harvest windows over every bundle and assemble both datasets."""
    spec = spec or HarvestSpec()
    rng = np.random.default_rng(seed)
    voxel_size = phantom.grid.voxel_size
    datasets = EdsDatasets()
    refs_cache = {}

    for mask_obj in phantom.masks:
        bundle = mask_obj.bundle_name
        gt = phantom.bundles.get(bundle)
        if not gt:
            raise EdsError(f"phantom has no ground-truth streamlines for '{bundle}'")
        refs = build_reference_set(gt, count=min(spec.reference_count, len(gt)),
                                   voxel_size=voxel_size, k=MDF_POINTS)
        refs_cache[bundle] = refs
        datasets.finetune.setdefault(bundle, [])
        for origin in _sweep_origins(mask_obj.values, spec.window):
            grouped = harvest(policies, phantom, bundle, origin, spec, env_cfg, rng)
            long_enough = {n: length_filter(rs, spec.min_transitions)
                           for n, rs in grouped.items()}
            if any(long_enough.values()):
                pre_sel, _ = across_policy_select(long_enough, policies)
                datasets.pretrain.extend(pre_sel)
            mdf_ok = {n: within_policy_filter(rs, refs, spec.mdf_threshold_mm, voxel_size)
                      for n, rs in long_enough.items() if rs}
            if any(mdf_ok.values()):
                fin_sel, _ = across_policy_select(mdf_ok, policies)
                datasets.finetune[bundle].extend(fin_sel)

    datasets.pretrain = _downsample(datasets.pretrain, pretrain_target, rng, "pretrain")
    for bundle in datasets.finetune:
        datasets.finetune[bundle] = _downsample(
            datasets.finetune[bundle], finetune_target, rng, f"finetune[{bundle}]")
    return datasets


def _downsample(records, target, rng, label):
    if len(records) <= target:
        if len(records) < target:
            warnings.warn(f"{label}: only {len(records)} records for target {target}")
        return records
    pick = rng.choice(len(records), size=target, replace=False)
    return [records[i] for i in sorted(pick)]


# -- EDS1 serialization -------------------------------------------------------

def save_records(records, path):
    with open(path, "wb") as f:
        f.write(EDS_MAGIC)
        f.write(struct.pack("<I", len(records)))
        for r in records:
            t = r.length
            nb = r.bundle_name.encode("utf-8")
            f.write(struct.pack("<B", POLICY_IDS[r.policy_id]))
            f.write(struct.pack("<H", len(nb)))
            f.write(nb)
            f.write(struct.pack("<I", t))
            f.write(r.states.astype("<f4").tobytes())
            f.write(r.actions.astype("<f4").tobytes())
            f.write(r.rewards.astype("<f4").tobytes())
            f.write(r.rtg.astype("<f4").tobytes())
            f.write(r.streamline.astype("<f4").tobytes())


def load_records(path):
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:4] != EDS_MAGIC:
        raise EdsError(f"bad dataset magic in {path}: {raw[:4]!r}")
    (count,) = struct.unpack_from("<I", raw, 4)
    off = 8
    out = []

    def take(dtype, n, shape):
        nonlocal off
        arr = np.frombuffer(raw, dtype=dtype, count=n, offset=off).reshape(shape).copy()
        off += arr.nbytes
        return arr

    for _ in range(count):
        (pid,) = struct.unpack_from("<B", raw, off)
        off += 1
        (nlen,) = struct.unpack_from("<H", raw, off)
        off += 2
        bundle = raw[off:off + nlen].decode("utf-8")
        off += nlen
        (t,) = struct.unpack_from("<I", raw, off)
        off += 4
        states = take("<f4", t * STATE_DIM, (t, STATE_DIM))
        actions = take("<f4", t * 3, (t, 3))
        rewards = take("<f4", t, (t,))
        rtg = take("<f4", t, (t,))
        streamline = take("<f4", (t + 1) * 3, (t + 1, 3))
        out.append(TrajectoryRecord(states=states, actions=actions, rewards=rewards,
                                    rtg=rtg, policy_id=POLICY_ORDER[pid],
                                    streamline=streamline, bundle_name=bundle))
    if off != len(raw):
        raise EdsError(f"trailing bytes in dataset file at offset {off}")
    return out
