"""Embedding-space retrieval: rank prior windows by closeness to target windows.

Each sampled prior window gets the minimum distance to any target window; the
ranking is a stable ascending argsort (ties broken by prior index) and the top
floor(r*N) entries are retrieved. Distances are computed in the difference
form, row-chunked, so partitioned and full-matrix computation are bit-identical.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .data import (SubTrajectoryStream, TrajectoryDataset, extract_frame_stack,
                   extract_window)
from .errors import IntegrityError, UsageError
from .gaussian import kl_numpy

CHUNK_ROWS = 256


@dataclass
class EmbeddingSet:
    means: np.ndarray                  # (N, d)
    log_stds: np.ndarray               # (N, d)
    sources: list[tuple[int, int]]     # (trajectory id, start)
    origin: str                        # "prior" | "target"

    def __post_init__(self):
        if self.means.shape != self.log_stds.shape:
            raise UsageError("means and log_stds must have matching shapes")
        if len(self.sources) != self.means.shape[0]:
            raise UsageError("one source per embedding required")

    def __len__(self) -> int:
        return self.means.shape[0]


@dataclass
class RetrievalEntry:
    prior_index: int
    distance: float
    source: tuple[int, int] | None = None
    mean: np.ndarray | None = None


@dataclass
class RetrievalSet:
    entries: list[RetrievalEntry]
    mode: str
    fraction: float

    def __len__(self) -> int:
        return len(self.entries)

    def sources(self) -> list[tuple[int, int]]:
        return [e.source for e in self.entries]


def embed_samples(model, dataset: TrajectoryDataset, count: int,
                  rng: np.random.Generator, enumerate_all: bool = False,
                  batch: int = 512) -> EmbeddingSet:
    """Sample `count` windows (with replacement), dedupe sources, encode them.

    `count` is capped at the number of available window starts; with
    `enumerate_all` every start in the stream is used instead of sampling.
    """
    if count < 1:
        raise UsageError("count must be >= 1")
    stream_ = SubTrajectoryStream(dataset, model.H, 0)
    if enumerate_all or count >= stream_.total:
        sources = [(traj.id, s) for traj in stream_.eligible
                   for s in range(traj.length)]
    else:
        seen = set()
        sources = []
        for _ in range(count):
            sample = stream_.sample(rng)
            if sample.source not in seen:
                seen.add(sample.source)
                sources.append(sample.source)
    by_id = {t.id: t for t in stream_.eligible}
    means, log_stds = [], []
    for lo in range(0, len(sources), batch):
        part = sources[lo:lo + batch]
        obs = np.stack([extract_window(by_id[tid], s, model.H, 0).window_obs
                        for tid, s in part])
        act = np.stack([extract_window(by_id[tid], s, model.H, 0).window_actions
                        for tid, s in part])
        m, ls = model.encode_numpy(obs, act)
        means.append(m)
        log_stds.append(ls)
    return EmbeddingSet(np.concatenate(means), np.concatenate(log_stds),
                        sources, dataset.role)


# -- distances -------------------------------------------------------------------


def pairwise_l2(prior_means: np.ndarray, target_means: np.ndarray,
                chunk: int = CHUNK_ROWS) -> np.ndarray:
    """D[i][j] = ||prior_i - target_j||_2, computed in row chunks."""
    A = np.asarray(prior_means, dtype=np.float64)
    B = np.asarray(target_means, dtype=np.float64)
    if A.ndim != 2 or B.ndim != 2 or A.shape[1] != B.shape[1]:
        raise UsageError(f"bad embedding shapes {A.shape} vs {B.shape}")
    D = np.empty((A.shape[0], B.shape[0]))
    for lo in range(0, A.shape[0], chunk):
        diff = A[lo:lo + chunk, None, :] - B[None, :, :]
        D[lo:lo + chunk] = np.sqrt(np.sum(diff * diff, axis=-1))
    return D


def symmetric_kl_distance(q1: tuple, q2: tuple) -> float:
    """0.5 * (KL(q1||q2) + KL(q2||q1)) for (mean, log_std) pairs."""
    m1, s1 = q1
    m2, s2 = q2
    forward = kl_numpy(m1, s1, m2, s2)
    reverse = kl_numpy(m2, s2, m1, s1)
    return float(0.5 * (forward + reverse))


def pairwise_symmetric_kl(prior_set: EmbeddingSet, target_set: EmbeddingSet,
                          chunk: int = CHUNK_ROWS) -> np.ndarray:
    Am, As = prior_set.means, prior_set.log_stds
    Bm, Bs = target_set.means, target_set.log_stds
    if Am.shape[1] != Bm.shape[1]:
        raise UsageError("latent dimensions differ between embedding sets")
    D = np.empty((len(prior_set), len(target_set)))
    for lo in range(0, Am.shape[0], chunk):
        am, asd = Am[lo:lo + chunk, None, :], As[lo:lo + chunk, None, :]
        bm, bsd = Bm[None, :, :], Bs[None, :, :]
        forward = kl_numpy(am, asd, bm, bsd)
        reverse = kl_numpy(bm, bsd, am, asd)
        D[lo:lo + chunk] = 0.5 * (forward + reverse)
    return D


def min_target_distances(prior_set: EmbeddingSet, target_set: EmbeddingSet,
                         metric: str, chunk: int = CHUNK_ROWS) -> np.ndarray:
    """Per-prior minimum distance to any target, without storing the matrix."""
    out = np.empty(len(prior_set))
    for lo in range(0, len(prior_set), chunk):
        sub = EmbeddingSet(prior_set.means[lo:lo + chunk],
                           prior_set.log_stds[lo:lo + chunk],
                           prior_set.sources[lo:lo + chunk], prior_set.origin)
        if metric == "l2":
            block = pairwise_l2(sub.means, target_set.means, chunk=chunk)
        elif metric == "kl":
            block = pairwise_symmetric_kl(sub, target_set, chunk=chunk)
        else:
            raise UsageError(f"unknown retrieval metric {metric!r}")
        out[lo:lo + chunk] = block.min(axis=1)
    return out


# -- ranking ----------------------------------------------------------------------


def _count(fraction: float, n: int) -> int:
    # epsilon guards floor(0.3 * 10) == 2 style float artifacts
    return int(math.floor(fraction * n + 1e-9))


def retrieve_top_from_min(d_min: np.ndarray | None, fraction: float, mode: str,
                          total: int | None = None,
                          rng: np.random.Generator | None = None) -> list[tuple[int, float]]:
    """Ranked (prior index, distance) pairs for every retrieval mode.

    Random mode takes a prefix of one seeded permutation, so smaller fractions
    are prefixes of larger ones there too.
    """
    if not 0.0 <= fraction <= 1.0:
        raise UsageError(f"fraction {fraction} outside [0, 1]")
    N = total if d_min is None else len(d_min)
    if N is None:
        raise UsageError("need d_min or an explicit total")
    if mode == "none":
        return []
    if mode == "all":
        return [(i, float(d_min[i]) if d_min is not None else float("nan"))
                for i in range(N)]
    n = _count(fraction, N)
    if mode == "random":
        if rng is None:
            raise UsageError("random mode requires an rng")
        picks = rng.permutation(N)[:n]
        return [(int(i), float(d_min[i]) if d_min is not None else float("nan"))
                for i in picks]
    if mode in ("l2", "kl"):
        if d_min is None:
            raise UsageError(f"mode {mode!r} requires distances")
        order = np.argsort(d_min, kind="stable")[:n]
        return [(int(i), float(d_min[i])) for i in order]
    raise UsageError(f"unknown retrieval mode {mode!r}")


def retrieve_top(D: np.ndarray, fraction: float, mode: str,
                 rng: np.random.Generator | None = None,
                 prior_set: EmbeddingSet | None = None) -> RetrievalSet:
    """Rank from a full distance matrix (per-prior min over targets)."""
    D = np.asarray(D, dtype=np.float64)
    d_min = D.min(axis=1) if D.size else np.zeros(D.shape[0])
    pairs = retrieve_top_from_min(d_min, fraction, mode, rng=rng)
    return _to_set(pairs, mode, fraction, prior_set)


def _to_set(pairs, mode, fraction, prior_set) -> RetrievalSet:
    entries = []
    for i, dist in pairs:
        source = prior_set.sources[i] if prior_set is not None else None
        mean = prior_set.means[i].copy() if prior_set is not None else None
        entries.append(RetrievalEntry(prior_index=i, distance=dist,
                                      source=source, mean=mean))
    return RetrievalSet(entries, mode, fraction)


def build_retrieval_set(prior_set: EmbeddingSet, target_set: EmbeddingSet,
                        mode: str, fraction: float,
                        rng: np.random.Generator | None = None) -> RetrievalSet:
    """Pipeline entry point: streams distances, never materializing the matrix."""
    if mode in ("l2", "kl"):
        d_min = min_target_distances(prior_set, target_set, metric=mode)
        pairs = retrieve_top_from_min(d_min, fraction, mode)
    else:
        pairs = retrieve_top_from_min(None, fraction, mode, total=len(prior_set),
                                      rng=rng)
    return _to_set(pairs, mode, fraction, prior_set)


def build_retrieval_dataset(dataset: TrajectoryDataset, retrieval_set: RetrievalSet,
                            F: int) -> list[tuple[np.ndarray, np.ndarray]]:
    """Pair each retained mean embedding with the frame stack preceding its window."""
    by_id = {t.id: t for t in dataset.trajectories}
    out = []
    for entry in retrieval_set.entries:
        if entry.source is None or entry.mean is None:
            raise IntegrityError("retrieval entry lacks source bookkeeping")
        tid, start = entry.source
        traj = by_id.get(tid)
        if traj is None or not 0 <= start < traj.length:
            raise IntegrityError(
                f"stale retrieval source ({tid}, {start}) for this dataset")
        out.append((extract_frame_stack(traj, start, F), entry.mean.copy()))
    return out


def retrieval_report(retrieval_set: RetrievalSet, num_prior: int, num_target: int,
                     d_min: np.ndarray | None = None) -> dict:
    qs = [0, 25, 50, 75, 100]
    selected = [d.distance for d in retrieval_set.entries
                if np.isfinite(d.distance)]
    report = {
        "schema_version": 1,
        "mode": retrieval_set.mode,
        "fraction": retrieval_set.fraction,
        "num_prior": num_prior,
        "num_target": num_target,
        "num_selected": len(retrieval_set),
        "selected_sources": [list(e.source) if e.source else [e.prior_index]
                             for e in retrieval_set.entries],
        "selected_distance_quantiles": (
            {str(q): float(np.percentile(selected, q)) for q in qs}
            if selected else None),
        "all_distance_quantiles": (
            {str(q): float(np.percentile(d_min, q)) for q in qs}
            if d_min is not None and len(d_min) else None),
    }
    return report
