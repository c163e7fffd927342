"""Feature archives, exact top-k cosine search, and leave-one-out evaluation."""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import rng as rngmod
from .dataset import DatasetManifest
from .errors import ConfigError, DomainError, StateError
from .model import Model
from .tensor import Tensor
from .train import FeatureCache, eval_features

TASKS = ("t2i", "i2t")
SCOPES = ("full", "change", "no_change")


@dataclass
class RetrievalArchive:
    """Identifier-ordered unit-normalizable feature rows for one modality.

    ``caption_indices`` records, for text archives, which of the five
    captions produced each row (-1 for image rows).
    """

    ids: list[str]
    features: np.ndarray
    captions: dict[str, tuple[str, ...]]
    change_flags: dict[str, bool]
    caption_indices: list[int] = field(default_factory=list)

    def __post_init__(self):
        if len(self.ids) != self.features.shape[0]:
            raise ConfigError("archive ids and feature rows disagree")
        norms = np.linalg.norm(self.features.astype(np.float64), axis=1)
        bad = np.flatnonzero(norms == 0.0)
        if bad.size:
            raise DomainError(f"zero-norm archive row for id {self.ids[int(bad[0])]!r}")
        if not self.caption_indices:
            self.caption_indices = [-1] * len(self.ids)

    def __len__(self):
        return len(self.ids)


def build_archive(model: Model, manifest: DatasetManifest, modality: str,
                  caption_indices=None, cache: FeatureCache | None = None
                  ) -> RetrievalArchive:
    """Project every manifest entry into the retrieval space.

    Image archives hold one row per pair. Text archives hold one row per
    pair using ``caption_indices`` (id -> 0..4), or five rows per pair when
    ``caption_indices`` is the string ``"all"``.
    """
    if modality not in ("image", "text"):
        raise ConfigError(f"modality must be image or text, got {modality!r}")
    cache = cache if cache is not None else FeatureCache(model, manifest)
    fx, fy = eval_features(model, cache)
    captions = dict(cache.captions)
    flags = {pid: bool(f) for pid, f in zip(cache.ids, cache.change)}
    if modality == "image":
        return RetrievalArchive(list(cache.ids), fx, captions, flags)
    if caption_indices == "all":
        ids = [pid for pid in cache.ids for _ in range(5)]
        rows = fy.reshape(len(cache) * 5, -1)
        cap_idx = [j for _ in cache.ids for j in range(5)]
        return RetrievalArchive(ids, rows, captions, flags, cap_idx)
    if caption_indices is None:
        caption_indices = {pid: 0 for pid in cache.ids}
    rows = np.stack([fy[i, caption_indices[pid]] for i, pid in enumerate(cache.ids)])
    cap_idx = [int(caption_indices[pid]) for pid in cache.ids]
    return RetrievalArchive(list(cache.ids), rows, captions, flags, cap_idx)


def query_topk(archive: RetrievalArchive, query: np.ndarray, k: int):
    """Exact scan: the k highest-cosine rows, descending, ties by ascending id.

    Returns a list of (row_index, id, similarity).
    """
    if len(archive) == 0:
        raise StateError("cannot query an empty archive")
    if k < 1:
        raise ConfigError(f"k must be >= 1, got {k}")
    q = np.asarray(query, dtype=np.float64).reshape(-1)
    qn = np.linalg.norm(q)
    if qn == 0.0:
        raise DomainError("zero-norm query vector")
    rows = archive.features.astype(np.float64)
    sims = rows @ (q / qn) / np.linalg.norm(rows, axis=1)
    order = sorted(range(len(archive)), key=lambda i: (-sims[i], archive.ids[i]))
    return [(i, archive.ids[i], float(sims[i])) for i in order[:k]]


@dataclass
class QueryResult:
    round: int
    query_id: str
    task: str
    scope: str
    retrieved: list  # (pair_id, caption_index, similarity)


@dataclass
class LeaveOneOutRun:
    task: str
    scope: str
    rounds: int
    k: int
    results: list[QueryResult]
    caption_choice: list[dict]   # per round: id -> sampled caption index
    captions: dict               # id -> 5 captions
    query_count: int


def _scope_mask(flags: np.ndarray, scope: str) -> np.ndarray:
    if scope == "full":
        return np.ones(len(flags), dtype=bool)
    if scope == "change":
        return flags.copy()
    if scope == "no_change":
        return ~flags
    raise ConfigError(f"unknown scope {scope!r}; choose one of {', '.join(SCOPES)}")


def leave_one_out_eval(model: Model, manifest: DatasetManifest, task: str,
                       scope: str = "full", rounds: int = 5, k: int = 5,
                       seed: int = 0, text_archive_mode: str = "sampled",
                       cache: FeatureCache | None = None) -> LeaveOneOutRun:
    """The evaluation protocol: every in-scope entry queries the archive of
    all remaining entries; repeated ``rounds`` times with a fresh random
    caption sampled per pair each round.

    ``text_archive_mode`` controls the image-to-text archive granularity:
    ``"sampled"`` (one row per pair, that round's caption) or ``"all"``
    (five rows per pair).
    """
    if task not in TASKS:
        raise ConfigError(f"task must be one of {TASKS}, got {task!r}")
    if text_archive_mode not in ("sampled", "all"):
        raise ConfigError(f"text_archive_mode must be sampled or all")
    cache = cache if cache is not None else FeatureCache(model, manifest)
    n = len(cache)
    if n < 2:
        raise ConfigError("leave-one-out evaluation needs at least 2 entries")
    fx, fy = eval_features(model, cache)
    _assert_no_zero_rows(fx, cache.ids, "image")
    scope_rows = np.flatnonzero(_scope_mask(cache.change, scope))

    results: list[QueryResult] = []
    choices: list[dict] = []
    for rnd in range(rounds):
        cap_idx = rngmod.stream(seed, "caption-round", rnd).integers(0, 5, size=n)
        choices.append({pid: int(cap_idx[i]) for i, pid in enumerate(cache.ids)})
        text_rows = np.stack([fy[i, cap_idx[i]] for i in range(n)])
        _assert_no_zero_rows(text_rows, cache.ids, "text")
        if task == "t2i":
            queries, rows, row_caps = text_rows, fx, [-1] * n
            row_ids, owner = list(cache.ids), np.arange(n)
        else:
            queries = fx
            if text_archive_mode == "all":
                rows = fy.reshape(n * 5, -1)
                row_ids = [pid for pid in cache.ids for _ in range(5)]
                row_caps = [j for _ in cache.ids for j in range(5)]
                owner = np.repeat(np.arange(n), 5)
            else:
                rows, row_ids = text_rows, list(cache.ids)
                row_caps = [int(cap_idx[i]) for i in range(n)]
                owner = np.arange(n)
        norm_rows = rows.astype(np.float64)
        norm_rows = norm_rows / np.linalg.norm(norm_rows, axis=1, keepdims=True)
        for qi in scope_rows:
            q = queries[qi].astype(np.float64)
            q = q / np.linalg.norm(q)
            sims = norm_rows @ q
            keep = np.flatnonzero(owner != qi)
            order = sorted(keep, key=lambda i: (-sims[i], row_ids[i], row_caps[i]))
            picked = [(row_ids[i], row_caps[i], float(sims[i])) for i in order[:k]]
            results.append(QueryResult(rnd, cache.ids[qi], task, scope, picked))
    return LeaveOneOutRun(task, scope, rounds, k, results, choices,
                          dict(cache.captions), len(scope_rows))


def _assert_no_zero_rows(rows: np.ndarray, ids, what: str) -> None:
    norms = np.linalg.norm(rows.astype(np.float64), axis=1)
    bad = np.flatnonzero(norms == 0.0)
    if bad.size:
        raise DomainError(f"zero-norm projected {what} feature for id {ids[int(bad[0])]!r}")


def export_results(runs, fh) -> None:
    """Line-delimited export: {round, query_id, task, scope, retrieved}."""
    for run in runs:
        for res in run.results:
            rec = {"round": res.round, "query_id": res.query_id, "task": res.task,
                   "scope": res.scope,
                   "retrieved": [{"id": pid, "score": score}
                                 for pid, _cap, score in res.retrieved]}
            fh.write(json.dumps(rec) + "\n")
