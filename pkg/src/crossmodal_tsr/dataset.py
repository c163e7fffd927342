"""Dataset manifests, split handling, and the synthetic benchmark generator.

Manifest files are UTF-8 JSON lines; each record holds
``{id, captions (exactly 5), emb_t1, emb_t2, change}`` with embedding paths
relative to the manifest location. Embeddings are TSRE matrices of patch
features [T, d]; the per-pair class-token vector is the row mean of that
sequence (the toy encoders define it the same way).
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import rng as rngmod
from .encoders import encode_image
from .errors import ConfigError, DataIOError, ParseError
from .tensorfile import read_matrix, write_matrix


@dataclass(frozen=True)
class ManifestEntry:
    id: str
    captions: tuple[str, ...]
    emb_t1: str
    emb_t2: str
    change: bool


@dataclass
class DatasetManifest:
    entries: list[ManifestEntry]
    root: Path

    def __len__(self):
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    def ids(self) -> list[str]:
        return [e.id for e in self.entries]

    def resolve(self, rel_path: str) -> Path:
        return self.root / rel_path


@dataclass
class BitemporalSample:
    """One loaded pair: patch sequences, class tokens, captions, flag."""

    id: str
    emb_t1: np.ndarray
    emb_t2: np.ndarray
    cls_t1: np.ndarray
    cls_t2: np.ndarray
    captions: tuple[str, ...]
    change: bool


def load_manifest(path, check_files: bool = True) -> DatasetManifest:
    path = Path(path)
    root = path.parent
    entries: list[ManifestEntry] = []
    seen: set[str] = set()
    try:
        lines = path.read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise DataIOError(f"{path}: {exc}") from exc
    for lineno, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ParseError(f"invalid JSON: {exc.msg}", lineno) from exc
        if not isinstance(rec, dict):
            raise ParseError("record is not an object", lineno)
        missing = {"id", "captions", "emb_t1", "emb_t2", "change"} - rec.keys()
        if missing:
            raise ParseError(f"missing fields {sorted(missing)}", lineno)
        captions = rec["captions"]
        if not isinstance(captions, list) or len(captions) != 5:
            raise ParseError(
                f"entry {rec.get('id')!r} needs exactly 5 captions, got "
                f"{len(captions) if isinstance(captions, list) else type(captions).__name__}",
                lineno,
            )
        if not all(isinstance(c, str) and c.strip() for c in captions):
            raise ParseError("captions must be non-empty strings", lineno)
        pid = rec["id"]
        if not isinstance(pid, str) or not pid:
            raise ParseError("id must be a non-empty string", lineno)
        if pid in seen:
            raise ParseError(f"duplicate id {pid!r}", lineno)
        seen.add(pid)
        entry = ManifestEntry(pid, tuple(captions), rec["emb_t1"], rec["emb_t2"],
                              bool(rec["change"]))
        if check_files:
            for rel in (entry.emb_t1, entry.emb_t2):
                if not (root / rel).is_file():
                    raise DataIOError(f"{path} line {lineno}: missing embedding file {root / rel}")
        entries.append(entry)
    return DatasetManifest(entries, root)


def save_manifest(manifest: DatasetManifest, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        for e in manifest.entries:
            rec = {"id": e.id, "captions": list(e.captions), "emb_t1": e.emb_t1,
                   "emb_t2": e.emb_t2, "change": e.change}
            fh.write(json.dumps(rec) + "\n")


def load_sample(manifest: DatasetManifest, entry: ManifestEntry) -> BitemporalSample:
    emb_t1 = read_matrix(manifest.resolve(entry.emb_t1))
    emb_t2 = read_matrix(manifest.resolve(entry.emb_t2))
    if emb_t1.shape != emb_t2.shape:
        raise DataIOError(
            f"entry {entry.id}: embedding shapes differ, {emb_t1.shape} vs {emb_t2.shape}"
        )
    return BitemporalSample(entry.id, emb_t1, emb_t2, emb_t1.mean(axis=0),
                            emb_t2.mean(axis=0), entry.captions, entry.change)


def load_samples(manifest: DatasetManifest) -> dict[str, BitemporalSample]:
    return {e.id: load_sample(manifest, e) for e in manifest.entries}


def split_and_subsample(manifest: DatasetManifest, fractions, nochange_keep: float,
                        seed: int):
    """Deterministic train/val/test split, then no-change subsampling of train.

    Counts are floor(fraction * N) for train and val; test takes the rest.
    The training split keeps floor(nochange_keep * count) of its no-change
    entries, selected by seed.
    """
    if len(fractions) != 3:
        raise ConfigError(f"need 3 split fractions, got {len(fractions)}")
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ConfigError(f"split fractions must sum to 1, got {sum(fractions)}")
    if not 0.0 < nochange_keep <= 1.0:
        raise ConfigError(f"nochange_keep must be in (0, 1], got {nochange_keep}")
    order = rngmod.stream(seed, "split-shuffle").permutation(len(manifest.entries))
    shuffled = [manifest.entries[i] for i in order]
    n = len(shuffled)
    n_train = math.floor(fractions[0] * n)
    n_val = math.floor(fractions[1] * n)
    train = shuffled[:n_train]
    val = shuffled[n_train:n_train + n_val]
    test = shuffled[n_train + n_val:]

    if nochange_keep < 1.0:
        nochange = [e for e in train if not e.change]
        keep_n = math.floor(nochange_keep * len(nochange))
        pick = rngmod.stream(seed, "nochange-subsample").permutation(len(nochange))[:keep_n]
        kept_ids = {nochange[i].id for i in pick}
        train = [e for e in train if e.change or e.id in kept_ids]

    root = manifest.root
    return (DatasetManifest(train, root), DatasetManifest(val, root),
            DatasetManifest(test, root))


# ---------------------------------------------------------------------
# synthetic benchmark
# ---------------------------------------------------------------------

LOCATIONS = {
    "north west": (0.0, 0.0),
    "north east": (0.0, 0.5),
    "south west": (0.5, 0.0),
    "south east": (0.5, 0.5),
    "center": (0.25, 0.25),
}
SIZES = (3, 4, 5)
SIZE_WORDS = {3: "three", 4: "four", 5: "five"}
SHADES = {"dark": 0.95, "dim": 0.75, "pale": 0.55, "bright": 0.35}

_APPEAR_TEMPLATES = (
    "a {shade} block of {size} cells appears in the {loc}",
    "a new {shade} block of {size} cells is built in the {loc}",
    "a {shade} block of {size} cells has been added to the {loc}",
    "the {loc} area gains a {shade} block of {size} cells",
    "construction of a {shade} block of {size} cells in the {loc}",
)
_DISAPPEAR_TEMPLATES = (
    "a {shade} block of {size} cells disappears from the {loc}",
    "a {shade} block of {size} cells is demolished in the {loc}",
    "a {shade} block of {size} cells has been removed from the {loc}",
    "the {loc} area loses a {shade} block of {size} cells",
    "demolition of a {shade} block of {size} cells in the {loc}",
)
NO_CHANGE_CAPTIONS = (
    "the scene is unchanged",
    "no change has occurred in the area",
    "nothing has changed between the two times",
    "the area remains the same",
    "there is no difference between the two images",
)


@dataclass(frozen=True)
class Edit:
    """Templated scene edit; None-kind entries are no-change pairs."""

    kind: str  # "appears" | "disappears" | "none"
    loc: str = ""
    size: int = 0
    shade: str = ""

    def opposite(self) -> "Edit":
        if self.kind == "none":
            return self
        flipped = "disappears" if self.kind == "appears" else "appears"
        return Edit(flipped, self.loc, self.size, self.shade)


def captions_for_edit(edit: Edit) -> tuple[str, ...]:
    if edit.kind == "none":
        return NO_CHANGE_CAPTIONS
    templates = _APPEAR_TEMPLATES if edit.kind == "appears" else _DISAPPEAR_TEMPLATES
    return tuple(t.format(shade=edit.shade, size=SIZE_WORDS[edit.size], loc=edit.loc)
                 for t in templates)


def _render_scene(grid: int, gen) -> np.ndarray:
    return gen.uniform(0.0, 0.25, size=(1, grid, grid)).astype(np.float32)


def _apply_block(scene: np.ndarray, edit: Edit, grid: int) -> np.ndarray:
    out = scene.copy()
    fr, fc = LOCATIONS[edit.loc]
    r, c = int(fr * grid), int(fc * grid)
    out[0, r:r + edit.size, c:c + edit.size] = SHADES[edit.shade]
    return out


def generate_synthetic_dataset(n_pairs: int, out_dir, seed: int, grid: int = 12,
                               patch: int = 4, embed_dim: int = 16,
                               no_change_fraction: float = 0.25):
    """Write a synthetic benchmark to ``out_dir``; return (manifest, edits).

    Each pair is a base scene plus a templated block edit: a block appears
    (absent at t1, present at t2), disappears (the exact time reverse), or
    nothing changes (t2 is byte-identical to t1). Captions are five template
    paraphrases of the edit. Fixed seeds regenerate identical bytes.
    """
    if n_pairs < 2:
        raise ConfigError(f"need at least 2 pairs, got {n_pairs}")
    if grid % patch:
        raise ConfigError(f"grid {grid} must be divisible by patch {patch}")
    if not 0.0 <= no_change_fraction < 1.0:
        raise ConfigError(f"no_change_fraction must be in [0, 1), got {no_change_fraction}")
    out_dir = Path(out_dir)
    emb_dir = out_dir / "emb"
    emb_dir.mkdir(parents=True, exist_ok=True)

    n_nochange = math.floor(no_change_fraction * n_pairs)
    flags = np.zeros(n_pairs, dtype=bool)
    flags[rngmod.stream(seed, "nochange-assign").permutation(n_pairs)[:n_nochange]] = True

    loc_names = list(LOCATIONS)
    shade_names = list(SHADES)
    entries: list[ManifestEntry] = []
    edits: dict[str, Edit] = {}
    for i in range(n_pairs):
        pid = f"pair{i:05d}"
        scene = _render_scene(grid, rngmod.stream(seed, "scene", i))
        if flags[i]:
            edit = Edit("none")
            img_t1 = img_t2 = scene
        else:
            gen = rngmod.stream(seed, "edit", i)
            edit = Edit(
                kind="appears" if gen.integers(2) == 0 else "disappears",
                loc=loc_names[gen.integers(len(loc_names))],
                size=SIZES[gen.integers(len(SIZES))],
                shade=shade_names[gen.integers(len(shade_names))],
            )
            with_block = _apply_block(scene, edit, grid)
            if edit.kind == "appears":
                img_t1, img_t2 = scene, with_block
            else:
                img_t1, img_t2 = with_block, scene
        _, patches_t1 = encode_image(img_t1, patch, embed_dim, seed)
        _, patches_t2 = encode_image(img_t2, patch, embed_dim, seed)
        rel_t1 = os.path.join("emb", f"{pid}_t1.tsre")
        rel_t2 = os.path.join("emb", f"{pid}_t2.tsre")
        write_matrix(out_dir / rel_t1, patches_t1)
        write_matrix(out_dir / rel_t2, patches_t2)
        entries.append(ManifestEntry(pid, captions_for_edit(edit), rel_t1, rel_t2,
                                     edit.kind != "none"))
        edits[pid] = edit

    manifest = DatasetManifest(entries, out_dir)
    save_manifest(manifest, out_dir / "manifest.jsonl")
    return manifest, edits
