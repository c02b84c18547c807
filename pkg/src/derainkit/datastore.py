"""Dataset manifests, triplet persistence, and batch sampling.

On-disk layouts:
  PAIRED_TRIPLETS  <root>/{rainy,background,rain}/<id>.png + manifest.jsonl
  REAL_RAINY/CLEAN <root>/<id>.png (flat) + optional manifest.jsonl

A manifest is one JSON record per line: triplet records carry
{id, rainy, background, rain, mode, seed}; flat records carry {id, path}.
All paths are relative to the manifest root.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np

from .errors import DuplicateIdError, ImageSmallerThanPatchError, \
    ManifestError, MissingFileError
from .images import image_size, load_image, save_image, verify_decodable
from .rainsynth import BlendMode, Triplet

IMAGE_EXTENSIONS = (".png", ".jpg", ".jpeg", ".bmp")
TRIPLET_ROLES = ("rainy", "background", "rain")
MANIFEST_NAME = "manifest.jsonl"


class DatasetKind(Enum):
    PAIRED_TRIPLETS = "paired_triplets"
    REAL_CLEAN = "real_clean"
    REAL_RAINY = "real_rainy"


@dataclass
class Entry:
    id: str
    paths: dict[str, str]
    mode: str | None = None
    seed: int | None = None


@dataclass
class Manifest:
    root: Path
    kind: DatasetKind
    entries: list[Entry] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.entries)

    def path(self, entry: Entry, role: str) -> Path:
        return self.root / entry.paths[role]

    @property
    def roles(self) -> tuple[str, ...]:
        if self.kind is DatasetKind.PAIRED_TRIPLETS:
            return TRIPLET_ROLES
        return ("image",)


def save_manifest(manifest: Manifest, path: Path | None = None) -> Path:
    path = path or manifest.root / MANIFEST_NAME
    with open(path, "w") as fh:
        for e in manifest.entries:
            record: dict = {"id": e.id}
            if manifest.kind is DatasetKind.PAIRED_TRIPLETS:
                record.update({role: e.paths[role] for role in TRIPLET_ROLES})
                record["mode"] = e.mode
                record["seed"] = e.seed
            else:
                record["path"] = e.paths["image"]
            fh.write(json.dumps(record) + "\n")
    return path


def _read_manifest_records(path: Path) -> dict[str, dict]:
    records = {}
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            rec = json.loads(line)
            if rec["id"] in records:
                raise DuplicateIdError(f"duplicate id {rec['id']!r} in {path}")
            records[rec["id"]] = rec
    return records


def _scan_ids(directory: Path) -> dict[str, str]:
    """Map id -> filename for image files in a directory."""
    ids: dict[str, str] = {}
    for p in sorted(directory.iterdir()):
        if p.suffix.lower() not in IMAGE_EXTENSIONS or not p.is_file():
            continue
        if p.stem in ids:
            raise DuplicateIdError(
                f"duplicate id {p.stem!r}: {ids[p.stem]} and {p.name}"
            )
        ids[p.stem] = p.name
    return ids


def build_manifest(root: str | Path, kind: DatasetKind) -> Manifest:
    """Enumerate and validate all decodable entries under `root`, sorted by id."""
    root = Path(root)
    if not root.is_dir():
        raise ManifestError(f"dataset root {root} does not exist")

    meta: dict[str, dict] = {}
    manifest_file = root / MANIFEST_NAME
    if manifest_file.exists():
        meta = _read_manifest_records(manifest_file)

    entries = []
    if kind is DatasetKind.PAIRED_TRIPLETS:
        rainy_dir = root / "rainy"
        # a missing rainy/ is just an empty dataset; the warning below covers it
        ids = _scan_ids(rainy_dir) if rainy_dir.is_dir() else {}
        for id_, name in ids.items():
            paths = {"rainy": f"rainy/{name}"}
            for role in ("background", "rain"):
                p = root / role / name
                if not p.exists():
                    raise MissingFileError(f"{p} missing for id {id_!r}")
                paths[role] = f"{role}/{name}"
            for role in TRIPLET_ROLES:
                verify_decodable(root / paths[role])
            rec = meta.get(id_, {})
            entries.append(Entry(id=id_, paths=paths, mode=rec.get("mode"),
                                 seed=rec.get("seed")))
    else:
        for id_, name in _scan_ids(root).items():
            verify_decodable(root / name)
            entries.append(Entry(id=id_, paths={"image": name}))

    if not entries:
        warnings.warn(f"manifest for {root} is empty", stacklevel=2)
    return Manifest(root=root, kind=kind, entries=entries)


def write_triplets(triplets: list[Triplet], root: str | Path) -> Manifest:
    """Persist triplets as 8-bit PNGs in the standard layout, with manifest."""
    root = Path(root)
    entries = []
    for i, t in enumerate(triplets):
        id_ = f"{i:06d}"
        paths = {}
        for role in TRIPLET_ROLES:
            rel = f"{role}/{id_}.png"
            save_image(root / rel, getattr(t, role))
            paths[role] = rel
        entries.append(Entry(id=id_, paths=paths, mode=t.mode.value, seed=t.seed))
    manifest = Manifest(root=root, kind=DatasetKind.PAIRED_TRIPLETS,
                        entries=entries)
    save_manifest(manifest)
    return manifest


@dataclass
class Batch:
    """Stacked (N, H, W, C) float32 crops; roles absent from the dataset are None.

    REAL_RAINY manifests fill only `rainy`; REAL_CLEAN manifests fill only
    `background` (a clean photo is a background sample).
    """

    rainy: np.ndarray | None
    background: np.ndarray | None
    rain: np.ndarray | None
    n: int


def _batch_role(kind: DatasetKind) -> str:
    return "rainy" if kind is DatasetKind.REAL_RAINY else "background"


def sample_batch(manifest: Manifest, n: int, patch: int, seed: int,
                 augment: bool = False) -> Batch:
    """Draw n random aligned crops (with replacement), deterministic in seed."""
    if n < 1:
        raise ValueError(f"batch size must be >= 1, got {n}")
    if not manifest.entries:
        raise ManifestError(f"cannot sample from empty manifest {manifest.root}")
    rng = np.random.default_rng(seed)
    picks = rng.integers(0, len(manifest.entries), size=n)
    stacks: dict[str, list[np.ndarray]] = {role: [] for role in manifest.roles}
    for idx in picks:
        entry = manifest.entries[int(idx)]
        first_role = manifest.roles[0]
        h, w = image_size(manifest.path(entry, first_role))
        if h < patch or w < patch:
            raise ImageSmallerThanPatchError(
                f"{entry.id}: {h}x{w} smaller than patch {patch}"
            )
        y = int(rng.integers(0, h - patch + 1))
        x = int(rng.integers(0, w - patch + 1))
        flip = augment and rng.random() < 0.5
        for role in manifest.roles:
            img = load_image(manifest.path(entry, role))
            crop = img[y:y + patch, x:x + patch, :]
            if flip:
                crop = crop[:, ::-1, :]
            stacks[role].append(np.ascontiguousarray(crop))
    arrays = {role: np.stack(v) for role, v in stacks.items()}
    if manifest.kind is DatasetKind.PAIRED_TRIPLETS:
        return Batch(rainy=arrays["rainy"], background=arrays["background"],
                     rain=arrays["rain"], n=n)
    role = _batch_role(manifest.kind)
    return Batch(rainy=arrays["image"] if role == "rainy" else None,
                 background=arrays["image"] if role == "background" else None,
                 rain=None, n=n)


def sample_pool(manifests: list[Manifest], n: int, patch: int,
                seed: int) -> np.ndarray:
    """Draw n crops from the union of flat (single-role) manifests.

    Used for unpaired pools, e.g. the discriminator's real examples when
    they come from more than one dataset. Deterministic in seed.
    """
    if n < 1:
        raise ValueError(f"sample count must be >= 1, got {n}")
    pairs = [(m, e) for m in manifests for e in m.entries]
    if not pairs:
        raise ManifestError("cannot sample from an empty pool")
    rng = np.random.default_rng(seed)
    picks = rng.integers(0, len(pairs), size=n)
    crops = []
    for idx in picks:
        manifest, entry = pairs[int(idx)]
        if manifest.roles != ("image",):
            raise ValueError("pool sampling requires flat manifests")
        path = manifest.path(entry, "image")
        h, w = image_size(path)
        if h < patch or w < patch:
            raise ImageSmallerThanPatchError(
                f"{entry.id}: {h}x{w} smaller than patch {patch}"
            )
        y = int(rng.integers(0, h - patch + 1))
        x = int(rng.integers(0, w - patch + 1))
        img = load_image(path)
        crops.append(np.ascontiguousarray(img[y:y + patch, x:x + patch, :]))
    return np.stack(crops)


def crop_real_finetune_set(images: list[np.ndarray], count: int, patch: int,
                           seed: int, out_root: str | Path,
                           kind: DatasetKind = DatasetKind.REAL_RAINY) -> Manifest:
    """Persist `count` random patch-size crops of real images and manifest them."""
    if kind is DatasetKind.PAIRED_TRIPLETS:
        raise ValueError("finetune crops are unpaired; use a REAL_* kind")
    if not images:
        raise ManifestError("no source images given")
    for img in images:
        if img.shape[0] < patch or img.shape[1] < patch:
            raise ImageSmallerThanPatchError(
                f"source image {img.shape[0]}x{img.shape[1]} smaller than patch {patch}"
            )
    out_root = Path(out_root)
    out_root.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    entries = []
    for i in range(count):
        img = images[int(rng.integers(0, len(images)))]
        y = int(rng.integers(0, img.shape[0] - patch + 1))
        x = int(rng.integers(0, img.shape[1] - patch + 1))
        name = f"{i:05d}.png"
        save_image(out_root / name, img[y:y + patch, x:x + patch, :])
        entries.append(Entry(id=f"{i:05d}", paths={"image": name}))
    manifest = Manifest(root=out_root, kind=kind, entries=entries)
    save_manifest(manifest)
    return manifest
