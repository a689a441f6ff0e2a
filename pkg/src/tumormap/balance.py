"""Balanced tile manifest construction: 50:50 class ratio per tumor type,
optionally with equal patient representation, via seeded resampling.

The majority class is undersampled by default; sampling with
replacement must be requested explicitly. All sampling is driven by a
single seeded generator, so a given seed always reproduces the manifest
byte for byte.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .errors import InsufficientClass, MissingPatientId, OneClassOnly

DEFAULT_TARGET_PER_TYPE = 20_000

_NDJSON_FIELDS = ("path", "slide_id", "col", "row", "label", "tumor_type", "patient_id")


@dataclass(frozen=True)
class TileManifestEntry:
    """One tile reference: either a file path or a (slide_id, col, row) triple."""

    label: int
    tumor_type: str
    path: str | None = None
    slide_id: str | None = None
    col: int | None = None
    row: int | None = None
    patient_id: str | None = None

    def __post_init__(self):
        if self.label not in (0, 1):
            raise ValueError(f"label must be 0 or 1, got {self.label}")
        if self.path is None and self.slide_id is None:
            raise ValueError("entry needs a path or a (slide_id, col, row)")

    def to_json(self) -> str:
        record = {k: getattr(self, k) for k in _NDJSON_FIELDS if getattr(self, k) is not None}
        return json.dumps(record, separators=(",", ":"))

    @classmethod
    def from_json(cls, line: str) -> "TileManifestEntry":
        return cls(**json.loads(line))


def read_manifest(path) -> list[TileManifestEntry]:
    entries = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                entries.append(TileManifestEntry.from_json(line))
    return entries


def write_manifest(entries: list[TileManifestEntry], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for entry in entries:
            fh.write(entry.to_json())
            fh.write("\n")


def _split_classes(entries: list[TileManifestEntry]) -> tuple[list, list]:
    neg = [e for e in entries if e.label == 0]
    pos = [e for e in entries if e.label == 1]
    if not neg or not pos:
        raise OneClassOnly(f"need both classes, got {len(pos)} tumor / {len(neg)} non-tumor")
    return neg, pos


def _check_target(target_total: int) -> int:
    if target_total < 2 or target_total % 2 != 0:
        raise ValueError(f"target_total must be a positive even number, got {target_total}")
    return target_total // 2


def balance_cohort(
    entries: list[TileManifestEntry],
    target_total: int = DEFAULT_TARGET_PER_TYPE,
    seed: int = 0,
    allow_oversample: bool = False,
) -> list[TileManifestEntry]:
    """Resample to exactly target_total/2 entries per class.

    A class with enough entries is sampled without replacement; a short
    class is an error unless allow_oversample permits sampling with
    replacement.
    """
    quota = _check_target(target_total)
    neg, pos = _split_classes(entries)
    rng = np.random.default_rng(seed)
    picked: list[TileManifestEntry] = []
    for pool in (neg, pos):
        if len(pool) >= quota:
            idx = rng.permutation(len(pool))[:quota]
        elif allow_oversample:
            idx = rng.integers(0, len(pool), size=quota)
        else:
            raise InsufficientClass(
                f"class has {len(pool)} entries, quota is {quota} "
                f"(pass allow_oversample to sample with replacement)"
            )
        picked.extend(pool[i] for i in idx)
    order = rng.permutation(len(picked))
    return [picked[i] for i in order]


def balance_by_patient(
    entries: list[TileManifestEntry],
    target_total: int = DEFAULT_TARGET_PER_TYPE,
    seed: int = 0,
) -> list[TileManifestEntry]:
    """Balance classes with per-class quotas split as evenly as possible
    across patients.

    The per-class remainder goes to seeded-random patients, so patient
    quotas differ by at most one. A patient short of its quota
    contributes everything it has; the deficit is redistributed in one
    round over the remaining patients' spare tiles, and anything still
    missing after that round is an error.
    """
    quota = _check_target(target_total)
    for e in entries:
        if e.patient_id is None:
            raise MissingPatientId(f"entry without patient_id: {e}")
    _split_classes(entries)  # both classes must exist
    patients = sorted({e.patient_id for e in entries})
    rng = np.random.default_rng(seed)

    pools: dict[tuple[str, int], list[TileManifestEntry]] = {}
    for e in entries:
        pools.setdefault((e.patient_id, e.label), []).append(e)

    picked: list[TileManifestEntry] = []
    for label in (0, 1):
        base, rem = divmod(quota, len(patients))
        bonus_order = rng.permutation(len(patients))
        quotas = {p: base for p in patients}
        for k in bonus_order[:rem]:
            quotas[patients[k]] += 1

        shuffled: dict[str, list[TileManifestEntry]] = {}
        taken: dict[str, int] = {}
        deficit = 0
        for p in patients:
            pool = pools.get((p, label), [])
            order = rng.permutation(len(pool))
            shuffled[p] = [pool[i] for i in order]
            take = min(quotas[p], len(pool))
            taken[p] = take
            deficit += quotas[p] - take
        if deficit:
            for k in rng.permutation(len(patients)):
                if deficit == 0:
                    break
                p = patients[k]
                spare = len(shuffled[p]) - taken[p]
                extra = min(spare, deficit)
                taken[p] += extra
                deficit -= extra
            if deficit:
                raise InsufficientClass(
                    f"class {label} still short {deficit} tiles after one "
                    f"redistribution round"
                )
        for p in patients:
            picked.extend(shuffled[p][: taken[p]])

    order = rng.permutation(len(picked))
    return [picked[i] for i in order]
