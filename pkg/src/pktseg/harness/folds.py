"""Seeded k-fold train/val/test assignment."""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..errors import DatasetTooSmall, ParseError, ValidationError
from ..preprocess import SeededRng


@dataclass
class FoldAssignment:
    folds: list  # one {"train": [...], "val": [...], "test": [...]} per fold

    def __len__(self):
        return len(self.folds)

    def __getitem__(self, k):
        return self.folds[k]

    def to_json(self) -> str:
        doc = {str(k): {part: list(f[part]) for part in ("train", "val", "test")}
               for k, f in enumerate(self.folds)}
        return json.dumps(doc, indent=1) + "\n"

    def save(self, path):
        Path(path).write_text(self.to_json())

    @classmethod
    def load(cls, path):
        try:
            doc = json.loads(Path(path).read_text())
            folds = [doc[str(k)] for k in range(len(doc))]
        except (OSError, ValueError, KeyError) as exc:
            raise ParseError(f"cannot read fold file {path}: {exc}") from exc
        return cls([{p: list(f[p]) for p in ("train", "val", "test")} for f in folds])

    def check(self, all_ids=None):
        """Raise if test sets overlap, miss ids, or a fold's parts intersect."""
        tests = [set(f["test"]) for f in self.folds]
        union = set().union(*tests)
        if sum(len(t) for t in tests) != len(union):
            raise ValidationError("test folds overlap")
        if all_ids is not None and union != set(all_ids):
            raise ValidationError("test folds do not cover the dataset")
        for k, f in enumerate(self.folds):
            tr, va, te = set(f["train"]), set(f["val"]), set(f["test"])
            if tr & va or tr & te or va & te:
                raise ValidationError(f"fold {k}: train/val/test are not disjoint")


def make_folds(manifest, k=5, ratios=(0.70, 0.10, 0.20), seed=18, group_by_patient=False) -> FoldAssignment:
    """Shuffle study ids with the seeded generator and cut k test chunks whose
    sizes differ by at most one. The rest of each fold is split train:val in
    the ratio ratios[0]:ratios[1]; the val size is rounded to nearest and train
    takes the remainder. Validation ids are taken from the studies following the
    test chunk in shuffled order.

    With ``group_by_patient`` whole patients are shuffled and chunked instead,
    so no patient spans two parts of a fold.
    """
    entries = list(manifest.entries)
    if len(entries) < k:
        raise DatasetTooSmall(f"{len(entries)} studies cannot fill {k} folds")
    rng = SeededRng(seed)
    if group_by_patient:
        patients = sorted({e.patient_id for e in entries})
        if len(patients) < k:
            raise DatasetTooSmall(f"{len(patients)} patients cannot fill {k} folds")
        order = [patients[i] for i in rng.permutation(len(patients))]
        members = {p: [e.study_id for e in entries if e.patient_id == p] for p in order}
        units = [members[p] for p in order]
    else:
        ids = [e.study_id for e in entries]
        units = [[ids[i]] for i in rng.permutation(len(ids))]
    chunks = [list(c) for c in np.array_split(np.arange(len(units)), k)]
    r_train, r_val = ratios[0], ratios[1]
    folds = []
    for fi in range(k):
        test_units = chunks[fi]
        rest = [u for j in range(1, k) for u in chunks[(fi + j) % k]]
        n_rest = sum(len(units[u]) for u in rest)
        n_val = int(np.floor(n_rest * r_val / (r_train + r_val) + 0.5))
        val, train = [], []
        for u in rest:
            (val if len(val) < n_val else train).extend(units[u])
        folds.append({
            "train": train,
            "val": val,
            "test": [sid for u in test_units for sid in units[u]],
        })
    fa = FoldAssignment(folds)
    fa.check([e.study_id for e in entries])
    return fa
