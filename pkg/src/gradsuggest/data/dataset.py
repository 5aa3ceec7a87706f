"""In-memory dataset of slices grouped into patients, plus the annotation oracle."""

from __future__ import annotations

import copy
from dataclasses import dataclass
from typing import Iterable, Optional

import numpy as np

from ..exceptions import ContractViolation, MissingSampleError


def sample_id(patient_id: str, slice_index: int) -> str:
    return f"{patient_id}_{slice_index}"


@dataclass(frozen=True, eq=False)
class Sample:
    sample_id: str
    patient_id: str
    site: str
    slice_index: int
    image: np.ndarray
    mask: Optional[np.ndarray] = None

    def __eq__(self, other):
        if not isinstance(other, Sample):
            return NotImplemented
        same_mask = (self.mask is None and other.mask is None) or (
            self.mask is not None and other.mask is not None and np.array_equal(self.mask, other.mask)
        )
        return (
            self.sample_id == other.sample_id
            and self.patient_id == other.patient_id
            and self.site == other.site
            and self.slice_index == other.slice_index
            and self.image.dtype == other.image.dtype
            and self.image.tobytes() == other.image.tobytes()
            and same_mask
        )

    __hash__ = None


@dataclass
class AnnotationCost:
    labeled: int = 0
    context: int = 0


class Dataset:
    """Slices keyed by sample id, grouped by patient, with a train/test split.

    The samples are never mutated. The only mutable part is the annotation
    state (which ids the simulated expert has labelled and at what cost);
    :meth:`session` hands out a copy with a fresh state.
    """

    def __init__(self, samples: Iterable[Sample], split: dict, meta: Optional[dict] = None):
        self._samples: dict[str, Sample] = {}
        self._by_patient: dict[str, list] = {}
        for s in samples:
            if s.sample_id in self._samples:
                raise ContractViolation(f"duplicate sample id {s.sample_id!r}")
            self._samples[s.sample_id] = s
            self._by_patient.setdefault(s.patient_id, []).append(s)
        for pid, group in self._by_patient.items():
            group.sort(key=lambda s: s.slice_index)
            if [s.slice_index for s in group] != list(range(len(group))):
                raise ContractViolation(f"patient {pid!r} slices are not contiguous from 0")
            if pid not in split:
                raise ContractViolation(f"patient {pid!r} has no split assignment")
        self.split = dict(split)
        self.meta = dict(meta or {})
        self.annotated: set = set()
        self.cost = AnnotationCost()

    # -- lookup

    def __len__(self):
        return len(self._samples)

    def __contains__(self, sid):
        return sid in self._samples

    def __getitem__(self, sid) -> Sample:
        try:
            return self._samples[sid]
        except KeyError:
            raise MissingSampleError(f"unknown sample id {sid!r}") from None

    def __iter__(self):
        return iter(self._samples.values())

    def __eq__(self, other):
        if not isinstance(other, Dataset):
            return NotImplemented
        return (
            list(self._samples) == list(other._samples)
            and all(a == b for a, b in zip(self._samples.values(), other._samples.values()))
            and self.split == other.split
        )

    __hash__ = None

    @property
    def image_shape(self) -> tuple:
        first = next(iter(self._samples.values()))
        return first.image.shape

    def patients(self, split: Optional[str] = None, site: Optional[str] = None) -> list:
        out = []
        for pid in sorted(self._by_patient):
            if split is not None and self.split[pid] != split:
                continue
            if site is not None and self._by_patient[pid][0].site != site:
                continue
            out.append(pid)
        return out

    def slices(self, patient_id: str) -> list:
        try:
            return list(self._by_patient[patient_id])
        except KeyError:
            raise MissingSampleError(f"unknown patient id {patient_id!r}") from None

    def site_of(self, patient_id: str) -> str:
        return self.slices(patient_id)[0].site

    def sample_ids(self, patients: Optional[Iterable[str]] = None) -> list:
        pids = self.patients() if patients is None else patients
        return [s.sample_id for pid in pids for s in self.slices(pid)]

    def images(self, ids) -> np.ndarray:
        return np.stack([self[i].image for i in ids])

    def masks(self, ids) -> np.ndarray:
        out = []
        for i in ids:
            m = self[i].mask
            if m is None:
                raise ContractViolation(f"sample {i!r} has no ground-truth mask")
            out.append(m)
        return np.stack(out)

    # -- derived datasets

    def subset(self, patients: Iterable[str]) -> "Dataset":
        keep = set(patients)
        return Dataset(
            [s for s in self._samples.values() if s.patient_id in keep],
            {p: v for p, v in self.split.items() if p in keep},
            self.meta,
        )

    def merge(self, other: "Dataset") -> "Dataset":
        meta = copy.deepcopy(self.meta)
        for key in ("sites", "site_params"):
            if key in other.meta:
                if isinstance(meta.get(key), dict):
                    meta[key] = {**meta[key], **other.meta[key]}
                elif isinstance(meta.get(key), list):
                    meta[key] = sorted(set(meta[key]) | set(other.meta[key]))
        return Dataset(list(self) + list(other), {**self.split, **other.split}, meta)

    def session(self) -> "Dataset":
        """Shallow copy sharing samples, with an empty annotation state."""
        fresh = copy.copy(self)
        fresh.annotated = set()
        fresh.cost = AnnotationCost()
        return fresh


CONTEXT_VIEWS_PER_SLICE = 2


def oracle_annotate(dataset: Dataset, ids, strategy: str = "image") -> list:
    """Simulated expert: return ``(image, mask)`` for each id and mark it annotated.

    Ids already annotated cost nothing again. In the image strategy each newly
    labelled slice is shown with its two neighbouring slices for context, which
    are counted but not labelled.
    """
    if strategy not in ("image", "patient"):
        raise ContractViolation(f"unknown strategy {strategy!r}")
    ids = list(ids)
    for sid in ids:
        if sid not in dataset:
            raise MissingSampleError(f"unknown sample id {sid!r}")
    pairs = []
    for sid in ids:
        s = dataset[sid]
        if s.mask is None:
            raise ContractViolation(f"no ground truth available for {sid!r}")
        if sid not in dataset.annotated:
            dataset.annotated.add(sid)
            dataset.cost.labeled += 1
            if strategy == "image":
                dataset.cost.context += CONTEXT_VIEWS_PER_SLICE
        pairs.append((s.image, s.mask))
    return pairs
