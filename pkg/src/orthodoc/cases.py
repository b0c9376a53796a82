"""Patient case records and the on-disk case format."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np


class CaseError(ValueError):
    pass


@dataclass(frozen=True)
class Demographics:
    age: float
    sex: str
    occupation: str = ""


@dataclass(frozen=True, eq=False)
class ImageFeatures:
    """Precomputed image patch vectors, one row per patch."""

    patches: np.ndarray
    source_id: str = ""

    def __post_init__(self):
        arr = np.asarray(self.patches, dtype=np.float64)
        if arr.ndim != 2 or arr.shape[0] < 1:
            raise CaseError(f"image patches must be a non-empty P x d matrix, got shape {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise CaseError("image patches contain non-finite values")
        arr.setflags(write=False)
        object.__setattr__(self, "patches", arr)


@dataclass(frozen=True, eq=False)
class CaseRecord:
    case_id: str
    demographics: Demographics
    history: str
    complaints: str
    image: ImageFeatures
    ground_truth: str | None = None
    exam_date: str | None = None

    def __post_init__(self):
        if self.demographics.age < 0:
            raise CaseError(f"case {self.case_id}: negative age")

    @property
    def text(self) -> str:
        """Free text fed to the text embedder."""
        return f"{self.history} {self.complaints}".strip()

    def to_dict(self) -> dict:
        d = {
            "case_id": self.case_id,
            "demographics": {
                "age": self.demographics.age,
                "sex": self.demographics.sex,
                "occupation": self.demographics.occupation,
            },
            "history": self.history,
            "complaints": self.complaints,
            "image_patches": self.image.patches.tolist(),
        }
        if self.ground_truth is not None:
            d["ground_truth"] = self.ground_truth
        if self.exam_date is not None:
            d["exam_date"] = self.exam_date
        return d

    @classmethod
    def from_dict(cls, obj: dict) -> "CaseRecord":
        try:
            demo = obj["demographics"]
            return cls(
                case_id=str(obj["case_id"]),
                demographics=Demographics(
                    float(demo["age"]), str(demo.get("sex", "")), str(demo.get("occupation", ""))
                ),
                history=str(obj.get("history", "")),
                complaints=str(obj.get("complaints", "")),
                image=ImageFeatures(np.asarray(obj["image_patches"], dtype=np.float64), str(obj["case_id"])),
                ground_truth=obj.get("ground_truth"),
                exam_date=obj.get("exam_date"),
            )
        except (KeyError, TypeError, ValueError) as exc:
            if isinstance(exc, CaseError):
                raise
            raise CaseError(f"malformed case record: {exc}") from exc


def load_case(path: str | Path) -> CaseRecord:
    path = Path(path)
    if not path.is_file():
        raise CaseError(f"case file not found: {path}")
    try:
        obj = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise CaseError(f"{path}: not valid JSON ({exc})") from exc
    return CaseRecord.from_dict(obj)


def save_case(case: CaseRecord, path: str | Path) -> None:
    Path(path).write_text(json.dumps(case.to_dict(), sort_keys=True) + "\n", encoding="utf-8")


def load_cases(directory: str | Path) -> list[CaseRecord]:
    """All ``*.json`` cases in a directory, ordered by case_id."""
    directory = Path(directory)
    if not directory.is_dir():
        raise CaseError(f"case directory not found: {directory}")
    cases = [load_case(p) for p in sorted(directory.glob("*.json"))]
    return sorted(cases, key=lambda c: c.case_id)
