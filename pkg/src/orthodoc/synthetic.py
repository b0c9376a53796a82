"""Generator for the bundled synthetic case suite.

Image patches are drawn around one prototype direction per class: a few
"lesion" patches carry the class prototype, the rest are background noise.
Texts are assembled from per-class complaint and history phrases. Everything
is seeded, so ``write_dataset`` reproduces the shipped files exactly.
"""

from __future__ import annotations

import shutil
from importlib import resources
from pathlib import Path

import numpy as np

from .cases import CaseRecord, Demographics, ImageFeatures, save_case
from .fusion import CLASS_LABELS, DEFAULT_DIM, DEFAULT_PATCHES

SEED = 20240715
N_TRAIN_PER_CLASS = 10
N_TEST_PER_CLASS = 5
LESION_PATCHES = 4
SIGNAL = 1.4

COMPLAINTS = {
    "fracture": [
        "acute wrist pain and swelling after a fall on the outstretched hand",
        "deformity and tenderness of the forearm after a cycling accident",
        "inability to bear weight and hip pain after a fall at home",
        "snuffbox tenderness and wrist pain after a fall",
    ],
    "arthritis": [
        "morning stiffness and swelling of both knees lasting over an hour",
        "painful swollen finger joints with morning stiffness",
        "knee pain on stairs with joint swelling and crepitus",
        "symmetric joint swelling of the wrists with fatigue",
    ],
    "tumor": [
        "persistent night pain in the thigh with unexplained weight loss",
        "a growing painful swelling above the knee",
        "deep bone pain at rest and a palpable mass near the knee",
        "night pain in the upper arm that wakes the patient",
    ],
    "dislocation": [
        "shoulder pain and loss of motion after a tackle with the arm abducted",
        "the shoulder gave way and the arm is held in a fixed position",
        "loss of shoulder contour and severe pain after a fall",
        "recurrent shoulder instability after sports trauma",
    ],
    "degenerative_disease": [
        "chronic low back pain with stiffness worse with activity",
        "radiating leg pain with numbness and back stiffness",
        "neck pain and stiffness that has slowly worsened over years",
        "low back pain with reduced walking distance",
    ],
    "normal": [
        "minor ankle discomfort after exercise with no deformity",
        "mild knee ache after running that settles with rest",
        "brief wrist soreness after lifting with full range of motion",
        "occasional back discomfort after gardening with normal walking",
    ],
}

HISTORY = {
    "fracture": ["history of osteoporosis", "no prior injuries", "previous ankle fracture"],
    "arthritis": ["family history of rheumatoid arthritis", "long standing knee osteoarthritis", "psoriasis"],
    "tumor": ["no significant past history", "previous breast cancer", "recent unexplained fatigue"],
    "dislocation": ["previous shoulder dislocation", "plays rugby", "no prior shoulder problems"],
    "degenerative_disease": ["sedentary job with long sitting", "previous disc surgery", "obesity"],
    "normal": ["no significant past history", "regular recreational running", "healthy and active"],
}

OCCUPATIONS = ["teacher", "farmer", "nurse", "engineer", "student", "driver", "retired clerk", "carpenter"]


def class_prototypes(d: int = DEFAULT_DIM, seed: int = SEED) -> np.ndarray:
    rng = np.random.default_rng(seed)
    protos = rng.standard_normal((len(CLASS_LABELS), d))
    return protos / np.linalg.norm(protos, axis=1, keepdims=True)


def make_case(case_id: str, label: str, rng: np.random.Generator, protos: np.ndarray,
              d: int = DEFAULT_DIM, n_patches: int = DEFAULT_PATCHES) -> CaseRecord:
    idx = CLASS_LABELS.index(label)
    patches = rng.standard_normal((n_patches, d)) * 0.5
    lesion = rng.choice(n_patches, size=LESION_PATCHES, replace=False)
    patches[lesion] += SIGNAL * protos[idx]
    age = int(rng.integers(16, 86))
    return CaseRecord(
        case_id=case_id,
        demographics=Demographics(age, str(rng.choice(["female", "male"])), str(rng.choice(OCCUPATIONS))),
        history=str(rng.choice(HISTORY[label])),
        complaints=str(rng.choice(COMPLAINTS[label])),
        image=ImageFeatures(np.round(patches, 6), case_id),
        ground_truth=label,
        exam_date=f"2024-{1 + int(rng.integers(0, 12)):02d}-{1 + int(rng.integers(0, 28)):02d}",
    )


def make_cases(seed: int = SEED) -> tuple[list[CaseRecord], list[CaseRecord]]:
    rng = np.random.default_rng(seed + 1)
    protos = class_prototypes(seed=seed)
    train, test = [], []
    for label in CLASS_LABELS:
        for i in range(N_TRAIN_PER_CLASS):
            train.append(make_case(f"train-{label}-{i:02d}", label, rng, protos))
        for i in range(N_TEST_PER_CLASS):
            test.append(make_case(f"test-{label}-{i:02d}", label, rng, protos))
    return train, test


def bundled_dataset() -> Path:
    """Directory of the synthetic suite shipped with the package."""
    return Path(str(resources.files("orthodoc") / "data" / "synthetic"))


def write_dataset(directory: str | Path, seed: int = SEED) -> Path:
    """Write the whole synthetic dataset into ``directory``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    src = bundled_dataset()
    for name in ("corpus.jsonl", "lexicon.jsonl"):
        if (src / name).resolve() != (directory / name).resolve():
            shutil.copyfile(src / name, directory / name)
    train, test = make_cases(seed)
    for sub, cases in (("train", train), ("test", test)):
        (directory / sub).mkdir(exist_ok=True)
        for case in cases:
            save_case(case, directory / sub / f"{case.case_id}.json")
    return directory


if __name__ == "__main__":
    write_dataset(bundled_dataset())
