"""Cross-modal attention fusion and the condition classifier head.

Text tokens attend over image patches: queries come from the text
embedding, keys and values from the patches. The attended rows are averaged
into one fused vector that a linear softmax head classifies. Training is
plain full-batch gradient descent with hand-written backpropagation.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .cases import CaseRecord, ImageFeatures
from .corpus import tokenize

CLASS_LABELS = ("fracture", "arthritis", "tumor", "dislocation", "degenerative_disease", "normal")
DEFAULT_DIM = 32
DEFAULT_PATCHES = 16
PROB_FLOOR = 1e-12
WEIGHTS_SCHEMA_VERSION = 1
PARAM_NAMES = ("w_query", "w_key", "w_value", "w_out", "b_out")


class FusionError(ValueError):
    pass


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True, eq=False)
class TextEmbedding:
    tokens: np.ndarray
    token_surfaces: tuple[str, ...]


def _token_vector(surface: str, d: int, seed: int) -> np.ndarray:
    digest = hashlib.blake2b(f"{seed}\x00{surface}".encode("utf-8"), digest_size=8).digest()
    v = np.random.default_rng(int.from_bytes(digest, "little")).standard_normal(d)
    return v / np.linalg.norm(v)


def embed_text(text: str, d: int = DEFAULT_DIM, seed: int = 0) -> TextEmbedding:
    """Hashed random projection: one fixed unit vector per (token, seed)."""
    if d < 1:
        raise FusionError("embedding dimension must be >= 1")
    surfaces = tuple(t.surface for t in tokenize(text))
    if not surfaces:
        raise FusionError("text has no tokens to embed")
    cache: dict[str, np.ndarray] = {}
    rows = []
    for s in surfaces:
        if s not in cache:
            cache[s] = _token_vector(s, d, seed)
        rows.append(cache[s])
    return TextEmbedding(np.vstack(rows), surfaces)


def softmax(v) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    if not np.all(np.isfinite(v)):
        raise FusionError("softmax input is not finite")
    e = np.exp(v - v.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


@dataclass(frozen=True, eq=False)
class FusionWeights:
    w_query: np.ndarray  # d x d
    w_key: np.ndarray  # d x d
    w_value: np.ndarray  # d x d
    w_out: np.ndarray  # d x C
    b_out: np.ndarray  # C
    class_labels: tuple[str, ...] = CLASS_LABELS
    embed_seed: int = 0

    def __post_init__(self):
        d = self.w_query.shape[0]
        c = len(self.class_labels)
        if c < 2:
            raise FusionError("need at least two classes")
        expected = {"w_query": (d, d), "w_key": (d, d), "w_value": (d, d), "w_out": (d, c), "b_out": (c,)}
        for name, shape in expected.items():
            arr = getattr(self, name)
            if arr.shape != shape:
                raise FusionError(f"{name} has shape {arr.shape}, expected {shape}")
            if not np.all(np.isfinite(arr)):
                raise FusionError(f"{name} has non-finite entries")

    @property
    def dim(self) -> int:
        return self.w_query.shape[0]

    def params(self) -> dict[str, np.ndarray]:
        return {n: getattr(self, n) for n in PARAM_NAMES}

    def replace(self, **arrays) -> "FusionWeights":
        p = self.params()
        p.update(arrays)
        return FusionWeights(**p, class_labels=self.class_labels, embed_seed=self.embed_seed)

    @classmethod
    def init(cls, d: int = DEFAULT_DIM, class_labels: Sequence[str] = CLASS_LABELS, seed: int = 0,
             embed_seed: int | None = None) -> "FusionWeights":
        rng = np.random.default_rng(seed)
        s = 1.0 / math.sqrt(d)
        c = len(class_labels)
        return cls(
            rng.uniform(-s, s, (d, d)),
            rng.uniform(-s, s, (d, d)),
            rng.uniform(-s, s, (d, d)),
            rng.uniform(-s, s, (d, c)),
            np.zeros(c),
            tuple(class_labels),
            seed if embed_seed is None else embed_seed,
        )


@dataclass(frozen=True, eq=False)
class ConditionPrediction:
    probabilities: np.ndarray
    class_labels: tuple[str, ...]

    @property
    def index(self) -> int:
        return int(np.argmax(self.probabilities))  # first maximum wins ties

    @property
    def predicted(self) -> str:
        return self.class_labels[self.index]

    @property
    def probability(self) -> float:
        return float(self.probabilities[self.index])

    def runner_up(self) -> tuple[str, float]:
        order = sorted(range(len(self.class_labels)), key=lambda i: (-self.probabilities[i], i))
        j = order[1]
        return self.class_labels[j], float(self.probabilities[j])


def attend(text: TextEmbedding, image: ImageFeatures, w: FusionWeights) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(fused, attention)`` where attention is T x P, rows summing to 1."""
    x, m = text.tokens, image.patches
    d = w.dim
    if x.shape[1] != d or m.shape[1] != d:
        raise FusionError(f"dimension mismatch: text {x.shape[1]}, image {m.shape[1]}, weights {d}")
    q = x @ w.w_query
    k = m @ w.w_key
    v = m @ w.w_value
    attn = softmax(q @ k.T / math.sqrt(d))
    return (attn @ v).mean(axis=0), attn


def cross_modal_attention(text: TextEmbedding, image: ImageFeatures, w: FusionWeights) -> np.ndarray:
    return attend(text, image, w)[0]


def classify(fused: np.ndarray, w: FusionWeights) -> ConditionPrediction:
    logits = np.asarray(fused) @ w.w_out + w.b_out
    if not np.all(np.isfinite(logits)):
        raise FusionError("classifier logits are not finite")
    return ConditionPrediction(softmax(logits), w.class_labels)


def loss(prediction: ConditionPrediction, true_label: int | str) -> float:
    """Cross-entropy of the true class, with probability floored at 1e-12."""
    idx = _label_index(true_label, prediction.class_labels)
    return -math.log(max(float(prediction.probabilities[idx]), PROB_FLOOR))


def _label_index(label: int | str, labels: Sequence[str]) -> int:
    if isinstance(label, str):
        if label not in labels:
            raise FusionError(f"unknown class label {label!r}")
        return labels.index(label)
    if not 0 <= label < len(labels):
        raise FusionError(f"class index {label} out of range")
    return int(label)


@dataclass(frozen=True, eq=False)
class Example:
    text: TextEmbedding
    image: ImageFeatures
    label: int


def make_examples(cases: Sequence[CaseRecord], w: FusionWeights, labels: Sequence[str] | None = None) -> list[Example]:
    """Embed case texts; ``labels`` default to each case's ground truth."""
    out = []
    for i, case in enumerate(cases):
        label = labels[i] if labels is not None else case.ground_truth
        if label is None:
            raise FusionError(f"case {case.case_id} has no label")
        out.append(Example(embed_text(case.text, w.dim, w.embed_seed), case.image,
                           _label_index(label, w.class_labels)))
    return out


def predict(case: CaseRecord, w: FusionWeights) -> ConditionPrediction:
    text = embed_text(case.text, w.dim, w.embed_seed)
    return classify(cross_modal_attention(text, case.image, w), w)


def loss_and_grads(w: FusionWeights, batch: Sequence[Example]) -> tuple[float, dict[str, np.ndarray]]:
    """Mean cross-entropy over ``batch`` and its gradient for every parameter."""
    if not batch:
        raise FusionError("empty batch")
    d = w.dim
    scale = 1.0 / math.sqrt(d)
    grads = {n: np.zeros_like(a) for n, a in w.params().items()}
    total = 0.0
    for ex in batch:
        x, m = ex.text.tokens, ex.image.patches
        q, k, v = x @ w.w_query, m @ w.w_key, m @ w.w_value
        attn = softmax(q @ k.T * scale)
        fused = (attn @ v).mean(axis=0)
        probs = softmax(fused @ w.w_out + w.b_out)
        p_true = probs[ex.label]
        total += -math.log(max(p_true, PROB_FLOOR))
        if p_true < PROB_FLOOR:
            continue  # clamped region: loss is flat
        d_logits = probs.copy()
        d_logits[ex.label] -= 1.0
        grads["w_out"] += np.outer(fused, d_logits)
        grads["b_out"] += d_logits
        d_fused = w.w_out @ d_logits
        d_h = np.broadcast_to(d_fused / x.shape[0], (x.shape[0], d))
        d_attn = d_h @ v.T
        d_v = attn.T @ d_h
        d_scores = attn * (d_attn - (d_attn * attn).sum(axis=1, keepdims=True)) * scale
        grads["w_query"] += x.T @ (d_scores @ k)
        grads["w_key"] += m.T @ (d_scores.T @ q)
        grads["w_value"] += m.T @ d_v
    n = len(batch)
    return total / n, {name: g / n for name, g in grads.items()}


def mean_loss(w: FusionWeights, batch: Sequence[Example]) -> float:
    total = 0.0
    for ex in batch:
        total += loss(classify(cross_modal_attention(ex.text, ex.image, w), w), ex.label)
    return total / len(batch)


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 0.5
    epochs: int = 200
    seed: int = 0
    d: int = DEFAULT_DIM
    class_labels: tuple[str, ...] = CLASS_LABELS


def train_head(cases: Sequence[CaseRecord], config: TrainConfig = TrainConfig(),
               labels: Sequence[str] | None = None) -> tuple[FusionWeights, list[float]]:
    """Full-batch gradient descent on attention projections and the head.

    The embedder is frozen. Returns the trained weights and a loss trace
    with ``epochs + 1`` entries: the initial loss, then the loss after each
    update.
    """
    if not cases:
        raise FusionError("training set is empty")
    w = FusionWeights.init(config.d, config.class_labels, config.seed)
    batch = make_examples(cases, w, labels)
    trace = []
    for epoch in range(config.epochs + 1):
        try:
            with np.errstate(over="ignore", invalid="ignore"):
                value, grads = loss_and_grads(w, batch)
        except FusionError as exc:
            raise TrainingDiverged(f"training diverged at epoch {epoch} (lr={config.lr}): {exc}") from exc
        if not math.isfinite(value):
            raise TrainingDiverged(f"loss became non-finite at epoch {epoch} (lr={config.lr})")
        trace.append(value)
        if epoch == config.epochs:
            break
        if config.lr:
            with np.errstate(over="ignore", invalid="ignore"):
                updated = {n: a - config.lr * grads[n] for n, a in w.params().items()}
            if not all(np.all(np.isfinite(a)) for a in updated.values()):
                raise TrainingDiverged(f"weights became non-finite at epoch {epoch} (lr={config.lr})")
            w = w.replace(**updated)
    return w, trace


def accuracy(w: FusionWeights, batch: Sequence[Example]) -> float:
    hits = sum(classify(cross_modal_attention(ex.text, ex.image, w), w).index == ex.label for ex in batch)
    return hits / len(batch)


GradientFn = Callable[[FusionWeights, Sequence[Example]], dict[str, np.ndarray]]


def numerical_gradient_check(w: FusionWeights, batch: Sequence[Example], eps: float = 1e-5,
                             n_coords: int = 50, seed: int = 0,
                             gradient: GradientFn | None = None) -> float:
    """Max relative error between analytic and central-difference gradients.

    At least ``n_coords`` coordinates are sampled (seeded), spread evenly
    over the five parameter arrays so that small arrays such as the bias
    are always represented. Relative error uses the denominator
    ``max(|analytic|, |numeric|, 1e-8)``.
    """
    if not 1e-7 <= eps <= 1e-3:
        raise FusionError("eps must lie in [1e-7, 1e-3]")
    analytic = gradient(w, batch) if gradient is not None else loss_and_grads(w, batch)[1]
    rng = np.random.default_rng(seed)
    per_param = max(1, math.ceil(n_coords / len(PARAM_NAMES)))
    worst = 0.0
    params = w.params()
    for name in PARAM_NAMES:
        arr = params[name]
        picks = rng.choice(arr.size, size=min(per_param, arr.size), replace=False)
        for flat in picks:
            idx = np.unravel_index(flat, arr.shape)
            plus, minus = arr.copy(), arr.copy()
            plus[idx] += eps
            minus[idx] -= eps
            numeric = (mean_loss(w.replace(**{name: plus}), batch)
                       - mean_loss(w.replace(**{name: minus}), batch)) / (2 * eps)
            a = float(analytic[name][idx])
            err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
            worst = max(worst, err)
    return worst


def weights_to_dict(w: FusionWeights) -> dict:
    return {
        "schema": "orthodoc.fusion-weights",
        "version": WEIGHTS_SCHEMA_VERSION,
        "class_labels": list(w.class_labels),
        "embed_seed": w.embed_seed,
        "dim": w.dim,
        **{n: a.tolist() for n, a in w.params().items()},
    }


def save_weights(w: FusionWeights, path: str | Path) -> None:
    Path(path).write_text(json.dumps(weights_to_dict(w), sort_keys=True) + "\n", encoding="utf-8")


def load_weights(path: str | Path) -> FusionWeights:
    path = Path(path)
    if not path.is_file():
        raise FusionError(f"weights file not found: {path}")
    obj = json.loads(path.read_text(encoding="utf-8"))
    if obj.get("schema") != "orthodoc.fusion-weights" or obj.get("version") != WEIGHTS_SCHEMA_VERSION:
        raise FusionError(f"{path}: unsupported weights schema")
    return FusionWeights(
        **{n: np.asarray(obj[n], dtype=np.float64) for n in PARAM_NAMES},
        class_labels=tuple(obj["class_labels"]),
        embed_seed=int(obj["embed_seed"]),
    )
