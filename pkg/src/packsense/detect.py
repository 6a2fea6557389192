"""Region and program verdicts on top of the window classifier.

scan_regions slides 100-instruction detection windows over each section and
classifies every window into Instruction / NativeData / PackedData. A
program-level decision summarizes the window verdict sequence as a fixed
32-dim feature vector (27 label-trigram fractions, 3 label fractions,
longest PackedData run fraction, transition fraction; all in [0, 1]) and
classifies it with a small KNN. Sequences shorter than three verdicts are
padded with NativeData for the trigram counts only.

The KNN deduplicates identical (feature, label) training rows, which makes
predictions invariant to duplicating the training corpus. Ties are broken
toward the smaller class index (NonPacked=0 < Packed=1).
"""

from __future__ import annotations

import enum
import hashlib
from dataclasses import dataclass, field

import numpy as np

from .binimage import BinaryImage
from .encoder import EncoderConfig, UntrainedHead, classify_windows
from .normalizer import TokenWindow, detection_windows_for_image

KNN_K = 5


class RegionLabel(enum.IntEnum):
    INSTRUCTION = 0
    NATIVE_DATA = 1
    PACKED_DATA = 2


class ProgramLabel(enum.IntEnum):
    NONPACKED = 0
    PACKED = 1


class UntrainedModel(RuntimeError):
    """scan requested with a checkpoint whose head was never fine-tuned."""


class LengthMismatch(ValueError):
    """Predictions and truth differ in length."""


class EmptyTrainingSet(ValueError):
    """KNN fit with no rows."""


@dataclass
class RegionVerdict:
    section: str | None
    byte_start: int
    byte_end: int
    va_start: int
    va_end: int
    label: RegionLabel
    probs: np.ndarray  # (3,)


@dataclass
class ProgramFeatures:
    vector: np.ndarray  # float64 (32,)
    n_windows: int


N_FEATURES = 27 + 3 + 1 + 1


def extract_features(verdicts: list[RegionVerdict] | list[RegionLabel]
                     ) -> ProgramFeatures:
    labels = [int(v.label) if isinstance(v, RegionVerdict) else int(v)
              for v in verdicts]
    n = len(labels)
    padded = labels + [int(RegionLabel.NATIVE_DATA)] * max(0, 3 - n)
    tri = np.zeros(27, dtype=np.float64)
    for a, b, c in zip(padded, padded[1:], padded[2:]):
        tri[a * 9 + b * 3 + c] += 1.0
    tri /= max(len(padded) - 2, 1)

    fracs = np.zeros(3, dtype=np.float64)
    for lab in labels:
        fracs[lab] += 1.0
    if n:
        fracs /= n

    longest = run = 0
    for lab in labels:
        run = run + 1 if lab == RegionLabel.PACKED_DATA else 0
        longest = max(longest, run)
    longest_frac = longest / n if n else 0.0

    transitions = sum(1 for a, b in zip(labels, labels[1:]) if a != b)
    trans_frac = transitions / (n - 1) if n > 1 else 0.0

    vec = np.concatenate([tri, fracs, [longest_frac], [trans_frac]])
    assert vec.shape == (N_FEATURES,)
    return ProgramFeatures(vector=vec, n_windows=n)


def scan_regions(image: BinaryImage, params: dict, config: EncoderConfig,
                 head_trained: bool = True, window_units: int = 100,
                 floor_units: int = 10, batch_size: int = 16
                 ) -> list[RegionVerdict]:
    if not head_trained:
        raise UntrainedModel("checkpoint head was never fine-tuned")
    windows = detection_windows_for_image(image, window_units=window_units,
                                          floor_units=floor_units)
    return verdicts_for_windows(windows, params, config,
                                batch_size=batch_size)


def verdicts_for_windows(windows: list[TokenWindow], params: dict,
                         config: EncoderConfig, batch_size: int = 16
                         ) -> list[RegionVerdict]:
    if not windows:
        return []
    probs = classify_windows(windows, params, config, head_trained=True,
                             batch_size=batch_size)
    out = []
    for w, p in zip(windows, probs):
        out.append(RegionVerdict(section=w.section, byte_start=w.byte_start,
                                 byte_end=w.byte_end, va_start=w.va_start,
                                 va_end=w.va_end,
                                 label=RegionLabel(int(p.argmax())),
                                 probs=p))
    return out


# ---------------------------------------------------------------------------
# program-level KNN


@dataclass
class KnnModel:
    k: int = KNN_K
    features: np.ndarray = field(
        default_factory=lambda: np.empty((0, N_FEATURES)))
    labels: np.ndarray = field(default_factory=lambda: np.empty(0, np.int64))

    def fit(self, features: np.ndarray, labels: np.ndarray) -> "KnnModel":
        features = np.asarray(features, dtype=np.float64)
        labels = np.asarray(labels, dtype=np.int64)
        if features.ndim != 2 or features.shape[0] != labels.shape[0]:
            raise ValueError("features (N,D) and labels (N,) required")
        if features.shape[0] == 0:
            raise EmptyTrainingSet("no training rows")
        # exact-duplicate rows collapse so duplicated corpora change nothing
        rows = np.concatenate([features, labels[:, None].astype(np.float64)],
                              axis=1)
        uniq = np.unique(rows, axis=0)
        self.features = uniq[:, :-1]
        self.labels = uniq[:, -1].astype(np.int64)
        return self

    def predict(self, x: np.ndarray) -> ProgramLabel:
        if self.features.shape[0] == 0:
            raise EmptyTrainingSet("model is not fitted")
        d2 = ((self.features - np.asarray(x, dtype=np.float64)) ** 2).sum(1)
        k = min(self.k, d2.shape[0])
        nearest = np.argsort(d2, kind="stable")[:k]
        votes = np.bincount(self.labels[nearest], minlength=2)
        # argmax returns the smaller index on ties
        return ProgramLabel(int(votes.argmax()))

    def predict_batch(self, xs: np.ndarray) -> list[ProgramLabel]:
        return [self.predict(x) for x in np.asarray(xs, dtype=np.float64)]

    def save(self, path) -> None:
        np.savez(path, k=self.k, features=self.features, labels=self.labels)

    @staticmethod
    def load(path) -> "KnnModel":
        with np.load(path) as z:
            return KnnModel(k=int(z["k"]), features=z["features"],
                            labels=z["labels"])


def scan_program(image: BinaryImage, params: dict, config: EncoderConfig,
                 knn: KnnModel | None = None, head_trained: bool = True,
                 window_units: int = 100, floor_units: int = 10,
                 packed_threshold: float = 0.5):
    """Full per-file scan.

    Returns (verdicts, decision or None, features, decision_source). Without
    a KNN the decision falls back to thresholding the packed-window fraction;
    with no windows at all the program stays undecided (None).
    """
    verdicts = scan_regions(image, params, config, head_trained=head_trained,
                            window_units=window_units,
                            floor_units=floor_units)
    feats = extract_features(verdicts)
    if not verdicts:
        return verdicts, None, feats, "none"
    if knn is not None:
        return verdicts, knn.predict(feats.vector), feats, "knn"
    packed_frac = float(feats.vector[27 + int(RegionLabel.PACKED_DATA)])
    decision = ProgramLabel.PACKED if packed_frac >= packed_threshold \
        else ProgramLabel.NONPACKED
    return verdicts, decision, feats, "fraction"


# ---------------------------------------------------------------------------
# metrics


@dataclass
class Metrics:
    n: int
    decided: int
    dcr: float
    accuracy: float
    precision: float
    recall: float
    f1: float
    confusion: list[list[int]]  # [truth][pred] over decided programs

    def to_json(self) -> dict:
        return {
            "n": self.n, "decided": self.decided, "dcr": self.dcr,
            "accuracy": self.accuracy, "precision": self.precision,
            "recall": self.recall, "f1": self.f1, "confusion": self.confusion,
        }


def evaluate(predictions: list[ProgramLabel | None],
             truth: list[ProgramLabel]) -> Metrics:
    """Packed-class metrics; undecided predictions lower DCR and are excluded
    from the confusion counts."""
    if len(predictions) != len(truth):
        raise LengthMismatch(
            f"{len(predictions)} predictions vs {len(truth)} truths")
    n = len(truth)
    conf = [[0, 0], [0, 0]]
    decided = 0
    for p, t in zip(predictions, truth):
        if p is None:
            continue
        decided += 1
        conf[int(t)][int(p)] += 1
    tp = conf[1][1]
    fp = conf[0][1]
    fn = conf[1][0]
    tn = conf[0][0]
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * precision * recall / (precision + recall) \
        if precision + recall else 0.0
    accuracy = (tp + tn) / decided if decided else 0.0
    return Metrics(n=n, decided=decided, dcr=decided / n if n else 0.0,
                   accuracy=accuracy, precision=precision, recall=recall,
                   f1=f1, confusion=conf)


# ---------------------------------------------------------------------------
# report


def make_report(image: BinaryImage, verdicts: list[RegionVerdict],
                decision: ProgramLabel | None, decision_source: str,
                features: ProgramFeatures, model_sha256: str | None = None,
                path: str | None = None, window_units: int = 100) -> dict:
    packed_frac = float(features.vector[27 + int(RegionLabel.PACKED_DATA)])
    return {
        "report_version": 1,
        "input": {
            "path": path,
            "sha256": hashlib.sha256(image.data).hexdigest(),
            "format": image.format.value,
            "mode": image.mode.value,
            "image_base": image.image_base,
            "sections": [
                {"name": s.name, "file_offset": s.file_offset,
                 "file_size": s.file_size,
                 "virtual_address": s.virtual_address,
                 "virtual_size": s.virtual_size}
                for s in image.sections
            ],
        },
        "scan": {
            "model_sha256": model_sha256,
            "window_units": window_units,
            "regions": [
                {"section": v.section, "byte_start": v.byte_start,
                 "byte_end": v.byte_end, "va_start": v.va_start,
                 "va_end": v.va_end, "label": v.label.name.lower(),
                 "probs": [float(x) for x in v.probs]}
                for v in verdicts
            ],
            "program": {
                "decision": decision.name.lower() if decision is not None
                else None,
                "decision_source": decision_source,
                "packed_window_fraction": packed_frac,
                "n_windows": features.n_windows,
            },
        },
    }
