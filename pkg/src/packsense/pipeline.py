"""Corpus-level scanning and evaluation glue.

Builds detection windows for every file of a manifest role, classifies them
in cross-file batches (cheaper than per-file batching at desk scale), turns
verdict sequences into program features, fits/applies the KNN aggregator,
and scores program-level metrics.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .corpus import CorpusManifest, ManifestEntry, load_entry_image
from .detect import (KnnModel, Metrics, ProgramFeatures, ProgramLabel,
                     RegionVerdict, evaluate, extract_features,
                     verdicts_for_windows)
from .encoder import EncoderConfig
from .normalizer import detection_windows_for_image


@dataclass
class FileScan:
    entry: ManifestEntry
    verdicts: list[RegionVerdict]
    features: ProgramFeatures
    truth: ProgramLabel
    prediction: ProgramLabel | None = None


def truth_label(entry: ManifestEntry) -> ProgramLabel:
    return ProgramLabel.PACKED if entry.program_label == "packed" \
        else ProgramLabel.NONPACKED


def scan_entries(root, entries: list[ManifestEntry], params: dict,
                 config: EncoderConfig, window_units: int = 100,
                 floor_units: int = 10, batch_size: int = 16
                 ) -> list[FileScan]:
    """Window, classify and featurize each file; batching spans files."""
    all_windows = []
    counts = []
    for e in entries:
        image = load_entry_image(root, e)
        ws = detection_windows_for_image(image, window_units=window_units,
                                         floor_units=floor_units)
        all_windows.extend(ws)
        counts.append(len(ws))
    verdicts = verdicts_for_windows(all_windows, params, config,
                                    batch_size=batch_size)
    scans = []
    pos = 0
    for e, cnt in zip(entries, counts):
        vs = verdicts[pos:pos + cnt]
        pos += cnt
        scans.append(FileScan(entry=e, verdicts=vs,
                              features=extract_features(vs),
                              truth=truth_label(e)))
    return scans


def fit_knn(scans: list[FileScan], k: int = 5) -> KnnModel:
    feats = np.stack([s.features.vector for s in scans])
    labels = np.asarray([int(s.truth) for s in scans], dtype=np.int64)
    return KnnModel(k=k).fit(feats, labels)


def predict_programs(scans: list[FileScan], knn: KnnModel) -> None:
    for s in scans:
        s.prediction = knn.predict(s.features.vector) if s.verdicts else None


def score_programs(scans: list[FileScan]) -> Metrics:
    return evaluate([s.prediction for s in scans], [s.truth for s in scans])


def eval_corpus(root, manifest: CorpusManifest, params: dict,
                config: EncoderConfig, train_role: str = "finetune",
                test_role: str = "test", window_units: int = 100,
                batch_size: int = 16) -> tuple[Metrics, KnnModel,
                                               list[FileScan]]:
    """Fit the program KNN on one role's scans and score another's."""
    train_scans = scan_entries(root, manifest.role(train_role), params,
                               config, window_units=window_units,
                               batch_size=batch_size)
    knn = fit_knn(train_scans)
    test_scans = scan_entries(root, manifest.role(test_role), params, config,
                              window_units=window_units,
                              batch_size=batch_size)
    predict_programs(test_scans, knn)
    return score_programs(test_scans), knn, test_scans


def region_f1(scans: list[FileScan], root) -> dict:
    """Window-level macro metrics against manifest regions (3 classes)."""
    from .corpus import label_for_extent
    conf = np.zeros((3, 3), dtype=np.int64)
    for s in scans:
        for v in s.verdicts:
            t = int(label_for_extent(s.entry.regions, v.byte_start,
                                     v.byte_end))
            conf[t, int(v.label)] += 1
    out = {"confusion": conf.tolist()}
    f1s = []
    for c in range(3):
        tp = conf[c, c]
        fp = conf[:, c].sum() - tp
        fn = conf[c, :].sum() - tp
        prec = tp / (tp + fp) if tp + fp else 0.0
        rec = tp / (tp + fn) if tp + fn else 0.0
        f1 = 2 * prec * rec / (prec + rec) if prec + rec else 0.0
        out[f"class{c}"] = {"precision": float(prec), "recall": float(rec),
                            "f1": float(f1)}
        if conf[c, :].sum():
            f1s.append(f1)
    out["macro_f1"] = float(np.mean(f1s)) if f1s else 0.0
    out["accuracy"] = float(np.trace(conf) / conf.sum()) if conf.sum() else 0.0
    return out
