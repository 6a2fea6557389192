"""Acceptance suite.

One test per acceptance criterion, in order; `pytest -v` prints one pass/fail
line per criterion. Criteria 7-9 share one end-to-end pipeline run (about
twenty minutes on one core, executed twice to prove the determinism chain);
everything else is oracle- or property-based and runs in seconds.
"""

import math
import time
from collections import Counter

import numpy as np
import pytest

from packsense.binimage import AddressRange, Mode, load_image
from packsense.corpus import (CodeSampler, generate_corpus, labeled_windows,
                              pretrain_windows, split_check)
from packsense.detect import KnnModel, ProgramLabel
from packsense.disasm import sweep_bytes
from packsense.encoder import (EncoderConfig, Hyper, grad_check, init_params,
                               pad_batch, save_checkpoint, train_finetune,
                               train_pretrain)
from packsense.lowentropy import (FILE_THRESHOLD, Granularity, Scheme,
                                  TransformSpec, entropy_detect, profile_image,
                                  random_spec, shannon_entropy, transform,
                                  invert_transform)
from packsense.normalizer import (CLS_MNEMONIC, CLS_STRUCTURAL,
                                  build_vocabulary, normalize_unit,
                                  windowize_tokens)
from packsense.pipeline import eval_corpus, region_f1
from packsense.simlm import Action, derive_mask_rng, plan_mask
from packsense.detect import N_FEATURES

VALID_64K = AddressRange(((0x400000, 0x410000),))
VALID_1M = AddressRange(((0x400000, 0x500000),))


def binary_f1(tp, fp, fn):
    denom = 2 * tp + fp + fn
    return 2 * tp / denom if denom else 0.0


# ---------------------------------------------------------------------------
# criterion 1: entropy oracle equivalence


def entropy_oracle(buf: bytes) -> float:
    if not buf:
        return 0.0
    n = len(buf)
    h = 0.0
    for count in Counter(buf).values():
        p = count / n
        h -= p * math.log2(p)
    return h


def test_criterion_01_entropy_oracle():
    t0 = time.perf_counter()
    rng = np.random.default_rng(101)
    worst = 0.0
    for _ in range(10_000):
        n = int(rng.integers(0, 2049))
        buf = rng.integers(0, 256, size=n, dtype=np.uint8).tobytes()
        got = shannon_entropy(buf)
        worst = max(worst, abs(got - entropy_oracle(buf)))
        assert 0.0 <= got <= 8.0
    assert worst < 1e-9
    assert shannon_entropy(bytes(range(256)) * 16) == 8.0
    assert shannon_entropy(b"\x42" * 4096) == 0.0
    elapsed = time.perf_counter() - t0
    assert elapsed < 10.0
    print(f"criterion 1 PASS: max |diff| {worst:.2e} over 1e4 buffers, "
          f"{elapsed:.1f}s")


# ---------------------------------------------------------------------------
# criterion 2: low-entropy transform invariants


def test_criterion_02_transform_invariants():
    t0 = time.perf_counter()
    rng = np.random.default_rng(202)

    for scheme in (Scheme.MONO_SUB, Scheme.TRANSPOSITION):
        for _ in range(60):
            data = rng.integers(0, 256, size=int(rng.integers(256, 4097)),
                                dtype=np.uint8).tobytes()
            out, _ = transform(data, random_spec(scheme, rng))
            hin = np.bincount(np.frombuffer(data, np.uint8), minlength=256)
            hout = np.bincount(np.frombuffer(out, np.uint8), minlength=256)
            # identical count multisets imply identical entropy; the float
            # API may differ by summation order only
            assert sorted(hin) == sorted(hout)
            assert abs(shannon_entropy(out) - shannon_entropy(data)) < 1e-12

    for alphabet, bound in (("base64", 6.0), ("base32", 5.0)):
        spec = TransformSpec(Scheme.ENCODING, {"alphabet": alphabet})
        for _ in range(30):
            data = rng.integers(0, 256, size=int(rng.integers(1024, 8193)),
                                dtype=np.uint8).tobytes()
            out, _ = transform(data, spec)
            assert shannon_entropy(out) <= bound

    for scheme in Scheme:
        for _ in range(30):
            data = rng.integers(0, 256, size=int(rng.integers(64, 4097)),
                                dtype=np.uint8).tobytes()
            spec = random_spec(scheme, rng)
            out, meta = transform(data, spec)
            assert invert_transform(out, meta) == data

    elapsed = time.perf_counter() - t0
    assert elapsed < 30.0
    print(f"criterion 2 PASS: entropy preserved, encodings bounded, "
          f"5 schemes roundtrip, {elapsed:.1f}s")


# ---------------------------------------------------------------------------
# criterion 3: entropy-baseline failure on low-entropy packing


def test_criterion_03_baseline_failure(tmp_path):
    t0 = time.perf_counter()
    root = tmp_path / "lowpack"
    manifest = generate_corpus(root, {"test": 200}, seed=303,
                               packed_schemes=("mono_sub", "transposition"),
                               packed_fraction={"test": 1.0})
    assert len(manifest.entries) == 200
    assert all(e.program_label == "packed" for e in manifest.entries)
    assert all(e.transform["scheme"] in ("mono_sub", "transposition")
               for e in manifest.entries)
    flagged = 0
    for e in manifest.entries:
        image = load_image((root / e.path).read_bytes())
        profile = profile_image(image, Granularity.FILE)
        assert len(profile.values) == 1
        assert profile.values[0] < 7.0   # premise: whole file stays sub-7.0
        verdict = entropy_detect(profile, threshold=FILE_THRESHOLD)
        flagged += int(verdict.packed)
    recall = flagged / len(manifest.entries)
    assert recall == 0.0
    elapsed = time.perf_counter() - t0
    assert elapsed < 60.0
    print(f"criterion 3 PASS: baseline recall {recall:.2f} on 200 packed "
          f"files at threshold {FILE_THRESHOLD}, {elapsed:.1f}s")


# ---------------------------------------------------------------------------
# criterion 4: masking statistics over 1e4 plans


def window_structure_oracle(window):
    """Independent re-derivation of span heads/components and maskables."""
    vocab = build_vocabulary()
    classes = np.array([vocab.class_of(int(t)) for t in window.ids])
    spans = []
    for lo, hi in window.instr_spans:
        head = next((p for p in range(lo, hi - 1)
                     if classes[p] == CLS_MNEMONIC), None)
        spans.append((lo, hi, head))
    return classes, spans


def test_criterion_04_masking_statistics():
    t0 = time.perf_counter()
    rng = np.random.default_rng(404)
    code = CodeSampler(rng, region_len=30000).emit(30000)
    units = sweep_bytes(code, Mode.X86_32, base_va=0x400000)
    windows = windowize_tokens(units, VALID_1M)
    struct = [window_structure_oracle(w) for w in windows]
    maskable_counts = [int((cls != CLS_STRUCTURAL).sum())
                       for cls, _ in struct]

    n_plans = 0
    selected = 0
    maskable_total = 0
    action_counts = {Action.MASK: 0, Action.RANDOMIZE: 0, Action.KEEP: 0}
    violations = 0
    epoch = 0
    while n_plans < 10_000:
        for i, w in enumerate(windows):
            if n_plans == 10_000:
                break
            plan = plan_mask(w, derive_mask_rng(13, epoch, i))
            n_plans += 1
            selected += plan.positions.size
            maskable_total += maskable_counts[i]
            for act in plan.actions:
                action_counts[act] += 1
            classes, spans = struct[i]
            chosen = set(int(p) for p in plan.positions)
            if any(classes[p] == CLS_STRUCTURAL for p in chosen):
                violations += 1
            for lo, hi, head in spans:
                if head is None or head not in chosen:
                    continue
                if any(head < p < hi - 1 for p in chosen):
                    violations += 1
        epoch += 1

    sel_frac = selected / maskable_total
    fracs = {a: c / selected for a, c in action_counts.items()}
    assert 0.19 <= sel_frac <= 0.21
    assert abs(fracs[Action.MASK] - 0.40) <= 0.02
    assert abs(fracs[Action.RANDOMIZE] - 0.50) <= 0.02
    assert abs(fracs[Action.KEEP] - 0.10) <= 0.02
    assert violations == 0
    elapsed = time.perf_counter() - t0
    assert elapsed < 30.0
    print(f"criterion 4 PASS: selected {sel_frac:.4f}, actions "
          f"{fracs[Action.MASK]:.3f}/{fracs[Action.RANDOMIZE]:.3f}/"
          f"{fracs[Action.KEEP]:.3f}, 0 violations, {elapsed:.1f}s")


# ---------------------------------------------------------------------------
# criterion 5: gradient correctness


def test_criterion_05_gradient_check():
    t0 = time.perf_counter()
    config = EncoderConfig(n_layers=2, n_heads=2, d_model=16, d_ffn=32,
                           max_seq=32)
    params = init_params(config, seed=505)
    rng = np.random.default_rng(506)
    V = config.resolved_vocab()
    seqs = [rng.integers(0, V, size=n).astype(np.int32) for n in (12, 9)]
    ids, mask = pad_batch(seqs)

    targets = np.full(ids.shape, -1, dtype=np.int32)
    for bi, n in enumerate((12, 9)):
        for pos in rng.choice(n, size=3, replace=False):
            targets[bi, pos] = int(rng.integers(0, V))
    err_mlm = grad_check(params, config,
                         {"ids": ids, "mask": mask, "targets": targets},
                         head="mlm", samples_per_tensor=4, seed=1)
    err_cls = grad_check(params, config,
                         {"ids": ids, "mask": mask,
                          "labels": np.array([0, 2])},
                         head="cls", samples_per_tensor=4, seed=2)
    assert err_mlm < 1e-4
    assert err_cls < 1e-4
    elapsed = time.perf_counter() - t0
    assert elapsed < 120.0
    print(f"criterion 5 PASS: max rel err mlm {err_mlm:.2e}, "
          f"cls {err_cls:.2e}, {elapsed:.1f}s")


# ---------------------------------------------------------------------------
# criterion 6: normalization conformance


def texts_of(data, va, valid):
    units = sweep_bytes(data, Mode.X86_32, base_va=va)
    vocab = build_vocabulary()
    out = []
    for u in units:
        out.append([vocab.text_of(t.id) for t in normalize_unit(u, valid)])
    return out


def test_criterion_06_normalization_conformance():
    t0 = time.perf_counter()

    # small immediate collapses to [const]
    assert texts_of(b"\x83\xc0\x01", 0x401000, VALID_64K) == \
        [["add", "eax", "[const]", "[EOS]"]]
    # huge register-relative displacement is abnormal
    assert texts_of(b"\x8b\x80\xe7\xe8\xd7\xf9", 0x401000, VALID_64K) == \
        [["mov", "eax", "eax", "[const_abnormal]", "[EOS]"]]
    # branch target containment splits [mem_normal] / [mem_abnormal]
    assert texts_of(b"\xe8\x00\x00\x00\x00", 0x401000, VALID_64K) == \
        [["call", "[mem_normal]", "[EOS]"]]
    assert texts_of(b"\xe8\xfb\xff\x0f\x00", 0x400000, VALID_64K) == \
        [["call", "[mem_abnormal]", "[EOS]"]]
    # a lone zero byte cannot decode and becomes benign padding
    assert texts_of(b"\x00", 0x401000, VALID_64K) == \
        [["[pad_normal]", "[EOS]"]]

    rng = np.random.default_rng(606)
    vocab_size = len(build_vocabulary())
    total = 0
    for mode in (Mode.X86_32, Mode.X86_64):
        data = rng.integers(0, 256, size=500_000, dtype=np.uint8).tobytes()
        units = sweep_bytes(data, mode, base_va=0x400000)
        for u in units:
            for tok in normalize_unit(u, VALID_1M):
                assert 0 <= tok.id < vocab_size
                total += 1
    elapsed = time.perf_counter() - t0
    assert elapsed < 60.0
    print(f"criterion 6 PASS: worked cases ok, {total} tokens from 1e6 "
          f"fuzz bytes all in-vocabulary, {elapsed:.1f}s")


# ---------------------------------------------------------------------------
# criteria 7-9: desk-scale end-to-end, aggregation, determinism


RECIPE = {
    "counts": {"pretrain": 300, "finetune": 200, "test": 200},
    "corpus_seed": 42,
    "pretrain_hyper": dict(epochs=2, batch_size=8, lr=1e-4, seed=7),
    "finetune_hyper": dict(epochs=3, batch_size=8, lr=1e-4, seed=7),
}


def run_pipeline(workdir):
    """Corpus -> pretrain -> finetune -> evaluate, fully seeded."""
    t0 = time.perf_counter()
    root = workdir / "corpus"
    manifest = generate_corpus(root, RECIPE["counts"],
                               seed=RECIPE["corpus_seed"])
    violations = split_check(manifest)

    config = EncoderConfig()   # the 4-layer model
    pw = pretrain_windows(root, manifest.role("pretrain"))
    pre = train_pretrain(pw, config, Hyper(**RECIPE["pretrain_hyper"]))
    pre_sha = save_checkpoint(workdir / "pre.palm", pre.params, config,
                              head_trained=False)
    fw = labeled_windows(root, manifest.role("finetune"))
    fine = train_finetune(fw, pre.params, config,
                          Hyper(**RECIPE["finetune_hyper"]))
    fine_sha = save_checkpoint(workdir / "fine.palm", fine.params, config,
                               head_trained=True)

    metrics, knn, scans = eval_corpus(root, manifest, fine.params, config)
    region = region_f1(scans, root)

    adv = [s for s in scans if s.entry.transform and
           s.entry.transform.get("scheme") in ("mono_sub", "transposition")]
    adv_hits = sum(1 for s in adv if s.prediction is ProgramLabel.PACKED)
    return {
        "root": root,
        "manifest": manifest,
        "violations": violations,
        "pre_history": pre.history,
        "fine_history": fine.history,
        "pre_sha": pre_sha,
        "fine_sha": fine_sha,
        "program": metrics.to_json(),
        "region": region,
        "knn": knn,
        "scans": scans,
        "adv_n": len(adv),
        "adv_hits": adv_hits,
        "elapsed": time.perf_counter() - t0,
    }


@pytest.fixture(scope="module")
def e2e(tmp_path_factory):
    return run_pipeline(tmp_path_factory.mktemp("e2e"))


def test_criterion_07_desk_scale_end_to_end(e2e):
    counts = RECIPE["counts"]
    assert counts["pretrain"] + counts["finetune"] == 500
    assert counts["test"] == 200
    assert e2e["violations"] == []

    conf = np.array(e2e["region"]["confusion"])
    instr_f1 = binary_f1(tp=conf[0, 0], fp=conf[1, 0] + conf[2, 0],
                         fn=conf[0, 1] + conf[0, 2])
    packed_f1 = binary_f1(tp=conf[2, 2], fp=conf[1, 2], fn=conf[2, 1])
    assert instr_f1 >= 0.90
    assert packed_f1 >= 0.80

    assert e2e["adv_n"] > 0
    adv_recall = e2e["adv_hits"] / e2e["adv_n"]
    assert adv_recall >= 0.80

    # same files, entropy baseline at the file threshold: zero recall
    baseline_hits = 0
    for s in e2e["scans"]:
        if not (s.entry.transform and s.entry.transform.get("scheme")
                in ("mono_sub", "transposition")):
            continue
        image = load_image((e2e["root"] / s.entry.path).read_bytes())
        verdict = entropy_detect(profile_image(image, Granularity.FILE),
                                 threshold=FILE_THRESHOLD)
        baseline_hits += int(verdict.packed)
    assert baseline_hits == 0

    assert e2e["elapsed"] < 1800.0
    print(f"criterion 7 PASS: instruction-vs-pseudo F1 {instr_f1:.4f}, "
          f"packed-vs-native F1 {packed_f1:.4f}, adversarial recall "
          f"{e2e['adv_hits']}/{e2e['adv_n']} (baseline 0/{e2e['adv_n']}), "
          f"{e2e['elapsed']:.0f}s")


def knn_bruteforce(features, labels, query, k):
    d2 = ((features - query) ** 2).sum(1)
    order = np.argsort(d2, kind="stable")[:min(k, len(d2))]
    votes = np.bincount(labels[order], minlength=2)
    return int(votes.argmax())


def test_criterion_08_program_aggregation(e2e):
    t0 = time.perf_counter()
    accuracy = e2e["program"]["accuracy"]
    assert e2e["program"]["n"] == 200
    assert accuracy >= 0.90

    knn: KnnModel = e2e["knn"]
    rng = np.random.default_rng(808)
    mismatches = 0
    for _ in range(100):
        q = rng.random(N_FEATURES)
        want = knn_bruteforce(knn.features, knn.labels, q, knn.k)
        if int(knn.predict(q)) != want:
            mismatches += 1
    assert mismatches == 0
    elapsed = time.perf_counter() - t0
    assert elapsed < 120.0
    print(f"criterion 8 PASS: program accuracy {accuracy:.3f}, "
          f"oracle matches 100/100, {elapsed:.1f}s")


def assert_tree_close(a, b, tol=1e-6, path="$"):
    if isinstance(a, dict):
        assert isinstance(b, dict) and sorted(a) == sorted(b), path
        for key in a:
            assert_tree_close(a[key], b[key], tol, f"{path}.{key}")
    elif isinstance(a, (list, tuple)):
        assert len(a) == len(b), path
        for i, (x, y) in enumerate(zip(a, b)):
            assert_tree_close(x, y, tol, f"{path}[{i}]")
    elif isinstance(a, float):
        assert abs(a - b) <= tol, f"{path}: {a} vs {b}"
    else:
        assert a == b, f"{path}: {a} vs {b}"


def test_criterion_09_determinism_chain(e2e, tmp_path_factory):
    rerun = run_pipeline(tmp_path_factory.mktemp("e2e_rerun"))
    assert rerun["pre_sha"] == e2e["pre_sha"]
    assert rerun["fine_sha"] == e2e["fine_sha"]
    assert_tree_close(rerun["pre_history"], e2e["pre_history"])
    assert_tree_close(rerun["fine_history"], e2e["fine_history"])
    assert_tree_close(rerun["program"], e2e["program"])
    assert_tree_close(rerun["region"], e2e["region"])
    assert rerun["adv_hits"] == e2e["adv_hits"]
    assert rerun["violations"] == e2e["violations"] == []
    assert [e.sha256 for e in rerun["manifest"].entries] == \
        [e.sha256 for e in e2e["manifest"].entries]
    assert rerun["elapsed"] < 1800.0
    print(f"criterion 9 PASS: checkpoint {rerun['fine_sha'][:16]} and all "
          f"metrics reproduced, {rerun['elapsed']:.0f}s")


# ---------------------------------------------------------------------------
# criterion 10: sweep tiling and totality


def test_criterion_10_tiling_totality():
    t0 = time.perf_counter()
    rng = np.random.default_rng(1010)
    sizes = np.concatenate([
        rng.integers(1, 513, size=9899),
        rng.integers(513, 8193, size=100),
        [65536],
    ])
    assert sizes.size == 10_000 and sizes.max() == 65536
    for i, n in enumerate(sizes):
        buf = rng.integers(0, 256, size=int(n), dtype=np.uint8).tobytes()
        mode = Mode.X86_32 if i % 2 == 0 else Mode.X86_64
        units = sweep_bytes(buf, mode)
        offs = np.fromiter((u.offset for u in units), dtype=np.int64,
                           count=len(units))
        lens = np.fromiter((u.length for u in units), dtype=np.int64,
                           count=len(units))
        assert offs[0] == 0
        assert np.all(lens >= 1)
        assert np.array_equal(offs[1:], (offs + lens)[:-1])
        assert offs[-1] + lens[-1] == len(buf)
    elapsed = time.perf_counter() - t0
    assert elapsed < 60.0
    print(f"criterion 10 PASS: 1e4 buffers tiled with zero gaps/overlaps, "
          f"{elapsed:.1f}s")
