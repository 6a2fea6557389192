"""Region/program verdict tests.

Feature vectors are checked against values worked out by hand; the KNN is
checked against a brute-force oracle that re-derives the dedup + stable
nearest-neighbour rule from scratch.
"""

import numpy as np
import pytest

from packsense.binimage import load_image
from packsense.corpus import CodeSampler
from packsense.detect import (KNN_K, N_FEATURES, EmptyTrainingSet, KnnModel,
                              LengthMismatch, Metrics, ProgramLabel,
                              RegionLabel, RegionVerdict, UntrainedModel,
                              evaluate, extract_features, make_report,
                              scan_program, scan_regions)
from packsense.encoder import EncoderConfig, init_params

I = int(RegionLabel.INSTRUCTION)
D = int(RegionLabel.NATIVE_DATA)
P = int(RegionLabel.PACKED_DATA)

CFG = EncoderConfig(n_layers=1, n_heads=2, d_model=8, d_ffn=16, max_seq=512)


class TestFeatures:
    def test_width_constant(self):
        assert N_FEATURES == 32
        assert extract_features([I, D, P]).vector.shape == (32,)

    def test_hand_computed_six_windows(self):
        f = extract_features([I, I, P, P, P, D])
        v = f.vector
        assert f.n_windows == 6
        tri = np.zeros(27)
        tri[I * 9 + I * 3 + P] = 0.25
        tri[I * 9 + P * 3 + P] = 0.25
        tri[P * 9 + P * 3 + P] = 0.25
        tri[P * 9 + P * 3 + D] = 0.25
        assert np.array_equal(v[:27], tri)
        assert np.allclose(v[27:30], [2 / 6, 1 / 6, 3 / 6])
        assert v[30] == 0.5          # longest packed run 3 of 6
        assert v[31] == pytest.approx(2 / 5)   # 2 label changes in 5 steps

    def test_hand_computed_single_window(self):
        v = extract_features([P]).vector
        tri = np.zeros(27)
        tri[P * 9 + D * 3 + D] = 1.0  # padded with NativeData
        assert np.array_equal(v[:27], tri)
        assert np.array_equal(v[27:30], [0.0, 0.0, 1.0])
        assert v[30] == 1.0 and v[31] == 0.0

    def test_hand_computed_two_windows(self):
        v = extract_features([I, P]).vector
        tri = np.zeros(27)
        tri[I * 9 + P * 3 + D] = 1.0
        assert np.array_equal(v[:27], tri)
        assert np.allclose(v[27:30], [0.5, 0.0, 0.5])
        assert v[30] == 0.5 and v[31] == 1.0

    def test_empty_sequence(self):
        f = extract_features([])
        v = f.vector
        assert f.n_windows == 0
        tri = np.zeros(27)
        tri[D * 9 + D * 3 + D] = 1.0
        assert np.array_equal(v[:27], tri)
        assert np.array_equal(v[27:], [0.0, 0.0, 0.0, 0.0, 0.0])

    def test_bounds_and_sums(self):
        rng = np.random.default_rng(3)
        for _ in range(50):
            labs = list(rng.integers(0, 3, size=rng.integers(1, 40)))
            v = extract_features(labs).vector
            assert np.all(v >= 0.0) and np.all(v <= 1.0)
            assert v[:27].sum() == pytest.approx(1.0)
            assert v[27:30].sum() == pytest.approx(1.0)

    def test_accepts_verdicts(self):
        verds = [RegionVerdict(section=None, byte_start=0, byte_end=1,
                               va_start=0, va_end=1,
                               label=RegionLabel(lab),
                               probs=np.eye(3)[lab])
                 for lab in (I, P, P)]
        assert np.array_equal(extract_features(verds).vector,
                              extract_features([I, P, P]).vector)


def knn_oracle(train_x, train_y, query, k):
    rows = np.concatenate([train_x, train_y[:, None].astype(float)], axis=1)
    uniq = np.unique(rows, axis=0)
    fx, fy = uniq[:, :-1], uniq[:, -1].astype(int)
    d2 = ((fx - query) ** 2).sum(1)
    order = np.argsort(d2, kind="stable")[:min(k, len(d2))]
    votes = np.bincount(fy[order], minlength=2)
    return int(votes.argmax())


class TestKnn:
    def test_matches_bruteforce_oracle(self):
        rng = np.random.default_rng(17)
        # low-resolution grid features force distance and row ties
        train_x = np.round(rng.random((40, N_FEATURES)) * 2) / 2
        train_y = rng.integers(0, 2, size=40)
        model = KnnModel().fit(train_x, train_y)
        queries = np.round(rng.random((100, N_FEATURES)) * 2) / 2
        for q in queries:
            assert int(model.predict(q)) == knn_oracle(train_x, train_y,
                                                       q, KNN_K)

    def test_vote_tie_prefers_nonpacked(self):
        x = np.zeros((4, 3))
        x[0, 0] = 1.0
        x[1, 0] = 2.0
        x[2, 0] = 3.0
        x[3, 0] = 4.0
        y = np.array([1, 0, 1, 0])
        model = KnnModel().fit(x, y)   # k=min(5,4)=4 -> 2v2 tie
        assert model.predict(np.zeros(3)) is ProgramLabel.NONPACKED

    def test_duplication_invariance(self):
        rng = np.random.default_rng(23)
        x = rng.random((15, N_FEATURES))
        y = rng.integers(0, 2, size=15)
        a = KnnModel().fit(x, y)
        b = KnnModel().fit(np.concatenate([x, x, x]),
                           np.concatenate([y, y, y]))
        assert np.array_equal(a.features, b.features)
        assert np.array_equal(a.labels, b.labels)
        for q in rng.random((20, N_FEATURES)):
            assert a.predict(q) == b.predict(q)

    def test_fewer_rows_than_k(self):
        model = KnnModel().fit(np.array([[0.0], [1.0]]), np.array([1, 1]))
        assert model.predict(np.array([5.0])) is ProgramLabel.PACKED

    def test_empty_and_shape_errors(self):
        with pytest.raises(EmptyTrainingSet):
            KnnModel().fit(np.empty((0, 4)), np.empty(0, dtype=int))
        with pytest.raises(EmptyTrainingSet):
            KnnModel().predict(np.zeros(4))
        with pytest.raises(ValueError):
            KnnModel().fit(np.zeros((3, 4)), np.zeros(2, dtype=int))

    def test_save_load_roundtrip(self, tmp_path):
        rng = np.random.default_rng(29)
        model = KnnModel().fit(rng.random((12, N_FEATURES)),
                               rng.integers(0, 2, size=12))
        path = tmp_path / "knn.npz"
        model.save(path)
        back = KnnModel.load(path)
        assert back.k == model.k
        assert np.array_equal(back.features, model.features)
        assert np.array_equal(back.labels, model.labels)
        q = rng.random(N_FEATURES)
        assert back.predict(q) == model.predict(q)


class TestEvaluate:
    def test_hand_computed_metrics(self):
        truth = [ProgramLabel(t) for t in (1, 1, 0, 0, 1)]
        preds = [ProgramLabel(1), ProgramLabel(0), ProgramLabel(0),
                 ProgramLabel(1), None]
        m = evaluate(preds, truth)
        assert m.n == 5 and m.decided == 4
        assert m.dcr == pytest.approx(0.8)
        assert m.confusion == [[1, 1], [1, 1]]
        assert m.precision == pytest.approx(0.5)
        assert m.recall == pytest.approx(0.5)
        assert m.f1 == pytest.approx(0.5)
        assert m.accuracy == pytest.approx(0.5)

    def test_perfect_and_empty(self):
        truth = [ProgramLabel(1), ProgramLabel(0)]
        m = evaluate(list(truth), truth)
        assert (m.dcr, m.accuracy, m.precision, m.recall, m.f1) == \
            (1.0, 1.0, 1.0, 1.0, 1.0)
        z = evaluate([], [])
        assert z.n == 0 and z.dcr == 0.0

    def test_length_mismatch(self):
        with pytest.raises(LengthMismatch):
            evaluate([None], [])

    def test_to_json_fields(self):
        m = evaluate([ProgramLabel(1)], [ProgramLabel(1)])
        j = m.to_json()
        assert set(j) == {"n", "decided", "dcr", "accuracy", "precision",
                          "recall", "f1", "confusion"}
        assert isinstance(m, Metrics)


@pytest.fixture(scope="module")
def raw_image():
    rng = np.random.default_rng(41)
    code = CodeSampler(rng, region_len=4096).emit(4096)
    return load_image(code)


class TestScan:
    def test_untrained_head_rejected(self, raw_image):
        with pytest.raises(UntrainedModel):
            scan_regions(raw_image, init_params(CFG), CFG,
                         head_trained=False)

    def test_verdict_extents_cover_sections(self, raw_image):
        verdicts = scan_regions(raw_image, init_params(CFG), CFG)
        assert verdicts
        for v in verdicts:
            assert 0 <= v.byte_start < v.byte_end <= len(raw_image.data)
            assert v.label in (RegionLabel.INSTRUCTION,
                               RegionLabel.NATIVE_DATA,
                               RegionLabel.PACKED_DATA)
            assert v.probs.shape == (3,)
            assert int(v.probs.argmax()) == int(v.label)

    def test_fraction_fallback_decision(self, raw_image):
        params = init_params(CFG)
        verdicts, decision, feats, source = scan_program(
            raw_image, params, CFG, knn=None)
        assert source == "fraction"
        packed_frac = feats.vector[27 + P]
        want = ProgramLabel.PACKED if packed_frac >= 0.5 \
            else ProgramLabel.NONPACKED
        assert decision is want
        assert feats.n_windows == len(verdicts)

    def test_knn_decision_source(self, raw_image):
        params = init_params(CFG)
        knn = KnnModel().fit(np.zeros((2, N_FEATURES)) + [[0.0], [1.0]],
                             np.array([0, 1]))
        _, decision, _, source = scan_program(raw_image, params, CFG, knn=knn)
        assert source == "knn"
        assert decision in (ProgramLabel.PACKED, ProgramLabel.NONPACKED)

    def test_tiny_input_stays_undecided(self):
        image = load_image(b"\x90" * 8)
        verdicts, decision, feats, source = scan_program(
            image, init_params(CFG), CFG)
        assert verdicts == [] and decision is None and source == "none"
        assert feats.n_windows == 0

    def test_make_report_shape(self, raw_image):
        params = init_params(CFG)
        verdicts, decision, feats, source = scan_program(
            raw_image, params, CFG)
        rep = make_report(raw_image, verdicts, decision, source, feats,
                          model_sha256="ab" * 32, path="x.bin")
        assert rep["report_version"] == 1
        assert rep["input"]["path"] == "x.bin"
        assert len(rep["input"]["sha256"]) == 64
        assert len(rep["scan"]["regions"]) == len(verdicts)
        prog = rep["scan"]["program"]
        assert prog["decision"] in ("packed", "nonpacked")
        assert prog["decision_source"] == source
        assert 0.0 <= prog["packed_window_fraction"] <= 1.0
        assert prog["n_windows"] == feats.n_windows
        for r in rep["scan"]["regions"]:
            assert r["label"] in ("instruction", "native_data", "packed_data")
            assert len(r["probs"]) == 3
