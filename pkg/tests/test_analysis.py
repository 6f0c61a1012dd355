"""CKA properties, occlusion machinery, and corruption evaluation."""

import numpy as np
import pytest

from g2sd import analysis, data
from g2sd.analysis import linear_cka
from g2sd.estimators import ViTClassifier


class TestLinearCKA:
    def test_self_similarity_is_one(self):
        rng = np.random.default_rng(0)
        X = rng.normal(size=(50, 8))
        assert linear_cka(X, X) == pytest.approx(1.0, abs=1e-12)

    def test_orthogonal_and_scaling_invariance(self):
        rng = np.random.default_rng(1)
        X = rng.normal(size=(60, 10))
        q, _ = np.linalg.qr(rng.normal(size=(10, 10)))
        for c in (0.01, 1.0, 37.5):
            assert linear_cka(X, c * X @ q) == pytest.approx(1.0, abs=1e-6)

    def test_symmetry(self):
        rng = np.random.default_rng(2)
        X, Y = rng.normal(size=(40, 6)), rng.normal(size=(40, 9))
        assert abs(linear_cka(X, Y) - linear_cka(Y, X)) < 1e-10

    def test_range_zero_one(self):
        rng = np.random.default_rng(3)
        for _ in range(20):
            X = rng.normal(size=(30, rng.integers(2, 12)))
            Y = rng.normal(size=(30, rng.integers(2, 12)))
            v = linear_cka(X, Y)
            assert 0.0 <= v <= 1.0

    def test_independent_gaussians_score_low(self):
        # Monte-Carlo oracle: with n >> p the expected alignment is small
        rng = np.random.default_rng(4)
        X = rng.normal(size=(500, 16))
        Y = rng.normal(size=(500, 16))
        assert linear_cka(X, Y) < 0.3

    def test_zero_variance_rejected(self):
        rng = np.random.default_rng(5)
        X = rng.normal(size=(20, 4))
        with pytest.raises(ValueError, match="zero-variance"):
            linear_cka(X, np.ones((20, 3)))

    def test_row_count_mismatch_rejected(self):
        with pytest.raises(ValueError):
            linear_cka(np.zeros((5, 2)), np.zeros((6, 2)))


@pytest.fixture(scope="module")
def tiny_classifier():
    train = data.synth_dataset("gaussian-blobs", 0, 128, split="train")
    clf = ViTClassifier(dim=32, depth=2, heads=4, epochs=8, batch_size=64, lr=3e-3,
                        seed=0)
    clf.fit(train.images, train.labels)
    test = data.synth_dataset("gaussian-blobs", 0, 96, split="test")
    return clf, test


class TestOcclusion:
    def test_ratio_zero_matches_standard_eval(self, tiny_classifier):
        clf, test = tiny_classifier
        rows = analysis.occlusion_curve(clf, test.images, test.labels, [0.0], seed=1)
        assert rows[0]["accuracy"] == pytest.approx(
            clf.score(test.images, test.labels))
        assert rows[0]["cka"] == pytest.approx(1.0, abs=1e-9)

    def test_drop_count_matches_round_rule(self):
        rng = np.random.default_rng(0)
        keep = analysis._keep_indices(5, 64, 0.5, rng)
        assert keep.shape == (5, 32)
        keep = analysis._keep_indices(5, 3, 0.5, rng)  # round(1.5) = 2 dropped
        assert keep.shape == (5, 1)

    def test_zero_mode_blanks_selected_patches(self, tiny_classifier):
        clf, test = tiny_classifier
        rng = np.random.default_rng(2)
        keep = analysis._keep_indices(len(test.images), 64, 0.5, rng)
        blanked = analysis._zero_patches(test.images, keep, clf.spec_.patch)
        assert blanked.shape == test.images.shape
        # exactly half the 4x4 cells survive per image
        from g2sd import vit

        tokens = vit.patchify(blanked, clf.spec_.patch).tokens.data
        alive = (np.abs(tokens).sum(axis=2) > 0).sum(axis=1)
        assert (alive <= 32).all()

    def test_curve_modes_and_validation(self, tiny_classifier):
        clf, test = tiny_classifier
        X, y = test.images[:48], test.labels[:48]
        for mode in ("drop", "zero"):
            rows = analysis.occlusion_curve(clf, X, y, [0.0, 0.5], seed=0, mode=mode)
            assert [r["ratio"] for r in rows] == [0.0, 0.5]
        with pytest.raises(ValueError):
            analysis.occlusion_curve(clf, X, y, [1.0])
        with pytest.raises(ValueError):
            analysis.occlusion_curve(clf, X, y, [0.5], mode="fog")

    def test_accuracy_nonincreasing_in_ratio_on_average(self, tiny_classifier):
        clf, test = tiny_classifier
        rows = analysis.occlusion_curve(clf, test.images, test.labels,
                                        [0.0, 0.25, 0.75], seed=3, n_seeds=3)
        accs = [r["accuracy"] for r in rows]
        assert accs[0] + 1e-9 >= accs[-1]


class TestCorruption:
    def test_zero_strength_equals_clean(self, tiny_classifier):
        clf, test = tiny_classifier
        rng = np.random.default_rng(0)
        out = analysis.corrupt(test.images, "noise", 0.0, rng)
        np.testing.assert_allclose(out, test.images, atol=1e-7)

    def test_deterministic_given_seed(self, tiny_classifier):
        _, test = tiny_classifier
        a = analysis.corrupt(test.images, "noise", 0.3, np.random.default_rng(7))
        b = analysis.corrupt(test.images, "noise", 0.3, np.random.default_rng(7))
        assert a.tobytes() == b.tobytes()

    def test_noise_does_not_help(self, tiny_classifier):
        clf, test = tiny_classifier
        rows = analysis.corruption_eval(clf, test.images, test.labels,
                                        {"noise": [0.5]}, seed=0)
        clean = rows[0]["accuracy"]
        noisy = rows[1]["accuracy"]
        assert noisy <= clean + 0.02

    def test_schema_one_row_per_pair(self, tiny_classifier):
        clf, test = tiny_classifier
        spec = {"noise": [0.1, 0.3], "invert": [1.0], "shuffle": [0.5]}
        rows = analysis.corruption_eval(clf, test.images[:32], test.labels[:32],
                                        spec, seed=0)
        assert len(rows) == 1 + 4
        assert rows[0]["corruption"] == "clean"
        assert {(r["corruption"], r["strength"]) for r in rows[1:]} == {
            ("noise", 0.1), ("noise", 0.3), ("invert", 1.0), ("shuffle", 0.5)}

    def test_unknown_corruption_rejected(self):
        with pytest.raises(ValueError, match="unknown corruption"):
            analysis.corrupt(np.zeros((1, 8, 8, 3), dtype=np.float32), "fog", 0.5,
                             np.random.default_rng(0))


class TestDumpAndTables:
    def test_activation_dump_round_trip(self, tiny_classifier, tmp_path):
        clf, test = tiny_classifier
        dump = analysis.dump_activations(clf, test.images[:16], "student", "test")
        path = dump.save(tmp_path / "acts.npz")
        loaded = analysis.ActivationDump.load(path)
        assert loaded.model_id == "student"
        np.testing.assert_array_equal(loaded.features, dump.features)

    def test_write_curve_gnuplot_format(self, tmp_path):
        rows = [{"ratio": 0.0, "accuracy": 0.9, "cka": 1.0},
                {"ratio": 0.5, "accuracy": 0.7, "cka": 0.8}]
        path = analysis.write_curve(tmp_path / "occ.dat", rows,
                                    ["ratio", "accuracy", "cka"])
        lines = open(path).read().splitlines()
        assert lines[0].startswith("# ratio")
        assert lines[1].split() == ["0", "0.9", "1"]

    def test_write_table_csv(self, tmp_path):
        rows = [{"a": 1, "b": "x"}]
        path = analysis.write_table(tmp_path / "t.csv", rows, ["a", "b"])
        assert open(path).read() == "a,b\n1,x\n"
