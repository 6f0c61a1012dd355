"""Representation analyses: linear CKA similarity, occlusion-invariance
curves, and synthetic-corruption robustness tables.

All functions are read-only over fitted classifiers and deterministic given
their seeds, so sweeps parallelize trivially.
"""

import zlib
from dataclasses import dataclass

import numpy as np

from g2sd import vit
from g2sd.vit import PatchSpec


@dataclass
class ActivationDump:
    """Pooled (examples x feature) activations of one model layer."""

    model_id: str
    layer_index: int
    features: np.ndarray
    split: str

    def save(self, path):
        np.savez(path, model_id=self.model_id, layer_index=self.layer_index,
                 features=self.features, split=self.split)
        return path

    @classmethod
    def load(cls, path):
        blob = np.load(path, allow_pickle=False)
        return cls(model_id=str(blob["model_id"]), layer_index=int(blob["layer_index"]),
                   features=blob["features"], split=str(blob["split"]))


def linear_cka(X, Y):
    """Linear centered kernel alignment between (n, p) and (n, q) matrices.

    ||Y^T X||_F^2 / (||X^T X||_F ||Y^T Y||_F) after centering each column.
    Symmetric, bounded in [0, 1], and invariant to orthogonal transforms and
    isotropic scaling of either argument.
    """
    X = np.asarray(X, dtype=np.float64)
    Y = np.asarray(Y, dtype=np.float64)
    if X.ndim != 2 or Y.ndim != 2 or X.shape[0] != Y.shape[0]:
        raise ValueError(f"need matrices with equal row counts, got {X.shape}, {Y.shape}")
    if X.shape[0] < 2:
        raise ValueError("CKA needs at least two examples")
    X = X - X.mean(axis=0)
    Y = Y - Y.mean(axis=0)
    xx = np.linalg.norm(X.T @ X, "fro")
    yy = np.linalg.norm(Y.T @ Y, "fro")
    if xx == 0.0 or yy == 0.0:
        raise ValueError("CKA undefined for zero-variance inputs")
    return float(np.linalg.norm(Y.T @ X, "fro") ** 2 / (xx * yy))


def pooled_features(params, enc_spec, X, layer=None, batch_size=128, prefix="enc"):
    """Mean-pooled patch-token features from a raw parameter dict.

    Covers models that are not classifiers (MAE teachers, generic students).
    ``layer`` taps the raw output of that 1-based block; default is the
    final-normed last block.
    """
    from g2sd.tensor import no_grad

    X = np.asarray(X, dtype=np.float32)
    out = []
    with no_grad():
        for start in range(0, len(X), batch_size):
            batch = vit.patchify(X[start:start + batch_size], enc_spec.patch)
            feats = vit.encode(params, batch, enc_spec, prefix=prefix, upto=layer)
            if layer is None:
                feats = vit.final_norm(params, feats, prefix=prefix)
            out.append(feats.patch_tokens().data.mean(axis=1))
    return np.concatenate(out, axis=0)


def dump_activations(model, X, model_id, split="test", layer=None) -> ActivationDump:
    """Mean-pooled patch features of ``model`` on ``X`` at one layer."""
    feats = model.encoder_features(X, layer=layer)
    index = 0 if layer is None else layer
    return ActivationDump(model_id=model_id, layer_index=index, features=feats,
                          split=split)


def cka_by_layer(model_a, model_b, X):
    """Per-layer taps of ``model_a`` scored by CKA against ``model_b``'s final
    pooled representation, one (layer, cka) pair per depth."""
    layers = list(range(1, model_a.spec_.depth + 1))
    ref = model_b.encoder_features(X)
    return [
        (layer, linear_cka(model_a.encoder_features(X, layer=layer), ref))
        for layer in layers
    ]


def _keep_indices(n_samples, n_tokens, ratio, rng):
    """Per-sample kept-token index sets dropping round(ratio * n) tokens."""
    n_drop = int(np.floor(ratio * n_tokens + 0.5))
    n_keep = n_tokens - n_drop
    keep = np.empty((n_samples, n_keep), dtype=np.int64)
    for i in range(n_samples):
        keep[i] = np.sort(rng.permutation(n_tokens)[:n_keep])
    return keep


def _zero_patches(images, keep, patch_spec):
    """Pixel-zeroing occlusion variant: blank every dropped patch."""
    batch = vit.patchify(images, patch_spec)
    tokens = np.zeros_like(batch.tokens.data)
    rows = np.arange(len(images))[:, None]
    tokens[rows, keep] = np.take_along_axis(batch.tokens.data, keep[:, :, None], 1)
    return vit.unpatchify(tokens, patch_spec)


def occlusion_curve(model, X, y, ratios, seed=0, n_seeds=1, mode="drop"):
    """Accuracy and representation stability under random token occlusion.

    For each ratio, drops round(ratio * N) patch tokens per sample (averaged
    over ``n_seeds`` draws) and reports top-1 accuracy plus the CKA between
    occluded and full-image pooled features. ``mode='zero'`` blanks pixels
    instead of removing tokens.
    """
    if mode not in ("drop", "zero"):
        raise ValueError(f"unknown occlusion mode {mode!r}")
    y = np.asarray(y)
    n_tokens = model.spec_.patch.n_tokens
    full_feats = model.encoder_features(X)
    rows = []
    for ratio in ratios:
        if not 0.0 <= ratio < 1.0:
            raise ValueError(f"occlusion ratio must lie in [0, 1), got {ratio}")
        accs, ckas = [], []
        for s in range(n_seeds):
            rng = np.random.default_rng(np.random.SeedSequence([int(seed), s]))
            if ratio == 0.0:
                scores = model.decision_scores(X)
                feats = full_feats
            elif mode == "drop":
                keep = _keep_indices(len(X), n_tokens, ratio, rng)
                scores = model.decision_scores(X, keep=keep)
                feats = model.encoder_features(X, keep=keep)
            else:
                keep = _keep_indices(len(X), n_tokens, ratio, rng)
                blanked = _zero_patches(X, keep, model.spec_.patch)
                scores = model.decision_scores(blanked)
                feats = model.encoder_features(blanked)
            accs.append(float((scores.argmax(axis=1) == y).mean()))
            ckas.append(linear_cka(feats, full_feats))
        rows.append({
            "ratio": float(ratio),
            "accuracy": float(np.mean(accs)),
            "cka": float(np.mean(ckas)),
        })
    return rows


CORRUPTIONS = ("noise", "shuffle", "invert")


def _corruption_tag(text):
    return zlib.crc32(text.encode())


def corrupt(images, kind, strength, rng):
    """Deterministic parametric corruption of an image batch in [0, 1]."""
    images = np.asarray(images, dtype=np.float32)
    if kind == "noise":
        out = images + rng.normal(0.0, strength, images.shape).astype(np.float32)
        return np.clip(out, 0.0, 1.0)
    if kind == "shuffle":
        # permute a fraction of 4x4 patch positions per image
        spec = PatchSpec(images.shape[1], images.shape[2], images.shape[3], 4)
        batch = vit.patchify(images, spec)
        tokens = batch.tokens.data.copy()
        n = spec.n_tokens
        k = int(round(strength * n))
        for i in range(len(images)):
            chosen = rng.permutation(n)[:k]
            tokens[i, chosen] = tokens[i, rng.permutation(chosen)]
        return vit.unpatchify(tokens, spec)
    if kind == "invert":
        return (1.0 - strength) * images + strength * (1.0 - images)
    raise ValueError(f"unknown corruption {kind!r}; expected one of {CORRUPTIONS}")


def corruption_eval(model, X, y, corruption_spec, seed=0):
    """Accuracy per (corruption, strength) with baseline-relative deltas.

    ``corruption_spec`` maps corruption name -> list of strengths; one row
    per pair plus a leading clean row.
    """
    y = np.asarray(y)
    clean = float((model.predict(X) == y).mean())
    rows = [{"corruption": "clean", "strength": 0.0, "accuracy": clean, "delta": 0.0}]
    for kind, strengths in corruption_spec.items():
        for strength in strengths:
            rng = np.random.default_rng(np.random.SeedSequence(
                [int(seed), _corruption_tag(kind), int(strength * 1e6)]))
            images = corrupt(X, kind, float(strength), rng)
            acc = float((model.predict(images) == y).mean())
            rows.append({"corruption": kind, "strength": float(strength),
                         "accuracy": acc, "delta": acc - clean})
    return rows


def write_curve(path, rows, columns):
    """Gnuplot-compatible whitespace table with a '#' header line."""
    with open(path, "w") as fh:
        fh.write("# " + " ".join(columns) + "\n")
        for row in rows:
            fh.write(" ".join(f"{row[c]:.6g}" for c in columns) + "\n")
    return path


def write_table(path, rows, columns):
    """CSV table for report consumers."""
    with open(path, "w") as fh:
        fh.write(",".join(columns) + "\n")
        for row in rows:
            fh.write(",".join(str(row[c]) for c in columns) + "\n")
    return path
