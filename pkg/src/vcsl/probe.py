"""Frozen-embedding linear probes and the gradient-check harness."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .attention import AttentionConfig
from .codes import sinkhorn_codes
from .encoder import EncoderConfig
from .losses import LossConfig, fit_loss, intra_loss, solve_codes
from .masking import mask_loss, sample_mask


@dataclass
class ProbeReport:
    accuracy: float
    chance: float
    confusion: list[list[int]]
    source: str
    seed: int
    n_train: int
    n_test: int

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


def stratified_split(labels: np.ndarray, rng: np.random.Generator, train_fraction: float = 0.7):
    train, test = [], []
    for c in np.unique(labels):
        idx = rng.permutation(np.flatnonzero(labels == c))
        cut = int(round(train_fraction * len(idx)))
        train.append(idx[:cut])
        test.append(idx[cut:])
    return np.sort(np.concatenate(train)), np.sort(np.concatenate(test))


def linear_probe(embeddings: np.ndarray, labels: np.ndarray, seed: int = 0, source: str = "volume",
                 epochs: int = 500, lr: float = 0.5, weight_decay: float = 1e-4) -> ProbeReport:
    """Fit one affine softmax classifier by full-batch gradient descent on a 70/30 split.

    The embeddings are copied and standardized with training-split statistics;
    nothing upstream is touched.
    """
    x = np.array(embeddings, dtype=np.float64)
    labels = np.asarray(labels)
    classes, y = np.unique(labels, return_inverse=True)
    if len(classes) < 2:
        raise ValueError("linear probe needs at least two classes")
    if np.bincount(y).min() < 10:
        raise ValueError("linear probe needs at least 10 samples per class")
    rng = np.random.default_rng(seed)
    train, test = stratified_split(y, rng)
    mu = x[train].mean(axis=0)
    sd = x[train].std(axis=0)
    x = (x - mu) / np.where(sd > 1e-8, sd, 1.0)

    k = len(classes)
    w = np.zeros((x.shape[1], k))
    b = np.zeros(k)
    onehot = np.eye(k)[y[train]]
    xt = x[train]
    for _ in range(epochs):
        logits = xt @ w + b
        logits -= logits.max(axis=1, keepdims=True)
        p = np.exp(logits)
        p /= p.sum(axis=1, keepdims=True)
        g = (p - onehot) / len(train)
        w -= lr * (xt.T @ g + weight_decay * w)
        b -= lr * g.sum(axis=0)
    pred = np.argmax(x[test] @ w + b, axis=1)
    confusion = np.zeros((k, k), dtype=int)
    np.add.at(confusion, (y[test], pred), 1)
    return ProbeReport(
        accuracy=float(np.mean(pred == y[test])),
        chance=1.0 / k,
        confusion=confusion.tolist(),
        source=source,
        seed=seed,
        n_train=len(train),
        n_test=len(test),
    )


# ---------------------------------------------------------------------------
# gradient checks


@dataclass
class GradCheckEntry:
    loss: str
    group: str
    max_rel_error: float
    passed: bool
    checked: int


@dataclass
class GradCheckReport:
    tolerance: float
    entries: list[GradCheckEntry] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(e.passed for e in self.entries)

    def failures(self) -> list[GradCheckEntry]:
        return [e for e in self.entries if not e.passed]

    def lines(self) -> list[str]:
        return [f"{'PASS' if e.passed else 'FAIL'} {e.loss:<7} {e.group:<11} max_rel_err={e.max_rel_error:.3e} "
                f"coords={e.checked}" for e in self.entries]

    def to_dict(self) -> dict:
        return {"tolerance": self.tolerance, "passed": self.passed, "entries": [asdict(e) for e in self.entries]}


TOY_ENCODER = EncoderConfig(channels=(2, 3, 4, 4), levels=2, level_width=8, embed_dim=8, input_size=8)
TOY_SLICES = 4
TOY_ATTENTION = AttentionConfig(width=8, heads=2, groups=1, blocks=2, seq_len=TOY_SLICES * 2, downsample=2,
                                embed_dim=8)
TOY_CLUSTERS = 5


def toy_problem(seed: int = 0):
    """Small seeded model plus fixed views, masks and codes for gradient checks."""
    from .training import ModelState

    state = ModelState.create(TOY_ENCODER, TOY_ATTENTION, TOY_CLUSTERS, seed)
    rng = np.random.default_rng(seed + 1)
    shape = (2, TOY_SLICES, TOY_ENCODER.input_size, TOY_ENCODER.input_size)
    data = {
        "slices_t": rng.normal(size=shape[1:]),
        "slices_s": rng.normal(size=shape[1:]),
        "volumes_t": rng.normal(size=shape),
        "volumes_s": rng.normal(size=shape),
        "plans": [sample_mask(TOY_SLICES, 0.25, s) for s in (3, 4)],
    }
    return state, data


def _random_coords(size: int, limit: int | None, rng: np.random.Generator):
    if limit is None or size <= limit:
        return None
    return np.sort(rng.choice(size, size=limit, replace=False))


def grad_check_all(state=None, data=None, seed: int = 0, step: float = 1e-5, tol: float = 1e-4,
                   max_coords: int | None = None, losses=("L_2D", "L_3D", "L_mask")) -> GradCheckReport:
    """Finite-difference check of every loss against every parameter group it trains.

    Codes and masked-prediction targets are computed once at the base point
    and held fixed, matching their detached role in training. ``max_coords`` caps the number of
    (seeded, random) coordinates checked per parameter tensor.
    """
    if state is None or data is None:
        state, data = toy_problem(seed)
    cfg = LossConfig(tau=0.1, eps=0.05, sinkhorn_iters=1000, sinkhorn_tol=1e-9)
    enc, stack, protos = state.encoder, state.stack, state.prototypes

    with ad.no_grad():
        z2_t, z2_s = enc.encode(data["slices_t"]), enc.encode(data["slices_s"])
        q2_t, q2_s, _ = solve_codes(z2_t, z2_s, protos, cfg)
        z3_t = stack.volume_embed(enc.encode_volume_slices(data["volumes_t"]))
        z3_s = stack.volume_embed(enc.encode_volume_slices(data["volumes_s"]))
        q3_t, q3_s, _ = solve_codes(z3_t, z3_s, protos, cfg)
        vt = data["volumes_t"]
        mask_targets = enc.encode_volume_slices(vt).data.reshape(vt.shape[0], vt.shape[1], -1)

    programs = {
        "L_2D": (lambda: intra_loss(enc.encode(data["slices_t"]), q2_t, enc.encode(data["slices_s"]), q2_s,
                                    protos, cfg.tau),
                 ("encoder", "prototypes")),
        "L_3D": (lambda: intra_loss(stack.volume_embed(enc.encode_volume_slices(data["volumes_t"])), q3_t,
                                    stack.volume_embed(enc.encode_volume_slices(data["volumes_s"])), q3_s,
                                    protos, cfg.tau),
                 ("encoder", "attention", "prototypes")),
        "L_mask": (lambda: mask_loss(data["volumes_t"], enc, stack, state.decoder, state.mask_token, data["plans"],
                                     targets=mask_targets),
                   ("encoder", "attention", "decoder", "mask_token")),
    }
    groups = state.groups()
    rng = np.random.default_rng(seed)
    report = GradCheckReport(tolerance=tol)
    for name in losses:
        program, trained = programs[name]
        graph = ad.Graph(program)
        graph.evaluate({})
        for group in trained:
            worst, checked = 0.0, 0
            for tensor in groups[group].values():
                coords = _random_coords(tensor.size, max_coords, rng)
                worst = max(worst, ad.check_gradient(graph, "output", tensor, step, coords))
                checked += tensor.size if coords is None else len(coords)
            report.entries.append(GradCheckEntry(name, group, worst, bool(worst < tol), checked))
    report.entries.append(check_detached_codes(seed))
    return report


def check_detached_codes(seed: int = 0) -> GradCheckEntry:
    """Zero gradient must reach scores through the code solver while the softmax path stays live."""
    rng = np.random.default_rng(seed)
    z = rng.normal(size=(6, 4))
    z /= np.linalg.norm(z, axis=1, keepdims=True)
    c = rng.normal(size=(4, 3))
    c /= np.linalg.norm(c, axis=0, keepdims=True)

    def program(scores, z, c):
        q = sinkhorn_codes(scores, 0.05, 1000, 1e-9).distributions()
        return fit_loss(z, q, c, 0.1)

    graph = ad.Graph(program)
    graph.evaluate({"scores": c.T @ z.T, "z": z, "c": c})
    grads = graph.backward("output")
    code_path = float(np.abs(grads["scores"]).max())
    softmax_path = float(np.abs(grads["z"]).max())
    return GradCheckEntry("codes", "sinkhorn", code_path, code_path == 0.0 and softmax_path > 0.0, grads["scores"].size)
