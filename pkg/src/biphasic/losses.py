"""Adversarial, distillation, perceptual and auxiliary losses.

Every loss takes :class:`Tensor` (or array) inputs and returns a scalar
:class:`Tensor` so it can sit anywhere in a training graph.  Two objective
families are supported: ``"vanilla"`` (log-likelihood on probabilities in
(0, 1)) and ``"lsgan"`` (least squares on raw scores).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

from .autodiff import Tensor, ops
from .autodiff import gradcheck as _gc
from .autodiff.tensor import ShapeError, as_tensor
from .toydata import DomainSpec

FAMILIES = ("vanilla", "lsgan")
PHASES = ("initial", "enhancing")
LOG_FLOOR = 1e-12
DEGENERATE_SPREAD = 1e-12


class LossError(ValueError):
    """Invalid loss inputs or a term combination the phase does not allow."""


# -- input checks -------------------------------------------------------------


def _family(family: str) -> str:
    if family not in FAMILIES:
        raise LossError(f"unknown objective family {family!r}; expected one of {FAMILIES}")
    return family


def _scores(x, name: str, family: str) -> Tensor:
    t = as_tensor(x)
    if t.ndim != 1 or t.size == 0:
        raise LossError(f"{name} must be a nonempty vector, got shape {t.shape}")
    if family == "vanilla" and not ((t.data > 0.0) & (t.data < 1.0)).all():
        bad = t.data[(t.data <= 0.0) | (t.data >= 1.0)]
        raise LossError(f"{name}: vanilla scores must lie strictly in (0, 1), got {bad[:4].tolist()}")
    return t


def _soft_targets(x, family: str) -> Tensor:
    """Teacher scores used as targets; probabilities may reach 0 or 1 exactly."""
    t = _scores(x, "teacher_real", "lsgan")
    if family == "vanilla" and not ((t.data >= 0.0) & (t.data <= 1.0)).all():
        raise LossError(f"teacher_real: vanilla soft labels must lie in [0, 1], got {t.data[:4].tolist()}")
    return t


def _same_length(*named: tuple[str, Tensor]) -> None:
    n = named[0][1].shape[0]
    for name, t in named[1:]:
        if t.shape[0] != n:
            raise LossError(f"{name} has {t.shape[0]} items, expected {n}")


def _safe_log(x: Tensor) -> Tensor:
    return ops.log(ops.clamp_min(x, LOG_FLOOR))


def _one_minus(x: Tensor) -> Tensor:
    return ops.sub(1.0, x)


# -- initial phase --------------------------------------------------------------


def adv_loss_G_initial(fake_scores, family: str = "lsgan") -> Tensor:
    """Generator adversarial loss against the initial-phase discriminator."""
    fake = _scores(fake_scores, "fake_scores", _family(family))
    if family == "vanilla":
        return ops.neg(ops.mean(_safe_log(fake)))
    return ops.mean(ops.square(ops.sub(fake, 1.0)))


def adv_loss_D_initial(real_scores, fake_scores, family: str = "lsgan") -> Tensor:
    _family(family)
    real = _scores(real_scores, "real_scores", family)
    fake = _scores(fake_scores, "fake_scores", family)
    if family == "vanilla":
        return ops.neg(ops.add(ops.mean(_safe_log(real)), ops.mean(_safe_log(_one_minus(fake)))))
    return ops.add(ops.mean(ops.square(ops.sub(real, 1.0))), ops.mean(ops.square(fake)))


# -- enhancing phase: inherited losses ----------------------------------------


def inherited_adv_loss_D(real_scores, fake_scores, teacher_real, family: str = "lsgan") -> Tensor:
    """Student discriminator loss with the frozen teacher's scores as soft targets for reals."""
    _family(family)
    real = _scores(real_scores, "real_scores", family)
    fake = _scores(fake_scores, "fake_scores", family)
    t = _soft_targets(teacher_real, family)
    _same_length(("real_scores", real), ("teacher_real", t))
    if family == "vanilla":
        fake_term = ops.neg(ops.mean(_safe_log(_one_minus(fake))))
        soft = ops.add(ops.mul(t, _safe_log(real)), ops.mul(_one_minus(t), _safe_log(_one_minus(real))))
        return ops.sub(fake_term, ops.mean(soft))
    return ops.add(ops.mean(ops.square(fake)), ops.mean(ops.square(ops.sub(real, t))))


def importance_weights(teacher_real) -> np.ndarray:
    """Per-sample weights in [1, 2]; reals the teacher doubts most weigh 2.

    The min-max normalization is scale-free, so raw least-squares teacher
    scores are accepted as well as probabilities.  A batch whose scores
    span less than 1e-12 has no ranking and gets uniform weight 1.
    """
    t = np.asarray(teacher_real.data if isinstance(teacher_real, Tensor) else teacher_real, dtype=np.float64)
    if t.ndim != 1 or t.size == 0:
        raise LossError(f"teacher_real must be a nonempty vector, got shape {t.shape}")
    if not np.isfinite(t).all():
        raise LossError("teacher_real contains non-finite values")
    doubt = 1.0 - t
    spread = doubt.max() - doubt.min()
    if spread < DEGENERATE_SPREAD:
        return np.ones_like(t)
    return 1.0 + (doubt - doubt.min()) / spread


def inherited_adv_loss_G(fake_scores, weights, family: str = "lsgan") -> Tensor:
    """Generator loss against the student discriminator, reweighted by ``weights / 2``."""
    fake = _scores(fake_scores, "fake_scores", _family(family))
    w = np.asarray(weights.data if isinstance(weights, Tensor) else weights, dtype=np.float64)
    if w.shape != fake.shape:
        raise LossError(f"weights shape {w.shape} does not match fake_scores {fake.shape}")
    half = w / 2.0
    if family == "vanilla":
        return ops.neg(ops.mean(ops.mul(_safe_log(fake), half)))
    return ops.mean(ops.mul(ops.square(ops.sub(fake, 1.0)), half))


# -- mutual perceptual information ----------------------------------------------

Embedding = Callable[[Tensor], Tensor]


def _embedder(phi) -> Embedding:
    if getattr(phi, "frozen", True) is False:
        raise LossError(f"{getattr(phi, 'name', 'phi')} must be frozen before it is used as a perceptual embedder")
    return phi.embed if hasattr(phi, "embed") else phi


def _embed_pair(x1, x2, phi) -> tuple[Tensor, Tensor]:
    x1, x2 = as_tensor(x1), as_tensor(x2)
    if x1.shape != x2.shape:
        raise ShapeError(f"perceptual inputs differ in shape: {x1.shape} vs {x2.shape}")
    f = _embedder(phi)
    return f(x1), f(x2)


def perceptual_distance(x1, x2, phi) -> Tensor:
    """Per-item Euclidean distance between embeddings, shape (N,)."""
    e1, e2 = _embed_pair(x1, x2, phi)
    return ops.norm(ops.sub(e1, e2), axis=-1)


def critic_matrix(source_emb, translated_emb) -> Tensor:
    """s[i, j] = -||source_i - translated_j||."""
    a, b = as_tensor(source_emb), as_tensor(translated_emb)
    if a.ndim != 2 or a.shape != b.shape:
        raise ShapeError(f"embedding batches must be matching (K, d) arrays, got {a.shape} and {b.shape}")
    k, d = a.shape
    diff = ops.sub(ops.reshape(a, (k, 1, d)), ops.reshape(b, (1, k, d)))
    return ops.neg(ops.norm(diff, axis=-1))


def infonce_from_critic(critic) -> Tensor:
    """mean_i [s_ii - logsumexp_j s_ij]; never positive."""
    s = as_tensor(critic)
    if s.ndim != 2 or s.shape[0] != s.shape[1] or s.shape[0] == 0:
        raise LossError(f"critic must be a nonempty square matrix, got shape {s.shape}")
    k = s.shape[0]
    diag = ops.getitem(s, (np.arange(k), np.arange(k)))
    return ops.mean(ops.sub(diag, ops.logsumexp(s, axis=1)))


def infonce_mi(source_batch, translated_batch, phi) -> Tensor:
    """In-batch infoNCE estimate Î between sources and their translations."""
    src, out = as_tensor(source_batch), as_tensor(translated_batch)
    if src.ndim == 0 or src.shape[0] == 0:
        raise LossError("infonce_mi needs at least one pair")
    es, et = _embed_pair(src, out, phi)
    return infonce_from_critic(critic_matrix(es, et))


def mutual_perceptual_loss(source_batch, translated_batch, phi) -> Tensor:
    return ops.neg(infonce_mi(source_batch, translated_batch, phi))


def interpretable_mi(i_hat, k: int) -> float:
    """Î + log K, the estimate on a nonnegative scale (bounded above by log K)."""
    value = i_hat.item() if isinstance(i_hat, Tensor) else float(i_hat)
    return value + float(np.log(k))


# -- auxiliary supervision ----------------------------------------------------


def _l1(a, b, what: str) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"{what}: shapes differ, {a.shape} vs {b.shape}")
    return ops.mean(ops.abs(ops.sub(a, b)))


def uv_loss(predicted_map, target_map) -> Tensor:
    """Mean absolute error between geometry maps."""
    return _l1(predicted_map, target_map, "uv_loss")


def cycle_loss(x, reconstructed) -> Tensor:
    return _l1(x, reconstructed, "cycle_loss")


def attr_loss(logits, target_label, spec: DomainSpec) -> Tensor:
    """Softmax cross-entropy per one-hot group plus sigmoid cross-entropy per flag.

    Per-sample terms are summed over groups and flags, then averaged over the batch.
    """
    z = as_tensor(logits)
    if z.ndim == 1:
        z = ops.reshape(z, (1, -1))
    y = np.asarray(target_label, dtype=np.float64)
    if y.ndim == 1:
        y = y[None]
    y = spec.validate_batch(y)
    if z.shape != y.shape:
        raise ShapeError(f"attr_loss: logits {z.shape} do not match labels {y.shape}")
    per_sample = []
    for sl in spec.group_slices():
        logp = ops.log_softmax(ops.getitem(z, (slice(None), sl)), axis=1)
        per_sample.append(ops.neg(ops.sum(ops.mul(logp, y[:, sl]), axis=1)))
    idx = spec.flag_indices()
    if idx:
        zf = ops.getitem(z, (slice(None), slice(idx[0], idx[-1] + 1)))
        bce = ops.sub(ops.softplus(zf), ops.mul(zf, y[:, idx[0] : idx[-1] + 1]))
        per_sample.append(ops.sum(bce, axis=1))
    total = per_sample[0]
    for term in per_sample[1:]:
        total = ops.add(total, term)
    return ops.mean(total)


# -- totals -------------------------------------------------------------------


@dataclass
class LossReport:
    phase: str
    side: str
    components: dict[str, float] = field(default_factory=dict)
    total: float = 0.0

    def __str__(self) -> str:
        parts = " ".join(f"{k}={v:.6g}" for k, v in self.components.items())
        return f"L^{self.side}[{self.phase}] = {self.total:.6g} ({parts})"


G_TERMS = ("adv", "mp", "geom", "attr", "cycle")
D_TERMS = ("adv", "geom", "attr")


def _phase(phase: str) -> str:
    if phase not in PHASES:
        raise LossError(f"unknown phase {phase!r}; expected one of {PHASES}")
    return phase


def _sum_terms(phase: str, side: str, terms: Mapping[str, object], order: tuple[str, ...]) -> tuple[Tensor, LossReport]:
    report = LossReport(phase, side)
    total = None
    for name in order:
        if name not in terms:
            continue
        t = as_tensor(terms[name])
        if t.size != 1:
            raise LossError(f"term {name!r} must be a scalar, got shape {t.shape}")
        t = ops.reshape(t, ())
        report.components[name] = t.item()
        total = t if total is None else ops.add(total, t)
    report.total = total.item()
    return total, report


def _present(terms: Mapping[str, object]) -> dict[str, object]:
    return {k: v for k, v in terms.items() if v is not None}


def total_loss_G(
    phase: str,
    terms: Mapping[str, object],
    *,
    exclude_geometry: bool = False,
    without: tuple[str, ...] = (),
) -> tuple[Tensor, LossReport]:
    """Unit-weight sum of the generator terms.

    ``adv``, ``mp``, ``geom`` and ``attr`` are required unless listed in
    ``without`` (ablations) or, for ``geom``, excluded because the task
    changes geometry.  ``cycle`` is an optional extra term.
    """
    _phase(phase)
    terms = _present(terms)
    unknown = set(terms) - set(G_TERMS)
    if unknown:
        raise LossError(f"unknown generator term(s): {sorted(unknown)}")
    skipped = set(without) | ({"geom"} if exclude_geometry else set())
    required = [t for t in G_TERMS[:4] if t not in skipped]
    missing = [t for t in required if t not in terms]
    if missing:
        raise LossError(f"{phase} generator loss is missing term(s): {missing}")
    extra = [t for t in terms if t in skipped]
    if extra:
        raise LossError(f"term(s) {extra} were supplied but are excluded by the configuration")
    return _sum_terms(phase, "G", terms, G_TERMS)


def total_loss_D(phase: str, terms: Mapping[str, object], *, exclude_geometry: bool = False) -> tuple[Tensor, LossReport]:
    """Initial phase: adversarial + geometry + attribute terms.  Enhancing: adversarial only."""
    _phase(phase)
    terms = _present(terms)
    unknown = set(terms) - set(D_TERMS)
    if unknown:
        raise LossError(f"unknown discriminator term(s): {sorted(unknown)}")
    if phase == "enhancing":
        aux = sorted(set(terms) - {"adv"})
        if aux:
            raise LossError(f"auxiliary term(s) {aux} are not part of the enhancing-phase discriminator loss")
        required = ["adv"]
    else:
        required = ["adv", "attr"] + ([] if exclude_geometry else ["geom"])
        if exclude_geometry and "geom" in terms:
            raise LossError("geometry term supplied but excluded by the configuration")
    missing = [t for t in required if t not in terms]
    if missing:
        raise LossError(f"{phase} discriminator loss is missing term(s): {missing}")
    return _sum_terms(phase, "D", terms, D_TERMS)


# -- gradient-check cases -------------------------------------------------------


def _register_gradchecks() -> None:
    spec = DomainSpec()
    prob = lambda r, n=6: r.uniform(0.05, 0.95, size=n)  # noqa: E731
    raw = lambda r, n=6: r.uniform(-2.0, 2.0, size=n)  # noqa: E731

    def linear_phi(w):
        return lambda x: ops.matmul(ops.reshape(x, (x.shape[0], -1)), w)

    cases = [
        ("adv_loss_G_initial.vanilla", lambda f: adv_loss_G_initial(f, "vanilla"), lambda r: {"f": prob(r)}),
        ("adv_loss_G_initial.lsgan", lambda f: adv_loss_G_initial(f, "lsgan"), lambda r: {"f": raw(r)}),
        (
            "adv_loss_D_initial.vanilla",
            lambda r_, f: adv_loss_D_initial(r_, f, "vanilla"),
            lambda r: {"r_": prob(r), "f": prob(r)},
        ),
        ("adv_loss_D_initial.lsgan", lambda r_, f: adv_loss_D_initial(r_, f, "lsgan"), lambda r: {"r_": raw(r), "f": raw(r)}),
        (
            "inherited_adv_loss_D.vanilla",
            lambda r_, f, t: inherited_adv_loss_D(r_, f, t, "vanilla"),
            lambda r: {"r_": prob(r), "f": prob(r), "t": prob(r)},
        ),
        (
            "inherited_adv_loss_D.lsgan",
            lambda r_, f, t: inherited_adv_loss_D(r_, f, t, "lsgan"),
            lambda r: {"r_": raw(r), "f": raw(r), "t": raw(r)},
        ),
        (
            "inherited_adv_loss_G.vanilla",
            lambda f, _w: inherited_adv_loss_G(f, _w, "vanilla"),
            lambda r: {"f": prob(r), "_w": importance_weights(prob(r))},
        ),
        (
            "inherited_adv_loss_G.lsgan",
            lambda f, _w: inherited_adv_loss_G(f, _w, "lsgan"),
            lambda r: {"f": raw(r), "_w": importance_weights(raw(r))},
        ),
        (
            "perceptual_distance",
            lambda a, b, _w: perceptual_distance(a, b, linear_phi(_w)),
            lambda r: {"a": r.uniform(-2, 2, (3, 2, 2, 2)), "b": r.uniform(-2, 2, (3, 2, 2, 2)), "_w": r.uniform(-1, 1, (8, 4))},
        ),
        (
            "infonce_mi",
            lambda a, b, _w: infonce_mi(a, b, linear_phi(_w)),
            lambda r: {"a": r.uniform(-2, 2, (4, 2, 2, 2)), "b": r.uniform(-2, 2, (4, 2, 2, 2)), "_w": r.uniform(-1, 1, (8, 4))},
        ),
        (
            "mutual_perceptual_loss",
            lambda a, b, _w: mutual_perceptual_loss(a, b, linear_phi(_w)),
            lambda r: {"a": r.uniform(-2, 2, (4, 2, 2, 2)), "b": r.uniform(-2, 2, (4, 2, 2, 2)), "_w": r.uniform(-1, 1, (8, 4))},
        ),
        ("infonce_from_critic", lambda s: infonce_from_critic(s), lambda r: {"s": r.uniform(-2, 2, (5, 5))}),
        ("uv_loss", lambda p, _d: uv_loss(p, ops.add(p, _d)), lambda r: {"p": r.uniform(0, 1, (2, 2, 3, 3)), "_d": _gc._away_from_zero(r, 2, 2, 3, 3)}),
        ("cycle_loss", lambda x, _d: cycle_loss(x, ops.sub(x, _d)), lambda r: {"x": r.uniform(-1, 1, (2, 3, 3, 3)), "_d": _gc._away_from_zero(r, 2, 3, 3, 3)}),
        (
            "attr_loss",
            lambda z, _y: attr_loss(z, _y, spec),
            lambda r: {"z": r.uniform(-2, 2, (4, spec.label_size)), "_y": spec.sample_labels(r, 4)},
        ),
        (
            "total_loss_G",
            lambda a, m, g, t: total_loss_G("initial", {"adv": a, "mp": m, "geom": g, "attr": t})[0],
            lambda r: {k: r.uniform(-2, 2, ()) for k in "amgt"},
        ),
        (
            "total_loss_D",
            lambda a, g, t: total_loss_D("initial", {"adv": a, "geom": g, "attr": t})[0],
            lambda r: {k: r.uniform(-2, 2, ()) for k in "agt"},
        ),
    ]
    for name, fn, sample in cases:
        _gc.register(_gc.GradCase(f"loss.{name}", fn, sample))


_register_gradchecks()
