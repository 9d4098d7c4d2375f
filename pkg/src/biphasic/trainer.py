"""Estimator pretraining, the two training phases and the ablation modes.

A run goes: pretrain the frozen embedder (and warm auxiliaries) on the
external split, train G1 against T at the initial resolution, then
:func:`transition` freezes T and the auxiliaries, attaches G2 and builds a
fresh full-resolution D, and the enhancing phase trains G1+G2 against D
with the teacher-derived losses.
"""

from __future__ import annotations

import csv
import hashlib
import logging
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
from threadpoolctl import threadpool_limits

from . import losses as L
from .autodiff import Adam, NonFiniteError, Tensor, name_scope, no_grad, ops
from .checkpoint import CheckpointError, load_bundle, save_bundle
from .config import RunConfig, dump_config
from .metrics import FeatureStats, clas_error, feature_stats, fid, ms_ssim
from .nets import (
    Network,
    build_attribute_classifier,
    build_discriminator,
    build_embedder,
    build_enhancer,
    build_initial_generator,
    build_uv_predictor,
    describe,
    downsample,
    enhanced_forward,
    rebuild,
)
from .toydata import Splits, ToyDataset, augment, make_dataset

log = logging.getLogger(__name__)

METRIC_COLUMNS = (
    "step",
    "phase",
    "L_adv_G",
    "L_adv_D",
    "L_mp",
    "L_geom_G",
    "L_attr_G",
    "L_geom_Duv",
    "L_attr_Da",
    "fid",
    "ms_ssim",
    "clas_err",
    "mi_hat",
)
PRETRAIN_COLUMNS = ("network", "steps", "final_loss", "heldout_metric", "heldout_value")


class TrainingDiverged(RuntimeError):
    """A non-finite value appeared; the message names the step and node."""


class TransitionError(RuntimeError):
    pass


class PhaseError(RuntimeError):
    pass


class FrozenParameterError(AssertionError):
    pass


# -- data plumbing ----------------------------------------------------------------


def make_splits(cfg: RunConfig) -> Splits:
    d = cfg.data
    return make_dataset(
        cfg.domain,
        n_identities=d.n_identities,
        per_identity=d.per_identity,
        hw=cfg.plan.full_hw,
        seed=d.seed,
        n_test_identities=d.test_identities,
        n_external_identities=d.external_identities,
        external_per_identity=d.external_per_identity,
    )


def _pool(x: np.ndarray) -> np.ndarray:
    n, c, h, w = x.shape
    return x.reshape(n, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5))


@dataclass
class Batch:
    x_full: np.ndarray  # [-1, 1], full resolution
    x_low: np.ndarray  # [-1, 1], initial resolution
    geom_low: np.ndarray
    c_src: np.ndarray
    c_tgt: np.ndarray


def draw_batch(data: ToyDataset, size: int, rng: np.random.Generator, flip_p: float) -> Batch:
    idx = rng.integers(0, len(data), size=size)
    images, geometry, _ = augment(data.images[idx], data.geometry[idx], flip_p, rng)
    x_full = images * 2.0 - 1.0
    return Batch(x_full, _pool(x_full), _pool(geometry), data.labels[idx], data.spec.sample_labels(rng, size))


def _params(*nets: Network) -> dict[str, Tensor]:
    return {f"{net.name}/{k}": p for net in nets for k, p in net.named_parameters().items()}


def _clone(net: Network) -> Network:
    copy = rebuild(describe(net))
    for k, p in net.params.items():
        copy.params[k].data = p.data.copy()
    return copy


@contextmanager
def _inputs_only(*nets: Network) -> Iterator[None]:
    """Let gradients flow through ``nets`` to their inputs without touching their weights."""
    live = [n for n in nets if not n.frozen]
    for n in live:
        n.set_requires_grad(False)
    try:
        yield
    finally:
        for n in live:
            n.set_requires_grad(True)


def _digest(net: Network) -> str:
    return hashlib.sha256(net.state_bytes()).hexdigest()


# -- pretraining -------------------------------------------------------------------


@dataclass
class Estimators:
    phi: Network
    duv: Network
    da: Network
    clas: Network
    report: list[dict] = field(default_factory=list)


def _fit(net: Network, loss_fn, steps: int, lr: float) -> float:
    opt = Adam(net.named_parameters(), lr=lr)
    recent: list[float] = []
    for _ in range(steps):
        opt.zero_grad()
        loss = loss_fn()
        loss.backward()
        opt.step()
        recent = (recent + [loss.item()])[-50:]
    return float(np.mean(recent)) if recent else float("nan")


def _holdout_split(data: ToyDataset, per_identity: int) -> tuple[np.ndarray, np.ndarray]:
    held = np.zeros(len(data), dtype=bool)
    for ident in np.unique(data.identities):
        idx = np.flatnonzero(data.identities == ident)
        if len(idx) <= per_identity:
            raise ValueError(f"identity {ident} has {len(idx)} samples; need more than {per_identity} to hold some out")
        held[idx[-per_identity:]] = True
    return np.flatnonzero(~held), np.flatnonzero(held)


def pretrain_estimators(external: ToyDataset, cfg: RunConfig) -> Estimators:
    """Train the identity embedder, warm auxiliaries and the evaluation classifier.

    All four see only the external split.  The embedder and the evaluation
    classifier come back frozen.
    """
    spec, plan, p, n = cfg.domain, cfg.plan, cfg.pretrain, cfg.nets
    seed = cfg.train.seed
    ids = np.unique(external.identities)
    if len(ids) < 3:
        raise ValueError(f"pretraining needs >= 3 external identities, got {len(ids)}")
    fit_idx, held_idx = _holdout_split(external, p.holdout_per_identity)
    class_of = {int(i): k for k, i in enumerate(ids)}
    targets = np.array([class_of[int(i)] for i in external.identities])
    x_low_all = _pool(external.images * 2.0 - 1.0)
    geom_low_all = _pool(external.geometry)

    def batches(stream: int):
        rng = np.random.default_rng([seed, 10, stream])
        while True:
            idx = fit_idx[rng.integers(0, len(fit_idx), size=p.batch_size)]
            images, geometry, _ = augment(external.images[idx], external.geometry[idx], 0.5, rng)
            yield idx, Tensor(_pool(images * 2.0 - 1.0)), _pool(geometry)

    report = []

    phi = build_embedder(plan, len(ids), rng=[seed, 11], channels=n.phi_channels, embed_dim=n.embed_dim)
    phi_batches = batches(1)
    blur_rng = np.random.default_rng([seed, 10, 2])

    def phi_loss():
        idx, x, _ = next(phi_batches)
        # optionally send part of the batch through an up/down round trip so the
        # embedding ignores the sharpness gap between real and upsampled images
        soft = blur_rng.random(len(idx)) < p.phi_blur
        x = Tensor(np.where(soft[:, None, None, None], _pool(ops.upsample_bilinear(x, 2).data), x.data))
        onehot = np.eye(len(ids))[targets[idx]]
        return ops.neg(ops.mean(ops.sum(ops.mul(ops.log_softmax(phi(x), axis=1), onehot), axis=1)))

    final = _fit(phi, phi_loss, p.phi_steps, p.lr)
    with no_grad():
        acc = float((phi(Tensor(x_low_all[held_idx])).data.argmax(axis=1) == targets[held_idx]).mean())
    phi.freeze()
    report.append({"network": "phi", "steps": p.phi_steps, "final_loss": final, "heldout_metric": "identity_acc", "heldout_value": acc})

    duv = build_uv_predictor(plan, rng=[seed, 13], channels=n.duv_channels)
    da = build_attribute_classifier(spec, plan, rng=[seed, 14], channels=n.da_channels)
    clas = build_attribute_classifier(spec, plan, rng=[seed, 15], channels=n.da_channels, name="clas")
    aux_steps = p.aux_steps if p.warm_start_aux else 0
    uv_batches, da_batches, clas_batches = batches(3), batches(4), batches(5)

    def uv_warmup_loss():
        # squared error for the warm start: L1 through the sigmoid head tends to
        # collapse to the all-background prediction from a random init
        _, x, g = next(uv_batches)
        return ops.mean(ops.square(ops.sub(duv(x), g)))

    def attr_loss_for(net, stream):
        def fn():
            idx, x, _ = next(stream)
            return L.attr_loss(net(x), external.labels[idx], spec)

        return fn

    final = _fit(duv, uv_warmup_loss, aux_steps, p.lr)
    with no_grad():
        uv_err = float(np.abs(duv(Tensor(x_low_all[held_idx])).data - geom_low_all[held_idx]).mean())
    report.append({"network": "duv", "steps": aux_steps, "final_loss": final, "heldout_metric": "uv_l1", "heldout_value": uv_err})
    for net, stream, steps in ((da, da_batches, aux_steps), (clas, clas_batches, p.clas_steps)):
        final = _fit(net, attr_loss_for(net, stream), steps, p.lr)
        if net is clas:
            net.freeze()
        err = clas_error(external.images[held_idx], external.labels[held_idx], _frozen_view(net), spec)
        report.append(
            {"network": net.name.lower(), "steps": steps, "final_loss": final, "heldout_metric": "attr_acc", "heldout_value": 1.0 - err}
        )
    for row in report:
        log.info("pretrain %(network)s: %(heldout_metric)s=%(heldout_value).4f", row)
    return Estimators(phi, duv, da, clas, report)


def _frozen_view(net: Network) -> Network:
    if net.frozen:
        return net
    view = _clone(net)
    view.freeze()
    return view


def write_pretrain_csv(report: Sequence[dict], path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(PRETRAIN_COLUMNS)
        for row in report:
            w.writerow([_fmt(row[c]) for c in PRETRAIN_COLUMNS])


ESTIMATOR_FILES = {"phi": "phi.ckpt", "duv": "duv.ckpt", "da": "da.ckpt", "clas": "clas.ckpt"}


def save_estimators(est: Estimators, directory: str | Path, cfg: RunConfig) -> list[Path]:
    """One bundle per estimator plus ``pretrain_metrics.csv``."""
    out = Path(directory)
    meta = {"format": "biphasic-estimator", "spec": cfg.domain.to_dict(), "plan": {"initial_hw": cfg.plan.initial_hw, "full_hw": cfg.plan.full_hw}}
    written = [save_bundle(out / fname, {key: getattr(est, key)}, meta) for key, fname in ESTIMATOR_FILES.items()]
    write_pretrain_csv(est.report, out / "pretrain_metrics.csv")
    return written + [out / "pretrain_metrics.csv"]


def load_estimators(directory: str | Path) -> Estimators:
    src = Path(directory)
    nets = {}
    for key, fname in ESTIMATOR_FILES.items():
        _, bundle = load_bundle(src / fname)
        if key not in bundle:
            raise CheckpointError(f"{src / fname} does not hold a {key!r} network")
        nets[key] = bundle[key]
    for key in ("phi", "clas"):
        if not nets[key].frozen:
            raise CheckpointError(f"{src / ESTIMATOR_FILES[key]}: {key} must be stored frozen")
    report = []
    metrics = src / "pretrain_metrics.csv"
    if metrics.is_file():
        with open(metrics, newline="") as fh:
            report = list(csv.DictReader(fh))
    return Estimators(nets["phi"], nets["duv"], nets["da"], nets["clas"], report)


# -- phase state ---------------------------------------------------------------------


@dataclass
class PhaseState:
    config: RunConfig
    phase: str
    nets: dict[str, Network]
    optimizers: dict[str, Adam]
    rng: np.random.Generator
    step: int = 0
    phase_step: int = 0
    alpha: float = 1.0
    transitioned: bool = False
    frozen: dict[str, str] = field(default_factory=dict)  # role -> parameter digest
    last_terms: dict[str, float] = field(default_factory=dict)

    @property
    def mode(self) -> str:
        return self.config.train.mode

    @property
    def spec(self):
        return self.config.domain

    def freeze(self, role: str) -> None:
        net = self.nets[role]
        net.freeze()
        self.optimizers.pop(role, None)
        self.frozen[role] = _digest(net)

    def trainable(self) -> list[str]:
        return sorted(r for r in self.nets if r not in self.frozen)

    def check_frozen(self) -> None:
        for role, digest in self.frozen.items():
            if _digest(self.nets[role]) != digest:
                raise FrozenParameterError(f"frozen network {role} changed during {self.phase} phase (step {self.step})")

    def adam(self, *nets: Network) -> Adam:
        return Adam(_params(*nets), lr=self.config.train.lr)


def init_state(cfg: RunConfig, est: Estimators) -> PhaseState:
    cfg.validate()
    t, n, seed = cfg.train, cfg.nets, cfg.train.seed
    nets: dict[str, Network] = {
        "G1": build_initial_generator(cfg.domain, cfg.plan, rng=[seed, 21], channels=n.g1_channels, res_blocks=n.g1_res_blocks),
        "Duv": _clone(est.duv),
        "Da": _clone(est.da),
        "Phi": est.phi,
    }
    if not est.phi.frozen:
        raise PhaseError("the perceptual embedder must be frozen before training")
    single = t.mode == "single_phase"
    if single:
        nets["G2"] = build_enhancer(cfg.plan, rng=[seed, 25], channels=n.g2_channels, res_blocks=n.g2_res_blocks)
        nets["D"] = build_discriminator("enhancing", cfg.plan, rng=[seed, 26], family=t.family, channels=n.d_channels)
    else:
        nets["T"] = build_discriminator("initial", cfg.plan, rng=[seed, 22], family=t.family, channels=n.t_channels)
    state = PhaseState(cfg, "single" if single else "initial", nets, {}, np.random.default_rng([seed, 40]))
    state.frozen["Phi"] = _digest(est.phi)
    state.optimizers["G"] = state.adam(nets["G1"], nets["G2"]) if single else state.adam(nets["G1"])
    for role in ("D" if single else "T", "Duv", "Da"):
        state.optimizers[role] = state.adam(nets[role])
    return state


# -- steps --------------------------------------------------------------------------------


def _term(name: str, fn, *args):
    with name_scope(name):
        return fn(*args)


def _uses_mi(state: PhaseState) -> bool:
    return state.config.train.use_mi and state.mode not in ("no_mi", "cycle")


def _generator_terms(state: PhaseState, batch: Batch, src_low: Tensor, fake_low: Tensor) -> dict[str, Tensor]:
    nets, spec = state.nets, state.spec
    terms = {"attr": _term("L_attr_G", L.attr_loss, nets["Da"](fake_low), batch.c_tgt, spec)}
    if _uses_mi(state):
        terms["mp"] = _term("L_mp", L.mutual_perceptual_loss, src_low, fake_low, nets["Phi"])
    if not state.config.train.exclude_geometry:
        terms["geom"] = _term("L_geom_G", L.uv_loss, nets["Duv"](fake_low), batch.geom_low)
    return terms


def _cycle_term(state: PhaseState, batch: Batch, fake: Tensor) -> Tensor:
    nets = state.nets
    if state.phase == "initial":
        back = nets["G1"](fake, batch.c_src)
        return _term("L_cycle", L.cycle_loss, Tensor(batch.x_low), back)
    back = enhanced_forward(nets["G1"], nets["G2"], fake, batch.c_src, state.alpha)
    return _term("L_cycle", L.cycle_loss, Tensor(batch.x_full), back)


def _g_total(state: PhaseState, loss_phase: str, terms: dict[str, Tensor]) -> Tensor:
    without = () if _uses_mi(state) else ("mp",)
    total, report = L.total_loss_G(loss_phase, terms, exclude_geometry=state.config.train.exclude_geometry, without=without)
    state.last_terms.update({f"L_{k}_G" if k in ("adv", "geom", "attr") else f"L_{k}": v for k, v in report.components.items()})
    return total


def _aux_d_terms(state: PhaseState, batch: Batch) -> dict[str, Tensor]:
    nets, x_low = state.nets, Tensor(batch.x_low)
    terms = {"attr": _term("L_attr_Da", L.attr_loss, nets["Da"](x_low), batch.c_src, state.spec)}
    if not state.config.train.exclude_geometry:
        terms["geom"] = _term("L_geom_Duv", L.uv_loss, nets["Duv"](x_low), batch.geom_low)
    return terms


def _record_d(state: PhaseState, components: dict[str, float]) -> None:
    names = {"adv": "L_adv_D", "geom": "L_geom_Duv", "attr": "L_attr_Da"}
    state.last_terms.update({names[k]: v for k, v in components.items()})


def _step_optimizers(state: PhaseState, roles: Sequence[str]) -> None:
    for role in roles:
        state.optimizers[role].step()
        state.optimizers[role].zero_grad()


def _zero(state: PhaseState) -> None:
    for net in state.nets.values():
        net.zero_grad()


def initial_step(state: PhaseState, batch: Batch) -> None:
    nets, fam = state.nets, state.config.train.family
    G1, T = nets["G1"], nets["T"]
    x_low = Tensor(batch.x_low)
    state.last_terms = {}

    # discriminator side: T, Duv and Da
    _zero(state)
    with no_grad():
        fake = G1(x_low, batch.c_tgt)
    terms = {"adv": _term("L_adv_D", L.adv_loss_D_initial, T(x_low), T(fake), fam), **_aux_d_terms(state, batch)}
    total, report = L.total_loss_D("initial", terms, exclude_geometry=state.config.train.exclude_geometry)
    total.backward()
    _step_optimizers(state, ("T", "Duv", "Da"))
    _record_d(state, report.components)

    # generator side
    _zero(state)
    with _inputs_only(T, nets["Duv"], nets["Da"]):
        fake = G1(x_low, batch.c_tgt)
        terms = {"adv": _term("L_adv_G", L.adv_loss_G_initial, T(fake), fam), **_generator_terms(state, batch, x_low, fake)}
        if state.mode == "cycle":
            terms["cycle"] = _cycle_term(state, batch, fake)
        _g_total(state, "initial", terms).backward()
    _step_optimizers(state, ("G",))


def enhancing_step(state: PhaseState, batch: Batch) -> None:
    nets, fam, mode = state.nets, state.config.train.family, state.mode
    G1, G2, T, D = nets["G1"], nets["G2"], nets["T"], nets["D"]
    x_full, x_low = Tensor(batch.x_full), Tensor(batch.x_low)
    inherited = mode != "progressive"
    state.last_terms = {}

    _zero(state)
    with no_grad():
        fake = enhanced_forward(G1, G2, x_full, batch.c_tgt, state.alpha)
        teacher_real = T(downsample(x_full))
    if inherited:
        adv_d = _term("L_adv_D", L.inherited_adv_loss_D, D(x_full), D(fake), teacher_real, fam)
    else:
        adv_d = _term("L_adv_D", L.adv_loss_D_initial, D(x_full), D(fake), fam)
    total, report = L.total_loss_D("enhancing", {"adv": adv_d})
    total.backward()
    _step_optimizers(state, ("D",))
    _record_d(state, report.components)

    if mode == "ordinary_reg":
        # auxiliaries keep learning from real data, outside the discriminator objective
        _zero(state)
        aux = _aux_d_terms(state, batch)
        for term in aux.values():
            term.backward()
        _step_optimizers(state, ("Duv", "Da"))
        _record_d(state, {k: v.item() for k, v in aux.items()})

    _zero(state)
    with _inputs_only(D, nets["Duv"], nets["Da"]):
        fake = enhanced_forward(G1, G2, x_full, batch.c_tgt, state.alpha)
        if inherited:
            weights = L.importance_weights(teacher_real)
            adv_g = _term("L_adv_G", L.inherited_adv_loss_G, D(fake), weights, fam)
        else:
            adv_g = _term("L_adv_G", L.adv_loss_G_initial, D(fake), fam)
        terms = {"adv": adv_g, **_generator_terms(state, batch, x_low, downsample(fake))}
        if mode == "cycle":
            terms["cycle"] = _cycle_term(state, batch, fake)
        _g_total(state, "enhancing", terms).backward()
    _step_optimizers(state, ("G",))


def single_step(state: PhaseState, batch: Batch) -> None:
    """One-phase baseline: G1+G2 against D at full resolution with ordinary losses."""
    nets, fam = state.nets, state.config.train.family
    G1, G2, D = nets["G1"], nets["G2"], nets["D"]
    x_full, x_low = Tensor(batch.x_full), Tensor(batch.x_low)
    state.last_terms = {}

    _zero(state)
    with no_grad():
        fake = enhanced_forward(G1, G2, x_full, batch.c_tgt)
    terms = {"adv": _term("L_adv_D", L.adv_loss_D_initial, D(x_full), D(fake), fam), **_aux_d_terms(state, batch)}
    total, report = L.total_loss_D("initial", terms, exclude_geometry=state.config.train.exclude_geometry)
    total.backward()
    _step_optimizers(state, ("D", "Duv", "Da"))
    _record_d(state, report.components)

    _zero(state)
    with _inputs_only(D, nets["Duv"], nets["Da"]):
        fake = enhanced_forward(G1, G2, x_full, batch.c_tgt)
        terms = {"adv": _term("L_adv_G", L.adv_loss_G_initial, D(fake), fam), **_generator_terms(state, batch, x_low, downsample(fake))}
        if state.mode == "cycle":
            terms["cycle"] = _cycle_term(state, batch, fake)
        _g_total(state, "initial", terms).backward()
    _step_optimizers(state, ("G",))


# -- evaluation -----------------------------------------------------------------------------


def translate(nets: dict[str, Network], images: np.ndarray, labels: np.ndarray, alpha: float = 1.0, chunk: int = 256) -> np.ndarray:
    """[0, 1] full-resolution images -> translated [0, 1] full-resolution images.

    Before G2 exists the initial generator's output is bilinearly upsampled,
    which is exactly what the enhanced generator computes at the transition.
    """
    out = []
    with no_grad():
        for start in range(0, len(images), chunk):
            x = Tensor(np.asarray(images[start : start + chunk]) * 2.0 - 1.0)
            c = labels[start : start + chunk]
            if "G2" in nets:
                y = enhanced_forward(nets["G1"], nets["G2"], x, c, alpha)
            else:
                y = ops.upsample_bilinear(nets["G1"](downsample(x), c), 2)
            out.append(np.clip((y.data + 1.0) / 2.0, 0.0, 1.0))
    return np.concatenate(out, axis=0)


@dataclass
class EvalSet:
    images: np.ndarray
    targets: np.ndarray
    real_stats: FeatureStats
    phi: Network
    clas: Network
    batch_size: int


def make_eval_set(test: ToyDataset, cfg: RunConfig, est: Estimators) -> EvalSet:
    n = min(cfg.eval.samples, len(test))
    idx = np.sort(np.random.default_rng([cfg.eval.seed, 31]).choice(len(test), size=n, replace=False))
    targets = cfg.domain.sample_labels(np.random.default_rng([cfg.eval.seed, 32]), n)
    return EvalSet(test.images[idx], targets, feature_stats(test.images, est.phi), est.phi, est.clas, cfg.train.batch_size)


def mi_estimate(sources: np.ndarray, outputs: np.ndarray, phi: Network, k: int) -> float:
    """Mean of Î + log K over consecutive batches of ``k`` pooled pairs."""
    values = []
    with no_grad():
        for start in range(0, len(sources) - k + 1, k):
            src = Tensor(_pool(sources[start : start + k] * 2.0 - 1.0))
            out = Tensor(_pool(outputs[start : start + k] * 2.0 - 1.0))
            values.append(L.interpretable_mi(L.infonce_mi(src, out, phi), k))
    return float(np.mean(values)) if values else float("nan")


def evaluate_generator(nets: dict[str, Network], ev: EvalSet, spec, alpha: float = 1.0) -> dict[str, float]:
    fake = translate(nets, ev.images, ev.targets, alpha)
    return {
        "fid": fid(ev.real_stats, feature_stats(fake, ev.phi)),
        "ms_ssim": ms_ssim(ev.images, fake),
        "clas_err": clas_error(fake, ev.targets, ev.clas, spec),
        "mi_hat": mi_estimate(ev.images, fake, ev.phi, min(ev.batch_size, len(fake))),
    }


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (float, np.floating)):
        return format(float(v), ".10g")
    return str(v)


class MetricsLog:
    """metrics.csv writer; rows are flushed as they are written."""

    def __init__(self, path: str | Path) -> None:
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self.rows: list[dict] = []
        with open(self.path, "w", newline="") as fh:
            csv.writer(fh, lineterminator="\n").writerow(METRIC_COLUMNS)

    def write(self, row: dict) -> None:
        self.rows.append(dict(row))
        with open(self.path, "a", newline="") as fh:
            csv.writer(fh, lineterminator="\n").writerow([_fmt(row.get(c)) for c in METRIC_COLUMNS])


def _log_row(state: PhaseState, ev: EvalSet | None, sink: MetricsLog | None, with_losses: bool = True) -> dict:
    row = {"step": state.step, "phase": state.phase}
    if with_losses:
        row.update(state.last_terms)
    if ev is not None:
        row.update(evaluate_generator(state.nets, ev, state.spec, state.alpha))
    if sink is not None:
        sink.write(row)
    log.info("step %d [%s] %s", state.step, state.phase, {k: round(v, 4) for k, v in row.items() if isinstance(v, float)})
    return row


# -- phases ----------------------------------------------------------------------------------


def _run_steps(state: PhaseState, data: ToyDataset, steps: int, step_fn, ev: EvalSet | None, sink: MetricsLog | None) -> PhaseState:
    cfg = state.config
    every = cfg.eval.every
    fade = max(1, round(cfg.train.fade_fraction * cfg.train.steps_enhancing))
    for i in range(steps):
        if state.mode == "progressive" and state.phase == "enhancing":
            state.alpha = min(1.0, state.phase_step / fade)
        batch = draw_batch(data, cfg.train.batch_size, state.rng, cfg.train.flip_p)
        try:
            step_fn(state, batch)
        except NonFiniteError as exc:
            raise TrainingDiverged(f"step {state.step + 1} ({state.phase} phase): {exc}") from exc
        state.step += 1
        state.phase_step += 1
        if state.phase_step % every == 0 or i == steps - 1:
            state.check_frozen()
            _log_row(state, ev, sink)
    state.check_frozen()
    return state


def train_initial_phase(
    state: PhaseState, data: ToyDataset, steps: int | None = None, ev: EvalSet | None = None, sink: MetricsLog | None = None
) -> PhaseState:
    if state.phase != "initial":
        raise PhaseError(f"train_initial_phase needs the initial phase, state is in {state.phase!r}")
    steps = state.config.train.steps_initial if steps is None else steps
    return _run_steps(state, data, steps, initial_step, ev, sink)


def transition(state: PhaseState) -> PhaseState:
    """Freeze T (and the auxiliaries), attach G2, build D and fresh optimizers."""
    if state.transitioned or state.phase != "initial":
        raise TransitionError(f"transition already performed or not allowed from the {state.phase!r} phase")
    cfg, n, seed = state.config, state.config.nets, state.config.train.seed
    state.freeze("T")
    if state.mode != "ordinary_reg":
        state.freeze("Duv")
        state.freeze("Da")
    G2 = build_enhancer(cfg.plan, rng=[seed, 25], channels=n.g2_channels, res_blocks=n.g2_res_blocks)
    if cfg.train.d_init == "teacher":
        D = build_discriminator("enhancing", cfg.plan, rng=[seed, 26], family=cfg.train.family, channels=n.t_channels)
        for k, p in state.nets["T"].params.items():
            if k in D.params and D.params[k].shape == p.shape:
                D.params[k].data = p.data.copy()
    else:
        D = build_discriminator("enhancing", cfg.plan, rng=[seed, 26], family=cfg.train.family, channels=n.d_channels)
    state.nets["G2"], state.nets["D"] = G2, D
    state.optimizers["G"] = state.adam(state.nets["G1"], G2)
    state.optimizers["D"] = state.adam(D)
    state.phase, state.phase_step, state.transitioned = "enhancing", 0, True
    state.alpha = 0.0 if state.mode == "progressive" else 1.0
    state.last_terms = {}
    return state


def train_enhancing_phase(
    state: PhaseState, data: ToyDataset, steps: int | None = None, ev: EvalSet | None = None, sink: MetricsLog | None = None
) -> PhaseState:
    if state.phase != "enhancing":
        raise PhaseError(f"train_enhancing_phase needs the enhancing phase, state is in {state.phase!r}")
    steps = state.config.train.steps_enhancing if steps is None else steps
    return _run_steps(state, data, steps, enhancing_step, ev, sink)


def train_single_phase(
    state: PhaseState, data: ToyDataset, steps: int | None = None, ev: EvalSet | None = None, sink: MetricsLog | None = None
) -> PhaseState:
    if state.phase != "single":
        raise PhaseError("train_single_phase needs a single_phase state")
    t = state.config.train
    steps = t.steps_initial + t.steps_enhancing if steps is None else steps
    return _run_steps(state, data, steps, single_step, ev, sink)


# -- driver -----------------------------------------------------------------------------------


def checkpoint_meta(state: PhaseState) -> dict:
    cfg = state.config
    return {
        "format": "biphasic-checkpoint",
        "mode": state.mode,
        "family": cfg.train.family,
        "phase": state.phase,
        "step": state.step,
        "alpha": state.alpha,
        "spec": cfg.domain.to_dict(),
        "plan": {"initial_hw": cfg.plan.initial_hw, "full_hw": cfg.plan.full_hw},
        "config": dump_config(cfg),
    }


def save_state(state: PhaseState, path: str | Path) -> Path:
    return save_bundle(path, state.nets, checkpoint_meta(state))


@dataclass
class RunResult:
    state: PhaseState
    checkpoints: list[Path]
    metrics_path: Path
    rows: list[dict]


def run(cfg: RunConfig, out_dir: str | Path, estimators: Estimators | None = None, splits: Splits | None = None) -> RunResult:
    """Train per ``cfg.train.mode`` and write checkpoints plus metrics.csv under ``out_dir``."""
    cfg.validate()
    out = Path(out_dir)
    ckpt_dir = out / "checkpoints"
    with threadpool_limits(cfg.train.threads):
        splits = splits or make_splits(cfg)
        estimators = estimators or pretrain_estimators(splits.external, cfg)
        state = init_state(cfg, estimators)
        ev = make_eval_set(splits.test, cfg, estimators)
        sink = MetricsLog(out / "metrics.csv")
        written: list[Path] = []
        try:
            if state.mode == "single_phase":
                train_single_phase(state, splits.train, ev=ev, sink=sink)
                written.append(save_state(state, ckpt_dir / "final.ckpt"))
            else:
                train_initial_phase(state, splits.train, ev=ev, sink=sink)
                written.append(save_state(state, ckpt_dir / "initial.ckpt"))
                transition(state)
                _log_row(state, ev, sink, with_losses=False)
                train_enhancing_phase(state, splits.train, ev=ev, sink=sink)
                written.append(save_state(state, ckpt_dir / "enhancing.ckpt"))
        except TrainingDiverged:
            # parameters are still finite: updates happen only after all checks pass
            save_state(state, ckpt_dir / "last_good.ckpt")
            raise
    return RunResult(state, written, sink.path, sink.rows)
