"""Alternating adversarial optimisation of a :class:`~cmgan.model.CmGanModel`.

One iteration draws a batch, takes one discriminator update and then
``generator_steps`` generator updates, each on a freshly drawn batch.
Discriminators are trained on the log-likelihood objectives (ascent,
implemented as descent on the negation). Generators descend the
non-saturating fooling loss ``-log D(fake)`` plus the semantic
cross-entropy and an optional reconstruction MSE.
"""

from __future__ import annotations

import copy
import csv
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable

import numpy as np

from . import model as M
from .data import FeatureDataset, rng_from_seed
from .errors import ConfigError, DivergenceError, MismatchUnsatisfiableError
from .eval import bimodal_map
from .nn import SGD, GradStore, log_likelihood, sequential_backward, softmax_xent

LOG_COLUMNS = ("epoch", "l_gan1", "l_gan2", "sem_loss", "d_acc_intra", "d_acc_inter",
               "val_map_i2t", "val_map_t2i")


@dataclass
class TrainConfig:
    batch_size: int = 64
    generator_steps: int = 2
    learning_rate: float = 1e-3
    epochs: int = 200
    semantic_weight: float = 1.0
    reconstruction_weight: float | None = None
    seed: int = 0
    momentum: float = 0.0
    steps_per_epoch: int | None = None
    weight_sharing: bool = True
    semantic_constraint: bool = True
    intra_discrimination: bool = True
    adversarial: bool = True
    literal_generator_sign: bool = False

    def validate(self):
        if self.batch_size < 2:
            raise ConfigError(f"batch_size must be >= 2, got {self.batch_size}")
        if self.generator_steps < 1:
            raise ConfigError(f"generator_steps must be >= 1, got {self.generator_steps}")
        if not self.learning_rate > 0:
            raise ConfigError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.epochs < 0:
            raise ConfigError(f"epochs must be >= 0, got {self.epochs}")
        if self.semantic_weight < 0:
            raise ConfigError(f"semantic_weight must be >= 0, got {self.semantic_weight}")
        if self.reconstruction_weight is not None and self.reconstruction_weight < 0:
            raise ConfigError(f"reconstruction_weight must be >= 0, got {self.reconstruction_weight}")
        if self.steps_per_epoch is not None and self.steps_per_epoch < 1:
            raise ConfigError(f"steps_per_epoch must be >= 1, got {self.steps_per_epoch}")
        if not 0 <= self.momentum < 1:
            raise ConfigError(f"momentum must lie in [0, 1), got {self.momentum}")
        return self

    @property
    def lambda_sc(self) -> float:
        return self.semantic_weight if self.semantic_constraint else 0.0

    @property
    def lambda_rec(self) -> float:
        if self.reconstruction_weight is not None:
            return self.reconstruction_weight
        return 0.0 if self.adversarial else 1.0

    @classmethod
    def from_dict(cls, d: dict) -> TrainConfig:
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown training config keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Batch:
    img: np.ndarray
    txt: np.ndarray
    labels: np.ndarray
    mis_img: np.ndarray
    mis_txt: np.ndarray
    index: np.ndarray
    mis_img_index: np.ndarray
    mis_txt_index: np.ndarray

    @property
    def size(self) -> int:
        return int(self.labels.shape[0])


class MismatchSampler:
    """Uniform draws from "every instance whose category differs from c".

    Indices are grouped by category; the ``u``-th non-``c`` index is found by
    skipping over category ``c``'s contiguous block.
    """

    def __init__(self, labels: np.ndarray):
        labels = np.asarray(labels)
        cats = np.unique(labels)
        if cats.size < 2:
            raise MismatchUnsatisfiableError(
                f"dataset has {cats.size} category; a mismatched instance needs a different category")
        self.order = np.argsort(labels, kind="stable")
        counts = np.bincount(labels)
        self.start = np.concatenate([[0], np.cumsum(counts)[:-1]])
        self.count = counts
        self.n = labels.size

    def draw(self, cats: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        others = self.n - self.count[cats]
        u = np.floor(rng.random(cats.size) * others).astype(np.int64)
        pos = np.where(u < self.start[cats], u, u + self.count[cats])
        return self.order[pos]


def sample_batch(ds: FeatureDataset, n: int, rng: np.random.Generator,
                 sampler: MismatchSampler | None = None) -> Batch:
    """N matched pairs without replacement, plus an independent mismatched
    instance per modality for every pair."""
    sampler = sampler or MismatchSampler(ds.labels)
    if n > ds.n:
        raise ConfigError(f"batch size {n} exceeds dataset size {ds.n}")
    idx = rng.choice(ds.n, size=n, replace=False)
    labels = ds.labels[idx]
    mi = sampler.draw(labels, rng)
    mt = sampler.draw(labels, rng)
    return Batch(
        img=ds.image[idx].astype(np.float64), txt=ds.text[idx].astype(np.float64), labels=labels,
        mis_img=ds.image[mi].astype(np.float64), mis_txt=ds.text[mt].astype(np.float64),
        index=idx, mis_img_index=mi, mis_txt_index=mt,
    )


# --- generator forward under a frozen snapshot -----------------------------

def _generate(model, batch, update_stats: bool):
    s_i, c_si = M.encode_trace(model, "image", batch.img, "train", update_stats)
    s_t, c_st = M.encode_trace(model, "text", batch.txt, "train", update_stats)
    r_i, c_ri = M.decode_trace(model, "image", s_i, "train", update_stats)
    r_t, c_rt = M.decode_trace(model, "text", s_t, "train", update_stats)
    return (s_i, c_si), (s_t, c_st), (r_i, c_ri), (r_t, c_rt)


def _intra_inputs(batch, r_i, r_t):
    return {"image": (batch.img, r_i), "text": (batch.txt, r_t)}


def _inter_inputs(batch, s_i, s_t, sm_i, sm_t):
    """Rows ``[real; cross-modal fake; mismatched fake]`` per pathway."""
    return {
        "image": (np.vstack([s_i, s_t, sm_i]), np.vstack([batch.img, batch.img, batch.mis_img])),
        "text": (np.vstack([s_t, s_i, sm_t]), np.vstack([batch.txt, batch.txt, batch.mis_txt])),
    }


def _frozen_generator_outputs(model, batch):
    (s_i, _), (s_t, _), (r_i, _), (r_t, _) = _generate(model, batch, update_stats=False)
    sm_i, _ = M.encode_trace(model, "image", batch.mis_img, "train", False)
    sm_t, _ = M.encode_trace(model, "text", batch.mis_txt, "train", False)
    return s_i, s_t, r_i, r_t, sm_i, sm_t


def intra_objective(model, modality, real, fake, grads: GradStore | None = None,
                    update_stats: bool = True) -> tuple[float, float]:
    """``mean log D(real) + mean log(1 - D(fake))`` and the accuracy.

    With ``grads``, accumulates the gradient of the *negated* objective.
    """
    n = real.shape[0]
    p, caches = M.intra_trace(model, modality, np.vstack([real, fake]), "train", update_stats)
    lr, gr = log_likelihood(p[:n], real=True)
    lf, gf = log_likelihood(p[n:], real=False)
    obj = float(lr.mean() + lf.mean())
    if grads is not None:
        sequential_backward(-np.vstack([gr / n, gf / fake.shape[0]]), caches, grads)
    acc = float((np.count_nonzero(p[:n] > 0.5) + np.count_nonzero(p[n:] < 0.5)) / p.shape[0])
    return obj, acc


def inter_objective(model, pathway, s_rows, h_rows, grads: GradStore | None = None,
                    update_stats: bool = True) -> tuple[float, float]:
    """``mean log D(real) + (mean log(1-D(cross)) + mean log(1-D(mismatch))) / 2``.

    ``s_rows``/``h_rows`` are stacked as real, cross-modal fake, mismatched fake.
    """
    n = s_rows.shape[0] // 3
    p, caches = M.inter_trace(model, pathway, s_rows, h_rows, "train", update_stats)
    lr, gr = log_likelihood(p[:n], real=True)
    lf, gf = log_likelihood(p[n:], real=False)
    obj = float(lr.mean() + 0.5 * lf[:n].mean() + 0.5 * lf[n:].mean())
    if grads is not None:
        sequential_backward(-np.vstack([gr / n, gf * (0.5 / n)]), caches, grads)
    acc = float((np.count_nonzero(p[:n] > 0.5) + np.count_nonzero(p[n:] < 0.5)) / p.shape[0])
    return obj, acc


def _finite(values: dict, what: str):
    for k, v in values.items():
        if not math.isfinite(v):
            raise DivergenceError(f"non-finite {what} loss {k}={v}")


def discriminator_step(model, batch: Batch, lr: float, intra: bool = True,
                       optimizer: SGD | None = None) -> dict:
    """One ascent step on D_I, D_T (if ``intra``), D_Ci and D_Ct.

    Generator outputs are computed with batch statistics but without
    touching any generator state, running averages included.
    """
    s_i, s_t, r_i, r_t, sm_i, sm_t = _frozen_generator_outputs(model, batch)
    grads = GradStore()
    out = {}
    if intra:
        for m, (real, fake) in _intra_inputs(batch, r_i, r_t).items():
            out[f"obj_intra_{m}"], out[f"acc_intra_{m}"] = intra_objective(model, m, real, fake, grads)
    for m, (s_rows, h_rows) in _inter_inputs(batch, s_i, s_t, sm_i, sm_t).items():
        out[f"obj_inter_{m}"], out[f"acc_inter_{m}"] = inter_objective(model, m, s_rows, h_rows, grads)
    _finite(out, "discriminator")
    layers = model.discriminator_layers().values()
    (optimizer or SGD(lr)).step(layers, grads)
    return out


def generator_loss(model, batch: Batch, lambda_sc: float, lambda_rec: float,
                   adversarial: bool = True, intra: bool = True, literal_sign: bool = False,
                   grads: GradStore | None = None, update_stats: bool = True,
                   pathways: tuple[str, ...] = M.MODALITIES) -> dict:
    """Generator objective for both pathways; accumulates into ``grads``.

    Per pathway the adversarial term is ``-mean log D_Ct(s_i, h_t) - mean
    log D_I(r_i)`` (image) and ``-mean log D_Ci(s_t, h_i) - mean log
    D_T(r_t)`` (text). With ``literal_sign`` the sign is flipped, i.e. the
    printed log-likelihoods are descended directly. Discriminators run with
    their running batch-norm statistics and receive no gradient.
    ``pathways`` restricts every term to the listed pathways (both by default).
    """
    n = batch.size
    (s_i, c_si), (s_t, c_st), (r_i, c_ri), (r_t, c_rt) = _generate(model, batch, update_stats)
    g_s = {"image": np.zeros_like(s_i), "text": np.zeros_like(s_t)}
    g_r = {"image": np.zeros_like(r_i), "text": np.zeros_like(r_t)}
    s = {"image": s_i, "text": s_t}
    r = {"image": r_i, "text": r_t}
    h = {"image": batch.img, "text": batch.txt}
    other = {"image": "text", "text": "image"}
    sign = 1.0 if literal_sign else -1.0
    adv = sem = rec = 0.0
    adv_path = {"image": 0.0, "text": 0.0}
    if adversarial:
        for m in pathways:
            o = other[m]
            # cross term: this pathway's common rep scored by the other pathway's D
            p, caches = M.inter_trace(model, o, s[m], h[o], "infer")
            ll, dll = log_likelihood(p, real=True)
            adv_path[m] += sign * float(ll.mean())
            if grads is not None:
                gx = sequential_backward(sign * dll / n, caches, None)
                g_s[m] += gx[:, :model.dims.common_dim]
            if intra:
                p, caches = M.intra_trace(model, m, r[m], "infer")
                ll, dll = log_likelihood(p, real=True)
                adv_path[m] += sign * float(ll.mean())
                if grads is not None:
                    g_r[m] += sequential_backward(sign * dll / n, caches, None)
    sem_caches = {}
    if lambda_sc > 0:
        for m in pathways:
            logits, sem_caches[m] = M.semantic_trace(model, s[m], "train", update_stats)
            loss, glog = softmax_xent(logits, batch.labels)
            sem += loss
            if grads is not None:
                g_s[m] += sequential_backward(lambda_sc * glog, sem_caches[m], grads)
    if lambda_rec > 0:
        for m in pathways:
            diff = r[m] - h[m]
            rec += float(np.mean(diff ** 2))
            g_r[m] += lambda_rec * 2.0 * diff / diff.size
    adv = adv_path["image"] + adv_path["text"]
    total = adv + lambda_sc * sem + lambda_rec * rec
    out = {"adv": adv, "adv_image": adv_path["image"], "adv_text": adv_path["text"],
           "semantic": sem, "reconstruction": rec, "total": total}
    _finite(out, "generator")
    if grads is not None:
        caches = {"image": (c_si, c_ri), "text": (c_st, c_rt)}
        for m in pathways:
            c_enc, c_dec = caches[m]
            gs = g_s[m]
            if np.any(g_r[m]):
                gs = gs + sequential_backward(g_r[m], c_dec, grads)
            sequential_backward(gs, c_enc, grads)
    return out


def generator_step(model, batch: Batch, lr: float, lambda_sc: float = 1.0, lambda_rec: float = 0.0,
                   adversarial: bool = True, intra: bool = True, literal_sign: bool = False,
                   optimizer: SGD | None = None) -> dict:
    """One descent step on every generator parameter (semantic head included).

    Both pathways' losses are summed before the update, so a shared encoder
    layer receives the sum of its two gradients and moves once.
    """
    grads = GradStore()
    out = generator_loss(model, batch, lambda_sc, lambda_rec, adversarial, intra, literal_sign, grads)
    (optimizer or SGD(lr)).step(model.generator_layers().values(), grads)
    return out


def eval_losses(model, batch: Batch) -> tuple[float, float]:
    """Score-difference monitors ``(L_GAN1, L_GAN2)``; no state changes."""
    s_i, s_t, r_i, r_t, sm_i, sm_t = _frozen_generator_outputs(model, batch)
    l1 = 0.0
    for m, (real, fake) in _intra_inputs(batch, r_i, r_t).items():
        k = real.shape[0]
        p, _ = M.intra_trace(model, m, np.vstack([real, fake]), "train", update_stats=False)
        l1 += float(p[:k].mean() - p[k:].mean())
    l2 = 0.0
    for m, (s_rows, h_rows) in _inter_inputs(batch, s_i, s_t, sm_i, sm_t).items():
        k = s_rows.shape[0] // 3
        p, _ = M.inter_trace(model, m, s_rows, h_rows, "train", update_stats=False)
        l2 += float(p[:k].mean() - 0.5 * p[k:2 * k].mean() - 0.5 * p[2 * k:].mean())
    return l1, l2


# --- training loop ---------------------------------------------------------

@dataclass
class EpochRecord:
    epoch: int
    l_gan1: float
    l_gan2: float
    sem_loss: float
    d_acc_intra: float
    d_acc_inter: float
    val_map_i2t: float
    val_map_t2i: float

    @property
    def val_map_avg(self) -> float:
        return (self.val_map_i2t + self.val_map_t2i) / 2

    def row(self) -> list[str]:
        return [str(self.epoch)] + [repr(float(getattr(self, c))) for c in LOG_COLUMNS[1:]]


@dataclass
class TrainLog:
    records: list[EpochRecord] = field(default_factory=list)
    best_epoch: int = 0
    best_val_map: float = float("nan")
    discriminator_steps: int = 0
    generator_steps: int = 0

    def to_csv(self, path):
        with open(path, "w", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(LOG_COLUMNS)
            for r in self.records:
                w.writerow(r.row())


class TrainingDiverged(DivergenceError):
    def __init__(self, message, log: TrainLog, epoch=None, step=None):
        super().__init__(message, epoch, step)
        self.log = log


def validation_map(model, ds: FeatureDataset) -> tuple[float, float]:
    s_img = M.encode(model, "image", ds.image)
    s_txt = M.encode(model, "text", ds.text)
    i2t, t2i = bimodal_map(s_img, s_txt, ds.labels)
    return i2t.map, t2i.map


def _disc_accuracy(model, batch, intra: bool) -> tuple[float, float]:
    s_i, s_t, r_i, r_t, sm_i, sm_t = _frozen_generator_outputs(model, batch)
    a_intra = []
    if intra:
        for m, (real, fake) in _intra_inputs(batch, r_i, r_t).items():
            a_intra.append(intra_objective(model, m, real, fake, None, update_stats=False)[1])
    a_inter = [inter_objective(model, m, s, h, None, update_stats=False)[1]
               for m, (s, h) in _inter_inputs(batch, s_i, s_t, sm_i, sm_t).items()]
    return (float(np.mean(a_intra)) if a_intra else 0.0), float(np.mean(a_inter))


def check_compatible(model, config: TrainConfig, train_ds: FeatureDataset):
    if model.weight_sharing != config.weight_sharing:
        raise ConfigError(
            f"model weight_sharing={model.weight_sharing} but config weight_sharing={config.weight_sharing}")
    dims = model.dims
    if (dims.d_img, dims.d_txt) != (train_ds.d_img, train_ds.d_txt):
        raise ConfigError(
            f"model dims image={dims.d_img}, text={dims.d_txt} vs dataset image={train_ds.d_img}, "
            f"text={train_ds.d_txt}")
    if train_ds.n_classes > dims.n_classes:
        raise ConfigError(f"dataset has {train_ds.n_classes} categories, model head has {dims.n_classes}")


HookFn = Callable[[str, object, dict], None]


def train(model, train_ds: FeatureDataset, val_ds: FeatureDataset, config: TrainConfig,
          log_path=None, hook: HookFn | None = None):
    """Run the alternating procedure and return ``(best_model, log)``.

    The input model is not modified. ``hook(event, model, info)`` is called
    after every ``"discriminator"`` and ``"generator"`` update and at every
    ``"epoch"`` end. The returned model is the one with the best validation
    bi-modal average MAP (the input copy when ``epochs == 0``).
    """
    config.validate()
    check_compatible(model, config, train_ds)
    if not set(np.unique(train_ds.labels)) & set(np.unique(val_ds.labels)):
        raise ConfigError("train and validation sets share no category")
    model = copy.deepcopy(model)
    log = TrainLog()
    best = copy.deepcopy(model)
    if config.epochs == 0:
        return best, log
    rng = rng_from_seed(config.seed)
    sampler = MismatchSampler(train_ds.labels)
    steps = config.steps_per_epoch or max(1, train_ds.n // config.batch_size)
    d_opt = SGD(config.learning_rate, config.momentum)
    g_opt = SGD(config.learning_rate, config.momentum)
    intra = config.intra_discrimination
    fixed_acc = None
    if not config.adversarial:
        probe = sample_batch(train_ds, config.batch_size, rng_from_seed(config.seed), sampler)
        fixed_acc = _disc_accuracy(model, probe, intra)
    csv_file = None
    if log_path is not None:
        csv_file = open(log_path, "w", newline="")
        writer = csv.writer(csv_file, lineterminator="\n")
        writer.writerow(LOG_COLUMNS)
        csv_file.flush()
    try:
        for epoch in range(1, config.epochs + 1):
            sem_total, sem_count = 0.0, 0
            acc_sum = np.zeros(2)
            for step in range(steps):
                try:
                    batch = sample_batch(train_ds, config.batch_size, rng, sampler)
                    if config.adversarial:
                        d_out = discriminator_step(model, batch, config.learning_rate, intra, d_opt)
                        log.discriminator_steps += 1
                        acc_sum += _step_accuracy(d_out, intra)
                        if hook:
                            hook("discriminator", model, {"epoch": epoch, "step": step, **d_out})
                    for _ in range(config.generator_steps):
                        gb = sample_batch(train_ds, config.batch_size, rng, sampler)
                        g_out = generator_step(
                            model, gb, config.learning_rate, config.lambda_sc, config.lambda_rec,
                            config.adversarial, intra, config.literal_generator_sign, g_opt)
                        log.generator_steps += 1
                        sem_total += g_out["semantic"]
                        sem_count += 1
                        if hook:
                            hook("generator", model, {"epoch": epoch, "step": step, **g_out})
                except DivergenceError as exc:
                    raise TrainingDiverged(str(exc), log, epoch, step) from exc
            l1, l2 = eval_losses(model, batch)
            if config.adversarial:
                acc_intra, acc_inter = acc_sum / steps
            else:
                acc_intra, acc_inter = fixed_acc
            vi2t, vt2i = validation_map(model, val_ds)
            rec = EpochRecord(epoch, l1, l2, sem_total / max(sem_count, 1), float(acc_intra),
                              float(acc_inter), vi2t, vt2i)
            if not all(math.isfinite(v) for v in (l1, l2, rec.sem_loss)):
                raise TrainingDiverged("non-finite monitoring value", log, epoch)
            log.records.append(rec)
            if csv_file is not None:
                writer.writerow(rec.row())
                csv_file.flush()
            if not rec.val_map_avg <= log.best_val_map:  # also true while best is nan
                log.best_val_map = rec.val_map_avg
                log.best_epoch = epoch
                best = copy.deepcopy(model)
            if hook:
                hook("epoch", model, {"epoch": epoch, "record": rec})
    finally:
        if csv_file is not None:
            csv_file.close()
    return best, log


def _step_accuracy(d_out: dict, intra: bool) -> np.ndarray:
    a_intra = (d_out["acc_intra_image"] + d_out["acc_intra_text"]) / 2 if intra else 0.0
    a_inter = (d_out["acc_inter_image"] + d_out["acc_inter_text"]) / 2
    return np.array([a_intra, a_inter])


def build_model(dims: M.ModelDims, config: TrainConfig, seed: int | None = None) -> M.CmGanModel:
    """Initialise a model whose weight-sharing matches ``config``."""
    return M.CmGanModel.build(dims, config.seed if seed is None else seed,
                              weight_sharing=config.weight_sharing)


def save_log(log: TrainLog, path):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    log.to_csv(path)
