"""Joint optimisation loop, schedules, SGD with momentum, checkpoints."""
from __future__ import annotations

import json
import logging
import math
import struct
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import NumericFault, Tape, Tensor
from .data import Batcher, PdaTask, TrainData
from .label import SharpenConfig, label_loss, pseudo_label_batch, stack_accepted
from .mix import MixConfig, build_mix_batches, mix_loss
from .models import (NETWORKS, DomainStandardizer, MlpParams, ModelBundle, ModelConfig, build_models,
                     mlp_forward)
from .objective import (LOSS_TERMS, EntropyWeights, LossBreakdown, SmoothingConfig, adv_loss, smooth_labels,
                        supervised_loss, total_loss)
from .selection import SelectConfig, partition_batch, select_all, select_loss

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"SLMPDA-CKPT\n"
CHECKPOINT_VERSION = 1


class TrainingFault(RuntimeError):
    def __init__(self, step: int, term: str, cause: Exception):
        self.step = step
        self.term = term
        super().__init__(f"step {step}, term '{term}': {cause}")


class CheckpointError(ValueError):
    pass


# ---------------------------------------------------------------------------
# config


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 1000
    batch_size: int = 64
    lr_selector: float = 5e-3
    lr_classifier: float = 5e-3
    lr_extractor: float = 5e-4
    lr_discriminator: float = 5e-4
    lr_min: float = 0.0
    momentum: float = 0.9
    wd_selector: float = 1e-3
    wd_other: float = 5e-4
    tau_min: float = 0.1
    alpha_min: float = 0.02
    anneal_frac: float = 0.8  # fraction of training at which tau/alpha reach their floors
    grl_gamma: float = 10.0
    use_select: bool = True
    use_label: bool = True
    use_mix: bool = True
    entropy_conditioning: bool = True
    standardize: bool = False
    weight_sup: float = 1.0
    weight_adv: float = 1.0
    weight_select: float = 1.0
    weight_label: float = 1.0
    weight_mix_cls: float = 1.0
    weight_mix_dom: float = 1.0
    self_training_start: float = 0.0  # fraction of training before the label/mix terms switch on
    eval_every: int = 250
    seed: int = 0
    model: ModelConfig = field(default_factory=ModelConfig)
    select: SelectConfig = field(default_factory=SelectConfig)
    label: SharpenConfig = field(default_factory=SharpenConfig)
    mix: MixConfig = field(default_factory=MixConfig)
    smoothing: SmoothingConfig = field(default_factory=SmoothingConfig)

    def __post_init__(self):
        if self.steps < 0:
            raise ValueError("train.steps must be >= 0")
        if self.batch_size < 1:
            raise ValueError("train.batch_size must be >= 1")
        for name in ("lr_selector", "lr_classifier", "lr_extractor", "lr_discriminator", "lr_min",
                     "wd_selector", "wd_other"):
            if getattr(self, name) < 0:
                raise ValueError(f"train.{name} must be >= 0")
        if not 0 <= self.momentum < 1:
            raise ValueError("train.momentum must lie in [0, 1)")
        if not 0 < self.tau_min <= self.select.tau:
            raise ValueError("train.tau_min must lie in (0, select.tau]")
        if not 0 < self.alpha_min <= self.label.alpha:
            raise ValueError("train.alpha_min must lie in (0, label.alpha]")
        if not 0 < self.anneal_frac <= 1:
            raise ValueError("train.anneal_frac must lie in (0, 1]")
        if not 0 <= self.self_training_start < 1:
            raise ValueError("train.self_training_start must lie in [0, 1)")
        if self.eval_every < 0:
            raise ValueError("train.eval_every must be >= 0")
        for k in LOSS_TERMS:
            if getattr(self, f"weight_{k}") < 0:
                raise ValueError(f"train.weight_{k} must be >= 0")

    def learning_rates(self) -> dict[str, float]:
        return {"G": self.lr_extractor, "F": self.lr_classifier, "D": self.lr_discriminator, "H": self.lr_selector}

    def weight_decays(self) -> dict[str, float]:
        return {"G": self.wd_other, "F": self.wd_other, "D": self.wd_other, "H": self.wd_selector}

    def schedules(self) -> "Schedules":
        return Schedules(self.steps, self.select.tau, self.tau_min, self.label.alpha, self.alpha_min,
                         self.anneal_frac, self.grl_gamma, self.lr_min)


# ---------------------------------------------------------------------------
# schedules


@dataclass(frozen=True)
class Schedules:
    total_steps: int
    tau0: float = 1.0
    tau_min: float = 0.1
    alpha0: float = 0.1
    alpha_min: float = 0.02
    anneal_frac: float = 0.8
    grl_gamma: float = 10.0
    lr_min: float = 0.0

    def progress(self, t: float) -> float:
        if not 0 <= t <= self.total_steps:
            raise ValueError(f"t={t} outside [0, {self.total_steps}]")
        return t / self.total_steps if self.total_steps else 0.0

    def decay_rate(self, v0: float, vmin: float) -> float:
        """r such that v0 * exp(-r * anneal_frac) == vmin."""
        return math.log(v0 / vmin) / self.anneal_frac if v0 > vmin else 0.0


def schedule_value(s: Schedules, which: str, t: float, lr0: float | None = None) -> float:
    """tau / alpha: exponential decay with a floor; grl_lambda: 2/(1+e^(-gamma p)) - 1; lr: cosine."""
    p = s.progress(t)
    if which == "tau":
        return max(s.tau_min, s.tau0 * math.exp(-s.decay_rate(s.tau0, s.tau_min) * p))
    if which == "alpha":
        return max(s.alpha_min, s.alpha0 * math.exp(-s.decay_rate(s.alpha0, s.alpha_min) * p))
    if which == "grl_lambda":
        return 2.0 / (1.0 + math.exp(-s.grl_gamma * p)) - 1.0
    if which == "lr":
        if lr0 is None:
            raise ValueError("lr schedule needs lr0")
        return s.lr_min + 0.5 * (lr0 - s.lr_min) * (1.0 + math.cos(math.pi * p))
    raise ValueError(f"unknown schedule {which!r}")


# ---------------------------------------------------------------------------
# optimiser


@dataclass
class OptState:
    buffers: list[np.ndarray]
    step: int = 0

    @classmethod
    def zeros_like(cls, params: list[np.ndarray]) -> "OptState":
        return cls([np.zeros_like(p) for p in params])


def sgd_step(params: list[np.ndarray], grads: list[np.ndarray], lr: float, momentum: float,
             weight_decay: float, state: OptState) -> None:
    """In place: v <- m v + g + wd w ;  w <- w - lr v."""
    if len(params) != len(grads) or len(params) != len(state.buffers):
        raise ValueError("params, grads and momentum buffers must pair up")
    for w, g, v in zip(params, grads, state.buffers):
        if w.shape != g.shape or w.shape != v.shape:
            raise ValueError(f"shape mismatch in sgd_step: {w.shape}, {g.shape}, {v.shape}")
        v *= momentum
        v += g
        if weight_decay:
            v += weight_decay * w
        w -= lr * v
    state.step += 1


# ---------------------------------------------------------------------------
# training


@dataclass
class StepResult:
    breakdown: LossBreakdown
    partition_hard: np.ndarray


@dataclass
class TrainReport:
    models: ModelBundle
    records: list[dict]
    opt_states: dict[str, OptState]
    step: int
    evaluations: list[dict] = field(default_factory=list)

    @property
    def final(self) -> dict:
        return self.evaluations[-1] if self.evaluations else {}

    def accuracy_trajectory(self) -> list[tuple[int, float]]:
        return [(e["step"], e["target_accuracy"]) for e in self.evaluations if "target_accuracy" in e]


@contextmanager
def _term(step: int, name: str):
    try:
        yield
    except NumericFault as exc:
        raise TrainingFault(step, name, exc) from exc


def rng_streams(seed: int) -> dict[str, np.random.Generator]:
    """Independent generators so that toggling a module never shifts the data order."""
    return {name: np.random.default_rng([seed, k]) for k, name in enumerate(("data", "init", "select", "mix"))}


class Trainer:
    """Holds the mutable training state; ``run`` drives it for ``config.steps`` steps."""

    def __init__(self, config: TrainConfig, data: TrainData,
                 evaluator: Callable[[ModelBundle], dict] | None = None):
        self.cfg = config
        self.rngs = rng_streams(config.seed)
        self.standardizer = DomainStandardizer(data.source_x, data.target_x) if config.standardize else None
        if self.standardizer is not None:
            data = TrainData(self.standardizer(data.source_x, "source"), data.source_y,
                             self.standardizer(data.target_x, "target"), data.n_classes)
        self.data = data
        self.evaluator = evaluator
        self.models = build_models(data.dim, data.n_classes, self.rngs["init"], config.model)
        self.opt = {k: OptState.zeros_like(v.arrays()) for k, v in self.models.nets().items()}
        self.batcher = Batcher(data, config.batch_size, self.rngs["data"])
        self.sched = config.schedules()
        self.t = 0
        self.records: list[dict] = []
        self.evaluations: list[dict] = []

    def scalars(self, t: int) -> dict[str, float]:
        s = self.sched
        return {
            "tau": schedule_value(s, "tau", t),
            "alpha": schedule_value(s, "alpha", t),
            "grl_lambda": schedule_value(s, "grl_lambda", t),
            "lr": schedule_value(s, "lr", t, self.cfg.lr_extractor),
        }

    def step(self) -> dict:
        cfg, t = self.cfg, self.t
        sc = self.scalars(t)
        (xs, ys), xt = self.batcher.next_batch()
        b_s = xs.shape[0]
        C = self.data.n_classes
        tape = Tape()
        m = self.models.attach(tape)

        with _term(t, "select"):
            if cfg.use_select:
                part = partition_batch(m.H, xs, sc["tau"], self.rngs["select"])
            else:
                part = select_all(b_s)
        sel = part.selected

        with _term(t, "forward"):
            feats = mlp_forward(m.G, np.concatenate([xs, xt]))
            logits = mlp_forward(m.F, feats)
            fs, ft = ad.take_rows(feats, slice(0, b_s)), ad.take_rows(feats, slice(b_s, None))
            ls, lt = ad.take_rows(logits, slice(0, b_s)), ad.take_rows(logits, slice(b_s, None))
        probs = ad.softmax(Tensor(logits.data)).data
        p_src, p_tgt = probs[:b_s], probs[b_s:]
        smoothed = smooth_labels(ys, C, cfg.smoothing.epsilon)

        parts: dict[str, Tensor] = {}
        with _term(t, "sup"):
            parts["sup"] = supervised_loss(ad.take_rows(ls, sel), smoothed[sel])
        with _term(t, "adv"):
            if cfg.entropy_conditioning:
                w = EntropyWeights.from_predictions(p_src[sel], p_tgt)
            else:
                w = EntropyWeights.uniform(sel.size, xt.shape[0])
            parts["adv"] = adv_loss(m.D, ad.take_rows(fs, sel), ft, w, sc["grl_lambda"])
        d_sel = d_dis = None
        if cfg.use_select:
            with _term(t, "select"):
                sl = select_loss(part, fs.data, ft.data, lt, cfg.select)
                parts["select"] = sl.total
                d_sel, d_dis = sl.d_sel, sl.d_dis

        labels = None
        n_accepted = 0
        if cfg.use_label or cfg.use_mix:
            label_cfg = replace(cfg.label, alpha=sc["alpha"])
            labels = pseudo_label_batch(p_tgt, label_cfg)
            n_accepted = sum(lab.accepted for lab in labels)
        if cfg.use_label:
            with _term(t, "label"):
                parts["label"] = label_loss(lt, labels)
        if cfg.use_mix:
            with _term(t, "mix"):
                acc_idx, acc_y = stack_accepted(labels)
                mixed = build_mix_batches(xs[sel], smoothed[sel], xt[acc_idx], acc_y, cfg.mix, self.rngs["mix"])
                parts["mix_cls"], parts["mix_dom"] = mix_loss(m, mixed, sc["grl_lambda"], cfg.mix)

        mult = {k: getattr(cfg, f"weight_{k}") for k in LOSS_TERMS}
        if t < cfg.self_training_start * cfg.steps:
            for k in ("label", "mix_cls", "mix_dom"):
                mult[k] = 0.0
        counts = {"selected_count": int(sel.size), "discarded_count": int(part.discarded.size),
                  "accepted_count": int(n_accepted)}
        with _term(t, "total"):
            root, bd = total_loss(parts, mult, counts)
            grads = ad.backward(tape, root)

        for name in NETWORKS:
            net_t: MlpParams = getattr(m, name)
            g = [grads[p] for p in _flat(net_t)]
            lr = schedule_value(self.sched, "lr", t, cfg.learning_rates()[name])
            sgd_step(self.models.nets()[name].arrays(), g, lr, cfg.momentum, cfg.weight_decays()[name],
                     self.opt[name])
            for arr in self.models.nets()[name].arrays():
                if not np.all(np.isfinite(arr)):
                    raise TrainingFault(t, f"update:{name}", NumericFault("sgd_step"))

        rec = {"step": t, **bd.to_dict(), **sc}
        rec["d_sel"] = d_sel
        rec["d_dis"] = d_dis
        self.t += 1
        return rec

    def evaluate(self) -> dict | None:
        if self.evaluator is None:
            return None
        res = {"step": self.t, **self.evaluator(self.eval_view())}
        self.evaluations.append(res)
        return res

    def eval_view(self) -> "EvalView":
        return EvalView(self.models.copy(), self.standardizer)

    def run(self, on_record: Callable[[dict], None] | None = None) -> TrainReport:
        cfg = self.cfg
        first = self.evaluate()
        if first is not None and on_record is not None:
            on_record({"step": self.t, "eval": True, **{k: v for k, v in first.items() if k != "step"}})
        while self.t < cfg.steps:
            rec = self.step()
            due = cfg.eval_every and self.t % cfg.eval_every == 0
            if self.evaluator is not None and (due or self.t == cfg.steps):
                ev = self.evaluate()
                rec.update({k: v for k, v in ev.items() if k != "step"})
            self.records.append(rec)
            if on_record is not None:
                on_record(rec)
        return TrainReport(self.models, self.records, self.opt, self.t, self.evaluations)


def _flat(net: MlpParams) -> list[Tensor]:
    out = []
    for w, b in zip(net.weights, net.biases):
        out += [w, b]
    return out


@dataclass
class EvalView:
    """Frozen model copy plus the input standardiser used during training."""

    models: ModelBundle
    standardizer: DomainStandardizer | None = None

    def prep(self, x, domain: str) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        return self.standardizer(x, domain) if self.standardizer is not None else x

    def features(self, x, domain: str) -> np.ndarray:
        return self.models.frozen().features(self.prep(x, domain)).data

    def predict_proba(self, x, domain: str) -> np.ndarray:
        return self.models.predict_proba(self.prep(x, domain))

    def select_proba(self, x) -> np.ndarray:
        logits = mlp_forward(self.models.frozen().H, self.prep(x, "source")).data
        z = logits - logits.max(axis=1, keepdims=True)
        e = np.exp(z)
        return (e / e.sum(axis=1, keepdims=True))[:, 0]


def train(config: TrainConfig, task: PdaTask | TrainData,
          evaluator: Callable[[EvalView], dict] | None = None,
          on_record: Callable[[dict], None] | None = None) -> TrainReport:
    """Train on ``task``.  Given a PdaTask, only its TrainData reaches the loop;
    its held-out store is used through the default evaluator."""
    if isinstance(task, PdaTask):
        if evaluator is None:
            from .evaluate import make_evaluator
            evaluator = make_evaluator(task, config.use_select)
        data = task.train
    else:
        data = task
    trainer = Trainer(config, data, evaluator)
    return trainer.run(on_record)


# ---------------------------------------------------------------------------
# checkpoints


@dataclass
class Checkpoint:
    config: dict
    models: ModelBundle
    opt_states: dict[str, OptState]
    step: int
    version: int = CHECKPOINT_VERSION


def _manifest(ckpt: Checkpoint) -> list[dict]:
    out = []
    for name, net in ckpt.models.nets().items():
        for i, a in enumerate(net.arrays()):
            out.append({"kind": "param", "net": name, "index": i, "shape": list(a.shape)})
        for i, a in enumerate(ckpt.opt_states[name].buffers):
            out.append({"kind": "momentum", "net": name, "index": i, "shape": list(a.shape)})
    return out


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    header = {
        "version": ckpt.version,
        "step": ckpt.step,
        "config": ckpt.config,
        "model_config": asdict(ckpt.models.config),
        "opt_steps": {k: v.step for k, v in ckpt.opt_states.items()},
        "manifest": _manifest(ckpt),
    }
    head = json.dumps(header, sort_keys=True).encode("utf-8")
    arrays = []
    for name, net in ckpt.models.nets().items():
        arrays += net.arrays()
        arrays += ckpt.opt_states[name].buffers
    payload = b"".join(np.ascontiguousarray(a, dtype="<f8").tobytes() for a in arrays)
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<Q", len(head)))
        fh.write(head)
        fh.write(payload)


def load_checkpoint(path) -> Checkpoint:
    raw = Path(path).read_bytes()
    if not raw.startswith(CHECKPOINT_MAGIC):
        raise CheckpointError("not a checkpoint file (bad magic)")
    pos = len(CHECKPOINT_MAGIC)
    if len(raw) < pos + 8:
        raise CheckpointError("truncated checkpoint: missing header length")
    (hlen,) = struct.unpack("<Q", raw[pos:pos + 8])
    pos += 8
    if len(raw) < pos + hlen:
        raise CheckpointError("truncated checkpoint: header cut short")
    try:
        header = json.loads(raw[pos:pos + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"unreadable checkpoint header: {exc}") from None
    pos += hlen
    if header.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"checkpoint version {header.get('version')} != supported {CHECKPOINT_VERSION}")
    manifest = header["manifest"]
    sizes = [int(np.prod(e["shape"])) for e in manifest]
    if len(raw) - pos != 8 * sum(sizes):
        raise CheckpointError(f"manifest expects {8 * sum(sizes)} payload bytes, found {len(raw) - pos}")
    payload = np.frombuffer(raw, dtype="<f8", offset=pos).astype(np.float64)
    params = {k: [] for k in NETWORKS}
    buffers = {k: [] for k in NETWORKS}
    off = 0
    for e, n in zip(manifest, sizes):
        arr = payload[off:off + n].reshape(e["shape"]).copy()
        off += n
        (params if e["kind"] == "param" else buffers)[e["net"]].append(arr)
    mc = header["model_config"]
    model_cfg = ModelConfig(**{f.name: tuple(mc[f.name]) if isinstance(mc[f.name], list) else mc[f.name]
                               for f in fields(ModelConfig)})
    try:
        models = ModelBundle(*(MlpParams.from_arrays(params[k]) for k in NETWORKS), model_cfg)
        opt = {k: OptState(buffers[k], header["opt_steps"][k]) for k in NETWORKS}
        for k in NETWORKS:
            if [b.shape for b in opt[k].buffers] != [a.shape for a in models.nets()[k].arrays()]:
                raise CheckpointError(f"momentum buffers of {k} do not match its parameters")
    except (ValueError, KeyError, IndexError) as exc:
        if isinstance(exc, CheckpointError):
            raise
        raise CheckpointError(f"manifest/shape disagreement: {exc}") from None
    return Checkpoint(header["config"], models, opt, header["step"], header["version"])
