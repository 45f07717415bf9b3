"""Staged training: autoencoder, VAE, source classifier, latent GAN, synthetic
dataset generation and downstream classifier, plus the end-to-end scenario run.
"""

import copy
import hashlib
import json
import logging
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn.functional as F

from . import losses as L
from .datasets import (
    Batch,
    BatchIterator,
    CloudArrays,
    DatasetManifest,
    ToyDomainSpec,
    default_data_root,
    load_arrays,
    make_toy_pair,
    write_cloud,
)
from .evalreport import evaluate, scenario_label
from .geometry import DomainTag, PointCloud, normalize_cloud
from .nets import ModelBundle, NetConfig, load_checkpoint, reparameterize, save_checkpoint

log = logging.getLogger(__name__)

PRETRAIN_STAGES = ("ae", "vae", "cls")
ABLATIONS = {
    # name: (use_latent_recon, use_classifier_disc)
    "only-ae": (False, False),
    "ae-l": (True, False),
    "full": (True, True),
}
ABLATION_ROWS = {"only-ae": "only AE", "ae-l": "AE+L", "full": "Ours"}

# importance weights (alpha, beta, gamma) per named adaptation scenario
SCENARIO_WEIGHTS = {
    "M-S": (0.05, 0.05, 0.01),
    "M-S*": (5.0, 5.0, 0.01),
    "S-S*": (10.0, 1.0, 0.01),
    "S*-S": (0.1, 0.1, 0.01),
    "S-M": (0.01, 0.01, 0.01),
    "S*-M": (0.05, 0.05, 0.01),
}


class TrainingAborted(RuntimeError):
    """A stage produced a non-finite loss; the last finite checkpoint is kept."""

    def __init__(self, message: str, checkpoint: Optional[Path] = None):
        super().__init__(message)
        self.checkpoint = checkpoint


class MissingPrerequisite(RuntimeError):
    pass


# --------------------------------------------------------------------------
# configuration
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class StageSchedule:
    learning_rate: float
    adam_beta1: float
    epochs: int
    batch_size: int
    weight_decay: float = 0.0

    def __post_init__(self):
        if self.learning_rate <= 0 or self.batch_size <= 0 or self.epochs < 0:
            raise ValueError(f"invalid stage schedule {self}")


FULL_SCHEDULES = {
    "ae": StageSchedule(5e-4, 0.5, 1000, 32),
    "vae": StageSchedule(5e-4, 0.9, 2000, 200),
    "cls": StageSchedule(1e-4, 0.9, 200, 64),
    "gan": StageSchedule(5e-4, 0.5, 1000, 50),
    "downstream": StageSchedule(1e-4, 0.9, 200, 64, 5e-4),
}

DESK_SCHEDULES = {
    "ae": StageSchedule(5e-4, 0.5, 200, 32),
    "vae": StageSchedule(5e-4, 0.9, 200, 200),
    "cls": StageSchedule(1e-4, 0.9, 100, 64),
    "gan": StageSchedule(5e-4, 0.5, 200, 50),
    "downstream": StageSchedule(1e-4, 0.9, 100, 64, 5e-4),
}


# shortened desk schedules that fit a three-seed toy study into well under an hour on one core
QUICK_SCHEDULES = {
    "ae": StageSchedule(5e-4, 0.5, 40, 32),
    "vae": StageSchedule(5e-4, 0.9, 40, 200),
    "cls": StageSchedule(1e-3, 0.9, 60, 64),
    "gan": StageSchedule(5e-4, 0.5, 30, 50),
    "downstream": StageSchedule(1e-3, 0.9, 60, 64, 5e-4),
}

# scan-like target: points concentrated toward the top, one height slab missing, sensor noise
TOY_SOURCE = ToyDomainSpec(name="toy_source", seed=0)
TOY_TARGET = ToyDomainSpec(name="toy_target", density_bias=2.0, part_dropout=0.3, jitter_sigma=0.01, seed=1)
TOY_WEIGHTS = (0.1, 0.1, 1.0)


@dataclass(frozen=True)
class Ablation:
    use_latent_recon: bool = True
    use_classifier_disc: bool = True
    fake_term: str = "generated"

    @classmethod
    def named(cls, name: str, fake_term: str = "generated") -> "Ablation":
        if name not in ABLATIONS:
            raise ValueError(f"unknown ablation {name!r}; choose from {sorted(ABLATIONS)}")
        latent, classifier = ABLATIONS[name]
        return cls(latent, classifier, fake_term)


@dataclass(frozen=True)
class ToyPair:
    source: ToyDomainSpec
    target: ToyDomainSpec
    per_class: int = 200


@dataclass(frozen=True)
class AdaptationConfig:
    scenario: Tuple[str, str] = ("toy_source", "toy_target")
    weights: L.LossWeights = L.LossWeights(1.0, 1.0, 0.1)
    schedules: Dict[str, StageSchedule] = field(default_factory=lambda: dict(DESK_SCHEDULES))
    ablation: Ablation = Ablation()
    ablations: Tuple[str, ...] = ("full",)
    seed: int = 0
    net: NetConfig = NetConfig(cloud_size=256, n_classes=4)
    emd_method: str = "approx"
    emd_epsilon: float = 1e-2
    kl_weight: float = 1e-3
    samples_per_object: int = 1
    downstream_data: str = "synthetic"
    update_classifier_in_gan: bool = False
    update_mode_encoder_in_gan: bool = False
    supervised_bound: bool = False
    toy: Optional[ToyPair] = None

    def __post_init__(self):
        missing = set(FULL_SCHEDULES) - set(self.schedules)
        if missing:
            raise ValueError(f"schedules missing stages: {sorted(missing)}")
        for name in self.ablations:
            Ablation.named(name)
        if self.ablation.fake_term not in L.FAKE_TERMS:
            raise ValueError(f"fake_term must be one of {L.FAKE_TERMS}")
        if self.downstream_data not in ("synthetic", "source+synthetic"):
            raise ValueError("downstream_data must be 'synthetic' or 'source+synthetic'")
        if self.samples_per_object < 1:
            raise ValueError("samples_per_object must be >= 1")

    @property
    def cloud_size(self) -> int:
        return self.net.cloud_size

    @property
    def mode_dim(self) -> int:
        return self.net.mode_dim

    # ---- serialisation ---------------------------------------------------

    def to_dict(self) -> dict:
        out = {
            "scenario": list(self.scenario),
            "weights": asdict(self.weights),
            "schedules": {k: asdict(v) for k, v in sorted(self.schedules.items())},
            "ablation": asdict(self.ablation),
            "ablations": list(self.ablations),
            "net": self.net.to_dict(),
        }
        for f in fields(self):
            if f.name not in out and f.name != "toy":
                out[f.name] = getattr(self, f.name)
        out["toy"] = None if self.toy is None else {
            "source": _toy_to_dict(self.toy.source),
            "target": _toy_to_dict(self.toy.target),
            "per_class": self.toy.per_class,
        }
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "AdaptationConfig":
        data = dict(data)
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        kw = {}
        for key, value in data.items():
            if key == "scenario":
                value = tuple(value)
            elif key == "weights":
                value = L.LossWeights(**value)
            elif key == "schedules":
                value = {k: StageSchedule(**v) for k, v in value.items()}
            elif key == "ablation":
                value = Ablation(**value)
            elif key == "ablations":
                value = tuple(value)
            elif key == "net":
                value = NetConfig.from_dict(value)
            elif key == "toy" and value is not None:
                value = ToyPair(_toy_from_dict(value["source"]), _toy_from_dict(value["target"]),
                                int(value.get("per_class", 200)))
            kw[key] = value
        return cls(**kw)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True)

    @classmethod
    def load(cls, path) -> "AdaptationConfig":
        path = Path(path)
        if not path.is_file():
            raise FileNotFoundError(f"config file not found: {path}")
        return cls.from_dict(json.loads(path.read_text()))

    def digest(self, keys: Optional[Sequence[str]] = None) -> str:
        data = self.to_dict()
        if keys is not None:
            data = {k: data[k] for k in keys}
        return hashlib.sha256(json.dumps(data, sort_keys=True).encode()).hexdigest()[:16]

    def with_overrides(self, overrides: Sequence[str]) -> "AdaptationConfig":
        """Apply ``dotted.key=value`` overrides; values are parsed as JSON when possible."""
        data = self.to_dict()
        for item in overrides:
            if "=" not in item:
                raise ValueError(f"override {item!r} is not of the form key=value")
            key, raw = item.split("=", 1)
            try:
                value = json.loads(raw)
            except json.JSONDecodeError:
                value = raw
            node = data
            parts = key.split(".")
            for part in parts[:-1]:
                if not isinstance(node, dict) or part not in node:
                    raise ValueError(f"override key {key!r} does not exist")
                node = node[part]
            if not isinstance(node, dict) or parts[-1] not in node:
                raise ValueError(f"override key {key!r} does not exist")
            node[parts[-1]] = value
        return AdaptationConfig.from_dict(data)

    # ---- presets ---------------------------------------------------------

    @classmethod
    def preset(cls, name: str, **kw) -> "AdaptationConfig":
        """Named preset: ``toy`` for the procedural desk-scale pair (``toy-quick``
        with shortened schedules), or a full-scale PointDA-10 scenario such as ``M-S*``.
        """
        if name in ("toy", "toy-quick"):
            base = dict(
                scenario=(TOY_SOURCE.name, TOY_TARGET.name),
                weights=L.LossWeights(*TOY_WEIGHTS),
                schedules=dict(DESK_SCHEDULES if name == "toy" else QUICK_SCHEDULES),
                net=NetConfig.desk(),
                downstream_data="source+synthetic",
                toy=ToyPair(TOY_SOURCE, TOY_TARGET),
            )
            base.update(kw)
            return cls(**base)
        if name not in SCENARIO_WEIGHTS:
            choices = ["toy", "toy-quick"] + sorted(SCENARIO_WEIGHTS)
            raise ValueError(f"unknown scenario preset {name!r}; choose from {choices}")
        src, tgt = name.split("-")
        base = dict(
            scenario=(src, tgt),
            weights=L.LossWeights(*SCENARIO_WEIGHTS[name]),
            schedules=dict(FULL_SCHEDULES),
            net=NetConfig(cloud_size=1024, n_classes=10),
        )
        base.update(kw)
        return cls(**base)

    def stage_seed(self, stage: str) -> int:
        digest = hashlib.sha256(f"{self.seed}:{stage}".encode()).digest()
        return int.from_bytes(digest[:4], "little")

    def effective_weights(self, ablation: Optional[Ablation] = None) -> L.LossWeights:
        ab = self.ablation if ablation is None else ablation
        w = self.weights
        return L.LossWeights(w.alpha, w.beta if ab.use_latent_recon else 0.0,
                             w.gamma if ab.use_classifier_disc else 0.0)


def _toy_to_dict(spec: ToyDomainSpec) -> dict:
    d = asdict(spec)
    d["classes"] = list(spec.classes)
    return d


def _toy_from_dict(data: dict) -> ToyDomainSpec:
    data = dict(data)
    if "classes" in data:
        data["classes"] = tuple(data["classes"])
    return ToyDomainSpec(**data)


# --------------------------------------------------------------------------
# stage plumbing
# --------------------------------------------------------------------------

@dataclass
class StageResult:
    stage: str
    checkpoint: Optional[Path]
    report: L.LossReport
    wall_clock: float
    curve: List[dict] = field(default_factory=list)
    initial: Optional[L.LossReport] = None
    metrics: dict = field(default_factory=dict)
    bundle: Optional[ModelBundle] = field(default=None, repr=False)

    def to_dict(self) -> dict:
        return {
            "stage": self.stage,
            "checkpoint": None if self.checkpoint is None else str(self.checkpoint),
            "report": asdict(self.report),
            "initial": None if self.initial is None else asdict(self.initial),
            "wall_clock": self.wall_clock,
            "curve": self.curve,
            "metrics": self.metrics,
        }


def _tensor(x: np.ndarray) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(x))


def _adam(params, sched: StageSchedule):
    return torch.optim.Adam(params, lr=sched.learning_rate, betas=(sched.adam_beta1, 0.999),
                            weight_decay=sched.weight_decay)


def _finite(value: float) -> bool:
    return bool(np.isfinite(value))


class _StageRunner:
    """Shared epoch loop: logging, divergence handling, checkpointing."""

    def __init__(self, stage: str, config: AdaptationConfig, bundle: ModelBundle,
                 out_dir: Optional[Path], names: Sequence[str]):
        self.stage = stage
        self.config = config
        self.bundle = bundle
        self.names = list(names)
        self.out_dir = None if out_dir is None else Path(out_dir)
        self.ckpt_path = None if self.out_dir is None else self.out_dir / "checkpoint"
        self.log = None
        if self.out_dir is not None:
            self.out_dir.mkdir(parents=True, exist_ok=True)
            log_path = self.out_dir / "train_log.jsonl"
            if log_path.exists():
                log_path.unlink()
            self.log = L.TrainingLog(log_path)
        self.step = 0
        self.start = time.time()
        self._last_good: Optional[Dict[str, dict]] = None

    def snapshot(self, epoch: int) -> None:
        self.bundle.meta.update(stage=self.stage, epoch=epoch, seed=self.config.seed,
                                config_digest=self.config.digest())
        self._last_good = {n: copy.deepcopy(self.bundle[n].state_dict()) for n in self.names}

    def record(self, report: L.LossReport, **extra) -> None:
        if self.log is not None:
            rec = report.to_record(self.step, self.stage)
            rec.update(extra)
            self.log.write(rec)
        self.step += 1

    def check(self, value: float, epoch: int) -> None:
        if _finite(value):
            return
        if self._last_good is not None:
            for n, state in self._last_good.items():
                self.bundle[n].load_state_dict(state)
        path = self.save()
        self.close()
        raise TrainingAborted(f"{self.stage}: non-finite loss at epoch {epoch}", path)

    def save(self) -> Optional[Path]:
        if self.ckpt_path is None:
            return None
        sub = ModelBundle(self.bundle.config, {n: self.bundle[n] for n in self.names},
                          {n: self.bundle.frozen.get(n, False) for n in self.names}, dict(self.bundle.meta))
        return save_checkpoint(sub, self.ckpt_path)

    def close(self):
        if self.log is not None:
            self.log.close()
            self.log = None

    def finish(self, report: L.LossReport, curve, initial=None, metrics=None) -> StageResult:
        path = self.save()
        self.close()
        result = StageResult(self.stage, path, report, time.time() - self.start, curve, initial,
                             metrics or {}, self.bundle)
        if self.out_dir is not None:
            (self.out_dir / "result.json").write_text(json.dumps(result.to_dict(), indent=1, sort_keys=True))
        return result


def _eval_batches(data: CloudArrays, batch_size: int):
    for start in range(0, len(data), batch_size):
        yield data.subset(slice(start, start + batch_size))


# --------------------------------------------------------------------------
# autoencoder
# --------------------------------------------------------------------------

def evaluate_autoencoder(bundle: ModelBundle, data: CloudArrays, config: AdaptationConfig,
                         batch_size: int = 64) -> L.LossReport:
    enc, dec = bundle["encoder"], bundle["decoder"]
    modes = enc.training, dec.training
    enc.eval(), dec.eval()
    total = 0.0
    with torch.no_grad():
        for chunk in _eval_batches(data, batch_size):
            x = _tensor(chunk.points)
            cost = L.emd(dec(enc(x)), x, config.emd_method, config.emd_epsilon)
            total += float(cost.sum())
    enc.train(modes[0]), dec.train(modes[1])
    return L.LossReport(l_recon_ae=total / len(data), total=total / len(data))


def train_autoencoder(config: AdaptationConfig, source: CloudArrays, out_dir=None,
                      bundle: Optional[ModelBundle] = None) -> StageResult:
    """Fit encoder + decoder on source clouds with the EMD reconstruction loss."""
    sched = config.schedules["ae"]
    seed = config.stage_seed("ae")
    torch.manual_seed(seed)
    if bundle is None:
        bundle = ModelBundle.initialize(config.net, seed, ("encoder", "decoder"))
    runner = _StageRunner("ae", config, bundle, out_dir, ("encoder", "decoder"))
    opt = _adam(bundle.trainable_parameters(["encoder", "decoder"]), sched)
    batches = BatchIterator(source, sched.batch_size, seed)
    initial = evaluate_autoencoder(bundle, source, config)
    runner.snapshot(0)
    curve = []
    for epoch in range(sched.epochs):
        bundle.set_mode(True)
        running = []
        for batch in batches.epoch(epoch):
            loss = L.loss_recon_ae(_tensor(batch.points), bundle, config.emd_method, config.emd_epsilon)
            value = loss.item()
            runner.check(value, epoch)
            opt.zero_grad()
            loss.backward()
            opt.step()
            running.append(value)
            runner.record(L.LossReport(l_recon_ae=value, total=value), epoch=epoch)
        curve.append({"epoch": epoch, "l_recon_ae": float(np.mean(running))})
        runner.snapshot(epoch + 1)
    bundle.set_mode(False)
    return runner.finish(evaluate_autoencoder(bundle, source, config), curve, initial)


# --------------------------------------------------------------------------
# VAE (mode encoder)
# --------------------------------------------------------------------------

def evaluate_vae(bundle: ModelBundle, data: CloudArrays, config: AdaptationConfig,
                 batch_size: int = 64) -> Tuple[L.LossReport, float]:
    """Deterministic evaluation through the posterior mean; returns (report, kl)."""
    enc, dec = bundle["mode_encoder"], bundle["vae_decoder"]
    enc.eval(), dec.eval()
    recon = kl = 0.0
    with torch.no_grad():
        for chunk in _eval_batches(data, batch_size):
            x = _tensor(chunk.points)
            mu, logvar = enc(x)
            recon += float(L.emd(dec(mu), x, config.emd_method, config.emd_epsilon).sum())
            kl += float(L.gaussian_kl(mu, logvar)) * len(chunk)
    n = len(data)
    total = recon / n + config.kl_weight * kl / n
    return L.LossReport(l_recon_ae=recon / n, total=total), kl / n


def train_vae(config: AdaptationConfig, source: CloudArrays, out_dir=None) -> StageResult:
    """Fit the mode encoder (PointNet) with its own MLP decoder as a VAE.

    The reconstruction term is reported as ``l_recon_ae``; KL values go to the
    curve and log under ``kl``.
    """
    sched = config.schedules["vae"]
    seed = config.stage_seed("vae")
    torch.manual_seed(seed)
    names = ("mode_encoder", "vae_decoder")
    bundle = ModelBundle.initialize(config.net, seed, names)
    runner = _StageRunner("vae", config, bundle, out_dir, names)
    opt = _adam(bundle.trainable_parameters(names), sched)
    batches = BatchIterator(source, sched.batch_size, seed)
    noise = torch.Generator().manual_seed(seed)
    initial, _ = evaluate_vae(bundle, source, config)
    runner.snapshot(0)
    curve = []
    for epoch in range(sched.epochs):
        bundle.set_mode(True)
        rec_hist, kl_hist = [], []
        for batch in batches.epoch(epoch):
            x = _tensor(batch.points)
            mu, logvar = bundle["mode_encoder"](x)
            z = reparameterize(mu, logvar, noise)
            recon = L.emd(bundle["vae_decoder"](z), x, config.emd_method, config.emd_epsilon).mean()
            kl = L.gaussian_kl(mu, logvar)
            loss = recon + config.kl_weight * kl
            runner.check(loss.item(), epoch)
            opt.zero_grad()
            loss.backward()
            opt.step()
            rec_hist.append(recon.item())
            kl_hist.append(kl.item())
            runner.record(L.LossReport(l_recon_ae=recon.item(), total=loss.item()), epoch=epoch, kl=kl.item())
        curve.append({"epoch": epoch, "l_recon_ae": float(np.mean(rec_hist)), "kl": float(np.mean(kl_hist))})
        runner.snapshot(epoch + 1)
    bundle.set_mode(False)
    report, kl = evaluate_vae(bundle, source, config)
    return runner.finish(report, curve, initial, {"kl": kl})


# --------------------------------------------------------------------------
# classifier
# --------------------------------------------------------------------------

CLASSIFIER_TAGS = {"source_pretrain": "cls", "downstream_synthetic": "downstream", "supervised_bound": "downstream"}


def evaluate_classifier_loss(bundle: ModelBundle, data: CloudArrays, batch_size: int = 128) -> Tuple[float, float]:
    clf = bundle["classifier"]
    was = clf.training
    clf.eval()
    loss = correct = 0.0
    with torch.no_grad():
        for chunk in _eval_batches(data, batch_size):
            logits = clf(_tensor(chunk.points))
            labels = _tensor(chunk.labels)
            loss += float(F.cross_entropy(logits, labels, reduction="sum"))
            correct += float((logits.argmax(dim=1) == labels).sum())
    clf.train(was)
    return loss / len(data), correct / len(data)


def train_classifier(config: AdaptationConfig, data: CloudArrays, tag: str = "source_pretrain",
                     out_dir=None) -> StageResult:
    """Cross-entropy training of a PointNet classifier.

    ``tag`` selects the schedule: ``source_pretrain`` uses the ``cls`` stage,
    ``downstream_synthetic`` and ``supervised_bound`` use ``downstream``.
    """
    if tag not in CLASSIFIER_TAGS:
        raise ValueError(f"unknown classifier tag {tag!r}; choose from {sorted(CLASSIFIER_TAGS)}")
    if len(data) == 0:
        raise ValueError("classifier training needs at least one cloud")
    if (data.labels < 0).any():
        raise ValueError(f"{int((data.labels < 0).sum())} unlabeled clouds in classifier training data")
    sched = config.schedules[CLASSIFIER_TAGS[tag]]
    seed = config.stage_seed(tag)
    torch.manual_seed(seed)
    bundle = ModelBundle.initialize(config.net, seed, ("classifier",))
    runner = _StageRunner(tag, config, bundle, out_dir, ("classifier",))
    opt = _adam(bundle.trainable_parameters(["classifier"]), sched)
    batches = BatchIterator(data, sched.batch_size, seed)
    init_loss, init_acc = evaluate_classifier_loss(bundle, data)
    runner.snapshot(0)
    curve = []
    clf = bundle["classifier"]
    for epoch in range(sched.epochs):
        clf.train()
        hist = []
        for batch in batches.epoch(epoch):
            if len(batch) == 1:
                clf.eval()  # batch statistics are undefined for a single object
            loss = F.cross_entropy(clf(_tensor(batch.points)), _tensor(batch.labels))
            clf.train()
            runner.check(loss.item(), epoch)
            opt.zero_grad()
            loss.backward()
            opt.step()
            hist.append(loss.item())
            runner.record(L.LossReport(l_cls=loss.item(), total=loss.item()), epoch=epoch)
        curve.append({"epoch": epoch, "l_cls": float(np.mean(hist))})
        runner.snapshot(epoch + 1)
    clf.eval()
    loss, acc = evaluate_classifier_loss(bundle, data)
    return runner.finish(L.LossReport(l_cls=loss, total=loss), curve,
                         L.LossReport(l_cls=init_loss, total=init_loss),
                         {"train_accuracy": acc, "initial_train_accuracy": init_acc, "tag": tag})


# --------------------------------------------------------------------------
# GAN
# --------------------------------------------------------------------------

GAN_PREREQUISITES = ("encoder", "decoder", "mode_encoder", "classifier")


def encode_all(bundle: ModelBundle, data: CloudArrays, batch_size: int = 64) -> torch.Tensor:
    enc = bundle["encoder"]
    was = enc.training
    enc.eval()
    with torch.no_grad():
        out = torch.cat([enc(_tensor(c.points)) for c in _eval_batches(data, batch_size)])
    enc.train(was)
    return out


def _fixed_eval_z(config: AdaptationConfig, n: int) -> torch.Tensor:
    rng = np.random.default_rng([config.stage_seed("gan-eval"), n])
    return _tensor(rng.standard_normal((n, config.mode_dim)).astype(np.float32))


def evaluate_gan(bundle: ModelBundle, source: CloudArrays, target: CloudArrays, config: AdaptationConfig,
                 ablation: Optional[Ablation] = None, batch_size: int = 64) -> L.LossReport:
    """All GAN loss components over the full data with a fixed set of mode vectors."""
    ab = config.ablation if ablation is None else ablation
    weights = config.effective_weights(ab)
    modes = {n: b.training for n, b in bundle.blocks.items()}
    for b in bundle.blocks.values():
        b.eval()
    src_codes = encode_all(bundle, source)
    tgt_codes = encode_all(bundle, target)
    z_all = _fixed_eval_z(config, len(source))
    sums = dict(l_gan_g=0.0, l_recon_g=0.0, l_latent=0.0, l_cls=0.0, fake=0.0)
    with torch.no_grad():
        real = bundle["discriminator"](tgt_codes)
        for start in range(0, len(source), batch_size):
            sl = slice(start, start + batch_size)
            x = _tensor(source.points[sl])
            z = z_all[sl]
            codes = src_codes[sl]
            _, rep = L.total_generator_objective(x, _tensor(source.labels[sl]), z, weights, bundle, codes=codes,
                                                 emd_method=config.emd_method, epsilon=config.emd_epsilon)
            fake_codes = bundle["generator"](codes, z) if ab.fake_term == "generated" else codes
            k = x.shape[0]
            sums["fake"] += float((bundle["discriminator"](fake_codes) ** 2).sum())
            for key in ("l_gan_g", "l_recon_g", "l_latent", "l_cls"):
                sums[key] += getattr(rep, key) * k
    for n, b in bundle.blocks.items():
        b.train(modes[n])
    n = len(source)
    l_gan_f = float(((real - 1.0) ** 2).mean()) + sums["fake"] / n
    return L.compose_report(sums["l_gan_g"] / n, sums["l_recon_g"] / n, sums["l_latent"] / n,
                            sums["l_cls"] / n, weights, l_gan_f=l_gan_f)


def train_gan(config: AdaptationConfig, source: CloudArrays, target: CloudArrays, pretrained: ModelBundle,
              out_dir=None, ablation: Optional[Ablation] = None, max_steps: Optional[int] = None) -> StageResult:
    """Adversarial latent translation with frozen autoencoder, mode encoder and classifier.

    Target clouds only contribute their encoder codes; their labels are never read.
    """
    missing = [n for n in GAN_PREREQUISITES if n not in pretrained]
    if missing:
        raise MissingPrerequisite(f"GAN training needs pretrained blocks: missing {', '.join(missing)}")
    if (source.labels < 0).any():
        raise ValueError("GAN training needs labeled source clouds")
    ab = config.ablation if ablation is None else ablation
    weights = config.effective_weights(ab)
    sched = config.schedules["gan"]
    seed = config.stage_seed("gan")
    torch.manual_seed(seed)

    fresh = ModelBundle.initialize(config.net, seed, ("generator", "discriminator"))
    bundle = ModelBundle(config.net, meta=dict(pretrained.meta))
    bundle.merge(pretrained, GAN_PREREQUISITES)
    bundle.merge(fresh, ("generator", "discriminator"))
    bundle.freeze("encoder", "decoder")
    bundle.freeze("mode_encoder") if not config.update_mode_encoder_in_gan else bundle.unfreeze("mode_encoder")
    bundle.freeze("classifier") if not config.update_classifier_in_gan else bundle.unfreeze("classifier")

    names = ("generator", "discriminator") + GAN_PREREQUISITES
    runner = _StageRunner("gan", config, bundle, out_dir, names)
    g_names = ["generator"] + (["mode_encoder"] if config.update_mode_encoder_in_gan else [])
    opt_g = _adam(bundle.trainable_parameters(g_names), sched)
    opt_d = _adam(bundle.trainable_parameters(["discriminator"]), sched)
    opt_c = _adam(bundle.trainable_parameters(["classifier"]), sched) if config.update_classifier_in_gan else None

    # the encoder is frozen, so every code can be computed once up front
    src_codes = encode_all(bundle, source)
    tgt_codes = encode_all(bundle, target)
    src_batches = BatchIterator(source, sched.batch_size, seed, paired_z=True, mode_dim=config.mode_dim)
    tgt_rng = np.random.default_rng([seed, 1])
    tgt_order, tgt_pos = tgt_rng.permutation(len(target)), 0

    initial = evaluate_gan(bundle, source, target, config, ab)
    runner.snapshot(0)
    curve = []
    steps = 0
    for epoch in range(sched.epochs):
        bundle.set_mode(True)
        hist = []
        for batch in src_batches.epoch(epoch):
            if max_steps is not None and steps >= max_steps:
                break
            k = len(batch)
            if tgt_pos + k > len(target):
                tgt_order, tgt_pos = tgt_rng.permutation(len(target)), 0
            t_idx = tgt_order[tgt_pos:tgt_pos + k]
            tgt_pos += k
            codes = src_codes[_tensor(batch.index)]
            z = _tensor(batch.z)
            x = _tensor(batch.points)

            # discriminator step
            with torch.no_grad():
                fake_codes = bundle["generator"](codes, z) if ab.fake_term == "generated" else codes
            d_loss = L.lsgan_discriminator(bundle["discriminator"](tgt_codes[_tensor(t_idx)]),
                                           bundle["discriminator"](fake_codes))
            opt_d.zero_grad()
            d_loss.backward()
            opt_d.step()

            # generator step
            g_total, rep = L.total_generator_objective(
                x, _tensor(batch.labels), z, weights, bundle, codes=codes,
                emd_method=config.emd_method, epsilon=config.emd_epsilon)
            rep.l_gan_f = d_loss.item()
            runner.check(rep.total + rep.l_gan_f, epoch)
            opt_g.zero_grad()
            opt_d.zero_grad()
            g_total.backward()
            opt_g.step()

            if opt_c is not None:
                with torch.no_grad():
                    _, clouds = L.generate_clouds(x, z, bundle, codes)
                c_loss = F.cross_entropy(bundle["classifier"](clouds), _tensor(batch.labels))
                opt_c.zero_grad()
                c_loss.backward()
                opt_c.step()

            runner.record(rep, epoch=epoch)
            hist.append(asdict(rep))
            steps += 1
        if hist:
            curve.append({"epoch": epoch, **{k: float(np.mean([h[k] for h in hist])) for k in hist[0]}})
        runner.snapshot(epoch + 1)
        if max_steps is not None and steps >= max_steps:
            break
    bundle.set_mode(False)
    report = evaluate_gan(bundle, source, target, config, ab)
    return runner.finish(report, curve, initial, {"steps": steps, "weights": asdict(weights)})


# --------------------------------------------------------------------------
# synthetic data
# --------------------------------------------------------------------------

def synthesize(config: AdaptationConfig, bundle: ModelBundle, source: CloudArrays,
               samples_per_object: int, batch_size: int = 64) -> CloudArrays:
    """Decode ``G(E(x), z)`` for every source object and ``samples_per_object`` seeded z's.

    Output clouds are normalised like loaded data and keep the source labels;
    sample ``s`` of object ``i`` lands at row ``i * samples_per_object + s``.
    """
    if (source.labels < 0).any():
        raise ValueError("synthetic generation needs labeled source clouds")
    if samples_per_object < 1:
        raise ValueError("samples_per_object must be >= 1")
    for n in ("encoder", "generator", "decoder"):
        bundle[n].eval()
    rng = np.random.default_rng(config.stage_seed("generate"))
    z_all = rng.standard_normal((len(source), samples_per_object, config.mode_dim)).astype(np.float32)
    codes = encode_all(bundle, source, batch_size)
    out = np.empty((len(source) * samples_per_object, config.cloud_size, 3), dtype=np.float32)
    with torch.no_grad():
        for s in range(samples_per_object):
            for start in range(0, len(source), batch_size):
                sl = slice(start, start + batch_size)
                clouds = bundle["decoder"](bundle["generator"](codes[sl], _tensor(z_all[sl, s]))).numpy()
                rows = np.arange(start, start + clouds.shape[0]) * samples_per_object + s
                for r, pts in zip(rows, clouds):
                    out[r] = normalize_cloud(PointCloud(pts, 0)).points
    labels = np.repeat(source.labels, samples_per_object)
    return CloudArrays(out, labels)


def generate_synthetic(config: AdaptationConfig, bundle: ModelBundle, source: CloudArrays,
                       samples_per_object: int = 1, out_root=None, name: str = "synthetic",
                       classes: Optional[Sequence[str]] = None):
    """Build the labeled synthetic dataset; writes the standard layout when ``out_root`` is given.

    Returns ``(manifest, arrays)``.
    """
    data = synthesize(config, bundle, source, samples_per_object)
    n_classes = config.net.n_classes
    classes = list(classes) if classes is not None else [f"class{i}" for i in range(n_classes)]
    manifest = DatasetManifest(name, classes, {"train": {c: [] for c in classes}}, cloud_size=config.cloud_size)
    counters = {c: 0 for c in classes}
    for pts, label in zip(data.points, data.labels):
        cls_name = classes[int(label)]
        rel = f"train/{cls_name}/{counters[cls_name]:06d}.npy"
        counters[cls_name] += 1
        manifest.splits["train"][cls_name].append(rel)
        if out_root is not None:
            write_cloud(Path(out_root) / name / rel, pts)
    manifest.counts["train"] = dict(counters)
    if out_root is not None:
        manifest.save(Path(out_root) / name / "manifest.json")
    return manifest, data


# --------------------------------------------------------------------------
# end-to-end scenario
# --------------------------------------------------------------------------

@dataclass
class ScenarioData:
    source_train: CloudArrays
    source_test: CloudArrays
    target_train: CloudArrays
    target_test: CloudArrays
    classes: List[str]


def prepare_data(config: AdaptationConfig, data_root=None, workers: int = 1) -> ScenarioData:
    """Load both domains, materialising the toy pair first when the config defines one."""
    root = Path(data_root) if data_root is not None else default_data_root()
    if root is None:
        raise ValueError("no data root given and PCDA_DATA_ROOT is not set")
    src_name, tgt_name = config.scenario
    if config.toy is not None:
        src_dir, tgt_dir = root / config.toy.source.name, root / config.toy.target.name
        if not (src_dir / "manifest.json").is_file() or not (tgt_dir / "manifest.json").is_file():
            make_toy_pair(config.toy.source, config.toy.target, config.toy.per_class, root, config.cloud_size)
        src_name, tgt_name = config.toy.source.name, config.toy.target.name
    manifests = []
    for name in (src_name, tgt_name):
        mpath = root / name / "manifest.json"
        if mpath.is_file():
            m = DatasetManifest.load(mpath)
        else:
            try:
                m = DatasetManifest.pointda(name)
            except ValueError:
                raise FileNotFoundError(f"no dataset for domain {name!r} under {root}") from None
        m.cloud_size = config.cloud_size
        manifests.append(m)
    ms, mt = manifests
    if ms.classes != mt.classes:
        raise ValueError("source and target domains have different class lists")
    return ScenarioData(
        load_arrays(root, ms, "train", DomainTag.SOURCE, workers),
        load_arrays(root, ms, "test", DomainTag.SOURCE, workers),
        load_arrays(root, mt, "train", DomainTag.TARGET, workers),
        load_arrays(root, mt, "test", DomainTag.TARGET, workers),
        ms.classes,
    )


def _data_digest(data: CloudArrays) -> str:
    h = hashlib.sha256()
    h.update(np.ascontiguousarray(data.points).tobytes())
    h.update(np.ascontiguousarray(data.labels).tobytes())
    return h.hexdigest()[:16]


def _cached(cache_dir: Optional[Path], key: str, train):
    """Run ``train(out_dir)`` or reuse an earlier run stored under ``cache_dir/key``."""
    if cache_dir is None:
        return train(None)
    out = Path(cache_dir) / key
    result_file = out / "result.json"
    if result_file.is_file() and (out / "checkpoint" / "metadata.json").is_file():
        data = json.loads(result_file.read_text())
        res = StageResult(data["stage"], out / "checkpoint", L.LossReport(**data["report"]), data["wall_clock"],
                          data["curve"], None if data["initial"] is None else L.LossReport(**data["initial"]),
                          data["metrics"], load_checkpoint(out / "checkpoint"))
        log.info("reusing %s", out)
        return res
    return train(out)


def shape_preservation(config: AdaptationConfig, source: CloudArrays, synth: CloudArrays,
                       samples_per_object: int) -> dict:
    """Mean EMD from each synthetic cloud to its source object, against the mean
    EMD between source objects paired at random (never with themselves).
    """
    own = np.repeat(source.points, samples_per_object, axis=0)
    to_source = L.emd(_tensor(synth.points).double(), _tensor(own).double(), config.emd_method, config.emd_epsilon)
    n = len(source)
    rng = np.random.default_rng(config.stage_seed("shape-pairs"))
    order = rng.permutation(n)
    partner = np.empty(n, dtype=np.int64)
    partner[order] = np.roll(order, 1)
    pairs = L.emd(_tensor(source.points).double(), _tensor(source.points[partner]).double(),
                  config.emd_method, config.emd_epsilon)
    return {"synthetic_to_source": float(to_source.mean()), "random_source_pairs": float(pairs.mean())}


def run_scenario(config: AdaptationConfig, out_dir, data_root=None, cache_dir=None,
                 data: Optional[ScenarioData] = None, workers: int = 1, keep: Optional[dict] = None) -> dict:
    """Train every stage, then score w/o-adapt, each requested ablation and (optionally) the supervised bound.

    Writes ``metrics.json`` (deterministic content only) and ``config.json``
    into ``out_dir``; returns the metrics dict. ``cache_dir`` memoises stage
    checkpoints by configuration and data digest. A ``keep`` dict receives the
    StageResults, synthetic arrays and loaded data for further inspection.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "config.json").write_text(config.to_json())
    if data is None:
        data = prepare_data(config, data_root, workers)
    cache = None if cache_dir is None else Path(cache_dir)
    src_digest = _data_digest(data.source_train)
    base_keys = ["net", "seed", "emd_method", "emd_epsilon"]
    timings = {}

    def stage_key(stage, sched_name, extra=(), digest=src_digest):
        payload = json.dumps([asdict(config.schedules[sched_name]), config.digest(base_keys + list(extra)), digest])
        return f"{stage}-{hashlib.sha256(payload.encode()).hexdigest()[:16]}"

    ae = _cached(cache, stage_key("ae", "ae"),
                 lambda d: train_autoencoder(config, data.source_train, d))
    vae = _cached(cache, stage_key("vae", "vae", ["kl_weight"]),
                  lambda d: train_vae(config, data.source_train, d))
    cls = _cached(cache, stage_key("cls", "cls"),
                  lambda d: train_classifier(config, data.source_train, "source_pretrain", d))
    timings.update(ae=ae.wall_clock, vae=vae.wall_clock, cls=cls.wall_clock)

    pretrained = ModelBundle(config.net)
    pretrained.merge(ae.bundle, ("encoder", "decoder"))
    pretrained.merge(vae.bundle, ("mode_encoder",))
    pretrained.merge(cls.bundle, ("classifier",))
    if keep is not None:
        keep.update(ae=ae, vae=vae, cls=cls, data=data, pretrained=pretrained)

    label = scenario_label(config.scenario)
    acc, cm = evaluate(cls.bundle, data.target_test)
    src_acc, _ = evaluate(cls.bundle, data.source_test)
    metrics = {
        "scenario": label,
        "seed": config.seed,
        "classes": data.classes,
        "source_test_accuracy": src_acc,
        "results": {"w/o Adapt": _result_entry(acc, cm)},
        "stages": {"ae": asdict(ae.report), "vae": asdict(vae.report), "cls": asdict(cls.report)},
    }

    # later stages depend on every schedule and on the target data as well
    pair_digest = src_digest + _data_digest(data.target_train)
    gan_keys = ["schedules", "weights", "ablation", "kl_weight", "update_classifier_in_gan",
                "update_mode_encoder_in_gan"]
    for name in config.ablations:
        ab = Ablation.named(name, config.ablation.fake_term)
        gan = _cached(cache, stage_key(f"gan-{name}", "gan", gan_keys, pair_digest),
                      lambda d: train_gan(config, data.source_train, data.target_train, pretrained, d, ab))
        synth = synthesize(config, gan.bundle, data.source_train, config.samples_per_object)
        train_set = synth if config.downstream_data == "synthetic" else data.source_train.concat(synth)
        down = _cached(cache, stage_key(f"downstream-{name}", "downstream",
                                        gan_keys + ["samples_per_object", "downstream_data"], pair_digest),
                       lambda d: train_classifier(config, train_set, "downstream_synthetic", d))
        acc, cm = evaluate(down.bundle, data.target_test)
        metrics["results"][ABLATION_ROWS[name]] = _result_entry(acc, cm)
        metrics["stages"][f"gan-{name}"] = asdict(gan.report)
        metrics.setdefault("shape_preservation", {})[name] = shape_preservation(
            config, data.source_train, synth, config.samples_per_object)
        if keep is not None:
            keep.update({f"gan-{name}": gan, f"downstream-{name}": down, f"synthetic-{name}": synth})
        timings[f"gan-{name}"] = gan.wall_clock
        timings[f"downstream-{name}"] = down.wall_clock

    if config.supervised_bound:
        sup_train = CloudArrays(data.target_train.points, data.target_train.labels)
        sup = _cached(cache, stage_key("supervised", "downstream", digest=_data_digest(sup_train)),
                      lambda d: train_classifier(config, sup_train, "supervised_bound", d))
        acc, cm = evaluate(sup.bundle, data.target_test)
        metrics["results"]["Supervised"] = _result_entry(acc, cm)

    (out_dir / "metrics.json").write_text(json.dumps(metrics, indent=1, sort_keys=True))
    (out_dir / "timings.json").write_text(json.dumps(timings, indent=1, sort_keys=True))
    return metrics


def _result_entry(acc: float, cm) -> dict:
    return {
        "accuracy": acc,
        "per_class_accuracy": cm.per_class_accuracy(),
        "confusion": cm.counts.tolist(),
    }
