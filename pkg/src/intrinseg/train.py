"""Optimization loop, Adadelta, the experiment configurations, and run
records with checkpointing.

Five experiment configurations are supported: the two single-task
baselines, the two cascades (one task's output feeding the other's
input), and the jointly trained three-decoder model.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import losses as L
from . import metrics as M
from . import nn
from .scenegen import DatasetManifest, load_dataset

EXPERIMENTS = (
    "single_intrinsics",
    "single_segmentation",
    "cascade_albedo_to_seg",
    "cascade_seg_to_intrinsics",
    "joint",
)

_EXPERIMENT_HEADS = {
    "single_intrinsics": ("reflectance", "shading"),
    "single_segmentation": ("segmentation",),
    "cascade_albedo_to_seg": ("segmentation",),
    "cascade_seg_to_intrinsics": ("reflectance", "shading"),
    "joint": ("reflectance", "shading", "segmentation"),
}


class ConfigError(ValueError):
    """Invalid training configuration."""


class DatasetCompatibilityError(ValueError):
    """Dataset resolution or class count incompatible with the config."""


def fnv1a64(text: str) -> int:
    """64-bit FNV-1a over UTF-8 bytes."""
    h = 0xCBF29CE484222325
    for byte in text.encode("utf-8"):
        h ^= byte
        h = (h * 0x100000001B3) & 0xFFFFFFFFFFFFFFFF
    return h


@dataclass(frozen=True)
class TrainConfig:
    experiment: str = "single_intrinsics"
    epochs: int = 10
    batch_size: int = 4
    seed: int = 0
    lr: float = 0.01
    rho: float = 0.95
    eps: float = 1e-6
    weight_decay: float = 1e-9
    features: tuple[int, ...] = nn.DEFAULT_FEATURES
    mirror_links: bool = True
    inter_connections: bool = True
    gamma_smse: float = 0.95
    gamma_mse: float = 0.05
    gamma_r: float = 1.0
    gamma_s: float = 1.0
    gamma_ce: float = 1.0
    gamma_il: float = 1.0
    intrinsic_scale: float = 100.0
    w: float = 2.0
    class_weighting: bool = True
    differentiate_alpha: bool = False
    trainable_heads: tuple[str, ...] = ()  # empty = train everything
    train_encoder: bool = True
    precision: str = "f32"  # f32 (fast) or f64 (precision)

    def __post_init__(self):
        if self.experiment not in EXPERIMENTS:
            raise ConfigError(
                f"unknown experiment {self.experiment!r}; valid: {', '.join(EXPERIMENTS)}"
            )
        if self.batch_size < 2:
            raise ConfigError("batch_size must be >= 2 (batch norm constraint)")
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")
        if self.precision not in ("f32", "f64"):
            raise ConfigError("precision must be f32 or f64")
        object.__setattr__(self, "features", tuple(int(f) for f in self.features))
        object.__setattr__(self, "trainable_heads", tuple(self.trainable_heads))

    def loss_weights(self) -> L.LossWeights:
        return L.LossWeights(
            gamma_smse=self.gamma_smse,
            gamma_mse=self.gamma_mse,
            gamma_r=self.gamma_r,
            gamma_s=self.gamma_s,
            gamma_ce=self.gamma_ce,
            gamma_il=self.gamma_il,
            intrinsic_scale=self.intrinsic_scale,
            w=self.w,
        )

    def heads(self) -> tuple[str, ...]:
        return _EXPERIMENT_HEADS[self.experiment]

    def network_spec(self, num_classes: int) -> nn.NetworkSpec:
        return nn.NetworkSpec(
            encoder_features=self.features,
            heads=self.heads(),
            mirror_links=self.mirror_links,
            inter_connections=self.inter_connections,
            num_classes=num_classes,
            input_channels=4 if self.experiment == "cascade_seg_to_intrinsics" else 3,
        )

    def canonical_text(self) -> str:
        parts = []
        for f in sorted(self.__dataclass_fields__):
            value = getattr(self, f)
            if isinstance(value, tuple):
                value = ",".join(str(v) for v in value)
            elif isinstance(value, bool):
                value = int(value)
            parts.append(f"{f}={value}")
        return "\n".join(parts) + "\n"

    def config_hash(self) -> str:
        return f"{fnv1a64(self.canonical_text()):016x}"

    @classmethod
    def from_kv(cls, text: str, overrides: dict | None = None) -> "TrainConfig":
        values: dict = {}
        for line in text.splitlines():
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ConfigError(f"malformed config line {line!r}")
            key, raw = (part.strip() for part in line.split("=", 1))
            values[key] = raw
        if overrides:
            values.update(overrides)
        kwargs: dict = {}
        field_types = {f.name: f for f in fields(cls)}
        for key, raw in values.items():
            if key not in field_types:
                raise ConfigError(f"unknown config key {key!r}")
            default = field_types[key].default
            if key in ("features", "trainable_heads"):
                items = [v for v in str(raw).split(",") if v]
                kwargs[key] = tuple(int(v) for v in items) if key == "features" else tuple(items)
            elif isinstance(default, bool):
                kwargs[key] = str(raw).lower() in ("1", "true", "yes", "on")
            elif isinstance(default, int):
                kwargs[key] = int(raw)
            elif isinstance(default, float):
                kwargs[key] = float(raw)
            else:
                kwargs[key] = str(raw)
        return cls(**kwargs)


# -- optimizer ---------------------------------------------------------------


def adadelta_update(theta, grad, acc_grad, acc_delta, lr, rho, eps, weight_decay):
    """One Adadelta step on one parameter array; returns the new triple.

    Accumulators track squared gradients and squared (unscaled) updates;
    the learning rate scales the applied update.  Weight decay is
    decoupled: an extra -lr * wd * theta term.
    """
    acc_grad = rho * acc_grad + (1.0 - rho) * grad * grad
    delta = np.sqrt(acc_delta + eps) / np.sqrt(acc_grad + eps) * grad
    acc_delta = rho * acc_delta + (1.0 - rho) * delta * delta
    theta = theta - lr * delta - lr * weight_decay * theta
    return theta, acc_grad, acc_delta


class Adadelta:
    """Adadelta over a NetworkState; only trainable parameters move."""

    def __init__(self, state: nn.NetworkState, lr=0.01, rho=0.95, eps=1e-6, weight_decay=1e-9):
        self.lr, self.rho, self.eps, self.weight_decay = lr, rho, eps, weight_decay
        self.acc_grad = {k: np.zeros_like(p.data) for k, p in state.params.items()}
        self.acc_delta = {k: np.zeros_like(p.data) for k, p in state.params.items()}

    def step(self, state: nn.NetworkState):
        for name in sorted(state.params):
            if name not in state.trainable:
                continue
            p = state.params[name]
            if p.grad is None:
                continue
            p.data, self.acc_grad[name], self.acc_delta[name] = adadelta_update(
                p.data, p.grad, self.acc_grad[name], self.acc_delta[name],
                self.lr, self.rho, self.eps, self.weight_decay,
            )


def set_trainable(state: nn.NetworkState, heads, include_encoder: bool = False) -> nn.NetworkState:
    """Restrict gradient updates to the named decoders (plus, optionally,
    the encoder).  Frozen parameters stay bit-identical under training."""
    heads = tuple(heads)
    for head in heads:
        if head not in state.spec.heads:
            raise ConfigError(f"unknown head {head!r}; spec has {state.spec.heads}")
    trainable = set()
    for name in state.params:
        if name.startswith("enc") and include_encoder:
            trainable.add(name)
        for head in heads:
            if name.startswith(f"dec.{head}."):
                trainable.add(name)
    state.trainable = trainable
    return state


# -- data plumbing -----------------------------------------------------------


class SplitArrays:
    """Dense arrays for one split: network inputs plus all targets."""

    def __init__(self, samples, experiment: str, num_classes: int, dtype=np.float32):
        images = np.stack([s.image.data for s in samples]).astype(dtype)
        self.reflectance = np.stack([s.reflectance.data for s in samples]).astype(dtype)
        self.shading = np.stack([s.shading.data for s in samples]).astype(dtype)
        self.labels = np.stack([s.labels.data for s in samples]).astype(np.int64)
        if experiment == "cascade_albedo_to_seg":
            self.inputs = self.reflectance
        elif experiment == "cascade_seg_to_intrinsics":
            plane = self.labels[:, None].astype(dtype) / max(num_classes - 1, 1)
            self.inputs = np.concatenate([images, plane], axis=1)
        else:
            self.inputs = images

    def __len__(self):
        return self.inputs.shape[0]


def _batch_loss(config: TrainConfig, outputs, batch: SplitArrays, idx, class_weights):
    """Loss tensor plus the per-term breakdown for one batch."""
    weights = config.loss_weights()
    heads = config.heads()
    if "segmentation" in heads and len(heads) == 3:
        total, terms = L.joint_loss(
            outputs["segmentation"],
            batch.labels[idx],
            outputs["reflectance"],
            batch.reflectance[idx],
            outputs["shading"],
            batch.shading[idx],
            weights,
            class_weights,
            config.differentiate_alpha,
        )
        return total, terms
    if "segmentation" in heads:
        total = weights.gamma_ce * L.cross_entropy(
            outputs["segmentation"], batch.labels[idx], class_weights
        )
        return total, {"cross_entropy": total.item(), "total": total.item()}
    total = L.intrinsic_loss(
        outputs["reflectance"],
        batch.reflectance[idx],
        outputs["shading"],
        batch.shading[idx],
        weights,
        config.differentiate_alpha,
    )
    return total, {"intrinsic": total.item(), "total": total.item()}


def evaluate_state(
    state: nn.NetworkState,
    data: SplitArrays,
    manifest: DatasetManifest,
    batch_size: int = 8,
) -> M.EvalReport:
    """Run the network over one split in eval mode and score it."""
    heads = state.spec.heads
    predictions, truths = [], []
    for start in range(0, len(data), batch_size):
        idx = slice(start, start + batch_size)
        outputs = nn.forward(state, data.inputs[idx], training=False)
        n = outputs[heads[0]].data.shape[0]
        for i in range(n):
            pred: dict[str, np.ndarray] = {}
            truth: dict[str, np.ndarray] = {}
            if "reflectance" in heads:
                pred["reflectance"] = outputs["reflectance"].data[i]
                pred["shading"] = outputs["shading"].data[i]
                truth["reflectance"] = data.reflectance[start + i]
                truth["shading"] = data.shading[start + i]
            if "segmentation" in heads:
                pred["labels"] = np.argmax(outputs["segmentation"].data[i], axis=0)
                truth["labels"] = data.labels[start + i]
            predictions.append(pred)
            truths.append(truth)
    return M.evaluate(
        predictions,
        truths,
        num_classes=manifest.num_classes,
        class_names=manifest.class_names,
        lmse_window=min(M.DEFAULT_LMSE_WINDOW, manifest.height, manifest.width),
    )


# -- run records -------------------------------------------------------------


@dataclass
class RunRecord:
    config: TrainConfig
    config_hash: str
    traces: dict[str, list[float]]
    report: M.EvalReport | None
    checkpoint_path: str
    out_dir: str

    def write(self):
        out = Path(self.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.kv").write_text(self.config.canonical_text())
        lines = [
            f"config_hash={self.config_hash}",
            f"experiment={self.config.experiment}",
            f"epochs={self.config.epochs}",
            f"checkpoint={Path(self.checkpoint_path).name}",
        ]
        for term in sorted(self.traces):
            lines.append(f"trace.{term}=" + ",".join(repr(v) for v in self.traces[term]))
        (out / "record.kv").write_text("\n".join(lines) + "\n")
        human = [f"run {self.config.experiment} (config {self.config_hash})"]
        terms = sorted(self.traces)
        for epoch in range(len(self.traces.get("total", []))):
            parts = "  ".join(f"{t}={self.traces[t][epoch]:.6f}" for t in terms)
            human.append(f"epoch {epoch + 1:4d}  {parts}")
        (out / "record.txt").write_text("\n".join(human) + "\n")
        if self.report is not None:
            (out / "eval.kv").write_text(self.report.to_kv())
            (out / "eval.txt").write_text(self.report.to_text())
            if self.report.confusion_matrix is not None:
                self.report.confusion_matrix.to_csv(
                    out / "confusion.csv", self.report.class_names
                )

    @staticmethod
    def read_kv(path: str | Path) -> dict[str, str]:
        out: dict[str, str] = {}
        for line in Path(path).read_text().splitlines():
            if line and "=" in line:
                key, value = line.split("=", 1)
                out[key] = value
        return out


# -- the training loop -------------------------------------------------------


def run_experiment(
    config: TrainConfig,
    data_dir: str | Path,
    out_dir: str | Path,
    log=None,
) -> RunRecord:
    manifest, samples = load_dataset(data_dir)
    spec = config.network_spec(manifest.num_classes)
    try:
        spec.check_resolution(manifest.height, manifest.width)
    except ValueError as exc:
        raise DatasetCompatibilityError(str(exc)) from exc

    by_split = {
        split: [s for s, e in zip(samples, manifest.entries) if e.split == split]
        for split in ("train", "test")
    }
    dtype = np.float32 if config.precision == "f32" else np.float64
    train_data = SplitArrays(by_split["train"], config.experiment, manifest.num_classes, dtype)
    test_data = SplitArrays(by_split["test"], config.experiment, manifest.num_classes, dtype)

    class_weights = None
    if "segmentation" in config.heads() and config.class_weighting:
        class_weights = L.median_frequency_weights(manifest.class_pixels_train)

    state = nn.NetworkState.initialize(spec, seed=config.seed, dtype=dtype)
    if config.trainable_heads:
        set_trainable(state, config.trainable_heads, include_encoder=config.train_encoder)
    optimizer = Adadelta(state, config.lr, config.rho, config.eps, config.weight_decay)

    traces: dict[str, list[float]] = {}
    for epoch in range(config.epochs):
        rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([config.seed, epoch])))
        order = rng.permutation(len(train_data))
        epoch_terms: dict[str, list[float]] = {}
        for start in range(0, len(order), config.batch_size):
            idx = order[start : start + config.batch_size]
            if len(idx) < 2:
                continue  # batch norm needs at least 2 samples
            state.zero_grad()
            outputs = nn.forward(state, train_data.inputs[idx], training=True)
            loss, terms = _batch_loss(config, outputs, train_data, idx, class_weights)
            loss.backward()
            optimizer.step(state)
            for term, value in terms.items():
                epoch_terms.setdefault(term, []).append(value)
        for term, values in epoch_terms.items():
            traces.setdefault(term, []).append(float(np.mean(values)))
        if log:
            shown = "  ".join(f"{t}={traces[t][-1]:.6f}" for t in sorted(traces))
            log(f"epoch {epoch + 1}/{config.epochs}  {shown}")

    report = evaluate_state(state, test_data, manifest) if len(test_data) else None

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    checkpoint_path = out / "model.isnn"
    nn.save_checkpoint(state, checkpoint_path)
    record = RunRecord(
        config=config,
        config_hash=config.config_hash(),
        traces=traces,
        report=report,
        checkpoint_path=str(checkpoint_path),
        out_dir=str(out),
    )
    record.write()
    return record


SWEEP_W_VALUES = (0.01, 0.5, 1.0, 2.0, 4.0)
SWEEP_COLUMNS = (
    "seg_global",
    "seg_miou",
    "reflectance_mse_mean",
    "shading_mse_mean",
    "reflectance_lmse_mean",
    "shading_lmse_mean",
    "reflectance_dssim_mean",
    "shading_dssim_mean",
)


def sweep_w(
    base_config: TrainConfig,
    data_dir: str | Path,
    out_dir: str | Path,
    values=SWEEP_W_VALUES,
    log=None,
) -> list[RunRecord]:
    """Train the joint model once per intrinsic-loss multiplier w and
    emit a table of the headline metrics (one row per w)."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    records = []
    rows = []
    for w in values:
        config = replace(base_config, experiment="joint", w=float(w))
        record = run_experiment(config, data_dir, out / f"w_{w:g}", log=log)
        records.append(record)
        flat = record.report.flat_metrics() if record.report else {}
        rows.append([w] + [flat.get(col, float("nan")) for col in SWEEP_COLUMNS])
    header = "w\t" + "\t".join(SWEEP_COLUMNS)
    body = "\n".join("\t".join(f"{v:.6g}" for v in row) for row in rows)
    (out / "sweep_w.tsv").write_text(header + "\n" + body + "\n")
    return records
