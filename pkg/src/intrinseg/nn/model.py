"""Shared-encoder network with mirror links and inter-connected decoders.

The encoder is a chain of stride-2 conv blocks; each active head owns a
decoder that mirrors the encoder widths in reverse.  Decoder stages
consume the upsampled previous stage, the encoder feature of matching
resolution (mirror link), and, when inter-connections are on, the other
decoders' previous-stage features.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor, batch_norm, concat_channels, conv2d, relu, upsample_nearest2x

HEAD_NAMES = ("reflectance", "shading", "segmentation")
DEFAULT_FEATURES = (8, 16, 32, 64)
# the widths the architecture was designed around; far too slow for CPU runs
FULL_SCALE_FEATURES = (16, 32, 64, 128, 256, 256)


@dataclass(frozen=True)
class NetworkSpec:
    encoder_features: tuple[int, ...] = DEFAULT_FEATURES
    kernel: int = 3
    stride: int = 2
    heads: tuple[str, ...] = ("reflectance", "shading")
    mirror_links: bool = True
    inter_connections: bool = True
    num_classes: int = 8
    input_channels: int = 3

    def __post_init__(self):
        object.__setattr__(self, "encoder_features", tuple(int(f) for f in self.encoder_features))
        object.__setattr__(self, "heads", tuple(self.heads))
        if len(self.encoder_features) < 2:
            raise ValueError("need at least 2 encoder stages")
        if not self.heads:
            raise ValueError("at least one head required")
        for h in self.heads:
            if h not in HEAD_NAMES:
                raise ValueError(f"unknown head {h!r}; valid heads: {HEAD_NAMES}")
        if self.input_channels not in (3, 4):
            raise ValueError("input_channels must be 3 or 4")

    @property
    def num_stages(self) -> int:
        return len(self.encoder_features)

    def head_channels(self, head: str) -> int:
        return {"reflectance": 3, "shading": 1, "segmentation": self.num_classes}[head]

    def check_resolution(self, height: int, width: int):
        div = 2 ** self.num_stages
        if height % div or width % div:
            raise ValueError(
                f"input resolution {height}x{width} not divisible by 2^{self.num_stages}"
            )

    def to_text(self) -> str:
        return "".join(
            f"{k}={v}\n"
            for k, v in [
                ("encoder_features", ",".join(str(f) for f in self.encoder_features)),
                ("kernel", self.kernel),
                ("stride", self.stride),
                ("heads", ",".join(self.heads)),
                ("mirror_links", int(self.mirror_links)),
                ("inter_connections", int(self.inter_connections)),
                ("num_classes", self.num_classes),
                ("input_channels", self.input_channels),
            ]
        )

    @classmethod
    def from_text(cls, text: str) -> "NetworkSpec":
        kv = dict(line.split("=", 1) for line in text.splitlines() if line)
        return cls(
            encoder_features=tuple(int(f) for f in kv["encoder_features"].split(",")),
            kernel=int(kv["kernel"]),
            stride=int(kv["stride"]),
            heads=tuple(kv["heads"].split(",")),
            mirror_links=bool(int(kv["mirror_links"])),
            inter_connections=bool(int(kv["inter_connections"])),
            num_classes=int(kv["num_classes"]),
            input_channels=int(kv["input_channels"]),
        )


def _conv_shapes(spec: NetworkSpec):
    """Yield (name, in_channels, out_channels) for every conv in the network."""
    feats = spec.encoder_features
    k = spec.num_stages
    in_ch = spec.input_channels
    for i, f in enumerate(feats):
        yield f"enc{i}", in_ch, f
        in_ch = f
    n_sib = len(spec.heads) - 1 if spec.inter_connections else 0
    for head in spec.heads:
        for s in range(k):
            prev_ch = feats[k - 1] if s == 0 else _decoder_out(spec, s - 1)
            mirror_ch = feats[k - 2 - s] if (spec.mirror_links and s <= k - 2) else 0
            sib_ch = n_sib * prev_ch if s >= 1 else 0
            yield f"dec.{head}.{s}", prev_ch + mirror_ch + sib_ch, _decoder_out(spec, s)
        out_ch = spec.head_channels(head)
        yield f"dec.{head}.out", _decoder_out(spec, k - 1), out_ch
        if head == "segmentation":
            yield f"dec.{head}.out2", out_ch, out_ch


def _decoder_out(spec: NetworkSpec, stage: int) -> int:
    feats = spec.encoder_features
    k = spec.num_stages
    return feats[k - 2 - stage] if stage <= k - 2 else feats[0]


def _has_bn(name: str) -> bool:
    # head projections are plain linear convs; everything else is conv+BN+ReLU
    return not name.endswith((".out", ".out2"))


class NetworkState:
    """Learnable parameters plus batch-norm running statistics."""

    def __init__(self, spec: NetworkSpec, params: dict[str, Tensor], running: dict[str, np.ndarray]):
        self.spec = spec
        self.params = params
        self.running = running
        self.trainable: set[str] = set(params)

    @classmethod
    def initialize(
        cls, spec: NetworkSpec, seed: int, weight_std: float = 0.05, dtype=np.float64
    ) -> "NetworkState":
        rng = np.random.Generator(np.random.PCG64(seed))
        params: dict[str, Tensor] = {}
        running: dict[str, np.ndarray] = {}
        kk = spec.kernel
        for name, cin, cout in _conv_shapes(spec):
            params[f"{name}.conv.w"] = Tensor(
                rng.normal(0.0, weight_std, size=(cout, cin, kk, kk)).astype(dtype),
                requires_grad=True,
            )
            params[f"{name}.conv.b"] = Tensor(np.zeros(cout, dtype), requires_grad=True)
            if _has_bn(name):
                params[f"{name}.bn.gamma"] = Tensor(np.ones(cout, dtype), requires_grad=True)
                params[f"{name}.bn.beta"] = Tensor(np.zeros(cout, dtype), requires_grad=True)
                running[f"{name}.bn.mean"] = np.zeros(cout, dtype)
                running[f"{name}.bn.var"] = np.ones(cout, dtype)
        return cls(spec, params, running)

    @property
    def dtype(self):
        return next(iter(self.params.values())).data.dtype

    def parameter_count(self) -> int:
        return sum(p.data.size for p in self.params.values())

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def copy(self) -> "NetworkState":
        out = NetworkState(
            self.spec,
            {k: Tensor(v.data.copy(), requires_grad=True) for k, v in self.params.items()},
            {k: v.copy() for k, v in self.running.items()},
        )
        out.trainable = set(self.trainable)
        return out


def _block(state: NetworkState, name: str, x: Tensor, training: bool) -> Tensor:
    spec = state.spec
    p = state.params
    stride = spec.stride if name.startswith("enc") else 1
    pad = spec.kernel // 2
    out = conv2d(x, p[f"{name}.conv.w"], p[f"{name}.conv.b"], stride=stride, padding=pad)
    if _has_bn(name):
        out = batch_norm(
            out,
            p[f"{name}.bn.gamma"],
            p[f"{name}.bn.beta"],
            state.running[f"{name}.bn.mean"],
            state.running[f"{name}.bn.var"],
            training=training,
        )
        out = relu(out)
    return out


def forward(state: NetworkState, batch: np.ndarray | Tensor, training: bool = False) -> dict[str, Tensor]:
    """Run the network; returns one output tensor per active head.

    Reflectance/shading outputs are clamped non-negative in eval mode
    only, so training gradients flow through the raw linear outputs.
    """
    spec = state.spec
    x = batch if isinstance(batch, Tensor) else Tensor(np.asarray(batch, dtype=state.dtype))
    if x.data.ndim != 4:
        raise ValueError(f"batch must be (N, C, H, W), got shape {x.data.shape}")
    if x.data.shape[1] != spec.input_channels:
        raise ValueError(
            f"batch has {x.data.shape[1]} channels, spec expects {spec.input_channels}"
        )
    spec.check_resolution(x.data.shape[2], x.data.shape[3])

    enc_feats: list[Tensor] = []
    cur = x
    for i in range(spec.num_stages):
        cur = _block(state, f"enc{i}", cur, training)
        enc_feats.append(cur)

    k = spec.num_stages
    # previous-stage features per head; the shared bottleneck seeds stage 0
    prev: dict[str, Tensor] = {h: enc_feats[-1] for h in spec.heads}
    for s in range(k):
        up_cache: dict[int, Tensor] = {}
        ups = {}
        for h in spec.heads:
            key = id(prev[h])
            if key not in up_cache:
                up_cache[key] = upsample_nearest2x(prev[h])
            ups[h] = up_cache[key]
        nxt: dict[str, Tensor] = {}
        for head in spec.heads:
            parts = [ups[head]]
            if spec.mirror_links and s <= k - 2:
                parts.append(enc_feats[k - 2 - s])
            if spec.inter_connections and s >= 1:
                parts.extend(ups[sib] for sib in spec.heads if sib != head)
            nxt[head] = _block(state, f"dec.{head}.{s}", concat_channels(parts), training)
        prev = nxt

    outputs: dict[str, Tensor] = {}
    for head in spec.heads:
        out = _block(state, f"dec.{head}.out", prev[head], training)
        if head == "segmentation":
            out = _block(state, f"dec.{head}.out2", out, training)
        elif not training:
            out = relu(out)
        outputs[head] = out
    return outputs
