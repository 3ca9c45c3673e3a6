"""Desk-scale vision transformer with layer-wise prompt prepending.

Prompt tokens are prepended in front of the [class] token at each prompted
layer and dropped again after that layer, so the output length never
depends on the prompts and position 0 is always the [class] token.
"""

from __future__ import annotations

import threading
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .binio import FormatError, Reader, Writer
from .numerics import (
    MASK_VALUE,
    ShapeError,
    Tensor,
    concat_tokens,
    gelu,
    identity,
    layer_norm,
    masked_fill,
    matmul,
    softmax,
)

CHECKPOINT_MAGIC = b"PCLB"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class BackboneConfig:
    image_size: int = 16
    patch_size: int = 4
    channels: int = 3
    embed_dim: int = 32
    num_layers: int = 4
    num_heads: int = 4
    mlp_ratio: int = 2

    def __post_init__(self):
        for name, value in asdict(self).items():
            if int(value) != value or value <= 0:
                raise ValueError(f"BackboneConfig.{name} must be a positive integer, got {value!r}")
        if self.image_size % self.patch_size:
            raise ValueError(f"image_size {self.image_size} not divisible by patch_size {self.patch_size}")
        if self.embed_dim % self.num_heads:
            raise ValueError(f"embed_dim {self.embed_dim} not divisible by num_heads {self.num_heads}")

    @property
    def num_patches(self) -> int:
        return (self.image_size // self.patch_size) ** 2

    @property
    def num_tokens(self) -> int:
        return self.num_patches + 1


@dataclass(frozen=True)
class PromptInsertionPlan:
    g_layers: tuple[int, ...] = (0, 1)
    e_layers: tuple[int, ...] = (0, 1, 2, 3)
    g_length: int = 5
    e_length: int = 8

    def __post_init__(self):
        object.__setattr__(self, "g_layers", tuple(sorted(set(self.g_layers))))
        object.__setattr__(self, "e_layers", tuple(sorted(set(self.e_layers))))
        if self.g_length < 0 or self.e_length < 0:
            raise ValueError("prompt lengths must be >= 0")
        if any(i < 0 for i in self.g_layers + self.e_layers):
            raise ValueError("prompt layer indices must be >= 0")

    def validate(self, config: BackboneConfig):
        bad = [i for i in self.g_layers + self.e_layers if i >= config.num_layers]
        if bad:
            raise ValueError(f"prompt layers {bad} out of range for {config.num_layers} layers")

    @property
    def g_depth(self) -> int:
        return len(self.g_layers)

    @property
    def e_depth(self) -> int:
        return len(self.e_layers)


@dataclass
class PassCounter:
    """Backbone passes. ``forwards`` counts batched calls, ``forward_samples`` rows."""

    forwards: int = 0
    forward_samples: int = 0
    backwards: int = 0
    backward_samples: int = 0
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False, compare=False)

    def add_forward(self, batch: int):
        with self._lock:
            self.forwards += 1
            self.forward_samples += batch

    def add_backward(self, batch: int):
        with self._lock:
            self.backwards += 1
            self.backward_samples += batch

    def reset(self):
        with self._lock:
            self.forwards = self.forward_samples = self.backwards = self.backward_samples = 0

    def snapshot(self) -> dict:
        return {"forwards": self.forwards, "forward_samples": self.forward_samples,
                "backwards": self.backwards, "backward_samples": self.backward_samples}


def _init_params(config: BackboneConfig, seed: int) -> dict[str, np.ndarray]:
    rng = np.random.default_rng(seed)
    d = config.embed_dim
    patch_dim = config.channels * config.patch_size ** 2
    hidden = d * config.mlp_ratio

    def dense(fan_in, fan_out):
        return rng.normal(0.0, 1.0 / np.sqrt(fan_in), size=(fan_in, fan_out))

    p = {
        "patch.weight": dense(patch_dim, d),
        "patch.bias": np.zeros(d),
        "cls": rng.normal(0.0, 0.02, size=d),
        "pos": rng.normal(0.0, 0.02, size=(config.num_tokens, d)),
    }
    for i in range(config.num_layers):
        pre = f"blocks.{i}."
        p[pre + "ln1.gain"] = np.ones(d)
        p[pre + "ln1.bias"] = np.zeros(d)
        for name in ("q", "k", "v", "proj"):
            p[pre + f"attn.{name}.weight"] = dense(d, d)
            p[pre + f"attn.{name}.bias"] = np.zeros(d)
        p[pre + "ln2.gain"] = np.ones(d)
        p[pre + "ln2.bias"] = np.zeros(d)
        p[pre + "mlp.fc1.weight"] = dense(d, hidden)
        p[pre + "mlp.fc1.bias"] = np.zeros(hidden)
        p[pre + "mlp.fc2.weight"] = dense(hidden, d)
        p[pre + "mlp.fc2.bias"] = np.zeros(d)
    p["norm.gain"] = np.ones(d)
    p["norm.bias"] = np.zeros(d)
    return p


class VisionTransformer:
    """f = f_r o f_e. Parameters live in ``self.params`` keyed by dotted names."""

    def __init__(self, config: BackboneConfig = BackboneConfig(), plan: PromptInsertionPlan | None = None,
                 seed: int = 0, params: dict[str, np.ndarray] | None = None):
        self.config = config
        self.plan = plan or PromptInsertionPlan()
        self.plan.validate(config)
        arrays = params if params is not None else _init_params(config, seed)
        expected = _init_params(config, 0) if params is not None else arrays
        if params is not None:
            missing = sorted(set(expected) - set(arrays))
            if missing:
                raise FormatError(f"checkpoint is missing parameters {missing}")
            for k, v in expected.items():
                if arrays[k].shape != v.shape:
                    raise FormatError(f"parameter {k} has shape {arrays[k].shape}, expected {v.shape}")
        self.params = {k: Tensor(np.array(v, dtype=np.float64), name=k) for k, v in arrays.items()}
        self.counter = PassCounter()
        self.frozen = True

    def set_trainable(self, trainable: bool):
        self.frozen = not trainable
        for t in self.params.values():
            t.requires_grad = trainable

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def with_plan(self, plan: PromptInsertionPlan) -> "VisionTransformer":
        """Same weights (shared, not copied) under a different insertion plan."""
        other = VisionTransformer.__new__(VisionTransformer)
        plan.validate(self.config)
        other.config, other.plan, other.params = self.config, plan, self.params
        other.counter, other.frozen = self.counter, self.frozen
        return other

    # ------------------------------------------------------------------ f_e

    def patchify(self, images: np.ndarray) -> np.ndarray:
        cfg = self.config
        images = np.asarray(images, dtype=np.float64)
        if images.ndim == 3:
            images = images[None]
        if images.ndim != 4 or images.shape[1:] != (cfg.channels, cfg.image_size, cfg.image_size):
            raise ShapeError("embed", images.shape, (cfg.channels, cfg.image_size, cfg.image_size))
        b, c, s = images.shape[0], cfg.channels, cfg.patch_size
        g = cfg.image_size // s
        x = images.reshape(b, c, g, s, g, s).transpose(0, 2, 4, 1, 3, 5)
        return x.reshape(b, g * g, c * s * s)

    def embed(self, images: np.ndarray) -> Tensor:
        """Images ``(B, C, H, W)`` or ``(C, H, W)`` to tokens ``(B, L, D)``."""
        p = self.params
        patches = matmul(Tensor(self.patchify(images)), p["patch.weight"]) + p["patch.bias"]
        cls = p["cls"].reshape(1, -1)
        return concat_tokens([cls, patches]) + p["pos"]

    # ------------------------------------------------------------------ f_r

    def _attention(self, x: Tensor, i: int) -> Tensor:
        p, cfg = self.params, self.config
        b, n, d = x.shape
        h = cfg.num_heads
        dh = d // h
        pre = f"blocks.{i}.attn."

        def heads(name):
            y = matmul(x, p[pre + name + ".weight"]) + p[pre + name + ".bias"]
            return y.reshape(b, n, h, dh).transpose(0, 2, 1, 3)

        q, k, v = heads("q"), heads("k"), heads("v")
        att = softmax(matmul(q, k.transpose(0, 1, 3, 2)) * (1.0 / np.sqrt(dh)))
        out = matmul(att, v).transpose(0, 2, 1, 3).reshape(b, n, d)
        return matmul(out, p[pre + "proj.weight"]) + p[pre + "proj.bias"]

    def _block(self, x: Tensor, i: int) -> Tensor:
        p = self.params
        pre = f"blocks.{i}."
        x = x + self._attention(layer_norm(x, p[pre + "ln1.gain"], p[pre + "ln1.bias"]), i)
        hdn = gelu(matmul(layer_norm(x, p[pre + "ln2.gain"], p[pre + "ln2.bias"]),
                          p[pre + "mlp.fc1.weight"]) + p[pre + "mlp.fc1.bias"])
        return x + matmul(hdn, p[pre + "mlp.fc2.weight"]) + p[pre + "mlp.fc2.bias"]

    def _check_prompt(self, prompt: Tensor | None, layers, length: int, kind: str):
        if prompt is None:
            return
        d = self.config.embed_dim
        ok = prompt.ndim in (3, 4) and prompt.shape[-3:] == (len(layers), length, d)
        if not ok:
            raise ShapeError(f"forward ({kind}-prompt vs plan)", prompt.shape, (len(layers), length, d))

    def forward(self, x_e: Tensor, g_prompt: Tensor | None = None,
                e_prompt: Tensor | None = None) -> tuple[Tensor, Tensor]:
        """Run f_r; returns ([class] feature ``(B, D)``, tokens ``(B, L, D)``).

        ``g_prompt`` is ``(H_g, L_g, D)``. ``e_prompt`` is ``(H_e, L_e, D)``
        shared by the batch or ``(B, H_e, L_e, D)`` for per-sample prompts.
        """
        plan = self.plan
        self._check_prompt(g_prompt, plan.g_layers, plan.g_length, "g")
        self._check_prompt(e_prompt, plan.e_layers, plan.e_length, "e")
        if x_e.ndim != 3 or x_e.shape[-1] != self.config.embed_dim:
            raise ShapeError("forward", x_e.shape)
        b = x_e.shape[0]
        if e_prompt is not None and e_prompt.ndim == 4 and e_prompt.shape[0] != b:
            raise ShapeError("forward (per-sample e-prompt batch)", e_prompt.shape, x_e.shape)

        x = x_e
        for i in range(self.config.num_layers):
            prefix = []
            if g_prompt is not None and plan.g_length and i in plan.g_layers:
                prefix.append(g_prompt[plan.g_layers.index(i)])
            if e_prompt is not None and plan.e_length and i in plan.e_layers:
                j = plan.e_layers.index(i)
                prefix.append(e_prompt[j] if e_prompt.ndim == 3 else e_prompt[:, j])
            if prefix:
                n_prompt = sum(t.shape[-2] for t in prefix)
                x = self._block(concat_tokens(prefix + [x], batch=b), i)[:, n_prompt:]
            else:
                x = self._block(x, i)
        tokens = layer_norm(x, self.params["norm.gain"], self.params["norm.bias"])

        self.counter.add_forward(b)
        if tokens.requires_grad:
            tokens = identity(tokens, on_backward=lambda: self.counter.add_backward(b))
        return tokens[:, 0], tokens

    # ------------------------------------------------------------- persistence

    def save(self, path: str | Path):
        Path(path).write_bytes(self.to_bytes())

    def to_bytes(self) -> bytes:
        cfg = self.config
        w = Writer()
        w.raw(CHECKPOINT_MAGIC)
        w.u32(CHECKPOINT_VERSION)
        for v in (cfg.image_size, cfg.patch_size, cfg.channels, cfg.embed_dim, cfg.num_layers, cfg.num_heads):
            w.u32(v)
        w.f64(float(cfg.mlp_ratio))
        w.u32(len(self.params))
        for name in sorted(self.params):
            w.blob(name, self.params[name].values)
        return w.finish()

    @classmethod
    def from_bytes(cls, data: bytes, plan: PromptInsertionPlan | None = None) -> "VisionTransformer":
        r = Reader(data, CHECKPOINT_MAGIC, CHECKPOINT_VERSION)
        fields = [r.u32() for _ in range(6)]
        mlp_ratio = r.f64()
        try:
            config = BackboneConfig(*fields, mlp_ratio=int(mlp_ratio))
        except ValueError as exc:
            raise FormatError(f"invalid config record: {exc}") from exc
        params = dict(r.blob() for _ in range(r.u32()))
        r.expect_end()
        return cls(config, plan, params=params)

    @classmethod
    def load(cls, path: str | Path, plan: PromptInsertionPlan | None = None) -> "VisionTransformer":
        path = Path(path)
        if not path.exists():
            raise FileNotFoundError(f"backbone checkpoint not found: {path}")
        return cls.from_bytes(path.read_bytes(), plan)


def classify(feature: Tensor, W: Tensor, mask=None) -> Tensor:
    """Logits ``feature @ W``; classes outside ``mask`` get a large negative logit."""
    if feature.shape[-1] != W.shape[0]:
        raise ShapeError("classify", feature.shape, W.shape)
    logits = matmul(feature, W)
    if mask is None:
        return logits
    mask = np.asarray(mask)
    if mask.dtype != bool:
        keep = np.zeros(W.shape[1], dtype=bool)
        keep[mask.astype(np.int64)] = True
        mask = keep
    if mask.shape[-1] != W.shape[1]:
        raise ShapeError("classify (mask)", mask.shape, W.shape)
    if not mask.any():
        raise ValueError("classify: empty class mask")
    return masked_fill(logits, mask, MASK_VALUE)
