"""Small pre-norm decoder-only transformer with an optional patch-encoder prefix.

Hook families (decoder): resid_pre, attn_out, mlp_out, resid_post, each per
layer and position; plus patch_embed for the encoder output of visual cells.
A hook is any callable ``hook(family, layer, x) -> x`` where ``x`` has shape
(batch, seq, d_model); returning a different tensor overwrites the activation
before downstream computation.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .vocab import default_vocab

FAMILIES = ("resid_pre", "attn_out", "mlp_out", "resid_post")
PATCH_EMBED = "patch_embed"
CHECKPOINT_MAGIC = b"COUNTLAB"
CHECKPOINT_VERSION = 1

Hook = Callable[[str, int, torch.Tensor], torch.Tensor]


class InputError(ValueError):
    pass


class NumericError(ArithmeticError):
    pass


@dataclass
class VisionConfig:
    n_encoder_layers: int = 1
    grid_size: int = 10  # largest supported grid side


@dataclass
class ModelConfig:
    d_model: int = 128
    n_layers: int = 8
    n_heads: int = 4
    d_mlp: int = 512
    max_seq_len: int = 128
    vocab_size: int = field(default_factory=lambda: len(default_vocab()))
    vision: VisionConfig | None = None
    norm_eps: float = 1e-5
    seed: int = 0

    def __post_init__(self):
        if isinstance(self.vision, dict):
            self.vision = VisionConfig(**self.vision)
        if self.d_model % self.n_heads:
            raise ValueError("d_model must be divisible by n_heads")
        if self.norm_eps <= 0:
            raise ValueError("norm_eps must be positive")
        if self.n_layers < 0:
            raise ValueError("n_layers must be >= 0")

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_heads

    def to_dict(self) -> dict:
        return asdict(self)


def param_shapes(cfg: ModelConfig) -> list[tuple[str, tuple[int, ...]]]:
    """Parameter names and shapes in the fixed checkpoint order."""
    d, f, v = cfg.d_model, cfg.d_mlp, cfg.vocab_size
    shapes: list[tuple[str, tuple[int, ...]]] = [("W_E", (v, d)), ("W_pos", (cfg.max_seq_len, d))]

    def block(prefix: str):
        return [
            (f"{prefix}.W_Q", (d, d)),
            (f"{prefix}.W_K", (d, d)),
            (f"{prefix}.W_V", (d, d)),
            (f"{prefix}.W_O", (d, d)),
            (f"{prefix}.W_in", (d, f)),
            (f"{prefix}.b_in", (f,)),
            (f"{prefix}.W_out", (f, d)),
            (f"{prefix}.b_out", (d,)),
        ]

    if cfg.vision is not None:
        g = cfg.vision.grid_size
        shapes += [("enc.W_row", (g, d)), ("enc.W_col", (g, d))]
        for i in range(cfg.vision.n_encoder_layers):
            shapes += block(f"enc{i}")
    for layer in range(cfg.n_layers):
        shapes += block(f"blocks{layer}")
    shapes.append(("W_U", (d, v)))
    return shapes


def rms_norm(x: torch.Tensor, eps: float) -> torch.Tensor:
    return x * torch.rsqrt(x.pow(2).mean(-1, keepdim=True) + eps)


class CountingTransformer(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        gen = torch.Generator().manual_seed(cfg.seed)
        self.params = nn.ParameterDict()
        for name, shape in param_shapes(cfg):
            if len(shape) == 1:
                t = torch.zeros(shape)
            else:
                std = math.sqrt(2.0 / (shape[0] + shape[1]))
                t = torch.randn(shape, generator=gen) * std
            self.params[name.replace(".", "__")] = nn.Parameter(t)

    # -- parameter access -------------------------------------------------

    def p(self, name: str) -> torch.Tensor:
        return self.params[name.replace(".", "__")]

    def named_weights(self) -> list[tuple[str, torch.Tensor]]:
        return [(n, self.p(n)) for n, _ in param_shapes(self.cfg)]

    @property
    def n_layers(self) -> int:
        return self.cfg.n_layers

    # -- building blocks --------------------------------------------------

    def _attention(self, prefix, xq, xkv, q_pos, k_pos, causal=True, return_pattern=False):
        """Multi-head attention of queries xq (B,Tq,D) over xkv (B,Tk,D)."""
        cfg = self.cfg
        B, Tq, _ = xq.shape
        Tk = xkv.shape[1]
        H, dh = cfg.n_heads, cfg.d_head
        q = (xq @ self.p(f"{prefix}.W_Q")).view(B, Tq, H, dh).transpose(1, 2)
        k = (xkv @ self.p(f"{prefix}.W_K")).view(B, Tk, H, dh).transpose(1, 2)
        v = (xkv @ self.p(f"{prefix}.W_V")).view(B, Tk, H, dh).transpose(1, 2)
        scores = q @ k.transpose(-1, -2) / math.sqrt(dh)
        if causal:
            mask = k_pos[None, :] > q_pos[:, None]
            scores = scores.masked_fill(mask, float("-inf"))
        pattern = torch.softmax(scores, dim=-1)
        z = (pattern @ v).transpose(1, 2).reshape(B, Tq, cfg.d_model)
        out = z @ self.p(f"{prefix}.W_O")
        return (out, pattern) if return_pattern else (out, None)

    def _mlp(self, prefix, x):
        h = F.gelu(x @ self.p(f"{prefix}.W_in") + self.p(f"{prefix}.b_in"))
        return h @ self.p(f"{prefix}.W_out") + self.p(f"{prefix}.b_out")

    def _encode_patches(self, ids: torch.Tensor, g: int) -> torch.Tensor:
        """Bidirectional patch encoder over (B, g*g) cell ids."""
        vision = self.cfg.vision
        eps = self.cfg.norm_eps
        rows = torch.arange(g).repeat_interleave(g)
        cols = torch.arange(g).repeat(g)
        x = self.p("W_E")[ids] + self.p("enc.W_row")[rows] + self.p("enc.W_col")[cols]
        pos = torch.arange(g * g)
        for i in range(vision.n_encoder_layers):
            n = rms_norm(x, eps)
            a, _ = self._attention(f"enc{i}", n, n, pos, pos, causal=False)
            x = x + a
            x = x + self._mlp(f"enc{i}", rms_norm(x, eps))
        return x

    def embed(self, ids: torch.Tensor, patch_regions=None, hook: Hook | None = None) -> torch.Tensor:
        """Token + position embeddings; patch regions replaced by encoder output."""
        B, T = ids.shape
        if T > self.cfg.max_seq_len:
            raise InputError(f"sequence length {T} exceeds max_seq_len {self.cfg.max_seq_len}")
        if int(ids.min()) < 0 or int(ids.max()) >= self.cfg.vocab_size:
            raise InputError("token id out of range")
        x = self.p("W_E")[ids]
        if patch_regions is not None and any(r is not None for r in patch_regions):
            if self.cfg.vision is None:
                raise InputError("model has no vision encoder")
            pe = torch.zeros_like(x)
            x = x.clone()
            groups: dict[tuple[int, int], list[int]] = {}
            for b, region in enumerate(patch_regions):
                if region is not None:
                    groups.setdefault(tuple(region), []).append(b)
            for (start, g), rows in groups.items():
                if g > self.cfg.vision.grid_size:
                    raise InputError(
                        f"grid size {g} exceeds the encoder's grid_size {self.cfg.vision.grid_size}"
                    )
                idx = torch.tensor(rows)
                enc = self._encode_patches(ids[idx, start : start + g * g], g)
                pe[idx, start : start + g * g] = enc
                x[idx, start : start + g * g] = enc
            if hook is not None:
                new_pe = hook(PATCH_EMBED, 0, pe)
                if new_pe is not pe:
                    mask = torch.zeros(B, T, 1, dtype=torch.bool)
                    for b, region in enumerate(patch_regions):
                        if region is not None:
                            s, g = region
                            mask[b, s : s + g * g] = True
                    x = torch.where(mask, new_pe, x)
            self._last_patch_embed = pe
        else:
            self._last_patch_embed = None
        return x + self.p("W_pos")[:T]

    def unembed(self, x: torch.Tensor) -> torch.Tensor:
        return rms_norm(x, self.cfg.norm_eps) @ self.p("W_U")

    # -- forward passes ---------------------------------------------------

    def run(
        self,
        ids: torch.Tensor,
        patch_regions: Sequence[tuple[int, int] | None] | None = None,
        hook: Hook | None = None,
        cache: bool = False,
        return_patterns: bool = False,
    ):
        """Full forward pass. Returns (logits (B,T,V), cache dict or None).

        The cache maps (family, layer) -> tensor (B, T, D); attention patterns
        are stored under ("pattern", layer) when requested.
        """
        if ids.dim() == 1:
            ids = ids[None]
        eps = self.cfg.norm_eps
        store = {} if (cache or return_patterns) else None
        x = self.embed(ids, patch_regions, hook)
        if store is not None and self._last_patch_embed is not None:
            store[(PATCH_EMBED, 0)] = self._last_patch_embed.detach().clone()
        T = ids.shape[1]
        pos = torch.arange(T)

        def h(family, layer, t):
            if hook is not None:
                t = hook(family, layer, t)
            if store is not None and cache:
                store[(family, layer)] = t.detach().clone()
            return t

        for layer in range(self.cfg.n_layers):
            prefix = f"blocks{layer}"
            x = h("resid_pre", layer, x)
            n = rms_norm(x, eps)
            a, pattern = self._attention(prefix, n, n, pos, pos, return_pattern=return_patterns)
            if return_patterns:
                store[("pattern", layer)] = pattern.detach().clone()
            a = h("attn_out", layer, a)
            mid = x + a
            m = h("mlp_out", layer, self._mlp(prefix, rms_norm(mid, eps)))
            x = h("resid_post", layer, mid + m)
        logits = self.unembed(x)
        return logits, store

    def run_frozen(
        self,
        ids: torch.Tensor,
        base: dict,
        positions: Sequence[int],
        hook: Hook | None = None,
        patch_regions=None,
    ) -> torch.Tensor:
        """Recompute only ``positions``; every other position is read from ``base``.

        ``base`` is a cache from ``run(..., cache=True)`` on the same ids.
        Attention at recomputed positions reads keys/values of frozen
        positions from the cached residual stream. Logits at frozen positions
        are the cached ones.
        """
        if ids.dim() == 1:
            ids = ids[None]
        eps = self.cfg.norm_eps
        T = ids.shape[1]
        R = torch.tensor(sorted(set(int(p) for p in positions)), dtype=torch.long)
        all_pos = torch.arange(T)

        def h(family, layer, cur):
            full = base[(family, layer)].clone()
            full[:, R] = cur
            if hook is not None:
                full = hook(family, layer, full)
            return full

        if self.cfg.n_layers == 0:
            x_full = self.embed(ids, patch_regions, hook)
        else:
            x_full = base[("resid_pre", 0)].clone()
            if hook is not None and base.get((PATCH_EMBED, 0)) is not None:
                pe = base[(PATCH_EMBED, 0)]
                new_pe = hook(PATCH_EMBED, 0, pe.clone())
                x_full = x_full + (new_pe - pe)
        cur = x_full[:, R]
        for layer in range(self.cfg.n_layers):
            prefix = f"blocks{layer}"
            full = h("resid_pre", layer, cur)
            cur = full[:, R]
            n_full = rms_norm(full, eps)
            a, _ = self._attention(prefix, n_full[:, R], n_full, R, all_pos)
            cur_a = h("attn_out", layer, a)[:, R]
            mid = cur + cur_a
            m = h("mlp_out", layer, self._mlp(prefix, rms_norm(mid, eps)))[:, R]
            cur = h("resid_post", layer, mid + m)[:, R]
        if self.cfg.n_layers == 0:
            return self.unembed(x_full)
        final = base[("resid_post", self.cfg.n_layers - 1)].clone()
        final[:, R] = cur
        return self.unembed(final)


# -- probability readouts -------------------------------------------------


def next_token_distribution(logits) -> np.ndarray:
    """Max-subtracted softmax of one logit row, in float64."""
    z = np.asarray(logits.detach().cpu().numpy() if torch.is_tensor(logits) else logits, dtype=np.float64)
    if not np.all(np.isfinite(z)):
        raise NumericError("non-finite logits")
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


@dataclass
class DigitDistribution:
    raw: np.ndarray  # full-vocabulary softmax mass of digits 1..9
    renormalized: np.ndarray

    @property
    def argmax(self) -> int:
        return int(np.argmax(self.renormalized)) + 1

    def prob(self, n: int, renormalized: bool = False) -> float:
        if not 1 <= n <= 9:
            return 0.0
        arr = self.renormalized if renormalized else self.raw
        return float(arr[n - 1])


def digit_distribution(logits, vocab=None) -> DigitDistribution:
    vocab = vocab or default_vocab()
    probs = next_token_distribution(logits)
    raw = probs[..., vocab.digit_ids]
    return DigitDistribution(raw=raw, renormalized=raw / raw.sum(axis=-1, keepdims=True))


# -- checkpoints ------------------------------------------------------------


def save_checkpoint(model: CountingTransformer, path, step: int = 0, extra: dict | None = None) -> None:
    """Binary layout: magic, uint32 LE header length, JSON header, float32 LE weights."""
    header = {
        "version": CHECKPOINT_VERSION,
        "config": model.cfg.to_dict(),
        "seed": model.cfg.seed,
        "step": step,
        "params": [[n, list(s)] for n, s in param_shapes(model.cfg)],
        "vocab": list(default_vocab().tokens),
    }
    if extra:
        header["extra"] = extra
    blob = json.dumps(header, sort_keys=True).encode()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for _, w in model.named_weights():
            fh.write(w.detach().cpu().numpy().astype("<f4").tobytes())


def read_checkpoint_header(path) -> dict:
    with open(path, "rb") as fh:
        if fh.read(len(CHECKPOINT_MAGIC)) != CHECKPOINT_MAGIC:
            raise InputError(f"{path}: not a countlab checkpoint")
        (n,) = struct.unpack("<I", fh.read(4))
        return json.loads(fh.read(n))


def load_checkpoint(path) -> tuple[CountingTransformer, dict]:
    with open(path, "rb") as fh:
        if fh.read(len(CHECKPOINT_MAGIC)) != CHECKPOINT_MAGIC:
            raise InputError(f"{path}: not a countlab checkpoint")
        (n,) = struct.unpack("<I", fh.read(4))
        header = json.loads(fh.read(n))
        if header.get("version") != CHECKPOINT_VERSION:
            raise InputError(f"unsupported checkpoint version {header.get('version')}")
        cfg = ModelConfig(**header["config"])
        model = CountingTransformer(cfg)
        with torch.no_grad():
            for name, shape in param_shapes(cfg):
                count = int(np.prod(shape))
                arr = np.frombuffer(fh.read(4 * count), dtype="<f4").reshape(shape)
                model.p(name).copy_(torch.from_numpy(arr.copy()))
    model.eval()
    return model, header


def batch_inputs(samples, vocab=None):
    """Right-padded id tensor plus per-row patch regions for a list of samples."""
    vocab = vocab or default_vocab()
    T = max(len(s) for s in samples)
    pad = vocab.special_ids["pad"]
    ids = torch.full((len(samples), T), pad, dtype=torch.long)
    regions = []
    for b, s in enumerate(samples):
        ids[b, : len(s)] = torch.tensor(s.ids(vocab))
        if s.patch_span is not None:
            regions.append((s.patch_span[0], s.grid_size))
        else:
            regions.append(None)
    return ids, (regions if any(r is not None for r in regions) else None)
