"""The multiscale byte decoder.

A byte sequence is chunked into K patches of P bytes. A large global
transformer contextualizes patch embeddings (dimension P*D_G), and a small
local transformer predicts bytes within each patch from the global output
slice plus the previous byte's embedding. Variants: a causal convolutional
patch encoder, cross-patch attention with r carried key/value slots, and
ablations that drop the local or the global half.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor

# Sentinel id in prepared inputs; embeds as the trainable pad vectors.
PAD = -1

FF_MULT = 4
LN_EPS = 1e-5


def _auto_heads(dim: int) -> int:
    # Target head dim 64 (scaled down for small models), keeping divisibility.
    h = max(1, dim // 64)
    while dim % h != 0:
        h -= 1
    return h


@dataclass
class ModelConfig:
    """Architecture shape: dims, depths, patch geometry, variant flags."""

    context_len: int
    patch_size: int
    global_dim: int
    local_dim: int
    global_layers: int = 1
    local_layers: int = 1
    vocab_size: int = 256
    global_heads: int = 0  # 0 = auto
    local_heads: int = 0
    cross_patch_window: int = 0
    conv_encoder: bool = False
    no_local: bool = False
    no_global: bool = False
    dropout: float = 0.1

    def __post_init__(self):
        if self.vocab_size < 1 or self.patch_size < 1 or self.global_dim < 1 or self.local_dim < 1:
            raise ValueError("vocab_size, patch_size and dims must be >= 1")
        if self.context_len < 1 or self.context_len % self.patch_size != 0:
            raise ValueError("context_len must be a positive multiple of patch_size")
        if self.no_local and self.no_global:
            raise ValueError("no_local and no_global are mutually exclusive")
        if not 0 <= self.cross_patch_window <= self.patch_size:
            raise ValueError("cross_patch_window must be in [0, patch_size]")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must be in [0, 1)")
        if self.global_heads == 0:
            self.global_heads = _auto_heads(self.patch_size * self.global_dim)
        if self.local_heads == 0:
            self.local_heads = _auto_heads(self.local_dim)
        if (self.patch_size * self.global_dim) % self.global_heads != 0:
            raise ValueError("global model dim must divide evenly into heads")
        if self.local_dim % self.local_heads != 0:
            raise ValueError("local_dim must divide evenly into heads")
        if self.cross_patch_active and (self.local_dim // self.local_heads) % 2 != 0:
            raise ValueError("cross-patch rotary positions need an even local head dim")

    @property
    def num_patches(self) -> int:
        return self.context_len // self.patch_size

    # Flags on an absent path are inert; these are the effective switches.
    @property
    def global_active(self) -> bool:
        return not self.no_global

    @property
    def local_active(self) -> bool:
        return not self.no_local

    @property
    def conv_active(self) -> bool:
        return self.conv_encoder and self.global_active

    @property
    def cross_patch_active(self) -> bool:
        return self.cross_patch_window > 0 and self.local_active


def _layer_spec(prefix: str, dim: int) -> list[tuple[str, tuple[int, ...], bool, str]]:
    spec = [
        (f"{prefix}.ln1.gain", (dim,), False, "ones"),
        (f"{prefix}.ln1.bias", (dim,), False, "zeros"),
    ]
    for w in ("wq", "wk", "wv", "wo"):
        spec.append((f"{prefix}.attn.{w}", (dim, dim), True, "normal"))
    for b in ("bq", "bk", "bv", "bo"):
        spec.append((f"{prefix}.attn.{b}", (dim,), False, "zeros"))
    spec += [
        (f"{prefix}.ln2.gain", (dim,), False, "ones"),
        (f"{prefix}.ln2.bias", (dim,), False, "zeros"),
        (f"{prefix}.ff.w1", (dim, FF_MULT * dim), True, "normal"),
        (f"{prefix}.ff.b1", (FF_MULT * dim,), False, "zeros"),
        (f"{prefix}.ff.w2", (FF_MULT * dim, dim), True, "normal"),
        (f"{prefix}.ff.b2", (dim,), False, "zeros"),
    ]
    return spec


def parameter_spec(cfg: ModelConfig) -> list[tuple[str, tuple[int, ...], bool, str]]:
    """Ordered inventory of (name, shape, weight_decay, init) for a config.

    Paths disabled by variant flags contribute no parameters, so the name
    set doubles as the checkpoint contract.
    """
    v, t, p = cfg.vocab_size, cfg.context_len, cfg.patch_size
    dg, dl = cfg.global_dim, cfg.local_dim
    m = p * dg
    spec: list[tuple[str, tuple[int, ...], bool, str]] = []
    if cfg.global_active:
        spec += [
            ("global_embed", (v, dg), False, "normal"),
            ("global_pos", (t, dg), False, "normal"),
            ("global_pad", (p, dg), False, "normal"),
        ]
        if cfg.conv_active:
            for w in (3, 5, 7):
                spec.append((f"conv{w}", (w, dg, dg), True, "normal"))
        for i in range(cfg.global_layers):
            spec += _layer_spec(f"g{i}", m)
        if cfg.global_layers > 0:
            spec += [("g.lnf.gain", (m,), False, "ones"),
                     ("g.lnf.bias", (m,), False, "zeros")]
        spec.append(("gl_proj", (dg, dl), True, "normal"))
    spec.append(("local_embed", (v, dl), False, "normal"))
    if cfg.local_active:
        spec += [
            ("local_pad", (dl,), False, "normal"),
            ("local_pos", (p, dl), False, "zeros"),
        ]
        for i in range(cfg.local_layers):
            spec += _layer_spec(f"l{i}", dl)
        if cfg.local_layers > 0:
            spec += [("l.lnf.gain", (dl,), False, "ones"),
                     ("l.lnf.bias", (dl,), False, "zeros")]
    return spec


class Parameters:
    """Named, ordered collection of learnable tensors."""

    def __init__(self):
        self._tensors: dict[str, Tensor] = {}
        self._decay: dict[str, bool] = {}

    def add(self, name: str, tensor: Tensor, decay: bool) -> None:
        if name in self._tensors:
            raise ValueError(f"duplicate parameter name {name!r}")
        tensor.requires_grad = True
        self._tensors[name] = tensor
        self._decay[name] = decay

    def __getitem__(self, name: str) -> Tensor:
        return self._tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self._tensors

    def __len__(self) -> int:
        return len(self._tensors)

    def names(self) -> list[str]:
        return list(self._tensors)

    def items(self):
        return self._tensors.items()

    def decays(self, name: str) -> bool:
        return self._decay[name]

    def zero_grad(self) -> None:
        for t in self._tensors.values():
            t.grad = None

    def check_against(self, cfg: ModelConfig) -> None:
        """Shape-check every tensor against the config's expected inventory."""
        expected = {name: shape for name, shape, _, _ in parameter_spec(cfg)}
        if set(expected) != set(self._tensors):
            missing = sorted(set(expected) - set(self._tensors))
            surplus = sorted(set(self._tensors) - set(expected))
            raise ValueError(f"parameter inventory mismatch: missing={missing} surplus={surplus}")
        for name, shape in expected.items():
            if self._tensors[name].shape != shape:
                raise ValueError(
                    f"parameter {name!r} has shape {self._tensors[name].shape}, expected {shape}")


def count_params(cfg: ModelConfig) -> dict[str, int]:
    """Non-embedding parameter counts, split by half, plus embedding total.

    gl_proj counts toward the local half (it feeds the local model); conv
    filters toward the global half. Used to match compute budgets.
    """
    embed_names = {"global_embed", "global_pos", "global_pad",
                   "local_embed", "local_pad", "local_pos"}
    counts = {"global": 0, "local": 0, "embed": 0}
    for name, shape, _, _ in parameter_spec(cfg):
        n = int(np.prod(shape))
        if name in embed_names:
            counts["embed"] += n
        elif name.startswith("g") and not name.startswith("gl_proj"):
            counts["global"] += n
        elif name.startswith("conv"):
            counts["global"] += n
        else:
            counts["local"] += n
    return counts


def prepare_global_input(ids: np.ndarray, patch_size: int) -> np.ndarray:
    """Chunk (..., T) byte ids into (..., K, P) global patches.

    Patch 0 is the PAD sentinel patch; patch k holds bytes [(k-1)P, kP).
    The final P bytes never enter the global input.
    """
    ids = np.asarray(ids)
    t = ids.shape[-1]
    if t % patch_size != 0:
        raise ValueError("sequence length must be a multiple of patch_size")
    k = t // patch_size
    patches = ids.reshape(ids.shape[:-1] + (k, patch_size))
    pad = np.full(ids.shape[:-1] + (1, patch_size), PAD, dtype=ids.dtype)
    return np.concatenate([pad, patches[..., :-1, :]], axis=-2)


def prepare_local_input(ids: np.ndarray, patch_size: int) -> np.ndarray:
    """Chunk (..., T) byte ids into (..., K, P) rows [PAD, x_kP, .., x_kP+P-2].

    Position (k, p) of the local model predicts byte x_{kP+p}.
    """
    ids = np.asarray(ids)
    t = ids.shape[-1]
    if t % patch_size != 0:
        raise ValueError("sequence length must be a multiple of patch_size")
    k = t // patch_size
    patches = ids.reshape(ids.shape[:-1] + (k, patch_size))
    pad = np.full(ids.shape[:-1] + (k, 1), PAD, dtype=ids.dtype)
    return np.concatenate([pad, patches[..., :-1]], axis=-1)


def _split_heads(x: Tensor, heads: int) -> Tensor:
    # (..., t, dim) -> (..., heads, t, dim/heads)
    *lead, t, dim = x.shape
    y = x.reshape(*lead, t, heads, dim // heads)
    axes = list(range(y.ndim))
    axes[-3], axes[-2] = axes[-2], axes[-3]
    return y.transpose(tuple(axes))


def _merge_heads(x: Tensor) -> Tensor:
    # (..., heads, t, dh) -> (..., t, heads*dh)
    axes = list(range(x.ndim))
    axes[-3], axes[-2] = axes[-2], axes[-3]
    y = x.transpose(tuple(axes))
    *lead, t, heads, dh = y.shape
    return y.reshape(*lead, t, heads * dh)


class MegabyteDecoder:
    """Ties a ModelConfig to a Parameters set and runs the forward pass.

    Eval-mode forward (rng=None) is read-only and deterministic; training
    passes a seeded Generator to drive dropout on attention/FF outputs
    (never on embeddings).
    """

    def __init__(self, config: ModelConfig, params: Parameters):
        params.check_against(config)
        self.config = config
        self.params = params

    # -- patch embedder (global input) ----------------------------------

    def embed_global(self, ids: np.ndarray) -> Tensor:
        """Byte + position embeddings, reshaped into K patch vectors of P*D_G.

        The leading patch is the trainable pad patch, used verbatim (no
        positional term); with the conv encoder on, the 3-5-7 causal stack
        contextualizes byte embeddings before chunking.
        """
        cfg, p = self.config, self.params
        b, t = ids.shape
        k = t // cfg.patch_size
        emb = T.embedding(p["global_embed"], ids)
        emb = emb + p["global_pos"][:t]
        if cfg.conv_active:
            for w in (3, 5, 7):
                emb = emb + T.causal_conv1d(emb, p[f"conv{w}"]).relu()
        patches = emb.reshape(b, k, cfg.patch_size * cfg.global_dim)
        pad = T.broadcast_to(p["global_pad"].reshape(1, 1, -1),
                             (b, 1, cfg.patch_size * cfg.global_dim))
        return T.concat([pad, patches[:, :-1, :]], axis=1)

    # -- transformer stacks ----------------------------------------------

    def _ln(self, name: str, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.params[f"{name}.gain"], self.params[f"{name}.bias"], LN_EPS)

    def _ff(self, prefix: str, x: Tensor) -> Tensor:
        p = self.params
        h = (T.matmul(x, p[f"{prefix}.w1"]) + p[f"{prefix}.b1"]).relu()
        return T.matmul(h, p[f"{prefix}.w2"]) + p[f"{prefix}.b2"]

    def _qkv(self, prefix: str, x: Tensor, heads: int) -> tuple[Tensor, Tensor, Tensor]:
        p = self.params
        q = T.matmul(x, p[f"{prefix}.wq"]) + p[f"{prefix}.bq"]
        kk = T.matmul(x, p[f"{prefix}.wk"]) + p[f"{prefix}.bk"]
        v = T.matmul(x, p[f"{prefix}.wv"]) + p[f"{prefix}.bv"]
        return _split_heads(q, heads), _split_heads(kk, heads), _split_heads(v, heads)

    def _global_layer(self, i: int, x: Tensor, rng) -> Tensor:
        cfg = self.config
        a = self._ln(f"g{i}.ln1", x)
        q, k, v = self._qkv(f"g{i}.attn", a, cfg.global_heads)
        att = T.causal_attention(q, k, v)
        att = T.matmul(_merge_heads(att), self.params[f"g{i}.attn.wo"]) + self.params[f"g{i}.attn.bo"]
        x = x + T.dropout(att, cfg.dropout, rng)
        f = self._ff(f"g{i}.ff", self._ln(f"g{i}.ln2", x))
        return x + T.dropout(f, cfg.dropout, rng)

    def global_forward(self, h_global_in: Tensor, rng=None) -> Tensor:
        """Pre-norm decoder stack, causal over the K patch positions."""
        cfg = self.config
        x = h_global_in
        for i in range(cfg.global_layers):
            x = self._global_layer(i, x, rng)
        if cfg.global_layers > 0:
            x = self._ln("g.lnf", x)
        return x

    def _local_layer(self, i: int, x: Tensor, rng) -> Tensor:
        """One local layer batched over (B, K) patches.

        With cross-patch attention, each patch additionally sees the last
        r key/value slots of the previous patch at the same layer (patch 0
        sees zeros), with rotary positions placing them at -r..-1.
        """
        cfg = self.config
        r = cfg.cross_patch_window if cfg.cross_patch_active else 0
        a = self._ln(f"l{i}.ln1", x)
        q, k, v = self._qkv(f"l{i}.attn", a, cfg.local_heads)
        if r > 0:
            b, kp, h, t, dh = k.shape
            zero = Tensor(np.zeros((b, 1, h, r, dh), dtype=k.data.dtype))
            ek = T.concat([zero, k[:, :-1, :, t - r:, :]], axis=1)
            ev = T.concat([zero, v[:, :-1, :, t - r:, :]], axis=1)
            att = T.causal_attention(q, k, v, extra_k=ek, extra_v=ev, rotary=True)
        else:
            att = T.causal_attention(q, k, v)
        att = T.matmul(_merge_heads(att), self.params[f"l{i}.attn.wo"]) + self.params[f"l{i}.attn.bo"]
        x = x + T.dropout(att, cfg.dropout, rng)
        f = self._ff(f"l{i}.ff", self._ln(f"l{i}.ln2", x))
        return x + T.dropout(f, cfg.dropout, rng)

    def local_forward(self, h_local_in: Tensor, rng=None) -> Tensor:
        """Local stack over every patch (batched), then the tied output head."""
        cfg = self.config
        x = h_local_in
        for i in range(cfg.local_layers):
            x = self._local_layer(i, x, rng)
        if cfg.local_layers > 0:
            x = self._ln("l.lnf", x)
        b, k, p_sz, dl = x.shape
        return self.output_head(x.reshape(b, k * p_sz, dl))

    def output_head(self, h: Tensor) -> Tensor:
        # Weight tying: logits through the local embedding table.
        return T.matmul(h, self.params["local_embed"].transpose((1, 0)))

    # -- combining the two halves -----------------------------------------

    def _local_byte_embed(self, ids: np.ndarray) -> Tensor:
        """Shifted byte embeddings per patch, plus learned local positions."""
        cfg, p = self.config, self.params
        b, t = ids.shape
        k = t // cfg.patch_size
        pad = T.broadcast_to(p["local_pad"].reshape(1, 1, 1, -1), (b, k, 1, cfg.local_dim))
        if cfg.patch_size > 1:
            loc = prepare_local_input(ids, cfg.patch_size)
            real = T.embedding(p["local_embed"], loc[:, :, 1:])
            emb = T.concat([pad, real], axis=2)
        else:
            emb = pad
        return emb + p["local_pos"][:cfg.patch_size]

    def project_global(self, h_global_out: Tensor) -> Tensor:
        """Slice each patch output into P chunks of D_G and project to D_L."""
        cfg = self.config
        b, k, _ = h_global_out.shape
        chunks = h_global_out.reshape(b, k, cfg.patch_size, cfg.global_dim)
        return T.matmul(chunks, self.params["gl_proj"])

    def combine_for_local(self, h_global_out: Tensor, ids: np.ndarray) -> Tensor:
        return self.project_global(h_global_out) + self._local_byte_embed(ids)

    # -- full forward -------------------------------------------------------

    def forward(self, ids: np.ndarray, rng: np.random.Generator | None = None) -> Tensor:
        """Log-probabilities over the vocabulary at every position.

        ids is (T,) or (B, T) with T a multiple of the patch size, at most
        the configured context length. rng enables dropout (training).
        """
        cfg = self.config
        ids = np.asarray(ids)
        single = ids.ndim == 1
        if single:
            ids = ids[None, :]
        b, t = ids.shape
        if t > cfg.context_len or t % cfg.patch_size != 0:
            raise ValueError("input length must be a multiple of patch_size, at most context_len")

        if not cfg.global_active:
            h_local_in = self._local_byte_embed(ids)
            logits = self.local_forward(h_local_in, rng)
        else:
            h_global_out = self.global_forward(self.embed_global(ids), rng)
            if not cfg.local_active:
                proj = self.project_global(h_global_out)
                logits = self.output_head(proj.reshape(b, t, cfg.local_dim))
            else:
                h_local_in = self.combine_for_local(h_global_out, ids)
                logits = self.local_forward(h_local_in, rng)

        out = T.log_softmax_last(logits)
        return out[0] if single else out
