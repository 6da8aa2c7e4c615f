"""Evaluation and generation.

Evaluation reports bits per byte under four modes: basic (each window
scored once), sliding (overlapping windows keep their later half), strided
(two patch-offset passes, each position scored in the first half of a
patch), and their combination. Generation decodes autoregressively with a
per-patch global cache and a per-byte local cache, counting modeled serial
steps as it goes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .data import Document, Window, make_windows
from .model import MegabyteDecoder, _merge_heads, _split_heads
from .tensor import Tensor

LN2 = math.log(2.0)

# Forward passes per byte relative to basic inference.
MODE_COST = {"basic": 1, "sliding": 2, "strided": 2, "sliding+strided": 4}


@dataclass
class EvalReport:
    bpb: float
    per_position_loss: np.ndarray    # mean bits at each within-patch index (scoring frame)
    per_position_count: np.ndarray
    mode: str
    cost_multiplier: int

    def summary(self) -> str:
        lines = [f"mode={self.mode}  bpb={self.bpb:.6f}  cost={self.cost_multiplier}X",
                 "within-patch position losses (bits):"]
        for i, (loss, n) in enumerate(zip(self.per_position_loss, self.per_position_count)):
            shown = f"{loss:.6f}" if n else "-"
            lines.append(f"  p={i}: {shown}  (n={int(n)})")
        return "\n".join(lines)


@dataclass
class GenTrace:
    data: bytes                  # generated bytes (prompt excluded)
    logprobs: np.ndarray         # model log-prob of each emitted byte
    serial_steps: np.ndarray     # cumulative modeled serial steps per byte
    total_serial_steps: int


def _target_logprobs(model: MegabyteDecoder, inputs: np.ndarray) -> np.ndarray:
    """Teacher-forced log p(x_t | x_<t) for every row position, (B, T)."""
    with T.no_grad():
        logp = model.forward(inputs).data
    return np.take_along_axis(logp, inputs[..., None], axis=-1)[..., 0]


def strided_partition(t: int, p: int) -> tuple[np.ndarray, np.ndarray]:
    """Positions supplied by pass A (original alignment) and pass B (offset
    by P/2): exactly those in the first half of one of the two patch frames."""
    if p % 2 != 0:
        raise ValueError("strided inference requires an even patch size")
    pos = np.arange(t)
    from_a = (pos % p) < p // 2
    return pos[from_a], pos[~from_a]


def _strided_scores(model: MegabyteDecoder, inputs: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-position target log-probs under strided inference, batched.

    Pass B runs on the window shifted left by P/2 with trailing pad bytes,
    so byte t sits at within-patch position (t - P/2) mod P. Returns the
    combined (B, T) log-probs and the (T,) scoring-frame patch positions.
    """
    p = model.config.patch_size
    if p % 2 != 0:
        raise ValueError("strided inference requires an even patch size")
    half = p // 2
    t = inputs.shape[-1]
    lp_a = _target_logprobs(model, inputs)
    shifted = np.concatenate(
        [inputs[..., half:], np.zeros(inputs.shape[:-1] + (half,), dtype=inputs.dtype)], axis=-1)
    lp_b_frame = _target_logprobs(model, shifted)

    pos = np.arange(t)
    use_a = (pos % p) < half
    combined = np.where(use_a, lp_a, np.roll(lp_b_frame, half, axis=-1))
    frame_pos = np.where(use_a, pos % p, pos % p - half)
    return combined, frame_pos


def strided_inference(model: MegabyteDecoder, window: np.ndarray) -> np.ndarray:
    """Combined per-position log-probs for one window of T bytes."""
    window = np.asarray(window)
    combined, _ = _strided_scores(model, window[None, :])
    return combined[0]


def evaluate_bpb(model: MegabyteDecoder, docs: list[Document], mode: str = "basic",
                 eval_batch: int = 16) -> EvalReport:
    """Score a corpus under the chosen inference mode."""
    if mode not in MODE_COST:
        raise ValueError(f"mode must be one of {sorted(MODE_COST)}")
    cfg = model.config
    t, p = cfg.context_len, cfg.patch_size
    total_real = sum(len(d.data) for d in docs)
    if total_real < p:
        raise ValueError("corpus shorter than one patch")

    sliding = mode in ("sliding", "sliding+strided")
    strided = mode in ("strided", "sliding+strided")
    if sliding and t % 2 != 0:
        raise ValueError("sliding evaluation requires an even context length")

    if sliding:
        windows, keep_from = [], []
        for doc in docs:
            n = len(doc.data)
            offsets = [0] + [o for o in range(t // 2, n, t // 2) if o + t // 2 < n]
            for o in offsets:
                windows.append(_doc_window(doc, o, t))
                keep_from.append(0 if o == 0 else t // 2)
    else:
        windows = make_windows(docs, t, stride=t)
        keep_from = [0] * len(windows)

    bits_sum = 0.0
    count = 0
    pos_bits = np.zeros(p)
    pos_count = np.zeros(p, dtype=np.int64)

    for i in range(0, len(windows), eval_batch):
        group = windows[i:i + eval_batch]
        inputs = np.stack([w.bytes for w in group])
        mask = np.stack([w.mask for w in group])
        for row, start in enumerate(keep_from[i:i + eval_batch]):
            mask[row, :start] = False
        if strided:
            logp, frame_pos = _strided_scores(model, inputs)
        else:
            logp = _target_logprobs(model, inputs)
            frame_pos = np.arange(t) % p
        bits = -logp / LN2
        bits_sum += float(bits[mask].sum())
        count += int(mask.sum())
        for j in range(p):
            sel = mask & (frame_pos == j)[None, :]
            pos_bits[j] += float(bits[sel].sum())
            pos_count[j] += int(sel.sum())

    mean_pos = np.divide(pos_bits, pos_count, out=np.zeros_like(pos_bits),
                         where=pos_count > 0)
    return EvalReport(bpb=bits_sum / count, per_position_loss=mean_pos,
                      per_position_count=pos_count, mode=mode,
                      cost_multiplier=MODE_COST[mode])


def _doc_window(doc: Document, offset: int, t: int) -> Window:
    raw = np.frombuffer(doc.data, dtype=np.uint8).astype(np.int64)
    chunk = raw[offset:offset + t]
    row = np.zeros(t, dtype=np.int64)
    row[:len(chunk)] = chunk
    mask = np.zeros(t, dtype=bool)
    mask[:len(chunk)] = True
    return Window(doc.id, offset, row, mask)


def bpb_to_word_ppl(bpb: float, total_bytes: int, total_words: int) -> float:
    """Word-level perplexity 2^(bpb * bytes / words)."""
    if total_bytes <= 0:
        raise ValueError("total_bytes must be > 0")
    if total_words <= 0:
        raise ValueError("zero words")
    return 2.0 ** (bpb * total_bytes / total_words)


def count_words(data: bytes) -> int:
    """Whitespace-delimited token count."""
    return len(data.split())


# -- incremental generation -------------------------------------------------


class _LayerKV:
    """Grows key/value rows (pre-rotary, head-split) one position at a time."""

    def __init__(self):
        self.k: np.ndarray | None = None
        self.v: np.ndarray | None = None

    def append(self, k_new: np.ndarray, v_new: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        if self.k is None:
            self.k, self.v = k_new, v_new
        else:
            self.k = np.concatenate([self.k, k_new], axis=-2)
            self.v = np.concatenate([self.v, v_new], axis=-2)
        return self.k, self.v

    @property
    def length(self) -> int:
        return 0 if self.k is None else self.k.shape[-2]


class _Decoder:
    """Patch-cached incremental state over one generation stream."""

    def __init__(self, model: MegabyteDecoder):
        self.model = model
        self.cfg = model.config
        self.p = model.params
        cfg = self.cfg
        self.l_global = cfg.global_layers if cfg.global_active else 0
        self.l_local = cfg.local_layers if cfg.local_active else 0
        self.ids: list[int] = []
        self.patches_done = 0     # global positions already computed
        self.slices: np.ndarray | None = None   # (P, D_L) conditioning for current patch
        self.global_kv = [_LayerKV() for _ in range(cfg.global_layers)]
        self.local_kv = [_LayerKV() for _ in range(cfg.local_layers)]
        r = cfg.cross_patch_window if cfg.cross_patch_active else 0
        self.r = r
        if r > 0:
            dh = cfg.local_dim // cfg.local_heads
            zero = np.zeros((1, cfg.local_heads, r, dh), dtype=T.default_dtype())
            self.extras = [(zero, zero) for _ in range(cfg.local_layers)]
        self.serial_steps = 0

    # - shared layer pieces, incremental shapes -

    def _ln(self, name, x):
        return T.layer_norm(x, self.p[f"{name}.gain"], self.p[f"{name}.bias"])

    def _qkv_row(self, prefix, x, heads):
        q = T.matmul(x, self.p[f"{prefix}.wq"]) + self.p[f"{prefix}.bq"]
        k = T.matmul(x, self.p[f"{prefix}.wk"]) + self.p[f"{prefix}.bk"]
        v = T.matmul(x, self.p[f"{prefix}.wv"]) + self.p[f"{prefix}.bv"]
        return (_split_heads(q, heads).data, _split_heads(k, heads).data,
                _split_heads(v, heads).data)

    def _block(self, scope, i, x, cache, heads, extras=None, rotary=False):
        a = self._ln(f"{scope}{i}.ln1", x)
        q, k_new, v_new = self._qkv_row(f"{scope}{i}.attn", a, heads)
        k_all, v_all = cache.append(k_new, v_new)
        ek, ev = (extras if extras is not None else (None, None))
        att = T.causal_attention(Tensor(q), Tensor(k_all), Tensor(v_all),
                                 extra_k=None if ek is None else Tensor(ek),
                                 extra_v=None if ev is None else Tensor(ev),
                                 rotary=rotary)
        att = T.matmul(_merge_heads(att), self.p[f"{scope}{i}.attn.wo"]) \
            + self.p[f"{scope}{i}.attn.bo"]
        x = x + att
        h = (T.matmul(self._ln(f"{scope}{i}.ln2", x), self.p[f"{scope}{i}.ff.w1"])
             + self.p[f"{scope}{i}.ff.b1"]).relu()
        return x + T.matmul(h, self.p[f"{scope}{i}.ff.w2"]) + self.p[f"{scope}{i}.ff.b2"]

    # - global advance: one new patch position -

    def _advance_global(self, counted: bool) -> None:
        cfg = self.cfg
        k_idx = self.patches_done
        m = cfg.patch_size * cfg.global_dim
        if k_idx == 0:
            x = Tensor(self.p["global_pad"].data.reshape(1, 1, m))
        else:
            # Recompute byte embeddings over the prefix; the conv stack
            # spans patch boundaries, so this is the simplest correct form.
            hi = k_idx * cfg.patch_size
            ids = np.asarray(self.ids[:hi], dtype=np.int64)[None, :]
            emb = T.embedding(self.p["global_embed"], ids) + self.p["global_pos"][:hi]
            if cfg.conv_active:
                for w in (3, 5, 7):
                    emb = emb + T.causal_conv1d(emb, self.p[f"conv{w}"]).relu()
            x = emb.data[:, hi - cfg.patch_size:hi, :].reshape(1, 1, m)
            x = Tensor(x)
        for i in range(cfg.global_layers):
            x = self._block("g", i, x, self.global_kv[i], cfg.global_heads)
        if cfg.global_layers > 0:
            x = self._ln("g.lnf", x)
        chunks = x.reshape(1, cfg.patch_size, cfg.global_dim)
        self.slices = T.matmul(chunks, self.p["gl_proj"]).data[0]
        self.patches_done += 1
        self.local_kv = [_LayerKV() for _ in range(cfg.local_layers)]
        if counted:
            self.serial_steps += self.l_global

    def _finish_patch(self) -> None:
        if self.r > 0:
            self.extras = [(kv.k[..., -self.r:, :], kv.v[..., -self.r:, :])
                           for kv in self.local_kv]

    # - one byte position: returns the log-prob row over the vocab -

    def step(self, counted: bool) -> np.ndarray:
        cfg = self.cfg
        t = len(self.ids)
        if t >= cfg.context_len:
            raise ValueError("generation would exceed the model context")
        k_idx, p_idx = divmod(t, cfg.patch_size)
        if cfg.global_active and k_idx >= self.patches_done:
            if k_idx > 0:
                self._finish_patch()
            self._advance_global(counted)
        elif not cfg.global_active and p_idx == 0:
            if k_idx > 0:
                self._finish_patch()
            self.local_kv = [_LayerKV() for _ in range(cfg.local_layers)]

        if not cfg.local_active:
            h = Tensor(self.slices[p_idx][None, None, :])
            logits = self.model.output_head(h)
        else:
            if p_idx == 0:
                byte_part = self.p["local_pad"].data
            else:
                byte_part = self.p["local_embed"].data[self.ids[-1]]
            h = byte_part + self.p["local_pos"].data[p_idx]
            if cfg.global_active:
                h = h + self.slices[p_idx]
            x = Tensor(h[None, None, :])
            for i in range(cfg.local_layers):
                extras = self.extras[i] if self.r > 0 else None
                x = self._block("l", i, x, self.local_kv[i], cfg.local_heads,
                                extras=extras, rotary=self.r > 0)
            if cfg.local_layers > 0:
                x = self._ln("l.lnf", x)
            logits = self.model.output_head(x)
        if counted:
            self.serial_steps += self.l_local
        row = logits.data.reshape(-1)
        return row - np.log(np.exp(row - row.max()).sum()) - row.max()

    def push(self, byte: int) -> None:
        self.ids.append(int(byte))


def generate(model: MegabyteDecoder, prompt: bytes, n_bytes: int,
             temperature: float = 1.0, seed: int = 0) -> GenTrace:
    """Sample n_bytes autoregressively after the prompt.

    temperature 0 is greedy (deterministic); the global model advances
    once per patch against its cache, the local model once per byte.
    """
    cfg = model.config
    if temperature < 0:
        raise ValueError("temperature must be >= 0")
    if len(prompt) + n_bytes > cfg.context_len:
        raise ValueError("prompt plus requested length exceeds the model context")
    rng = np.random.default_rng(seed)
    out: list[int] = []
    logprobs: list[float] = []
    cum_steps: list[int] = []

    with T.no_grad():
        dec = _Decoder(model)
        for b in prompt:
            dec.step(counted=False)
            dec.push(b)
        for _ in range(n_bytes):
            row = dec.step(counted=True)
            if temperature == 0.0:
                byte = int(np.argmax(row))
            else:
                scaled = row / temperature
                probs = np.exp(scaled - scaled.max())
                probs /= probs.sum()
                byte = int(rng.choice(cfg.vocab_size, p=probs))
            out.append(byte)
            logprobs.append(float(row[byte]))
            cum_steps.append(dec.serial_steps)
            dec.push(byte)

    return GenTrace(data=bytes(out), logprobs=np.asarray(logprobs),
                    serial_steps=np.asarray(cum_steps, dtype=np.int64),
                    total_serial_steps=dec.serial_steps)
