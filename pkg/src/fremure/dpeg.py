"""Dual-branch predicate embedding generator.

Per-frame pair sets run through two parallel single-layer attention encoders:
a plain head branch and a tail branch that first applies the frequency-aware
correction. A learned gate fuses the branches per element. The fused sequence
for each tracked subject-object pair is then position-encoded by absolute
frame index, re-encoded inside sliding temporal windows, and aggregated back
to one embedding per (frame, pair).

Order conventions fixed here: fusion concatenates [head, tail, frequencies];
window starts are 0, s, 2s, ... plus a final window ending at the last frame
so every position is covered (stride must not exceed the window length).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import numcore as nc
from .errors import ContractError
from .freqgate import FrequencyGate, FrequencyPrior, frequency_correct, gate_values, uniform_prior


@dataclass
class PairEmbedding:
    """One subject-object pair observed in one frame."""
    frame: int
    subj: int
    obj: int
    feat: np.ndarray


# ---------------------------------------------------------------------------
# encoders
# ---------------------------------------------------------------------------

class BranchEncoder(nc.Module):
    """One post-norm transformer encoder layer over a token set.

    x = LN(x + attention(x)); x = LN(x + ffn(x)). No positional information
    is injected here, so the layer is permutation equivariant; temporal order
    enters only through the positional encoding added by the global stage.
    """

    def __init__(self, d: int, h: int, rng: nc.Rng, ffn_mult: int = 2):
        if d % h != 0:
            raise ContractError(f"model dim {d} not divisible by head count {h}")
        self.d = d
        self.h = h
        # no bias on q/k: a uniform key shift cancels inside the row softmax,
        # so a key bias would be an exactly flat (untrainable) direction
        self.q = nc.Linear(d, d, rng.spawn(0), bias=False)
        self.k = nc.Linear(d, d, rng.spawn(1), bias=False)
        self.v = nc.Linear(d, d, rng.spawn(2))
        self.o = nc.Linear(d, d, rng.spawn(3))
        self.ffn1 = nc.Linear(d, ffn_mult * d, rng.spawn(4))
        self.ffn2 = nc.Linear(ffn_mult * d, d, rng.spawn(5))

    def __call__(self, x: nc.Tensor) -> nc.Tensor:
        """x: (..., tokens, d). Leading axes are independent token sets
        attended over in parallel; attention never crosses them."""
        if x.data.ndim < 2:
            raise ContractError("encoder expects (..., tokens, d)")
        n = x.shape[-2]
        if n == 0:
            raise ContractError("encoder requires a non-empty token set")
        if x.shape[-1] != self.d:
            raise ContractError(f"token dim {x.shape[-1]} != encoder dim {self.d}")
        dh = self.d // self.h
        q = nc.split_heads(self.q(x), self.h)
        k = nc.split_heads(self.k(x), self.h)
        v = nc.split_heads(self.v(x), self.h)
        mixed = nc.attention(q, k, v, 1.0 / np.sqrt(dh))   # (..., h, n, dh)
        x = nc.layer_norm(self.o(nc.merge_heads(mixed)), residual=x)
        hidden = nc.affine(x, self.ffn1.w, self.ffn1.b, act="relu")
        x = nc.layer_norm(self.ffn2(hidden), residual=x)
        return x

    def zero_mixing(self):
        """Zero the attention output projection and last FFN layer, reducing
        the layer to its residual-plus-normalization path. Test hook."""
        self.o.w.data[:] = 0.0
        self.o.b.data[:] = 0.0
        self.ffn2.w.data[:] = 0.0
        self.ffn2.b.data[:] = 0.0

    def copy_weights_from(self, other: "BranchEncoder"):
        mine, theirs = self.parameters(), other.parameters()
        for key, p in mine.items():
            p.data = np.array(theirs[key].data)


def encode_local_head(feats: nc.Tensor, encoder: BranchEncoder) -> nc.Tensor:
    """Plain branch: one encoder pass over a within-frame pair set."""
    return encoder(feats)


def encode_local_tail(feats: nc.Tensor, prior: FrequencyPrior,
                      freq_gate: FrequencyGate, encoder: BranchEncoder) -> nc.Tensor:
    """Frequency-corrected branch: gate-blended normalization, then its own
    encoder (no parameter sharing with the head branch)."""
    corrected = frequency_correct(feats, gate_values(prior, freq_gate))
    return encoder(corrected)


# ---------------------------------------------------------------------------
# fusion
# ---------------------------------------------------------------------------

class FusionGate(nc.Module):
    """Per-element gate over [head || tail || frequency vector].

    Zero bias and small weights at init keep the starting gate near 0.5 so
    neither branch dominates before training.
    """

    def __init__(self, d: int, n_classes: int, rng: nc.Rng, init_scale: float = 1e-2):
        self.w = nc.Tensor(rng.uniform_range(-init_scale, init_scale, (2 * d + n_classes, d)),
                           requires_grad=True)
        self.b = nc.Tensor(np.zeros(d), requires_grad=True)
        self.d = d
        self.n_classes = n_classes


def fuse_local(h: nc.Tensor, t: nc.Tensor, f: np.ndarray, gate: FusionGate) -> nc.Tensor:
    """Z = G * H + (1 - G) * T with G = sigmoid([H || T || f] W + b)."""
    if h.shape != t.shape:
        raise ContractError(f"branch shapes differ: {h.shape} vs {t.shape}")
    f = np.asarray(f, dtype=np.float64)
    if h.shape[-1] != gate.d or f.size != gate.n_classes:
        raise ContractError("fusion gate dimensions do not match inputs")
    f_rows = nc.Tensor(np.broadcast_to(f, h.shape[:-1] + (f.size,)).copy())
    g = nc.sigmoid(nc.matmul(nc.concat([h, t, f_rows], axis=-1), gate.w) + gate.b)
    return g * h + (1.0 - g) * t


# ---------------------------------------------------------------------------
# positional encoding and windowed global encoding
# ---------------------------------------------------------------------------

def pe_at(positions, d: int) -> np.ndarray:
    """Sinusoidal encoding at the given absolute positions: even columns
    sin(pos / 10000^(2i/d)), odd columns the matching cos."""
    if d % 2 != 0:
        raise ContractError("positional encoding dimension must be even")
    positions = np.asarray(positions, dtype=np.float64).reshape(-1, 1)
    rates = 10000.0 ** (-np.arange(0, d, 2, dtype=np.float64) / d)
    angles = positions * rates
    out = np.empty((positions.size, d))
    out[:, 0::2] = np.sin(angles)
    out[:, 1::2] = np.cos(angles)
    return out


def positional_encoding(length: int, d: int) -> np.ndarray:
    return pe_at(np.arange(length), d)


@dataclass
class WindowConfig:
    """Sliding-window layout for the global branch."""
    w: int = 4
    s: int = 2
    mode: str = "average"

    def __post_init__(self):
        if self.w < 1:
            raise ContractError("window length must be >= 1")
        if self.s < 1:
            raise ContractError("window stride must be >= 1")
        if self.s > self.w:
            raise ContractError("stride must not exceed window length "
                                "(every position must fall in some window)")
        if self.mode not in ("average", "triangular"):
            raise ContractError(f"unknown window weighting mode '{self.mode}'")


@dataclass
class WindowedSequence:
    """Per-window encoder outputs over one temporal sequence."""
    length: int
    windows: list = field(default_factory=list)  # (start, Tensor(window_len, d))


def window_starts(length: int, w: int, s: int) -> list:
    w = min(w, length)
    starts = list(range(0, length - w + 1, s))
    if starts[-1] != length - w:
        starts.append(length - w)
    return starts


def encode_global(z: nc.Tensor, frames, encoder: BranchEncoder,
                  cfg: WindowConfig) -> WindowedSequence:
    """Add absolute-position encoding, then encode each sliding window.

    Absolute frame indices feed the encoding, so shifting a whole clip in
    time changes the output; that is deliberate, not an invariance.
    """
    length = z.shape[0]
    if length == 0:
        raise ContractError("cannot encode an empty frame sequence")
    frames = np.asarray(frames, dtype=np.int64)
    if frames.size != length:
        raise ContractError("one frame index required per sequence row")
    if np.any(np.diff(frames) <= 0):
        raise ContractError("frame indices must be strictly increasing")
    x = z + nc.Tensor(pe_at(frames, z.shape[-1]))
    w = min(cfg.w, length)
    out = WindowedSequence(length=length)
    for start in window_starts(length, w, cfg.s):
        out.windows.append((start, encoder(x[start:start + w])))
    return out


def _window_weights(m: int, mode: str) -> np.ndarray:
    if mode == "average":
        return np.ones(m)
    # triangular: peak at the window center, falling off by one per step
    center = (m - 1) / 2.0
    return (m + 1) / 2.0 - np.abs(np.arange(m) - center)


def aggregate_windows(seq: WindowedSequence, cfg: WindowConfig) -> nc.Tensor:
    """Weighted per-position mean over every window containing the position."""
    if not seq.windows:
        raise ContractError("no windows to aggregate")
    length = seq.length
    d = seq.windows[0][1].shape[-1]
    total = np.zeros(length)
    acc = nc.Tensor(np.zeros((length, d)))
    for start, values in seq.windows:
        m = values.shape[0]
        weights = _window_weights(m, cfg.mode)
        scatter = np.zeros((length, m))
        scatter[np.arange(start, start + m), np.arange(m)] = weights
        acc = acc + nc.matmul(nc.Tensor(scatter), values)
        total[start:start + m] += weights
    return acc * nc.Tensor((1.0 / total)[:, None])


# ---------------------------------------------------------------------------
# full generator
# ---------------------------------------------------------------------------

def _group_indices(keys: np.ndarray) -> list:
    """(key, ascending index array) per distinct key, keys in ascending order."""
    order = np.argsort(keys, kind="stable")
    groups = []
    for key in np.unique(keys):
        groups.append((key, order[keys[order] == key]))
    return groups


class Dpeg(nc.Module):
    """Local dual-branch encoding, gated fusion, windowed global refinement.

    ``dual_branch=False`` removes the tail branch and fusion gate entirely
    (the fused output is the head branch). ``frequency=False`` keeps the tail
    branch but freezes its correction gate at 0.5 and feeds the fusion gate a
    uniform frequency vector.
    """

    def __init__(self, d: int, h: int, n_classes: int, rng: nc.Rng,
                 window: WindowConfig | None = None, ffn_mult: int = 2,
                 dual_branch: bool = True, frequency: bool = True):
        self.d = d
        self.n_classes = n_classes
        self.dual_branch = dual_branch
        self.frequency = frequency
        self.window = window if window is not None else WindowConfig()
        self.head_enc = BranchEncoder(d, h, rng.spawn(0), ffn_mult)
        if dual_branch:
            self.tail_enc = BranchEncoder(d, h, rng.spawn(1), ffn_mult)
            self.fusion = FusionGate(d, n_classes, rng.spawn(2))
            if frequency:
                self.freq_gate = FrequencyGate(n_classes, d, rng.spawn(3))
        self.global_enc = BranchEncoder(d, h, rng.spawn(4), ffn_mult)

    def forward(self, feats: nc.Tensor, frames: np.ndarray, pair_ids: np.ndarray,
                prior: FrequencyPrior) -> nc.Tensor:
        """feats: (N, d) projected pair features; frames/pair_ids: (N,) metadata.

        Returns refined embeddings aligned row-for-row with the input.
        """
        n = feats.shape[0]
        if n == 0:
            raise ContractError("empty clip")
        frames = np.asarray(frames, dtype=np.int64)
        pair_ids = np.asarray(pair_ids, dtype=np.int64)
        if frames.size != n or pair_ids.size != n:
            raise ContractError("metadata length must match feature rows")
        if not self.frequency:
            prior = uniform_prior(self.n_classes)
        elif prior.n_classes != self.n_classes:
            raise ContractError(f"prior has {prior.n_classes} classes, "
                                f"model expects {self.n_classes}")

        z = self._encode_frames(feats, frames, prior)
        return self._refine_pairs(z, frames, pair_ids)

    __call__ = forward

    def _encode_frames(self, feats: nc.Tensor, frames: np.ndarray,
                       prior: FrequencyPrior) -> nc.Tensor:
        if self.dual_branch:
            if self.frequency:
                g = gate_values(prior, self.freq_gate)
            else:
                g = nc.Tensor(np.full(self.d, 0.5))
            corrected = frequency_correct(feats, g)
        groups = _group_indices(frames)
        if len({idx.size for _, idx in groups}) == 1:
            # rectangular clip: one batched encoder pass over all frames
            order = np.stack([idx for _, idx in groups])
            h = encode_local_head(feats[order], self.head_enc)
            if self.dual_branch:
                t = self.tail_enc(corrected[order])
                z = fuse_local(h, t, prior.f, self.fusion)
            else:
                z = h
            flat = nc.reshape(z, (order.size, self.d))
            return flat[np.argsort(order.ravel())]
        chunks, perm = [], []
        for _, idx in groups:
            h = encode_local_head(feats[idx], self.head_enc)
            if self.dual_branch:
                t = self.tail_enc(corrected[idx])
                z = fuse_local(h, t, prior.f, self.fusion)
            else:
                z = h
            chunks.append(z)
            perm.extend(idx.tolist())
        stacked = nc.concat(chunks, axis=0)
        return stacked[np.argsort(np.asarray(perm))]

    def _refine_pairs(self, z: nc.Tensor, frames: np.ndarray,
                      pair_ids: np.ndarray) -> nc.Tensor:
        seqs = []
        for _, idx in _group_indices(pair_ids):
            by_time = idx[np.argsort(frames[idx], kind="stable")]
            if np.unique(frames[by_time]).size != by_time.size:
                raise ContractError("duplicate (frame, pair) rows in clip")
            seqs.append(by_time)
        fr = [frames[s] for s in seqs]
        if len({s.size for s in seqs}) == 1 and all(np.array_equal(f, fr[0]) for f in fr):
            return self._refine_rectangular(z, np.stack(seqs), fr[0])
        chunks, perm = [], []
        for by_time in seqs:
            seq = encode_global(z[by_time], frames[by_time], self.global_enc, self.window)
            chunks.append(aggregate_windows(seq, self.window))
            perm.extend(by_time.tolist())
        stacked = nc.concat(chunks, axis=0)
        return stacked[np.argsort(np.asarray(perm))]

    def _refine_rectangular(self, z: nc.Tensor, order: np.ndarray,
                            frames: np.ndarray) -> nc.Tensor:
        """All pairs cover the same frames: encode each window once for the
        whole (pairs, frames, d) block and aggregate with shared scatter
        weights. Equivalent to the per-pair path up to summation order."""
        length = order.shape[1]
        x = z[order] + nc.Tensor(pe_at(frames, self.d))
        w = min(self.window.w, length)
        total = np.zeros(length)
        acc = None
        for start in window_starts(length, w, self.window.s):
            win = self.global_enc(x[:, start:start + w])
            weights = _window_weights(w, self.window.mode)
            scatter = np.zeros((length, w))
            scatter[np.arange(start, start + w), np.arange(w)] = weights
            term = nc.matmul(nc.Tensor(scatter), win)
            acc = term if acc is None else acc + term
            total[start:start + w] += weights
        refined = acc * nc.Tensor((1.0 / total)[:, None])
        flat = nc.reshape(refined, (order.size, self.d))
        return flat[np.argsort(order.ravel())]
